"""Optimization loop: MOS normalization, AdamW with decoupled weight decay,
weight averaging for evaluation, checkpoint selection by validation rank
correlation, and two-pass test-time prediction.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import encoder, grid, metrics, model, objective, pipeline
from .errors import DataError, NumericalError


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    lr_schedule: str = "constant"
    weight_decay: float = 6e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    weight_ema_decay: float = 0.999
    tta_fraction: float = 0.5

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError("lr_schedule must be 'constant' or 'cosine'")

    @classmethod
    def from_run_config(cls, rc):
        return cls(
            learning_rate=rc.lr,
            lr_schedule=rc.lr_schedule,
            weight_decay=rc.weight_decay,
            adam_beta1=rc.adam_beta1,
            adam_beta2=rc.adam_beta2,
            adam_epsilon=rc.adam_epsilon,
            batch_size=rc.batch_size,
            epochs=rc.epochs,
            seed=rc.seed,
            weight_ema_decay=rc.weight_ema_decay,
            tta_fraction=rc.tta_fraction,
        )

    def epoch_lr(self, epoch):
        """Learning rate for a 1-based epoch under the configured schedule."""
        if self.lr_schedule == "constant":
            return self.learning_rate
        frac = (epoch - 1) / max(self.epochs, 1)
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class MosNormalizer:
    mean: float
    std: float

    def apply(self, y):
        return (np.asarray(y, dtype=np.float64) - self.mean) / self.std

    def invert(self, y_norm):
        return np.asarray(y_norm, dtype=np.float64) * self.std + self.mean


def fit_normalizer(mos_values):
    """Training-set mean and population standard deviation."""
    vals = np.asarray(mos_values, dtype=np.float64)
    if vals.size < 2:
        raise DataError("normalizer needs >= 2 training samples")
    mean = float(vals.mean())
    std = float(vals.std())
    if std < 1e-12 * max(1.0, abs(mean)):
        raise DataError("degenerate MOS distribution: training scores are constant")
    return MosNormalizer(mean=mean, std=std)


@dataclass
class AdamWState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(tensors, grads, state, lr, weight_decay, beta1, beta2, eps):
    """One decoupled-weight-decay Adam update, in place. Decay multiplies
    every tensor by (1 - lr * wd) independently of the moment step."""
    state.t += 1
    t = state.t
    for name, theta in tensors.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        theta *= 1.0 - lr * weight_decay
        theta -= lr * m_hat / (np.sqrt(v_hat) + eps)


def weight_ema(shadow, tensors, decay):
    """shadow <- decay * shadow + (1 - decay) * params, elementwise in place."""
    for name, arr in tensors.items():
        s = shadow[name]
        s *= decay
        s += (1.0 - decay) * arr


def select_checkpoint(history):
    """Pick the (epoch, val_srcc, snapshot) entry with maximum validation
    SRCC; ties resolve to the earliest epoch."""
    if not history:
        raise DataError("no evaluated epochs to select from")
    best = history[0]
    for entry in history[1:]:
        if entry[1] > best[1]:
            best = entry
    return best


def _forward_seed(seed, step, index):
    ss = np.random.SeedSequence((int(seed), int(step), int(index)))
    return int(ss.generate_state(1)[0])


def _term_value(term, preds, targets, obj_config):
    if term == "mse":
        return objective.loss_mse(preds, targets)
    if term == "corr":
        return objective.loss_corr(preds, targets)
    if term == "rank":
        return objective.loss_rank(preds, targets, obj_config.rank_margin)
    return objective.loss_var(preds, targets)


def _all_raw_losses(preds, targets, obj_config):
    """All four raw terms for the step log. Inactive terms undefined on this
    batch (e.g. correlation against constant targets) record as nan; for
    active terms the error propagates."""
    active = obj_config.active_terms()
    out = {}
    for term in objective.TERMS:
        try:
            out[term] = _term_value(term, preds, targets, obj_config)
        except DataError:
            if term in active:
                raise
            out[term] = math.nan
    return out


@dataclass
class StepRecord:
    step: int
    raw: dict
    mu: dict
    total: float


def train_step(
    batch,
    proj,
    model_params,
    opt_state,
    ema_state,
    run_config,
    step,
    lr=None,
):
    """One optimization step over a batch of (graph, raw features, normalized
    target) triples. Mutates params, optimizer state, EMA scales, and batch-
    norm running statistics; returns the loss breakdown. `lr` overrides the
    configured base rate (used by the epoch-level schedule).
    """
    if len(batch) < 2:
        raise DataError("train_step needs a batch of >= 2 graphs")
    tc = TrainConfig.from_run_config(run_config)
    if lr is None:
        lr = tc.learning_rate
    model_config = run_config.model_config()
    obj_config = run_config.objective_config()

    traces = []
    features = []
    preds = np.empty(len(batch))
    for idx, (g, raw, _target) in enumerate(batch):
        nodes = encoder.project(raw, proj)
        seed = _forward_seed(tc.seed, step, idx)
        trace = model.forward(
            g, nodes, model_params, model_config, mode="train", rng_seed=seed
        )
        traces.append(trace)
        features.append(nodes)
        preds[idx] = trace.calibrated_score
    targets = np.array([t for (_g, _raw, t) in batch], dtype=np.float64)

    raws = _all_raw_losses(preds, targets, obj_config)
    active_raws = {t: raws[t] for t in obj_config.active_terms()}
    grads_by_term = objective.loss_gradients(preds, targets, obj_config)
    updated_first = False
    if not all(ema_state.initialized(t) for t in obj_config.active_terms()):
        # first step: scales start at the first observed raw values
        objective.ema_update(ema_state, active_raws, obj_config.beta)
        updated_first = True
    breakdown = objective.normalized_total(raws, grads_by_term, ema_state, obj_config)
    if not math.isfinite(breakdown.total):
        raise NumericalError(f"non-finite loss at step {step}: {breakdown.raw}")

    tensors = model.named_tensors(proj, model_params)
    total_grads = {name: np.zeros_like(arr) for name, arr in tensors.items()}
    for idx, (g, raw, _target) in enumerate(batch):
        m_grads, d_feat = model.backward(
            g, features[idx], model_params, model_config, traces[idx],
            breakdown.d_pred[idx],
        )
        for name, val in m_grads.items():
            total_grads[name] += val
        d_w, d_b = encoder.project_backward(raw, d_feat)
        total_grads["proj.weight"] += d_w
        total_grads["proj.bias"] += d_b
    for name, g_arr in total_grads.items():
        if not np.all(np.isfinite(g_arr)):
            raise NumericalError(f"numerical blow-up in gradient of {name}")

    # commit batch-norm running stats in deterministic batch order
    for trace in traces:
        for layer_params, lt in zip(model_params.layers, trace.layer_traces):
            layer_params.bn_run_mean *= 1.0 - model.BN_MOMENTUM
            layer_params.bn_run_mean += model.BN_MOMENTUM * lt.batch_mean
            layer_params.bn_run_var *= 1.0 - model.BN_MOMENTUM
            layer_params.bn_run_var += model.BN_MOMENTUM * lt.batch_var

    adamw_step(
        tensors,
        total_grads,
        opt_state,
        lr,
        tc.weight_decay,
        tc.adam_beta1,
        tc.adam_beta2,
        tc.adam_epsilon,
    )
    if not updated_first:
        objective.ema_update(ema_state, active_raws, obj_config.beta)
    return breakdown


def _snapshot(shadow, model_params):
    out = {name: arr.copy() for name, arr in shadow.items()}
    for name, arr in model.named_buffers(model_params).items():
        out[name] = arr.copy()
    return out


def eval_tensors(tensor_dict, run_config, d_raw):
    """Rehydrate parameter structs from a flat tensor dict (shadow snapshot
    or loaded checkpoint)."""
    mc = run_config.model_config()
    if "proj.weight" not in tensor_dict:
        raise DataError("tensor set lacks proj.weight")
    proj = encoder.ProjectionParams(
        weight=np.array(tensor_dict["proj.weight"], dtype=np.float64),
        bias=np.array(tensor_dict["proj.bias"], dtype=np.float64),
    )
    if proj.weight.shape != (d_raw, run_config.d):
        raise DataError(
            f"projection shape mismatch: checkpoint {proj.weight.shape}, "
            f"expected ({d_raw}, {run_config.d})"
        )
    layers = []
    for i in range(mc.layers):
        prefix = f"layers.{i}."
        try:
            layers.append(
                model.LayerParams(
                    conv_w=np.array(tensor_dict[prefix + "conv_w"], dtype=np.float64),
                    res_w=np.array(tensor_dict[prefix + "res_w"], dtype=np.float64),
                    bn_gamma=np.array(tensor_dict[prefix + "bn_gamma"], dtype=np.float64),
                    bn_beta=np.array(tensor_dict[prefix + "bn_beta"], dtype=np.float64),
                    bn_run_mean=np.array(
                        tensor_dict[prefix + "bn_run_mean"], dtype=np.float64
                    ),
                    bn_run_var=np.array(
                        tensor_dict[prefix + "bn_run_var"], dtype=np.float64
                    ),
                )
            )
        except KeyError as exc:
            raise DataError(f"tensor set lacks {exc.args[0]}") from None
    try:
        if mc.gate_variant == "plain-mlp":
            gate = model.PlainGateParams(
                w1=np.array(tensor_dict["gate.w1"], dtype=np.float64),
                b1=np.array(tensor_dict["gate.b1"], dtype=np.float64),
                w2=np.array(tensor_dict["gate.w2"], dtype=np.float64),
                b2=np.array(tensor_dict["gate.b2"], dtype=np.float64),
            )
        else:
            gate = model.GatedGateParams(
                v_w=np.array(tensor_dict["gate.v_w"], dtype=np.float64),
                v_b=np.array(tensor_dict["gate.v_b"], dtype=np.float64),
                u_w=np.array(tensor_dict["gate.u_w"], dtype=np.float64),
                u_b=np.array(tensor_dict["gate.u_b"], dtype=np.float64),
                out_w=np.array(tensor_dict["gate.out_w"], dtype=np.float64),
                out_b=np.array(tensor_dict["gate.out_b"], dtype=np.float64),
            )
        head = model.HeadParams(
            w1=np.array(tensor_dict["head.w1"], dtype=np.float64),
            b1=np.array(tensor_dict["head.b1"], dtype=np.float64),
            w2=np.array(tensor_dict["head.w2"], dtype=np.float64),
            b2=np.array(tensor_dict["head.b2"], dtype=np.float64),
        )
        params = model.ModelParams(
            layers=layers,
            gate=gate,
            head=head,
            calib_s=np.array(tensor_dict["calib.s"], dtype=np.float64),
            calib_b=np.array(tensor_dict["calib.b"], dtype=np.float64),
        )
    except KeyError as exc:
        raise DataError(f"tensor set lacks {exc.args[0]}") from None
    return proj, params


def predict_normalized(prepared, proj, model_params, run_config):
    """Single-pass eval-mode prediction on the normalized score scale."""
    nodes, g = pipeline.node_graph(prepared.raw, prepared.layout, proj, run_config)
    trace = model.forward(
        g, nodes, model_params, run_config.model_config(), mode="eval"
    )
    return trace.calibrated_score


def predict_tta(prepared, tensor_dict, run_config, normalizer, tta=True):
    """Two-pass prediction on the original MOS scale: the canonical layout
    plus an offset lattice, averaged on the normalized scale. Cached inputs
    carry no pixels, so they always run single-pass."""
    proj, params = eval_tensors(tensor_dict, run_config, prepared.raw.d_raw)
    scores = [predict_normalized(prepared, proj, params, run_config)]
    if tta and run_config.tta_fraction > 0.0 and prepared.image is not None:
        dims = grid.ImageDims(
            width=prepared.image.shape[1], height=prepared.image.shape[0]
        )
        shifted = grid.offset_layout(prepared.layout, dims, run_config.tta_fraction)
        patches = grid.extract_patches(
            prepared.image, shifted, run_config.patch_size
        )
        raw2 = encoder.encode_patches(patches)
        second = pipeline.PreparedSample(
            sample=prepared.sample, raw=raw2, layout=shifted, image=prepared.image
        )
        scores.append(predict_normalized(second, proj, params, run_config))
    return float(normalizer.invert(float(np.mean(scores))))


@dataclass
class EpochRecord:
    epoch: int
    train: metrics.MetricReport
    val: metrics.MetricReport


@dataclass
class TrainResult:
    best_epoch: int
    best_val: metrics.MetricReport
    checkpoint: dict
    normalizer: MosNormalizer
    step_log: list
    epoch_log: list
    train_predictions: list  # (path, mos, prediction) at the best epoch
    val_predictions: list


def _split_metrics(prepared_list, proj, params, run_config, normalizer):
    preds = np.array(
        [predict_normalized(p, proj, params, run_config) for p in prepared_list]
    )
    preds = normalizer.invert(preds)
    mos = np.array([p.sample.mos for p in prepared_list])
    rows = [
        (p.sample.path, p.sample.mos, float(pred))
        for p, pred in zip(prepared_list, preds)
    ]
    return metrics.report(preds, mos), rows


def train_model(prepared, run_config, progress=None):
    """Full training over prepared samples (train + val splits required).

    Deterministic for a fixed (seed, config, data): batches, dropout masks,
    and weight updates all derive from the configured seed.
    """
    tc = TrainConfig.from_run_config(run_config)
    train_set = [p for p in prepared if p.sample.split == "train"]
    val_set = [p for p in prepared if p.sample.split == "val"]
    if len(train_set) < 2:
        raise DataError("training requires >= 2 samples in the train split")
    if not val_set:
        raise DataError("training requires a val split for checkpoint selection")
    d_raws = {p.raw.d_raw for p in prepared}
    if len(d_raws) != 1:
        raise DataError(f"samples disagree on feature width: {sorted(d_raws)}")
    d_raw = d_raws.pop()

    normalizer = fit_normalizer([p.sample.mos for p in train_set])
    targets_norm = [float(normalizer.apply(p.sample.mos)) for p in train_set]

    init_rng = np.random.default_rng(np.random.SeedSequence(int(run_config.seed)))
    proj = encoder.init_projection(d_raw, run_config.d, init_rng)
    model_params = model.init_model_params(run_config.model_config(), init_rng)
    tensors = model.named_tensors(proj, model_params)
    shadow = {name: arr.copy() for name, arr in tensors.items()}
    opt_state = AdamWState()
    ema_state = objective.EmaState()

    step_log = []
    epoch_log = []
    best = None  # (epoch, val_srcc, snapshot, val_report, train_rows, val_rows)
    step = 0
    for epoch in range(1, tc.epochs + 1):
        epoch_lr = tc.epoch_lr(epoch)
        order_rng = np.random.default_rng(
            np.random.SeedSequence((int(tc.seed), 0xE0C, int(epoch)))
        )
        order = order_rng.permutation(len(train_set))
        for start in range(0, len(order), tc.batch_size):
            chunk = order[start : start + tc.batch_size]
            if len(chunk) < 2:
                continue  # a trailing singleton cannot form a batch
            step += 1
            batch = []
            for i in chunk:
                p = train_set[i]
                _nodes, g = pipeline.node_graph(p.raw, p.layout, proj, run_config)
                batch.append((g, p.raw, targets_norm[i]))
            breakdown = train_step(
                batch, proj, model_params, opt_state, ema_state, run_config, step,
                lr=epoch_lr,
            )
            mu = {
                term: breakdown.mu_used.get(term, math.nan)
                for term in objective.TERMS
            }
            step_log.append(
                StepRecord(step=step, raw=breakdown.raw, mu=mu, total=breakdown.total)
            )
            weight_ema(shadow, tensors, tc.weight_ema_decay)

        eval_proj, eval_params = eval_tensors(
            {**shadow, **model.named_buffers(model_params)},
            run_config,
            d_raw,
        )
        train_report, train_rows = _split_metrics(
            train_set, eval_proj, eval_params, run_config, normalizer
        )
        val_report, val_rows = _split_metrics(
            val_set, eval_proj, eval_params, run_config, normalizer
        )
        epoch_log.append(EpochRecord(epoch=epoch, train=train_report, val=val_report))
        if best is None or val_report.srcc > best[1]:
            best = (
                epoch,
                val_report.srcc,
                _snapshot(shadow, model_params),
                val_report,
                train_rows,
                val_rows,
            )
        if progress is not None:
            progress(epoch, train_report, val_report)

    return TrainResult(
        best_epoch=best[0],
        best_val=best[3],
        checkpoint=best[2],
        normalizer=normalizer,
        step_log=step_log,
        epoch_log=epoch_log,
        train_predictions=best[4],
        val_predictions=best[5],
    )
