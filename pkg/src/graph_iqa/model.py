"""Residual graph-convolution stack with gated attention readout,
regression head, affine calibration, and exact reverse-mode gradients.

Each block runs batch norm -> ReLU -> graph convolution -> dropout on the
aggregation branch and mixes it with a learnable linear residual:
H' = alpha * U + (1 - alpha) * H @ R. Batch statistics are taken over the
nodes of the single input graph; running estimates serve eval mode.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1

GATE_VARIANTS = ("plain-mlp", "gated-tanh-sigmoid")


@dataclass(frozen=True)
class ModelConfig:
    d: int
    layers: int = 3
    alpha: float = 0.55
    dropout_rate: float = 0.15
    gate_hidden: int = 128
    head_hidden: int = 256
    gate_variant: str = "plain-mlp"

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("embedding width d must be >= 1")
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.gate_variant not in GATE_VARIANTS:
            raise ValueError(f"unknown gate_variant {self.gate_variant!r}")


@dataclass
class LayerParams:
    conv_w: np.ndarray
    res_w: np.ndarray
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_run_mean: np.ndarray
    bn_run_var: np.ndarray


@dataclass
class PlainGateParams:
    w1: np.ndarray  # (d, gate_hidden)
    b1: np.ndarray
    w2: np.ndarray  # (gate_hidden,)
    b2: np.ndarray  # scalar


@dataclass
class GatedGateParams:
    v_w: np.ndarray
    v_b: np.ndarray
    u_w: np.ndarray
    u_b: np.ndarray
    out_w: np.ndarray
    out_b: np.ndarray


@dataclass
class HeadParams:
    w1: np.ndarray  # (d, head_hidden)
    b1: np.ndarray
    w2: np.ndarray  # (head_hidden,)
    b2: np.ndarray


@dataclass
class ModelParams:
    layers: list
    gate: object
    head: HeadParams
    calib_s: np.ndarray  # 0-d
    calib_b: np.ndarray  # 0-d


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model_params(config, rng):
    """Seeded uniform +-1/sqrt(fan_in) weights; residual projections start
    at identity so alpha alone controls the initial mixing."""
    d = config.d
    layers = []
    for _ in range(config.layers):
        layers.append(
            LayerParams(
                conv_w=_uniform(rng, d, (d, d)),
                res_w=np.eye(d),
                bn_gamma=np.ones(d),
                bn_beta=np.zeros(d),
                bn_run_mean=np.zeros(d),
                bn_run_var=np.ones(d),
            )
        )
    gh = config.gate_hidden
    if config.gate_variant == "plain-mlp":
        gate = PlainGateParams(
            w1=_uniform(rng, d, (d, gh)),
            b1=np.zeros(gh),
            w2=_uniform(rng, gh, (gh,)),
            b2=np.zeros(()),
        )
    else:
        gate = GatedGateParams(
            v_w=_uniform(rng, d, (d, gh)),
            v_b=np.zeros(gh),
            u_w=_uniform(rng, d, (d, gh)),
            u_b=np.zeros(gh),
            out_w=_uniform(rng, gh, (gh,)),
            out_b=np.zeros(()),
        )
    hh = config.head_hidden
    head = HeadParams(
        w1=_uniform(rng, d, (d, hh)),
        b1=np.zeros(hh),
        w2=_uniform(rng, hh, (hh,)),
        b2=np.zeros(()),
    )
    return ModelParams(
        layers=layers,
        gate=gate,
        head=head,
        calib_s=np.array(1.0),
        calib_b=np.array(0.0),
    )


def named_tensors(proj, model):
    """Flat name -> array view over every trainable tensor. The arrays are
    shared with the param structs, so in-place updates mutate the model."""
    out = {"proj.weight": proj.weight, "proj.bias": proj.bias}
    out.update(model_tensors(model))
    return out


def model_tensors(model):
    """Trainable tensors of the graph model, excluding the input projection."""
    out = {}
    for i, lp in enumerate(model.layers):
        out[f"layers.{i}.conv_w"] = lp.conv_w
        out[f"layers.{i}.res_w"] = lp.res_w
        out[f"layers.{i}.bn_gamma"] = lp.bn_gamma
        out[f"layers.{i}.bn_beta"] = lp.bn_beta
    gate = model.gate
    if isinstance(gate, PlainGateParams):
        out.update(
            {
                "gate.w1": gate.w1,
                "gate.b1": gate.b1,
                "gate.w2": gate.w2,
                "gate.b2": gate.b2,
            }
        )
    else:
        out.update(
            {
                "gate.v_w": gate.v_w,
                "gate.v_b": gate.v_b,
                "gate.u_w": gate.u_w,
                "gate.u_b": gate.u_b,
                "gate.out_w": gate.out_w,
                "gate.out_b": gate.out_b,
            }
        )
    out.update(
        {
            "head.w1": model.head.w1,
            "head.b1": model.head.b1,
            "head.w2": model.head.w2,
            "head.b2": model.head.b2,
            "calib.s": model.calib_s,
            "calib.b": model.calib_b,
        }
    )
    return out


def named_buffers(model):
    """Batch-norm running statistics (non-trainable state)."""
    out = {}
    for i, lp in enumerate(model.layers):
        out[f"layers.{i}.bn_run_mean"] = lp.bn_run_mean
        out[f"layers.{i}.bn_run_var"] = lp.bn_run_var
    return out


def gcn_layer(a_hat, h, w, activation="relu"):
    """One graph convolution activation(a_hat @ h @ w)."""
    if h.shape[1] != w.shape[0]:
        raise DataError(f"gcn shape mismatch: h {h.shape} vs w {w.shape}")
    out = a_hat @ h @ w
    if activation == "relu":
        return np.maximum(out, 0.0)
    if activation is None or activation == "linear":
        return out
    raise ValueError(f"unknown activation {activation!r}")


@dataclass
class _LayerTrace:
    h_in: np.ndarray
    xhat: np.ndarray
    inv_std: np.ndarray
    bn_out: np.ndarray
    agg: np.ndarray
    mask: np.ndarray | None
    batch_mean: np.ndarray | None
    batch_var: np.ndarray | None


@dataclass
class ForwardTrace:
    node_activations: list  # per-layer outputs H_1 .. H_L
    attention_logits: np.ndarray
    attention_weights: np.ndarray
    pooled: np.ndarray
    raw_score: float
    calibrated_score: float
    dropout_masks: list
    mode: str
    layer_traces: list = field(repr=False, default_factory=list)
    gate_cache: dict = field(repr=False, default_factory=dict)
    head_cache: dict = field(repr=False, default_factory=dict)


def _gate_forward(h, gate, variant):
    if variant == "plain-mlp":
        pre = h @ gate.w1 + gate.b1
        t = np.tanh(pre)
        logits = t @ gate.w2 + gate.b2
        return logits, {"t": t}
    pre_t = h @ gate.v_w + gate.v_b
    pre_s = h @ gate.u_w + gate.u_b
    t = np.tanh(pre_t)
    s = 1.0 / (1.0 + np.exp(-pre_s))
    logits = (t * s) @ gate.out_w + gate.out_b
    return logits, {"t": t, "s": s}


def residual_block(a_hat, h, layer_params, alpha, mode, dropout_rate=0.0, rng=None):
    """Standalone block evaluation used by forward(); returns (H', trace)."""
    lp = layer_params
    if mode == "train":
        batch_mean = h.mean(axis=0)
        batch_var = h.var(axis=0)
        mean, var = batch_mean, batch_var
    else:
        batch_mean = batch_var = None
        mean, var = lp.bn_run_mean, lp.bn_run_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (h - mean) * inv_std
    bn_out = lp.bn_gamma * xhat + lp.bn_beta
    act = np.maximum(bn_out, 0.0)
    agg = a_hat @ act
    conv = agg @ lp.conv_w
    mask = None
    if mode == "train" and dropout_rate > 0.0:
        mask = rng.random(conv.shape) >= dropout_rate
        u = conv * mask / (1.0 - dropout_rate)
    else:
        u = conv
    res = h @ lp.res_w
    out = alpha * u + (1.0 - alpha) * res
    trace = _LayerTrace(
        h_in=h,
        xhat=xhat,
        inv_std=inv_std,
        bn_out=bn_out,
        agg=agg,
        mask=mask,
        batch_mean=batch_mean,
        batch_var=batch_var,
    )
    return out, trace


def attention_readout(h, gate, variant):
    """Softmax-pooled graph vector and the attention weights."""
    logits, cache = _gate_forward(h, gate, variant)
    shifted = logits - logits.max()
    exp = np.exp(shifted)
    weights = exp / exp.sum()
    pooled = weights @ h
    return pooled, weights, logits, cache


def predict_head(z, head, calib_s, calib_b):
    """Two-layer regressor followed by affine calibration."""
    pre = z @ head.w1 + head.b1
    q = np.maximum(pre, 0.0)
    raw = float(q @ head.w2 + head.b2)
    calibrated = float(calib_s * raw + calib_b)
    return raw, calibrated, {"pre": pre, "q": q}


def forward(graph, features, params, config, mode="eval", rng_seed=0):
    """Full model forward over one graph; pure given (params, rng_seed)."""
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    h = features.matrix
    if h.shape[0] != graph.n_nodes:
        raise DataError(
            f"graph has {graph.n_nodes} nodes but features have {h.shape[0]} rows"
        )
    if h.shape[1] != config.d:
        raise DataError(f"features width {h.shape[1]} != configured d {config.d}")
    if len(params.layers) != config.layers:
        raise DataError(
            f"params carry {len(params.layers)} layers, config expects {config.layers}"
        )
    rng = None
    if mode == "train" and config.dropout_rate > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence(int(rng_seed)))

    layer_traces = []
    node_activations = []
    for lp in params.layers:
        h, trace = residual_block(
            graph.a_hat, h, lp, config.alpha, mode, config.dropout_rate, rng
        )
        layer_traces.append(trace)
        node_activations.append(h)

    pooled, weights, logits, gate_cache = attention_readout(
        h, params.gate, config.gate_variant
    )
    raw, calibrated, head_cache = predict_head(
        pooled, params.head, params.calib_s, params.calib_b
    )
    return ForwardTrace(
        node_activations=node_activations,
        attention_logits=logits,
        attention_weights=weights,
        pooled=pooled,
        raw_score=raw,
        calibrated_score=calibrated,
        dropout_masks=[t.mask for t in layer_traces],
        mode=mode,
        layer_traces=layer_traces,
        gate_cache=gate_cache,
        head_cache=head_cache,
    )


def _gate_backward(h, gate, variant, cache, d_logits, grads):
    if variant == "plain-mlp":
        t = cache["t"]
        grads["gate.w2"] += t.T @ d_logits
        grads["gate.b2"] += d_logits.sum()
        d_t = np.outer(d_logits, gate.w2)
        d_pre = d_t * (1.0 - t**2)
        grads["gate.w1"] += h.T @ d_pre
        grads["gate.b1"] += d_pre.sum(axis=0)
        return d_pre @ gate.w1.T
    t, s = cache["t"], cache["s"]
    grads["gate.out_w"] += (t * s).T @ d_logits
    grads["gate.out_b"] += d_logits.sum()
    d_ts = np.outer(d_logits, gate.out_w)
    d_pre_t = d_ts * s * (1.0 - t**2)
    d_pre_s = d_ts * t * s * (1.0 - s)
    grads["gate.v_w"] += h.T @ d_pre_t
    grads["gate.v_b"] += d_pre_t.sum(axis=0)
    grads["gate.u_w"] += h.T @ d_pre_s
    grads["gate.u_b"] += d_pre_s.sum(axis=0)
    return d_pre_t @ gate.v_w.T + d_pre_s @ gate.u_w.T


def backward(graph, features, params, config, trace, d_score):
    """Reverse-mode gradients of d_score * d(calibrated score)/d(theta).

    Returns (grads, d_features) where grads maps trainable tensor names to
    arrays shaped like the parameters and d_features is the gradient with
    respect to the input node-feature matrix.
    """
    grads = {name: np.zeros_like(arr) for name, arr in model_tensors(params).items()}
    d_score = float(d_score)

    # calibration and head
    grads["calib.s"] += d_score * trace.raw_score
    grads["calib.b"] += d_score
    d_raw = d_score * float(params.calib_s)
    q = trace.head_cache["q"]
    pre = trace.head_cache["pre"]
    grads["head.w2"] += q * d_raw
    grads["head.b2"] += d_raw
    d_q = params.head.w2 * d_raw
    d_pre = d_q * (pre > 0.0)
    grads["head.w1"] += np.outer(trace.pooled, d_pre)
    grads["head.b1"] += d_pre
    d_z = params.head.w1 @ d_pre

    # attention pooling: z = a @ H, a = softmax(logits)
    h_top = trace.node_activations[-1]
    a = trace.attention_weights
    d_a = h_top @ d_z
    d_h = np.outer(a, d_z)
    d_logits = a * (d_a - float(a @ d_a))
    d_h += _gate_backward(
        h_top, params.gate, config.gate_variant, trace.gate_cache, d_logits, grads
    )

    # residual blocks, reversed
    alpha = config.alpha
    rate = config.dropout_rate
    for idx in range(config.layers - 1, -1, -1):
        lp = params.layers[idx]
        lt = trace.layer_traces[idx]
        d_u = alpha * d_h
        d_res = (1.0 - alpha) * d_h
        grads[f"layers.{idx}.res_w"] += lt.h_in.T @ d_res
        d_in = d_res @ lp.res_w.T
        if trace.mode == "train" and lt.mask is not None:
            d_conv = d_u * lt.mask / (1.0 - rate)
        else:
            d_conv = d_u
        grads[f"layers.{idx}.conv_w"] += lt.agg.T @ d_conv
        d_agg = d_conv @ lp.conv_w.T
        d_act = graph.a_hat.T @ d_agg
        d_bn = d_act * (lt.bn_out > 0.0)
        grads[f"layers.{idx}.bn_gamma"] += (d_bn * lt.xhat).sum(axis=0)
        grads[f"layers.{idx}.bn_beta"] += d_bn.sum(axis=0)
        d_xhat = d_bn * lp.bn_gamma
        if trace.mode == "train":
            n = d_xhat.shape[0]
            d_in += (lt.inv_std / n) * (
                n * d_xhat
                - d_xhat.sum(axis=0)
                - lt.xhat * (d_xhat * lt.xhat).sum(axis=0)
            )
        else:
            d_in += d_xhat * lt.inv_std
        d_h = d_in

    return grads, d_h


def gradients(graph, features, params, config, loss_head, mode="train", rng_seed=0):
    """Forward + backward in one call. `loss_head` maps the calibrated
    score to its upstream gradient d loss / d score.

    Raises NumericalError naming the offending tensor if any gradient is
    non-finite.
    """
    trace = forward(graph, features, params, config, mode=mode, rng_seed=rng_seed)
    grads, d_features = backward(
        graph, features, params, config, trace, loss_head(trace.calibrated_score)
    )
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"numerical blow-up in gradient of {name}")
    if not np.all(np.isfinite(d_features)):
        raise NumericalError("numerical blow-up in gradient of input features")
    return grads, d_features
