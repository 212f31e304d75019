"""Flat run configuration: one key per pipeline knob, parsed from plain
`key = value` text files with `#` comments. Unknown keys are rejected and
every value is range-checked before any command does work.
"""

from dataclasses import dataclass, fields

from .errors import UsageError
from .graph import GraphConfig
from .model import ModelConfig
from .objective import ObjectiveConfig


@dataclass
class RunConfig:
    patch_size: int = 256
    grid_n: int = 216
    d: int = 512
    k: int = 24
    lambda_w: float = 0.7
    tau: float = 0.35
    layers: int = 3
    alpha: float = 0.55
    dropout: float = 0.15
    lr: float = 1e-4
    lr_schedule: str = "constant"
    weight_decay: float = 6e-5
    lambda_mse: float = 0.0
    lambda_corr: float = 0.8
    lambda_rank: float = 0.2
    lambda_var: float = 0.0
    beta: float = 0.99
    epsilon: float = 1e-8
    seed: int = 0
    batch_size: int = 8
    epochs: int = 200
    normalization: str = "row"
    gate_variant: str = "plain-mlp"
    tta_fraction: float = 0.5
    encoder: str = "builtin"
    rank_margin: float = 0.05
    gate_hidden: int = 128
    head_hidden: int = 256
    weight_ema_decay: float = 0.999
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    bias_correction: bool = False
    zscore_epsilon: float = 1e-12

    def validate(self):
        checks = [
            (self.patch_size >= 1, "patch_size must be >= 1"),
            (self.grid_n >= 1, "grid_n must be >= 1"),
            (self.d >= 1, "d must be >= 1"),
            (self.k >= 1, "k must be >= 1"),
            (self.k <= self.grid_n - 1, "k must be <= grid_n - 1"),
            (0.0 <= self.lambda_w <= 1.0, "lambda_w must lie in [0, 1]"),
            (self.tau > 0.0, "tau must be positive"),
            (self.layers >= 1, "layers must be >= 1"),
            (0.0 < self.alpha < 1.0, "alpha must lie in (0, 1)"),
            (0.0 <= self.dropout < 1.0, "dropout must lie in [0, 1)"),
            (self.lr > 0.0, "lr must be positive"),
            (
                self.lr_schedule in ("constant", "cosine"),
                "lr_schedule must be 'constant' or 'cosine'",
            ),
            (self.weight_decay >= 0.0, "weight_decay must be nonnegative"),
            (
                min(
                    self.lambda_mse,
                    self.lambda_corr,
                    self.lambda_rank,
                    self.lambda_var,
                )
                >= 0.0,
                "loss coefficients must be nonnegative",
            ),
            (
                max(
                    self.lambda_mse,
                    self.lambda_corr,
                    self.lambda_rank,
                    self.lambda_var,
                )
                > 0.0,
                "at least one loss coefficient must be positive",
            ),
            (0.0 < self.beta < 1.0, "beta must lie in (0, 1)"),
            (self.epsilon > 0.0, "epsilon must be positive"),
            (self.seed >= 0, "seed must be a nonnegative integer"),
            (self.batch_size >= 2, "batch_size must be >= 2"),
            (self.epochs >= 1, "epochs must be >= 1"),
            (
                self.normalization in ("row", "symmetric"),
                "normalization must be 'row' or 'symmetric'",
            ),
            (
                self.gate_variant in ("plain-mlp", "gated-tanh-sigmoid"),
                "gate_variant must be 'plain-mlp' or 'gated-tanh-sigmoid'",
            ),
            (0.0 <= self.tta_fraction < 1.0, "tta_fraction must lie in [0, 1)"),
            (self.encoder == "builtin", "encoder must be 'builtin'"),
            (self.rank_margin >= 0.0, "rank_margin must be nonnegative"),
            (self.gate_hidden >= 1, "gate_hidden must be >= 1"),
            (self.head_hidden >= 1, "head_hidden must be >= 1"),
            (
                0.0 <= self.weight_ema_decay < 1.0,
                "weight_ema_decay must lie in [0, 1)",
            ),
            (0.0 <= self.adam_beta1 < 1.0, "adam_beta1 must lie in [0, 1)"),
            (0.0 <= self.adam_beta2 < 1.0, "adam_beta2 must lie in [0, 1)"),
            (self.adam_epsilon > 0.0, "adam_epsilon must be positive"),
            (self.zscore_epsilon > 0.0, "zscore_epsilon must be positive"),
        ]
        for ok, message in checks:
            if not ok:
                raise UsageError(f"invalid config: {message}")
        return self

    def graph_config(self):
        return GraphConfig(
            k=self.k,
            lambda_w=self.lambda_w,
            tau=self.tau,
            normalization=self.normalization,
            zscore_epsilon=self.zscore_epsilon,
        )

    def model_config(self):
        return ModelConfig(
            d=self.d,
            layers=self.layers,
            alpha=self.alpha,
            dropout_rate=self.dropout,
            gate_hidden=self.gate_hidden,
            head_hidden=self.head_hidden,
            gate_variant=self.gate_variant,
        )

    def objective_config(self):
        return ObjectiveConfig(
            lambda_mse=self.lambda_mse,
            lambda_corr=self.lambda_corr,
            lambda_rank=self.lambda_rank,
            lambda_var=self.lambda_var,
            beta=self.beta,
            epsilon=self.epsilon,
            bias_correction=self.bias_correction,
            rank_margin=self.rank_margin,
        )


_FIELD_TYPES = {
    f.name: (f.type if isinstance(f.type, str) else f.type.__name__)
    for f in fields(RunConfig)
}


def _coerce(key, text):
    kind = _FIELD_TYPES[key]
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "bool":
            if text.lower() in ("true", "on", "1", "yes"):
                return True
            if text.lower() in ("false", "off", "0", "no"):
                return False
            raise ValueError(text)
        return text
    except ValueError:
        raise UsageError(f"invalid config: cannot parse {key} = {text!r}") from None


def parse_config_text(text):
    """Parse `key = value` lines into a validated RunConfig."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise UsageError(f"invalid config: line {lineno} is not 'key = value'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        raw = raw.strip()
        if key not in _FIELD_TYPES:
            raise UsageError(f"invalid config: unknown key {key!r} (line {lineno})")
        if key in values:
            raise UsageError(f"invalid config: duplicate key {key!r} (line {lineno})")
        values[key] = _coerce(key, raw)
    return RunConfig(**values).validate()


def load_config(path):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text)
