"""Composite training objective: four loss components, online EMA scale
estimates per term, and the normalized total whose gradient treats the
scale estimates as constants (stop-gradient).
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

TERMS = ("mse", "corr", "rank", "var")

# below this spread a prediction batch counts as constant for the
# correlation / dispersion guards
_DEGENERATE_STD = 1e-12


@dataclass(frozen=True)
class ObjectiveConfig:
    lambda_mse: float = 0.0
    lambda_corr: float = 0.8
    lambda_rank: float = 0.2
    lambda_var: float = 0.0
    beta: float = 0.99
    epsilon: float = 1e-8
    bias_correction: bool = False
    rank_margin: float = 0.05

    def __post_init__(self):
        lam = (self.lambda_mse, self.lambda_corr, self.lambda_rank, self.lambda_var)
        if any(v < 0 for v in lam):
            raise ValueError("loss coefficients must be nonnegative")
        if not any(v > 0 for v in lam):
            raise ValueError("at least one loss coefficient must be positive")
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")
        if self.epsilon <= 0.0:
            raise ValueError("epsilon must be positive")
        if self.rank_margin < 0.0:
            raise ValueError("rank_margin must be nonnegative")

    def coefficient(self, term):
        return getattr(self, f"lambda_{term}")

    def active_terms(self):
        return tuple(t for t in TERMS if self.coefficient(t) > 0.0)


@dataclass
class EmaState:
    mu_hat: dict = field(default_factory=dict)
    t: int = 0

    def initialized(self, term):
        return term in self.mu_hat

    def scale(self, term, bias_correction=False, beta=0.99):
        mu = self.mu_hat[term]
        if bias_correction and self.t > 0:
            return mu / (1.0 - beta**self.t)
        return mu


@dataclass
class LossBreakdown:
    raw: dict
    normalized: dict
    total: float
    d_pred: np.ndarray
    mu_used: dict


def _check_batch(pred, target, minimum):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise ValueError("pred/target must be equal-length vectors")
    if p.size < minimum:
        if minimum >= 2:
            raise DataError(f"correlation needs >= 2 samples, got {p.size}")
        raise DataError("empty batch")
    return p, t


def loss_mse(pred, target):
    p, t = _check_batch(pred, target, 1)
    return float(np.mean((p - t) ** 2))


def loss_mse_grad(pred, target):
    p, t = _check_batch(pred, target, 1)
    return 2.0 * (p - t) / p.size


def loss_corr(pred, target):
    """1 - PLCC(pred, target); a constant prediction batch scores 1 with a
    zero gradient rather than dividing by zero."""
    p, t = _check_batch(pred, target, 2)
    tc = t - t.mean()
    if np.sqrt((tc**2).sum()) < _DEGENERATE_STD:
        raise DataError("constant target: correlation loss undefined")
    pc = p - p.mean()
    sp = np.sqrt((pc**2).sum())
    if sp < _DEGENERATE_STD:
        return 1.0
    st = np.sqrt((tc**2).sum())
    return float(1.0 - (pc * tc).sum() / (sp * st))


def loss_corr_grad(pred, target):
    p, t = _check_batch(pred, target, 2)
    pc = p - p.mean()
    tc = t - t.mean()
    suu = (pc**2).sum()
    svv = (tc**2).sum()
    if np.sqrt(svv) < _DEGENERATE_STD:
        raise DataError("constant target: correlation loss undefined")
    if np.sqrt(suu) < _DEGENERATE_STD:
        return np.zeros_like(p)
    denom = np.sqrt(suu * svv)
    r = (pc * tc).sum() / denom
    # d r / d p_i = v_i / denom - r * u_i / suu; centering terms vanish
    return -(tc / denom - r * pc / suu)


def loss_rank(pred, target, margin=0.05):
    """Mean pairwise hinge over ordered pairs y_i > y_j; tied targets are
    skipped, and no qualifying pairs yields 0."""
    p, t = _check_batch(pred, target, 2)
    diff_t = t[:, None] - t[None, :]
    diff_p = p[:, None] - p[None, :]
    qualifying = diff_t > 0.0
    m = int(qualifying.sum())
    if m == 0:
        return 0.0
    hinge = np.maximum(0.0, margin - diff_p[qualifying])
    return float(hinge.sum() / m)


def loss_rank_grad(pred, target, margin=0.05):
    p, t = _check_batch(pred, target, 2)
    diff_t = t[:, None] - t[None, :]
    diff_p = p[:, None] - p[None, :]
    qualifying = diff_t > 0.0
    m = int(qualifying.sum())
    grad = np.zeros_like(p)
    if m == 0:
        return grad
    active = qualifying & (margin - diff_p > 0.0)
    grad -= active.sum(axis=1) / m  # as i in pairs (i, j)
    grad += active.sum(axis=0) / m  # as j in pairs (i, j)
    return grad


def loss_var(pred, target):
    """Squared gap between population standard deviations."""
    p, t = _check_batch(pred, target, 2)
    return float((p.std() - t.std()) ** 2)


def loss_var_grad(pred, target):
    p, t = _check_batch(pred, target, 2)
    sp = p.std()
    st = t.std()
    if sp < _DEGENERATE_STD:
        # d std / d p is 0/0 at zero spread; take the zero subgradient
        return np.zeros_like(p)
    return 2.0 * (sp - st) * (p - p.mean()) / (p.size * sp)


def raw_losses(pred, target, config):
    """Values of every active term for the current batch."""
    out = {}
    for term in config.active_terms():
        if term == "mse":
            out[term] = loss_mse(pred, target)
        elif term == "corr":
            out[term] = loss_corr(pred, target)
        elif term == "rank":
            out[term] = loss_rank(pred, target, config.rank_margin)
        elif term == "var":
            out[term] = loss_var(pred, target)
    return out


def loss_gradients(pred, target, config):
    """d raw_k / d pred for every active term."""
    out = {}
    for term in config.active_terms():
        if term == "mse":
            out[term] = loss_mse_grad(pred, target)
        elif term == "corr":
            out[term] = loss_corr_grad(pred, target)
        elif term == "rank":
            out[term] = loss_rank_grad(pred, target, config.rank_margin)
        elif term == "var":
            out[term] = loss_var_grad(pred, target)
    return out


def ema_update(state, raw_values, beta):
    """Fold one step of raw loss values into the running scales. The first
    observation of a term initializes its scale to that value."""
    for term, value in raw_values.items():
        value = float(value)
        if term not in state.mu_hat:
            state.mu_hat[term] = value
        else:
            state.mu_hat[term] = beta * state.mu_hat[term] + (1.0 - beta) * value
    state.t += 1
    return state


def normalized_total(raw, grads, state, config):
    """Total = sum over active terms of lambda_k * raw_k / (mu_k + eps) with
    mu_k frozen; d total / d pred composes the same frozen factors."""
    normalized = {}
    mu_used = {}
    total = 0.0
    d_pred = None
    for term in config.active_terms():
        if not state.initialized(term):
            raise DataError(f"EMA scale for active term '{term}' is uninitialized")
        mu = state.scale(term, config.bias_correction, config.beta)
        mu_used[term] = mu
        lam = config.coefficient(term)
        factor = lam / (mu + config.epsilon)
        contribution = factor * raw[term]
        normalized[term] = contribution
        total += contribution
        term_grad = factor * grads[term]
        d_pred = term_grad if d_pred is None else d_pred + term_grad
    return LossBreakdown(
        raw=dict(raw),
        normalized=normalized,
        total=float(total),
        d_pred=d_pred,
        mu_used=mu_used,
    )
