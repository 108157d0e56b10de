"""Training objectives and the linear warm-up schedules for their weights."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .evidential import DirichletBatch, ds_fuse, opinion_to_dirichlet, to_evidence, to_opinion

__all__ = [
    "AnnealSchedule",
    "LossBreakdown",
    "LossConfig",
    "anneal",
    "cross_entropy",
    "dce_loss",
    "disentangle_loss",
    "kl_regularizer",
    "one_hot",
    "total_loss",
    "uncertainty_loss",
]

LOG_FLOOR = 1e-12


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def _check_one_hot(y):
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or not np.all((y == 0) | (y == 1)) or not np.all(y.sum(axis=1) == 1):
        raise ValueError("labels must be one-hot rows")
    return y


def _alpha(alpha):
    a = alpha.alpha if isinstance(alpha, DirichletBatch) else T.as_tensor(alpha, np.float64)
    if np.any(a.data < 1.0 - 1e-12):
        raise ValueError("Dirichlet concentrations must be >= 1")
    return a


def cross_entropy(p, y) -> T.Tensor:
    """Batch mean of -sum_k y_k log p_k, with log clamped at p >= 1e-12."""
    y = _check_one_hot(y)
    p = T.as_tensor(p, np.float64)
    logp = T.log(T.clip_min(p, LOG_FLOOR))
    return T.neg(T.mean(T.sum(logp * y, axis=-1)))


def dce_loss(alpha, y) -> T.Tensor:
    """Expected cross-entropy under Dir(alpha): mean of sum_k y_k (psi(S) - psi(alpha_k))."""
    y = _check_one_hot(y)
    a = _alpha(alpha)
    return T.mean(T.dirichlet_dce(a, y))


def kl_regularizer(alpha, y) -> T.Tensor:
    """Mean KL(Dir(alpha_tilde) || Dir(1)) with alpha_tilde = y + (1 - y) alpha.

    Removing the true-class evidence means only misleading evidence is
    penalised.
    """
    y = _check_one_hot(y)
    a = _alpha(alpha)
    at = a * (1.0 - y) + y
    kl = T.dirichlet_kl_uniform(at)
    return T.mean(kl)


def uncertainty_loss(alpha, y, lambda_u: float) -> T.Tensor:
    if lambda_u < 0:
        raise ValueError("lambda_u must be non-negative")
    loss = dce_loss(alpha, y)
    if lambda_u == 0:
        return loss
    return loss + lambda_u * kl_regularizer(alpha, y)


def disentangle_loss(f_global, f_local) -> T.Tensor:
    """Mean over samples of exp(-KL(softmax(f_local) || softmax(f_global))).

    Equals 1 when both heads give the same distribution and falls towards 0
    as they separate, so minimising it pushes the heads apart.
    """
    fg, fl = T.as_tensor(f_global, np.float64), T.as_tensor(f_local, np.float64)
    if fg.shape != fl.shape:
        raise ValueError(f"head outputs differ in shape: {fg.shape} vs {fl.shape}")
    p = T.softmax(fl)
    q = T.softmax(fg)
    d = T.sum(p * (T.log(T.clip_min(p, LOG_FLOOR)) - T.log(T.clip_min(q, LOG_FLOOR))), axis=-1)
    return T.mean(T.exp(T.neg(d)))


@dataclass(frozen=True)
class AnnealSchedule:
    target: float
    ramp_steps: int
    shape: str = "linear"

    def __post_init__(self):
        if self.ramp_steps < 0:
            raise ValueError("ramp_steps must be >= 0")
        if self.shape != "linear":
            raise ValueError(f"unsupported schedule shape {self.shape!r}")

    def value(self, step: int) -> float:
        return anneal(self, step)


def anneal(schedule: AnnealSchedule, step: int) -> float:
    """Linear ramp min(step / ramp_steps, 1) * target."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if schedule.ramp_steps == 0:
        return float(schedule.target)
    return float(min(step / schedule.ramp_steps, 1.0) * schedule.target)


@dataclass
class LossConfig:
    """Which terms enter the objective.

    ``enable_un`` switches the decision rule between Dempster-Shafer fusion
    of the two heads (True) and plain summed logits trained with CE (False).
    The defaults are the full method.
    """

    lambda_u: AnnealSchedule = field(default_factory=lambda: AnnealSchedule(1.0, 0))
    lambda_d: AnnealSchedule = field(default_factory=lambda: AnnealSchedule(0.1, 0))
    enable_dis: bool = True
    enable_un: bool = True
    enable_ce: bool = True
    un_weights: tuple = (1.0, 1.0, 1.0)


@dataclass
class LossBreakdown:
    l_un_global: float
    l_un_local: float
    l_un_fused: float
    l_ce_global: float
    l_ce_local: float
    l_dis: float
    l_total: float
    lambda_u: float = 0.0
    lambda_d: float = 0.0
    total: T.Tensor | None = field(default=None, repr=False)

    FIELDS = ("l_un_global", "l_un_local", "l_un_fused", "l_ce_global", "l_ce_local", "l_dis", "l_total")

    def as_dict(self):
        return {k: getattr(self, k) for k in self.FIELDS}


def total_loss(raw_g, raw_l, y, step: int, config: LossConfig | None = None) -> LossBreakdown:
    """Assemble the objective for one batch of dual-head outputs.

    Full method: L_Un on global, local and fused opinions, CE on each head's
    softmax, plus lambda_d * L_Dis. When ``raw_l`` is None (single-head
    model) the objective is CE on the global head alone.
    """
    cfg = config or LossConfig()
    y = _check_one_hot(y)
    lu = anneal(cfg.lambda_u, step)
    ld = anneal(cfg.lambda_d, step)
    g = T.astype(raw_g, np.float64)
    zero = 0.0
    parts = dict(l_un_global=zero, l_un_local=zero, l_un_fused=zero, l_ce_global=zero, l_ce_local=zero, l_dis=zero)
    terms = []

    if raw_l is None:
        ce = cross_entropy(T.softmax(g), y)
        parts["l_ce_global"] = ce
        terms.append(ce)
    else:
        l = T.astype(raw_l, np.float64)
        if cfg.enable_un:
            dg, og = to_opinion(to_evidence(g))
            dl, ol = to_opinion(to_evidence(l))
            fused, _ = ds_fuse(og, ol)
            df = opinion_to_dirichlet(fused)
            wg, wl, wf = cfg.un_weights
            parts["l_un_global"] = uncertainty_loss(dg, y, lu)
            parts["l_un_local"] = uncertainty_loss(dl, y, lu)
            parts["l_un_fused"] = uncertainty_loss(df, y, lu)
            terms += [wg * parts["l_un_global"], wl * parts["l_un_local"], wf * parts["l_un_fused"]]
        else:
            # summed-logit decision trained with plain CE; reported in the fused slot
            ce_sum = cross_entropy(T.softmax(g + l), y)
            parts["l_un_fused"] = ce_sum
            terms.append(ce_sum)
        if cfg.enable_ce:
            parts["l_ce_global"] = cross_entropy(T.softmax(g), y)
            parts["l_ce_local"] = cross_entropy(T.softmax(l), y)
            terms += [parts["l_ce_global"], parts["l_ce_local"]]
        if cfg.enable_dis:
            parts["l_dis"] = disentangle_loss(g, l)
            if ld != 0:
                terms.append(ld * parts["l_dis"])

    total = terms[0]
    for t in terms[1:]:
        total = total + t
    out = {k: (float(v.data) if isinstance(v, T.Tensor) else float(v)) for k, v in parts.items()}
    return LossBreakdown(**out, l_total=float(total.data), lambda_u=lu, lambda_d=ld, total=total)
