"""PAC-Bayes and divergence machinery.

Contents:

* closed-form KL between diagonal Gaussians;
* the chain-rule upper bound on the KL between the final iterates of two
  Langevin samplers sharing an initial distribution (general step sizes,
  optional clipping of the validation gradient);
* the approximate max-information function ``beta``;
* assembly of the data-dependent PAC-Bayes bound (simplified, general and
  bounded-loss forms) into a :class:`BoundReport`;
* the training-side bound and the limiting regularizers (cosine similarity,
  Hessian trace).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Literal, Sequence

import numpy as np
from scipy.special import logsumexp

from .samplers import clip

__all__ = [
    "GaussianParams",
    "BoundConfig",
    "BoundReport",
    "gaussian_kl",
    "step_constant",
    "chain_rule_kl_bound",
    "equal_step_kl_bound",
    "compute_beta",
    "beta_feasibility",
    "pac_bayes_bound",
    "training_side_bound",
    "hessian_trace_regularizer",
    "cosine_regularizer_summand",
    "same_distribution_objective",
]


@dataclass(frozen=True)
class GaussianParams:
    """Gaussian with diagonal covariance; a scalar ``var`` means isotropic."""

    mean: np.ndarray
    var: np.ndarray | float

    def __post_init__(self):
        mu = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        var = np.broadcast_to(np.asarray(self.var, dtype=np.float64), mu.shape).copy()
        if np.any(var <= 0):
            raise ValueError("covariance entries must be positive")
        object.__setattr__(self, "mean", mu)
        object.__setattr__(self, "var", var)


def gaussian_kl(q: GaussianParams, p: GaussianParams) -> float:
    """KL(q || p) for diagonal Gaussians."""
    if q.mean.shape != p.mean.shape:
        raise ValueError(f"dimension mismatch {q.mean.shape} vs {p.mean.shape}")
    r = q.var / p.var
    diff = p.mean - q.mean
    return float(0.5 * np.sum(r + diff * diff / p.var - 1.0 - np.log(r)))


def step_constant(n_t: int, n_v: int, eta_t: float, eta_v: float, m: int) -> float:
    """Per-step constant m * (x - ln x - 1) with x = n_V eta_T / (n_T eta_V)."""
    x = (n_v * eta_t) / (n_t * eta_v)
    return float(m * (x - math.log(x) - 1.0))


def chain_rule_kl_bound(grads_t, grads_v, eta_t, eta_v, n_t: int, n_v: int,
                        gamma: float | None = None, weights=None) -> float:
    """Upper bound on KL(Q_T || P_T) for two Langevin chains from a shared P0.

    Per step ``t`` the bound adds
    ``n_V / (4 eta_V) * E ||eta_T g_T - eta_V clip(g_V)||^2 + m (x - ln x - 1)``.

    Args:
        grads_t, grads_v: gradients of the training/validation risks at
            samples of the training chain's iterates; shape ``(T, S, m)``
            (``S`` samples per step) or ``(T, m)`` for one sample per step.
        eta_t, eta_v: step sizes, scalars or length-``T`` sequences.
        n_t, n_v: training/validation sample sizes (Langevin temperatures).
        gamma: clip radius for validation gradients; ``None`` disables clipping.
        weights: optional ``(T, S)`` or ``(S,)`` sample weights (for instance
            quadrature weights) used for the expectation; default uniform.
    """
    gt = np.asarray(grads_t, dtype=np.float64)
    gv = np.asarray(grads_v, dtype=np.float64)
    if gt.ndim == 2:
        gt, gv = gt[:, None, :], gv[:, None, :]
    if gt.shape != gv.shape or gt.ndim != 3:
        raise ValueError("training and validation gradients must share shape (T, S, m)")
    steps, samples, m = gt.shape
    et = np.broadcast_to(np.asarray(eta_t, dtype=np.float64), (steps,))
    ev = np.broadcast_to(np.asarray(eta_v, dtype=np.float64), (steps,))
    if np.ndim(eta_t) and len(eta_t) != steps or np.ndim(eta_v) and len(eta_v) != steps:
        raise ValueError("schedule length does not match the number of steps")
    if np.any(et <= 0) or np.any(ev <= 0):
        raise ValueError("step sizes must be positive")
    if weights is None:
        w = np.full((steps, samples), 1.0 / samples)
    else:
        w = np.broadcast_to(np.asarray(weights, dtype=np.float64), (steps, samples))
        w = w / w.sum(axis=1, keepdims=True)
    if gamma is not None:
        gv = np.apply_along_axis(clip, 2, gv, gamma)
    total = 0.0
    for t in range(steps):
        diff = et[t] * gt[t] - ev[t] * gv[t]
        total += n_v / (4.0 * ev[t]) * float(w[t] @ np.sum(diff * diff, axis=1))
        total += step_constant(n_t, n_v, et[t], ev[t], m)
    return total


def equal_step_kl_bound(d2_sum: float, eta: float, n_v: int, constant: float = 0.0) -> float:
    """Equal-step, equal-size case: B + (n_V eta / 4) * sum_t E d_t^2."""
    if d2_sum < 0:
        raise ValueError("sum of squared distances must be non-negative")
    return constant + n_v * eta / 4.0 * d2_sum


def compute_beta(epsilon: float, delta: float, s: int, c_beta: float = 1.0) -> float:
    """exp(-s eps^2) + c_beta * s * sqrt(delta / eps)."""
    if not 0 < epsilon <= 0.5:
        raise ValueError("epsilon must lie in (0, 1/2]")
    if not 0 <= delta < epsilon:
        raise ValueError("delta must lie in [0, epsilon)")
    if s < 1:
        raise ValueError("sample size must be at least 1")
    return math.exp(-s * epsilon**2) + c_beta * s * math.sqrt(delta / epsilon)


@dataclass(frozen=True)
class BoundConfig:
    """Constants of the bound; ``c1``, ``c2`` and ``c_beta`` are unspecified
    big-O constants and default to 1 as a modelling choice."""

    confidence: float = 0.05
    c1: float = 1.0
    c2: float = 1.0
    c_beta: float = 1.0
    kappa: float | None = None
    gamma_lip: float | None = None
    loss_range: tuple[float, float] | None = None
    form: Literal["simplified", "general"] = "simplified"
    strict: bool = False

    def __post_init__(self):
        if not 0 < self.confidence < 1:
            raise ValueError("confidence must lie in (0, 1)")
        if min(self.c1, self.c2, self.c_beta) < 0:
            raise ValueError("constants must be non-negative")
        if self.form not in ("simplified", "general"):
            raise ValueError(f"unknown bound form {self.form!r}")
        if self.loss_range is not None and not self.loss_range[0] < self.loss_range[1]:
            raise ValueError("loss_range must satisfy a < b")


@dataclass
class BoundReport:
    """Evaluated bound terms.

    ``value`` equals ``empirical_risk + slack + root_term``; ``slack`` is
    non-zero only for the training-side bound.
    """

    kind: str
    empirical_risk: float
    kl_term: float
    privacy_term: float
    log_term: float
    root_term: float
    value: float
    n: int
    epsilon: float
    delta: float
    beta: float | None
    beta_feasible: bool
    privacy_certified: bool
    vacuous: bool
    slack: float = 0.0
    constants: dict = field(default_factory=dict)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)


def _privacy_term(eps: float, delta: float, cfg: BoundConfig) -> float:
    return cfg.c1 * eps**2 + (cfg.c2 * math.sqrt(delta / eps) if eps > 0 else 0.0)


def beta_feasibility(epsilon: float, delta: float, n: int, cfg: BoundConfig) -> tuple[float | None, bool]:
    """Return ``(beta, feasible)`` for the configured bound form.

    ``epsilon = delta = 0`` denotes a data-independent prior, for which no
    max-information correction is needed.
    """
    if epsilon == 0 and delta == 0:
        return None, True
    beta = compute_beta(epsilon, delta, n, cfg.c_beta)
    if cfg.form == "general":
        return beta, beta < 1.0
    log_rhs = math.log(n) + n * (_privacy_term(epsilon, delta, cfg) - 2.0)
    return beta, beta < 1.0 and math.log(beta) < log_rhs


def pac_bayes_bound(emp_risk: float, kl: float, n: int, epsilon: float = 0.0, delta: float = 0.0,
                    config: BoundConfig | None = None, privacy_certified: bool = True) -> BoundReport:
    """Data-dependent PAC-Bayes bound on the expected risk.

    Simplified form::

        emp + (b - a) * sqrt((KL + log(5n/D)) / (2n - 1) + c1 eps^2 + c2 sqrt(delta/eps))

    General form::

        emp + (b - a) * sqrt((KL + log((4n exp(n P) + beta exp(2n)) / D)) / (2n - 1))

    with ``P`` the privacy term and ``(b - a) = 1`` when no loss range is set.
    An infeasible beta-condition is reported through ``beta_feasible`` and
    ``warnings``; with ``config.strict`` it raises instead.
    """
    cfg = config or BoundConfig()
    if n < 1:
        raise ValueError("n must be at least 1")
    if kl < 0:
        raise ValueError("KL estimate must be non-negative")
    if not (epsilon == 0 and delta == 0):
        if not 0 < epsilon <= 0.5 or not 0 < delta < epsilon:
            raise ValueError("need epsilon in (0, 1/2] and delta in (0, epsilon)")
    beta, feasible = beta_feasibility(epsilon, delta, n, cfg)
    warnings = []
    if not feasible:
        msg = f"beta={beta:.6g} violates the {cfg.form} form's feasibility condition"
        if cfg.strict:
            raise ValueError(msg)
        warnings.append(msg)
    priv = _privacy_term(epsilon, delta, cfg)
    scale = 1.0 if cfg.loss_range is None else cfg.loss_range[1] - cfg.loss_range[0]
    if cfg.form == "simplified":
        log_term = math.log(5.0 * n / cfg.confidence)
        inner = (kl + log_term) / (2 * n - 1) + priv
    else:
        terms = [math.log(4.0 * n) + n * priv]
        if beta is not None and beta > 0:
            terms.append(math.log(beta) + 2.0 * n)
        log_term = float(logsumexp(terms)) - math.log(cfg.confidence)
        inner = (kl + log_term) / (2 * n - 1)
    root = scale * math.sqrt(inner)
    value = emp_risk + root
    upper = 1.0 if cfg.loss_range is None else cfg.loss_range[1]
    return BoundReport(
        kind=cfg.form if cfg.loss_range is None else f"{cfg.form}_bounded",
        empirical_risk=float(emp_risk), kl_term=float(kl), privacy_term=priv, log_term=log_term,
        root_term=root, value=value, n=n, epsilon=epsilon, delta=delta, beta=beta,
        beta_feasible=feasible, privacy_certified=privacy_certified, vacuous=value > upper,
        constants={"c1": cfg.c1, "c2": cfg.c2, "c_beta": cfg.c_beta, "confidence": cfg.confidence,
                   "loss_range": cfg.loss_range},
        warnings=warnings,
    )


def training_side_bound(emp_train_risk, kl: float, n_t: int, epsilon: float = 0.0, delta: float = 0.0,
                        config: BoundConfig | None = None) -> BoundReport:
    """Training-side bound: ``2 gamma kappa`` plus the square-root term with ``n_T``.

    ``emp_train_risk`` (a scalar or per-step trace whose last entry is used)
    is reported for reference; the bound itself is ``slack + root_term``.
    """
    cfg = config or BoundConfig()
    if cfg.kappa is None or cfg.gamma_lip is None:
        raise ValueError("training-side bound needs kappa and gamma_lip")
    if cfg.kappa < 0 or cfg.gamma_lip < 0:
        raise ValueError("kappa and gamma_lip must be non-negative")
    emp = float(np.atleast_1d(emp_train_risk)[-1])
    rep = pac_bayes_bound(0.0, kl, n_t, epsilon, delta, cfg)
    rep.kind = "training_side"
    rep.empirical_risk = emp
    rep.slack = 2.0 * cfg.gamma_lip * cfg.kappa
    rep.value = rep.slack + rep.root_term
    rep.vacuous = rep.value > (1.0 if cfg.loss_range is None else cfg.loss_range[1])
    rep.constants.update(kappa=cfg.kappa, gamma_lip=cfg.gamma_lip)
    return rep


def hessian_trace_regularizer(samples, grad_fn: Callable[[np.ndarray], np.ndarray], s: float,
                              eta: float = 1.0) -> dict:
    """Score-norm estimate of the Hessian-trace regularizer.

    ``samples`` has shape ``(N, m)`` (one step) or ``(T, N, m)``.  Returns
    ``raw`` = mean over all samples of ``||s grad R||^2`` (an estimate of
    E||grad log p||^2, equal to ``s * tr(Hessian)`` under the Gibbs
    posterior) and ``scaled`` = ``sqrt(eta/4 * sum_t mean_N ||grad R||^2)``.
    """
    arr = np.asarray(samples, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape[1] < 1:
        raise ValueError("need at least one sample")
    per_step = np.array([np.mean([np.sum(np.asarray(grad_fn(th)) ** 2) for th in step]) for step in arr])
    return {"raw": float(s * s * per_step.mean()), "scaled": float(math.sqrt(eta / 4.0 * per_step.sum()))}


def cosine_regularizer_summand(g_t, g_v) -> float:
    """||clip_1(g_T) - clip_1(g_V)||^2, via 2 - 2 cos when both norms are >= 1."""
    g_t = np.asarray(g_t, dtype=np.float64)
    g_v = np.asarray(g_v, dtype=np.float64)
    u, v = clip(g_t, 1.0), clip(g_v, 1.0)
    if np.linalg.norm(g_t) >= 1 and np.linalg.norm(g_v) >= 1:
        return float(2.0 - 2.0 * (u @ v))
    d = u - v
    return float(d @ d)


def same_distribution_objective(problem, config):
    """Objective for a shared train/validation distribution.

    The first term becomes the expected *training* risk of the final
    iterate; the regularizer is unchanged.  Returns a callable
    ``evaluate(lam, seed) -> (objective, hypergradient, trace)`` built on the
    offline multi-chain machinery.
    """
    from .hyperopt import evaluate_objective

    def evaluate(lam, seed: int = 0):
        return evaluate_objective(problem, config, lam, seed, first_term="train")

    return evaluate
