"""Inner-loop samplers: SGD, (stochastic gradient) Langevin dynamics and DP-SGLD.

Also provides gradient clipping and (epsilon, delta) privacy accounting for
the differentially private sampler.  Randomness is always drawn from a
per-chain :class:`numpy.random.Generator` derived from ``(seed, chain)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .models import Dataset, InitDistribution

__all__ = [
    "PrivacyError",
    "StepSchedule",
    "PrivacyBudget",
    "ChainState",
    "chain_rng",
    "clip",
    "sgd_step",
    "sgld_step",
    "langevin_run",
    "max_dp_step_size",
    "dp_epsilon",
    "dp_frontier",
    "gaussian_mechanism_sigma2",
    "DPSGLDResult",
    "dp_sgld_run",
    "account_privacy",
    "compose_parallel",
]


class PrivacyError(ValueError):
    """A run would void its differential-privacy certificate."""


def chain_rng(seed: int, chain: int = 0) -> np.random.Generator:
    """Independent stream for ``chain`` under master ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(chain)]))


@dataclass(frozen=True)
class StepSchedule:
    """Step sizes eta_t, constant or given per step."""

    values: tuple[float, ...]
    steps: int

    def __post_init__(self):
        vals = tuple(float(v) for v in np.atleast_1d(self.values))
        if not vals or any(not (v > 0 and math.isfinite(v)) for v in vals):
            raise ValueError("step sizes must be positive and finite")
        if self.steps < 0:
            raise ValueError("step count must be non-negative")
        if len(vals) not in (1, self.steps):
            raise ValueError(f"schedule has {len(vals)} entries for {self.steps} steps")
        object.__setattr__(self, "values", vals)

    @classmethod
    def constant(cls, eta: float, steps: int) -> StepSchedule:
        return cls((eta,), steps)

    @property
    def kind(self) -> str:
        return "constant" if len(self.values) == 1 else "per_step"

    def __getitem__(self, t: int) -> float:
        if not 0 <= t < self.steps:
            raise IndexError(t)
        return self.values[0] if len(self.values) == 1 else self.values[t]

    def as_array(self) -> np.ndarray:
        return np.array([self[t] for t in range(self.steps)])


@dataclass(frozen=True)
class PrivacyBudget:
    """Target (epsilon, delta) for a chain of DP-SGLD on ``s`` examples."""

    epsilon: float
    delta: float
    h: int
    s: int
    chains: int = 1

    def __post_init__(self):
        if not 0 < self.epsilon <= 0.5:
            raise ValueError("epsilon must lie in (0, 1/2]")
        if not 0 < self.delta < self.epsilon:
            raise ValueError("delta must lie in (0, epsilon)")
        if self.chains < 1:
            raise ValueError("chain count must be at least 1")
        if not 1 <= self.h <= self.s:
            raise ValueError("batch size must satisfy 1 <= h <= s")


@dataclass
class ChainState:
    """One trajectory: current iterate, step index, RNG and the X, Y accumulators."""

    theta: np.ndarray
    rng: np.random.Generator
    t: int = 0
    X: np.ndarray = field(default_factory=lambda: np.zeros(0))
    Y: float = 0.0

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=np.float64)
        if self.Y < 0:
            raise ValueError("Y must be non-negative")


def clip(g, gamma: float) -> np.ndarray:
    """Rescale ``g`` onto the L2 ball of radius ``gamma`` when it lies outside."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    g = np.asarray(g, dtype=np.float64)
    norm = float(np.linalg.norm(g))
    # the 1e-12 slack absorbs rounding so that clipping is exactly idempotent
    if norm <= gamma * (1.0 + 1e-12):
        return g
    return g * (gamma / norm)


def _finite(g: np.ndarray) -> np.ndarray:
    g = np.asarray(g, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    return g


def sgd_step(state: ChainState, grad, eta: float) -> ChainState:
    """theta <- theta - eta * grad."""
    g = _finite(grad)
    return replace(state, theta=state.theta - eta * g, t=state.t + 1)


def sgld_step(state: ChainState, grad, eta: float, s: float, tau: float | None = None) -> ChainState:
    """Langevin step with injected noise N(0, 2 eta / tau), tau defaulting to s."""
    g = _finite(grad)
    if not (eta > 0 and s > 0):
        raise ValueError("eta and s must be positive")
    tau = float(s) if tau is None else float(tau)
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = math.sqrt(2.0 * eta / tau) * state.rng.standard_normal(state.theta.shape)
    return replace(state, theta=state.theta - eta * g + z, t=state.t + 1)


def langevin_run(grad_fn: Callable[[np.ndarray], np.ndarray], theta0, schedule: StepSchedule,
                 tau: float, rng: np.random.Generator, keep_trajectory: bool = False):
    """Run full-batch Langevin dynamics; returns the final iterate (and trajectory)."""
    state = ChainState(theta0, rng)
    traj = [state.theta.copy()]
    for t in range(schedule.steps):
        state = sgld_step(state, grad_fn(state.theta), schedule[t], tau, tau)
        if keep_trajectory:
            traj.append(state.theta.copy())
    return (state.theta, np.array(traj)) if keep_trajectory else state.theta


# -- privacy ------------------------------------------------------------------


def gaussian_mechanism_sigma2(epsilon: float, delta: float) -> float:
    """Smallest noise variance for which the Gaussian mechanism on a
    sensitivity-1 query is (epsilon, delta)-DP: 2 log(1.25/delta) / epsilon**2."""
    return 2.0 * math.log(1.25 / delta) / epsilon**2


def max_dp_step_size(budget: PrivacyBudget, gamma: float) -> float:
    """Largest eta_t certified (epsilon, delta)-DP: h² ε² / (s γ² log(1.25/δ))."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    return budget.h**2 * budget.epsilon**2 / (budget.s * gamma**2 * math.log(1.25 / budget.delta))


def dp_epsilon(eta: float, delta: float, h: int, s: int, gamma: float) -> float:
    """Epsilon certified for step size ``eta`` at a given delta (inverse of the step bound)."""
    if not (eta > 0 and gamma > 0 and 0 < delta < 1.25):
        raise ValueError("need eta, gamma > 0 and 0 < delta < 1.25")
    return math.sqrt(eta * s * gamma**2 * math.log(1.25 / delta)) / h


def dp_frontier(eta: float, h: int, s: int, gamma: float, deltas: Sequence[float] | None = None):
    """(epsilon, delta) pairs certified by step size ``eta``; only points with
    epsilon <= 1/2 and delta < epsilon are valid budgets."""
    if deltas is None:
        deltas = np.logspace(-8, -1, 15)
    rows = []
    for d in deltas:
        e = dp_epsilon(eta, float(d), h, s, gamma)
        rows.append({"epsilon": e, "delta": float(d), "valid": bool(e <= 0.5 and d < e)})
    return rows


def compose_parallel(per_step: Sequence[tuple[float, float]]) -> tuple[float, float]:
    """Budget of mechanisms run on disjoint data: coordinate-wise maximum."""
    if not per_step:
        raise ValueError("need at least one per-step budget")
    eps, dels = zip(*per_step)
    return max(eps), max(dels)


def account_privacy(budget: PrivacyBudget | Sequence[tuple[float, float]], chains: int = 1) -> tuple[float, float]:
    """Total (epsilon, delta) over ``chains`` independent chains on the same data.

    ``budget`` is either one chain's budget or the list of its per-step
    budgets, which compose in parallel because minibatches are disjoint.
    """
    if chains < 1:
        raise ValueError("chain count must be at least 1")
    if isinstance(budget, PrivacyBudget):
        eps, delta = budget.epsilon, budget.delta
    else:
        eps, delta = compose_parallel(budget)
    return chains * eps, chains * delta


@dataclass
class DPSGLDResult:
    theta: np.ndarray
    trajectory: np.ndarray
    batches: list[np.ndarray]
    certified: bool
    eta_max: float


def dp_sgld_run(data: Dataset, grad_fn: Callable[[np.ndarray, Dataset], np.ndarray], steps: int,
                schedule: StepSchedule, init: InitDistribution, m: int, h: int, gamma: float,
                seed: int, budget: PrivacyBudget | None = None, chain: int = 0,
                unsafe_multi_epoch: bool = False) -> DPSGLDResult:
    """Differentially private SGLD on ``data`` (one chain).

    Each step draws a fresh without-replacement minibatch of size ``h``,
    clips the minibatch-mean gradient to norm ``gamma``, moves by
    ``eta_t / h`` times it and adds N(0, 2 eta_t / s) noise.

    Args:
        grad_fn: ``grad_fn(theta, batch)``, gradient of the batch's empirical risk.
        budget: when given, every ``eta_t`` must not exceed the certified maximum.
        unsafe_multi_epoch: permit ``steps * h > s`` (the certificate is then void).

    Raises:
        PrivacyError: step size above the certificate, or epoch budget exceeded.
    """
    s = data.size
    if schedule.steps != steps:
        raise ValueError("schedule length does not match step count")
    if budget is not None and (budget.h != h or budget.s != s):
        raise ValueError("budget h/s disagree with the run")
    eta_max = max_dp_step_size(budget, gamma) if budget is not None else math.inf
    etas = schedule.as_array()
    if steps and etas.max() > eta_max:
        raise PrivacyError(f"step size {etas.max():.6g} exceeds certified maximum {eta_max:.6g}")
    certified = budget is not None
    if steps * h > s:
        if not unsafe_multi_epoch:
            raise PrivacyError(f"{steps} steps of {h} examples exceed one epoch of {s}")
        certified = False
    rng = chain_rng(seed, chain)
    theta = init.sample(m, rng)
    traj = [theta.copy()]
    batches = []
    batch_rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(chain), 1]))
    perm = batch_rng.permutation(s)
    pos = 0
    for t in range(steps):
        if pos + h > s:
            perm, pos = batch_rng.permutation(s), 0
        idx = perm[pos:pos + h]
        pos += h
        batches.append(idx)
        g = clip(_finite(grad_fn(theta, data.subset(idx))), gamma)
        theta = theta - (etas[t] / h) * g + math.sqrt(2.0 * etas[t] / s) * rng.standard_normal(m)
        traj.append(theta.copy())
    return DPSGLDResult(theta, np.array(traj), batches, certified, eta_max)
