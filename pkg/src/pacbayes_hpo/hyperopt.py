"""Outer hyperparameter optimization.

The regularized objective is

    E[R_V(theta_T)] + zeta * sqrt(sum_t d_t^2),   d_t^2 = ||grad R_T(theta_t) - grad R_V(theta_t)||^2,

and ``zeta = 0`` recovers the plain validation objective.  Hyperparameters
``lam`` enter the training risk as per-parameter log decay strengths.

Three drivers share one inner loop:

* :func:`optimize_eq5_alg1`: one chain, accumulators ``X`` and ``Y``;
* :func:`optimize_eq5_alg3`: ``C`` chains, update averaged over chains;
* :func:`optimize_eq5_alg4_online`: ``lam`` moves after every inner step.

Hypergradients through the inner trajectory are truncated: a summand at
step ``t`` is differentiated through at most ``K`` preceding updates, or,
with windows of size ``W``, through the updates since its window started.
The required iterates are kept in a sliding window, so memory is
``O(m * K)`` per chain.
"""

from __future__ import annotations

import csv
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Literal, Sequence

import numpy as np

from . import diffcore as dc
from .models import Dataset, InitDistribution, LossSpec, Model, accuracy, risk_and_grad, risk_tensor

__all__ = [
    "HyperOptConfig",
    "Problem",
    "RegularizerTrace",
    "OuterRecord",
    "incoherence_summand",
    "truncated_hypergrad",
    "t1t2_val_hypergrad",
    "evaluate_objective",
    "optimize_eq5_alg1",
    "optimize_eq5_alg3",
    "optimize_eq5_alg4_online",
    "HISTORY_COLUMNS",
    "write_history_csv",
]

HISTORY_COLUMNS = (
    "outer_step", "seed", "objective_kind", "zeta", "K", "C", "val_loss", "val_acc",
    "test_loss", "test_acc", "Y", "sqrt_Y", "gen_error_estimate",
)


@dataclass(frozen=True)
class HyperOptConfig:
    """Outer-loop configuration.

    Attributes:
        zeta: regularizer weight; 0 gives the unregularized objective.
        T: inner steps per outer step.
        K: truncation depth (0 treats iterates as constants in ``lam``).
        W: window size for windowed truncation; overrides ``K`` when set.
        C: number of chains.
        outer_optimizer: ``"rmsprop"`` or ``"gd"``.
        outer_lr: outer learning rate.
        outer_steps: fixed outer-step budget.
        reinit_inner: resample theta_0 from P0 every outer step.
        eps_Y: floor inside ``sqrt(Y + eps_Y)``.
        val_hypergrad: ``"unroll"`` (K-truncated) or ``"t1t2"`` (one-step unroll).
        shared_chain_seeds: give every chain the same random stream.
    """

    zeta: float = 0.0
    T: int = 10
    K: int = 0
    W: int | None = None
    C: int = 1
    outer_optimizer: Literal["rmsprop", "gd"] = "rmsprop"
    outer_lr: float = 1e-2
    outer_steps: int = 100
    reinit_inner: bool = True
    eps_Y: float = 1e-12
    val_hypergrad: Literal["unroll", "t1t2"] = "unroll"
    shared_chain_seeds: bool = False
    rmsprop_alpha: float = 0.99
    rmsprop_eps: float = 1e-8

    def __post_init__(self):
        if self.zeta < 0:
            raise ValueError("zeta must be non-negative")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if not 0 <= self.K <= self.T:
            raise ValueError("K must satisfy 0 <= K <= T")
        if self.W is not None and not 1 <= self.W <= self.T:
            raise ValueError("W must satisfy 1 <= W <= T")
        if self.C < 1:
            raise ValueError("C must be at least 1")
        if self.outer_optimizer not in ("rmsprop", "gd"):
            raise ValueError(f"unknown outer optimizer {self.outer_optimizer!r}")
        if self.outer_lr <= 0 or self.outer_steps < 0:
            raise ValueError("outer_lr must be positive and outer_steps non-negative")
        if self.eps_Y <= 0:
            raise ValueError("eps_Y must be positive")
        if self.val_hypergrad not in ("unroll", "t1t2"):
            raise ValueError(f"unknown validation hypergradient {self.val_hypergrad!r}")

    @property
    def objective_kind(self) -> str:
        return "eq5" if self.zeta > 0 else "eq1"

    def summand_depth(self, t: int) -> int:
        """Truncation depth for the summand at theta_t."""
        return t % self.W if self.W is not None else min(self.K, t)

    def val_depth(self) -> int:
        """Truncation depth for the validation term at theta_T."""
        return (self.T - 1) % self.W + 1 if self.W is not None else self.K

    @property
    def window(self) -> int:
        return self.W if self.W is not None else self.K


@dataclass(frozen=True)
class Problem:
    """Inner problem: model, data, losses and inner sampler.

    ``inner`` is ``"sgd"``, ``"sgld"`` (noise N(0, 2 eta / tau) with tau
    from the loss spec), ``"adam"`` (the decay penalty is part of the gradient
    Adam normalizes) or ``"adamw"`` (Adam on the data gradient, decay applied
    outside the normalization as ``theta -= eta * exp(lam) * theta``).
    Batch sizes of ``None`` mean full batch.
    """

    model: Model
    train: Dataset
    val: Dataset
    spec: LossSpec
    init: InitDistribution = field(default_factory=InitDistribution)
    eta: float | Sequence[float] = 0.1
    inner: Literal["sgd", "sgld", "adam", "adamw"] = "sgd"
    test: Dataset | None = None
    val_includes_decay: bool = False
    batch_T: int | None = None
    batch_V: int | None = None
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.inner not in ("sgd", "sgld", "adam", "adamw"):
            raise ValueError(f"unknown inner sampler {self.inner!r}")
        if np.any(np.asarray(self.eta) <= 0):
            raise ValueError("inner step sizes must be positive")

    def eta_at(self, t: int) -> float:
        e = np.atleast_1d(np.asarray(self.eta, dtype=np.float64))
        return float(e[0] if e.size == 1 else e[t])

    def temperature(self) -> float:
        return self.spec.temperature(self.train.size)

    @property
    def decay(self) -> bool:
        return self.spec.decay == "per_parameter"

    def risk_T(self, theta, lam, data=None):
        return risk_and_grad(self.model, theta, self.train if data is None else data, lam, self.spec, True)

    def risk_V(self, theta, lam, data=None):
        return risk_and_grad(self.model, theta, self.val if data is None else data, lam, self.spec, self.val_includes_decay)


@dataclass
class RegularizerTrace:
    """Per-step squared incoherence summands of one chain."""

    summands: list = field(default_factory=list)

    def add(self, d2: float) -> None:
        if d2 < 0:
            raise ValueError("summand must be non-negative")
        self.summands.append(float(d2))

    @property
    def Y(self) -> float:
        return float(math.fsum(self.summands))

    @property
    def value(self) -> float:
        return math.sqrt(self.Y)


@dataclass
class OuterRecord:
    outer_step: int
    seed: int
    objective_kind: str
    zeta: float
    K: int
    C: int
    val_loss: float
    val_acc: float
    test_loss: float
    test_acc: float
    Y: float
    sqrt_Y: float
    gen_error_estimate: float
    weight_norm: float = float("nan")
    floor_triggered: bool = False
    window_peak: int = 0
    hypergrad_norm: float = float("nan")


def write_history_csv(path, records: Sequence[OuterRecord]) -> None:
    """One row per outer step with the fixed history columns."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for r in records:
            d = asdict(r)
            w.writerow([d[c] for c in HISTORY_COLUMNS])


# -- differentiable pieces ------------------------------------------------------


@dataclass
class _Step:
    """What is needed to replay one inner update on a tape."""

    theta: np.ndarray
    eta: float
    noise: np.ndarray | None
    batch_T: np.ndarray | None
    lam_used: np.ndarray | None = None


def _subset(data: Dataset, idx) -> Dataset:
    return data if idx is None else data.subset(idx)


def _lam_at(lam_leaf: dc.Tensor, used) -> dc.Tensor:
    # a step taken with an older lam is replayed as lam + (lam_old - lam)
    if used is None:
        return lam_leaf
    return dc.add(lam_leaf, dc.const(np.asarray(used) - lam_leaf.data))


def _theta_grad(problem: Problem, th: dc.Tensor, lam_t, data: Dataset, training: bool) -> dc.Tensor:
    include = True if training else problem.val_includes_decay
    r = risk_tensor(problem.model, th, data, lam_t, problem.spec, include)
    (g,) = dc.grad(r, [th], create_graph=True)
    return g


def _replay(problem: Problem, tape: dc.Tape, lam_leaf: dc.Tensor, steps: Sequence[_Step]) -> dc.Tensor:
    """Recompute theta after ``steps`` as a function of ``lam_leaf``."""
    if not steps:
        raise ValueError("nothing to replay")
    th = tape.input(steps[0].theta)
    for st in steps:
        g = _theta_grad(problem, th, _lam_at(lam_leaf, st.lam_used), _subset(problem.train, st.batch_T), True)
        th = dc.sub(th, dc.scale(g, st.eta))
        if st.noise is not None:
            th = dc.add(th, dc.const(st.noise))
    return th


def truncated_hypergrad(problem: Problem, lam, window: Sequence[_Step], theta_end: np.ndarray,
                        depth: int, term: Literal["summand", "val"], batch_T=None,
                        batch_V=None) -> np.ndarray:
    """Gradient in ``lam`` of a summand or validation term at ``theta_end``,
    back-propagated through the last ``depth`` recorded inner updates.

    ``window`` holds the recorded updates that produced ``theta_end`` (most
    recent last); ``depth = 0`` keeps the iterate constant.
    """
    if depth > len(window):
        raise ValueError(f"truncation depth {depth} exceeds stored window of {len(window)}")
    lam = np.asarray(lam, dtype=np.float64)
    with dc.Tape() as tape:
        lam_leaf = tape.input(lam)
        if depth:
            th = _replay(problem, tape, lam_leaf, list(window)[-depth:])
        else:
            th = tape.input(theta_end)
        lam_now = lam_leaf
        if term == "summand":
            g_t = _theta_grad(problem, th, lam_now, _subset(problem.train, batch_T), True)
            g_v = _theta_grad(problem, th, lam_now, _subset(problem.val, batch_V), False)
            out = dc.sqnorm(dc.sub(g_t, g_v))
        else:
            out = risk_tensor(problem.model, th, problem.val, lam_now, problem.spec, problem.val_includes_decay)
        (g,) = dc.grad(out, [lam_leaf])
    return g


def incoherence_summand(problem: Problem, theta, lam, batch_T=None, batch_V=None, clip_gamma=None):
    """``d^2 = ||grad R_T - grad R_V||^2`` at ``theta`` and its direct gradient in ``lam``.

    With ``clip_gamma`` both gradients are clipped first (the returned
    hypergradient then ignores clipping, which is locally exact whenever
    neither gradient is clipped).
    """
    from .samplers import clip

    theta = np.asarray(theta, dtype=np.float64)
    _, g_t = problem.risk_T(theta, lam, _subset(problem.train, batch_T))
    _, g_v = problem.risk_V(theta, lam, _subset(problem.val, batch_V))
    if clip_gamma is not None:
        g_t, g_v = clip(g_t, clip_gamma), clip(g_v, clip_gamma)
    diff = g_t - g_v
    d2 = float(diff @ diff)
    return d2, _direct_summand_grad(problem, theta, lam, diff, batch_T, batch_V)


def _direct_summand_grad(problem, theta, lam, diff, batch_T, batch_V) -> np.ndarray:
    lam = np.asarray(lam, dtype=np.float64)
    if not problem.decay or problem.val_includes_decay:
        return np.zeros_like(lam)
    # grad_theta R_T contains exp(lam) * theta; the validation gradient does not
    return 2.0 * diff * np.exp(lam) * theta


def t1t2_val_hypergrad(problem: Problem, theta_T, lam, eta_last, theta_prev=None,
                       batch_T=None) -> np.ndarray:
    """One-step-unrolled validation hypergradient.

    Returns ``dR_V/dlam - (d^2 R_T / dlam dtheta)^T (eta_last * grad_theta R_V)``.
    ``eta_last`` is a scalar or a per-parameter step (for instance Adam's
    effective step).  The mixed partial is taken at ``theta_prev`` when
    given (exact for a single inner step) and at ``theta_T`` otherwise.
    """
    eta_last = np.asarray(eta_last, dtype=np.float64)
    if np.any(eta_last <= 0):
        raise ValueError("eta_last must be positive")
    theta_T = np.asarray(theta_T, dtype=np.float64)
    lam = np.asarray(lam, dtype=np.float64)
    anchor = theta_T if theta_prev is None else np.asarray(theta_prev, dtype=np.float64)
    _, v = problem.risk_V(theta_T, lam)
    ev = eta_last * v
    train = _subset(problem.train, batch_T)
    if problem.decay and not problem.val_includes_decay:
        return -np.exp(lam) * anchor * ev
    with dc.Tape() as tape:
        lam_leaf = tape.input(lam)
        th = tape.input(anchor)
        g_t = _theta_grad(problem, th, lam_leaf, train, True)
        (mixed,) = dc.grad(dc.dot(g_t, dc.const(ev)), [lam_leaf])
    with dc.Tape() as tape:
        lam_leaf = tape.input(lam)
        th = tape.input(theta_T)
        r = risk_tensor(problem.model, th, problem.val, lam_leaf, problem.spec, problem.val_includes_decay)
        (direct,) = dc.grad(r, [lam_leaf])
    out = direct - mixed
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("non-finite hypergradient")
    return out


# -- inner loop -------------------------------------------------------------------


class _Outer:
    """RMSProp or plain gradient descent on lam."""

    def __init__(self, cfg: HyperOptConfig, n: int):
        self.cfg = cfg
        self.v = np.zeros(n)

    def step(self, lam: np.ndarray, g: np.ndarray) -> np.ndarray:
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite hypergradient")
        if self.cfg.outer_optimizer == "gd":
            return lam - self.cfg.outer_lr * g
        a = self.cfg.rmsprop_alpha
        self.v = a * self.v + (1 - a) * g * g
        return lam - self.cfg.outer_lr * g / (np.sqrt(self.v) + self.cfg.rmsprop_eps)


@dataclass
class _Chain:
    rng: np.random.Generator
    rng_T: np.random.Generator
    rng_V: np.random.Generator
    theta: np.ndarray | None = None
    adam: tuple | None = None
    window: deque = field(default_factory=deque)
    X: np.ndarray | None = None
    trace: RegularizerTrace = field(default_factory=RegularizerTrace)
    theta_prev: np.ndarray | None = None
    peak: int = 0


def _make_chains(cfg: HyperOptConfig, seed: int) -> list[_Chain]:
    chains = []
    for c in range(cfg.C):
        idx = 0 if cfg.shared_chain_seeds else c
        ss = np.random.SeedSequence([int(seed), idx])
        a, b, d = ss.spawn(3)
        chains.append(_Chain(np.random.default_rng(a), np.random.default_rng(b), np.random.default_rng(d)))
    return chains


def _batch(rng, size: int | None, n: int):
    return None if size is None or size >= n else rng.choice(n, size=size, replace=False)


def _inner_update(problem: Problem, ch: _Chain, g: np.ndarray, t: int,
                  lam: np.ndarray) -> tuple[np.ndarray, np.ndarray | None, float]:
    """Advance ``ch.theta`` by one inner step; returns (new theta, noise, effective eta)."""
    eta = problem.eta_at(t)
    if problem.inner in ("adam", "adamw"):
        decay = np.exp(lam) * ch.theta if problem.inner == "adamw" and problem.decay else None
        if decay is not None:
            g = g - decay
        b1, b2 = problem.adam_betas
        m1, m2, k = ch.adam if ch.adam is not None else (np.zeros_like(g), np.zeros_like(g), 0)
        k += 1
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        ch.adam = (m1, m2, k)
        step = (m1 / (1 - b1**k)) / (np.sqrt(m2 / (1 - b2**k)) + problem.adam_eps)
        if decay is not None:
            step = step + decay
        return ch.theta - eta * step, None, eta
    noise = None
    if problem.inner == "sgld":
        noise = math.sqrt(2.0 * eta / problem.temperature()) * ch.rng.standard_normal(ch.theta.shape)
    new = ch.theta - eta * g
    return (new + noise if noise is not None else new), noise, eta


def _last_step_size(problem: Problem, cfg: HyperOptConfig, ch: _Chain):
    """Derivative of the last inner update with respect to the gradient it consumed.

    For Adam with the moment estimates held fixed this is the per-parameter
    ``eta (1 - b1) / (1 - b1^k) / (sqrt(v_hat) + eps)``; decoupled decay
    enters the update unnormalized, so for ``"adamw"`` it is ``eta``.
    """
    eta = problem.eta_at(cfg.T - 1)
    if problem.inner != "adam" or ch.adam is None:
        return eta
    b1, b2 = problem.adam_betas
    _, m2, k = ch.adam
    return eta * (1 - b1) / (1 - b1**k) / (np.sqrt(m2 / (1 - b2**k)) + problem.adam_eps)


def _check_truncation(problem: Problem, cfg: HyperOptConfig) -> None:
    if problem.inner in ("adam", "adamw") and cfg.window > 0 and (cfg.zeta > 0 or cfg.val_hypergrad == "unroll"):
        raise ValueError("truncated unrolling through Adam is not supported; use K=0 with t1t2")


def _run_inner(problem: Problem, cfg: HyperOptConfig, lam: np.ndarray, chains: list[_Chain], seed: int,
               outer: _Outer | None = None, online: bool = False, first_term: str = "val"):
    """Run ``T`` inner steps on every chain (in lock step) and return the
    per-chain validation hypergradients and the (possibly updated) ``lam``."""
    n = lam.size
    floor_hit = False
    for ch in chains:
        if ch.theta is None or cfg.reinit_inner:
            ch.theta = problem.init.sample(problem.model.m, ch.rng)
            ch.adam = None
        ch.window.clear()
        ch.X = np.zeros(n)
        ch.trace = RegularizerTrace()
    need_window = cfg.window > 0
    for t in range(cfg.T):
        online_dirs = []
        for ch in chains:
            bt = _batch(ch.rng_T, problem.batch_T, problem.train.size)
            bv = _batch(ch.rng_V, problem.batch_V, problem.val.size)
            _, g_t = problem.risk_T(ch.theta, lam, _subset(problem.train, bt))
            _, g_v = problem.risk_V(ch.theta, lam, _subset(problem.val, bv))
            diff = g_t - g_v
            d2 = float(diff @ diff)
            ch.trace.add(d2)
            if cfg.zeta > 0:
                depth = cfg.summand_depth(t)
                if depth == 0:
                    hg = _direct_summand_grad(problem, ch.theta, lam, diff, bt, bv)
                else:
                    hg = truncated_hypergrad(problem, lam, ch.window, ch.theta, depth, "summand", bt, bv)
                if online:
                    if d2 > cfg.eps_Y:
                        online_dirs.append(cfg.zeta * hg / (2.0 * math.sqrt(d2)))
                    else:
                        floor_hit = True
                else:
                    ch.X += 0.5 * cfg.zeta * hg
            new, noise, eta = _inner_update(problem, ch, g_t, t, lam)
            if need_window:
                ch.window.append(_Step(ch.theta, eta, noise, bt, lam.copy() if online else None))
                while len(ch.window) > cfg.window:
                    ch.window.popleft()
                ch.peak = max(ch.peak, len(ch.window))
            ch.theta_prev = ch.theta
            ch.theta = new
            if not np.all(np.isfinite(ch.theta)):
                raise FloatingPointError("inner iterate became non-finite")
        if online and online_dirs:
            lam = outer.step(lam, np.sum(online_dirs, axis=0) / len(chains))
    val_grads = []
    for ch in chains:
        val_grads.append(_val_hypergrad(problem, cfg, lam, ch, first_term))
    return lam, val_grads, floor_hit


def _val_hypergrad(problem: Problem, cfg: HyperOptConfig, lam, ch: _Chain, first_term: str) -> np.ndarray:
    target = problem if first_term == "val" else _train_as_val(problem)
    if cfg.val_hypergrad == "t1t2":
        return t1t2_val_hypergrad(target, ch.theta, lam, _last_step_size(problem, cfg, ch), ch.theta_prev)
    return truncated_hypergrad(target, lam, ch.window, ch.theta, min(cfg.val_depth(), len(ch.window)), "val")


def _train_as_val(problem: Problem) -> Problem:
    from dataclasses import replace

    return replace(problem, val=problem.train, val_includes_decay=True)


def _metrics(problem: Problem, lam, thetas: list[np.ndarray], first_term: str = "val"):
    model = problem.model
    classify = problem.spec.kind == "softmax_xent"
    val = problem.val if first_term == "val" else problem.train
    include = problem.val_includes_decay if first_term == "val" else True

    def loss(data, inc):
        return float(np.mean([risk_and_grad(model, th, data, lam, problem.spec, inc)[0] for th in thetas]))

    def acc(data):
        return float(np.mean([accuracy(model, th, data) for th in thetas])) if classify else float("nan")

    out = {"val_loss": loss(val, include), "val_acc": acc(val)}
    if problem.test is not None:
        out["test_loss"] = loss(problem.test, problem.val_includes_decay)
        out["test_acc"] = acc(problem.test)
    else:
        out["test_loss"] = out["test_acc"] = float("nan")
    return out


def evaluate_objective(problem: Problem, config: HyperOptConfig, lam, seed: int = 0, outer_step: int = 0,
                       first_term: str = "val") -> tuple[float, np.ndarray, list[RegularizerTrace]]:
    """Objective value and hypergradient at fixed ``lam`` for one outer step.

    The objective is ``mean_c R(theta_T^c) + zeta * mean_c sqrt(Y_c)``
    (``R`` the validation risk, or the training risk when
    ``first_term="train"``) and the hypergradient is the direction the
    offline algorithms apply: ``mean_c [grad R + X_c / sqrt(Y_c + eps_Y)]``.
    Chains start from fresh draws, so repeated calls with the same seed see
    identical initial points and noise.
    """
    _check_truncation(problem, config)
    lam = np.array(lam, dtype=np.float64)
    chains = _make_chains(config, seed)
    _, val_grads, _ = _run_inner(problem, config, lam, chains, seed, first_term=first_term)
    target = problem if first_term == "val" else _train_as_val(problem)
    risks = [target.risk_V(ch.theta, lam)[0] for ch in chains]
    value = float(np.mean(risks)) + config.zeta * float(np.mean([ch.trace.value for ch in chains]))
    direction = np.mean([vg + ch.X / math.sqrt(ch.trace.Y + config.eps_Y) for vg, ch in zip(val_grads, chains)], axis=0)
    return value, direction, [ch.trace for ch in chains]


def _optimize(problem: Problem, config: HyperOptConfig, lam0, seed: int, online: bool):
    _check_truncation(problem, config)
    lam = np.array(lam0, dtype=np.float64)
    if problem.decay and lam.shape != (problem.model.m,):
        raise ValueError(f"per-parameter decay needs {problem.model.m} hyperparameters")
    chains = _make_chains(config, seed)
    outer = _Outer(config, lam.size)
    history = []
    for k in range(config.outer_steps):
        lam, val_grads, floor_hit = _run_inner(problem, config, lam, chains, seed, outer, online)
        if online:
            direction = np.mean(val_grads, axis=0)
        else:
            direction = np.mean([vg + ch.X / math.sqrt(ch.trace.Y + config.eps_Y)
                                 for vg, ch in zip(val_grads, chains)], axis=0)
            floor_hit = config.zeta > 0 and any(ch.trace.Y < config.eps_Y for ch in chains)
        thetas = [ch.theta for ch in chains]
        met = _metrics(problem, lam, thetas)
        Y = float(np.mean([ch.trace.Y for ch in chains]))
        sqrt_y = float(np.mean([ch.trace.value for ch in chains]))
        history.append(OuterRecord(
            outer_step=k, seed=seed, objective_kind=config.objective_kind, zeta=config.zeta,
            K=config.K, C=config.C, Y=Y, sqrt_Y=sqrt_y,
            gen_error_estimate=met["test_loss"] - met["val_loss"],
            weight_norm=float(np.mean([np.linalg.norm(th) for th in thetas])),
            floor_triggered=bool(floor_hit), window_peak=max(ch.peak for ch in chains),
            hypergrad_norm=float(np.linalg.norm(direction)), **met,
        ))
        lam = outer.step(lam, direction)
    return lam, history


def optimize_eq5_alg1(problem: Problem, config: HyperOptConfig, lam0, seed: int = 0):
    """Single-chain optimization with accumulators (one-sample estimator)."""
    if config.C != 1:
        raise ValueError("the single-chain driver requires C = 1")
    return _optimize(problem, config, lam0, seed, online=False)


def optimize_eq5_alg3(problem: Problem, config: HyperOptConfig, lam0, seed: int = 0):
    """Offline optimization with ``C`` chains; per-chain terms are averaged."""
    return _optimize(problem, config, lam0, seed, online=False)


def optimize_eq5_alg4_online(problem: Problem, config: HyperOptConfig, lam0, seed: int = 0):
    """Online optimization: ``lam`` moves after every inner step by the mean of
    ``zeta * grad ||g_T - g_V||`` over chains; the validation hypergradient is
    applied once at the end of each outer step.  Steps whose gradient
    difference norm is below ``eps_Y`` are skipped."""
    return _optimize(problem, config, lam0, seed, online=True)
