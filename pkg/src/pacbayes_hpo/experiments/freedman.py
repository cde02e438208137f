"""Freedman's paradox: greedy forward selection under three objectives.

* ``eq1``: validation MSE at the exact training least-squares fit;
* ``eq5``: Langevin estimate of expected validation risk plus
  ``zeta * sqrt(sum_t mean_c d_t^2)``, minimized over a temperature grid;
* ``aic``: ``2p + n_V * MSE_V`` at the training fit.

All linear-regression quantities are expressed through Gram matrices:
with ``A = (2/n) X^T X`` and ``b = (2/n) X^T y`` the risk
``mean((X theta - y)^2)`` equals ``theta^T A theta / 2 - b^T theta + mean(y^2)``
and its gradient is ``A theta - b``.  This lets every candidate feature at a
forward-selection step be scored in one batched computation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from ..models import Dataset

__all__ = [
    "FREEDMAN_ZETA",
    "LDConfig",
    "SelectionPathEntry",
    "SelectionPath",
    "ols_fit",
    "eq5_objective_estimate",
    "forward_select",
    "freedman_zeta",
]

# the two readings of the trade-off weight: zeta = eta / 4, or zeta**2 = 0.025
FREEDMAN_ZETA = {"eta_over_4": 0.025, "sqrt": math.sqrt(0.025)}


def freedman_zeta(reading: str = "eta_over_4") -> float:
    if reading not in FREEDMAN_ZETA:
        raise ValueError(f"unknown zeta reading {reading!r}; choose from {sorted(FREEDMAN_ZETA)}")
    return FREEDMAN_ZETA[reading]


@dataclass(frozen=True)
class LDConfig:
    """Langevin-dynamics estimator settings.

    ``tau_grid`` entries of ``None`` stand for the training-set size.
    ``init_std`` is the standard deviation of the Gaussian P0.
    """

    chains: int = 50
    eta: float = 0.1
    steps: int = 50
    tau_grid: tuple = (0.1, 1.0, 10.0, 100.0, None)
    init_std: float = 4.0

    def __post_init__(self):
        if self.chains < 1 or self.steps < 0 or self.eta <= 0 or self.init_std < 0:
            raise ValueError("invalid Langevin configuration")
        if not self.tau_grid or any(t is not None and t <= 0 for t in self.tau_grid):
            raise ValueError("tau grid must be non-empty with positive entries")

    def taus(self, n_train: int) -> list[float]:
        return [float(n_train) if t is None else float(t) for t in self.tau_grid]


@dataclass(frozen=True)
class SelectionPathEntry:
    features: tuple[int, ...]
    p: int
    objective: float
    val_r2: float
    val_mse: float
    test_mse: float
    aic: float


@dataclass
class SelectionPath:
    kind: str
    entries: list[SelectionPathEntry] = field(default_factory=list)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([e.objective for e in self.entries])

    @property
    def test_mse(self) -> np.ndarray:
        return np.array([e.test_mse for e in self.entries])

    @property
    def best(self) -> SelectionPathEntry:
        """Entry minimizing the objective (earliest on ties)."""
        return self.entries[int(np.argmin(self.objectives))]


class _Grams:
    """Sufficient statistics of a train/validation pair for linear regression."""

    def __init__(self, train: Dataset, val: Dataset):
        xt, yt = train.inputs, np.asarray(train.labels, dtype=np.float64)
        xv, yv = val.inputs, np.asarray(val.labels, dtype=np.float64)
        self.n_t, self.n_v = xt.shape[0], xv.shape[0]
        self.AT = 2.0 / self.n_t * xt.T @ xt
        self.bT = 2.0 / self.n_t * xt.T @ yt
        self.AV = 2.0 / self.n_v * xv.T @ xv
        self.bV = 2.0 / self.n_v * xv.T @ yv
        self.yv2 = float(np.mean(yv * yv))

    def blocks(self, idx: np.ndarray):
        r, c = idx[:, :, None], idx[:, None, :]
        return self.AT[r, c], self.bT[idx], self.AV[r, c], self.bV[idx]

    def val_risk(self, theta, AV, bV):
        """Validation MSE for ``theta`` of shape (N, ..., q)."""
        quad = np.einsum("n...i,nij,n...j->n...", theta, AV, theta)
        lin = np.einsum("n...i,ni->n...", theta, bV)
        return 0.5 * quad - lin + self.yv2


def ols_fit(data: Dataset, features: Sequence[int]) -> np.ndarray:
    """Least-squares coefficients on the selected columns (no intercept)."""
    features = list(features)
    if not features:
        return np.zeros(0)
    x = data.inputs[:, features]
    if np.linalg.matrix_rank(x) < len(features):
        raise ValueError(f"design matrix on features {features} is rank deficient")
    theta, *_ = np.linalg.lstsq(x, np.asarray(data.labels, dtype=np.float64), rcond=None)
    return theta


def _mse(data: Dataset, features, theta) -> float:
    y = np.asarray(data.labels, dtype=np.float64)
    pred = data.inputs[:, list(features)] @ theta if len(features) else np.zeros_like(y)
    return float(np.mean((pred - y) ** 2))


def _eq1_batch(g: _Grams, idx: np.ndarray) -> np.ndarray:
    if idx.shape[1] == 0:
        return np.full(idx.shape[0], g.yv2)
    AT, bT, AV, bV = g.blocks(idx)
    theta = np.linalg.solve(AT, bT[..., None])[..., 0]
    return g.val_risk(theta, AV, bV)


def _eq5_batch(g: _Grams, idx: np.ndarray, zeta: float, ld: LDConfig, rng: np.random.Generator) -> np.ndarray:
    """Regularized-objective estimate for each row of ``idx`` (candidate feature sets of equal size).

    The initial draws and Langevin noise are shared by all candidates
    (common random numbers), so differences between candidates are not
    masked by Monte-Carlo noise.
    """
    n, q = idx.shape
    if q == 0:
        return np.full(n, g.yv2)
    AT, bT, AV, bV = g.blocks(idx)
    th0 = ld.init_std * rng.standard_normal((ld.chains, q))
    noise = rng.standard_normal((ld.steps, ld.chains, q))
    ATt, AVt = AT.transpose(0, 2, 1), AV.transpose(0, 2, 1)
    dA, db = ATt - AVt, (bT - bV)[:, None, :]
    best = np.full(n, np.inf)
    for tau in ld.taus(g.n_t):
        theta = np.broadcast_to(th0, (n, ld.chains, q)).copy()
        Y = np.zeros(n)
        scale = math.sqrt(2.0 * ld.eta / tau)
        for t in range(ld.steps):
            diff = theta @ dA - db
            Y += np.mean(np.sum(diff * diff, axis=-1), axis=-1)
            theta -= ld.eta * (theta @ ATt - bT[:, None, :])
            theta += scale * noise[t]
        if not np.all(np.isfinite(theta)):
            raise FloatingPointError("Langevin chain diverged")
        value = g.val_risk(theta, AV, bV).mean(axis=-1) + zeta * np.sqrt(Y)
        best = np.minimum(best, value)
    return best


def _step_rng(seed: int, q: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(q)]))


def eq5_objective_estimate(train: Dataset, val: Dataset, features: Sequence[int], zeta: float,
                           ld: LDConfig | None = None, seed: int = 0) -> float:
    """Langevin estimate of the regularized objective for one feature set.

    Runs ``ld.chains`` Langevin chains on the selected-feature training
    risk, averages the validation risk of the final iterates, adds
    ``zeta * sqrt(sum_t mean_c d_t^2)`` and returns the minimum over the
    temperature grid.
    """
    ld = ld or LDConfig()
    idx = np.asarray(list(features), dtype=int).reshape(1, -1)
    return float(_eq5_batch(_Grams(train, val), idx, zeta, ld, _step_rng(seed, idx.shape[1]))[0])


def forward_select(train: Dataset, val: Dataset, objective: Literal["eq1", "eq5", "aic"], max_p: int = 10,
                   test: Dataset | None = None, zeta: float = FREEDMAN_ZETA["eta_over_4"],
                   ld: LDConfig | None = None, seed: int = 0) -> SelectionPath:
    """Greedy forward selection: at each step add the feature that minimizes
    the objective.  The path starts at the empty model (p = 0)."""
    d = train.inputs.shape[1]
    if not 0 <= max_p <= d:
        raise ValueError(f"max_p must lie in [0, {d}]")
    if objective not in ("eq1", "eq5", "aic"):
        raise ValueError(f"unknown objective {objective!r}")
    ld = ld or LDConfig()
    g = _Grams(train, val)
    yv = np.asarray(val.labels, dtype=np.float64)
    sst = float(np.mean((yv - yv.mean()) ** 2))

    def score(idx: np.ndarray) -> np.ndarray:
        q = idx.shape[1]
        if objective == "eq5":
            return _eq5_batch(g, idx, zeta, ld, _step_rng(seed, q))
        val_mse = _eq1_batch(g, idx)
        return val_mse if objective == "eq1" else 2 * q + g.n_v * val_mse

    def entry(sel: list[int], obj: float) -> SelectionPathEntry:
        theta = ols_fit(train, sel)
        vm = _mse(val, sel, theta)
        tm = _mse(test, sel, theta) if test is not None else float("nan")
        return SelectionPathEntry(tuple(sel), len(sel), float(obj), 1.0 - vm / sst, vm, tm, 2 * len(sel) + g.n_v * vm)

    selected: list[int] = []
    path = SelectionPath(objective, [entry([], score(np.zeros((1, 0), dtype=int))[0])])
    for _ in range(max_p):
        cands = np.setdiff1d(np.arange(d), selected)
        idx = np.column_stack([np.tile(selected, (cands.size, 1)), cands]).astype(int)
        values = score(idx)
        k = int(np.argmin(values))
        selected.append(int(cands[k]))
        path.entries.append(entry(selected, values[k]))
    return path
