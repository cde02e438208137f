"""Per-parameter weight decay tuned on a tiny validation set.

Each seed draws 50 training and 50 validation examples; the remaining
examples form the test set.  Every parameter gets its own log decay
strength ``lam_i``.  Hyperparameters follow the one-step-unrolled
validation hypergradient (``zeta = 0``) or, additionally, the
incoherence regularizer with ``K = 0`` (``zeta > 0``).  Inner parameters
are carried over between outer steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from ..hyperopt import HyperOptConfig, OuterRecord, Problem, optimize_eq5_alg1
from ..models import Dataset, InitDistribution, LossSpec, make_model

__all__ = [
    "WeightDecayConfig",
    "WeightDecayRun",
    "split_small",
    "run_weight_decay_experiment",
    "min_weight_norm_baseline",
    "final_test_accuracy",
]


@dataclass(frozen=True)
class WeightDecayConfig:
    """Settings of the weight-decay experiment.

    Attributes:
        n_train, n_val: examples drawn per seed for training and validation.
        inner_steps: Adam steps per outer step.
        outer_steps: outer RMSProp steps.
        inner_lr, outer_lr: learning rates of the two optimizers.
        lam0: initial log decay strength shared by all parameters.
        init_std: standard deviation of the Gaussian parameter initialization.
        hidden: hidden width of the MLP.
        test_size: cap on the test-set size (``None`` keeps every remaining example).
        reinit_inner: resample the inner parameters every outer step instead of carrying them over.
        inner: ``"adam"`` (decay penalty inside Adam's normalization) or ``"adamw"`` (decoupled decay).
    """

    n_train: int = 50
    n_val: int = 50
    inner_steps: int = 1000
    outer_steps: int = 100
    inner_lr: float = 1e-4
    outer_lr: float = 1e-2
    lam0: float = -2.0
    init_std: float = 0.01
    hidden: int = 32
    test_size: int | None = None
    reinit_inner: bool = False
    inner: str = "adam"

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.inner_steps, self.hidden) < 1 or self.outer_steps < 0:
            raise ValueError("sizes and step counts must be positive")
        if self.inner_lr <= 0 or self.outer_lr <= 0 or self.init_std <= 0:
            raise ValueError("learning rates and init_std must be positive")
        if self.inner not in ("adam", "adamw"):
            raise ValueError(f"unknown inner optimizer {self.inner!r}")


@dataclass
class WeightDecayRun:
    objective: str
    zeta: float
    seed: int
    model_kind: str
    records: list[OuterRecord] = field(default_factory=list)
    lam: np.ndarray | None = None

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


def split_small(data: Dataset, n_train: int, n_val: int, seed: int,
                test_size: int | None = None) -> tuple[Dataset, Dataset, Dataset]:
    """Random disjoint train/validation subsets; the rest (optionally capped) is the test set."""
    if n_train + n_val >= data.size:
        raise ValueError("not enough examples for the requested split")
    perm = np.random.default_rng(np.random.SeedSequence([int(seed), 7])).permutation(data.size)
    rest = perm[n_train + n_val:]
    if test_size is not None:
        rest = rest[:test_size]
    return data.subset(perm[:n_train]), data.subset(perm[n_train:n_train + n_val]), data.subset(rest)


def run_weight_decay_experiment(dataset: Dataset, model_kind: Literal["linear_softmax", "mlp"],
                                objective: Literal["eq1", "eq5"], zeta: float, seeds: Sequence[int],
                                config: WeightDecayConfig | None = None) -> list[WeightDecayRun]:
    """Run the experiment for every seed and return the per-outer-step traces."""
    cfg = config or WeightDecayConfig()
    if objective not in ("eq1", "eq5"):
        raise ValueError(f"unknown objective {objective!r}")
    if objective == "eq1" and zeta != 0:
        raise ValueError("the eq1 objective requires zeta = 0")
    if objective == "eq5" and zeta <= 0:
        raise ValueError("the eq5 objective requires zeta > 0")
    labels = np.asarray(dataset.labels)
    k = int(labels.max()) + 1
    d = dataset.inputs.shape[1]
    if model_kind == "linear_softmax":
        dims = (d, k)
    elif model_kind == "mlp":
        dims = (d, cfg.hidden, k)
    else:
        raise ValueError(f"unsupported model kind {model_kind!r}")
    runs = []
    for seed in seeds:
        train, val, test = split_small(dataset, cfg.n_train, cfg.n_val, seed, cfg.test_size)
        model, _ = make_model(model_kind, dims)
        problem = Problem(
            model=model, train=train, val=val, test=test,
            spec=LossSpec(kind="softmax_xent", decay="per_parameter"),
            init=InitDistribution("gaussian", std=cfg.init_std), eta=cfg.inner_lr, inner=cfg.inner,
        )
        hcfg = HyperOptConfig(
            zeta=zeta, T=cfg.inner_steps, K=0, outer_optimizer="rmsprop", outer_lr=cfg.outer_lr,
            outer_steps=cfg.outer_steps, reinit_inner=cfg.reinit_inner, val_hypergrad="t1t2",
        )
        lam, history = optimize_eq5_alg1(problem, hcfg, np.full(model.m, cfg.lam0), seed=seed)
        runs.append(WeightDecayRun(objective, zeta, seed, model_kind, history, lam))
    return runs


def min_weight_norm_baseline(run: WeightDecayRun) -> OuterRecord:
    """Among outer steps with maximal validation accuracy, the one with the
    smallest weight norm (earliest on ties)."""
    if not run.records:
        raise ValueError("run has no records")
    best_acc = max(r.val_acc for r in run.records)
    top = [r for r in run.records if r.val_acc == best_acc]
    return min(top, key=lambda r: (r.weight_norm, r.outer_step))


def final_test_accuracy(run: WeightDecayRun) -> float:
    return run.records[-1].test_acc
