"""Parametric models, losses, empirical risks and synthetic data generators.

Parameters live in one flat vector ``theta`` of length ``m``; each model
publishes a segment map naming its slices.  Every model offers two
evaluation paths:

* a differentiable path (:meth:`Model.forward`) built from
  :mod:`pacbayes_hpo.diffcore` primitives, used whenever second-order
  information (hypergradients through inner steps) is needed;
* an analytic numpy path (:meth:`Model.loss_grad`) returning the base loss
  and its gradient, used in long-running inner loops.

The two paths are tested against each other.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import diffcore as dc

__all__ = [
    "ParamVector",
    "HyperVector",
    "Dataset",
    "LossSpec",
    "InitDistribution",
    "DataGenerator",
    "Model",
    "LinearRegression",
    "LinearSoftmax",
    "MLP",
    "make_model",
    "decay_penalty",
    "loss_eval",
    "risk_eval",
    "risk_tensor",
    "grad_risk",
    "risk_and_grad",
    "accuracy",
    "generate_freedman",
    "generate_gaussian_classes",
    "split_counts",
]


def _segments_ok(segments: dict[str, slice], m: int) -> bool:
    spans = sorted((s.start, s.stop) for s in segments.values())
    pos = 0
    for a, b in spans:
        if a != pos or b <= a:
            return False
        pos = b
    return pos == m


@dataclass(frozen=True)
class ParamVector:
    """Flat parameter vector with named, contiguous segments."""

    values: np.ndarray
    segments: dict[str, slice] = field(default_factory=dict)

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64).ravel()
        if v.size == 0:
            raise ValueError("parameter vector must be non-empty")
        if not np.all(np.isfinite(v)):
            raise ValueError("parameter vector contains non-finite entries")
        object.__setattr__(self, "values", v)
        if not self.segments:
            object.__setattr__(self, "segments", {"all": slice(0, v.size)})
        elif not _segments_ok(self.segments, v.size):
            raise ValueError("segments must partition the vector")

    @property
    def size(self) -> int:
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        return self.values[self.segments[name]]


class HyperVector(ParamVector):
    """Flat hyperparameter vector; same contract as :class:`ParamVector`."""


@dataclass(frozen=True)
class Dataset:
    """Inputs (rows are examples) and labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        y = np.asarray(self.labels)
        if x.ndim != 2 or y.ndim != 1:
            raise ValueError("inputs must be a matrix and labels a vector")
        if x.shape[0] != y.shape[0]:
            raise ValueError(f"{x.shape[0]} input rows but {y.shape[0]} labels")
        if x.shape[0] < 1:
            raise ValueError("dataset must contain at least one example")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    @property
    def size(self) -> int:
        return self.inputs.shape[0]

    def __len__(self) -> int:
        return self.size

    def subset(self, idx) -> Dataset:
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.labels[idx])

    def columns(self, features) -> Dataset:
        return Dataset(self.inputs[:, np.asarray(features, dtype=int)].reshape(self.size, -1), self.labels)

    def concat(self, other: Dataset) -> Dataset:
        return Dataset(np.vstack([self.inputs, other.inputs]), np.concatenate([self.labels, other.labels]))

    def minibatches(self, h: int, rng: np.random.Generator, replace: bool = False):
        """Yield minibatches of size ``h``.

        Without replacement, one random permutation is consumed in disjoint
        chunks and the generator stops after one epoch.
        """
        if not 1 <= h <= self.size:
            raise ValueError(f"batch size {h} outside [1, {self.size}]")
        if replace:
            while True:
                yield rng.integers(0, self.size, size=h)
        perm = rng.permutation(self.size)
        for k in range(self.size // h):
            yield perm[k * h:(k + 1) * h]


@dataclass(frozen=True)
class LossSpec:
    """Loss configuration.

    Attributes:
        kind: ``"squared_error"`` or ``"softmax_xent"``.
        decay: ``"none"`` or ``"per_parameter"`` (penalty ``0.5 * sum(exp(lam) * theta**2)``).
        loss_range: optional ``(a, b)`` used only when reporting bounded-loss bounds.
        tau: Gibbs temperature; ``None`` means the dataset size.
    """

    kind: Literal["squared_error", "softmax_xent"] = "squared_error"
    decay: Literal["none", "per_parameter"] = "none"
    loss_range: tuple[float, float] | None = None
    tau: float | None = None

    def __post_init__(self):
        if self.kind not in ("squared_error", "softmax_xent"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.decay not in ("none", "per_parameter"):
            raise ValueError(f"unknown decay mode {self.decay!r}")
        if self.loss_range is not None and not self.loss_range[0] < self.loss_range[1]:
            raise ValueError("loss_range must satisfy a < b")
        if self.tau is not None and self.tau <= 0:
            raise ValueError("tau must be positive")

    def temperature(self, n: int) -> float:
        return float(n) if self.tau is None else float(self.tau)


@dataclass(frozen=True)
class InitDistribution:
    """Initial distribution P0: isotropic Gaussian or point mass."""

    kind: Literal["gaussian", "point"] = "gaussian"
    std: float = 1.0
    loc: float = 0.0

    def __post_init__(self):
        if self.kind not in ("gaussian", "point"):
            raise ValueError(f"unknown init kind {self.kind!r}")
        if self.kind == "gaussian" and self.std <= 0:
            raise ValueError("std must be positive")

    def sample(self, m: int, rng: np.random.Generator) -> np.ndarray:
        if self.kind == "point":
            return np.full(m, float(self.loc))
        return self.loc + self.std * rng.standard_normal(m)


# -- models -----------------------------------------------------------------


class Model:
    """Base class: flat parameter layout plus differentiable and numpy paths."""

    kind: str = ""
    loss_kind: str = "squared_error"

    def __init__(self, segments: dict[str, slice]):
        self.segments = segments
        self.m = max(s.stop for s in segments.values())

    def forward(self, theta: dc.Tensor, x: np.ndarray) -> dc.Tensor:
        raise NotImplementedError

    def predict(self, theta: np.ndarray, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def loss_grad(self, theta: np.ndarray, x: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
        """Mean base loss over the rows of ``x`` and its gradient in ``theta``."""
        raise NotImplementedError

    def _check(self, theta, x) -> None:
        if np.shape(theta)[-1] != self.m:
            raise ValueError(f"theta has length {np.shape(theta)[-1]}, model expects {self.m}")
        if np.ndim(x) != 2 or np.shape(x)[1] != self.input_dim:
            raise ValueError(f"inputs must be (n, {self.input_dim}), got {np.shape(x)}")


class LinearRegression(Model):
    """y ~ x @ theta without intercept; squared-error loss."""

    kind = "linear_regression"
    loss_kind = "squared_error"

    def __init__(self, d: int):
        if d < 1:
            raise ValueError("dimension must be positive")
        self.input_dim = d
        super().__init__({"weights": slice(0, d)})

    def forward(self, theta, x):
        self._check(theta.data, x)
        return dc.matmul(dc.const(x), theta)

    def predict(self, theta, x):
        self._check(theta, x)
        return x @ theta

    def loss_grad(self, theta, x, y):
        r = self.predict(theta, x) - y
        n = x.shape[0]
        return float(r @ r / n), (2.0 / n) * (x.T @ r)


def _xent_np(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its gradient w.r.t. logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e.sum(axis=1, keepdims=True)
    p = e / s
    idx = np.arange(n)
    loss = float(np.mean(np.log(s[:, 0]) - z[idx, y]))
    p[idx, y] -= 1.0
    return loss, p / n


class LinearSoftmax(Model):
    """Multinomial logistic regression; weights stored row-major (d, k) then bias."""

    kind = "linear_softmax"
    loss_kind = "softmax_xent"

    def __init__(self, d: int, k: int, bias: bool = True):
        if d < 1 or k < 2:
            raise ValueError("need d >= 1 and at least two classes")
        self.input_dim, self.classes, self.bias = d, k, bias
        segs = {"weights": slice(0, d * k)}
        if bias:
            segs["bias"] = slice(d * k, d * k + k)
        super().__init__(segs)

    def _unpack(self, theta):
        w = theta[: self.input_dim * self.classes].reshape(self.input_dim, self.classes)
        b = theta[self.input_dim * self.classes:] if self.bias else None
        return w, b

    def forward(self, theta, x):
        self._check(theta.data, x)
        dk = self.input_dim * self.classes
        w = dc.reshape(dc.segment(theta, 0, dk), (self.input_dim, self.classes))
        out = dc.matmul(dc.const(x), w)
        if self.bias:
            out = dc.add(out, dc.segment(theta, dk, self.m))
        return out

    def predict(self, theta, x):
        self._check(theta, x)
        w, b = self._unpack(theta)
        out = x @ w
        return out + b if b is not None else out

    def loss_grad(self, theta, x, y):
        loss, gz = _xent_np(self.predict(theta, x), y)
        gw = x.T @ gz
        g = np.concatenate([gw.ravel(), gz.sum(axis=0)]) if self.bias else gw.ravel()
        return loss, g


class MLP(Model):
    """One hidden tanh layer: layout W1 (d, h), b1 (h), W2 (h, k), b2 (k)."""

    kind = "mlp"
    loss_kind = "softmax_xent"

    def __init__(self, d: int, hidden: int, k: int):
        if d < 1 or hidden < 1 or k < 2:
            raise ValueError("invalid MLP dimensions")
        self.input_dim, self.hidden, self.classes = d, hidden, k
        o1 = d * hidden
        o2 = o1 + hidden
        o3 = o2 + hidden * k
        super().__init__({
            "w1": slice(0, o1), "b1": slice(o1, o2), "w2": slice(o2, o3), "b2": slice(o3, o3 + k),
        })

    def _parts(self, theta):
        s = self.segments
        return (theta[s["w1"]].reshape(self.input_dim, self.hidden), theta[s["b1"]],
                theta[s["w2"]].reshape(self.hidden, self.classes), theta[s["b2"]])

    def forward(self, theta, x):
        self._check(theta.data, x)
        s = self.segments
        w1 = dc.reshape(dc.segment(theta, s["w1"].start, s["w1"].stop), (self.input_dim, self.hidden))
        b1 = dc.segment(theta, s["b1"].start, s["b1"].stop)
        w2 = dc.reshape(dc.segment(theta, s["w2"].start, s["w2"].stop), (self.hidden, self.classes))
        b2 = dc.segment(theta, s["b2"].start, s["b2"].stop)
        h = dc.tanh(dc.add(dc.matmul(dc.const(x), w1), b1))
        return dc.add(dc.matmul(h, w2), b2)

    def predict(self, theta, x):
        self._check(theta, x)
        w1, b1, w2, b2 = self._parts(theta)
        return np.tanh(x @ w1 + b1) @ w2 + b2

    def loss_grad(self, theta, x, y):
        self._check(theta, x)
        w1, b1, w2, b2 = self._parts(theta)
        h = np.tanh(x @ w1 + b1)
        loss, gz = _xent_np(h @ w2 + b2, y)
        gh = (gz @ w2.T) * (1.0 - h * h)
        return loss, np.concatenate([(x.T @ gh).ravel(), gh.sum(0), (h.T @ gz).ravel(), gz.sum(0)])


def make_model(kind: str, dims, init: InitDistribution | None = None, seed: int = 0):
    """Build a model and draw its initial parameters from ``init``.

    Args:
        kind: ``"linear_regression"``, ``"linear_softmax"`` or ``"mlp"``.
        dims: ``d`` for regression, ``(d, k)`` for softmax, ``(d, hidden, k)`` for the MLP.
        init: initial distribution (default standard Gaussian).
        seed: RNG seed for the draw.

    Returns:
        ``(model, theta0)`` with ``theta0`` a :class:`ParamVector`.
    """
    dims = tuple(np.atleast_1d(dims).astype(int).tolist())
    if any(d < 1 for d in dims):
        raise ValueError(f"dimensions must be positive, got {dims}")
    if kind == "linear_regression":
        if len(dims) != 1:
            raise ValueError("linear_regression takes a single dimension")
        model = LinearRegression(dims[0])
    elif kind == "linear_softmax":
        if len(dims) != 2:
            raise ValueError("linear_softmax takes (d, k)")
        model = LinearSoftmax(*dims)
    elif kind == "mlp":
        if len(dims) != 3:
            raise ValueError("mlp takes (d, hidden, k)")
        model = MLP(*dims)
    else:
        raise ValueError(f"unknown model kind {kind!r}")
    init = init or InitDistribution()
    theta0 = init.sample(model.m, np.random.default_rng(seed))
    return model, ParamVector(theta0, dict(model.segments))


# -- losses and risks -----------------------------------------------------------


def _values(v):
    return v.values if isinstance(v, ParamVector) else np.asarray(v, dtype=np.float64)


def _check_lambda(model: Model, lam, spec: LossSpec, include_decay: bool):
    if spec.decay == "per_parameter" and include_decay:
        lam = _values(lam)
        if lam.shape != (model.m,):
            raise ValueError(f"per-parameter decay needs {model.m} hyperparameters, got {lam.shape}")
        if np.any(lam > 700):
            raise OverflowError("exp(lambda) overflows")
        return lam
    return None


def decay_penalty(theta: np.ndarray, lam: np.ndarray) -> float:
    """0.5 * sum(exp(lam) * theta**2)."""
    return float(0.5 * np.sum(np.exp(lam) * theta * theta))


def _base_tensor(model: Model, theta: dc.Tensor, x, y, spec: LossSpec) -> dc.Tensor:
    out = model.forward(theta, x)
    if spec.kind == "squared_error":
        return dc.mean(dc.mul(dc.sub(out, dc.const(y)), dc.sub(out, dc.const(y))))
    return dc.softmax_xent(out, y)


def risk_tensor(model, theta: dc.Tensor, data: Dataset, lam, spec: LossSpec, include_decay: bool) -> dc.Tensor:
    """Differentiable empirical risk; ``lam`` may be a Tensor for hypergradients."""
    if spec.kind != model.loss_kind:
        raise ValueError(f"{model.kind} expects loss {model.loss_kind!r}, got {spec.kind!r}")
    r = _base_tensor(model, theta, data.inputs, data.labels, spec)
    if spec.decay == "per_parameter" and include_decay:
        lam_t = lam if isinstance(lam, dc.Tensor) else dc.const(_check_lambda(model, lam, spec, True))
        if lam_t.shape != (model.m,):
            raise ValueError(f"per-parameter decay needs {model.m} hyperparameters")
        r = dc.add(r, dc.scale(dc.tsum(dc.mul(dc.exp(lam_t), dc.mul(theta, theta))), 0.5))
    return r


def risk_and_grad(model, theta, data: Dataset, lam, spec: LossSpec, include_decay: bool) -> tuple[float, np.ndarray]:
    """Empirical risk and its gradient in theta via the analytic numpy path."""
    if spec.kind != model.loss_kind:
        raise ValueError(f"{model.kind} expects loss {model.loss_kind!r}, got {spec.kind!r}")
    th = _values(theta)
    lam_v = _check_lambda(model, lam, spec, include_decay)
    loss, g = model.loss_grad(th, data.inputs, data.labels)
    if lam_v is not None:
        el = np.exp(lam_v)
        loss += float(0.5 * np.sum(el * th * th))
        g = g + el * th
    if not (np.isfinite(loss) and np.all(np.isfinite(g))):
        raise FloatingPointError("non-finite risk or gradient")
    return loss, g


def loss_eval(model, theta, x, y, lam, spec: LossSpec, include_decay: bool) -> float:
    """Loss on a single example (``x`` a vector) or mean loss over rows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    return risk_eval(model, theta, Dataset(x, np.atleast_1d(y)), lam, spec, include_decay)


def risk_eval(model, theta, data: Dataset, lam, spec: LossSpec, include_decay: bool) -> float:
    """Mean loss over ``data`` (plus the decay penalty when requested)."""
    return risk_and_grad(model, theta, data, lam, spec, include_decay)[0]


def grad_risk(model, theta, data: Dataset, lam, spec: LossSpec, include_decay: bool) -> np.ndarray:
    """Gradient of :func:`risk_eval` in theta, computed by reverse-mode AD."""
    lam_v = _check_lambda(model, lam, spec, include_decay)
    with dc.Tape() as tape:
        th = tape.input(_values(theta))
        r = risk_tensor(model, th, data, lam_v, spec, include_decay)
        (g,) = dc.grad(r, [th])
    return g


def accuracy(model, theta, data: Dataset) -> float:
    """Top-1 accuracy; argmax ties resolve to the lowest class index."""
    pred = np.argmax(model.predict(_values(theta), data.inputs), axis=1)
    return float(np.mean(pred == data.labels))


# -- synthetic data -------------------------------------------------------------


@dataclass(frozen=True)
class DataGenerator:
    """Seeded synthetic data source.

    ``kind`` is ``"freedman_null"``, ``"freedman_signal"`` or ``"gaussian_classes"``.
    For Gaussian classes, ``noise`` is the within-class standard deviation and
    class means are drawn from N(0, I).
    """

    kind: str
    dimension: int
    noise: float = 1.0
    classes: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("freedman_null", "freedman_signal", "gaussian_classes"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.dimension < 1 or (self.kind == "freedman_signal" and self.dimension < 2):
            raise ValueError("dimension too small")

    def sample(self, n: int, rng: np.random.Generator) -> Dataset:
        d = self.dimension
        if self.kind == "gaussian_classes":
            means = np.random.default_rng(self.seed).standard_normal((self.classes, d))
            y = rng.integers(0, self.classes, size=n)
            return Dataset(means[y] + self.noise * rng.standard_normal((n, d)), y)
        x = rng.standard_normal((n, d))
        if self.kind == "freedman_null":
            y = rng.standard_normal(n)
        else:
            y = (x[:, 0] + x[:, 1] + rng.normal(0.0, np.sqrt(2.0), n)) / np.sqrt(6.0)
        return Dataset(x, y)


def split_counts(n_total: int) -> tuple[int, int]:
    if n_total < 2 or n_total % 2:
        raise ValueError("n_total must be a positive even number")
    return n_total // 2, n_total // 2


def generate_freedman(version: str, n_total: int = 500, d: int = 500, seed: int = 0,
                      n_test: int = 10_000) -> tuple[Dataset, Dataset, Dataset]:
    """Freedman's-paradox data: equal train/validation halves plus a test set.

    The null version has labels independent of inputs; in the signal
    version the first two features are the true predictors.
    """
    n_t, _ = split_counts(n_total)
    if version not in ("null", "signal"):
        raise ValueError(f"version must be 'null' or 'signal', got {version!r}")
    gen = DataGenerator(f"freedman_{version}", d, seed=seed)
    rng = np.random.default_rng(seed)
    full = gen.sample(n_total, rng)
    test = gen.sample(n_test, np.random.default_rng([seed, 1]))
    idx = np.arange(n_total)
    return full.subset(idx[:n_t]), full.subset(idx[n_t:]), test


def generate_gaussian_classes(n: int, d: int, k: int = 10, noise: float = 1.0, seed: int = 0) -> Dataset:
    """Mixture of ``k`` isotropic Gaussian classes in ``d`` dimensions."""
    gen = DataGenerator("gaussian_classes", d, noise=noise, classes=k, seed=seed)
    return gen.sample(n, np.random.default_rng([seed, 2]))
