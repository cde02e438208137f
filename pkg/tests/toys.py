"""Small problems shared by the hyperparameter-optimization tests."""

import math

import numpy as np

from pacbayes_hpo.bounds import GaussianParams, chain_rule_kl_bound, gaussian_kl
from pacbayes_hpo.hyperopt import Problem
from pacbayes_hpo.models import Dataset, InitDistribution, LinearRegression, LossSpec


def ridge_toy(seed: int, n: int = 20, eta: float = 0.1, inner: str = "sgld", tau: float | None = None) -> Problem:
    """One-parameter ridge regression with one log-decay hyperparameter.

    Training and validation targets have different slopes so that the
    gradient incoherence stays away from zero.
    """
    rng = np.random.default_rng(seed)
    x_t, x_v = rng.normal(size=(n, 1)), rng.normal(size=(n, 1))
    slope_t, slope_v = rng.uniform(0.5, 2.0, size=2)
    train = Dataset(x_t, slope_t * x_t[:, 0] + 0.3 * rng.normal(size=n))
    val = Dataset(x_v, slope_v * x_v[:, 0] + 0.3 * rng.normal(size=n))
    spec = LossSpec("squared_error", "per_parameter", tau=tau if tau is not None else float(n))
    return Problem(LinearRegression(1), train, val, spec, InitDistribution("gaussian", std=1.0), eta=eta, inner=inner)


def central_difference(f, lam: np.ndarray, h: float = 1e-5) -> np.ndarray:
    out = np.zeros_like(lam)
    for i in range(lam.size):
        e = np.zeros_like(lam)
        e[i] = h
        out[i] = (f(lam + e) - f(lam - e)) / (2 * h)
    return out


GH_X, GH_W = np.polynomial.hermite_e.hermegauss(40)


def gaussian_chain_case(rng, steps=2):
    """Two 1-D Langevin chains on quadratic risks a (theta - c)^2 / 2 from a shared Gaussian P0.

    Returns the exact KL of the final marginals and the chain-rule bound,
    with per-step expectations under the training chain's marginal
    computed by Gauss-Hermite quadrature.
    """
    a_t, a_v = rng.uniform(0.2, 3.0, 2)
    c_t, c_v = rng.normal(0, 1.5, 2)
    eta_t, eta_v = rng.uniform(0.01, 0.4, 2)
    n_t, n_v = rng.integers(2, 60, 2)
    mu0, var0 = rng.normal(0, 2), rng.uniform(0.05, 4.0)
    mq, vq, mp, vp = mu0, var0, mu0, var0
    grads_t, grads_v = [], []
    for _ in range(steps):
        pts = mq + math.sqrt(vq) * GH_X
        grads_t.append((a_t * (pts - c_t))[:, None])
        grads_v.append((a_v * (pts - c_v))[:, None])
        mq, vq = (1 - eta_t * a_t) * mq + eta_t * a_t * c_t, (1 - eta_t * a_t) ** 2 * vq + 2 * eta_t / n_t
        mp, vp = (1 - eta_v * a_v) * mp + eta_v * a_v * c_v, (1 - eta_v * a_v) ** 2 * vp + 2 * eta_v / n_v
    exact = gaussian_kl(GaussianParams(mq, vq), GaussianParams(mp, vp))
    bound = chain_rule_kl_bound(np.array(grads_t), np.array(grads_v), eta_t, eta_v, int(n_t), int(n_v),
                                weights=GH_W)
    return exact, bound, (eta_t, eta_v, int(n_t), int(n_v))
