"""Shared test helpers: brute-force oracles and small random instances."""

import itertools

import numpy as np
import pytest

from ehmfm.model import ModelParams, PanelDataset, SubjectRecord


def brute_force_posteriors(pi, trans, dens):
    """Exhaustive path-sum reference for a single chain.

    Parameters
    ----------
    pi : (J,) initial distribution
    trans : (T, J, J), entry [t] maps occasion t-1 to t ([0] unused)
    dens : (J, T) linear emission densities

    Returns
    -------
    (loglik, gamma, eps) with gamma (J, T) and eps (T-1, J, J).
    """
    J, T = dens.shape
    total = 0.0
    gamma = np.zeros((J, T))
    eps = np.zeros((T - 1, J, J))
    for path in itertools.product(range(J), repeat=T):
        pr = pi[path[0]] * dens[path[0], 0]
        for t in range(1, T):
            pr *= trans[t][path[t - 1], path[t]] * dens[path[t], t]
        total += pr
        for t in range(T):
            gamma[path[t], t] += pr
        for t in range(1, T):
            eps[t - 1][path[t - 1], path[t]] += pr
    return np.log(total), gamma / total, eps / total


def random_params(rng, J, K, p, d, spread=2.0):
    """A valid random parameter set with well-separated means."""
    pi = rng.dirichlet(np.ones(J) * 5)
    mu = rng.normal(scale=spread, size=(J, p))
    lam = rng.normal(scale=0.5, size=(J, p, K))
    psi = rng.uniform(0.5, 1.5, size=p)
    B = rng.normal(scale=0.5, size=(J, J, d))
    B[np.arange(J), np.arange(J)] = 0.0
    return ModelParams(pi=pi, mu=mu, lam=lam, psi=psi, B=B)


def random_dataset(rng, N, T, p, d, params=None, mode="dt"):
    """A small panel with iid-normal observations (no model structure)."""
    subjects = []
    for i in range(N):
        if mode == "dt":
            times = np.arange(1, T + 1)
        else:
            times = np.sort(rng.choice(np.arange(1, 4 * T), size=T, replace=False))
        Y = rng.normal(size=(p, T))
        X = np.vstack([np.ones(T), rng.normal(size=(d - 1, T))]) if d > 1 \
            else np.ones((1, T))
        subjects.append(SubjectRecord(id=f"u{i}", times=times, Y=Y, X=X))
    return PanelDataset(subjects=tuple(subjects), p=p, d=d)


def dense_gaussian_logpdf(y, mean, cov):
    """Reference log density via a dense solve (the oracle path)."""
    y = np.asarray(y, dtype=float)
    r = y - mean
    sign, logdet = np.linalg.slogdet(cov)
    assert sign > 0
    return float(
        -0.5 * (y.size * np.log(2 * np.pi) + logdet + r @ np.linalg.solve(cov, r))
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
