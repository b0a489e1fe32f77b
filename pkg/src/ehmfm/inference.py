"""Scaled forward-backward recursions and the E-step.

All per-subject recursions run on zero-padded (N, Tmax, ...) arrays so
the whole panel advances one occasion per numpy operation.  Emission
densities are evaluated in log space and rescaled by their per-occasion
maximum before exponentiation, which keeps the recursions in a safe
floating-point range even for high-dimensional observations.

Padding convention: beyond a subject's last occasion the log densities
are zero and the transition matrices are the identity, which makes the
recursions no-ops there (scaling factor exactly one).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, ValidationError
from .matexp import CtTransitionCache, ExpmMethod
from .model import (
    MODE_CT,
    MODE_DT,
    MODES,
    EmissionWorkspace,
    ModelParams,
    PanelDataset,
    dt_transition_matrices,
    emission_log_densities,
)


@dataclass(frozen=True)
class _Packed:
    """Flattened and padded views of a dataset."""

    lengths: np.ndarray       # (N,)
    Tmax: int
    valid: np.ndarray         # (N, Tmax) bool
    subj_idx: np.ndarray      # (n,) subject index per stacked observation
    t_idx: np.ndarray         # (n,) within-subject occasion per observation
    Yrows: np.ndarray         # (n, p)
    Xrows: np.ndarray         # (n, d)
    deltas: np.ndarray        # (n,) gap ending at each observation; 0 at t=0
    ids: tuple                # subject ids


def _pack(dataset: PanelDataset) -> _Packed:
    lengths = np.array([s.T for s in dataset.subjects])
    Tmax = int(lengths.max())
    N = dataset.n_subjects
    valid = np.arange(Tmax)[None, :] < lengths[:, None]
    subj_idx = np.repeat(np.arange(N), lengths)
    t_idx = np.concatenate([np.arange(T) for T in lengths])
    Yrows = np.concatenate([s.Y.T for s in dataset.subjects], axis=0)
    Xrows = np.concatenate([s.X.T for s in dataset.subjects], axis=0)
    deltas = np.concatenate(
        [np.concatenate(([0], s.deltas)) for s in dataset.subjects]
    ).astype(float)
    return _Packed(
        lengths=lengths, Tmax=Tmax, valid=valid, subj_idx=subj_idx,
        t_idx=t_idx, Yrows=Yrows, Xrows=Xrows, deltas=deltas,
        ids=tuple(s.id for s in dataset.subjects),
    )


def _check_scale(s, valid_t, ids, t):
    bad = valid_t & ~(s > 0.0)
    if np.any(bad):
        n = int(np.argmax(bad))
        name = ids[n] if ids is not None else str(n)
        raise NumericalError(
            f"forward pass underflow: subject {name!r}, occasion {t + 1} "
            "(all states have vanishing likelihood)"
        )


def _forward_batch(logb, trans, pi, valid, ids=None):
    """Scaled forward recursion over a padded batch.

    Returns (alpha, ctil, b, mx, logc, loglik) where ``ctil`` are the
    scaling factors of the max-rescaled densities ``b`` and
    ``logc = log(ctil) + mx`` recovers the true per-occasion scale.
    """
    N, T, J = logb.shape
    mx = logb.max(axis=2)
    mx = np.where(np.isfinite(mx), mx, 0.0)   # all-states-zero handled below
    b = np.exp(logb - mx[:, :, None])
    alpha = np.empty((N, T, J))
    ctil = np.empty((N, T))
    a = pi[None, :] * b[:, 0]
    s = a.sum(axis=1)
    _check_scale(s, valid[:, 0], ids, 0)
    alpha[:, 0] = a / s[:, None]
    ctil[:, 0] = s
    for t in range(1, T):
        pred = np.einsum("nkj,nk->nj", trans[:, t], alpha[:, t - 1])
        a = b[:, t] * pred
        s = a.sum(axis=1)
        _check_scale(s, valid[:, t], ids, t)
        alpha[:, t] = a / s[:, None]
        ctil[:, t] = s
    logc = np.log(ctil) + mx
    loglik = (logc * valid).sum(axis=1)
    return alpha, ctil, b, mx, logc, loglik


def _backward_batch(b, trans, ctil):
    N, T, J = b.shape
    beta = np.empty((N, T, J))
    beta[:, T - 1] = 1.0
    for t in range(T - 2, -1, -1):
        w = b[:, t + 1] * beta[:, t + 1]
        beta[:, t] = np.einsum("njk,nk->nj", trans[:, t + 1], w) / ctil[:, t + 1, None]
    return beta


def _smooth_batch(alpha, beta, b, trans, ctil):
    gamma = alpha * beta
    eps = (
        alpha[:, :-1, :, None]
        * trans[:, 1:]
        * (b[:, 1:] * beta[:, 1:])[:, :, None, :]
        / ctil[:, 1:, None, None]
    )
    return gamma, eps


def transition_stack(subject, params, mode, method=None, cache=None):
    """Per-subject transition matrices, shape (T, J, J).

    Entry [t] maps occasion t-1 to occasion t; entry [0] is the identity
    and is never used by the recursions.
    """
    J = params.pi.size
    T = subject.T
    out = np.broadcast_to(np.eye(J), (T, J, J)).copy()
    if J == 1:
        return out
    if mode == MODE_DT:
        out[1:] = dt_transition_matrices(subject.X[:, 1:].T, params.B)
    elif mode == MODE_CT:
        cache = cache or CtTransitionCache(params.B, method)
        P, _ = cache.precompute(subject.X[:, 1:].T, subject.deltas.astype(float))
        out[1:] = P
    else:
        raise ValidationError(f"mode must be one of {MODES}")
    return out


def forward_from_logdensities(logb, trans, pi):
    """Scaled forward pass from explicit per-occasion log densities.

    Parameters
    ----------
    logb : ndarray, shape (J, T)
    trans : ndarray, shape (T, J, J)
    pi : ndarray, shape (J,)

    Returns
    -------
    alpha : ndarray, shape (J, T)
        Filtered state probabilities (each column sums to one).
    c : ndarray, shape (T,)
        Per-occasion conditional likelihood scaling factors.
    """
    logb = np.asarray(logb, dtype=float)
    J, T = logb.shape
    valid = np.ones((1, T), dtype=bool)
    alpha, ctil, _, mx, logc, _ = _forward_batch(
        logb.T[None], np.asarray(trans)[None], np.asarray(pi, dtype=float), valid
    )
    return alpha[0].T, np.exp(logc[0])


def forward_pass(subject, params, trans):
    """Forward recursion for one subject.

    ``trans`` is the (T, J, J) stack from :func:`transition_stack`.
    Returns ``(alpha, c)`` with alpha (J, T) and c (T,); the subject's
    log likelihood is ``log(c).sum()``.
    """
    ws = EmissionWorkspace.from_params(params)
    logb = emission_log_densities(subject.Y.T, params, ws).T
    return forward_from_logdensities(logb, trans, params.pi)


def backward_pass(subject, params, trans, c):
    """Backward recursion for one subject, shape (J, T).

    ``c`` must come from a completed forward pass on the same subject.
    """
    ws = EmissionWorkspace.from_params(params)
    logb = emission_log_densities(subject.Y.T, params, ws)  # (T, J)
    mx = logb.max(axis=1)
    b = np.exp(logb - mx[:, None])
    ctil = np.asarray(c, dtype=float) * np.exp(-mx)
    beta = _backward_batch(b[None], np.asarray(trans)[None], ctil[None])
    return beta[0].T


def smooth(alpha, beta, c, params, trans, subject):
    """Smoothed state and pair probabilities for one subject.

    Returns ``(gamma, epsilon)`` with gamma (J, T) and epsilon
    (T-1, J, J) where ``epsilon[t-1][k, j]`` is the posterior probability
    of the pair (state k at t-1, state j at t).  Both satisfy their
    normalization identities by construction; nothing is renormalized.
    """
    ws = EmissionWorkspace.from_params(params)
    logb = emission_log_densities(subject.Y.T, params, ws)
    mx = logb.max(axis=1)
    b = np.exp(logb - mx[:, None])
    ctil = np.asarray(c, dtype=float) * np.exp(-mx)
    gamma, eps = _smooth_batch(
        np.asarray(alpha).T[None], np.asarray(beta).T[None], b[None],
        np.asarray(trans)[None], ctil[None],
    )
    return gamma[0].T, eps[0]


@dataclass
class PosteriorSet:
    """Forward-backward output for every subject.

    Per-subject arrays: ``alpha[i]``/``beta[i]``/``gamma[i]`` are (J, T_i),
    ``c[i]`` is (T_i,) and ``epsilon[i]`` is (T_i - 1, J, J).
    """

    alpha: list
    beta: list
    c: list
    gamma: list
    epsilon: list
    loglik: float

    def validate(self, tol=1e-10):
        """Assert the probabilistic identities the recursions guarantee."""
        for i, (a, bta, cc, g, e) in enumerate(
            zip(self.alpha, self.beta, self.c, self.gamma, self.epsilon)
        ):
            assert np.all(cc > 0), f"subject index {i}: c not positive"
            assert np.allclose(a.sum(axis=0), 1.0, atol=tol)
            assert np.allclose(g.sum(axis=0), 1.0, atol=tol)
            assert np.all((g >= -tol) & (g <= 1 + tol))
            assert np.all((a >= -tol) & (a <= 1 + tol))
            if e.size:
                assert np.allclose(e.sum(axis=(1, 2)), 1.0, atol=tol)
                assert np.allclose(e.sum(axis=1), g[:, 1:].T, atol=tol)


@dataclass
class SuffStats:
    """Accumulated E-step moments.

    ``yz[j]`` is the gamma-weighted sum of ``y E[ztilde]'`` and ``zz[j]``
    of ``E[ztilde ztilde']`` for the augmented scores
    ``ztilde = (z', 1)'``; ``yy_diag`` is the plain sum of squared
    observations (state weights sum to one).  ``epsilon`` keeps the
    per-subject pair posteriors for the transition update.
    """

    gamma1: np.ndarray    # (J,)
    yz: np.ndarray        # (J, p, K + 1)
    zz: np.ndarray        # (J, K + 1, K + 1)
    yy_diag: np.ndarray   # (p,)
    total_obs: int
    epsilon: list = field(repr=False)


@dataclass(frozen=True)
class CtKeyIndex:
    """Distinct (covariates, gap) pairs over all intervals of a panel.

    ``inverse`` maps each interval row (subject-major, t >= 2) to its
    distinct pair; the pairs themselves never change during a fit, so
    this is computed once and shared by the E-step and the transition
    update.
    """

    Xu: np.ndarray       # (m, d)
    du: np.ndarray       # (m,)
    inverse: np.ndarray  # (n_intervals,)


def ct_key_index(Xrows, deltas) -> CtKeyIndex:
    keys = np.column_stack([Xrows, deltas])
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    return CtKeyIndex(Xu=uniq[:, :-1], du=uniq[:, -1], inverse=inverse)


def _transition_tensor(packed, params, mode, method, cache, ct_keys=None):
    """Padded (N, Tmax, J, J) transition tensor; identity at t=0 and padding."""
    J = params.pi.size
    N, Tmax = packed.valid.shape
    trans = np.zeros((N, Tmax, J, J))
    trans[..., np.arange(J), np.arange(J)] = 1.0
    if J == 1:
        return trans
    arrive = packed.t_idx >= 1
    rows_n = packed.subj_idx[arrive]
    rows_t = packed.t_idx[arrive]
    X2 = packed.Xrows[arrive]
    if mode == MODE_DT:
        trans[rows_n, rows_t] = dt_transition_matrices(X2, params.B)
    else:
        if ct_keys is None:
            ct_keys = ct_key_index(X2, packed.deltas[arrive])
        P, _ = cache.precompute(ct_keys.Xu, ct_keys.du)
        trans[rows_n, rows_t] = P[ct_keys.inverse]
    return trans


def estep(dataset, params, mode, method=None, cache=None, validate=False,
          packed=None, ct_keys=None):
    """One E-step over the whole panel.

    Runs the scaled forward-backward recursions per subject, assembles
    the factor posterior moments, and reduces them in a fixed order so
    results are reproducible for any subject ordering.

    Parameters
    ----------
    dataset : PanelDataset
    params : ModelParams
    mode : {"dt", "ct"}
    method : ExpmMethod, optional
        Matrix-exponential method for ct mode.
    cache : CtTransitionCache, optional
        Transition cache valid for ``params.B``; built fresh when omitted.
    packed, ct_keys : optional
        Precomputed data layout (both are pure functions of the dataset);
        the fitting loop computes them once and reuses them.

    Returns
    -------
    (SuffStats, PosteriorSet, float)
        The accumulated moments, the per-subject posteriors, and the
        observed-data log likelihood.
    """
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}")
    if packed is None:
        packed = _pack(dataset)
    J, p, K = params.lam.shape
    ws = EmissionWorkspace.from_params(params)
    logd = emission_log_densities(packed.Yrows, params, ws)   # (n, J)

    N, Tmax = packed.valid.shape
    logb = np.zeros((N, Tmax, J))
    logb[packed.subj_idx, packed.t_idx] = logd
    if mode == MODE_CT and cache is None:
        cache = CtTransitionCache(params.B, method)
    trans = _transition_tensor(packed, params, mode, method, cache, ct_keys)

    alpha, ctil, b, mx, logc, logliks = _forward_batch(
        logb, trans, params.pi, packed.valid, packed.ids
    )
    beta = _backward_batch(b, trans, ctil)
    gamma, eps = _smooth_batch(alpha, beta, b, trans, ctil)

    lengths = packed.lengths
    posteriors = PosteriorSet(
        alpha=[alpha[i, :T].T for i, T in enumerate(lengths)],
        beta=[beta[i, :T].T for i, T in enumerate(lengths)],
        c=[np.exp(logc[i, :T]) for i, T in enumerate(lengths)],
        gamma=[gamma[i, :T].T for i, T in enumerate(lengths)],
        epsilon=[eps[i, : T - 1] for i, T in enumerate(lengths)],
        loglik=float(logliks.sum()),
    )
    if validate:
        posteriors.validate()

    g_flat = gamma[packed.subj_idx, packed.t_idx]              # (n, J)
    yz = np.empty((J, p, K + 1))
    zz = np.empty((J, K + 1, K + 1))
    for j in range(J):
        R = packed.Yrows - params.mu[j]
        m = (R @ ws.W[j].T) @ ws.M[j]                          # (n, K)
        g = g_flat[:, j]
        gm = m * g[:, None]
        yz[j, :, :K] = packed.Yrows.T @ gm
        yz[j, :, K] = packed.Yrows.T @ g
        zz[j, :K, :K] = ws.M[j] * g.sum() + gm.T @ m
        zz[j, :K, K] = gm.sum(axis=0)
        zz[j, K, :K] = zz[j, :K, K]
        zz[j, K, K] = g.sum()
    stats = SuffStats(
        gamma1=gamma[:, 0, :].sum(axis=0),
        yz=yz,
        zz=zz,
        yy_diag=(packed.Yrows ** 2).sum(axis=0),
        total_obs=int(lengths.sum()),
        epsilon=posteriors.epsilon,
    )
    return stats, posteriors, posteriors.loglik
