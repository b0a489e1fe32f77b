"""Closed-form M-step updates and the stabilized transition step.

The initial distribution, means, loadings and residual variances have
closed-form maximizers given the E-step moments.  The transition
coefficients get a single Newton-Raphson step (discrete time) or Fisher
scoring step (continuous time) per M-step; an optional rank-one
stabilization adds the score outer product ``S S'`` to the curvature,
which shortens the step without changing its direction at a stationary
point.  If a proposed step would still lower the transition part of the
expected complete-data objective, it is halved up to five times and then
dropped, preserving the generalized-EM ascent property.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import NumericalError
from .matexp import CtTransitionCache, ExpmMethod, expm
from .model import (
    PSI_FLOOR,
    ct_intensity_matrices,
    dt_transition_matrices,
    offdiag_pairs,
    theta_to_B,
)

_TINY_PROB = 1e-300


@dataclass
class OptStepReport:
    """Score and curvature of one transition update.

    ``score`` and ``curvature`` follow the flattened coefficient layout
    of :func:`ehmfm.model.offdiag_pairs` (restricted to one origin row
    in dt mode, all blocks in ct mode).
    """

    score: np.ndarray
    curvature: np.ndarray
    step_norm: float = float("nan")
    stabilized: bool = False


def update_pi(stats) -> np.ndarray:
    """Closed-form update of the initial-state distribution."""
    return stats.gamma1 / stats.gamma1.sum()


def update_loadings(stats, j) -> np.ndarray:
    """Closed-form update of the augmented loadings of state j.

    Returns the (p, K+1) matrix whose first K columns are the factor
    loadings and whose last column is the state mean.
    """
    try:
        lamtilde = np.linalg.solve(stats.zz[j], stats.yz[j].T).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            f"state {j}: singular factor-moment matrix "
            "(state starved of posterior mass)"
        ) from exc
    if not np.all(np.isfinite(lamtilde)):
        raise NumericalError(f"state {j}: non-finite loadings update")
    return lamtilde


def update_psi(stats, lamtildes) -> np.ndarray:
    """Closed-form update of the residual variances (floored)."""
    resid = stats.yy_diag.copy()
    for j in range(len(lamtildes)):
        resid -= np.sum(lamtildes[j] * stats.yz[j], axis=1)
    return np.maximum(resid / stats.total_obs, PSI_FLOOR)


class TransitionData:
    """Flattened per-interval posteriors feeding the transition update.

    One row per (subject, occasion t >= 2): the pair posteriors, the
    smoothed probabilities at the interval start, the covariates at the
    interval end, and the gap length.
    """

    def __init__(self, eps, gprev, X, deltas, subject_ids, occasions,
                 key_index=None):
        self.eps = eps            # (n2, J, J)
        self.gprev = gprev        # (n2, J)
        self.X = X                # (n2, d)
        self.deltas = deltas      # (n2,)
        self.subject_ids = subject_ids
        self.occasions = occasions
        self._key_index = key_index

    @classmethod
    def from_posteriors(cls, posteriors, dataset, key_index=None):
        eps = np.concatenate(posteriors.epsilon, axis=0)
        gprev = np.concatenate([g[:, :-1].T for g in posteriors.gamma], axis=0)
        X = np.concatenate([s.X[:, 1:].T for s in dataset.subjects], axis=0)
        deltas = np.concatenate([s.deltas for s in dataset.subjects]).astype(float)
        ids = np.concatenate([[s.id] * (s.T - 1) for s in dataset.subjects])
        occ = np.concatenate([np.arange(2, s.T + 1) for s in dataset.subjects])
        return cls(eps, gprev, X, deltas, ids, occ, key_index=key_index)

    @cached_property
    def _unique(self):
        if self._key_index is not None:
            k = self._key_index
            return k.Xu, k.du, k.inverse
        keys = np.column_stack([self.X, self.deltas])
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        return uniq[:, :-1], uniq[:, -1], inverse

    @cached_property
    def eps_by_key(self):
        Xu, du, inverse = self._unique
        out = np.zeros((len(du),) + self.eps.shape[1:])
        np.add.at(out, inverse, self.eps)
        return out

    @cached_property
    def gprev_by_key(self):
        Xu, du, inverse = self._unique
        out = np.zeros((len(du),) + self.gprev.shape[1:])
        np.add.at(out, inverse, self.gprev)
        return out


def _solve_step(report: OptStepReport, stabilize: bool):
    S, M = report.score, report.curvature
    used = M + np.outer(S, S) if stabilize else M
    stabilized = stabilize
    try:
        step = np.linalg.solve(used, S)
    except np.linalg.LinAlgError:
        step = None
    if step is None or not np.all(np.isfinite(step)):
        if not stabilize:
            stabilized = True
            try:
                step = np.linalg.solve(M + np.outer(S, S), S)
            except np.linalg.LinAlgError as exc:
                raise NumericalError("singular transition curvature matrix") from exc
        if step is None or not np.all(np.isfinite(step)):
            raise NumericalError("singular transition curvature matrix")
    report.step_norm = float(np.linalg.norm(step))
    report.stabilized = stabilized
    return step


# ---------------------------------------------------------------------------
# discrete time


def dt_objective(tdata: TransitionData, B) -> float:
    """Pair-posterior-weighted log transition probabilities."""
    P = dt_transition_matrices(tdata.X, B)
    return float(np.sum(tdata.eps * np.log(P)))


def dt_score_info(tdata: TransitionData, B, k) -> OptStepReport:
    """Score and negative-Hessian blocks for origin row k.

    Layout: destination blocks for j != k in ascending order, each of
    length d, so the score has length d * (J - 1).
    """
    J = B.shape[0]
    d = tdata.X.shape[1]
    cols = [j for j in range(J) if j != k]
    P = dt_transition_matrices(tdata.X, B)[:, k, :]        # (n2, J)
    resid = tdata.eps[:, k, :][:, cols] - tdata.gprev[:, [k]] * P[:, cols]
    S = (resid.T @ tdata.X).ravel()
    w0 = tdata.gprev[:, k]
    M = np.empty((len(cols), len(cols), d, d))
    for a, j in enumerate(cols):
        for b, j2 in enumerate(cols):
            if b < a:
                M[a, b] = M[b, a].T
                continue
            w = w0 * P[:, j] * ((1.0 if j == j2 else 0.0) - P[:, j2])
            M[a, b] = np.einsum("n,nd,ne->de", w, tdata.X, tdata.X)
    M = M.transpose(0, 2, 1, 3).reshape(len(cols) * d, len(cols) * d)
    M = 0.5 * (M + M.T)
    return OptStepReport(score=S, curvature=M)


def dt_update_B(B, reports, stabilize=True) -> np.ndarray:
    """Apply one Newton step per origin row; returns the new B."""
    J, _, d = B.shape
    out = B.copy()
    for k, report in enumerate(reports):
        step = _solve_step(report, stabilize)
        step = step.reshape(J - 1, d)
        cols = [j for j in range(J) if j != k]
        for block, j in zip(step, cols):
            out[k, j] = out[k, j] + block
    return out


def dt_transition_step(tdata: TransitionData, B, stabilize=True, max_halvings=5):
    """One guarded Newton step on all transition coefficients.

    The proposed step is halved (up to ``max_halvings`` times) while it
    decreases the transition objective; if no fraction helps, B is
    returned unchanged.
    """
    J = B.shape[0]
    reports = [dt_score_info(tdata, B, k) for k in range(J)]
    proposed = dt_update_B(B, reports, stabilize)
    obj0 = dt_objective(tdata, B)
    frac = 1.0
    for _ in range(max_halvings + 1):
        trial = B + frac * (proposed - B)
        if dt_objective(tdata, trial) >= obj0 - 1e-10 * (1.0 + abs(obj0)):
            return trial, reports
        frac *= 0.5
    return B, reports


# ---------------------------------------------------------------------------
# continuous time


def _ct_probs_by_key(tdata: TransitionData, B, method):
    Xu, du, _ = tdata._unique
    Q = ct_intensity_matrices(Xu, B)
    A = du[:, None, None] * Q
    return np.clip(expm(A, method), 0.0, 1.0)


def ct_objective(tdata: TransitionData, B, method=None) -> float:
    """Pair-posterior-weighted log transition probabilities over gaps."""
    P = _ct_probs_by_key(tdata, B, method)
    E = tdata.eps_by_key
    logP = np.log(np.maximum(P, _TINY_PROB))
    return float(np.sum(E * logP))


def ct_score_info(tdata: TransitionData, B, cache: CtTransitionCache) -> OptStepReport:
    """Score and expected information for all ct coefficients.

    ``cache`` must have been built for the same B.  The flattened layout
    is (k, j) pairs k-major with d coefficients per pair.
    """
    J = B.shape[0]
    d = tdata.X.shape[1]
    pairs = offdiag_pairs(J)
    Xu, du, inverse = tdata._unique
    P, base = cache.precompute(Xu, du, derivatives=True)     # (m,J,J), (m,npairs,J,J)

    weights = tdata.eps_by_key + tdata.gprev_by_key[:, :, None]
    bad = (P < _TINY_PROB) & (weights > 0)
    if np.any(bad):
        u, k, j = np.argwhere(bad)[0]
        n = int(np.argmax(inverse == u))
        raise NumericalError(
            f"vanishing transition probability ({k + 1} -> {j + 1}) over gap "
            f"{du[u]:g} for subject {tdata.subject_ids[n]!r}, "
            f"occasion {tdata.occasions[n]}"
        )
    Psafe = np.maximum(P, _TINY_PROB)
    m = len(du)
    F2 = base.reshape(m, len(pairs), J * J)
    v = (tdata.eps_by_key / Psafe).reshape(m, J * J)
    w = (tdata.gprev_by_key[:, :, None] / Psafe).reshape(m, J * J)
    S = np.einsum("upq,uq,uc->pc", F2, v, Xu).ravel()
    M = np.einsum("upq,urq,uq,uc,ue->pcre", F2, F2, w, Xu, Xu)
    M = M.reshape(len(pairs) * d, len(pairs) * d)
    M = 0.5 * (M + M.T)
    return OptStepReport(score=S, curvature=M)


def ct_update_theta(theta, report: OptStepReport, stabilize=True) -> np.ndarray:
    """Apply one Fisher-scoring step to the flattened ct coefficients."""
    step = _solve_step(report, stabilize)
    return np.asarray(theta, dtype=float) + step


def ct_transition_step(tdata: TransitionData, B, cache, stabilize=True,
                       method=None, max_halvings=5):
    """One guarded Fisher-scoring step on all ct transition coefficients."""
    J, _, d = B.shape
    report = ct_score_info(tdata, B, cache)
    pairs = offdiag_pairs(J)
    rows, cols = zip(*pairs)
    theta0 = B[list(rows), list(cols)].ravel()
    theta1 = ct_update_theta(theta0, report, stabilize)
    obj0 = ct_objective(tdata, B, method)
    frac = 1.0
    for _ in range(max_halvings + 1):
        trial = theta_to_B(theta0 + frac * (theta1 - theta0), J, d)
        if ct_objective(tdata, trial, method) >= obj0 - 1e-10 * (1.0 + abs(obj0)):
            return trial, report
        frac *= 0.5
    return B, report
