"""Core types and densities for hidden Markov factor models.

Observations follow a state-specific factor decomposition
``y = mu_j + Lambda_j z + e`` with ``z ~ N(0, I_K)``, ``e ~ N(0, Psi)``
and diagonal ``Psi``, so ``y | state j  ~  N(mu_j, Lambda_j Lambda_j' + Psi)``.
All Gaussian algebra goes through the Woodbury identity, so nothing
ever forms or inverts a p-by-p covariance matrix.

State dynamics are covariate-driven: a multinomial-logit transition
matrix in discrete time ("dt"), a log-linear transition intensity
matrix in continuous time ("ct").  In both modes ``B[k, j]`` is the
length-d coefficient vector governing the move from state k to state j;
the diagonal blocks are identically zero (the logit reference category
in dt mode, unused in ct mode).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import NumericalError, ValidationError

MODE_DT = "dt"
MODE_CT = "ct"
MODES = (MODE_DT, MODE_CT)

# Lower clamp for residual variances; prevents Heywood-style collapse of
# a diagonal entry of Psi during the closed-form update.
PSI_FLOOR = 1e-6

_LOG_2PI = np.log(2.0 * np.pi)
_EXP_MAX = 700.0  # exp() overflows above this on float64


def _frozen(a, dtype=float):
    out = np.ascontiguousarray(a, dtype=dtype)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class SubjectRecord:
    """Measurements of one subject on a strictly increasing integer grid.

    Attributes
    ----------
    id : str
        Subject identifier.
    times : ndarray, shape (T,)
        Integer occasion indices, strictly increasing, T >= 2.
    Y : ndarray, shape (p, T)
        Observed features, one column per occasion; all finite.
    X : ndarray, shape (d, T)
        Transition covariates, one column per occasion; first row is the
        intercept and must be identically one.
    """

    id: str
    times: np.ndarray
    Y: np.ndarray
    X: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times)
        if times.ndim != 1 or times.size < 2:
            raise ValidationError(
                f"subject {self.id!r}: needs at least two occasions"
            )
        if not np.issubdtype(times.dtype, np.integer):
            as_int = np.asarray(times, dtype=np.int64)
            if not np.array_equal(as_int, times):
                raise ValidationError(
                    f"subject {self.id!r}: times must be integers"
                )
            times = as_int
        if np.any(np.diff(times) < 1):
            raise ValidationError(
                f"subject {self.id!r}: times must be strictly increasing"
            )
        Y = np.asarray(self.Y, dtype=float)
        X = np.asarray(self.X, dtype=float)
        if Y.ndim != 2 or Y.shape[1] != times.size:
            raise ValidationError(
                f"subject {self.id!r}: Y must be (p, T) with T = len(times)"
            )
        if not np.all(np.isfinite(Y)):
            raise ValidationError(f"subject {self.id!r}: Y has non-finite entries")
        if X.ndim != 2 or X.shape[1] != times.size:
            raise ValidationError(
                f"subject {self.id!r}: X must be (d, T) with T = len(times)"
            )
        if not np.all(X[0] == 1.0):
            raise ValidationError(
                f"subject {self.id!r}: first covariate row must be the constant 1"
            )
        object.__setattr__(self, "times", _frozen(times, dtype=np.int64))
        object.__setattr__(self, "Y", _frozen(Y))
        object.__setattr__(self, "X", _frozen(X))

    @property
    def T(self) -> int:
        return self.times.size

    @property
    def deltas(self) -> np.ndarray:
        """Integer gaps between consecutive occasions, shape (T - 1,)."""
        return np.diff(self.times)


@dataclass(frozen=True)
class PanelDataset:
    """A panel of subjects sharing feature and covariate dimensions."""

    subjects: tuple
    p: int
    d: int

    def __post_init__(self):
        subjects = tuple(self.subjects)
        if not subjects:
            raise ValidationError("dataset has no subjects")
        for s in subjects:
            if s.Y.shape[0] != self.p or s.X.shape[0] != self.d:
                raise ValidationError(
                    f"subject {s.id!r}: inconsistent dimensions "
                    f"(expected p={self.p}, d={self.d})"
                )
        ids = [s.id for s in subjects]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate subject ids in dataset")
        object.__setattr__(self, "subjects", subjects)

    @property
    def n_subjects(self) -> int:
        return len(self.subjects)

    @property
    def total_obs(self) -> int:
        return int(sum(s.T for s in self.subjects))

    def pooled_observations(self) -> np.ndarray:
        """All observations stacked as rows, shape (total_obs, p)."""
        return np.concatenate([s.Y.T for s in self.subjects], axis=0)


@dataclass(frozen=True)
class ModelDims:
    """Model size: J states, K factors, p features, d covariates."""

    J: int
    K: int
    p: int
    d: int

    def __post_init__(self):
        if self.J < 1:
            raise ValidationError("J must be >= 1")
        if not 1 <= self.K < self.p:
            raise ValidationError("K must satisfy 1 <= K < p")
        if self.d < 1:
            raise ValidationError("d must be >= 1")


def offdiag_pairs(J):
    """(k, j) pairs with j != k, k-major then j ascending.

    This is the canonical layout for every flattened transition-parameter
    vector in the package.
    """
    return [(k, j) for k in range(J) for j in range(J) if j != k]


@dataclass(frozen=True)
class ModelParams:
    """Full parameter set for one (J, K) configuration.

    Attributes
    ----------
    pi : ndarray, shape (J,)
        Initial-state probabilities (simplex).
    mu : ndarray, shape (J, p)
        State-specific means.
    lam : ndarray, shape (J, p, K)
        State-specific factor loadings.
    psi : ndarray, shape (p,)
        Diagonal of the shared residual covariance, strictly positive.
    B : ndarray, shape (J, J, d)
        Transition coefficients; ``B[k, j]`` governs k -> j and the
        diagonal blocks are identically zero.
    """

    pi: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    psi: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        mu = np.atleast_2d(np.asarray(self.mu, dtype=float))
        lam = np.asarray(self.lam, dtype=float)
        psi = np.asarray(self.psi, dtype=float)
        B = np.asarray(self.B, dtype=float)
        J = pi.size
        if mu.shape[0] != J or lam.shape[0] != J:
            raise ValidationError("pi, mu, lam disagree on the number of states")
        p = mu.shape[1]
        if lam.ndim != 3 or lam.shape[1] != p:
            raise ValidationError("lam must be (J, p, K)")
        if psi.shape != (p,):
            raise ValidationError("psi must be a length-p vector")
        if B.ndim != 3 or B.shape[0] != J or B.shape[1] != J:
            raise ValidationError("B must be (J, J, d)")
        if np.any(pi < -1e-12) or abs(pi.sum() - 1.0) > 1e-8:
            raise ValidationError("pi must be a probability vector")
        if np.any(psi <= 0.0):
            raise ValidationError("psi entries must be strictly positive")
        diag = B[np.arange(J), np.arange(J)]
        if np.any(diag != 0.0):
            raise ValidationError("diagonal blocks of B must be zero")
        object.__setattr__(self, "pi", _frozen(pi))
        object.__setattr__(self, "mu", _frozen(mu))
        object.__setattr__(self, "lam", _frozen(lam))
        object.__setattr__(self, "psi", _frozen(psi))
        object.__setattr__(self, "B", _frozen(B))

    @property
    def dims(self) -> ModelDims:
        J, p, K = self.lam.shape
        return ModelDims(J=J, K=K, p=p, d=self.B.shape[2])

    def flat(self) -> np.ndarray:
        """All parameters as one vector (off-diagonal B blocks only)."""
        J = self.pi.size
        parts = [self.pi, self.mu.ravel(), self.lam.ravel(), self.psi]
        if J > 1:
            rows, cols = zip(*offdiag_pairs(J))
            parts.append(self.B[list(rows), list(cols)].ravel())
        return np.concatenate(parts)

    def theta(self) -> np.ndarray:
        """Off-diagonal B blocks flattened in ``offdiag_pairs`` order."""
        J = self.pi.size
        pairs = offdiag_pairs(J)
        if not pairs:
            return np.empty(0)
        rows, cols = zip(*pairs)
        return self.B[list(rows), list(cols)].ravel()

    def with_B(self, B) -> "ModelParams":
        return replace(self, B=B)


def theta_to_B(theta, J, d):
    """Inverse of :meth:`ModelParams.theta` (zero diagonal restored)."""
    B = np.zeros((J, J, d))
    theta = np.asarray(theta, dtype=float).reshape(-1, d)
    for block, (k, j) in zip(theta, offdiag_pairs(J)):
        B[k, j] = block
    return B


@dataclass(frozen=True)
class EmissionWorkspace:
    """Per-state quantities reused across density evaluations.

    ``M[j] = (I + Lam' Psi^-1 Lam)^-1`` is the posterior covariance of the
    factor scores given an observation in state j, ``W[j] = Lam' Psi^-1``
    and ``logdet[j] = log|Lam Lam' + Psi|``.  Rebuild whenever the
    parameters change; all entries are read-only and safe to share.
    """

    M: np.ndarray        # (J, K, K)
    W: np.ndarray        # (J, K, p)
    logdet: np.ndarray   # (J,)
    inv_psi: np.ndarray  # (p,)

    @classmethod
    def from_params(cls, params: ModelParams) -> "EmissionWorkspace":
        J, p, K = params.lam.shape
        inv_psi = 1.0 / params.psi
        M = np.empty((J, K, K))
        W = np.empty((J, K, p))
        logdet = np.empty(J)
        log_psi = np.log(params.psi).sum()
        eye = np.eye(K)
        for j in range(J):
            W[j] = params.lam[j].T * inv_psi
            G = eye + W[j] @ params.lam[j]
            sign, ld = np.linalg.slogdet(G)
            if sign <= 0 or not np.isfinite(ld):
                raise NumericalError(
                    f"state {j}: I + Lam' Psi^-1 Lam is not positive definite"
                )
            Minv = np.linalg.inv(G)
            M[j] = 0.5 * (Minv + Minv.T)
            logdet[j] = log_psi + ld
        return cls(
            M=_frozen(M), W=_frozen(W), logdet=_frozen(logdet),
            inv_psi=_frozen(inv_psi),
        )


def emission_log_densities(Yrows, params, ws) -> np.ndarray:
    """Log density of each observation under each state.

    Parameters
    ----------
    Yrows : ndarray, shape (n, p)
        Observations as rows.
    params, ws : ModelParams, EmissionWorkspace
        Current parameters with a workspace built from them.

    Returns
    -------
    ndarray, shape (n, J)
    """
    Yrows = np.atleast_2d(np.asarray(Yrows, dtype=float))
    n, p = Yrows.shape
    J = params.pi.size
    out = np.empty((n, J))
    for j in range(J):
        R = Yrows - params.mu[j]
        U = R @ ws.W[j].T                        # (n, K) = (Lam' Psi^-1 r)'
        quad = (R * R) @ ws.inv_psi - np.einsum("nk,nk->n", U @ ws.M[j], U)
        out[:, j] = -0.5 * (p * _LOG_2PI + ws.logdet[j] + quad)
    if not np.all(np.isfinite(out)):
        raise NumericalError(
            "non-finite emission log density (degenerate residual variance?)"
        )
    return out


def emission_log_density(y, j, params, ws) -> float:
    """Log N(y; mu_j, Lam_j Lam_j' + Psi) via the Woodbury identity."""
    return float(emission_log_densities(np.asarray(y)[None, :], params, ws)[0, j])


def factor_posterior_moments(y, j, params, ws):
    """Posterior mean and second moment of the factor scores.

    Returns ``m = E[z | y, state j]`` (shape (K,)) and
    ``V = E[z z' | y, state j] = M_j + m m'`` (shape (K, K)).
    """
    r = np.asarray(y, dtype=float) - params.mu[j]
    m = ws.M[j] @ (ws.W[j] @ r)
    V = ws.M[j] + np.outer(m, m)
    return m, V


def dt_transition_matrices(Xrows, B) -> np.ndarray:
    """Row-stochastic transition matrices, one per covariate row.

    Row k of each matrix is the softmax over destinations j of
    ``x' B[k, j]`` with the diagonal block pinned at zero.

    Parameters
    ----------
    Xrows : ndarray, shape (n, d)
    B : ndarray, shape (J, J, d)

    Returns
    -------
    ndarray, shape (n, J, J)
    """
    Xrows = np.atleast_2d(np.asarray(Xrows, dtype=float))
    if np.any(np.isnan(Xrows)):
        raise ValidationError("NaN in transition covariates")
    logits = np.einsum("nd,kjd->nkj", Xrows, B)
    logits -= logits.max(axis=2, keepdims=True)
    P = np.exp(logits)
    P /= P.sum(axis=2, keepdims=True)
    return P


def dt_transition_matrix(x, B) -> np.ndarray:
    """Single-covariate-vector version of :func:`dt_transition_matrices`."""
    return dt_transition_matrices(np.asarray(x)[None, :], B)[0]


def ct_intensity_matrices(Xrows, B) -> np.ndarray:
    """Transition intensity (generator) matrices, one per covariate row.

    Off-diagonal rates are ``q_kj = exp(x' B[k, j])``; each diagonal
    entry is minus its row's off-diagonal sum, so rows sum to zero.
    """
    Xrows = np.atleast_2d(np.asarray(Xrows, dtype=float))
    if np.any(np.isnan(Xrows)):
        raise ValidationError("NaN in transition covariates")
    J = B.shape[0]
    logits = np.einsum("nd,kjd->nkj", Xrows, B)
    off = ~np.eye(J, dtype=bool)
    too_big = (logits > _EXP_MAX) & off
    if np.any(too_big):
        n, k, j = np.argwhere(too_big)[0]
        raise NumericalError(
            f"intensity overflow for transition ({k + 1} -> {j + 1}): "
            f"log rate {logits[n, k, j]:.3g}"
        )
    Q = np.exp(logits)
    idx = np.arange(J)
    Q[:, idx, idx] = 0.0
    Q[:, idx, idx] = -Q.sum(axis=2)
    return Q


def ct_intensity_matrix(x, B) -> np.ndarray:
    """Single-covariate-vector version of :func:`ct_intensity_matrices`."""
    return ct_intensity_matrices(np.asarray(x)[None, :], B)[0]
