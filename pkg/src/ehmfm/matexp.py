"""Matrix exponentials of scaled intensity matrices and their derivatives.

The continuous-time transition matrix over a gap ``delta`` is
``P(delta) = exp(delta * Q)``.  Two evaluation methods are provided:
Pade scaling-and-squaring (the default, accurate to near machine
precision) and the uniform-power approximation ``(I + A/a)^a`` with
``a`` a power of two so the power costs log2(a) squarings.

Directional (Frechet) derivatives come from the block trick: for
``H = [[A, Adot], [0, A]]`` the top-right block of ``exp(H)`` equals the
derivative of ``exp(A)`` in direction ``Adot``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericalError, ValidationError
from .model import ct_intensity_matrices, offdiag_pairs

PADE = "pade-scaling-squaring"
UNIFORM_POWER = "uniform-power"

# degree-13 Pade coefficients and its validity radius (1-norm)
_PADE13_B = np.array([
    64764752532480000.0, 32382376266240000.0, 7771770303897600.0,
    1187353796428800.0, 129060195264000.0, 10559470521600.0,
    670442572800.0, 33522128640.0, 1323241920.0, 40840800.0,
    960960.0, 16380.0, 182.0, 1.0,
])
_PADE13_THETA = 5.371920351148152


def _expm_pade_batch(A):
    """Scaling-and-squaring with the degree-13 Pade approximant.

    Vectorized over a stack (..., n, n): all matrices share the Pade
    evaluation; each is scaled and re-squared by its own exponent.
    """
    A = np.asarray(A, dtype=float)
    batch = A.reshape((-1,) + A.shape[-2:]).copy()
    m, n, _ = batch.shape
    norms = np.abs(batch).sum(axis=-2).max(axis=-1)          # 1-norm per matrix
    if not np.all(np.isfinite(norms)):
        raise NumericalError("non-finite entries in expm input")
    s = np.zeros(m, dtype=int)
    big = norms > _PADE13_THETA
    s[big] = np.ceil(np.log2(norms[big] / _PADE13_THETA)).astype(int)
    batch /= (2.0 ** s)[:, None, None]

    eye = np.broadcast_to(np.eye(n), batch.shape)
    b = _PADE13_B
    A2 = batch @ batch
    A4 = A2 @ A2
    A6 = A2 @ A4
    U = batch @ (
        A6 @ (b[13] * A6 + b[11] * A4 + b[9] * A2)
        + b[7] * A6 + b[5] * A4 + b[3] * A2 + b[1] * eye
    )
    V = (
        A6 @ (b[12] * A6 + b[10] * A4 + b[8] * A2)
        + b[6] * A6 + b[4] * A4 + b[2] * A2 + b[0] * eye
    )
    R = np.linalg.solve(V - U, V + U)
    for _ in range(int(s.max(initial=0))):
        todo = s > 0
        if not np.any(todo):
            break
        R[todo] = R[todo] @ R[todo]
        s = s - todo
    return R.reshape(A.shape)


@dataclass(frozen=True)
class ExpmMethod:
    """Evaluation method for the matrix exponential.

    ``a`` only matters for the uniform-power variant and must be a power
    of two (the power is computed by repeated squaring).
    """

    variant: str = PADE
    a: int = 1024

    def __post_init__(self):
        if self.variant not in (PADE, UNIFORM_POWER):
            raise ValidationError(f"unknown expm variant {self.variant!r}")
        if self.a < 1 or (self.a & (self.a - 1)) != 0:
            raise ValidationError("uniform-power exponent a must be a power of two")


def _uniform_power(A, a):
    J = A.shape[-1]
    base = np.eye(J) + A / a
    diag = base[..., np.arange(J), np.arange(J)]
    if np.any(diag < 0):
        raise NumericalError(
            f"uniform-power a={a} too small: I + A/a has a negative diagonal entry"
        )
    P = base
    n_squarings = int(np.log2(a))
    for _ in range(n_squarings):
        P = P @ P
    return P


def expm(A, method: ExpmMethod | None = None) -> np.ndarray:
    """Matrix exponential, optionally over a stack of matrices.

    Accepts shape (..., J, J); the leading axes are batched.
    """
    A = np.asarray(A, dtype=float)
    method = method or ExpmMethod()
    if method.variant == PADE:
        return _expm_pade_batch(A)
    return _uniform_power(A, method.a)


def expm_frechet(A, Adot, method: ExpmMethod | None = None) -> np.ndarray:
    """Derivative of exp(A) in direction Adot via the block construction.

    Builds ``H = [[A, Adot], [0, A]]`` (size 2J) and returns the
    top-right J-by-J block of ``exp(H)``.  Batched like :func:`expm`.
    """
    A = np.asarray(A, dtype=float)
    Adot = np.asarray(Adot, dtype=float)
    if A.shape != Adot.shape:
        raise ValidationError("A and Adot must have identical shapes")
    J = A.shape[-1]
    H = np.zeros(A.shape[:-2] + (2 * J, 2 * J))
    H[..., :J, :J] = A
    H[..., :J, J:] = Adot
    H[..., J:, J:] = A
    return expm(H, method)[..., :J, J:]


class CtTransitionCache:
    """Per-iteration cache of ``P(delta) = exp(delta Q(x))`` and derivatives.

    Entries are keyed on the exact bit patterns of ``(x, delta)`` -- no
    tolerance-based matching -- and are valid only for the transition
    coefficients the cache was built with.  Call :meth:`invalidate`
    (or build a fresh cache) whenever those coefficients change.  The
    cache is filled once and then read-only, so it is safe to share
    across concurrent per-subject evaluations.

    Derivative stacks follow the flattened coefficient layout of
    :func:`ehmfm.model.offdiag_pairs`: entry ``u = pair_index * d + c``
    is the derivative of ``P`` with respect to coefficient ``c`` of the
    block for that (k, j) pair.
    """

    def __init__(self, B, method: ExpmMethod | None = None):
        self.B = np.array(B, dtype=float)
        self.method = method or ExpmMethod()
        self._P = {}
        self._base = {}   # key -> (npairs, J, J) derivative stack, x-free part
        self.n_computed = 0
        self.n_hits = 0

    @staticmethod
    def key(x, delta):
        return (np.asarray(x, dtype=float).tobytes(), float(delta))

    def invalidate(self):
        """Drop all entries (coefficients changed); counters persist."""
        self._P.clear()
        self._base.clear()

    def precompute(self, Xrows, deltas, derivatives=False):
        """Batch-fill the cache for distinct (x, delta) rows.

        Parameters
        ----------
        Xrows : ndarray, shape (m, d)
        deltas : ndarray, shape (m,)
        derivatives : bool
            Also compute the coefficient-derivative stacks.

        Returns
        -------
        P : ndarray, shape (m, J, J)
        base : ndarray, shape (m, npairs, J, J) or None
            Derivatives of P with respect to the intercept-free direction
            of each off-diagonal block; multiply by the covariate value to
            get the derivative for a specific coefficient.
        """
        Xrows = np.atleast_2d(np.asarray(Xrows, dtype=float))
        deltas = np.asarray(deltas, dtype=float)
        J = self.B.shape[0]
        pairs = offdiag_pairs(J)
        keys = [self.key(x, dlt) for x, dlt in zip(Xrows, deltas)]
        missing = {}
        for i, k in enumerate(keys):
            if k not in missing and (
                k not in self._P or (derivatives and k not in self._base)
            ):
                missing[k] = i
        todo = list(missing.values())
        self.n_hits += len(keys) - len(todo)
        if todo:
            self.n_computed += len(todo)
            Xs = Xrows[todo]
            ds = deltas[todo]
            Q = ct_intensity_matrices(Xs, self.B)
            A = ds[:, None, None] * Q
            P = np.clip(expm(A, self.method), 0.0, 1.0)
            for i, t in enumerate(todo):
                self._P[keys[t]] = P[i]
            if derivatives:
                # One Frechet direction per off-diagonal block: the rate
                # q_kj (folded in) times (E_kj - E_kk), scaled by delta.
                m = len(todo)
                dirs = np.zeros((m, len(pairs), J, J))
                for b, (k, j) in enumerate(pairs):
                    dirs[:, b, k, j] = ds * Q[:, k, j]
                    dirs[:, b, k, k] = -ds * Q[:, k, j]
                Arep = np.broadcast_to(A[:, None], dirs.shape)
                base = expm_frechet(
                    Arep.reshape(-1, J, J), dirs.reshape(-1, J, J), self.method
                ).reshape(m, len(pairs), J, J)
                for i, t in enumerate(todo):
                    self._base[keys[t]] = base[i]
        P_out = np.stack([self._P[k] for k in keys])
        base_out = np.stack([self._base[k] for k in keys]) if derivatives else None
        return P_out, base_out

    def get_or_compute(self, x, delta, derivatives=False):
        """Single-key lookup; computes and stores the entry on a miss.

        Returns ``(P, dP)`` where ``dP`` is the full (npairs * d, J, J)
        coefficient-derivative stack, or None when not requested.
        """
        x = np.asarray(x, dtype=float)
        P, base = self.precompute(x[None, :], np.asarray([delta]),
                                  derivatives=derivatives)
        if not derivatives:
            return P[0], None
        # dP/dB[k,j,c] = x[c] * base[pair(k,j)]
        dP = (base[0][:, None, :, :] * x[None, :, None, None])
        return P[0], dP.reshape(-1, *P[0].shape)
