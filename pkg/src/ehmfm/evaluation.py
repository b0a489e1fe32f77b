"""Recovery metrics, label alignment, model selection, loading rotation.

State labels of a fitted model are arbitrary, so every comparison with a
ground truth first finds the permutation that minimizes the decoded
misclassification count (ties broken by the mean-recovery criterion) and
applies it consistently to states and all state-indexed parameters.
Loadings are additionally identified only up to a rotation of the factor
space; an optional orthogonal Procrustes pre-alignment handles that.
"""

from __future__ import annotations

import itertools
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError
from .model import ModelDims, ModelParams, offdiag_pairs
from .semis import FitConfig, FitResult, fit, free_parameter_count


def aad(estimate, truth) -> float:
    """Mean absolute difference over all entries of equally shaped arrays."""
    estimate = np.asarray(estimate, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if estimate.shape != truth.shape:
        raise ValidationError(
            f"shape mismatch {estimate.shape} vs {truth.shape}"
        )
    return float(np.abs(estimate - truth).mean())


def apply_permutation(params: ModelParams, sigma) -> ModelParams:
    """Relabel states: estimated state j becomes state sigma[j]."""
    sigma = np.asarray(sigma)
    J = params.pi.size
    inv = np.empty(J, dtype=int)
    inv[sigma] = np.arange(J)
    B = params.B[np.ix_(inv, inv)]
    return ModelParams(
        pi=params.pi[inv], mu=params.mu[inv], lam=params.lam[inv],
        psi=params.psi, B=B,
    )


def align_states(params, decoded, truth_params, truth_states):
    """Best relabeling of estimated states against the ground truth.

    Searches all J! permutations for the one minimizing the decoded
    misclassification count; ties are broken by the smallest mean
    absolute difference of the state means under the permutation.
    Returns ``sigma`` with ``sigma[estimated] = true``.
    """
    J = params.pi.size
    if J > 8:
        raise ValidationError("exhaustive alignment supported for J <= 8 only")
    confusion = np.zeros((J, J))
    for dec, tru in zip(decoded, truth_states):
        np.add.at(confusion, (np.asarray(dec), np.asarray(tru)), 1)
    total = confusion.sum()
    best = None
    for perm in itertools.permutations(range(J)):
        sigma = np.asarray(perm)
        mis = (total - confusion[np.arange(J), sigma].sum()) / total
        mu_aad = float(np.abs(params.mu - truth_params.mu[sigma]).mean())
        key = (mis, mu_aad, perm)
        if best is None or key < best:
            best = key
    return np.asarray(best[2])


def misclassification(decoded, truth_states, sigma) -> float:
    """Share of occasions decoded into the wrong (aligned) state."""
    sigma = np.asarray(sigma)
    wrong = 0
    total = 0
    for dec, tru in zip(decoded, truth_states):
        wrong += int(np.sum(sigma[np.asarray(dec)] != np.asarray(tru)))
        total += len(dec)
    return wrong / total


def transition_bias(B_est, B_true, sigma) -> np.ndarray:
    """Aligned coefficient errors, shape (J, J, d); diagonal is zero."""
    sigma = np.asarray(sigma)
    J = B_est.shape[0]
    inv = np.empty(J, dtype=int)
    inv[sigma] = np.arange(J)
    return B_est[np.ix_(inv, inv)] - B_true


def procrustes_rotation(lam_est, lam_true) -> np.ndarray:
    """Orthogonal matrix R minimizing ||lam_est @ R - lam_true||_F."""
    U, _, Vt = np.linalg.svd(lam_est.T @ lam_true)
    return U @ Vt


@dataclass
class RecoveryReport:
    """Recovery metrics of one fit against its generating truth."""

    seed: int
    permutation: tuple
    c_mis: float
    aad_pi: float
    aad_mu: float
    aad_lambda: float
    aad_psi: float
    bias_B: np.ndarray   # (J, J, d), zero diagonal


def recovery_report(params, decoded, truth, seed=0, procrustes=True) -> RecoveryReport:
    """Align a fit to its ground truth and compute all recovery metrics.

    ``procrustes=True`` (the default) pre-rotates each state's estimated
    loadings onto the true ones before the loading comparison; loadings
    are identified by the likelihood only up to rotation, so the plain
    entrywise comparison conflates recovery error with the arbitrary
    frame of the initializer.
    """
    sigma = align_states(params, decoded, truth.params, truth.states)
    aligned = apply_permutation(params, sigma)
    lam_err = []
    for j in range(aligned.pi.size):
        est = aligned.lam[j]
        if procrustes:
            est = est @ procrustes_rotation(est, truth.params.lam[j])
        lam_err.append(np.abs(est - truth.params.lam[j]).mean())
    return RecoveryReport(
        seed=seed,
        permutation=tuple(int(s) for s in sigma),
        c_mis=misclassification(decoded, truth.states, sigma),
        aad_pi=aad(aligned.pi, truth.params.pi),
        aad_mu=aad(aligned.mu, truth.params.mu),
        aad_lambda=float(np.mean(lam_err)),
        aad_psi=aad(aligned.psi, truth.params.psi),
        bias_B=transition_bias(params.B, truth.params.B, sigma),
    )


def summarize_reports(reports):
    """Mean/SD across seeds of every recovery metric (SE as seed SD)."""
    arr = {
        name: np.asarray([getattr(r, name) for r in reports])
        for name in ("aad_pi", "aad_mu", "aad_lambda", "aad_psi", "c_mis")
    }
    out = {
        name: (float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0)
        for name, v in arr.items()
    }
    bias = np.stack([r.bias_B for r in reports])
    out["bias_B_mean"] = bias.mean(axis=0)
    out["bias_B_sd"] = bias.std(axis=0, ddof=1) if len(reports) > 1 else np.zeros_like(bias[0])
    out["n_seeds"] = len(reports)
    return out


# ---------------------------------------------------------------------------
# model selection


@dataclass
class CandidateResult:
    J: int
    K: int
    loglik: float
    q: int
    aic: float
    bic: float
    seed: int
    error: str = ""


@dataclass
class SelectionReport:
    """Grid-search outcome: per-candidate scores and the two winners."""

    candidates: list
    winner_aic: tuple
    winner_bic: tuple
    failures: list

    def table(self):
        """Complexity table rows (J, K, q, BIC), sorted by (J, K)."""
        return [
            {"J": c.J, "K": c.K, "q": c.q, "loglik": c.loglik,
             "aic": c.aic, "bic": c.bic}
            for c in sorted(self.candidates, key=lambda c: (c.J, c.K))
        ]


def _fit_candidate(args):
    dataset, config = args
    try:
        result = fit(dataset, config)
        return (config.J, config.K, config.seed, result.final_loglik,
                result.q, result.aic, result.bic, "")
    except Exception as exc:  # candidate failures are recorded, not fatal
        return (config.J, config.K, config.seed, -np.inf, 0, np.inf, np.inf,
                f"{type(exc).__name__}: {exc}")


def select_model(dataset, J_values, K_values, base_config: FitConfig,
                 seeds=1, workers=1) -> SelectionReport:
    """Fit every (J, K) candidate and pick the AIC and BIC winners.

    Each candidate is fit from ``seeds`` different initialization seeds
    (stabilization stays on) and keeps its best log likelihood.  Failed
    fits are recorded and excluded; the run continues as long as at
    least one candidate survives.
    """
    J_values = list(J_values)
    K_values = list(K_values)
    if not J_values or not K_values:
        raise ValidationError("empty candidate grid")
    jobs = []
    for J in J_values:
        for K in K_values:
            for s in range(seeds):
                cfg = replace(base_config, J=J, K=K, seed=base_config.seed + s,
                              init=None)
                jobs.append((dataset, cfg))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_fit_candidate, jobs, chunksize=1))
    else:
        rows = [_fit_candidate(j) for j in jobs]
    by_candidate = {}
    failures = []
    for J, K, seed, ll, q, aic, bic, err in rows:
        if err:
            failures.append({"J": J, "K": K, "seed": seed, "error": err})
            continue
        cur = by_candidate.get((J, K))
        if cur is None or (ll, -seed) > (cur.loglik, -cur.seed):
            by_candidate[(J, K)] = CandidateResult(
                J=J, K=K, loglik=ll, q=q, aic=aic, bic=bic, seed=seed
            )
    if not by_candidate:
        raise ValidationError("every candidate fit failed")
    candidates = sorted(by_candidate.values(), key=lambda c: (c.J, c.K))
    winner_aic = min(candidates, key=lambda c: (c.aic, c.J, c.K))
    winner_bic = min(candidates, key=lambda c: (c.bic, c.J, c.K))
    return SelectionReport(
        candidates=candidates,
        winner_aic=(winner_aic.J, winner_aic.K),
        winner_bic=(winner_bic.J, winner_bic.K),
        failures=failures,
    )


# ---------------------------------------------------------------------------
# loading rotation


def varimax(lam, normalize=True, max_sweeps=500, tol=1e-12):
    """Varimax rotation by pairwise sweeps.

    Returns ``(rotated, rotation, criterion_trace)`` with one criterion
    value per sweep; the trace is non-decreasing.
    """
    L = np.array(lam, dtype=float)
    p, K = L.shape
    comm = np.sqrt((L ** 2).sum(axis=1))
    if normalize:
        scale = np.where(comm > 0, comm, 1.0)
        L = L / scale[:, None]
    R = np.eye(K)

    def criterion(A):
        sq = A ** 2
        return float(np.sum(sq.var(axis=0)))

    trace = [criterion(L)]
    for _ in range(max_sweeps):
        for a in range(K - 1):
            for b in range(a + 1, K):
                x, y = L[:, a], L[:, b]
                u = x ** 2 - y ** 2
                v = 2.0 * x * y
                num = 2.0 * (u @ v - u.sum() * v.sum() / p)
                den = (u @ u - v @ v) - (u.sum() ** 2 - v.sum() ** 2) / p
                phi = 0.25 * np.arctan2(num, den)
                c, s = np.cos(phi), np.sin(phi)
                rot = np.array([[c, -s], [s, c]])
                L[:, [a, b]] = L[:, [a, b]] @ rot
                R[:, [a, b]] = R[:, [a, b]] @ rot
        trace.append(criterion(L))
        if trace[-1] - trace[-2] < tol * (1 + abs(trace[-1])):
            break
    if normalize:
        L = L * scale[:, None]
    return L, R, np.asarray(trace)


@dataclass
class PromaxResult:
    loadings: np.ndarray   # (p, K) standardized pattern matrix
    flagged: np.ndarray    # (p, K) bool, |loading| above the threshold
    rotation: np.ndarray   # (K, K) oblique transform applied after varimax


def promax_standardize(lam, psi, power=4, threshold=0.4) -> PromaxResult:
    """Oblique promax rotation followed by per-variable standardization.

    Varimax first, then the least-squares transform onto the
    elementwise ``|v|**power`` target (columns normalized so the implied
    factor covariance has unit diagonal), then each row is divided by
    the model standard deviation ``sqrt(diag(lam lam' + psi))``.
    Entries with absolute standardized value above ``threshold`` are
    flagged.
    """
    lam = np.asarray(lam, dtype=float)
    if np.linalg.matrix_rank(lam) < lam.shape[1]:
        raise ValidationError("loadings must have full column rank")
    V, _, _ = varimax(lam)
    signs = np.where(V.sum(axis=0) >= 0, 1.0, -1.0)
    V = V * signs
    K = V.shape[1]
    if K == 1:
        pattern = V
        rotation = np.eye(1)
    else:
        target = np.sign(V) * np.abs(V) ** power
        T, *_ = np.linalg.lstsq(V, target, rcond=None)
        d = np.sqrt(np.diag(np.linalg.inv(T.T @ T)))
        T = T * d[None, :]
        pattern = V @ T
        rotation = T
    sd = np.sqrt(np.sum(lam ** 2, axis=1) + np.asarray(psi, dtype=float))
    standardized = pattern / sd[:, None]
    return PromaxResult(
        loadings=standardized,
        flagged=np.abs(standardized) > threshold,
        rotation=rotation,
    )
