"""The full fitting loop: initialize, alternate E and M steps, decode.

Each iteration runs one E-step, the closed-form updates for the initial
distribution, means, loadings and residual variances, and one guarded
Newton / Fisher-scoring step on the transition coefficients (generalized
EM).  Convergence tracks both the absolute log-likelihood change and the
mean absolute parameter change; by default the loop stops only when both
fall below their tolerances, while ``paper_stop=True`` stops as soon as
either does.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import NumericalError, ValidationError
from .inference import _pack, ct_key_index, estep
from .initialization import InitConfig, initialize_params
from .matexp import CtTransitionCache, ExpmMethod
from .model import (
    MODE_CT,
    MODE_DT,
    MODES,
    ModelDims,
    ModelParams,
    PanelDataset,
)
from .mstep import (
    TransitionData,
    ct_transition_step,
    dt_transition_step,
    update_loadings,
    update_pi,
    update_psi,
)

_MONOTONE_SLACK = 1e-6  # observed log likelihood may not drop more than this


@dataclass(frozen=True)
class FitConfig:
    """Configuration of one fit."""

    mode: str
    J: int
    K: int
    delta1: float = 1e-4
    delta2: float = 1e-4
    max_iters: int = 100
    stabilize: bool = True
    expm_method: ExpmMethod = field(default_factory=ExpmMethod)
    seed: int = 0
    paper_stop: bool = False
    init: InitConfig | None = None
    validate_posteriors: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        if self.delta1 <= 0 or self.delta2 <= 0:
            raise ValidationError("tolerances must be positive")
        if self.max_iters < 1:
            raise ValidationError("max_iters must be >= 1")
        if self.J < 1 or self.K < 1:
            raise ValidationError("J and K must be >= 1")

    def init_config(self) -> InitConfig:
        return self.init if self.init is not None else InitConfig(seed=self.seed)


@dataclass
class FitResult:
    """Converged parameters plus the full fitting record."""

    params: ModelParams
    loglik_trace: np.ndarray
    final_loglik: float
    n_iters: int
    converged: bool
    criterion: str               # "both", "either", or "max_iters"
    states: list                 # per subject, (T_i,) int arrays, 0-based
    delta1_trace: np.ndarray
    delta2_trace: np.ndarray
    q: int
    aic: float
    bic: float
    mode: str
    seed: int


def free_parameter_count(dims: ModelDims, mode: str) -> int:
    """Number of free parameters of a (J, K) configuration.

    Counts the initial distribution (J - 1), means (J p), loadings net of
    the K(K-1)/2 rotational indeterminacy per state, the residual
    diagonal (p), and the transition coefficients (J (J - 1) d).
    """
    J, K, p, d = dims.J, dims.K, dims.p, dims.d
    return (
        (J - 1)
        + J * p
        + J * (p * K - K * (K - 1) // 2)
        + p
        + J * (J - 1) * d
    )


def decode(dataset, params, mode, method=None) -> list:
    """Pointwise posterior-mode states per subject (0-based).

    Ties go to the lowest state index.
    """
    _, posteriors, _ = estep(dataset, params, mode, method=method)
    return [np.argmax(g, axis=0) for g in posteriors.gamma]


def _mstep(dataset, params, stats, posteriors, config, cache, ct_keys):
    J = config.J
    pi = update_pi(stats)
    lamtildes = [update_loadings(stats, j) for j in range(J)]
    K = config.K
    lam = np.stack([lt[:, :K] for lt in lamtildes])
    mu = np.stack([lt[:, K] for lt in lamtildes])
    psi = update_psi(stats, lamtildes)
    B = params.B
    if J > 1:
        tdata = TransitionData.from_posteriors(posteriors, dataset, ct_keys)
        if config.mode == MODE_DT:
            B, _ = dt_transition_step(tdata, params.B, config.stabilize)
        else:
            B, _ = ct_transition_step(
                tdata, params.B, cache, config.stabilize, config.expm_method
            )
    return ModelParams(pi=pi, mu=mu, lam=lam, psi=psi, B=B)


def fit(dataset: PanelDataset, config: FitConfig) -> FitResult:
    """Run the full EM loop and return the fitted model.

    Raises
    ------
    NumericalError
        On E-step underflow, singular M-step systems, or a log-likelihood
        drop beyond the generalized-EM slack (flagged as instability),
        always with the iteration attached.
    """
    dims = ModelDims(J=config.J, K=config.K, p=dataset.p, d=dataset.d)
    params = initialize_params(
        dataset, config.J, config.K, config.mode, config.init_config()
    )
    packed = _pack(dataset)
    is_ct = config.mode == MODE_CT and config.J > 1
    ct_keys = None
    if is_ct:
        arrive = packed.t_idx >= 1
        ct_keys = ct_key_index(packed.Xrows[arrive], packed.deltas[arrive])

    def run_estep(p_):
        # one transition cache per parameter iterate, shared E/M within it
        cache = CtTransitionCache(p_.B, config.expm_method) if is_ct else None
        out = estep(
            dataset, p_, config.mode, method=config.expm_method, cache=cache,
            validate=config.validate_posteriors, packed=packed, ct_keys=ct_keys,
        )
        return out, cache

    (stats, posteriors, loglik), cache = run_estep(params)
    trace = [loglik]
    d1_trace, d2_trace = [], []
    converged = False
    criterion = "max_iters"
    n_iters = 0
    for it in range(config.max_iters):
        try:
            new_params = _mstep(dataset, params, stats, posteriors, config,
                                cache, ct_keys)
            (stats, posteriors, new_loglik), cache = run_estep(new_params)
        except NumericalError as exc:
            raise NumericalError(f"iteration {it + 1}: {exc}") from exc
        n_iters = it + 1
        delta1 = abs(new_loglik - loglik)
        delta2 = float(np.mean(np.abs(new_params.flat() - params.flat())))
        d1_trace.append(delta1)
        d2_trace.append(delta2)
        if new_loglik < loglik - _MONOTONE_SLACK:
            raise NumericalError(
                f"iteration {it + 1}: log likelihood decreased by "
                f"{loglik - new_loglik:.3g} (instability)"
            )
        params, loglik = new_params, new_loglik
        trace.append(loglik)
        hit1, hit2 = delta1 <= config.delta1, delta2 <= config.delta2
        if config.paper_stop:
            if hit1 or hit2:
                converged, criterion = True, "either"
                break
        elif hit1 and hit2:
            converged, criterion = True, "both"
            break
    states = [np.argmax(g, axis=0) for g in posteriors.gamma]
    q = free_parameter_count(dims, config.mode)
    n = dataset.total_obs
    return FitResult(
        params=params,
        loglik_trace=np.asarray(trace),
        final_loglik=loglik,
        n_iters=n_iters,
        converged=converged,
        criterion=criterion if converged else "max_iters",
        states=states,
        delta1_trace=np.asarray(d1_trace),
        delta2_trace=np.asarray(d2_trace),
        q=q,
        aic=-2.0 * loglik + 2.0 * q,
        bic=-2.0 * loglik + q * np.log(n),
        mode=config.mode,
        seed=config.seed,
    )
