"""Synthetic panel generator with a fixed library of ground truths.

The baseline truth is a three-state, three-factor model on 23 features
with three transition covariates (intercept, a fair binary indicator,
and a uniform[0, 1] draw), both static per subject.  Named variants
change one ingredient at a time: the residual scale, the separation of
means or loadings, the transition frequency, or the state/factor counts.
Sample-size and panel-length ladders reuse the baseline truth.

Randomness uses the counter-based Philox generator with one independent
stream per subject (spawn key = subject index), so per-subject draws do
not depend on generation order or on the total number of subjects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .matexp import ExpmMethod, expm
from .model import (
    MODE_CT,
    MODE_DT,
    MODES,
    ModelParams,
    PanelDataset,
    SubjectRecord,
    ct_intensity_matrix,
    dt_transition_matrix,
)

P_FEATURES = 23
D_COVARIATES = 3


def _blocks(values, counts):
    return np.repeat(np.asarray(values, dtype=float), counts)


def _baseline_mu():
    base = _blocks([15, 10, 5, 0], [2, 3, 6, 12])
    return np.stack([base, base + 2.0, base + 4.0])


def _mu_variant(kind):
    if kind == "medium":
        rows = [
            _blocks([15, 10, 5, 0], [2, 3, 6, 12]),
            _blocks([17, 12, 7, 0], [2, 3, 6, 12]),
            _blocks([19, 14, 9, 0], [2, 3, 6, 12]),
        ]
    else:  # minor
        rows = [
            _blocks([15, 10, 5, 0], [2, 3, 6, 12]),
            _blocks([15.75, 10.75, 5, 0], [2, 3, 6, 12]),
            _blocks([16.5, 11.5, 5, 0], [2, 3, 6, 12]),
        ]
    return np.stack(rows)


def _lam_from_rows(specs):
    """specs: list of (row_count, loading_row) pairs."""
    out = []
    for count, row in specs:
        out.append(np.tile(np.asarray(row, dtype=float), (count, 1)))
    lam = np.concatenate(out, axis=0)
    assert lam.shape[0] == P_FEATURES
    return lam


def _baseline_lam():
    lam1 = _lam_from_rows([
        (2, [1, 1, 1]), (5, [0.7, 0, 0]), (8, [0, 0.7, 0]), (8, [0, 0, 0.7]),
    ])
    lam2 = _lam_from_rows([
        (2, [0, 0.7, 0]), (2, [1, 1, 1]), (3, [0, 0.7, 0]),
        (8, [0.7, 0, 0]), (8, [0, 0, 0.7]),
    ])
    lam3 = _lam_from_rows([
        (4, [0, 0, 0.7]), (2, [1, 1, 1]), (1, [0, 0, 0.7]),
        (8, [0, 0.7, 0]), (8, [0.7, 0, 0]),
    ])
    return np.stack([lam1, lam2, lam3])


def _lam_variant(level):
    c = 0.3 if level == "medium" else 0.05
    lam1 = _lam_from_rows([
        (1, [c, c, c]), (6, [0.7, 0, 0]), (8, [0, 0.7, 0]), (8, [0, 0, 0.7]),
    ])
    lam2 = _lam_from_rows([
        (3, [0.7, 0, 0]), (1, [c, c, c]), (3, [0.7, 0, 0]),
        (8, [0, 0.7, 0]), (8, [0, 0, 0.7]),
    ])
    lam3 = _lam_from_rows([
        (5, [0.7, 0, 0]), (1, [c, c, c]), (1, [0.7, 0, 0]),
        (8, [0, 0.7, 0]), (8, [0, 0, 0.7]),
    ])
    return np.stack([lam1, lam2, lam3])


def _fill_B(J, entries):
    B = np.zeros((J, J, D_COVARIATES))
    for (k, j), row in entries.items():
        B[k - 1, j - 1] = row
    return B


def _baseline_B(mode):
    if mode == MODE_DT:
        return _fill_B(3, {
            (1, 2): [-2.95, -1.0, 0.5], (1, 3): [-2.95, -0.5, 0.5],
            (2, 1): [-2.95, -0.5, 0.5], (2, 3): [-2.95, -0.5, 0.5],
            (3, 1): [-2.95, -0.5, 0.5], (3, 2): [-2.95, 1.0, 0.5],
        })
    return _fill_B(3, {
        (1, 2): [-2.5, 1.0, -1.0], (1, 3): [-2.5, 1.0, -1.0],
        (2, 1): [-3.0, 1.0, -1.0], (2, 3): [-2.5, 1.0, -1.0],
        (3, 1): [-3.0, 1.0, -1.0], (3, 2): [-3.0, 1.0, -1.0],
    })


def _frequent_B(mode):
    if mode == MODE_DT:
        return _fill_B(3, {
            (1, 2): [-1.5, -2.0, 0.75], (1, 3): [-1.5, 0.75, 0.5],
            (2, 1): [-1.5, 0.75, 1.25], (2, 3): [-1.5, -1.5, 0.75],
            (3, 1): [-1.5, 0.75, 0.75], (3, 2): [-1.5, -2.0, 0.75],
        })
    return _fill_B(3, {
        (1, 2): [0.5, 1.0, -0.5], (1, 3): [0.5, 1.0, -0.5],
        (2, 1): [-1.0, 0.5, 1.0], (2, 3): [-0.25, 1.0, -0.5],
        (3, 1): [0.5, 0.5, 1.0], (3, 2): [-0.5, 0.5, 1.0],
    })


def _uniform_B(J, mode):
    B = np.zeros((J, J, D_COVARIATES))
    row = [-2.95, -0.5, 0.5] if mode == MODE_DT else [-3.0, 1.0, -1.0]
    off = ~np.eye(J, dtype=bool)
    B[off] = row
    return B


VARIANTS = (
    "baseline", "psi-0.5", "psi-0.1",
    "mu-medium", "mu-minor", "lambda-medium", "lambda-minor",
    "freq-transit", "j2", "j4", "k2", "k5",
)


def true_params(variant, mode) -> ModelParams:
    """Ground-truth parameters of a named variant.

    The baseline follows the fixed three-state truth; the residual
    diagonal is the identity except for the ``psi-*`` variants.
    """
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}")
    if variant not in VARIANTS:
        raise ValidationError(f"unknown variant {variant!r}")
    mu = _baseline_mu()
    lam = _baseline_lam()
    psi = np.ones(P_FEATURES)
    B = _baseline_B(mode)
    J = 3
    if variant.startswith("psi-"):
        psi = float(variant.split("-")[1]) * np.ones(P_FEATURES)
    elif variant == "mu-medium":
        mu = _mu_variant("medium")
    elif variant == "mu-minor":
        mu = _mu_variant("minor")
    elif variant == "lambda-medium":
        lam = _lam_variant("medium")
    elif variant == "lambda-minor":
        lam = _lam_variant("minor")
    elif variant == "freq-transit":
        B = _frequent_B(mode)
    elif variant == "j2":
        J = 2
        mu, lam = mu[:2], lam[:2]
        B = np.zeros((2, 2, D_COVARIATES))
        B[0, 1] = _baseline_B(mode)[0, 1]
        B[1, 0] = _baseline_B(mode)[1, 0]
    elif variant == "j4":
        J = 4
        mu = np.concatenate([mu, (mu[0] + 6.0)[None]], axis=0)
        lam = np.concatenate([lam, np.roll(lam[0], 8, axis=0)[None]], axis=0)
        B = _uniform_B(4, mode)
    elif variant == "k2":
        lam = lam[:, :, :2]
    elif variant == "k5":
        extra = np.zeros((3, P_FEATURES, 2))
        extra[:, 7:11, 0] = 0.7
        extra[:, 19:23, 1] = 0.7
        lam = np.concatenate([lam, extra], axis=2)
    pi = np.full(J, 1.0 / J)
    return ModelParams(pi=pi, mu=mu, lam=lam, psi=psi, B=B)


@dataclass(frozen=True)
class SimScenario:
    """One named data-generating setup."""

    name: str
    mode: str
    n_subjects: int = 200
    variant: str = "baseline"
    dt_length: int = 10            # panel length in dt mode
    ct_t_range: tuple = (50, 100)  # inclusive panel-length range in ct mode

    @property
    def horizon(self) -> int:
        """Largest occasion index a ct time grid may use."""
        return max(100, self.ct_t_range[1])


@dataclass
class GroundTruth:
    """What the generator knows: parameters, state paths, factor scores."""

    params: ModelParams
    states: list     # per subject, (T_i,) int arrays, 0-based
    scores: list     # per subject, (K, T_i) latent factor scores
    scenario: str
    seed: int


def _named(mode, name, **kw):
    return SimScenario(name=f"{mode}-{name}", mode=mode, **kw)


def scenario_grid(appendix_variants=False):
    """Built-in scenarios: the two baselines, plus the sensitivity grid."""
    out = [
        SimScenario(name="dt-baseline", mode=MODE_DT),
        SimScenario(name="ct-baseline", mode=MODE_CT),
    ]
    if not appendix_variants:
        return out
    for mode in MODES:
        for v in VARIANTS:
            if v == "baseline":
                continue
            out.append(_named(mode, v, variant=v))
    for n in (50, 100, 300, 700):
        out.append(_named(MODE_DT, f"n{n}", n_subjects=n))
    for t in (3, 5, 20, 200):
        out.append(_named(MODE_DT, f"t{t}", dt_length=t))
    for n in (50, 100, 500):
        out.append(_named(MODE_CT, f"n{n}", n_subjects=n))
    for lo, hi in ((10, 30), (30, 50), (100, 150)):
        out.append(_named(MODE_CT, f"t{lo}-{hi}", ct_t_range=(lo, hi)))
    return out


def get_scenario(name) -> SimScenario:
    for sc in scenario_grid(appendix_variants=True):
        if sc.name == name:
            return sc
    raise ValidationError(f"unknown scenario {name!r}")


def _subject_rng(seed, i):
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(i,))))


def _sample_state(rng, probs):
    probs = np.maximum(probs, 0.0)
    return int(rng.choice(probs.size, p=probs / probs.sum()))


def generate(scenario: SimScenario, seed: int):
    """Draw one panel from a scenario.

    Returns ``(PanelDataset, GroundTruth)``; identical seeds give
    identical output regardless of evaluation order.
    """
    params = true_params(scenario.variant, scenario.mode)
    J, p, K = params.lam.shape
    sqrt_psi = np.sqrt(params.psi)
    subjects, states_list, scores_list = [], [], []
    for i in range(scenario.n_subjects):
        rng = _subject_rng(seed, i)
        x = np.array([1.0, float(rng.integers(0, 2)), float(rng.uniform())])
        if scenario.mode == MODE_DT:
            times = np.arange(1, scenario.dt_length + 1)
        else:
            lo, hi = scenario.ct_t_range
            T_i = int(rng.integers(lo, hi + 1))
            times = np.sort(
                rng.choice(np.arange(1, scenario.horizon + 1), size=T_i, replace=False)
            )
        T_i = times.size
        w = np.empty(T_i, dtype=int)
        w[0] = _sample_state(rng, params.pi)
        if J > 1:
            if scenario.mode == MODE_DT:
                P = dt_transition_matrix(x, params.B)
                for t in range(1, T_i):
                    w[t] = _sample_state(rng, P[w[t - 1]])
            else:
                Q = ct_intensity_matrix(x, params.B)
                by_gap = {}
                gaps = np.diff(times)
                for t in range(1, T_i):
                    g = int(gaps[t - 1])
                    if g not in by_gap:
                        by_gap[g] = np.clip(expm(g * Q), 0.0, 1.0)
                    w[t] = _sample_state(rng, by_gap[g][w[t - 1]])
        z = rng.standard_normal((K, T_i))
        noise = rng.standard_normal((p, T_i)) * sqrt_psi[:, None]
        Y = params.mu[w].T + np.einsum("tpk,kt->pt", params.lam[w], z) + noise
        X = np.tile(x[:, None], (1, T_i))
        subjects.append(SubjectRecord(id=f"s{i:04d}", times=times, Y=Y, X=X))
        states_list.append(w)
        scores_list.append(z)
    dataset = PanelDataset(subjects=tuple(subjects), p=p, d=D_COVARIATES)
    truth = GroundTruth(params=params, states=states_list, scores=scores_list,
                        scenario=scenario.name, seed=seed)
    return dataset, truth
