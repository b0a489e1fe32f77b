import numpy as np
import pytest

from conftest import random_params
from ehmfm.errors import ValidationError
from ehmfm.evaluation import (
    aad,
    align_states,
    apply_permutation,
    misclassification,
    promax_standardize,
    recovery_report,
    select_model,
    transition_bias,
    varimax,
)
from ehmfm.semis import FitConfig
from ehmfm.simgen import GroundTruth, SimScenario, generate, true_params


class TestAad:
    def test_identical_inputs(self):
        x = np.arange(6.0).reshape(2, 3)
        assert aad(x, x) == 0.0

    def test_arithmetic(self):
        assert aad(np.array([1.0, 2.0]), np.array([1.5, 2.5])) == pytest.approx(0.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            aad(np.zeros(2), np.zeros(3))


def _fake_truth(params, states):
    return GroundTruth(params=params, states=states, scores=[],
                       scenario="test", seed=0)


class TestAlignment:
    def test_swapped_labels_recovered(self, rng):
        params = random_params(rng, J=2, K=1, p=3, d=2)
        truth_states = [np.array([0, 0, 1]), np.array([1, 0, 0])]
        decoded = [np.array([1, 1, 0]), np.array([0, 1, 1])]   # labels flipped
        swapped = apply_permutation(params, np.array([1, 0]))
        sigma = align_states(swapped, decoded, params, truth_states)
        assert sigma.tolist() == [1, 0]
        assert misclassification(decoded, truth_states, sigma) == 0.0

    def test_identity_for_matching_estimate(self, rng):
        params = random_params(rng, J=3, K=1, p=3, d=2)
        states = [np.array([0, 1, 2, 1])]
        sigma = align_states(params, states, params, states)
        assert sigma.tolist() == [0, 1, 2]

    def test_known_permutation_round_trip(self, rng):
        params = random_params(rng, J=3, K=2, p=4, d=2)
        states = [rng.integers(0, 3, size=8) for _ in range(4)]
        truth = _fake_truth(params, states)
        perm = np.array([2, 0, 1])
        permuted = apply_permutation(params, perm)
        permuted_states = [perm[s] for s in states]
        # the permuted copy decodes its own states; alignment must undo perm
        report = recovery_report(permuted, permuted_states, truth)
        assert report.c_mis == 0.0
        assert report.aad_pi == pytest.approx(0.0, abs=1e-15)
        assert report.aad_mu == pytest.approx(0.0, abs=1e-15)
        assert report.aad_lambda == pytest.approx(0.0, abs=1e-12)
        assert report.aad_psi == pytest.approx(0.0, abs=1e-15)
        assert np.allclose(report.bias_B, 0.0, atol=1e-15)

    def test_aad_permutation_sensitivity(self, rng):
        params = random_params(rng, J=3, K=1, p=4, d=2)
        perm = np.array([1, 2, 0])
        permuted = apply_permutation(params, perm)
        # without alignment the means disagree; undoing the permutation fixes it
        assert aad(permuted.mu, params.mu) > 0.01
        inv = np.empty_like(perm)
        inv[perm] = np.arange(3)
        back = apply_permutation(permuted, inv)
        assert aad(back.mu, params.mu) == 0.0


class TestMisclassification:
    def test_perfect_decode(self):
        states = [np.array([0, 1, 1])]
        assert misclassification(states, states, np.array([0, 1])) == 0.0

    def test_two_state_alignment_bound(self, rng):
        # after alignment a two-state decode can never be more than half wrong
        truth_states = [rng.integers(0, 2, size=50)]
        decoded = [1 - truth_states[0]]   # all wrong before alignment
        params = random_params(rng, J=2, K=1, p=2, d=1)
        sigma = align_states(params, decoded, params, truth_states)
        assert misclassification(decoded, truth_states, sigma) <= 0.5


class TestTransitionBias:
    def test_exact_estimate_zero_bias(self, rng):
        params = random_params(rng, J=3, K=1, p=3, d=2)
        bias = transition_bias(params.B, params.B, np.array([0, 1, 2]))
        assert np.allclose(bias, 0.0)

    def test_permuted_blocks_compared_correctly(self, rng):
        params = random_params(rng, J=3, K=1, p=3, d=2)
        perm = np.array([1, 2, 0])
        permuted = apply_permutation(params, perm)
        # state a of the permuted copy is state perm^-1(a) of the original
        sigma = np.empty_like(perm)
        sigma[perm] = np.arange(3)
        bias = transition_bias(permuted.B, params.B, sigma)
        assert np.allclose(bias, 0.0, atol=1e-15)


class TestSelectModel:
    def test_single_candidate_wins(self):
        dataset, _ = generate(
            SimScenario(name="dt-small", mode="dt", n_subjects=25, dt_length=6),
            seed=0,
        )
        base = FitConfig(mode="dt", J=2, K=2, seed=0, max_iters=10)
        report = select_model(dataset, [2], [2], base)
        assert report.winner_aic == (2, 2)
        assert report.winner_bic == (2, 2)
        assert len(report.candidates) == 1
        assert report.candidates[0].q > 0

    def test_candidate_order_irrelevant(self):
        dataset, _ = generate(
            SimScenario(name="dt-small", mode="dt", n_subjects=25, dt_length=6),
            seed=1,
        )
        base = FitConfig(mode="dt", J=2, K=1, seed=0, max_iters=8)
        r1 = select_model(dataset, [1, 2], [1, 2], base)
        r2 = select_model(dataset, [2, 1], [2, 1], base)
        assert r1.winner_bic == r2.winner_bic
        t1 = {(c.J, c.K): c.bic for c in r1.candidates}
        t2 = {(c.J, c.K): c.bic for c in r2.candidates}
        assert t1 == t2

    def test_failed_candidates_recorded_and_skipped(self):
        dataset, _ = generate(
            SimScenario(name="dt-small", mode="dt", n_subjects=8, dt_length=2),
            seed=2,
        )
        # 16 observations cannot support 22 factors (covariance rank < p)
        base = FitConfig(mode="dt", J=1, K=1, seed=0, max_iters=5)
        report = select_model(dataset, [1], [1, 22], base)
        assert report.winner_bic == (1, 1)
        assert any(f["K"] == 22 for f in report.failures)


class TestVarimax:
    def test_criterion_non_decreasing(self, rng):
        lam = rng.normal(size=(10, 3))
        _, _, trace = varimax(lam)
        assert np.all(np.diff(trace) >= -1e-12)

    def test_rotation_is_orthogonal(self, rng):
        lam = rng.normal(size=(8, 3))
        rotated, R, _ = varimax(lam)
        assert np.allclose(R.T @ R, np.eye(3), atol=1e-10)
        assert np.allclose(lam @ R, rotated, atol=1e-10)

    def test_recovers_sparse_pattern(self, rng):
        # rotate a perfectly sparse loading matrix; varimax should undo it
        lam = np.zeros((9, 3))
        lam[:3, 0] = 1.0
        lam[3:6, 1] = 0.8
        lam[6:, 2] = 0.9
        theta = 0.4
        R = np.array([
            [np.cos(theta), -np.sin(theta), 0],
            [np.sin(theta), np.cos(theta), 0],
            [0, 0, 1.0],
        ])
        rotated, _, _ = varimax(lam @ R)
        # compare column spaces entry-wise after sign/permutation matching
        M = np.abs(rotated.T @ lam)
        order = np.argmax(M, axis=1)
        assert sorted(order.tolist()) == [0, 1, 2]
        aligned = rotated[:, np.argsort(order)]
        sign = np.sign(np.sum(aligned * lam, axis=0))
        assert np.allclose(aligned * sign, lam, atol=1e-6)


class TestPromaxStandardize:
    def test_single_factor_sign_convention(self, rng):
        lam = -np.abs(rng.normal(size=(6, 1)))   # negative column
        psi = np.ones(6)
        res = promax_standardize(lam, psi)
        assert res.loadings.sum() >= 0.0
        want = np.abs(lam[:, 0]) / np.sqrt(lam[:, 0] ** 2 + 1.0)
        assert np.allclose(np.abs(res.loadings[:, 0]), want, atol=1e-12)

    def test_standardized_rows_bounded_for_orthonormal_loadings(self):
        lam = np.zeros((6, 2))
        lam[:3, 0] = 1.0 / np.sqrt(3)
        lam[3:, 1] = 1.0 / np.sqrt(3)
        psi = np.full(6, 1e-6)
        res = promax_standardize(lam, psi)
        norms = np.linalg.norm(res.loadings, axis=1)
        assert np.all(norms <= 1.0 + 1e-6)

    def test_block_pattern_flagged(self):
        params = true_params("baseline", "dt")
        res = promax_standardize(params.lam[0], params.psi)
        # rows 3..23 load on exactly one factor in truth; rotation should
        # leave their off-pattern entries small
        for block, col_count in ((slice(2, 7), 1), (slice(7, 15), 1),
                                 (slice(15, 23), 1)):
            flags = res.flagged[block]
            assert np.all(flags.sum(axis=1) == col_count)

    def test_rank_deficient_rejected(self):
        lam = np.ones((4, 2))
        with pytest.raises(ValidationError):
            promax_standardize(lam, np.ones(4))
