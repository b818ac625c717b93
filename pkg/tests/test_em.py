import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import (
    make_trust_bias_world,
    sample_pair_events,
    sample_point_events,
    simulate_trust_bias_sessions,
)
from ultrapair.core import PropensityParams
from ultrapair.em import (
    BatchStats,
    EMConfig,
    PairObservation,
    blend,
    estep_pair_posteriors,
    estep_point_posteriors,
    fit_regressors,
    mstep_batch_estimates,
    pair_features,
    pair_relevance_targets,
    run_em,
    sample_regression_targets,
    write_trace_csv,
)


def make_params(theta, eps_pos, eps_neg, theta_neg=None, n=None):
    theta = np.atleast_1d(np.asarray(theta, dtype=np.float64))
    n = n or len(theta)
    if theta.size == 1:
        theta = np.full(n, theta[0])
    return PropensityParams(
        theta=theta,
        theta_neg=np.asarray(theta_neg, dtype=np.float64)
        if theta_neg is not None
        else theta.copy(),
        eps_pos=np.full((n, n), eps_pos),
        eps_neg=np.full((n, n), eps_neg),
    )


def obs_at(i=1, j=2, c_i=2.0, c_j=1.0):
    rng = np.random.default_rng(0)
    return PairObservation(
        request_id="q",
        i=i,
        j=j,
        features_i=rng.uniform(size=3),
        features_j=rng.uniform(size=3),
        c_i=c_i,
        c_j=c_j,
    )


prob = st.floats(min_value=0.05, max_value=0.95)


class TestPairPosteriors:
    def test_worked_example(self):
        params = make_params(theta=[0.9, 0.5], eps_pos=0.8, eps_neg=0.2)
        post = estep_pair_posteriors(obs_at(1, 2), params, gamma=0.6, beta_i=0.7)
        assert post.p_ee_rgt == pytest.approx(0.216 / 0.567, abs=1e-9)
        assert post.p_ee_rle == pytest.approx(0.9 * 0.5 * 0.2 * 0.4 / 0.567, abs=1e-9)
        assert post.p_e_note == pytest.approx(0.9 * 0.5 * 0.7 / 0.567, abs=1e-9)

    def test_noise_free_fully_examined_limit(self):
        params = make_params(theta=[1.0, 1.0], eps_pos=1.0 - 1e-4, eps_neg=1e-4)
        post = estep_pair_posteriors(obs_at(1, 2), params, gamma=0.6, beta_i=1e-4)
        assert post.p_ee_rgt == pytest.approx(1.0, abs=1e-2)

    def test_partition_sums_to_one(self):
        params = make_params(theta=[0.9, 0.5], eps_pos=0.8, eps_neg=0.2)
        post = estep_pair_posteriors(obs_at(1, 2), params, gamma=0.6, beta_i=0.7)
        assert post.p_ee_rgt + post.p_ee_rle + post.p_e_note == pytest.approx(
            1.0, abs=1e-9
        )

    @given(prob, prob, prob, prob, prob, prob)
    @settings(max_examples=100)
    def test_partition_property(self, th_i, th_j, lo, frac, gamma, beta):
        hi = lo + (0.99 - lo) * max(frac, 0.05)
        params = make_params(theta=[th_i, th_j], eps_pos=hi, eps_neg=lo)
        post = estep_pair_posteriors(obs_at(1, 2), params, gamma, beta)
        total = post.p_ee_rgt + post.p_ee_rle + post.p_e_note
        assert total == pytest.approx(1.0, abs=1e-9)
        for value in (
            post.p_ee_rgt,
            post.p_ee_rle,
            post.p_e_note,
            post.p_ee_rgt_cle,
            post.p_ee_rle_cle,
        ):
            assert 0.0 <= value <= 1.0

    def test_monotone_in_eps_pos(self):
        lows = []
        for ep in (0.5, 0.7, 0.9):
            params = make_params(theta=[0.8, 0.6], eps_pos=ep, eps_neg=0.1)
            post = estep_pair_posteriors(obs_at(1, 2), params, gamma=0.4, beta_i=0.5)
            lows.append(post.p_ee_rgt)
        assert lows[0] < lows[1] < lows[2]

    def test_mirrored_formulas(self):
        params = make_params(theta=[0.9, 0.5], eps_pos=0.8, eps_neg=0.2)
        post = estep_pair_posteriors(obs_at(1, 2), params, gamma=0.6, beta_i=0.7)
        d = 0.567
        assert post.p_ee_rgt_cle == pytest.approx(
            0.9 * 0.5 * 0.2 * 0.6 / (1 - d), abs=1e-9
        )
        assert post.p_ee_rle_cle == pytest.approx(
            0.9 * 0.5 * 0.8 * 0.4 / (1 - d), abs=1e-9
        )
        assert post.p_e_note_cle == 0.0

    def test_pair_observation_validation(self):
        with pytest.raises(ValueError, match="c_i > c_j"):
            obs_at(c_i=1.0, c_j=1.0)
        with pytest.raises(ValueError, match="positions"):
            obs_at(i=2, j=2)

    def test_monte_carlo_oracle(self):
        # empirical conditionals from the generative model reproduce the
        # formulas; the full-size version is acceptance criterion 1
        th_i, th_j, ep, en, gamma, beta = 0.9, 0.5, 0.8, 0.2, 0.6, 0.7
        events = sample_pair_events(
            th_i, th_j, ep, en, gamma, beta, 200_000, np.random.default_rng(0)
        )
        params = make_params(theta=[th_i, th_j], eps_pos=ep, eps_neg=en)
        post = estep_pair_posteriors(obs_at(1, 2), params, gamma, beta)
        pos = events["order_pos"]
        both = events["e_i"] & events["e_j"]
        n_pos = pos.sum()
        for estimate, event in (
            (post.p_ee_rgt, both & events["rel"]),
            (post.p_ee_rle, both & ~events["rel"]),
            (post.p_e_note, events["e_i"] & ~events["e_j"] & events["rel_i"]),
        ):
            freq = (event & pos).sum() / n_pos
            sigma = np.sqrt(estimate * (1 - estimate) / n_pos)
            assert abs(freq - estimate) < 3 * sigma + 1e-12


class TestPointPosteriors:
    def test_full_examination(self):
        params = make_params(theta=[1.0], eps_pos=0.9, eps_neg=0.1)
        p_note_rpos, _ = estep_point_posteriors(1, params, beta_i=0.5)
        assert p_note_rpos == pytest.approx(0.0, abs=1e-3)

    def test_certainly_irrelevant(self):
        params = make_params(theta=[0.7], eps_pos=0.9, eps_neg=0.1)
        _, p_e_rneg = estep_point_posteriors(1, params, beta_i=0.0)
        assert p_e_rneg == pytest.approx(0.7, abs=1e-3)

    def test_half_half(self):
        params = make_params(theta=[0.5], eps_pos=0.9, eps_neg=0.1)
        p_note_rpos, p_e_rneg = estep_point_posteriors(1, params, beta_i=0.5)
        assert p_note_rpos == pytest.approx(1.0 / 3.0, abs=1e-4)
        assert p_e_rneg == pytest.approx(1.0 / 3.0, abs=1e-4)

    @given(prob, prob)
    @settings(max_examples=60)
    def test_partition_with_third_term(self, theta, beta):
        params = make_params(theta=[theta], eps_pos=0.9, eps_neg=0.1)
        p_note_rpos, p_e_rneg = estep_point_posteriors(1, params, beta)
        third = (1 - theta) * (1 - beta) / (1 - theta * beta)
        assert p_note_rpos + p_e_rneg + third == pytest.approx(1.0, abs=1e-6)

    def test_monte_carlo_oracle(self):
        theta, beta = 0.6, 0.45
        events = sample_point_events(theta, beta, 200_000, np.random.default_rng(3))
        params = make_params(theta=[theta], eps_pos=0.9, eps_neg=0.1)
        p_note_rpos, p_e_rneg = estep_point_posteriors(1, params, beta)
        zero = ~events["positive"]
        n_zero = zero.sum()
        for estimate, event in (
            (p_note_rpos, ~events["examined"] & events["relevant"]),
            (p_e_rneg, events["examined"] & ~events["relevant"]),
        ):
            freq = (event & zero).sum() / n_zero
            sigma = np.sqrt(estimate * (1 - estimate) / n_zero)
            assert abs(freq - estimate) < 3 * sigma + 1e-12


class TestMStep:
    def accumulate_points(self, stats, params, positions, positives, beta):
        for pos, positive in zip(positions, positives):
            stats.imp_count[pos - 1] += 1
            if positive:
                stats.pos_count[pos - 1] += 1
            else:
                _, p_e_rneg = estep_point_posteriors(pos, params, beta)
                stats.zero_count[pos - 1] += 1
                stats.exam_zero_sum[pos - 1] += p_e_rneg

    def test_all_positive_gives_certain_examination(self):
        params = make_params(theta=[0.4, 0.4], eps_pos=0.9, eps_neg=0.1)
        stats = BatchStats.zeros(2)
        self.accumulate_points(stats, params, [1] * 20, [True] * 20, beta=0.5)
        theta, *_ = mstep_batch_estimates(stats, params)
        assert theta[0] == 1.0
        assert theta[1] == params.theta[1]  # untouched position keeps value

    def test_empty_eps_cell_unchanged(self):
        params = make_params(theta=[0.5, 0.5], eps_pos=0.77, eps_neg=0.13)
        stats = BatchStats.zeros(2)
        _, _, eps_pos, eps_neg = mstep_batch_estimates(stats, params)
        np.testing.assert_array_equal(eps_pos, params.eps_pos)
        np.testing.assert_array_equal(eps_neg, params.eps_neg)

    def test_theta_recovery_with_known_relevance_rate(self):
        # points simulated from the generative model at known parameters;
        # the M-step estimate lands within +-0.05 over 1e4 impressions
        rng = np.random.default_rng(5)
        true_theta = np.array([0.9, 0.55, 0.3])
        beta = 0.4
        params = make_params(theta=[0.5, 0.5, 0.5], eps_pos=0.9, eps_neg=0.1)
        # E-step posteriors must use the true beta and true theta to make
        # this a pure M-step check
        true_params = make_params(theta=true_theta, eps_pos=0.9, eps_neg=0.1)
        stats = BatchStats.zeros(3)
        for pos in (1, 2, 3):
            events = sample_point_events(true_theta[pos - 1], beta, 10_000, rng)
            self.accumulate_points(
                stats,
                true_params,
                [pos] * 10_000,
                events["positive"].tolist(),
                beta,
            )
        theta, *_ = mstep_batch_estimates(stats, params)
        np.testing.assert_allclose(theta, true_theta, atol=0.05)

    def test_eps_ratio_form(self):
        params = make_params(theta=[0.8, 0.8], eps_pos=0.5, eps_neg=0.2)
        stats = BatchStats.zeros(2)
        stats.a_pos[0, 1] = 6.0
        stats.b_pos[0, 1] = 2.0
        stats.a_neg[0, 1] = 1.0
        stats.b_neg[0, 1] = 3.0
        _, _, eps_pos, eps_neg = mstep_batch_estimates(stats, params)
        assert eps_pos[0, 1] == pytest.approx(0.75)
        assert eps_neg[0, 1] == pytest.approx(0.25)
        assert eps_pos[1, 0] == params.eps_pos[1, 0]


class TestBlend:
    def test_full_step_replaces(self):
        params = make_params(theta=[0.5, 0.5], eps_pos=0.8, eps_neg=0.2)
        estimates = (
            np.array([0.7, 0.3]),
            np.array([0.6, 0.4]),
            np.full((2, 2), 0.9),
            np.full((2, 2), 0.05),
        )
        out = blend(params, estimates, alpha=1.0)
        np.testing.assert_allclose(out.theta, [0.7, 0.3])
        np.testing.assert_allclose(out.eps_pos, 0.9)
        np.testing.assert_allclose(out.eps_neg, 0.05)

    def test_convex_combination(self):
        params = make_params(theta=[0.5], eps_pos=0.5, eps_neg=0.2)
        estimates = (
            np.array([0.5]),
            np.array([0.5]),
            np.full((1, 1), 0.9),
            np.full((1, 1), 0.2),
        )
        out = blend(params, estimates, alpha=0.1)
        assert out.eps_pos[0, 0] == pytest.approx(0.54)

    def test_ordering_projection(self):
        params = make_params(theta=[0.5], eps_pos=0.6, eps_neg=0.3)
        estimates = (
            np.array([0.5]),
            np.array([0.5]),
            np.full((1, 1), 0.3),
            np.full((1, 1), 0.4),
        )
        out = blend(params, estimates, alpha=1.0)
        assert out.eps_pos[0, 0] == pytest.approx(0.3501)
        assert out.eps_neg[0, 0] == pytest.approx(0.3499)

    def test_theta_clamped(self):
        params = make_params(theta=[0.5], eps_pos=0.6, eps_neg=0.3)
        estimates = (
            np.array([1.0]),
            np.array([0.0]),
            np.full((1, 1), 0.6),
            np.full((1, 1), 0.3),
        )
        out = blend(params, estimates, alpha=1.0)
        assert out.theta[0] == pytest.approx(1.0 - 1e-4)
        assert out.theta_neg[0] == pytest.approx(1e-4)

    def test_fixed_point_unchanged(self):
        params = make_params(theta=[0.5, 0.25], eps_pos=0.8, eps_neg=0.2)
        estimates = (
            params.theta.copy(),
            params.theta_neg.copy(),
            params.eps_pos.copy(),
            params.eps_neg.copy(),
        )
        out = blend(params, estimates, alpha=1.0)
        np.testing.assert_allclose(out.theta, params.theta)
        np.testing.assert_allclose(out.eps_pos, params.eps_pos)
        np.testing.assert_allclose(out.eps_neg, params.eps_neg)


class TestRegressionTargets:
    def test_deterministic_posterior_all_ones(self):
        rng = np.random.default_rng(0)
        pair_t, point_t = sample_regression_targets(
            np.ones(500), np.ones(500), rng, bernoulli=True
        )
        assert np.all(pair_t == 1.0)
        assert np.all(point_t == 1.0)

    def test_binomial_bound_at_half(self):
        rng = np.random.default_rng(1)
        pair_t, _ = sample_regression_targets(
            np.full(10_000, 0.5), np.zeros(1), rng, bernoulli=True
        )
        assert 0.48 <= pair_t.mean() <= 0.52

    def test_soft_mode_passes_through(self):
        probs = np.array([0.2, 0.7])
        pair_t, point_t = sample_regression_targets(
            probs, probs, np.random.default_rng(0), bernoulli=False
        )
        np.testing.assert_array_equal(pair_t, probs)
        np.testing.assert_array_equal(point_t, probs)

    def test_positive_point_label_forces_relevant(self):
        # c > 0 points enter with probability exactly 1
        probs = pair_relevance_targets(
            np.array([0.6]), np.array([0.3]), np.array([0.1]), np.array([0.5])
        )
        assert probs[0] == pytest.approx(0.6 + 0.1 * 0.5)

    def test_both_examined_mode(self):
        probs = pair_relevance_targets(
            np.array([0.6]),
            np.array([0.2]),
            np.array([0.2]),
            np.array([0.5]),
            mode="both_examined",
        )
        assert probs[0] == pytest.approx(0.75)


class TestFitRegressors:
    def test_constant_labels_learned(self):
        rng = np.random.default_rng(2)
        feats_i = rng.uniform(size=(300, 3))
        feats_j = rng.uniform(size=(300, 3))
        pf = pair_features(feats_i, feats_j)
        config = EMConfig(regressor_hidden=(8,), regressor_steps=600, regressor_lr=0.3)
        regs = fit_regressors(
            pf, np.ones(300), feats_i, np.ones(300), config, rng
        )
        assert np.all(regs.gamma(pf) >= 0.9)
        assert np.all(regs.beta(feats_i) >= 0.9)

    def test_antisymmetry_on_held_out_pairs(self):
        # trained with both orientations of every pair, the preference net
        # should nearly satisfy g(i,j) + g(j,i) = 1 on fresh pairs
        rng = np.random.default_rng(3)
        w = rng.normal(size=4)
        def draw(n):
            fi = rng.uniform(size=(n, 4))
            fj = rng.uniform(size=(n, 4))
            p = 1.0 / (1.0 + np.exp(-4.0 * (fi - fj) @ w))
            t = (rng.random(n) < p).astype(float)
            return fi, fj, t
        fi, fj, t = draw(2000)
        feats = np.concatenate([pair_features(fi, fj), pair_features(fj, fi)])
        targets = np.concatenate([t, 1.0 - t])
        config = EMConfig(regressor_hidden=(16,), regressor_steps=1500, regressor_lr=0.2)
        regs = fit_regressors(feats, targets, fi, t, config, rng)
        hi, hj, _ = draw(500)
        forward = regs.gamma(pair_features(hi, hj))
        backward = regs.gamma(pair_features(hj, hi))
        mad = np.mean(np.abs(forward + backward - 1.0))
        assert mad < 0.1

    def test_deterministic(self):
        rng_a = np.random.default_rng(7)
        rng_b = np.random.default_rng(7)
        feats = np.random.default_rng(0).uniform(size=(100, 6))
        targets = (np.random.default_rng(1).random(100) < 0.5).astype(float)
        config = EMConfig(regressor_hidden=(8,), regressor_steps=100)
        a = fit_regressors(feats, targets, feats[:, :2], targets, config, rng_a)
        b = fit_regressors(feats, targets, feats[:, :2], targets, config, rng_b)
        for wa, wb in zip(a.g.weights, b.g.weights):
            np.testing.assert_array_equal(wa, wb)

    def test_empty_set_rejected(self):
        config = EMConfig()
        with pytest.raises(ValueError, match="empty"):
            fit_regressors(
                np.zeros((0, 3)), np.zeros(0), np.zeros((1, 1)), np.ones(1),
                config, np.random.default_rng(0),
            )


class TestRunEM:
    def small_world(self, sessions=60, seed=0):
        world = make_trust_bias_world(
            num_requests=20,
            num_positions=5,
            feature_dim=4,
            theta=1.0 / np.arange(1, 6),
            keep_prob=0.9,
            seed=seed,
        )
        logs = simulate_trust_bias_sessions(
            world, sessions_per_request=sessions // 20 or 1,
            rng=np.random.default_rng(seed + 1),
        )
        return world, logs

    def test_single_cycle_contract(self):
        world, logs = self.small_world()
        config = EMConfig(max_epochs=1, tolerance=0.0, batch_size=10**9,
                          regressor_steps=20, rng_seed=0)
        result = run_em(logs, world.dataset, config)
        assert len(result.trace) == 1
        assert not result.converged

    def test_loglik_nondecreasing_full_batch(self):
        world, logs = self.small_world(sessions=200, seed=2)
        config = EMConfig(
            alpha=1.0,
            batch_size=10**9,  # full batch
            max_epochs=8,
            tolerance=0.0,
            bernoulli_sampling=False,
            regressor_steps=150,
            regressor_lr=0.2,
            rng_seed=3,
        )
        result = run_em(logs, world.dataset, config)
        logliks = [row.loglik for row in result.trace]
        diffs = np.diff(logliks)
        assert np.all(diffs > -1e-6 * np.abs(np.asarray(logliks[:-1])))

    def test_convergence_flag(self):
        world, logs = self.small_world()
        config = EMConfig(alpha=0.5, max_epochs=50, tolerance=0.5, rng_seed=1,
                          regressor_steps=20)
        result = run_em(logs, world.dataset, config)
        assert result.converged
        assert result.trace[-1].max_param_delta < 0.5

    def test_empty_logs_rejected(self):
        world, _ = self.small_world()
        with pytest.raises(ValueError, match="no impression logs"):
            run_em([], world.dataset, EMConfig())

    def test_parameter_recovery_small(self):
        # light version of the full recovery run in the acceptance suite
        world = make_trust_bias_world(
            num_requests=40,
            num_positions=5,
            feature_dim=4,
            theta=1.0 / np.arange(1, 6),
            keep_prob=0.9,
            seed=11,
        )
        logs = simulate_trust_bias_sessions(world, 100, np.random.default_rng(12))
        init = PropensityParams(
            theta=np.full(5, 0.6),
            theta_neg=np.full(5, 0.6),
            eps_pos=np.full((5, 5), 0.7),
            eps_neg=np.full((5, 5), 0.3),
        )
        config = EMConfig(
            alpha=0.7,
            batch_size=1000,
            max_epochs=25,
            tolerance=5e-3,
            regressor_hidden=(16,),
            regressor_steps=120,
            regressor_lr=0.2,
            init_params=init,
            rng_seed=13,
        )
        result = run_em(logs, world.dataset, config)
        np.testing.assert_allclose(result.params.theta, world.theta, atol=0.08)
        off_diag = ~np.eye(5, dtype=bool)
        assert np.median(np.abs(result.params.eps_pos[off_diag] - 0.9)) < 0.1

    def test_trace_csv(self, tmp_path):
        world, logs = self.small_world()
        config = EMConfig(max_epochs=2, tolerance=0.0, regressor_steps=20, rng_seed=0)
        result = run_em(logs, world.dataset, config)
        path = tmp_path / "trace.csv"
        write_trace_csv(result.trace, path, 5)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,max_param_delta,loglik," + ",".join(
            f"theta_{i}" for i in range(1, 6)
        )
        assert len(lines) == 1 + len(result.trace)


class TestVectorizedMatchesScalar:
    def test_internal_arrays_agree_with_api(self):
        rng = np.random.default_rng(9)
        for _ in range(50):
            th = rng.uniform(0.1, 0.95, size=2)
            lo = rng.uniform(0.05, 0.4)
            hi = rng.uniform(lo + 0.1, 0.95)
            gamma, beta = rng.uniform(0.1, 0.9, size=2)
            params = make_params(theta=th, eps_pos=hi, eps_neg=lo)
            post = estep_pair_posteriors(obs_at(1, 2), params, gamma, beta)
            from ultrapair.em import _pair_posterior_arrays

            num_rgt, num_rle, num_note, d = _pair_posterior_arrays(
                th[0], th[1], hi, lo, gamma, beta
            )
            assert post.p_ee_rgt == pytest.approx(float(num_rgt / d), abs=1e-12)
            assert post.p_ee_rle == pytest.approx(float(num_rle / d), abs=1e-12)
            assert post.p_e_note == pytest.approx(float(num_note / d), abs=1e-12)
