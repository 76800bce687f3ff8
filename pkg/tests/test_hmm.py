import numpy as np
import pytest

from tokadapt.errors import InitError, NoPathError
from tokadapt.hmm import (
    GranularityConfig,
    TokenHmm,
    TokenHmmSet,
    baum_welch_update,
    force_align,
    forward_log_likelihood,
    gaussian_loglik,
    init_flat_start,
    load_model_set,
    make_log_trans,
    save_model_set,
    token_loop_decode,
    viterbi_decode,
)

import oracles


def random_hmm(rng, m, dim, token_id=0):
    means = rng.normal(size=(m, dim))
    variances = rng.uniform(0.5, 2.0, size=(m, dim))
    p_self = rng.uniform(0.2, 0.8, size=m)
    return TokenHmm(
        token_id, means, variances, make_log_trans(np.log(p_self), np.log1p(-p_self))
    )


def sample_from_hmm(rng, h):
    """Generate one segment by walking the model until it exits."""
    frames = []
    s = 0
    p_self = np.exp(h.log_self)
    while True:
        frames.append(rng.normal(h.means[s], np.sqrt(h.variances[s])))
        if rng.random() < p_self[s]:
            continue
        s += 1
        if s == h.n_states:
            return np.array(frames)


class TestGaussianLoglik:
    def test_matches_scipy(self):
        rng = np.random.default_rng(0)
        frames = rng.normal(size=(6, 4))
        means = rng.normal(size=(3, 4))
        variances = rng.uniform(0.3, 2.0, size=(3, 4))
        ours = gaussian_loglik(frames, means, variances)
        ref = oracles.emission_table(frames, means, variances)
        np.testing.assert_allclose(ours, ref, atol=1e-10)


class TestFlatStart:
    def test_identical_frames_each_state(self):
        frame = np.array([1.0, -2.0, 0.5])
        seg = np.tile(frame, (3, 1))
        h = init_flat_start([seg], m=3, floor=1e-3)
        for s in range(3):
            np.testing.assert_allclose(h.means[s], frame)
            np.testing.assert_allclose(h.variances[s], 1e-3)

    def test_single_state_pools_everything(self):
        rng = np.random.default_rng(1)
        segs = [rng.normal(size=(5, 2)), rng.normal(size=(7, 2))]
        h = init_flat_start(segs, m=1, floor=1e-6)
        pooled = np.concatenate(segs)
        np.testing.assert_allclose(h.means[0], pooled.mean(axis=0))
        np.testing.assert_allclose(h.variances[0], pooled.var(axis=0))

    def test_well_separated_populations(self):
        rng = np.random.default_rng(2)
        # two populations 10 sigma apart -> disjoint +-3 sigma intervals
        a = [rng.normal(0.0, 1.0, size=(6, 3)) for _ in range(20)]
        b = [rng.normal(10.0, 1.0, size=(6, 3)) for _ in range(20)]
        ha = init_flat_start(a, m=2, floor=1e-4)
        hb = init_flat_start(b, m=2, floor=1e-4)
        for s in range(2):
            hi_a = ha.means[s] + 3 * np.sqrt(ha.variances[s])
            lo_b = hb.means[s] - 3 * np.sqrt(hb.variances[s])
            assert np.all(hi_a < lo_b)

    def test_all_segments_too_short(self):
        with pytest.raises(InitError):
            init_flat_start([np.zeros((2, 3))], m=5, floor=1e-3)

    def test_transition_rows_stochastic(self):
        rng = np.random.default_rng(3)
        h = init_flat_start([rng.normal(size=(9, 2))], m=3, floor=1e-4)
        h.validate()


class TestForward:
    def test_single_state_closed_form(self):
        rng = np.random.default_rng(4)
        h = random_hmm(rng, m=1, dim=3)
        frames = rng.normal(size=(5, 3))
        # only one path: 4 self-loops then exit
        expected = (
            gaussian_loglik(frames, h.means, h.variances).sum()
            + 4 * h.log_self[0]
            + h.log_next[0]
        )
        assert forward_log_likelihood(h, frames) == pytest.approx(expected, abs=1e-9)

    def test_forward_upper_bounds_viterbi(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            m = rng.integers(1, 4)
            h = random_hmm(rng, m=m, dim=2)
            frames = rng.normal(size=(rng.integers(m, 9), 2))
            fwd = forward_log_likelihood(h, frames)
            vit = viterbi_decode(h, frames).total_log_prob
            assert fwd >= vit - 1e-12

    def test_matches_brute_force(self):
        rng = np.random.default_rng(6)
        for _ in range(25):
            h = random_hmm(rng, m=3, dim=2)
            frames = rng.normal(size=(6, 2))
            log_obs = oracles.emission_table(frames, h.means, h.variances)
            ref = oracles.brute_chain_forward(log_obs, h.log_self, h.log_next)
            assert forward_log_likelihood(h, frames) == pytest.approx(ref, abs=1e-9)


class TestViterbi:
    def test_matches_brute_force(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            h = random_hmm(rng, m=3, dim=2)
            frames = rng.normal(size=(7, 2))
            path = viterbi_decode(h, frames)
            log_obs = oracles.emission_table(frames, h.means, h.variances)
            ref_path, ref_score = oracles.brute_chain_viterbi(
                log_obs, h.log_self, h.log_next
            )
            assert path.total_log_prob == pytest.approx(ref_score, abs=1e-9)
            assert path.states.tolist() == ref_path

    def test_single_state_path(self):
        rng = np.random.default_rng(8)
        h = random_hmm(rng, m=1, dim=2)
        path = viterbi_decode(h, rng.normal(size=(6, 2)))
        assert path.states.tolist() == [0] * 6

    def test_states_non_decreasing(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            h = random_hmm(rng, m=3, dim=2)
            path = viterbi_decode(h, rng.normal(size=(10, 2)))
            assert np.all(np.diff(path.states) >= 0)

    def test_too_few_frames(self):
        rng = np.random.default_rng(10)
        h = random_hmm(rng, m=4, dim=2)
        with pytest.raises(NoPathError):
            viterbi_decode(h, rng.normal(size=(3, 2)))


class TestBaumWelch:
    def test_single_state_closed_form(self):
        rng = np.random.default_rng(11)
        h = random_hmm(rng, m=1, dim=3)
        segs = [rng.normal(size=(rng.integers(2, 8), 3)) for _ in range(5)]
        updated = baum_welch_update(h, segs)
        pooled = np.concatenate(segs)
        np.testing.assert_allclose(updated.means[0], pooled.mean(axis=0), atol=1e-10)
        np.testing.assert_allclose(
            updated.variances[0], pooled.var(axis=0), atol=1e-10
        )
        # self-loop: (sum T - K) transitions out of (sum T - K) + K exits
        T_total, K = len(pooled), len(segs)
        expected_self = (T_total - K) / T_total
        assert np.exp(updated.log_self[0]) == pytest.approx(expected_self, abs=1e-10)

    def test_loglik_non_decreasing_over_iterations(self):
        rng = np.random.default_rng(12)
        gen = random_hmm(rng, m=3, dim=2)
        segs = [sample_from_hmm(rng, gen) for _ in range(40)]
        segs = [s for s in segs if len(s) >= 3]
        h = init_flat_start(segs, m=3, floor=1e-4)
        prev = sum(forward_log_likelihood(h, s) for s in segs)
        for _ in range(10):
            h = baum_welch_update(h, segs)
            cur = sum(forward_log_likelihood(h, s) for s in segs)
            assert cur >= prev - 1e-8
            prev = cur

    def test_recovers_generating_means(self):
        rng = np.random.default_rng(13)
        means = np.array([[-4.0, 0.0], [0.0, 4.0], [4.0, -4.0]])
        variances = np.full((3, 2), 0.25)
        p_self = np.array([0.7, 0.7, 0.7])
        gen = TokenHmm(
            0, means, variances, make_log_trans(np.log(p_self), np.log1p(-p_self))
        )
        segs = [sample_from_hmm(rng, gen) for _ in range(500)]
        h = init_flat_start(segs, m=3, floor=1e-4)
        for _ in range(10):
            h = baum_welch_update(h, segs)
        # left-to-right states keep their order, no permutation matching needed
        assert np.max(np.abs(h.means - means)) < 0.2

    def test_all_segments_unusable_model_unchanged(self):
        # every legal path visits every state of a left-to-right chain, so
        # zero occupancy only happens when no segment admits a path at all
        rng = np.random.default_rng(14)
        h = random_hmm(rng, m=4, dim=1)
        segs = [rng.normal(size=(2, 1)) for _ in range(3)]
        with pytest.warns(UserWarning, match="no usable segment"):
            updated = baum_welch_update(h, segs)
        np.testing.assert_array_equal(updated.means, h.means)
        np.testing.assert_array_equal(updated.variances, h.variances)
        np.testing.assert_array_equal(updated.log_trans, h.log_trans)

    def test_rows_stochastic_after_update(self):
        rng = np.random.default_rng(15)
        for _ in range(10):
            h = random_hmm(rng, m=3, dim=2)
            segs = [rng.normal(size=(rng.integers(3, 9), 2)) for _ in range(4)]
            baum_welch_update(h, segs).validate()


def two_token_set(rng, m=1, sep=10.0, dim=2):
    models = []
    for k in range(2):
        means = rng.normal(loc=k * sep, scale=0.2, size=(m, dim))
        variances = np.ones((m, dim))
        p_self = np.full(m, 0.6)
        models.append(
            TokenHmm(
                k, means, variances, make_log_trans(np.log(p_self), np.log1p(-p_self))
            )
        )
    return TokenHmmSet(GranularityConfig(m, 2), models, variance_floor=1e-4)


class TestTokenLoop:
    def test_changepoint_recovered(self):
        rng = np.random.default_rng(16)
        ts = two_token_set(rng)
        a, b = ts.models
        frames = np.concatenate(
            [
                rng.normal(a.means[0], 1.0, size=(8, 2)),
                rng.normal(b.means[0], 1.0, size=(7, 2)),
            ]
        )
        path = token_loop_decode(ts, frames)
        occ = path.occupancies()
        assert [o[0] for o in occ] == [0, 1]
        assert abs(occ[0][2] - 8) <= 1

    def test_huge_penalty_single_occupancy(self):
        rng = np.random.default_rng(17)
        ts = two_token_set(rng)
        frames = rng.normal(0.0, 1.0, size=(10, 2))
        path = token_loop_decode(ts, frames, insertion_penalty=1e6)
        assert len(path.occupancies()) == 1

    def test_matches_brute_force(self):
        rng = np.random.default_rng(18)
        for trial in range(30):
            n = int(rng.integers(2, 4))
            models = [random_hmm(rng, m=int(rng.integers(1, 4)), dim=2, token_id=k)
                      for k in range(n)]
            ts = TokenHmmSet(GranularityConfig(3, n), models, 1e-4)
            frames = rng.normal(size=(8, 2))
            penalty = float(rng.uniform(0.0, 2.0))
            path = token_loop_decode(ts, frames, insertion_penalty=penalty)
            tables = [
                oracles.emission_table(frames, h.means, h.variances) for h in models
            ]
            ref_path, ref_score, _ = oracles.brute_loop(
                tables,
                [h.log_self for h in models],
                [h.log_next for h in models],
                penalty,
            )
            assert path.total_log_prob == pytest.approx(ref_score, abs=1e-9)
            got = list(zip(path.tokens.tolist(), path.states.tolist()))
            assert got == ref_path

    def test_no_path_when_all_models_too_long(self):
        rng = np.random.default_rng(19)
        models = [random_hmm(rng, m=5, dim=2, token_id=k) for k in range(2)]
        ts = TokenHmmSet(GranularityConfig(5, 2), models, 1e-4)
        with pytest.raises(NoPathError):
            token_loop_decode(ts, rng.normal(size=(3, 2)))


class TestForceAlign:
    def test_single_token_equals_viterbi(self):
        rng = np.random.default_rng(20)
        ts = two_token_set(rng, m=3)
        frames = rng.normal(size=(9, 2))
        forced = force_align(ts, frames, [1])
        free = viterbi_decode(ts.model_for(1), frames)
        assert forced.total_log_prob == pytest.approx(
            free.total_log_prob, abs=1e-12
        )
        assert forced.states.tolist() == free.states.tolist()

    def test_covers_all_frames_in_order(self):
        rng = np.random.default_rng(21)
        ts = two_token_set(rng, m=2)
        frames = rng.normal(size=(12, 2))
        forced = force_align(ts, frames, [0, 1, 0])
        occ = forced.occupancies()
        assert [o[0] for o in occ] == [0, 1, 0]
        assert occ[0][1] == 0 and occ[-1][2] == 12
        for (_, _, end), (_, start, _) in zip(occ, occ[1:]):
            assert end == start

    def test_constrained_never_beats_free_loop(self):
        rng = np.random.default_rng(22)
        for _ in range(20):
            ts = two_token_set(rng, m=2, sep=2.0)
            frames = rng.normal(size=(10, 2))
            free = token_loop_decode(ts, frames)
            seq = [int(rng.integers(0, 2)) for _ in range(rng.integers(1, 4))]
            forced = force_align(ts, frames, seq)
            assert forced.total_log_prob <= free.total_log_prob + 1e-12

    def test_sequence_too_long(self):
        rng = np.random.default_rng(23)
        ts = two_token_set(rng, m=3)
        with pytest.raises(NoPathError):
            force_align(ts, rng.normal(size=(5, 2)), [0, 1])

    def test_known_boundaries_recovered(self):
        rng = np.random.default_rng(24)
        ts = two_token_set(rng, m=2, sep=8.0)
        a, b = ts.models
        truth = []
        frames = []
        for tid, length in [(0, 6), (1, 5), (0, 7)]:
            h = ts.model_for(tid)
            for i in range(length):
                s = 0 if i < length // 2 else 1
                frames.append(rng.normal(h.means[s], np.sqrt(h.variances[s])))
            truth.append(length)
        forced = force_align(ts, np.array(frames), [0, 1, 0])
        bounds = [o[2] for o in forced.occupancies()][:-1]
        expected = np.cumsum(truth)[:-1]
        assert all(abs(g - e) <= 2 for g, e in zip(bounds, expected))


class TestModelFile:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(25)
        models = [random_hmm(rng, m=3, dim=4, token_id=k) for k in (0, 2, 5)]
        ts = TokenHmmSet(GranularityConfig(3, 8), models, variance_floor=0.01)
        path = tmp_path / "set.tkhm"
        save_model_set(ts, path)
        back = load_model_set(path)
        assert back.granularity == GranularityConfig(3, 8)
        assert back.variance_floor == 0.01
        assert back.token_ids == [0, 2, 5]
        for orig, loaded in zip(ts.models, back.models):
            np.testing.assert_array_equal(orig.means, loaded.means)
            np.testing.assert_array_equal(orig.variances, loaded.variances)
            np.testing.assert_array_equal(orig.log_trans, loaded.log_trans)
