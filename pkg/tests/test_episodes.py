import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policystop.episodes import (Dataset, DatasetFormatError, Episode,
                                 compute_norm_stats, denormalize, load_dataset,
                                 normalize, prefix, sample_training_window,
                                 save_dataset)


def make_episode(ep_id="e0", label="success", t=10, n_s=3, n_a=2, seed=0):
    rng = np.random.default_rng(seed)
    return Episode(id=ep_id, label=label,
                   states=rng.normal(size=(t, n_s)),
                   actions=rng.normal(size=(t, n_a)))


def make_dataset(n=3, t=10, k_max=20):
    episodes = [make_episode(f"e{i}", seed=i, t=t) for i in range(n)]
    return Dataset(episodes=episodes, n_s=3, n_a=2, k_max=k_max,
                   norm_stats=compute_norm_stats(episodes))


class TestEpisodeValidation:
    def test_rejects_nan(self):
        states = np.zeros((4, 2))
        states[2, 1] = np.nan
        with pytest.raises(DatasetFormatError, match="bad-ep"):
            Episode(id="bad-ep", label="success", states=states,
                    actions=np.zeros((4, 1)))

    def test_rejects_length_mismatch(self):
        with pytest.raises(DatasetFormatError, match="disagree"):
            Episode(id="e", label="success", states=np.zeros((4, 2)),
                    actions=np.zeros((3, 1)))

    def test_rejects_bad_label(self):
        with pytest.raises(DatasetFormatError, match="label"):
            Episode(id="e", label="meh", states=np.zeros((2, 2)),
                    actions=np.zeros((2, 1)))


class TestPrefix:
    def test_full_prefix_equals_episode(self):
        ep = make_episode(t=7)
        sub = prefix(ep, 7)
        np.testing.assert_array_equal(sub.states, ep.states)
        np.testing.assert_array_equal(sub.actions, ep.actions)

    def test_single_step(self):
        ep = make_episode(t=7)
        sub = prefix(ep, 1)
        assert sub.k_len == 1
        np.testing.assert_array_equal(sub.states, ep.states[:1])

    def test_prefix_composition(self):
        ep = make_episode(t=20)
        twice = prefix(ep, 10)
        inner = Episode(id=ep.id, label=ep.label, states=twice.states,
                        actions=twice.actions)
        np.testing.assert_array_equal(prefix(inner, 5).states, prefix(ep, 5).states)

    def test_out_of_range(self):
        ep = make_episode(t=5)
        for bad in (0, 6, -1):
            with pytest.raises(ValueError):
                prefix(ep, bad)

    def test_parent_untouched(self):
        ep = make_episode(t=5)
        before = ep.states.copy()
        sub = prefix(ep, 3)
        sub.states[0, 0] = 99.0
        np.testing.assert_array_equal(ep.states, before)


class TestNormalize:
    def test_mean_maps_to_zero(self):
        mean = np.array([1.0, -2.0])
        std = np.array([2.0, 3.0])
        np.testing.assert_allclose(normalize(mean, mean, std), 0.0)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        mean, std = rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)
        x = rng.normal(size=(10, 4))
        back = denormalize(normalize(x, mean, std), mean, std)
        assert np.abs(back - x).max() < 1e-6

    def test_constant_dimension_clamped(self):
        episodes = [Episode(id="e", label="success",
                            states=np.full((5, 2), 3.0),
                            actions=np.zeros((5, 1)))]
        stats = compute_norm_stats(episodes)
        np.testing.assert_array_equal(stats.state_std, [1.0, 1.0])
        np.testing.assert_allclose(stats.norm_states(np.full((1, 2), 3.0)), 0.0)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension mismatch"):
            normalize(np.zeros(3), np.zeros(2), np.ones(2))


class TestSampleTrainingWindow:
    def test_deterministic_shapes(self):
        ep = make_episode(t=10)
        rng = np.random.default_rng(7)
        s, a, s_next = sample_training_window(ep, t_in=1, t_out=1, rng=rng)
        assert s.shape == (2, 3) and a.shape == (2, 2) and s_next.shape == (1, 3)
        rng2 = np.random.default_rng(7)
        s2, _, _ = sample_training_window(ep, 1, 1, rng2)
        np.testing.assert_array_equal(s, s2)

    def test_too_short(self):
        ep = make_episode(t=2)
        with pytest.raises(ValueError, match="too short"):
            sample_training_window(ep, t_in=1, t_out=1, rng=np.random.default_rng(0))

    def test_anchor_distribution_uniform(self):
        # Valid anchors for T=100, t_in=5, t_out=3 are 5..96; check uniformity
        # with a chi-squared statistic against the flat distribution.
        ep = make_episode(t=100)
        rng = np.random.default_rng(123)
        lo, hi = 5, 96
        counts = np.zeros(hi - lo + 1)
        n = 10_000
        for _ in range(n):
            s, a, s_next = sample_training_window(ep, 5, 3, rng)
            # recover the anchor from the returned block
            k = int(np.where((ep.states == s[-1]).all(axis=1))[0][0])
            assert lo <= k <= hi
            counts[k - lo] += 1
        assert counts.min() > 0
        expected = n / counts.size
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        # 92 bins -> df 91; mean 91, std ~13.5. Generous bound.
        assert chi2 < 140.0, f"chi2={chi2}"

    def test_blocks_come_from_episode(self):
        ep = make_episode(t=30)
        rng = np.random.default_rng(5)
        for _ in range(200):
            s, a, s_next = sample_training_window(ep, 2, 2, rng)
            k = int(np.where((ep.states == s[-1]).all(axis=1))[0][0])
            np.testing.assert_array_equal(s, ep.states[k - 2 : k + 1])
            np.testing.assert_array_equal(a, ep.actions[k - 2 : k + 1])
            np.testing.assert_array_equal(s_next, ep.states[k + 1 : k + 3])


class TestSerialization:
    def test_round_trip_bit_exact(self, tmp_path):
        ds = make_dataset()
        path = tmp_path / "data.jsonl"
        save_dataset(ds, path)
        back = load_dataset(path)
        assert len(back) == len(ds)
        for a, b in zip(ds.episodes, back.episodes):
            assert a.id == b.id and a.label == b.label
            np.testing.assert_array_equal(a.states, b.states)
            np.testing.assert_array_equal(a.actions, b.actions)
        assert back.fingerprint() == ds.fingerprint()

    @settings(max_examples=20, deadline=None)
    @given(values=st.lists(st.floats(allow_nan=False, allow_infinity=False,
                                     width=64, min_value=-1e12, max_value=1e12),
                           min_size=4, max_size=4))
    def test_round_trip_arbitrary_floats(self, values, tmp_path_factory):
        tmp = tmp_path_factory.mktemp("rt")
        ep = Episode(id="e", label="failure",
                     states=np.array(values).reshape(2, 2),
                     actions=np.zeros((2, 1)))
        ds = Dataset(episodes=[ep], n_s=2, n_a=1, k_max=4,
                     norm_stats=compute_norm_stats([ep]))
        save_dataset(ds, tmp / "d.jsonl")
        back = load_dataset(tmp / "d.jsonl")
        np.testing.assert_array_equal(back.episodes[0].states, ep.states)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "empty.jsonl"
        path.write_text("")
        with pytest.raises(DatasetFormatError, match="empty dataset"):
            load_dataset(path)

    def test_parse_error_reports_line(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('ated two episodes\n')
        with pytest.raises(DatasetFormatError, match="line 1"):
            load_dataset(path)

    def test_nan_rejected_with_id(self, tmp_path):
        ds = make_dataset()
        path = tmp_path / "data.jsonl"
        save_dataset(ds, path)
        lines = path.read_text().splitlines()
        rec = json.loads(lines[1])
        rec["states"][0][0] = float("nan")
        lines[1] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match=rec["id"]):
            load_dataset(path)

    def test_dimension_mismatch_names_episode(self, tmp_path):
        ds = make_dataset()
        path = tmp_path / "data.jsonl"
        save_dataset(ds, path)
        lines = path.read_text().splitlines()
        rec = json.loads(lines[2])
        rec["states"] = [row + [0.0] for row in rec["states"]]
        lines[2] = json.dumps(rec)
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DatasetFormatError, match=rec["id"]):
            load_dataset(path)

    def test_stats_computed_when_missing(self, tmp_path):
        ds = make_dataset()
        path = tmp_path / "data.jsonl"
        save_dataset(ds, path)
        lines = path.read_text().splitlines()
        meta = json.loads(lines[0])
        meta["meta"]["norm_stats"] = None
        lines[0] = json.dumps(meta)
        path.write_text("\n".join(lines) + "\n")
        back = load_dataset(path)
        np.testing.assert_allclose(back.norm_stats.state_mean,
                                   ds.norm_stats.state_mean)
