import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from policystop.episodes import Dataset, Episode, compute_norm_stats, prefix
from policystop.metrics import (EvalReport, ScoredSet, auroc, fpr_at_tpr,
                                parse_report_csv, partial_length_eval,
                                render_report)


def auroc_pairwise(pos, neg):
    """Brute-force oracle: count correctly ordered pairs, half credit for ties."""
    pos = np.asarray(pos)[:, None]
    neg = np.asarray(neg)[None, :]
    wins = np.count_nonzero(pos > neg)
    ties = np.count_nonzero(pos == neg)
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def fpr_sweep_oracle(pos, neg, tpr_target=0.95):
    """Exhaustive sweep: among all candidate thresholds reaching the target
    TPR (detection at score >= threshold), pick the largest, report its FPR."""
    pos, neg = np.asarray(pos), np.asarray(neg)
    candidates = np.unique(np.concatenate([pos, neg]))
    feasible = [t for t in candidates if np.mean(pos >= t) >= tpr_target]
    thr = max(feasible)
    return float(np.mean(neg >= thr))


def random_scored_set(rng, ties=True):
    n_pos = int(rng.integers(5, 60))
    n_neg = int(rng.integers(5, 60))
    if ties:
        pos = rng.integers(0, 12, size=n_pos) / 4.0
        neg = rng.integers(0, 12, size=n_neg) / 4.0
    else:
        pos = rng.normal(size=n_pos)
        neg = rng.normal(size=n_neg)
    return ScoredSet(pos=pos.astype(float), neg=neg.astype(float))


class TestAuroc:
    def test_perfect_separation(self):
        assert auroc(ScoredSet(pos=[0.9, 0.8], neg=[0.1, 0.2])) == 1.0

    def test_tie_convention(self):
        assert auroc(ScoredSet(pos=[0.5], neg=[0.5])) == 0.5

    def test_hand_counted_case(self):
        # pairs: (.8,.6)+ (.8,.2)+ (.4,.6)- (.4,.2)+ -> 3/4
        assert auroc(ScoredSet(pos=[0.8, 0.4], neg=[0.6, 0.2])) == 0.75

    def test_matches_pairwise_oracle(self):
        rng = np.random.default_rng(0)
        for i in range(100):
            s = random_scored_set(rng, ties=(i % 2 == 0))
            assert abs(auroc(s) - auroc_pairwise(s.pos, s.neg)) < 1e-9

    def test_large_sets_match_oracle(self):
        rng = np.random.default_rng(1)
        pos = rng.integers(0, 200, size=1000) / 10.0
        neg = rng.integers(0, 200, size=1000) / 10.0
        s = ScoredSet(pos=pos, neg=neg)
        assert abs(auroc(s) - auroc_pairwise(pos, neg)) < 1e-9

    def test_complement_identity_tie_free(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            s = random_scored_set(rng, ties=False)
            total = auroc(s) + auroc(ScoredSet(pos=s.neg, neg=s.pos))
            assert abs(total - 1.0) < 1e-12

    def test_empty_class_rejected(self):
        with pytest.raises(ValueError, match="non-empty"):
            ScoredSet(pos=[], neg=[0.1])


class TestFprAtTpr:
    def test_perfect_separation(self):
        s = ScoredSet(pos=[0.9, 0.8, 0.7], neg=[0.1, 0.2, 0.3])
        assert fpr_at_tpr(s) == 0.0

    def test_all_identical_scores(self):
        s = ScoredSet(pos=[0.5] * 4, neg=[0.5] * 6)
        assert fpr_at_tpr(s) == 1.0

    def test_threshold_at_19th_highest_of_20(self):
        rng = np.random.default_rng(3)
        pos = np.sort(rng.normal(size=20))
        neg = rng.normal(size=30)
        s = ScoredSet(pos=pos, neg=neg)
        thr = np.sort(pos)[1]  # 19th highest
        assert fpr_at_tpr(s, 0.95) == np.mean(neg >= thr)

    def test_matches_sweep_oracle(self):
        rng = np.random.default_rng(4)
        for i in range(100):
            s = random_scored_set(rng, ties=(i % 2 == 0))
            for target in (0.5, 0.8, 0.95, 1.0):
                assert fpr_at_tpr(s, target) == fpr_sweep_oracle(s.pos, s.neg, target)

    def test_invalid_target(self):
        s = ScoredSet(pos=[1.0], neg=[0.0])
        with pytest.raises(ValueError):
            fpr_at_tpr(s, 0.0)


class TestMonotoneInvariance:
    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000))
    def test_metrics_invariant_under_increasing_transforms(self, seed):
        rng = np.random.default_rng(seed)
        s = random_scored_set(rng)
        for transform in (lambda x: 2.0 * x + 1.0, np.cbrt, lambda x: x ** 3):
            t = ScoredSet(pos=transform(s.pos), neg=transform(s.neg))
            assert auroc(t) == auroc(s)
            assert fpr_at_tpr(t) == fpr_at_tpr(s)


class ConstantDetector:
    kind = "const"

    def score(self, sub):
        return 1.0


class LengthDetector:
    kind = "len"

    def score(self, sub):
        return float(sub.k_len) + 10.0 * float(sub.states[-1, 0] > 2.0)


def toy_test_set(n=12, t=20, k_max=20):
    rng = np.random.default_rng(0)
    episodes = []
    for i in range(n):
        label = "failure" if i % 2 else "success"
        states = rng.normal(size=(t, 2)) + (3.0 if label == "failure" else 0.0)
        episodes.append(Episode(id=f"e{i}", label=label, states=states,
                                actions=rng.normal(size=(t, 1))))
    return Dataset(episodes=episodes, n_s=2, n_a=1, k_max=k_max,
                   norm_stats=compute_norm_stats(episodes))


class TestPartialLengthEval:
    def test_constant_detector_baseline(self):
        report = partial_length_eval({"const": ConstantDetector()}, toy_test_set())
        for f in report.fractions:
            assert report.value("const", f, "auroc") == 0.5
            assert report.value("const", f, "fpr_at_tpr95") == 1.0

    def test_full_fraction_uses_whole_episode(self):
        ds = toy_test_set()
        seen = []

        class Spy:
            kind = "spy"

            def score(self, sub):
                seen.append(sub.k_len)
                return 0.0 + (sub.states.mean() > 1.0)

        partial_length_eval({"spy": Spy()}, ds, fractions=[1.0])
        assert all(k == 20 for k in seen)

    def test_deterministic_reports(self):
        ds = toy_test_set()
        r1 = partial_length_eval({"len": LengthDetector()}, ds, seed=5)
        r2 = partial_length_eval({"len": LengthDetector()}, ds, seed=5)
        assert render_report(r1, "csv") == render_report(r2, "csv")

    def test_single_label_rejected(self):
        ds = toy_test_set()
        ds.episodes = [ep for ep in ds.episodes if ep.label == "success"]
        with pytest.raises(ValueError, match="both"):
            partial_length_eval({"const": ConstantDetector()}, ds)

    def test_cutoff_clamps_to_episode_length(self):
        rng = np.random.default_rng(1)
        short = Episode(id="short", label="failure", states=rng.normal(size=(3, 2)),
                        actions=rng.normal(size=(3, 1)))
        longer = Episode(id="long", label="success", states=rng.normal(size=(20, 2)),
                         actions=rng.normal(size=(20, 1)))
        ds = Dataset(episodes=[short, longer], n_s=2, n_a=1, k_max=20,
                     norm_stats=compute_norm_stats([short, longer]))
        seen = {}

        class Spy:
            kind = "spy"

            def score(self, sub):
                seen[sub.parent_id] = sub.k_len
                return float(sub.k_len)

        partial_length_eval({"spy": Spy()}, ds, fractions=[0.5])
        assert seen == {"short": 3, "long": 10}


class TestRenderReport:
    def make_report(self):
        ds = toy_test_set()
        return partial_length_eval({"len": LengthDetector(),
                                    "const": ConstantDetector()}, ds, seed=3)

    def test_table_shape(self):
        report = self.make_report()
        lines = [l for l in render_report(report, "table").splitlines() if l.strip()]
        # header + separator + 2 detectors x 2 metrics
        assert len(lines) == 2 + 4
        assert lines[0].split()[:2] == ["method", "metric"]

    def test_two_decimal_cells(self):
        report = self.make_report()
        row = render_report(report, "table").splitlines()[2].split()
        for cell in row[2:]:
            assert len(cell.split(".")[-1]) == 2

    def test_csv_round_trip(self):
        report = self.make_report()
        text = render_report(report, "csv")
        back = parse_report_csv(text)
        assert back.fractions == report.fractions
        assert back.seed == report.seed
        assert back.dataset_fingerprint == report.dataset_fingerprint
        for name, per_frac in report.entries.items():
            for f, metrics in per_frac.items():
                for metric, value in metrics.items():
                    assert back.value(name, f, metric) == value

    def test_unknown_format(self):
        with pytest.raises(ValueError):
            render_report(self.make_report(), "yaml")
