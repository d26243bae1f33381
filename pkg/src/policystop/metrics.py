"""Detection metrics and the partial-length evaluation protocol.

Scores follow the convention "higher = more anomalous"; failure-labeled
episodes are the positives. AUROC uses the rank statistic with half credit
for ties; FPR@TPR is evaluated at the largest threshold that still admits the
target fraction of positives (score >= threshold counts as a detection).

The partial-length protocol truncates every test episode to fixed fractions
of the dataset-wide maximum length and reports both metrics per detector per
fraction, so early-detection ability shows up as good numbers at the small
fractions.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .episodes import Dataset, FAILURE, prefix

DEFAULT_FRACTIONS = (0.10, 0.20, 0.30, 0.50, 0.75, 1.00)


@dataclass(frozen=True)
class ScoredSet:
    """Anomaly scores split by ground truth: failures (pos) vs successes (neg)."""

    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.pos, dtype=np.float64)
        neg = np.asarray(self.neg, dtype=np.float64)
        if pos.size == 0 or neg.size == 0:
            raise ValueError("both score classes must be non-empty")
        if not (np.isfinite(pos).all() and np.isfinite(neg).all()):
            raise ValueError("scores must be finite")
        object.__setattr__(self, "pos", pos)
        object.__setattr__(self, "neg", neg)


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(values.size, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < values.size:
        j = i
        while j + 1 < values.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        avg = 0.5 * (i + j) + 1.0
        ranks[order[i : j + 1]] = avg
        i = j + 1
    return ranks


def auroc(scored: ScoredSet) -> float:
    """Probability a random positive outscores a random negative (ties half)."""
    n_pos, n_neg = scored.pos.size, scored.neg.size
    combined = np.concatenate([scored.pos, scored.neg])
    ranks = _average_ranks(combined)
    rank_sum = float(ranks[:n_pos].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def fpr_at_tpr(scored: ScoredSet, tpr_target: float = 0.95) -> float:
    """False-positive rate at the loosest threshold reaching the target TPR.

    The threshold is the largest positive-score value for which the fraction
    of positives scoring >= it is at least ``tpr_target``; the return value
    is the fraction of negatives scoring >= that threshold.
    """
    if not 0.0 < tpr_target <= 1.0:
        raise ValueError(f"tpr_target must be in (0, 1], got {tpr_target}")
    candidates = np.unique(scored.pos)[::-1]  # descending
    n_pos = scored.pos.size
    for thr in candidates:
        if np.count_nonzero(scored.pos >= thr) / n_pos >= tpr_target:
            return float(np.count_nonzero(scored.neg >= thr) / scored.neg.size)
    # Unreachable: the smallest positive admits every positive.
    raise AssertionError("no admitting threshold found")


@dataclass
class EvalReport:
    """Per-detector, per-cutoff metric table plus provenance."""

    fractions: list[float]
    entries: dict[str, dict[float, dict[str, float]]]
    detector_configs: dict[str, dict] = field(default_factory=dict)
    dataset_fingerprint: str = ""
    seed: int | None = None
    notes: list[str] = field(default_factory=list)

    def value(self, detector: str, fraction: float, metric: str) -> float:
        return self.entries[detector][fraction][metric]


def partial_length_eval(detectors: dict, test: Dataset,
                        fractions=DEFAULT_FRACTIONS, seed: int | None = None,
                        tpr_target: float = 0.95) -> EvalReport:
    """Score truncated test episodes with every detector and tabulate metrics.

    For fraction f each episode contributes its first max(1, floor(f * k_max))
    steps, clamped to its own length; episodes shorter than the cutoff
    contribute whole.
    """
    labels = {ep.label for ep in test.episodes}
    if len(labels) < 2:
        raise ValueError("test set must contain both success and failure episodes")
    fractions = [float(f) for f in fractions]
    entries: dict[str, dict[float, dict[str, float]]] = {
        name: {} for name in detectors
    }
    notes: list[str] = []
    for f in fractions:
        k_cut = max(1, int(np.floor(f * test.k_max)))
        subs = [(prefix(ep, min(k_cut, ep.length)), ep.label) for ep in test.episodes]
        for name, det in detectors.items():
            scores = np.array([det.score(sub) for sub, _ in subs])
            is_pos = np.array([label == FAILURE for _, label in subs])
            scored = ScoredSet(pos=scores[is_pos], neg=scores[~is_pos])
            entries[name][f] = {
                "auroc": auroc(scored),
                "fpr_at_tpr95": fpr_at_tpr(scored, tpr_target),
            }
            window = getattr(getattr(det, "config", None), "window", None)
            if window is not None and k_cut < window:
                note = (f"{name}: cutoff {f:g} is below window {window}; "
                        "scored via a single zero-padded window")
                if note not in notes:
                    notes.append(note)
    return EvalReport(
        fractions=fractions,
        entries=entries,
        detector_configs={
            name: det.config_echo() if hasattr(det, "config_echo") else {}
            for name, det in detectors.items()
        },
        dataset_fingerprint=test.fingerprint(),
        seed=seed,
        notes=notes,
    )


_METRICS = ("auroc", "fpr_at_tpr95")


def render_report(report: EvalReport, fmt: str = "table") -> str:
    """Lay the report out as a fixed-width table or a round-trippable CSV."""
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["detector", "metric", "fraction", "value", "seed",
                         "dataset_fingerprint"])
        for name, per_frac in report.entries.items():
            for metric in _METRICS:
                for f in report.fractions:
                    writer.writerow([
                        name, metric, repr(float(f)),
                        repr(float(per_frac[f][metric])),
                        "" if report.seed is None else report.seed,
                        report.dataset_fingerprint,
                    ])
        return buf.getvalue()

    if fmt != "table":
        raise ValueError(f"unknown report format {fmt!r}")
    headers = ["method", "metric"] + [f"{int(round(f * 100))}%" for f in report.fractions]
    rows = []
    for name, per_frac in report.entries.items():
        for metric in _METRICS:
            rows.append([name, metric] + [f"{per_frac[f][metric]:.2f}"
                                          for f in report.fractions])
    widths = [max(len(str(r[i])) for r in [headers] + rows) for i in range(len(headers))]
    lines = ["  ".join(str(c).ljust(w) for c, w in zip(headers, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(str(c).ljust(w) for c, w in zip(r, widths)))
    if report.notes:
        lines.append("")
        for note in report.notes:
            lines.append(f"note: {note}")
    return "\n".join(lines) + "\n"


def parse_report_csv(text: str) -> EvalReport:
    """Rebuild an EvalReport from its CSV rendering (metric values only)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    expected = ["detector", "metric", "fraction", "value", "seed", "dataset_fingerprint"]
    if header != expected:
        raise ValueError(f"unexpected CSV header {header!r}")
    entries: dict[str, dict[float, dict[str, float]]] = {}
    fractions: list[float] = []
    seed: int | None = None
    fingerprint = ""
    for row in reader:
        if not row:
            continue
        name, metric, frac_s, value_s, seed_s, fingerprint = row
        f = float(frac_s)
        if f not in fractions:
            fractions.append(f)
        entries.setdefault(name, {}).setdefault(f, {})[metric] = float(value_s)
        seed = int(seed_s) if seed_s else None
    return EvalReport(fractions=fractions, entries=entries, seed=seed,
                      dataset_fingerprint=fingerprint)
