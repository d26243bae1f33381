"""Streaming stop decisions: threshold calibration, the step monitor, traces.

Deployment splits the step axis into periods and calibrates one threshold per
period as an upper quantile of the scores that normal validation episodes
attain at prefix lengths inside that period. The monitor accumulates the live
episode, scores the prefix each step (optionally at a stride), and stops the
first time the score exceeds the active period's threshold. After a stop the
monitor is terminal and accepts no further steps.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .episodes import Dataset, SUCCESS, SubEpisode

CONTINUE = "continue"
STOP = "stop"


def default_periods(k_max: int, fractions=(0.10, 0.20, 0.30, 0.50, 0.75, 1.00)) -> list[int]:
    """Period upper boundaries at the standard cutoff fractions of ``k_max``."""
    bounds = []
    for f in fractions:
        b = max(1, int(np.floor(f * k_max)))
        if not bounds or b > bounds[-1]:
            bounds.append(b)
    if bounds[-1] < k_max:
        bounds[-1] = k_max
    return bounds


@dataclass
class ThresholdSchedule:
    """One stop threshold per step period; periods partition [1, k_max]."""

    boundaries: list[int]  # inclusive upper step index per period, increasing
    thresholds: list[float]
    detector_kind: str = ""
    detector_config: dict = field(default_factory=dict)
    target_fpr: float = 0.0

    def __post_init__(self):
        if len(self.boundaries) != len(self.thresholds):
            raise ValueError("need exactly one threshold per period")
        if not self.boundaries:
            raise ValueError("need at least one period")
        if any(b2 <= b1 for b1, b2 in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("period boundaries must be strictly increasing")
        if not np.isfinite(self.thresholds).all():
            raise ValueError("thresholds must be finite")

    def period_index(self, step: int) -> int:
        """Index of the period containing 1-based step; steps past the last
        boundary fall into the last period."""
        for i, b in enumerate(self.boundaries):
            if step <= b:
                return i
        return len(self.boundaries) - 1

    def threshold_for(self, step: int) -> float:
        return self.thresholds[self.period_index(step)]

    def to_dict(self) -> dict:
        return {
            "boundaries": list(self.boundaries),
            "thresholds": [float(t) for t in self.thresholds],
            "detector_kind": self.detector_kind,
            "detector_config": self.detector_config,
            "target_fpr": self.target_fpr,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ThresholdSchedule":
        return cls(
            boundaries=[int(b) for b in d["boundaries"]],
            thresholds=[float(t) for t in d["thresholds"]],
            detector_kind=d.get("detector_kind", ""),
            detector_config=d.get("detector_config", {}),
            target_fpr=float(d.get("target_fpr", 0.0)),
        )


def calibrate_thresholds(detector, validation: Dataset, periods: list[int],
                         target_fpr: float = 0.05) -> ThresholdSchedule:
    """Per-period thresholds from prefix scores of normal validation episodes.

    Every validation episode is scored at every prefix length; the scores
    whose prefix length falls in a period form that period's pool and the
    threshold is the pool's (1 - target_fpr) quantile, taken at an attained
    value from above, so at most a target_fpr fraction of calibration
    prefixes strictly exceed it. With target_fpr 0 the threshold is the pool
    maximum and the monitor never stops on calibration data.
    """
    if not 0.0 <= target_fpr < 1.0:
        raise ValueError(f"target_fpr must be in [0, 1), got {target_fpr}")
    if len(validation) == 0:
        raise ValueError("validation set is empty")
    bad = [ep.id for ep in validation.episodes if ep.label != SUCCESS]
    if bad:
        raise ValueError(f"validation set must be all success-labeled; offenders: {bad[:3]}")

    pools: list[list[float]] = [[] for _ in periods]
    for ep in validation.episodes:
        scores = detector.score_prefixes(ep.states, ep.actions)
        for k, s in enumerate(scores, start=1):
            idx = _period_of(k, periods)
            pools[idx].append(float(s))

    thresholds = []
    for i, pool in enumerate(pools):
        if not pool:
            lo = 1 if i == 0 else periods[i - 1] + 1
            raise ValueError(
                f"no validation prefixes fall in period {i} (steps {lo}..{periods[i]})"
            )
        thresholds.append(float(np.quantile(pool, 1.0 - target_fpr, method="higher")))

    return ThresholdSchedule(
        boundaries=list(periods),
        thresholds=thresholds,
        detector_kind=getattr(detector, "kind", ""),
        detector_config=detector.config_echo() if hasattr(detector, "config_echo") else {},
        target_fpr=target_fpr,
    )


def _period_of(step: int, boundaries: list[int]) -> int:
    for i, b in enumerate(boundaries):
        if step <= b:
            return i
    return len(boundaries) - 1


@dataclass(frozen=True)
class Decision:
    step: int
    verdict: str
    score: float
    threshold: float


@dataclass
class MonitorState:
    """Accumulated live episode plus the decision history; terminal after stop."""

    n_s: int
    n_a: int
    episode_id: str = "live"
    stride: int = 1             # score every stride-th step (always the first)
    running_max: bool = False   # monotone envelope over raw detector scores
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    stopped: bool = False
    _peak: float = float("-inf")
    _last_score: float = 0.0

    @property
    def step_count(self) -> int:
        return len(self.states)

    def trace_arrays(self):
        states = np.asarray(self.states, dtype=np.float64)
        actions = np.asarray(self.actions, dtype=np.float64)
        return states, actions


def monitor_step(state: MonitorState, state_vec, action_vec,
                 schedule: ThresholdSchedule, detector) -> Decision:
    """Ingest one (state, action) step and decide continue vs stop.

    The detector scores the accumulated prefix; the verdict is stop iff the
    score strictly exceeds the active period's threshold. Steps between
    scoring strides reuse the last score.
    """
    if state.stopped:
        raise RuntimeError("monitor is terminal: a stop was already emitted")
    state_vec = np.asarray(state_vec, dtype=np.float64).ravel()
    action_vec = np.asarray(action_vec, dtype=np.float64).ravel()
    if state_vec.size != state.n_s or action_vec.size != state.n_a:
        raise ValueError(
            f"step dims ({state_vec.size}, {action_vec.size}) do not match "
            f"monitor dims ({state.n_s}, {state.n_a})"
        )
    state.states.append(state_vec)
    state.actions.append(action_vec)
    t = state.step_count

    if (t - 1) % state.stride == 0:
        sub = SubEpisode(parent_id=state.episode_id, k_len=t,
                         states=np.asarray(state.states),
                         actions=np.asarray(state.actions))
        raw = float(detector.score(sub))
        state._peak = max(state._peak, raw)
        state._last_score = state._peak if state.running_max else raw
    score = state._last_score

    threshold = schedule.threshold_for(t)
    verdict = STOP if score > threshold else CONTINUE
    decision = Decision(step=t, verdict=verdict, score=score, threshold=threshold)
    state.decisions.append(decision)
    if verdict == STOP:
        state.stopped = True
    return decision


def run_monitor(detector, schedule: ThresholdSchedule, states: np.ndarray,
                actions: np.ndarray, episode_id: str = "replay",
                stride: int = 1, running_max: bool = False) -> MonitorState:
    """Feed a recorded episode through the monitor until it ends or stops."""
    state = MonitorState(n_s=states.shape[1], n_a=actions.shape[1],
                         episode_id=episode_id, stride=stride,
                         running_max=running_max)
    for t in range(states.shape[0]):
        decision = monitor_step(state, states[t], actions[t], schedule, detector)
        if decision.verdict == STOP:
            break
    return state


def stop_step(state: MonitorState) -> int | None:
    """1-based step of the stop decision, or None if the episode ran clean."""
    if not state.stopped:
        return None
    return state.decisions[-1].step


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

def emit_trace(state: MonitorState, fmt: str = "csv") -> str:
    """Render the decision history as CSV rows or a standalone SVG plot."""
    if not state.decisions:
        raise ValueError("no steps recorded")
    if fmt == "csv":
        lines = ["step,score,threshold,verdict"]
        for d in state.decisions:
            lines.append(f"{d.step},{d.score!r},{d.threshold!r},{d.verdict}")
        return "\n".join(lines) + "\n"
    if fmt != "svg":
        raise ValueError(f"unknown trace format {fmt!r}")

    width, height, pad = 720, 240, 36
    n = len(state.decisions)
    scores = np.array([d.score for d in state.decisions])
    thresholds = np.array([d.threshold for d in state.decisions])
    lo = min(scores.min(), thresholds.min())
    hi = max(scores.max(), thresholds.max())
    span = hi - lo if hi > lo else 1.0

    def sx(i):
        return pad + (width - 2 * pad) * (i / max(n - 1, 1))

    def sy(v):
        return height - pad - (height - 2 * pad) * ((v - lo) / span)

    def poly(values):
        return " ".join(f"{sx(i):.2f},{sy(v):.2f}" for i, v in enumerate(values))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<polyline points="{poly(thresholds)}" fill="none" stroke="#888888" '
        'stroke-dasharray="4 3" stroke-width="1.5"/>',
        f'<polyline points="{poly(scores)}" fill="none" stroke="#1f6fb2" stroke-width="2"/>',
    ]
    if state.stopped:
        x = sx(n - 1)
        parts.append(
            f'<line x1="{x:.2f}" y1="{pad}" x2="{x:.2f}" y2="{height - pad}" '
            'stroke="#c0392b" stroke-width="2"/>'
        )
        parts.append(
            f'<text x="{x - 4:.2f}" y="{pad - 6}" text-anchor="end" font-size="12" '
            f'fill="#c0392b">stop@{state.decisions[-1].step}</text>'
        )
    parts.append(
        f'<text x="{pad}" y="{height - 8}" font-size="11" fill="#444444">'
        f'score (normalized), steps 1..{n}</text>'
    )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
