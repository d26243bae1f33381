"""Synthetic goal-reaching benchmark with injectable failures.

A 2-D point mass is driven toward a goal region by a noisy
proportional-derivative controller. Normal episodes end when the mass enters
the goal region and are labeled success; anomalous episodes follow the same
controller until an onset step, then a corruption takes over and the episode
runs to the step cap with label failure. Test-time data can come from a
gain-jittered controller so detectors are scored on rollouts of a policy they
were not trained on.

State layout (n_s = 6): [px, py, vx, vy, gx - px, gy - py].
Action layout (n_a = 2): commanded acceleration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .episodes import Dataset, Episode, FAILURE, SUCCESS, compute_norm_stats

N_S = 6
N_A = 2

ANOMALY_KINDS = ("drift", "spin", "dropout", "offpolicy_start")

DEFAULT_MAGNITUDES = {
    "drift": 1.0,
    "spin": 0.8,
    "dropout": 1.0,
    "offpolicy_start": 0.6,
}

# Per-episode magnitude jitter: the default mix spans subtle to blatant
# corruptions instead of a single difficulty.
MAGNITUDE_JITTER = (0.4, 1.2)

# Default mix leans on the corruptions that start subtle and compound (drift,
# spin); gross kinds stay present but rarer so they cannot carry a detector
# on their own.
DEFAULT_KIND_CYCLE = ("drift", "spin", "drift", "dropout",
                      "drift", "spin", "drift", "offpolicy_start")


@dataclass(frozen=True)
class SynthConfig:
    max_steps: int = 80          # episode cap; also the dataset k_max
    dt: float = 0.25
    kp: float = 0.28
    kd: float = 1.1
    accel_limit: float = 2.0
    process_noise: float = 0.02  # std of per-step velocity noise
    goal_span: float = 2.0       # goals drawn uniformly in [-span, span]^2
    start_distance: float = 2.5  # nominal start-to-goal distance
    start_spread: float = 0.6    # uniform jitter on that distance
    goal_radius: float = 0.15
    policy_jitter: float = 0.0   # relative gain perturbation per episode
    onset_min: int = 2
    onset_max: int = 20
    spin_rate: float = 0.6

    def __post_init__(self):
        if self.max_steps < 2:
            raise ValueError("max_steps must be at least 2")
        for name in ("dt", "kp", "kd", "goal_radius", "accel_limit",
                     "start_distance", "goal_span"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 < self.onset_min <= self.onset_max < self.max_steps:
            raise ValueError("need 0 < onset_min <= onset_max < max_steps")


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    onset: int
    magnitude: float

    def __post_init__(self):
        if self.kind not in ANOMALY_KINDS:
            raise ValueError(f"unknown anomaly kind {self.kind!r}; choose from {ANOMALY_KINDS}")
        if self.onset < 0:
            raise ValueError("onset must be non-negative")
        if self.magnitude < 0:
            raise ValueError("magnitude must be non-negative")


def _state(p, v, g) -> np.ndarray:
    return np.concatenate([p, v, g - p])


def _corrupt_action(a_nominal: np.ndarray, spec: AnomalySpec, cfg: SynthConfig,
                    p: np.ndarray, v: np.ndarray, g: np.ndarray, tau: int) -> np.ndarray:
    if spec.kind == "drift":
        # Scale down (and past magnitude 1, flip) the attraction gain.
        return cfg.kp * (1.0 - spec.magnitude) * (g - p) - cfg.kd * v
    if spec.kind == "spin":
        angle = cfg.spin_rate * tau
        return spec.magnitude * np.array([math.cos(angle), math.sin(angle)])
    if spec.kind == "dropout":
        return (1.0 - min(spec.magnitude, 1.0)) * a_nominal
    # offpolicy_start corrupts the initial condition, not the command
    return a_nominal


def _simulate(rng: np.random.Generator, cfg: SynthConfig,
              spec: AnomalySpec | None,
              start_override: tuple[np.ndarray, np.ndarray, np.ndarray] | None = None
              ) -> tuple[np.ndarray, np.ndarray, bool]:
    """Roll one episode; returns (states, actions, reached_goal).

    RNG consumption order is fixed (gains, initial condition, then one noise
    draw per step) so an anomalous episode consumes draws exactly like the
    normal episode it forks from until its onset.
    """
    jit = cfg.policy_jitter
    if jit > 0:
        kp = cfg.kp * (1.0 + rng.uniform(-jit, jit))
        kd = cfg.kd * (1.0 + rng.uniform(-jit, jit))
    else:
        kp, kd = cfg.kp, cfg.kd

    if start_override is not None:
        p, v, g = (arr.copy() for arr in start_override)
    else:
        g = rng.uniform(-cfg.goal_span, cfg.goal_span, size=2)
        direction = rng.uniform(0.0, 2.0 * math.pi)
        dist = cfg.start_distance + rng.uniform(-cfg.start_spread, cfg.start_spread)
        p = g + dist * np.array([math.cos(direction), math.sin(direction)])
        v = np.zeros(2)
        if spec is not None and spec.kind == "offpolicy_start":
            # Launch from far outside the training spread, moving sideways.
            p = g + (1.0 + spec.magnitude) * dist * np.array(
                [math.cos(direction), math.sin(direction)]
            )
            lateral = direction + 0.5 * math.pi
            v = spec.magnitude * np.array([math.cos(lateral), math.sin(lateral)])

    states = np.zeros((cfg.max_steps, N_S))
    actions = np.zeros((cfg.max_steps, N_A))
    reached = False
    t_end = cfg.max_steps
    for t in range(cfg.max_steps):
        s = _state(p, v, g)
        a = kp * (g - p) - kd * v
        if spec is not None and spec.kind != "offpolicy_start" and t >= spec.onset:
            a = _corrupt_action(a, spec, cfg, p, v, g, t - spec.onset)
        a = np.clip(a, -cfg.accel_limit, cfg.accel_limit)
        states[t] = s
        actions[t] = a
        noise = rng.normal(0.0, cfg.process_noise, size=2)
        v = v + cfg.dt * a + noise
        p = p + cfg.dt * v
        if spec is None and np.linalg.norm(g - p) < cfg.goal_radius:
            reached = True
            t_end = t + 1
            break
    return states[:t_end].copy(), actions[:t_end].copy(), reached


def _default_spec(rng: np.random.Generator, cfg: SynthConfig, index: int) -> AnomalySpec:
    kind = DEFAULT_KIND_CYCLE[index % len(DEFAULT_KIND_CYCLE)]
    onset = 0 if kind == "offpolicy_start" else int(
        rng.integers(cfg.onset_min, cfg.onset_max + 1)
    )
    magnitude = DEFAULT_MAGNITUDES[kind] * rng.uniform(*MAGNITUDE_JITTER)
    return AnomalySpec(kind=kind, onset=onset, magnitude=magnitude)


def generate_dataset(cfg: SynthConfig, n_normal: int, n_anomalous: int,
                     specs=None, seed: int = 0, id_prefix: str = "ep") -> Dataset:
    """Simulate a labeled dataset; deterministic for a given (cfg, seed).

    ``specs`` may be a sequence of AnomalySpec cycled over the anomalous
    episodes; by default kinds are cycled with onsets drawn uniformly from
    the configured range. Anomalous episodes ignore goal termination and run
    to the step cap.
    """
    if n_normal < 0 or n_anomalous < 0:
        raise ValueError("episode counts must be non-negative")
    if n_normal + n_anomalous == 0:
        raise ValueError("need at least one episode")
    root = np.random.SeedSequence(seed)
    episodes = []
    audit = []
    for i, child in enumerate(root.spawn(n_normal + n_anomalous)):
        rng = np.random.default_rng(child)
        if i < n_normal:
            states, actions, reached = _simulate(rng, cfg, None)
            label = SUCCESS
            spec = None
        else:
            j = i - n_normal
            if specs is not None:
                spec = specs[j % len(specs)]
            else:
                spec = _default_spec(rng, cfg, j)
            states, actions, _ = _simulate(rng, cfg, spec)
            label = FAILURE
        ep_id = f"{id_prefix}-{i:05d}"
        episodes.append(Episode(id=ep_id, label=label, states=states, actions=actions))
        if spec is not None:
            audit.append({"id": ep_id, **asdict(spec)})

    stats = compute_norm_stats(episodes)
    meta = {"generator": "point_mass_reach", "seed": seed, "anomalies": audit,
            "config": asdict(cfg)}
    return Dataset(episodes=episodes, n_s=N_S, n_a=N_A, k_max=cfg.max_steps,
                   norm_stats=stats, meta=meta)


def inject_anomaly(episode: Episode, spec: AnomalySpec, cfg: SynthConfig,
                   rng: np.random.Generator) -> Episode:
    """Replay ``episode`` with the corruption active from the onset step on.

    Steps before the onset are copied bit-for-bit; from the onset the point
    mass is re-simulated under the corrupted command stream (fresh process
    noise from ``rng``). The result is labeled failure and runs to the cap.
    """
    if spec.onset >= episode.length:
        raise ValueError(
            f"onset {spec.onset} out of range for episode {episode.id!r} "
            f"of length {episode.length}"
        )
    if spec.kind == "offpolicy_start":
        raise ValueError("offpolicy_start corrupts generation, not an existing episode")

    s0 = episode.states[spec.onset]
    p = s0[0:2].copy()
    v = s0[2:4].copy()
    g = p + s0[4:6]

    states = [episode.states[t].copy() for t in range(spec.onset)]
    actions = [episode.actions[t].copy() for t in range(spec.onset)]
    for t in range(spec.onset, cfg.max_steps):
        s = _state(p, v, g)
        a_nom = cfg.kp * (g - p) - cfg.kd * v
        a = _corrupt_action(a_nom, spec, cfg, p, v, g, t - spec.onset)
        a = np.clip(a, -cfg.accel_limit, cfg.accel_limit)
        states.append(s)
        actions.append(a)
        noise = rng.normal(0.0, cfg.process_noise, size=2)
        v = v + cfg.dt * a + noise
        p = p + cfg.dt * v
    return Episode(id=f"{episode.id}-injected", label=FAILURE,
                   states=np.asarray(states), actions=np.asarray(actions))


def nominal_continuation(episode: Episode, from_step: int, cfg: SynthConfig,
                         rng: np.random.Generator) -> np.ndarray:
    """Positions the nominal controller would visit from ``from_step`` on."""
    s0 = episode.states[from_step]
    p = s0[0:2].copy()
    v = s0[2:4].copy()
    g = p + s0[4:6]
    out = []
    for _ in range(from_step, cfg.max_steps):
        a = np.clip(cfg.kp * (g - p) - cfg.kd * v, -cfg.accel_limit, cfg.accel_limit)
        noise = rng.normal(0.0, cfg.process_noise, size=2)
        v = v + cfg.dt * a + noise
        p = p + cfg.dt * v
        out.append(p.copy())
    return np.asarray(out)
