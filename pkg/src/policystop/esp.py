"""Ensemble state-prediction detector.

K independently initialized and independently trained networks predict the
next state; the anomaly score is how much their predictions spread apart.
Two input modes:

* ``single_step``: an MLP maps one (state, action) pair to the next state.
  A sub-episode is scored by the maximum spread over its transitions, which
  makes the score non-decreasing in prefix length.
* ``sub_trajectory``: a CNN consumes the whole prefix (zero-padded to the
  dataset maximum length, with a validity-mask channel) and predicts the
  next state; a sub-episode is scored with one evaluation.

All inputs, targets and spreads live in normalized space so every state
dimension contributes comparably.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .episodes import Dataset, Episode, NormStats, SubEpisode
from .net import Conv1d, Dense, Flatten, Network, Relu, mlp, mse_loss_and_grad
from .optim import make_optimizer

MODES = ("single_step", "sub_trajectory")
SPREAD_ESTIMATORS = ("scaled", "sample")


@dataclass(frozen=True)
class EspConfig:
    k_ens: int = 5
    mode: str = "single_step"
    t_in: int = 1              # input horizon in states; sub_trajectory uses the full prefix
    t_out: int = 1
    epochs: int = 60
    batch_size: int = 32
    hidden: int = 64           # MLP width (single_step)
    conv_channels: int = 16    # CNN width (sub_trajectory)
    dense_hidden: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    # "scaled" divides the root of the summed squared deviations by K - 1;
    # "sample" is the conventional sample standard deviation.
    spread_estimator: str = "scaled"
    seed: int = 0

    def __post_init__(self):
        if self.k_ens < 2:
            raise ValueError("ensemble needs at least 2 members")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.mode == "single_step" and not (self.t_in == 1 and self.t_out == 1):
            raise ValueError("single_step mode requires t_in = t_out = 1")
        if self.mode == "sub_trajectory" and self.t_out != 1:
            raise ValueError("sub_trajectory mode requires t_out = 1")
        if self.spread_estimator not in SPREAD_ESTIMATORS:
            raise ValueError(f"spread_estimator must be one of {SPREAD_ESTIMATORS}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def ensemble_spread(predictions: np.ndarray, estimator: str = "scaled") -> float:
    """Total per-dimension spread of a (K, D) block of member predictions.

    Per dimension the deviations from the ensemble mean are squared, summed
    over members and rooted; the "scaled" estimator divides that root by
    K - 1, the "sample" estimator divides the sum by K - 1 before rooting.
    The result is the sum over dimensions.
    """
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.ndim == 3:  # (K, T_out, n_s) blocks collapse to dims
        preds = preds.reshape(preds.shape[0], -1)
    k = preds.shape[0]
    if k < 2:
        raise ValueError("spread needs at least 2 members")
    dev = preds - preds.mean(axis=0, keepdims=True)
    ss = np.sum(dev * dev, axis=0)
    if estimator == "scaled":
        per_dim = np.sqrt(ss) / (k - 1)
    elif estimator == "sample":
        per_dim = np.sqrt(ss / (k - 1))
    else:
        raise ValueError(f"unknown estimator {estimator!r}")
    return float(np.sum(per_dim))


def build_subtraj_input(states: np.ndarray, actions: np.ndarray, k_len: int,
                        k_max: int) -> np.ndarray:
    """(n_s + n_a + 1, k_max) channels-first tensor for the CNN members.

    Steps at index >= k_len are zeroed regardless of the provided arrays and
    the trailing channel is a 0/1 validity mask, so the network output
    depends only on the kept steps.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    if not 1 <= k_len <= k_max:
        raise ValueError(f"k_len={k_len} out of range [1, {k_max}]")
    n = min(k_len, states.shape[0])
    n_s, n_a = states.shape[1], actions.shape[1]
    out = np.zeros((n_s + n_a + 1, k_max), dtype=np.float64)
    out[:n_s, :n] = states[:n].T
    out[n_s : n_s + n_a, :n] = actions[:n].T
    out[-1, :k_len] = 1.0
    return out


@dataclass
class EnsembleModel:
    members: list[Network]
    config: EspConfig
    norm_stats: NormStats
    n_s: int
    n_a: int
    k_max: int
    train_log: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "esp-single" if self.config.mode == "single_step" else "esp-subtraj"

    def config_echo(self) -> dict:
        return asdict(self.config)

    # -- prediction --------------------------------------------------------

    def _member_inputs_single(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        s = self.norm_stats.norm_states(states)
        a = self.norm_stats.norm_actions(actions)
        return np.concatenate([s, a], axis=1)

    def _member_inputs_subtraj(self, states: np.ndarray, actions: np.ndarray,
                               k_len: int) -> np.ndarray:
        s = self.norm_stats.norm_states(states)
        a = self.norm_stats.norm_actions(actions)
        x = build_subtraj_input(s, a, k_len, self.k_max)
        return x[None, :, :]

    def predict_future(self, member_index: int, states: np.ndarray,
                       actions: np.ndarray) -> np.ndarray:
        """One member's normalized next-state prediction for a raw input block."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        net = self.members[member_index]
        if self.config.mode == "single_step":
            if states.shape[0] != 1 or actions.shape[0] != 1:
                raise ValueError("single_step mode takes exactly one state and one action")
            return net.forward(self._member_inputs_single(states, actions))
        x = self._member_inputs_subtraj(states, actions, k_len=states.shape[0])
        return net.forward(x)

    def _all_predictions(self, x: np.ndarray) -> np.ndarray:
        return np.stack([net.forward(x) for net in self.members])  # (K, B, n_s)

    def uncertainty(self, states: np.ndarray, actions: np.ndarray) -> float:
        """Ensemble spread for one input block (raw, unnormalized arguments)."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        if self.config.mode == "single_step":
            x = self._member_inputs_single(states, actions)
        else:
            x = self._member_inputs_subtraj(states, actions, k_len=states.shape[0])
        preds = self._all_predictions(x)[:, 0, :]
        return ensemble_spread(preds, self.config.spread_estimator)

    # -- scoring -----------------------------------------------------------

    def _pair_spreads(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Spread of every (s_t, a_t) transition input, vectorized over t."""
        x = self._member_inputs_single(states, actions)
        preds = self._all_predictions(x)  # (K, T, n_s)
        k = preds.shape[0]
        dev = preds - preds.mean(axis=0, keepdims=True)
        ss = np.sum(dev * dev, axis=0)  # (T, n_s)
        if self.config.spread_estimator == "scaled":
            per_dim = np.sqrt(ss) / (k - 1)
        else:
            per_dim = np.sqrt(ss / (k - 1))
        return per_dim.sum(axis=1)

    def score(self, sub: SubEpisode) -> float:
        if self.config.mode == "single_step":
            # A transition needs its successor inside the prefix; one lone
            # step carries no evidence, so it scores 0.
            if sub.k_len < 2:
                return 0.0
            spreads = self._pair_spreads(sub.states[:-1], sub.actions[:-1])
            return float(np.max(spreads))
        return self.uncertainty(sub.states, sub.actions)

    def score_prefixes(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Scores of every prefix length 1..T of one episode."""
        t = states.shape[0]
        if self.config.mode == "single_step":
            scores = np.zeros(t)
            if t >= 2:
                spreads = self._pair_spreads(states[:-1], actions[:-1])
                scores[1:] = np.maximum.accumulate(spreads)
            return scores
        s = self.norm_stats.norm_states(states)
        a = self.norm_stats.norm_actions(actions)
        batch = np.stack([build_subtraj_input(s, a, k, self.k_max) for k in range(1, t + 1)])
        preds = self._all_predictions(batch)  # (K, T, n_s)
        k = preds.shape[0]
        dev = preds - preds.mean(axis=0, keepdims=True)
        ss = np.sum(dev * dev, axis=0)
        if self.config.spread_estimator == "scaled":
            per_dim = np.sqrt(ss) / (k - 1)
        else:
            per_dim = np.sqrt(ss / (k - 1))
        return per_dim.sum(axis=1)

    # -- persistence -------------------------------------------------------

    def to_record(self) -> dict:
        import base64

        return {
            "kind": self.kind,
            "config": asdict(self.config),
            "n_s": self.n_s,
            "n_a": self.n_a,
            "k_max": self.k_max,
            "norm_stats": self.norm_stats.to_dict(),
            "arch": self.members[0].descriptors(),
            "member_params": [
                base64.b64encode(net.params.astype("<f8").tobytes()).decode("ascii")
                for net in self.members
            ],
            "train_log": self.train_log,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "EnsembleModel":
        import base64

        from .net import network_from_descriptors

        cfg = EspConfig(**rec["config"])
        members = []
        for blob in rec["member_params"]:
            params = np.frombuffer(base64.b64decode(blob), dtype="<f8").astype(np.float64)
            members.append(network_from_descriptors(rec["arch"], params=params.copy()))
        return cls(
            members=members,
            config=cfg,
            norm_stats=NormStats.from_dict(rec["norm_stats"]),
            n_s=rec["n_s"],
            n_a=rec["n_a"],
            k_max=rec["k_max"],
            train_log=rec.get("train_log", {}),
        )


def _member_layers(cfg: EspConfig, n_s: int, n_a: int, k_max: int) -> list:
    if cfg.mode == "single_step":
        return mlp([n_s + n_a, cfg.hidden, cfg.hidden, n_s], activation="relu")
    c_in = n_s + n_a + 1
    return [
        Conv1d(c_in, cfg.conv_channels, kernel=3),
        Relu(),
        Conv1d(cfg.conv_channels, cfg.conv_channels, kernel=3),
        Relu(),
        Flatten(),
        Dense(cfg.conv_channels * k_max, cfg.dense_hidden),
        Relu(),
        Dense(cfg.dense_hidden, n_s),
    ]


def _usable_episodes(data: Dataset) -> tuple[list[Episode], int]:
    usable, skipped = [], 0
    for ep in data.successes():
        if ep.length >= 2:
            usable.append(ep)
        else:
            skipped += 1
    return usable, skipped


def _sample_batch_single(episodes, stats: NormStats, size: int,
                         rng: np.random.Generator):
    xs = np.zeros((size, episodes[0].n_s + episodes[0].n_a))
    ys = np.zeros((size, episodes[0].n_s))
    for b in range(size):
        ep = episodes[int(rng.integers(len(episodes)))]
        k = int(rng.integers(0, ep.length - 1))  # target s_{k+1} must exist
        s = stats.norm_states(ep.states[k])
        a = stats.norm_actions(ep.actions[k])
        xs[b] = np.concatenate([s, a])
        ys[b] = stats.norm_states(ep.states[k + 1])
    return xs, ys


def _sample_batch_subtraj(episodes, stats: NormStats, size: int, k_max: int,
                          rng: np.random.Generator):
    n_s, n_a = episodes[0].n_s, episodes[0].n_a
    xs = np.zeros((size, n_s + n_a + 1, k_max))
    ys = np.zeros((size, n_s))
    for b in range(size):
        ep = episodes[int(rng.integers(len(episodes)))]
        k = int(rng.integers(0, ep.length - 1))
        s = stats.norm_states(ep.states[: k + 1])
        a = stats.norm_actions(ep.actions[: k + 1])
        xs[b] = build_subtraj_input(s, a, k + 1, k_max)
        ys[b] = stats.norm_states(ep.states[k + 1])
    return xs, ys


def train_ensemble(data: Dataset, cfg: EspConfig) -> EnsembleModel:
    """Fit the K members independently on freshly sampled transition windows.

    Members get distinct initialization and sampling streams derived from the
    config seed, so training is deterministic and member order is irrelevant.
    Success-labeled episodes form the training pool; episodes too short to
    contain a transition are skipped and counted.
    """
    episodes, skipped = _usable_episodes(data)
    if not episodes:
        raise ValueError("no usable training episodes (all too short or none labeled success)")
    stats = data.norm_stats
    steps_per_epoch = max(1, len(episodes) // cfg.batch_size)

    members: list[Network] = []
    final_losses: list[float] = []
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.k_ens)
    for member_seed in seeds:
        rng = np.random.default_rng(member_seed)
        net = Network(_member_layers(cfg, data.n_s, data.n_a, data.k_max), rng=rng)
        opt = make_optimizer(cfg.optimizer, cfg.lr, net.n_params)
        loss = float("nan")
        for _ in range(cfg.epochs):
            for _ in range(steps_per_epoch):
                if cfg.mode == "single_step":
                    x, y = _sample_batch_single(episodes, stats, cfg.batch_size, rng)
                else:
                    x, y = _sample_batch_subtraj(episodes, stats, cfg.batch_size,
                                                 data.k_max, rng)
                loss, grad = mse_loss_and_grad(net, x, y)
                opt.step(net.params, grad)
        members.append(net)
        final_losses.append(loss)

    return EnsembleModel(
        members=members,
        config=cfg,
        norm_stats=stats,
        n_s=data.n_s,
        n_a=data.n_a,
        k_max=data.k_max,
        train_log={"final_losses": final_losses, "skipped_episodes": skipped},
    )
