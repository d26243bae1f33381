"""Coupling-flow likelihood detector with masking augmentation and weighting.

A stack of affine coupling layers maps a flattened, fixed-length
(state, action) tensor to a standard-normal latent. Each layer transforms the
even- or odd-indexed half of the vector (alternating per layer) with scales
and shifts produced by a dense conditioner that sees the untouched half plus
the step-validity mask; the mask itself is never transformed. Negative log
likelihood under the change of variables is both the training loss and the
anomaly score.

Training draws one episode at a time, truncates it to a random length,
zero-masks the removed steps and scales the gradient update by a weight that
grows with the kept fraction, so unfinished prefixes of normal episodes are
in-distribution without letting short stubs dominate. With masking disabled
the trainer sees only complete episodes at weight 1 (the raw ablation).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict

import numpy as np

from .episodes import Dataset, Episode, NormStats, SubEpisode
from .net import Dense, Network, TrainingDiverged, mlp
from .optim import make_optimizer

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class FlowTrainConfig:
    lr: float = 8e-4
    epochs: int = 85
    k_min: int = 1
    k_max: int = 200
    w0: float = 0.1
    masking_enabled: bool = True
    n_layers: int = 8
    cond_hidden: int = 64
    cond_activation: str = "tanh"
    scale_cap: float = 3.0
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.k_min < self.k_max:
            raise ValueError(f"need 1 <= k_min < k_max, got ({self.k_min}, {self.k_max})")
        if not 0 < self.w0 <= 1:
            raise ValueError(f"need 0 < w0 <= 1, got {self.w0}")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.n_layers < 1:
            raise ValueError("need at least one coupling layer")
        if self.scale_cap <= 0:
            raise ValueError("scale_cap must be positive")


def sample_weight(k_len: int, k_min: int, k_max: int, w0: float) -> float:
    """Update weight for a truncated sample: root of the kept fraction, floored.

    0 at the minimum length before flooring, exactly 1 for a full episode;
    the root softens the penalty on mid-length prefixes.
    """
    if not k_min <= k_len <= k_max:
        raise ValueError(f"k_len={k_len} outside [{k_min}, {k_max}]")
    if k_max == k_min:
        return 1.0
    return max(math.sqrt((k_len - k_min) / (k_max - k_min)), w0)


def masked_flow_input(states: np.ndarray, actions: np.ndarray, k_len: int,
                      length: int) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (length * (n_s + n_a),) tensor plus its 0/1 step mask.

    Steps at index >= k_len are exactly zero whatever the inputs held there.
    """
    states = np.asarray(states, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    t = states.shape[0]
    if not 1 <= k_len <= min(t, length):
        raise ValueError(f"k_len={k_len} out of range [1, {min(t, length)}]")
    n_s, n_a = states.shape[1], actions.shape[1]
    out = np.zeros((length, n_s + n_a), dtype=np.float64)
    out[:k_len, :n_s] = states[:k_len]
    out[:k_len, n_s:] = actions[:k_len]
    mask = np.zeros(length, dtype=np.float64)
    mask[:k_len] = 1.0
    return out.ravel(), mask


def mask_subepisode(episode: Episode, k_len: int, k_max: int
                    ) -> tuple[np.ndarray, np.ndarray]:
    """Masked flattened tensor of an episode's leading ``k_len`` steps (raw values)."""
    return masked_flow_input(episode.states, episode.actions, k_len, k_max)


class FlowModel:
    """Invertible map from data space to a standard-normal latent.

    ``params`` is one flat float64 vector spanning every conditioner, so the
    literal update rule theta := theta - lr * w * grad applies to the whole
    model at once.
    """

    def __init__(self, n_s: int, n_a: int, length: int, config: FlowTrainConfig,
                 norm_stats: NormStats, params: np.ndarray | None = None,
                 rng: np.random.Generator | None = None):
        self.n_s = n_s
        self.n_a = n_a
        self.length = length
        self.config = config
        self.norm_stats = norm_stats
        self.dim = length * (n_s + n_a)
        if self.dim < 2:
            raise ValueError("flow needs at least 2 data dimensions")
        self.scale_cap = config.scale_cap
        self.train_log: dict = {}

        idx = np.arange(self.dim)
        self._trans_idx = []
        self._keep_idx = []
        cond_layers = []
        for i in range(config.n_layers):
            trans = idx[idx % 2 == i % 2]
            keep = idx[idx % 2 != i % 2]
            self._trans_idx.append(trans)
            self._keep_idx.append(keep)
            cond_layers.append(
                mlp([keep.size + length, config.cond_hidden, config.cond_hidden,
                     2 * trans.size], activation=config.cond_activation)
            )

        sizes = [sum(l.n_params for l in layers) for layers in cond_layers]
        total = int(sum(sizes))
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self._slices = [slice(offsets[i], offsets[i + 1]) for i in range(len(sizes))]
        if params is None:
            params = np.zeros(total, dtype=np.float64)
        elif params.shape != (total,):
            raise ValueError(f"params buffer has shape {params.shape}, need ({total},)")
        self.params = params
        self.conditioners = [
            Network(layers, params=self.params[sl])
            for layers, sl in zip(cond_layers, self._slices)
        ]
        if rng is not None:
            for net in self.conditioners:
                for i, layer in enumerate(net.layers):
                    if layer.n_params:
                        layer.init_params(net.layer_params(i), rng)
                # Zeroing the output layer makes the whole flow start as the
                # identity map (log-scale and shift both zero).
                net.layer_params(len(net.layers) - 1)[:] = 0.0

    @property
    def n_params(self) -> int:
        return self.params.size

    @property
    def kind(self) -> str:
        return "wm-flow" if self.config.masking_enabled else "raw-flow"

    def config_echo(self) -> dict:
        return asdict(self.config)

    # -- bijection ---------------------------------------------------------

    def _prep(self, x: np.ndarray, mask: np.ndarray | None):
        x = np.asarray(x, dtype=np.float64)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.dim:
            raise ValueError(f"input has dimension {x.shape[1]}, flow expects {self.dim}")
        if mask is None:
            mask = np.ones((x.shape[0], self.length), dtype=np.float64)
        else:
            mask = np.asarray(mask, dtype=np.float64)
            if mask.ndim == 1:
                mask = np.broadcast_to(mask, (x.shape[0], self.length)).copy()
        if not np.isfinite(x).all():
            raise ValueError("non-finite input to flow")
        return x, mask, squeeze

    def _cond(self, i: int, keep: np.ndarray, mask: np.ndarray, cached: bool):
        cond_in = np.concatenate([keep, mask], axis=1)
        if cached:
            out, cache = self.conditioners[i].forward_cached(cond_in)
        else:
            out, cache = self.conditioners[i].forward(cond_in), None
        n_trans = self._trans_idx[i].size
        raw = out[:, :n_trans]
        shift = out[:, n_trans:]
        th = np.tanh(raw / self.scale_cap)
        log_s = self.scale_cap * th
        return log_s, shift, th, cache

    def forward(self, x: np.ndarray, mask: np.ndarray | None = None):
        """Map data to latent; returns (z, logdet) with logdet the sum of log-scales."""
        x, mask, squeeze = self._prep(x, mask)
        z = x.copy()
        logdet = np.zeros(x.shape[0])
        for i in range(len(self.conditioners)):
            log_s, shift, _, _ = self._cond(i, z[:, self._keep_idx[i]], mask, cached=False)
            z[:, self._trans_idx[i]] = z[:, self._trans_idx[i]] * np.exp(log_s) + shift
            logdet += log_s.sum(axis=1)
        if not np.isfinite(z).all():
            raise TrainingDiverged("non-finite latent in flow forward pass")
        if squeeze:
            return z[0], float(logdet[0])
        return z, logdet

    def inverse(self, z: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
        z, mask, squeeze = self._prep(z, mask)
        x = z.copy()
        for i in range(len(self.conditioners) - 1, -1, -1):
            log_s, shift, _, _ = self._cond(i, x[:, self._keep_idx[i]], mask, cached=False)
            x[:, self._trans_idx[i]] = (x[:, self._trans_idx[i]] - shift) * np.exp(-log_s)
        if squeeze:
            return x[0]
        return x

    # -- likelihood --------------------------------------------------------

    def nll(self, x: np.ndarray, mask: np.ndarray | None = None):
        """Negative log likelihood per sample: 0.5||z||^2 + 0.5 d ln(2 pi) - logdet."""
        squeeze = np.asarray(x).ndim == 1
        z, logdet = self.forward(x, mask)
        if squeeze:
            return float(0.5 * np.sum(z * z) + 0.5 * self.dim * LOG_2PI - logdet)
        return 0.5 * np.sum(z * z, axis=1) + 0.5 * self.dim * LOG_2PI - logdet

    def nll_and_grad(self, x: np.ndarray, mask: np.ndarray | None = None):
        """Per-sample NLL values and the parameter gradient of their mean."""
        x, mask, _ = self._prep(x, mask)
        b = x.shape[0]
        z = x.copy()
        logdet = np.zeros(b)
        caches = []
        for i in range(len(self.conditioners)):
            trans_in = z[:, self._trans_idx[i]].copy()
            log_s, shift, th, cache = self._cond(i, z[:, self._keep_idx[i]], mask,
                                                 cached=True)
            e = np.exp(log_s)
            z[:, self._trans_idx[i]] = trans_in * e + shift
            logdet += log_s.sum(axis=1)
            caches.append((trans_in, th, e, cache))

        nll_vals = 0.5 * np.sum(z * z, axis=1) + 0.5 * self.dim * LOG_2PI - logdet
        if not np.isfinite(nll_vals).all():
            raise TrainingDiverged("non-finite flow loss")

        grad = np.zeros(self.n_params)
        g = z / b
        for i in range(len(self.conditioners) - 1, -1, -1):
            trans_in, th, e, cache = caches[i]
            g_keep = g[:, self._keep_idx[i]]
            g_trans = g[:, self._trans_idx[i]]
            d_trans_in = g_trans * e
            # scale gradient: through z_trans plus the direct -logdet term
            d_log_s = g_trans * trans_in * e - 1.0 / b
            d_raw = d_log_s * (1.0 - th * th)
            d_out = np.concatenate([d_raw, g_trans], axis=1)
            d_cond_in, dp = self.conditioners[i].backward(d_out, cache)
            grad[self._slices[i]] = dp
            g_new = np.empty_like(g)
            g_new[:, self._keep_idx[i]] = g_keep + d_cond_in[:, : self._keep_idx[i].size]
            g_new[:, self._trans_idx[i]] = d_trans_in
            g = g_new
        return nll_vals, grad

    # -- scoring -----------------------------------------------------------

    def score(self, sub: SubEpisode) -> float:
        if sub.k_len > self.length:
            raise ValueError(
                f"sub-episode length {sub.k_len} exceeds flow length {self.length}"
            )
        s = self.norm_stats.norm_states(sub.states)
        a = self.norm_stats.norm_actions(sub.actions)
        x, mask = masked_flow_input(s, a, sub.k_len, self.length)
        return float(self.nll(x, mask))

    def score_prefixes(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        t = min(states.shape[0], self.length)
        s = self.norm_stats.norm_states(states[:t])
        a = self.norm_stats.norm_actions(actions[:t])
        full, _ = masked_flow_input(s, a, t, self.length)
        grid = full.reshape(self.length, self.n_s + self.n_a)
        xs = np.zeros((t, self.dim))
        masks = np.zeros((t, self.length))
        for k in range(1, t + 1):
            partial = grid.copy()
            partial[k:] = 0.0
            xs[k - 1] = partial.ravel()
            masks[k - 1, :k] = 1.0
        return self.nll(xs, masks)

    # -- persistence -------------------------------------------------------

    def to_record(self) -> dict:
        import base64

        return {
            "kind": self.kind,
            "config": asdict(self.config),
            "n_s": self.n_s,
            "n_a": self.n_a,
            "length": self.length,
            "norm_stats": self.norm_stats.to_dict(),
            "params": base64.b64encode(self.params.astype("<f8").tobytes()).decode("ascii"),
            "train_log": self.train_log,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "FlowModel":
        import base64

        cfg = FlowTrainConfig(**rec["config"])
        params = np.frombuffer(base64.b64decode(rec["params"]), dtype="<f8").astype(np.float64)
        model = cls(rec["n_s"], rec["n_a"], rec["length"], cfg,
                    NormStats.from_dict(rec["norm_stats"]), params=params.copy())
        model.train_log = rec.get("train_log", {})
        return model


# Module-level views of the model operations, for symmetry with the other
# detector modules.

def flow_forward(model: FlowModel, x: np.ndarray, mask: np.ndarray | None = None):
    return model.forward(x, mask)


def flow_inverse(model: FlowModel, z: np.ndarray, mask: np.ndarray | None = None):
    return model.inverse(z, mask)


def nll(model: FlowModel, x: np.ndarray, mask: np.ndarray | None = None):
    return model.nll(x, mask)


def flow_score(model: FlowModel, sub: SubEpisode) -> float:
    return model.score(sub)


def train_wm_flow(data: Dataset, cfg: FlowTrainConfig) -> FlowModel:
    """Fit the flow on success episodes, one sampled truncation per episode per epoch.

    Each step samples an episode, draws a kept length uniformly between the
    configured minimum and the episode's own (capped) length, masks the rest,
    and applies the weighted gradient update. The weight treats the episode's
    own length as the full-episode reference so every complete episode trains
    at weight 1. With masking disabled the kept length is always the full
    episode.
    """
    episodes = data.successes()
    if not episodes:
        raise ValueError("empty dataset: no success-labeled episodes to train on")
    length = min(cfg.k_max, data.k_max)

    init_seed, sample_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    model = FlowModel(data.n_s, data.n_a, length, cfg, data.norm_stats,
                      rng=np.random.default_rng(init_seed))
    opt = make_optimizer(cfg.optimizer, cfg.lr, model.n_params)
    rng = np.random.default_rng(sample_seed)

    normalized = [
        (data.norm_stats.norm_states(ep.states), data.norm_stats.norm_actions(ep.actions))
        for ep in episodes
    ]

    epoch_losses = []
    min_masked_fraction = 1.0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(episodes))
        total = 0.0
        for idx in order:
            s, a = normalized[idx]
            t_eff = min(s.shape[0], length)
            if cfg.masking_enabled:
                lo = min(cfg.k_min, t_eff)
                k_len = int(rng.integers(lo, t_eff + 1))
                w = sample_weight(k_len, min(cfg.k_min, t_eff), t_eff, cfg.w0)
            else:
                k_len = t_eff
                w = 1.0
            min_masked_fraction = min(min_masked_fraction, k_len / t_eff)
            x, mask = masked_flow_input(s, a, k_len, length)
            nll_vals, grad = model.nll_and_grad(x[None, :], mask[None, :])
            total += float(nll_vals[0])
            opt.step(model.params, w * grad)
        epoch_losses.append(total / len(episodes))

    model.train_log = {
        "epoch_nll": epoch_losses,
        "min_trained_fraction": min_masked_fraction,
    }
    return model
