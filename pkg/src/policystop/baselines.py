"""Comparison detectors: a VAE scorer and a sliding-window reconstructor.

The VAE encodes the full padded episode tensor with a small CNN, decodes from
the latent mean at score time (no sampling, so scores are reproducible) and
uses reconstruction MSE as the anomaly score. The windowed baseline fits a
dense autoencoder on fixed-width step windows; a prefix scores as the worst
reconstruction over every window it fully contains, which makes the score
non-decreasing as the prefix grows.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .episodes import Dataset, NormStats, SubEpisode
from .net import (Conv1d, Dense, Flatten, Network, Relu, TrainingDiverged,
                  mlp, mse_loss_and_grad)
from .optim import make_optimizer


# ---------------------------------------------------------------------------
# VAE
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VaeConfig:
    latent_dim: int = 16
    conv_channels: int = 8
    dec_hidden: int = 128
    beta: float = 1.0  # KL penalty weight
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1 or self.conv_channels < 1 or self.dec_hidden < 1:
            raise ValueError("network sizes must be positive")
        if self.beta < 0:
            raise ValueError("beta must be non-negative")


def vae_loss_and_grad(encoder: Network, decoder: Network, x_img: np.ndarray,
                      eps: np.ndarray, beta: float):
    """ELBO-style loss (summed square error + beta * KL) and both gradients.

    ``eps`` is the reparameterization draw, passed in so the loss is a
    deterministic function of the parameters (required for gradient checks
    and for reproducible training).
    """
    b = x_img.shape[0]
    x_flat = x_img.reshape(b, -1)
    enc_out, enc_caches = encoder.forward_cached(x_img)
    z_dim = enc_out.shape[1] // 2
    mean = enc_out[:, :z_dim]
    logvar = enc_out[:, z_dim:]
    std = np.exp(0.5 * logvar)
    z = mean + std * eps
    recon, dec_caches = decoder.forward_cached(z)

    diff = recon - x_flat
    recon_loss = float(np.sum(diff * diff)) / b
    kl = float(-0.5 * np.sum(1.0 + logvar - mean * mean - np.exp(logvar))) / b
    loss = recon_loss + beta * kl
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite VAE loss {loss}")

    d_recon = (2.0 / b) * diff
    d_z, grad_dec = decoder.backward(d_recon, dec_caches)
    d_mean = d_z + (beta / b) * mean
    d_logvar = d_z * eps * 0.5 * std - (beta / b) * 0.5 * (1.0 - np.exp(logvar))
    d_enc_out = np.concatenate([d_mean, d_logvar], axis=1)
    _, grad_enc = encoder.backward(d_enc_out, enc_caches)
    return loss, grad_enc, grad_dec


@dataclass
class VaeModel:
    encoder: Network
    decoder: Network
    config: VaeConfig
    norm_stats: NormStats
    n_s: int
    n_a: int
    k_max: int
    train_log: dict = field(default_factory=dict)

    kind = "vae"

    def config_echo(self) -> dict:
        return asdict(self.config)

    def _tensor(self, states: np.ndarray, actions: np.ndarray, k_len: int) -> np.ndarray:
        s = self.norm_stats.norm_states(states)
        a = self.norm_stats.norm_actions(actions)
        c = self.n_s + self.n_a
        img = np.zeros((c, self.k_max), dtype=np.float64)
        img[: self.n_s, :k_len] = s[:k_len].T
        img[self.n_s :, :k_len] = a[:k_len].T
        return img

    def reconstruct(self, img: np.ndarray) -> np.ndarray:
        """Deterministic reconstruction through the latent mean."""
        enc_out = self.encoder.forward(img[None, :, :])
        mean = enc_out[:, : self.config.latent_dim]
        return self.decoder.forward(mean)[0]

    def score(self, sub: SubEpisode) -> float:
        if sub.k_len > self.k_max:
            raise ValueError(f"sub-episode length {sub.k_len} exceeds k_max {self.k_max}")
        img = self._tensor(sub.states, sub.actions, sub.k_len)
        recon = self.reconstruct(img)
        diff = recon - img.ravel()
        return float(np.mean(diff * diff))

    def score_prefixes(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        t = min(states.shape[0], self.k_max)
        full = self._tensor(states[:t], actions[:t], t)
        imgs = np.zeros((t,) + full.shape)
        for k in range(1, t + 1):
            imgs[k - 1] = full
            imgs[k - 1, :, k:] = 0.0
        enc_out = self.encoder.forward(imgs)
        recon = self.decoder.forward(enc_out[:, : self.config.latent_dim])
        diff = recon - imgs.reshape(t, -1)
        return np.mean(diff * diff, axis=1)

    def to_record(self) -> dict:
        import base64

        return {
            "kind": self.kind,
            "config": asdict(self.config),
            "n_s": self.n_s,
            "n_a": self.n_a,
            "k_max": self.k_max,
            "norm_stats": self.norm_stats.to_dict(),
            "encoder_arch": self.encoder.descriptors(),
            "decoder_arch": self.decoder.descriptors(),
            "encoder_params": base64.b64encode(self.encoder.params.astype("<f8").tobytes()).decode("ascii"),
            "decoder_params": base64.b64encode(self.decoder.params.astype("<f8").tobytes()).decode("ascii"),
            "train_log": self.train_log,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "VaeModel":
        import base64

        from .net import network_from_descriptors

        def _net(arch_key, params_key):
            params = np.frombuffer(base64.b64decode(rec[params_key]), dtype="<f8")
            return network_from_descriptors(rec[arch_key], params=params.astype(np.float64))

        return cls(
            encoder=_net("encoder_arch", "encoder_params"),
            decoder=_net("decoder_arch", "decoder_params"),
            config=VaeConfig(**rec["config"]),
            norm_stats=NormStats.from_dict(rec["norm_stats"]),
            n_s=rec["n_s"],
            n_a=rec["n_a"],
            k_max=rec["k_max"],
            train_log=rec.get("train_log", {}),
        )


def _vae_networks(cfg: VaeConfig, c: int, k_max: int, rng: np.random.Generator):
    encoder = Network(
        [
            Conv1d(c, cfg.conv_channels, kernel=3),
            Relu(),
            Conv1d(cfg.conv_channels, cfg.conv_channels, kernel=3),
            Relu(),
            Flatten(),
            Dense(cfg.conv_channels * k_max, 2 * cfg.latent_dim),
        ],
        rng=rng,
    )
    decoder = Network(mlp([cfg.latent_dim, cfg.dec_hidden, c * k_max], activation="relu"),
                      rng=rng)
    return encoder, decoder


def train_vae(data: Dataset, cfg: VaeConfig) -> VaeModel:
    """Fit encoder/decoder on full success episodes (padded to the dataset cap)."""
    episodes = data.successes()
    if not episodes:
        raise ValueError("empty dataset: no success-labeled episodes to train on")
    c = data.n_s + data.n_a
    init_seed, sample_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    encoder, decoder = _vae_networks(cfg, c, data.k_max, np.random.default_rng(init_seed))
    model = VaeModel(encoder, decoder, cfg, data.norm_stats, data.n_s, data.n_a,
                     data.k_max)

    imgs = np.stack([
        model._tensor(ep.states, ep.actions, min(ep.length, data.k_max))
        for ep in episodes
    ])
    rng = np.random.default_rng(sample_seed)
    opt_enc = make_optimizer(cfg.optimizer, cfg.lr, encoder.n_params)
    opt_dec = make_optimizer(cfg.optimizer, cfg.lr, decoder.n_params)

    epoch_losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(episodes))
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = imgs[order[start : start + cfg.batch_size]]
            eps = rng.standard_normal((batch.shape[0], cfg.latent_dim))
            loss, g_enc, g_dec = vae_loss_and_grad(encoder, decoder, batch, eps, cfg.beta)
            total += loss * batch.shape[0]
            opt_enc.step(encoder.params, g_enc)
            opt_dec.step(decoder.params, g_dec)
        epoch_losses.append(total / len(episodes))
    model.train_log = {"epoch_loss": epoch_losses}
    return model


def vae_score(model: VaeModel, sub: SubEpisode) -> float:
    return model.score(sub)


# ---------------------------------------------------------------------------
# Windowed reconstruction baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowedConfig:
    window: int = 20
    hidden: int = 64
    epochs: int = 30
    batch_size: int = 64
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be positive")


@dataclass
class WindowedModel:
    net: Network
    config: WindowedConfig
    norm_stats: NormStats
    n_s: int
    n_a: int
    train_log: dict = field(default_factory=dict)

    kind = "windowed"

    def config_echo(self) -> dict:
        return asdict(self.config)

    def _rows(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        s = self.norm_stats.norm_states(states)
        a = self.norm_stats.norm_actions(actions)
        return np.concatenate([s, a], axis=1)

    def _window_errors(self, rows: np.ndarray) -> np.ndarray:
        w = self.config.window
        n_win = rows.shape[0] - w + 1
        windows = np.stack([rows[i : i + w].ravel() for i in range(n_win)])
        recon = self.net.forward(windows)
        diff = recon - windows
        return np.mean(diff * diff, axis=1)

    def _padded_window_error(self, rows: np.ndarray) -> float:
        w = self.config.window
        pad = np.zeros((w, rows.shape[1]))
        pad[: rows.shape[0]] = rows
        x = pad.ravel()[None, :]
        diff = self.net.forward(x) - x
        return float(np.mean(diff * diff))

    def score(self, sub: SubEpisode) -> float:
        rows = self._rows(sub.states, sub.actions)
        if sub.k_len < self.config.window:
            # Too short for a real window; score one zero-padded window.
            return self._padded_window_error(rows)
        return float(np.max(self._window_errors(rows)))

    def score_prefixes(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        rows = self._rows(states, actions)
        t = rows.shape[0]
        w = self.config.window
        scores = np.zeros(t)
        for k in range(1, min(w, t + 1)):
            scores[k - 1] = self._padded_window_error(rows[:k])
        if t >= w:
            errors = self._window_errors(rows)
            scores[w - 1 :] = np.maximum.accumulate(errors)
        return scores

    def to_record(self) -> dict:
        import base64

        return {
            "kind": self.kind,
            "config": asdict(self.config),
            "n_s": self.n_s,
            "n_a": self.n_a,
            "norm_stats": self.norm_stats.to_dict(),
            "arch": self.net.descriptors(),
            "params": base64.b64encode(self.net.params.astype("<f8").tobytes()).decode("ascii"),
            "train_log": self.train_log,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "WindowedModel":
        import base64

        from .net import network_from_descriptors

        params = np.frombuffer(base64.b64decode(rec["params"]), dtype="<f8")
        return cls(
            net=network_from_descriptors(rec["arch"], params=params.astype(np.float64)),
            config=WindowedConfig(**rec["config"]),
            norm_stats=NormStats.from_dict(rec["norm_stats"]),
            n_s=rec["n_s"],
            n_a=rec["n_a"],
            train_log=rec.get("train_log", {}),
        )


def train_windowed(data: Dataset, cfg: WindowedConfig) -> WindowedModel:
    """Fit the window autoencoder on every full window of the success episodes."""
    episodes = data.successes()
    if not episodes:
        raise ValueError("empty dataset: no success-labeled episodes to train on")
    c = data.n_s + data.n_a
    w = cfg.window

    init_seed, sample_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    net = Network(mlp([w * c, cfg.hidden, w * c], activation="relu"),
                  rng=np.random.default_rng(init_seed))
    model = WindowedModel(net, cfg, data.norm_stats, data.n_s, data.n_a)

    rows_list, skipped = [], 0
    for ep in episodes:
        if ep.length < w:
            skipped += 1
            continue
        rows = model._rows(ep.states, ep.actions)
        for i in range(ep.length - w + 1):
            rows_list.append(rows[i : i + w].ravel())
    if not rows_list:
        raise ValueError(f"no training windows: every episode shorter than window {w}")
    windows = np.stack(rows_list)

    rng = np.random.default_rng(sample_seed)
    opt = make_optimizer(cfg.optimizer, cfg.lr, net.n_params)
    epoch_losses = []
    for _ in range(cfg.epochs):
        order = rng.permutation(windows.shape[0])
        total = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = windows[order[start : start + cfg.batch_size]]
            loss, grad = mse_loss_and_grad(net, batch, batch)
            total += loss * batch.shape[0]
            opt.step(net.params, grad)
        epoch_losses.append(total / windows.shape[0])
    model.train_log = {"epoch_loss": epoch_losses, "skipped_episodes": skipped,
                       "n_windows": int(windows.shape[0])}
    return model


def windowed_score(model: WindowedModel, sub: SubEpisode) -> float:
    return model.score(sub)
