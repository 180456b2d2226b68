"""Small convolutional audio codec with residual vector quantization.

The codec supplies two representations of a waveform:

* tokens: ``(n_layers, frames)`` codebook indices, of which the first ``n``
  layers form the coarse discrete target of the language model;
* latents: ``(frames, latent_dim)`` sums of selected codewords, either over
  the first ``n`` layers or over all of them.

Entry 0 of every codebook is pinned to the zero vector. Picking it leaves
the residual unchanged, so the nearest-codeword search can never increase
the residual norm.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, DataError, NotFitted, ShapeError
from .signal import SAMPLE_RATE, StftConfig, stft

logger = logging.getLogger(__name__)


@dataclass
class CodecConfig:
    n_layers: int = 4
    codebook_size: int = 256
    latent_dim: int = 128
    frame_hop: int = 256
    strides: tuple = (2, 4, 4, 8)
    channels: int = 16
    max_channels: int = 128
    commitment: float = 0.25
    ema_decay: float = 0.95
    dead_code_threshold: float = 0.5
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        if self.n_layers < 1:
            raise ConfigError("n_layers must be >= 1")
        if self.codebook_size < 2:
            raise ConfigError("codebook_size must be >= 2")
        if self.latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if int(np.prod(self.strides)) != self.frame_hop:
            raise ConfigError(f"strides {self.strides} do not multiply to frame_hop {self.frame_hop}")
        if any(s % 2 for s in self.strides):
            raise ConfigError("strides must be even")

    def to_dict(self):
        d = asdict(self)
        d["strides"] = list(self.strides)
        return d


class Quantized(NamedTuple):
    indices: torch.Tensor      # (N, K) long
    quantized: torch.Tensor    # (N, dim)
    residuals: list            # K tensors (N, dim): residual after each layer


def quantize_residual(x: torch.Tensor, codebooks) -> Quantized:
    """Greedy residual quantization of ``x`` (N, dim) against a list of codebooks.

    Layer i picks the codeword nearest (L2) to the residual left by layer
    i - 1; ties go to the lowest index.
    """
    if len(codebooks) == 0:
        raise ConfigError("need at least one codebook")
    residual = x
    quantized = torch.zeros_like(x)
    indices, residuals = [], []
    for cb in codebooks:
        cb = torch.as_tensor(cb, dtype=x.dtype, device=x.device)
        dist = torch.cdist(residual, cb, compute_mode="donot_use_mm_for_euclid_dist")
        idx = dist.argmin(dim=-1)
        chosen = cb[idx]
        quantized = quantized + chosen
        residual = residual - chosen
        indices.append(idx)
        residuals.append(residual)
    return Quantized(torch.stack(indices, dim=-1), quantized, residuals)


def straight_through(z: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Forward value ``q``, gradient passed to ``z`` unchanged."""
    return z + (q - z).detach()


def _kmeans(x: torch.Tensor, k: int, iters: int, gen: torch.Generator) -> torch.Tensor:
    n = x.shape[0]
    if n >= k:
        centers = x[torch.randperm(n, generator=gen)[:k]].clone()
    else:
        centers = x[torch.randint(n, (k,), generator=gen)].clone()
    for _ in range(iters):
        assign = torch.cdist(x, centers).argmin(-1)
        sums = torch.zeros_like(centers).index_add_(0, assign, x)
        counts = torch.bincount(assign, minlength=k).to(x.dtype)
        filled = counts > 0
        centers[filled] = sums[filled] / counts[filled, None]
    return centers


class ResidualVQ(nn.Module):
    """EMA-trained residual vector quantizer with k-means initialization."""

    def __init__(self, n_layers: int, codebook_size: int, dim: int, decay: float = 0.95,
                 dead_code_threshold: float = 0.5):
        super().__init__()
        self.n_layers = n_layers
        self.codebook_size = codebook_size
        self.decay = decay
        self.dead_code_threshold = dead_code_threshold
        self.register_buffer("codebooks", torch.zeros(n_layers, codebook_size, dim))
        self.register_buffer("ema_count", torch.ones(n_layers, codebook_size))
        self.register_buffer("ema_sum", torch.zeros(n_layers, codebook_size, dim))
        self.register_buffer("initialized", torch.tensor(False))

    @torch.no_grad()
    def init_kmeans(self, z: torch.Tensor, iters: int = 10, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        residual = z
        for i in range(self.n_layers):
            centers = _kmeans(residual, self.codebook_size - 1, iters, gen)
            self.codebooks[i, 0] = 0.0
            self.codebooks[i, 1:] = centers
            self.ema_sum[i] = self.codebooks[i]
            self.ema_count[i] = 1.0
            residual = residual - quantize_residual(residual, [self.codebooks[i]]).quantized
        self.initialized.fill_(True)

    @torch.no_grad()
    def ema_update(self, q: Quantized, z: torch.Tensor):
        residual_in = z
        for i in range(self.n_layers):
            idx = q.indices[:, i]
            onehot = F.one_hot(idx, self.codebook_size).to(z.dtype)
            count = onehot.sum(0)
            total = onehot.T @ residual_in
            self.ema_count[i].mul_(self.decay).add_(count, alpha=1 - self.decay)
            self.ema_sum[i].mul_(self.decay).add_(total, alpha=1 - self.decay)
            n = self.ema_count[i].sum()
            smoothed = (self.ema_count[i] + 1e-5) / (n + self.codebook_size * 1e-5) * n
            self.codebooks[i] = self.ema_sum[i] / smoothed[:, None]
            dead = self.ema_count[i] < self.dead_code_threshold
            dead[0] = False
            n_dead = int(dead.sum())
            if n_dead:
                pick = torch.randint(residual_in.shape[0], (n_dead,))
                self.codebooks[i, dead] = residual_in[pick]
                self.ema_sum[i, dead] = residual_in[pick]
                self.ema_count[i, dead] = 1.0
            self.codebooks[i, 0] = 0.0
            self.ema_sum[i, 0] = 0.0
            residual_in = q.residuals[i]

    def forward(self, z: torch.Tensor, n: int | None = None) -> Quantized:
        cbs = self.codebooks if n is None else self.codebooks[:n]
        return quantize_residual(z, list(cbs))

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        """Sum of codewords for ``tokens`` shaped (..., n, frames) -> (..., frames, dim)."""
        n = tokens.shape[-2]
        if n > self.n_layers:
            raise ShapeError(f"{n} token layers > {self.n_layers} codebooks")
        out = 0
        for i in range(n):
            out = out + self.codebooks[i][tokens[..., i, :]]
        return out


class _ResUnit(nn.Module):
    def __init__(self, ch: int, dilation: int = 1):
        super().__init__()
        self.conv1 = nn.Conv1d(ch, ch, 7, padding=3 * dilation, dilation=dilation)
        self.conv2 = nn.Conv1d(ch, ch, 1)

    def forward(self, x):
        return x + self.conv2(F.elu(self.conv1(F.elu(x))))


def _stage_channels(cfg: CodecConfig) -> list[int]:
    return [min(cfg.channels * 2 ** i, cfg.max_channels) for i in range(len(cfg.strides) + 1)]


class CodecEncoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        chs = _stage_channels(cfg)
        layers = [nn.Conv1d(1, chs[0], 7, padding=3)]
        for i, s in enumerate(cfg.strides):
            layers += [_ResUnit(chs[i]), nn.ELU(),
                       nn.Conv1d(chs[i], chs[i + 1], 2 * s, stride=s, padding=s // 2)]
        layers += [nn.ELU(), nn.Conv1d(chs[-1], cfg.latent_dim, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):  # (B, 1, L) -> (B, dim, L / hop)
        return self.net(x)


class CodecDecoder(nn.Module):
    def __init__(self, cfg: CodecConfig):
        super().__init__()
        chs = _stage_channels(cfg)
        layers = [nn.Conv1d(cfg.latent_dim, chs[-1], 7, padding=3)]
        for i in reversed(range(len(cfg.strides))):
            s = cfg.strides[i]
            layers += [nn.ELU(),
                       nn.ConvTranspose1d(chs[i + 1], chs[i], 2 * s, stride=s, padding=s // 2),
                       _ResUnit(chs[i])]
        layers += [nn.ELU(), nn.Conv1d(chs[0], 1, 7, padding=3)]
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


class Encoded(NamedTuple):
    tokens: torch.Tensor   # (..., n, frames)
    latent: torch.Tensor   # (..., frames, dim)


class Codec(nn.Module):
    kind = "codec"

    def __init__(self, cfg: CodecConfig | None = None):
        super().__init__()
        self.cfg = cfg or CodecConfig()
        self.encoder = CodecEncoder(self.cfg)
        self.decoder = CodecDecoder(self.cfg)
        self.rvq = ResidualVQ(self.cfg.n_layers, self.cfg.codebook_size, self.cfg.latent_dim,
                              self.cfg.ema_decay, self.cfg.dead_code_threshold)
        self.register_buffer("fitted", torch.tensor(False))

    def config_dict(self):
        return self.cfg.to_dict()

    @property
    def n_layers(self) -> int:
        return self.cfg.n_layers

    def n_frames(self, n_samples: int) -> int:
        return -(-n_samples // self.cfg.frame_hop)

    def _resolve_n(self, n) -> int:
        if n is None or n == "all":
            return self.cfg.n_layers
        n = int(n)
        if not 1 <= n <= self.cfg.n_layers:
            raise ConfigError(f"n must be in [1, {self.cfg.n_layers}] or 'all', got {n}")
        return n

    def encode_latent(self, w: torch.Tensor) -> torch.Tensor:
        """Continuous pre-quantization latent (..., frames, dim)."""
        w = torch.as_tensor(w, dtype=torch.float32)
        lead, length = w.shape[:-1], w.shape[-1]
        pad = self.n_frames(length) * self.cfg.frame_hop - length
        x = F.pad(w.reshape(-1, 1, length), (0, pad))
        z = self.encoder(x).transpose(1, 2)
        return z.reshape(*lead, z.shape[1], z.shape[2])

    def quantize(self, z: torch.Tensor, n=None) -> Encoded:
        n = self._resolve_n(n)
        lead = z.shape[:-1]
        q = self.rvq(z.reshape(-1, z.shape[-1]), n)
        tokens = q.indices.reshape(*lead, n).movedim(-1, -2)
        return Encoded(tokens, q.quantized.reshape(z.shape))

    def encode(self, w, n=None) -> Encoded:
        """Tokens of the first ``n`` layers and the sum of their codewords."""
        if not bool(self.fitted):
            raise NotFitted("codec has not been trained")
        return self.quantize(self.encode_latent(w), n)

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.rvq.embed(tokens)

    def decode(self, latent: torch.Tensor, length: int | None = None) -> torch.Tensor:
        """Waveform (..., frames * frame_hop), optionally cropped to ``length``."""
        if latent.shape[-1] != self.cfg.latent_dim:
            raise ShapeError(f"latent dim {latent.shape[-1]} != {self.cfg.latent_dim}")
        lead = latent.shape[:-2]
        x = latent.reshape(-1, *latent.shape[-2:]).transpose(1, 2)
        y = self.decoder(x).squeeze(1)
        if length is not None:
            y = y[..., :length] if y.shape[-1] >= length else F.pad(y, (0, length - y.shape[-1]))
        return y.reshape(*lead, y.shape[-1])

    def forward(self, w: torch.Tensor):
        """Training pass: returns (reconstruction, commitment loss, quantization)."""
        z = self.encode_latent(w)
        flat = z.reshape(-1, z.shape[-1])
        if not bool(self.rvq.initialized):
            self.rvq.init_kmeans(flat.detach())
        q = self.rvq(flat.detach())
        if self.training:
            self.rvq.ema_update(q, flat.detach())
        commit = F.mse_loss(flat, q.quantized.detach())
        zq = straight_through(flat, q.quantized).reshape(z.shape)
        return self.decode(zq, w.shape[-1]), commit, q


_MRSTFT = (StftConfig(512, 128, 512, "hann"), StftConfig(1024, 256, 1024, "hann"),
           StftConfig(256, 64, 256, "hann"))


def multires_stft_loss(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    loss = 0.0
    for cfg in _MRSTFT:
        e = stft(est, cfg).abs()
        r = stft(ref, cfg).abs()
        sc = torch.linalg.norm(r - e) / torch.linalg.norm(r).clamp_min(1e-7)
        mag = F.l1_loss(torch.log(e + 1e-5), torch.log(r + 1e-5))
        loss = loss + sc + mag
    return loss / len(_MRSTFT)


def codec_loss(codec: Codec, batch: torch.Tensor):
    recon, commit, q = codec(batch)
    l1 = F.l1_loss(recon, batch)
    spec = multires_stft_loss(recon, batch)
    total = 10.0 * l1 + spec + codec.cfg.commitment * commit
    return total, {"l1": l1.item(), "spec": spec.item(), "commit": commit.item()}


class CodecTask:
    """Random fixed-length crops of clean utterances; the batch is a function of the step."""

    kind = "codec"

    def __init__(self, train_waves, val_waves=None, segment: int = 8192, batch_size: int = 8,
                 seed: int = 0, n_val_batches: int = 2):
        train_waves = [np.asarray(w, dtype=np.float32) for w in train_waves]
        if not train_waves:
            raise DataError("codec training needs a non-empty corpus")
        self.train_waves = train_waves
        self.val_waves = [np.asarray(w, dtype=np.float32) for w in (val_waves or train_waves[:4])]
        self.segment = segment
        self.batch_size = batch_size
        self.seed = seed
        self.n_val_batches = n_val_batches

    def _crops(self, waves, rng, n):
        out = np.zeros((n, self.segment), dtype=np.float32)
        for b in range(n):
            w = waves[rng.integers(len(waves))]
            if len(w) > self.segment:
                off = rng.integers(len(w) - self.segment + 1)
                out[b] = w[off:off + self.segment]
            else:
                out[b, :len(w)] = w
        return torch.from_numpy(out)

    def train_batch(self, step: int):
        rng = np.random.default_rng([self.seed, step])
        return self._crops(self.train_waves, rng, self.batch_size)

    def val_batches(self):
        rng = np.random.default_rng([self.seed, 10**9])
        return [self._crops(self.val_waves, rng, self.batch_size) for _ in range(self.n_val_batches)]

    def loss(self, model: Codec, batch):
        return codec_loss(model, batch)

    def parameters(self, model: Codec):
        return [p for p in model.parameters() if p.requires_grad]

    def on_end(self, model: Codec):
        model.fitted.fill_(True)


def train_codec(corpus, cfg: CodecConfig | None = None, steps: int = 2000, train_cfg=None,
                val_corpus=None, **task_kw) -> Codec:
    """Train a codec on a list of clean waveforms (numpy arrays)."""
    from .training import TrainConfig, fit

    if corpus is None or len(corpus) == 0:
        raise DataError("codec training needs a non-empty corpus")
    train_cfg = train_cfg or TrainConfig(lr_init=1e-3, warmup_steps=100, total_steps=steps)
    torch.manual_seed(train_cfg.seed)
    codec = Codec(cfg)
    task = CodecTask(corpus, val_corpus, seed=train_cfg.seed, **task_kw)
    fit(codec, task, train_cfg)
    codec.eval()
    return codec


def codebook_usage(codec: Codec, waves) -> np.ndarray:
    """Fraction of entries hit per layer when encoding ``waves``."""
    counts = np.zeros((codec.n_layers, codec.cfg.codebook_size), dtype=np.int64)
    with torch.no_grad():
        for w in waves:
            tok = codec.encode(torch.as_tensor(w)).tokens
            for i in range(codec.n_layers):
                counts[i] += np.bincount(tok[i].numpy(), minlength=codec.cfg.codebook_size)
    return (counts > 0).mean(axis=1)
