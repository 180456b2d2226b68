"""Discriminative front-end: TF-domain extractor conditioned on an enrollment utterance.

Pipeline (``Frontend.forward``)::

    STFT -> 3x3 conv (2 -> C)                    tf_encode, shared by both inputs
    cross attention, queries from the mixture     cmha_extract
    channel concat [mixture, speaker] (2C)        fuse_concat
    n_blocks x (sub-band BLSTM, full-band BLSTM, cross-frame attention)
    3x3 transposed conv (2C -> 2) -> iSTFT        output trimmed to the mixture length

Embeddings are laid out ``(batch, channels, frames, bins)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import EmptySignal, ShapeError
from .signal import FRONTEND_STFT, StftConfig, istft, si_sdr_loss, stft


@dataclass
class FrontendConfig:
    n_blocks: int = 2
    width: int = 128
    heads: int = 4
    ffn_dim: int = 512
    blstm_hidden: int = 256
    attn_dim: int = 4  # per-head query/key channels; flattened with the bins
    window_len: int = 320
    hop_len: int = 160
    fft_size: int = 320
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.width % self.heads or (2 * self.width) % self.heads:
            raise ValueError("width must be divisible by heads")

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.window_len, self.hop_len, self.fft_size, self.window)

    @classmethod
    def small(cls):
        return cls(n_blocks=2)

    @classmethod
    def large(cls):
        return cls(n_blocks=6)

    @classmethod
    def toy(cls, n_blocks: int = 2):
        return cls(n_blocks=n_blocks, width=16, heads=4, ffn_dim=64, blstm_hidden=32, attn_dim=2)

    def to_dict(self):
        return asdict(self)


class ChannelNorm(nn.Module):
    """LayerNorm over the channel axis of a (B, C, T, F) tensor."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = nn.LayerNorm(ch)

    def forward(self, x):
        return self.norm(x.movedim(1, -1)).movedim(-1, 1)


class TfAttention(nn.Module):
    """Multi-head attention over frames; each frame is a (channels x bins) token.

    Keys/values may come from a different sequence (cross attention) with a
    different number of frames. No positional encoding is used.
    """

    def __init__(self, ch: int, heads: int, attn_dim: int):
        super().__init__()
        self.heads = heads
        self.attn_dim = attn_dim
        self.q = nn.Conv2d(ch, heads * attn_dim, 1)
        self.k = nn.Conv2d(ch, heads * attn_dim, 1)
        self.v = nn.Conv2d(ch, ch, 1)
        self.out = nn.Conv2d(ch, ch, 1)

    def _split(self, x):
        b, c, t, f = x.shape
        return x.reshape(b, self.heads, c // self.heads, t, f).permute(0, 1, 3, 2, 4).reshape(
            b, self.heads, t, (c // self.heads) * f)

    def forward(self, query, context=None, return_weights: bool = False):
        context = query if context is None else context
        b, c, t, f = query.shape
        q, k, v = self._split(self.q(query)), self._split(self.k(context)), self._split(self.v(context))
        scores = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])
        weights = scores.softmax(dim=-1)
        y = weights @ v  # (b, h, t, c/h * f)
        y = y.reshape(b, self.heads, t, c // self.heads, f).permute(0, 1, 3, 2, 4).reshape(b, c, t, f)
        y = self.out(y)
        return (y, weights) if return_weights else y


class ChannelFFN(nn.Module):
    def __init__(self, ch: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Conv2d(ch, hidden, 1)
        self.fc2 = nn.Conv2d(hidden, ch, 1)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class CrossAttentionExtractor(nn.Module):
    """Speaker-aware mixture features from cross attention onto the enrollment."""

    def __init__(self, cfg: FrontendConfig):
        super().__init__()
        c = cfg.width
        self.norm_q = ChannelNorm(c)
        self.norm_kv = ChannelNorm(c)
        self.attn = TfAttention(c, cfg.heads, cfg.attn_dim)
        self.norm_ffn = ChannelNorm(c)
        self.ffn = ChannelFFN(c, cfg.ffn_dim)

    def forward(self, d_m, d_r, return_weights: bool = False):
        if d_m.shape[1] != d_r.shape[1] or d_m.shape[3] != d_r.shape[3]:
            raise ShapeError(f"channel/bin mismatch: {tuple(d_m.shape)} vs {tuple(d_r.shape)}")
        y, w = self.attn(self.norm_q(d_m), self.norm_kv(d_r), return_weights=True)
        y = y + self.ffn(self.norm_ffn(y))
        return (y, w) if return_weights else y


class _BandLSTM(nn.Module):
    """BLSTM applied along one axis of (B, C, T, F), with residual connection."""

    def __init__(self, ch: int, hidden: int, axis: str):
        super().__init__()
        self.axis = axis
        self.norm = ChannelNorm(ch)
        self.rnn = nn.LSTM(ch, hidden, batch_first=True, bidirectional=True)
        self.proj = nn.Linear(2 * hidden, ch)

    def forward(self, x):
        b, c, t, f = x.shape
        y = self.norm(x)
        if self.axis == "time":      # one sequence per frequency bin
            seq = y.permute(0, 3, 2, 1).reshape(b * f, t, c)
        else:                        # one sequence per frame, along frequency
            seq = y.permute(0, 2, 3, 1).reshape(b * t, f, c)
        out = self.proj(self.rnn(seq)[0])
        if self.axis == "time":
            out = out.reshape(b, f, t, c).permute(0, 3, 2, 1)
        else:
            out = out.reshape(b, t, f, c).permute(0, 3, 1, 2)
        return x + out


class TfGridBlock(nn.Module):
    def __init__(self, ch: int, cfg: FrontendConfig):
        super().__init__()
        self.subband = _BandLSTM(ch, cfg.blstm_hidden, "time")
        self.fullband = _BandLSTM(ch, cfg.blstm_hidden, "freq")
        self.norm_attn = ChannelNorm(ch)
        self.attn = TfAttention(ch, cfg.heads, cfg.attn_dim)
        self.norm_ffn = ChannelNorm(ch)
        self.ffn = ChannelFFN(ch, cfg.ffn_dim)

    def forward(self, x):
        x = self.subband(x)
        x = self.fullband(x)
        x = x + self.attn(self.norm_attn(x))
        return x + self.ffn(self.norm_ffn(x))


def fuse_concat(d_m: torch.Tensor, d_spk: torch.Tensor) -> torch.Tensor:
    if d_m.shape[0] != d_spk.shape[0] or d_m.shape[2:] != d_spk.shape[2:]:
        raise ShapeError(f"cannot fuse {tuple(d_m.shape)} with {tuple(d_spk.shape)}")
    return torch.cat([d_m, d_spk], dim=1)


class Frontend(nn.Module):
    kind = "frontend"

    def __init__(self, cfg: FrontendConfig | None = None):
        super().__init__()
        self.cfg = cfg or FrontendConfig()
        c = self.cfg.width
        self.enc_conv = nn.Conv2d(2, c, 3, padding=1)
        self.cmha = CrossAttentionExtractor(self.cfg)
        self.blocks = nn.ModuleList([TfGridBlock(2 * c, self.cfg) for _ in range(self.cfg.n_blocks)])
        self.dec_conv = nn.ConvTranspose2d(2 * c, 2, 3, padding=1)
        self.register_buffer("fitted", torch.tensor(False))

    def config_dict(self):
        return self.cfg.to_dict()

    def tf_encode(self, w: torch.Tensor) -> torch.Tensor:
        """(B, L) waveform -> (B, C, frames, bins)."""
        if w.shape[-1] == 0:
            raise EmptySignal("empty waveform")
        spec = stft(w, self.cfg.stft)
        x = torch.stack([spec.real, spec.imag], dim=1)
        return self.enc_conv(x)

    def decode(self, x: torch.Tensor, length: int) -> torch.Tensor:
        y = self.dec_conv(x)
        spec = torch.complex(y[:, 0], y[:, 1])
        return istft(spec, self.cfg.stft, length=length)

    def forward(self, mixture: torch.Tensor, enrollment: torch.Tensor) -> torch.Tensor:
        """Estimated target waveform with the mixture's length and scale."""
        squeeze = mixture.dim() == 1
        if squeeze:
            mixture, enrollment = mixture[None], enrollment[None]
        m_scale = mixture.std(dim=-1, keepdim=True, correction=0) + 1e-8
        r_scale = enrollment.std(dim=-1, keepdim=True, correction=0) + 1e-8
        d_m = self.tf_encode(mixture / m_scale)
        d_r = self.tf_encode(enrollment / r_scale)
        x = fuse_concat(d_m, self.cmha(d_m, d_r))
        for block in self.blocks:
            x = block(x)
        out = self.decode(x, mixture.shape[-1])
        out = align_to(out, mixture / m_scale) * m_scale
        return out[0] if squeeze else out


def align_to(est: torch.Tensor, mixture: torch.Tensor) -> torch.Tensor:
    """Least-squares gain (sign included) fitting ``est`` to ``mixture``.

    The SI-SDR objective leaves gain and polarity free; the codec downstream
    is not polarity-invariant, so the estimate is pinned to the mixture.
    """
    gain = (est * mixture).sum(-1, keepdim=True) / ((est * est).sum(-1, keepdim=True) + 1e-8)
    return gain * est


class FrontendTask:
    """Negative SI-SDR on triplets supplied by ``sampler(step) -> dict``."""

    kind = "frontend"

    def __init__(self, sampler, val_batches=()):
        self.sampler = sampler
        self._val = list(val_batches)

    def train_batch(self, step):
        return self.sampler(step)

    def val_batches(self):
        return self._val

    def loss(self, model: Frontend, batch):
        est = model(batch["mixture"], batch["enrollment"])
        loss = si_sdr_loss(est, batch["target"]).mean()
        return loss, {"si_sdr": -loss.item()}

    def parameters(self, model):
        return [p for p in model.parameters() if p.requires_grad]

    def on_end(self, model):
        model.fitted.fill_(True)
