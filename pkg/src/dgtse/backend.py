"""Generative back-end: codec-token language model for target speaker extraction.

Three networks share the conditioning features:

* ``ConformerEncoder`` maps log-mel (or codec-latent) features of the mixture
  and of the enrollment to continuous embeddings, with one set of weights
  for both streams.
* ``CausalLM`` reads ``[bos, ref..., sep, mix..., tse, target..., eos]`` and
  predicts the first ``n_coarse`` codec token layers of the target with one
  linear head per layer.
* ``Refiner`` is a bidirectional encoder over ``[ref, mix, coarse]`` that
  predicts the all-layer codec latent of the target from the coarse one.

Backend feature frames are truncated to the codec frame count, so mixture
and target regions always have the same length.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .codec import Codec
from .errors import ConfigError, DataError, ShapeError
from .signal import BACKEND_STFT, StftConfig, log_mel

SLOT_KINDS = ("bos", "ref", "sep", "mix", "tse", "target", "eos")
IGNORE = -100


@dataclass
class BackendConfig:
    n_coarse: int = 2
    n_mels: int = 64
    d_model: int = 512
    conformer_layers: int = 6
    conformer_heads: int = 8
    conformer_kernel: int = 15
    decoder_layers: int = 10
    decoder_heads: int = 8
    refiner_layers: int = 6
    refiner_heads: int = 8
    ffn_mult: int = 4
    input_mode: str = "continuous"      # continuous | discrete
    output_layout: str = "aligned"      # aligned | ref_output
    refiner_inputs: str = "all"         # all | mix | ref
    refiner_split: bool = False         # train refiner on detached decoder outputs
    gen_cap_ratio: float = 1.25
    window_len: int = 512
    hop_len: int = 256
    fft_size: int = 512
    window: str = "sqrt_hann"

    def __post_init__(self):
        if self.input_mode not in ("continuous", "discrete"):
            raise ConfigError(f"input_mode must be continuous|discrete, got {self.input_mode}")
        if self.output_layout not in ("aligned", "ref_output"):
            raise ConfigError(f"output_layout must be aligned|ref_output, got {self.output_layout}")
        if self.refiner_inputs not in ("all", "mix", "ref"):
            raise ConfigError(f"refiner_inputs must be all|mix|ref, got {self.refiner_inputs}")
        if self.n_coarse < 1:
            raise ConfigError("n_coarse must be >= 1")

    @property
    def stft(self) -> StftConfig:
        return StftConfig(self.window_len, self.hop_len, self.fft_size, self.window)

    @classmethod
    def toy(cls, **kw):
        base = dict(d_model=64, conformer_layers=2, conformer_heads=4, decoder_layers=3,
                    decoder_heads=4, refiner_layers=2, refiner_heads=4, ffn_mult=4)
        base.update(kw)
        return cls(**base)

    def to_dict(self):
        return asdict(self)


def sinusoid(n: int, dim: int, device=None) -> torch.Tensor:
    pos = torch.arange(n, dtype=torch.float32, device=device)[:, None]
    div = torch.exp(torch.arange(0, dim, 2, dtype=torch.float32, device=device) * (-math.log(10000.0) / dim))
    pe = torch.zeros(n, dim, device=device)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div)[:, : dim // 2]
    return pe


class SelfAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ConfigError("d_model must be divisible by heads")
        self.heads = heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x, causal: bool = False, cache: dict | None = None):
        b, s, d = x.shape
        q, k, v = self.qkv(x).reshape(b, s, 3, self.heads, d // self.heads).permute(2, 0, 3, 1, 4)
        if cache is not None:
            if "k" in cache:
                k = torch.cat([cache["k"], k], dim=2)
                v = torch.cat([cache["v"], v], dim=2)
            cache["k"], cache["v"] = k, v
        if causal and q.shape[2] > 1:
            # query i may see keys up to (offset + i); offset = cached length
            offset = k.shape[2] - q.shape[2]
            mask = torch.ones(q.shape[2], k.shape[2], dtype=torch.bool, device=x.device).tril(offset)
            y = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        else:
            y = F.scaled_dot_product_attention(q, k, v)
        return self.out(y.transpose(1, 2).reshape(b, s, d))


class TransformerBlock(nn.Module):
    """Pre-norm transformer block."""

    def __init__(self, d: int, heads: int, ffn_mult: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, ffn_mult * d), nn.GELU(), nn.Linear(ffn_mult * d, d))

    def forward(self, x, causal=False, cache=None):
        x = x + self.attn(self.norm1(x), causal=causal, cache=cache)
        return x + self.ffn(self.norm2(x))


class ConformerLayer(nn.Module):
    """Macaron FFN / self-attention / depthwise-conv / FFN, each residual."""

    def __init__(self, d: int, heads: int, kernel: int, ffn_mult: int = 4):
        super().__init__()
        self.ffn1 = nn.Sequential(nn.LayerNorm(d), nn.Linear(d, ffn_mult * d), nn.SiLU(), nn.Linear(ffn_mult * d, d))
        self.norm_attn = nn.LayerNorm(d)
        self.attn = SelfAttention(d, heads)
        self.norm_conv = nn.LayerNorm(d)
        self.pw1 = nn.Conv1d(d, 2 * d, 1)
        self.dw = nn.Conv1d(d, d, kernel, padding=kernel // 2, groups=d)
        self.norm_dw = nn.LayerNorm(d)
        self.pw2 = nn.Conv1d(d, d, 1)
        self.ffn2 = nn.Sequential(nn.LayerNorm(d), nn.Linear(d, ffn_mult * d), nn.SiLU(), nn.Linear(ffn_mult * d, d))
        self.norm_out = nn.LayerNorm(d)

    def forward(self, x):
        x = x + 0.5 * self.ffn1(x)
        x = x + self.attn(self.norm_attn(x))
        y = F.glu(self.pw1(self.norm_conv(x).transpose(1, 2)), dim=1)
        y = self.dw(y)
        y = F.silu(self.norm_dw(y.transpose(1, 2))).transpose(1, 2)
        x = x + self.pw2(y).transpose(1, 2)
        x = x + 0.5 * self.ffn2(x)
        return self.norm_out(x)


class ConformerEncoder(nn.Module):
    def __init__(self, in_dim: int, cfg: BackendConfig):
        super().__init__()
        self.in_dim = in_dim
        self.proj = nn.Linear(in_dim, cfg.d_model)
        self.layers = nn.ModuleList([
            ConformerLayer(cfg.d_model, cfg.conformer_heads, cfg.conformer_kernel, cfg.ffn_mult)
            for _ in range(cfg.conformer_layers)])

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[-1] != self.in_dim:
            raise ShapeError(f"expected feature dim {self.in_dim}, got {feats.shape[-1]}")
        x = self.proj(feats)
        x = x + sinusoid(x.shape[1], x.shape[2], x.device)
        for layer in self.layers:
            x = layer(x)
        return x


@dataclass
class ArSequence:
    """Decoder-LM input: slot embeddings plus per-slot kinds and labels.

    ``labels`` is ``(B, n_coarse, S)``; it is ``IGNORE`` everywhere except on
    target and eos slots. The model predicts slot ``j + 1`` from slots ``<= j``.
    """

    embeddings: torch.Tensor
    kinds: list
    labels: torch.Tensor | None = None
    target_start: int = 0
    ref_frames: int = 0

    @property
    def loss_mask(self) -> torch.Tensor:
        return torch.tensor([k in ("target", "eos") for k in self.kinds])

    def __len__(self):
        return len(self.kinds)


class Backend(nn.Module):
    kind = "backend"

    def __init__(self, cfg: BackendConfig, codec: Codec):
        super().__init__()
        if not 1 <= cfg.n_coarse <= codec.n_layers:
            raise ConfigError(f"n_coarse must be in [1, {codec.n_layers}]")
        self.cfg = cfg
        self.codec = codec
        self.codec.requires_grad_(False)
        d = cfg.d_model
        self.vocab = codec.cfg.codebook_size
        self.eos_id = self.vocab
        in_dim = cfg.n_mels if cfg.input_mode == "continuous" else codec.cfg.latent_dim
        self.encoder = ConformerEncoder(in_dim, cfg)
        self.special = nn.ParameterDict({k: nn.Parameter(torch.randn(d) * 0.02) for k in ("bos", "sep", "tse", "eos")})
        self.target_proj = nn.Linear(codec.cfg.latent_dim, d)
        self.decoder = nn.ModuleList([TransformerBlock(d, cfg.decoder_heads, cfg.ffn_mult)
                                      for _ in range(cfg.decoder_layers)])
        self.dec_norm = nn.LayerNorm(d)
        self.heads = nn.ModuleList([nn.Linear(d, self.vocab + 1) for _ in range(cfg.n_coarse)])
        for h in self.heads:
            nn.init.normal_(h.weight, std=0.02 / math.sqrt(d))
            nn.init.zeros_(h.bias)
        self.refiner_in = nn.Linear(codec.cfg.latent_dim, d)
        self.segment = nn.Parameter(torch.randn(3, d) * 0.02)
        self.refiner = nn.ModuleList([TransformerBlock(d, cfg.refiner_heads, cfg.ffn_mult)
                                      for _ in range(cfg.refiner_layers)])
        self.refiner_norm = nn.LayerNorm(d)
        self.refiner_out = nn.Linear(d, codec.cfg.latent_dim)
        # the refiner predicts a correction on top of the coarse latent and starts as the identity
        nn.init.zeros_(self.refiner_out.weight)
        nn.init.zeros_(self.refiner_out.bias)

    def config_dict(self):
        return self.cfg.to_dict()

    def train(self, mode: bool = True):
        super().train(mode)
        self.codec.eval()
        return self

    # -- features ---------------------------------------------------------

    def features(self, w: torch.Tensor) -> torch.Tensor:
        """(B, L) -> (B, codec_frames, in_dim)."""
        frames = self.codec.n_frames(w.shape[-1])
        if self.cfg.input_mode == "discrete":
            with torch.no_grad():
                return self.codec.encode(w, "all").latent
        return log_mel(w, self.cfg.stft, self.cfg.n_mels)[..., :frames, :]

    def conformer_encode(self, feats: torch.Tensor) -> torch.Tensor:
        return self.encoder(feats)

    def encode_streams(self, mixture, enrollment):
        return self.encoder(self.features(enrollment)), self.encoder(self.features(mixture))

    def target_embed(self, tokens: torch.Tensor) -> torch.Tensor:
        """(B, n, T) coarse tokens -> (B, T, d_model)."""
        return self.target_proj(self.codec.embed(tokens))

    # -- decoder LM -------------------------------------------------------

    def _special(self, name, b):
        return self.special[name].expand(b, 1, -1)

    def build_ar_sequence(self, e_r, e_m, target_tokens=None, ref_tokens=None) -> ArSequence:
        """Assemble the decoder input; ``target_tokens`` given -> training layout with eos."""
        b, d = e_m.shape[0], e_m.shape[-1]
        n = self.cfg.n_coarse
        if target_tokens is not None and target_tokens.shape[-2] != n:
            raise ShapeError(f"target tokens have {target_tokens.shape[-2]} layers, expected {n}")
        pe = lambda t: sinusoid(t, d, e_m.device)
        ref = e_r + pe(e_r.shape[1])
        mix = e_m + pe(e_m.shape[1])
        if self.cfg.output_layout == "aligned":
            parts = [self._special("bos", b), ref, self._special("sep", b), mix, self._special("tse", b)]
            kinds = ["bos"] + ["ref"] * ref.shape[1] + ["sep"] + ["mix"] * mix.shape[1] + ["tse"]
        else:
            parts = [self._special("bos", b), ref, mix, self._special("tse", b)]
            kinds = ["bos"] + ["ref"] * ref.shape[1] + ["mix"] * mix.shape[1] + ["tse"]
        target_start = len(kinds)
        ref_frames = 0
        labels = None
        if target_tokens is not None:
            if self.cfg.output_layout == "ref_output":
                if ref_tokens is None:
                    raise ShapeError("ref_output layout needs enrollment tokens")
                ref_frames = ref_tokens.shape[-1]
                target_tokens = torch.cat([ref_tokens[:, :n], target_tokens], dim=-1)
            t = target_tokens.shape[-1]
            parts += [self.target_embed(target_tokens) + pe(t), self._special("eos", b)]
            kinds += ["target"] * t + ["eos"]
            labels = torch.full((b, n, len(kinds)), IGNORE, dtype=torch.long, device=e_m.device)
            labels[:, :, target_start:target_start + t] = target_tokens
            labels[:, :, -1] = self.eos_id
        return ArSequence(torch.cat(parts, dim=1), kinds, labels, target_start, ref_frames)

    def _run_decoder(self, x, caches=None):
        for i, block in enumerate(self.decoder):
            x = block(x, causal=True, cache=None if caches is None else caches[i])
        h = self.dec_norm(x)
        return torch.stack([head(h) for head in self.heads], dim=1)  # (B, n, S, V+1)

    def decoder_logits(self, seq: ArSequence) -> torch.Tensor:
        """Logits for every slot given the slots up to it (teacher forcing)."""
        return self._run_decoder(seq.embeddings)

    def ar_forward_loss(self, seq: ArSequence):
        """Mean CE over target+eos slots and heads; returns (loss, logits)."""
        if seq.labels is None or "target" not in seq.kinds:
            raise DataError("sequence has no target region")
        logits = self._run_decoder(seq.embeddings[:, :-1])
        labels = seq.labels[:, :, 1:]
        loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=IGNORE)
        return loss, logits

    def gen_cap(self, mix_frames: int, ref_frames: int = 0) -> int:
        cap = math.ceil(self.cfg.gen_cap_ratio * mix_frames)
        return cap + (ref_frames if self.cfg.output_layout == "ref_output" else 0)

    @torch.no_grad()
    def ar_generate(self, e_r, e_m, top_k: int = 0, temperature: float = 1.0, generator=None,
                    force_tokens=None, return_logits: bool = False, ref_frames: int = 0):
        """Frame-by-frame generation for a single item (B = 1) with a KV cache.

        Greedy unless ``top_k > 0``. Stops when every head emits eos or at the
        cap. ``force_tokens`` (1, n, T) replaces the choices by given tokens
        (used to cross-check against teacher forcing).
        Returns tokens (n, T) [and the per-step logits (n, T', V+1)].
        """
        if e_m.shape[0] != 1:
            raise ShapeError("ar_generate handles one item at a time")
        seq = self.build_ar_sequence(e_r, e_m)
        d = e_m.shape[-1]
        caches = [dict() for _ in self.decoder]
        logits = self._run_decoder(seq.embeddings, caches)[:, :, -1]  # (1, n, V+1)
        cap = self.gen_cap(e_m.shape[1], ref_frames)
        if force_tokens is not None:
            cap = force_tokens.shape[-1] + 1
        chosen, all_logits = [], []
        pe = sinusoid(cap + 1, d, e_m.device)
        for t in range(cap):
            all_logits.append(logits[0])
            if force_tokens is not None:
                if t == force_tokens.shape[-1]:
                    break
                tok = force_tokens[0, :, t]
            else:
                tok = self._choose(logits[0], top_k, temperature, generator)
                if bool((tok == self.eos_id).all()):
                    break
                if bool((tok == self.eos_id).any()):
                    # heads disagree on stopping: fall back to the best audio token
                    alt = logits[0, :, : self.vocab].argmax(-1)
                    tok = torch.where(tok == self.eos_id, alt, tok)
            chosen.append(tok)
            emb = self.target_embed(tok.view(1, -1, 1)) + pe[t]
            logits = self._run_decoder(emb, caches)[:, :, -1]
        tokens = torch.stack(chosen, dim=-1) if chosen else torch.zeros(self.cfg.n_coarse, 0, dtype=torch.long)
        if return_logits:
            return tokens, torch.stack(all_logits, dim=1)
        return tokens

    def _choose(self, logits, top_k, temperature, generator):
        if top_k <= 0:
            return logits.argmax(-1)
        vals, idx = logits.topk(top_k, dim=-1)
        probs = (vals / max(temperature, 1e-5)).softmax(-1)
        pick = torch.multinomial(probs, 1, generator=generator).squeeze(-1)
        return idx.gather(-1, pick[:, None]).squeeze(-1)

    # -- refiner ----------------------------------------------------------

    def refine_embedding(self, e_r, e_m, coarse_latent):
        """Predict the all-layer codec latent (B, T, latent_dim) from the coarse one."""
        if coarse_latent.shape[-1] != self.codec.cfg.latent_dim:
            raise ShapeError("coarse latent has the wrong dimension")
        d = e_m.shape[-1]
        parts = []
        if self.cfg.refiner_inputs in ("all", "ref"):
            parts.append(e_r + self.segment[0] + sinusoid(e_r.shape[1], d, e_r.device))
        if self.cfg.refiner_inputs in ("all", "mix"):
            parts.append(e_m + self.segment[1] + sinusoid(e_m.shape[1], d, e_m.device))
        t = coarse_latent.shape[1]
        parts.append(self.refiner_in(coarse_latent) + self.segment[2] + sinusoid(t, d, e_m.device))
        x = torch.cat(parts, dim=1)
        for block in self.refiner:
            x = block(x)
        return coarse_latent + self.refiner_out(self.refiner_norm(x[:, -t:]))

    # -- losses and inference --------------------------------------------

    def coarse_from_logits(self, logits: torch.Tensor, straight_through: bool) -> torch.Tensor:
        """Coarse latent (B, T, latent_dim) from per-head logits (B, n, T, V+1).

        With ``straight_through`` the forward value uses the argmax codeword
        but gradients flow into the logits through the softmax.
        """
        audio = logits[..., : self.vocab]
        if not straight_through:
            return self.codec.embed(audio.argmax(-1)).detach()
        probs = audio.softmax(-1)
        hard = F.one_hot(probs.argmax(-1), self.vocab).to(probs.dtype)
        weights = hard + probs - probs.detach()
        cbs = self.codec.rvq.codebooks[: self.cfg.n_coarse]
        return torch.einsum("bntv,nvd->btd", weights, cbs)

    def compute_losses(self, mixture, enrollment, target, e_r=None, e_m=None):
        """Training objective on a batch; ``mixture`` may be a front-end estimate."""
        n = self.cfg.n_coarse
        with torch.no_grad():
            tgt = self.codec.encode(target, "all")
            tokens = tgt.tokens[:, :n]
            ref_tokens = self.codec.encode(enrollment, n).tokens if self.cfg.output_layout == "ref_output" else None
        if e_r is None or e_m is None:
            e_r, e_m = self.encode_streams(mixture, enrollment)
        seq = self.build_ar_sequence(e_r, e_m, tokens, ref_tokens)
        ce, logits = self.ar_forward_loss(seq)
        start = seq.target_start - 1 + seq.ref_frames  # logits at j predict slot j + 1
        tl = logits[:, :, start:start + tokens.shape[-1]]
        coarse = self.coarse_from_logits(tl, straight_through=not self.cfg.refiner_split)
        pred = self.refine_embedding(e_r, e_m, coarse)
        refine = F.l1_loss(pred, tgt.latent) + F.mse_loss(pred, tgt.latent)
        with torch.no_grad():
            acc = (tl[..., : self.vocab].argmax(-1) == tokens).float().mean()
        return {"ce": ce, "refine": refine, "token_acc": acc}

    @torch.no_grad()
    def extract(self, mixture, enrollment, top_k: int = 0, generator=None, return_tokens: bool = False):
        """Mixture + enrollment (1-D) -> generated target waveform of the mixture's length."""
        m, r = mixture.reshape(1, -1), enrollment.reshape(1, -1)
        e_r, e_m = self.encode_streams(m, r)
        ref_frames = self.codec.n_frames(r.shape[-1]) if self.cfg.output_layout == "ref_output" else 0
        tokens = self.ar_generate(e_r, e_m, top_k=top_k, generator=generator, ref_frames=ref_frames)
        tokens = tokens[:, ref_frames:]
        wav = self.synthesize(e_r, e_m, tokens, m.shape[-1])
        return (wav, tokens) if return_tokens else wav

    def synthesize(self, e_r, e_m, tokens, length: int):
        """Coarse tokens (n, T) -> refined latent -> codec waveform of ``length`` samples."""
        if tokens.shape[-1] == 0:
            return torch.zeros(length)
        coarse = self.codec.embed(tokens[None])
        full = self.refine_embedding(e_r, e_m, coarse)
        return self.codec.decode(full, length)[0]


class BackendTask:
    kind = "backend"

    def __init__(self, sampler, val_batches=()):
        self.sampler = sampler
        self._val = list(val_batches)

    def train_batch(self, step):
        return self.sampler(step)

    def val_batches(self):
        return self._val

    def loss(self, model: Backend, batch):
        out = model.compute_losses(batch["mixture"], batch["enrollment"], batch["target"])
        total = out["ce"] + out["refine"]
        return total, {k: float(v.detach()) for k, v in out.items()}

    def parameters(self, model: Backend):
        return [p for p in model.parameters() if p.requires_grad]
