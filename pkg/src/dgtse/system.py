"""Two-stage extractor: discriminative front-end feeding the generative back-end.

Training strategies (``StrategyConfig``):

* ``frontend_mode="frozen"``: the pre-trained front-end runs without
  gradients and its weights never change;
* ``frontend_mode="unfrozen"``: gradients of the back-end losses reach the
  front-end through log-mel analysis of its output waveform;
* ``aux_sisdr``: adds ``lambda_sisdr * sisdr_scale * SI-SDR loss(D_o, s)``;
* ``split_training``: front-end and back-end were trained independently; the
  back-end keeps conditioning on the real mixture and the front-end output is
  only used as pseudo labels at NAR inference.

Inference: AR runs frame-by-frame generation; NAR runs one teacher-forced
decoder pass with the front-end's codec tokens as context and, per frame,
keeps the pseudo token with probability ``R`` (otherwise the model's argmax).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from .backend import Backend, BackendConfig
from .codec import Codec
from .errors import ConfigError, NotFitted
from .frontend import Frontend, FrontendConfig
from .signal import si_sdr_loss


@dataclass
class StrategyConfig:
    frontend_mode: str = "frozen"
    aux_sisdr: bool = False
    lambda_sisdr: float = 1.0
    sisdr_scale: float = 0.01
    split_training: bool = False
    use_enrollment: bool = True

    def __post_init__(self):
        if self.frontend_mode not in ("frozen", "unfrozen"):
            raise ConfigError(f"frontend_mode must be frozen|unfrozen, got {self.frontend_mode}")

    def to_dict(self):
        return asdict(self)


@dataclass
class InferenceConfig:
    mode: str = "AR"
    injection_ratio: float = 0.0
    seed: int = 0
    top_k: int = 0

    def __post_init__(self):
        self.mode = self.mode.upper()
        if self.mode not in ("AR", "NAR"):
            raise ConfigError(f"mode must be AR or NAR, got {self.mode}")
        if not 0.0 <= self.injection_ratio <= 1.0:
            raise ConfigError(f"injection ratio must be in [0, 1], got {self.injection_ratio}")

    def to_dict(self):
        return asdict(self)


class JointBatchOutput(NamedTuple):
    d_o: torch.Tensor
    g_latent: torch.Tensor | None
    losses: dict


class NarResult(NamedTuple):
    waveform: torch.Tensor
    tokens: torch.Tensor          # (n, T) tokens actually used
    pseudo_tokens: torch.Tensor   # (n, T) codec tokens of the front-end output
    predicted: torch.Tensor       # (n, T) model argmax over pseudo-label context
    injected: torch.Tensor        # (T,) bool, frame took the pseudo token


def injection_mask(n_frames: int, ratio: float, seed: int) -> torch.Tensor:
    """Per-frame independent Bernoulli(ratio) draws from a seeded generator."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"injection ratio must be in [0, 1], got {ratio}")
    gen = torch.Generator().manual_seed(seed)
    return torch.rand(n_frames, generator=gen) < ratio


class JointSystem(nn.Module):
    kind = "joint"

    def __init__(self, frontend: Frontend, backend: Backend, strategy: StrategyConfig | None = None):
        super().__init__()
        self.frontend = frontend
        self.backend = backend
        self.strategy = strategy or StrategyConfig()
        self.refs = {}
        self.apply_strategy()

    @property
    def codec(self) -> Codec:
        return self.backend.codec

    @classmethod
    def from_config(cls, cfg: dict, codec: Codec) -> "JointSystem":
        return cls(Frontend(FrontendConfig(**cfg["frontend"])),
                   Backend(BackendConfig(**cfg["backend"]), codec),
                   StrategyConfig(**cfg["strategy"]))

    def config_dict(self):
        return {"frontend": self.frontend.cfg.to_dict(), "backend": self.backend.cfg.to_dict(),
                "strategy": self.strategy.to_dict()}

    def apply_strategy(self, strategy: StrategyConfig | None = None):
        if strategy is not None:
            self.strategy = strategy
        self.frontend.requires_grad_(self.strategy.frontend_mode == "unfrozen")
        return self

    def train(self, mode: bool = True):
        super().train(mode)
        if self.strategy.frontend_mode == "frozen":
            self.frontend.eval()
        self.codec.eval()
        return self

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]

    # ------------------------------------------------------------------

    def run_frontend(self, mixture, enrollment):
        if self.strategy.frontend_mode == "frozen":
            with torch.no_grad():
                return self.frontend(mixture, enrollment)
        return self.frontend(mixture, enrollment)

    def _streams(self, cond, enrollment):
        e_m = self.backend.encoder(self.backend.features(cond))
        if self.strategy.use_enrollment:
            e_r = self.backend.encoder(self.backend.features(enrollment))
        else:
            e_r = e_m[:, :0]
        return e_r, e_m

    def _condition(self, mixture, d_o):
        return mixture if self.strategy.split_training else d_o

    def joint_train_step(self, batch: dict) -> JointBatchOutput:
        """Forward pass and losses for one batch (the caller steps the optimizer)."""
        if not bool(self.frontend.fitted):
            raise NotFitted("joint training needs a pre-trained front-end")
        m, r, s = batch["mixture"], batch["enrollment"], batch["target"]
        d_o = self.run_frontend(m, r)
        e_r, e_m = self._streams(self._condition(m, d_o), r)
        out = self.backend.compute_losses(self._condition(m, d_o), r, s, e_r=e_r, e_m=e_m)
        losses = {"ce": out["ce"], "refine": out["refine"], "token_acc": out["token_acc"]}
        total = out["ce"] + out["refine"]
        if self.strategy.aux_sisdr:
            aux = si_sdr_loss(d_o, s).mean()
            losses["sisdr_aux"] = aux
            total = total + self.strategy.lambda_sisdr * self.strategy.sisdr_scale * aux
        losses["total"] = total
        return JointBatchOutput(d_o, None, losses)

    # ------------------------------------------------------------------

    @torch.no_grad()
    def infer_ar(self, mixture, enrollment, icfg: InferenceConfig | None = None, d_o=None,
                 return_tokens: bool = False):
        """Returns (D_o, G_o[, tokens]); ``d_o`` overrides the front-end output (oracle tests)."""
        icfg = icfg or InferenceConfig()
        m, r = mixture.reshape(1, -1), enrollment.reshape(1, -1)
        if d_o is None:
            d_o = self.frontend(m, r)
        d_o = d_o.reshape(1, -1)
        e_r, e_m = self._streams(self._condition(m, d_o), r)
        be = self.backend
        ref_frames = be.codec.n_frames(r.shape[-1]) if be.cfg.output_layout == "ref_output" else 0
        gen = torch.Generator().manual_seed(icfg.seed)
        tokens = be.ar_generate(e_r, e_m, top_k=icfg.top_k, generator=gen, ref_frames=ref_frames)
        tokens = tokens[:, ref_frames:]
        g_o = be.synthesize(e_r, e_m, tokens, m.shape[-1])
        return (d_o[0], g_o, tokens) if return_tokens else (d_o[0], g_o)

    @torch.no_grad()
    def infer_nar(self, mixture, enrollment, icfg: InferenceConfig, d_o=None) -> NarResult:
        m, r = mixture.reshape(1, -1), enrollment.reshape(1, -1)
        if d_o is None:
            d_o = self.frontend(m, r)
        d_o = d_o.reshape(1, -1)
        be = self.backend
        n = be.cfg.n_coarse
        pseudo = be.codec.encode(d_o, n).tokens                      # (1, n, T)
        e_r, e_m = self._streams(self._condition(m, d_o), r)
        ref_tokens = be.codec.encode(r, n).tokens if be.cfg.output_layout == "ref_output" else None
        seq = be.build_ar_sequence(e_r, e_m, pseudo, ref_tokens)
        logits = be.decoder_logits(seq)                              # (1, n, S, V+1)
        start = seq.target_start - 1 + seq.ref_frames
        t = pseudo.shape[-1]
        predicted = logits[0, :, start:start + t, : be.vocab].argmax(-1)
        injected = injection_mask(t, icfg.injection_ratio, icfg.seed)
        tokens = torch.where(injected[None], pseudo[0], predicted)
        wav = be.synthesize(e_r, e_m, tokens, m.shape[-1])
        return NarResult(wav, tokens, pseudo[0], predicted, injected)

    @torch.no_grad()
    def infer(self, mixture, enrollment, icfg: InferenceConfig):
        """(D_o, G_o) under either inference mode."""
        if icfg.mode == "AR":
            return self.infer_ar(mixture, enrollment, icfg)
        d_o = self.frontend(mixture.reshape(1, -1), enrollment.reshape(1, -1))
        return d_o[0], self.infer_nar(mixture, enrollment, icfg, d_o=d_o).waveform


class JointTask:
    kind = "joint"

    def __init__(self, sampler, val_batches=()):
        self.sampler = sampler
        self._val = list(val_batches)

    def train_batch(self, step):
        return self.sampler(step)

    def val_batches(self):
        return self._val

    def loss(self, model: JointSystem, batch):
        out = model.joint_train_step(batch)
        return out.losses["total"], {k: float(v.detach()) for k, v in out.losses.items()}

    def parameters(self, model: JointSystem):
        return model.trainable_parameters()
