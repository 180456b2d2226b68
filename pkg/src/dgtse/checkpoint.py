"""Versioned checkpoint archives.

An archive is a ``torch.save`` zip holding::

    {"format": "dgtse", "version": 1, "kind": ..., "config": {...},
     "state_dict": {...}, "refs": {...}, "info": {...}}

Backend and joint archives do not embed the codec weights; they reference
the codec archive by path and SHA-256 content hash in ``refs``.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

import torch

FORMAT = "dgtse"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def content_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def state_digest(module: torch.nn.Module, prefix: str = "") -> str:
    """SHA-256 over parameter/buffer bytes (names sorted), independent of file format."""
    h = hashlib.sha256()
    for name, t in sorted(module.state_dict().items()):
        if name.startswith(prefix):
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _own_state(model) -> dict:
    return {k: v for k, v in model.state_dict().items() if not (k.startswith("codec.") or ".codec." in k)}


def save(path, model, info: dict | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    refs = dict(getattr(model, "refs", {}) or {})
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": model.kind,
        "config": model.config_dict(),
        "state_dict": _own_state(model),
        "refs": refs,
        "info": info or {},
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, str(tmp))
    os.replace(tmp, path)
    return content_hash(path)


def read(path) -> dict:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} checkpoint")
    if payload["version"] > VERSION:
        raise CheckpointError(f"{path}: version {payload['version']} is newer than supported {VERSION}")
    return payload


def _resolve_codec(refs: dict, codec=None):
    if codec is not None:
        return codec
    ref = refs.get("codec")
    if not ref:
        raise CheckpointError("archive does not reference a codec")
    path = Path(ref["path"])
    if not path.exists():
        raise CheckpointError(f"referenced codec {path} not found")
    if ref.get("sha256") and content_hash(path) != ref["sha256"]:
        raise CheckpointError(f"codec {path} does not match the referenced hash")
    return load(path)


def load(path, codec=None):
    """Rebuild the model stored at ``path`` (codec resolved from refs if not given)."""
    from .backend import Backend, BackendConfig
    from .codec import Codec, CodecConfig
    from .frontend import Frontend, FrontendConfig
    from .system import JointSystem

    payload = read(path)
    kind, cfg, refs = payload["kind"], payload["config"], payload["refs"]
    if kind == "codec":
        model = Codec(CodecConfig(**cfg))
    elif kind == "frontend":
        model = Frontend(FrontendConfig(**cfg))
    elif kind == "backend":
        model = Backend(BackendConfig(**cfg), _resolve_codec(refs, codec))
    elif kind == "joint":
        model = JointSystem.from_config(cfg, _resolve_codec(refs, codec))
    else:
        raise CheckpointError(f"unknown checkpoint kind {kind!r}")
    missing, unexpected = model.load_state_dict(payload["state_dict"], strict=False)
    missing = [k for k in missing if not k.startswith("codec.") and ".codec." not in k]
    if missing or unexpected:
        raise CheckpointError(f"{path}: missing {missing}, unexpected {unexpected}")
    model.refs = refs
    model.info = payload["info"]
    model.eval()
    return model


def codec_ref(path) -> dict:
    return {"path": str(Path(path).resolve()), "sha256": content_hash(path)}
