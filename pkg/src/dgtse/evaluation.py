"""Evaluation harness: built-in SI-SDR plus external scorer executables.

A scorer is any command that accepts two WAV paths (estimate, reference)
and prints one float on stdout, e.g. ``python dnsmos.py`` or a wrapper
around a speaker-verification model. Scorers are registered as
``name=command`` and invoked as ``command EST.wav REF.wav``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import shlex
import subprocess
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import triplet_from_manifest
from .signal import si_sdr, write_wav
from .system import InferenceConfig

logger = logging.getLogger(__name__)

REPORT_VERSION = 1
BUILTIN_COLUMNS = ("si_sdr_mix", "si_sdr_D", "si_sdr_G")


@dataclass
class EvalReport:
    rows: list
    config: dict = field(default_factory=dict)
    version: int = REPORT_VERSION

    @property
    def columns(self) -> list:
        cols = list(BUILTIN_COLUMNS)
        for row in self.rows:
            for k in row.get("scores", {}):
                if k not in cols:
                    cols.append(k)
        return cols

    def value(self, row, col):
        v = row.get(col, row.get("scores", {}).get(col))
        return math.nan if v is None else float(v)

    @property
    def aggregate(self) -> dict:
        """Arithmetic mean per column over rows where the value is present."""
        out = {}
        for col in self.columns:
            vals = [self.value(r, col) for r in self.rows]
            vals = [v for v in vals if not math.isnan(v)]
            out[col] = float(np.mean(vals)) if vals else math.nan
        return out

    @property
    def failed(self) -> list:
        return [r["id"] for r in self.rows if r.get("errors")]

    def to_dict(self) -> dict:
        return {"version": self.version, "config": self.config, "rows": self.rows,
                "aggregate": self.aggregate}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        d = json.loads(text)
        return cls(rows=d["rows"], config=d.get("config", {}), version=d.get("version", REPORT_VERSION))

    def save(self, prefix) -> tuple:
        prefix = Path(prefix)
        prefix.parent.mkdir(parents=True, exist_ok=True)
        json_path = prefix.with_suffix(".json")
        csv_path = prefix.with_suffix(".csv")
        json_path.write_text(self.to_json())
        cols = self.columns
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id"] + cols + ["errors"])
            for r in self.rows:
                w.writerow([r["id"]] + [repr(self.value(r, c)) for c in cols] + [";".join(r.get("errors", []))])
        return json_path, csv_path


def run_scorer(command: str, est_path, ref_path, timeout: float = 600.0) -> float:
    proc = subprocess.run(shlex.split(command) + [str(est_path), str(ref_path)],
                          capture_output=True, text=True, timeout=timeout)
    if proc.returncode != 0:
        raise RuntimeError(f"exit {proc.returncode}: {proc.stderr.strip()[-200:]}")
    return float(proc.stdout.strip().split()[-1])


def item_seed(base: int, item_id: str) -> int:
    return (base * 1_000_003 + zlib.crc32(item_id.encode())) % (2 ** 31)


def _to_tensor(x):
    return torch.as_tensor(np.asarray(x, dtype=np.float32))


def evaluate(system, manifest: list, icfg: InferenceConfig | None = None, scorers: dict | None = None,
             wav_dir=None) -> EvalReport:
    """Run ``system.infer(m, r, icfg) -> (D_o or None, G_o)`` on every manifest item."""
    icfg = icfg or InferenceConfig()
    scorers = scorers or {}
    rows = []
    for item in manifest:
        tri = triplet_from_manifest(item)
        cfg = InferenceConfig(icfg.mode, icfg.injection_ratio, item_seed(icfg.seed, item["id"]), icfg.top_k)
        m, r, s = _to_tensor(tri.mixture), _to_tensor(tri.enrollment), _to_tensor(tri.target)
        d_o, g_o = system.infer(m, r, cfg)
        row = {"id": item["id"], "snr_db": float(item["snr_db"]),
               "si_sdr_mix": float(si_sdr(m.double(), s.double())),
               "si_sdr_D": None if d_o is None else float(si_sdr(d_o.double(), s.double())),
               "si_sdr_G": float(si_sdr(g_o.double(), s.double())),
               "scores": {}, "errors": []}
        if wav_dir is not None:
            wav_dir = Path(wav_dir)
            write_wav(wav_dir / f"{item['id']}_G.wav", g_o.numpy())
            if d_o is not None:
                write_wav(wav_dir / f"{item['id']}_D.wav", d_o.numpy())
        if scorers:
            with tempfile.TemporaryDirectory() as tmp:
                est_path, ref_path = Path(tmp) / "est.wav", Path(tmp) / "ref.wav"
                write_wav(est_path, g_o.numpy())
                write_wav(ref_path, tri.target)
                for name, cmd in sorted(scorers.items()):
                    try:
                        row["scores"][name] = run_scorer(cmd, est_path, ref_path)
                    except Exception as exc:  # noqa: BLE001 - scorer failures are recorded per row
                        row["scores"][name] = None
                        row["errors"].append(f"{name}: {exc}")
                        logger.warning("scorer %s failed on %s: %s", name, item["id"], exc)
        rows.append(row)
    rows.sort(key=lambda r: r["id"])
    return EvalReport(rows, {"inference": icfg.to_dict(), "scorers": dict(scorers), "n_items": len(manifest)})


class IdentitySystem:
    """G_o := mixture (no-processing baseline)."""

    def infer(self, m, r, icfg):
        return m, m


class BackendSystem:
    """Adapter so a standalone back-end can be evaluated like a joint system."""

    def __init__(self, backend):
        self.backend = backend

    def infer(self, m, r, icfg):
        gen = torch.Generator().manual_seed(icfg.seed)
        return None, self.backend.extract(m, r, top_k=icfg.top_k, generator=gen)
