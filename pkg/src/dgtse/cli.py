"""Command-line interface.

Every command reads one YAML config (``--config``), starting from a built-in
preset (``--preset toy|full``) and applying ``--set section.key=value``
overrides last. Artifacts live in the work directory::

    <workdir>/config.yaml          resolved config of the last command
    <workdir>/codec.pt             codec archive
    <workdir>/frontend.pt          front-end archive
    <workdir>/backend.pt           standalone back-end archive
    <workdir>/joint.pt             two-stage system archive
    <workdir>/manifests/eval.jsonl frozen evaluation manifest
    <workdir>/reports/<name>.{json,csv}
    <workdir>/records/<command>.json   reproducibility record
    <workdir>/ablations/<name>/    per-ablation checkpoints and reports
"""

from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from . import checkpoint as ckpt
from .backend import Backend, BackendConfig, BackendTask
from .codec import CodecConfig, CodecTask, Codec
from .data import TripletSampler, build_eval_manifest, index_corpus, load_audio, load_manifest, sample_triplet
from .errors import ConfigError, DgtseError
from .evaluation import BackendSystem, evaluate
from .frontend import Frontend, FrontendConfig, FrontendTask
from .signal import read_wav, si_sdr, write_wav
from .system import InferenceConfig, JointSystem, JointTask, StrategyConfig
from .toycorpus import make_toy_corpus
from .training import TrainConfig, fit

logger = logging.getLogger("dgtse")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_PARTIAL = 0, 1, 2, 3

_TRAIN_EXTRA = {"steps", "segment", "segment_s", "scale_to_corpus"}


def _train_section(steps, lr=1e-3, warmup=50, per_epoch=100, batch=4, **extra):
    return dict(steps=steps, lr_init=lr, warmup_steps=warmup, steps_per_epoch=per_epoch,
                batch_size=batch, plateau_patience_epochs=3, lr_halving_factor=0.5,
                grad_clip=5.0, log_every=50, scale_to_corpus=False, **extra)


def _asdict(cfg):
    d = dataclasses.asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def preset(name: str) -> dict:
    """Built-in configuration presets (the full-size one follows the reference setup)."""
    base = {
        "seed": 0,
        "data": {"corpus": None, "eval_corpus": None, "segment_s": 1.0, "enroll_max_s": 5.0,
                 "eval_items": 20, "eval_seed": 1234, "eval_segment_s": 2.0},
        "codec": _asdict(CodecConfig()),
        "strategy": _asdict(StrategyConfig()),
        "inference": {"mode": "AR", "injection_ratio": 0.0, "seed": 0, "top_k": 0},
        "scorers": {},
    }
    if name == "toy":
        base["frontend"] = _asdict(FrontendConfig.toy())
        base["backend"] = _asdict(BackendConfig.toy())
        base["train"] = {
            "codec": _train_section(2000, warmup=50, per_epoch=250, batch=8, segment=8192),
            "frontend": _train_section(800, warmup=50, per_epoch=100, batch=4),
            "backend": _train_section(1000, warmup=50, per_epoch=100, batch=4),
            "joint": _train_section(1000, warmup=50, per_epoch=100, batch=4),
        }
    elif name == "full":
        base["data"]["segment_s"] = 3.0
        base["data"]["eval_segment_s"] = None
        base["frontend"] = _asdict(FrontendConfig.small())
        base["backend"] = _asdict(BackendConfig())
        full = dict(steps=None, warmup=10000, per_epoch=1000, batch=8)
        base["train"] = {k: _train_section(**full) for k in ("frontend", "backend", "joint")}
        base["train"]["codec"] = _train_section(**{**full, "batch": 16}, segment=16384)
        for sec in base["train"].values():
            sec["scale_to_corpus"] = True
            sec["max_epochs"] = 100
    else:
        raise ConfigError(f"unknown preset {name!r} (toy|full)")
    return base


def _merge(base: dict, over: dict, path=""):
    for k, v in over.items():
        if k not in base and path not in ("scorers.",):
            raise ConfigError(f"unknown config key {path + k!r}")
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v, f"{path}{k}.")
        else:
            base[k] = v
    return base


def parse_override(text: str) -> dict:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    value = yaml.safe_load(raw) if raw != "" else None
    out = cur = {}
    parts = key.strip().split(".")
    for p in parts[:-1]:
        cur[p] = {}
        cur = cur[p]
    cur[parts[-1]] = value
    return out


def resolve_config(preset_name="toy", path=None, overrides=()) -> dict:
    cfg = preset(preset_name)
    if path is not None:
        with open(path) as fh:
            _merge(cfg, yaml.safe_load(fh) or {})
    for o in overrides:
        _merge(cfg, parse_override(o))
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


# ---------------------------------------------------------------------------


class Run:
    """Shared state of one CLI invocation: config, work dir, record."""

    def __init__(self, args, cfg: dict):
        self.args = args
        self.cfg = cfg
        self.workdir = Path(args.workdir)
        self.workdir.mkdir(parents=True, exist_ok=True)
        self.inputs, self.outputs = {}, {}
        self.extra = {}

    def path(self, name) -> Path:
        return self.workdir / name

    def train_cfg(self, kind: str, hours: float | None = None) -> tuple[TrainConfig, dict]:
        sec = dict(self.cfg["train"][kind])
        extra = {k: sec.pop(k) for k in list(sec) if k in _TRAIN_EXTRA}
        tc = TrainConfig(seed=self.cfg["seed"], total_steps=extra.get("steps"), **sec)
        if extra.get("scale_to_corpus") and hours:
            tc = tc.scaled_to(hours)
        return tc, extra

    def use(self, name: str, path: Path):
        if not path.exists():
            raise ConfigError(f"{path} not found; run the command that produces it first")
        self.inputs[name] = ckpt.content_hash(path)
        return path

    def produced(self, name: str, path: Path):
        self.outputs[name] = ckpt.content_hash(path)

    def record(self, command: str):
        rec = {
            "command": command,
            "argv": self.args.argv,
            "version": __version__,
            "torch": torch.__version__,
            "config_hash": config_hash(self.cfg),
            "seeds": {"global": self.cfg["seed"], "inference": self.cfg["inference"]["seed"],
                      "eval_manifest": self.cfg["data"]["eval_seed"]},
            "inputs": self.inputs,
            "outputs": self.outputs,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
            **self.extra,
        }
        out = self.path("records") / f"{command}.json"
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(json.dumps(rec, indent=1, sort_keys=True))
        (self.workdir / "config.yaml").write_text(yaml.safe_dump(self.cfg, sort_keys=True))
        return rec


def _corpus(run: Run, key="corpus"):
    root = run.cfg["data"][key]
    if not root:
        raise ConfigError(f"data.{key} is not set")
    return index_corpus(root)


def _eval_index(run: Run):
    return _corpus(run, "eval_corpus") if run.cfg["data"]["eval_corpus"] else _corpus(run)


def _sampler(run: Run, idx, batch_size, seed_offset=0):
    d = run.cfg["data"]
    return TripletSampler(idx, batch_size, run.cfg["seed"] + seed_offset, d["segment_s"], d["enroll_max_s"])


def _load_codec(run: Run) -> Codec:
    return ckpt.load(run.use("codec", run.path("codec.pt")))


def _codec_refs(run: Run) -> dict:
    return {"codec": ckpt.codec_ref(run.path("codec.pt"))}


# -- commands ---------------------------------------------------------------


def cmd_toy_corpus(run: Run):
    """Synthesize a speaker/utterance WAV tree (train and held-out halves)."""
    a = run.args
    root = Path(a.out)
    make_toy_corpus(root / "train", a.speakers, a.utts, seed=run.cfg["seed"])
    make_toy_corpus(root / "test", a.speakers, a.test_utts, seed=run.cfg["seed"] + 10_000)
    idx = index_corpus(root / "train")
    print(f"toy corpus: {len(idx)} train utterances ({idx.hours * 60:.1f} min) under {root}")
    run.extra["corpus_minutes"] = idx.hours * 60


def cmd_mix(run: Run):
    """Index the corpus and freeze the evaluation manifest; optionally write example mixtures."""
    d = run.cfg["data"]
    idx = _corpus(run)
    (run.path("index.json")).write_text(idx.to_json())
    eval_idx = _eval_index(run)
    path = run.path("manifests/eval.jsonl")
    build_eval_manifest(eval_idx, d["eval_items"], d["eval_seed"], path,
                        segment_s=d["eval_segment_s"], enroll_max_s=d["enroll_max_s"])
    run.produced("manifest", path)
    for i in range(run.args.write_examples):
        t = sample_triplet(idx, [run.cfg["seed"], i], d["segment_s"], d["enroll_max_s"])
        for name in ("mixture", "enrollment", "target"):
            write_wav(run.path(f"examples/{i:03d}_{name}.wav"), getattr(t, name))
    print(f"indexed {len(idx)} utterances, {len(idx.skipped)} skipped; manifest {path} "
          f"({d['eval_items']} items)")


def cmd_train_codec(run: Run):
    idx, eval_idx = _corpus(run), _eval_index(run)
    tc, extra = run.train_cfg("codec", idx.hours)
    waves = [load_audio(u.path) for u in idx.utterances]
    held = [load_audio(u.path) for u in eval_idx.utterances]
    torch.manual_seed(tc.seed)
    codec = Codec(CodecConfig(**run.cfg["codec"]))
    task = CodecTask(waves, held, segment=extra.get("segment", 8192), batch_size=tc.batch_size, seed=tc.seed)
    out = run.path("codec.pt")
    fit(codec, task, tc, out_path=out, meta={"corpus": run.cfg["data"]["corpus"]})
    run.produced("codec", out)
    with torch.no_grad():
        scores = [float(si_sdr(codec.decode(codec.encode(torch.from_numpy(w)).latent, len(w)),
                               torch.from_numpy(w))) for w in held]
    run.extra["heldout_si_sdr"] = float(np.mean(scores))
    print(f"codec saved to {out}; held-out round-trip SI-SDR {np.mean(scores):.2f} dB over {len(held)} clips")


def cmd_train_frontend(run: Run):
    idx = _corpus(run)
    tc, _ = run.train_cfg("frontend", idx.hours)
    torch.manual_seed(tc.seed)
    model = Frontend(FrontendConfig(**run.cfg["frontend"]))
    val = _sampler(run, _eval_index(run), tc.batch_size, 1).fixed_batches(2)
    out = run.path("frontend.pt")
    res = fit(model, FrontendTask(_sampler(run, idx, tc.batch_size), val), tc, out_path=out)
    run.produced("frontend", out)
    print(f"front-end saved to {out}; best validation SI-SDR {-res.best_val:.2f} dB")


def _train_backend(run: Run, backend_cfg: dict, out: Path):
    idx = _corpus(run)
    tc, _ = run.train_cfg("backend", idx.hours)
    codec = _load_codec(run)
    torch.manual_seed(tc.seed)
    model = Backend(BackendConfig(**backend_cfg), codec)
    model.refs = _codec_refs(run)
    val = _sampler(run, _eval_index(run), tc.batch_size, 1).fixed_batches(2)
    res = fit(model, BackendTask(_sampler(run, idx, tc.batch_size), val), tc, out_path=out)
    run.produced(out.stem, out)
    print(f"back-end saved to {out}; best validation loss {res.best_val:.4f}")
    return model


def cmd_train_backend(run: Run):
    _train_backend(run, run.cfg["backend"], run.path("backend.pt"))


def _train_joint(run: Run, backend_cfg: dict, strategy: StrategyConfig, out: Path, backend_path=None):
    idx = _corpus(run)
    codec = _load_codec(run)
    frontend = ckpt.load(run.use("frontend", run.path("frontend.pt")))
    tc, _ = run.train_cfg("joint", idx.hours)
    torch.manual_seed(tc.seed)
    if backend_path is not None:
        backend = ckpt.load(run.use("backend", backend_path), codec=codec)
    else:
        backend = Backend(BackendConfig(**backend_cfg), codec)
    system = JointSystem(frontend, backend, strategy)
    system.refs = _codec_refs(run)
    if strategy.split_training:
        # stages were trained independently; only assemble them
        ckpt.save(out, system, {"assembled": True})
        print(f"split system assembled into {out}")
    else:
        val = _sampler(run, _eval_index(run), tc.batch_size, 1).fixed_batches(2)
        res = fit(system, JointTask(_sampler(run, idx, tc.batch_size), val), tc, out_path=out)
        print(f"joint system saved to {out}; best validation loss {res.best_val:.4f}")
    run.produced(out.stem, out)
    return system


def cmd_train_joint(run: Run):
    strategy = StrategyConfig(**run.cfg["strategy"])
    init = run.path("backend.pt") if (strategy.split_training or run.args.init_backend) else None
    _train_joint(run, run.cfg["backend"], strategy, run.path("joint.pt"), init)


def _icfg(run: Run) -> InferenceConfig:
    a, i = run.args, run.cfg["inference"]
    mode = a.mode if getattr(a, "mode", None) else i["mode"]
    ratio = a.injection_ratio if getattr(a, "injection_ratio", None) is not None else i["injection_ratio"]
    return InferenceConfig(mode, ratio, i["seed"], i["top_k"])


def _load_system(run: Run, path=None):
    path = Path(path) if path else run.path("joint.pt")
    model = ckpt.load(run.use("system", path))
    if model.kind == "joint":
        return model
    if model.kind == "backend":
        return BackendSystem(model)
    raise ConfigError(f"{path} holds a {model.kind} archive; need joint or backend")


def cmd_extract(run: Run):
    a = run.args
    icfg = _icfg(run)
    system = _load_system(run, a.checkpoint)
    m = torch.from_numpy(read_wav(a.mixture).samples)
    r = torch.from_numpy(read_wav(a.enrollment).samples)
    out = Path(a.out)
    dump = {"mode": icfg.mode, "injection_ratio": icfg.injection_ratio, "seed": icfg.seed}
    if isinstance(system, BackendSystem):
        if icfg.mode == "NAR":
            raise ConfigError("NAR inference needs a joint system checkpoint")
        gen = torch.Generator().manual_seed(icfg.seed)
        g_o, tokens = system.backend.extract(m, r, top_k=icfg.top_k, generator=gen, return_tokens=True)
        dump["tokens"] = tokens.tolist()
    elif icfg.mode == "NAR":
        res = system.infer_nar(m, r, icfg)
        g_o = res.waveform
        d_o = system.frontend(m[None], r[None])[0]
        write_wav(out.with_name(out.stem + "_D.wav"), d_o.numpy())
        dump.update(tokens=res.tokens.tolist(), pseudo_tokens=res.pseudo_tokens.tolist(),
                    injected=res.injected.tolist())
    else:
        d_o, g_o, tokens = system.infer_ar(m, r, icfg, return_tokens=True)
        dump["tokens"] = tokens.tolist()
        write_wav(out.with_name(out.stem + "_D.wav"), d_o.numpy())
    write_wav(out, g_o.numpy())
    if a.tokens:
        Path(a.tokens).write_text(json.dumps(dump))
    run.produced("output", out)
    print(f"wrote {out}")


def _parse_scorers(run: Run) -> dict:
    scorers = dict(run.cfg.get("scorers") or {})
    for spec in run.args.scorer or []:
        if "=" not in spec:
            raise ConfigError(f"--scorer expects name=command, got {spec!r}")
        name, cmd = spec.split("=", 1)
        scorers[name] = cmd
    return scorers


def _evaluate_into(run: Run, system, name: str, out_dir: Path):
    manifest_path = Path(run.args.manifest) if getattr(run.args, "manifest", None) else run.path("manifests/eval.jsonl")
    manifest = load_manifest(run.use("manifest", manifest_path))
    wav_dir = out_dir / "wavs" / name if getattr(run.args, "save_wavs", False) else None
    report = evaluate(system, manifest, _icfg(run), _parse_scorers(run), wav_dir)
    json_path, csv_path = report.save(out_dir / name)
    run.produced(f"report_{name}", json_path)
    agg = report.aggregate
    print(f"{name}: " + ", ".join(f"{k}={v:.3f}" for k, v in agg.items()) + f" ({len(report.rows)} items)")
    return report


def cmd_evaluate(run: Run):
    system = _load_system(run, run.args.checkpoint)
    name = run.args.name or f"eval_{_icfg(run).mode.lower()}"
    report = _evaluate_into(run, system, name, run.path("reports"))
    if report.failed:
        print(f"{len(report.failed)} items had scorer failures", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_ablate(run: Run):
    a = run.args
    backend_cfg = dict(run.cfg["backend"])
    strategy = dict(run.cfg["strategy"])
    for flag, key in (("n_coarse", "n_coarse"), ("input_mode", "input_mode"),
                      ("output_layout", "output_layout"), ("encoder_input", "refiner_inputs")):
        if getattr(a, flag) is not None:
            backend_cfg[key] = getattr(a, flag)
    if a.decoder_encoder is not None:
        backend_cfg["refiner_split"] = a.decoder_encoder == "split"
    if a.frontend_mode is not None:
        strategy["frontend_mode"] = a.frontend_mode
    if a.aux_sisdr is not None:
        strategy["aux_sisdr"] = a.aux_sisdr
    if a.stage_training is not None:
        strategy["split_training"] = a.stage_training == "split"
    if a.no_enrollment:
        strategy["use_enrollment"] = False
    BackendConfig(**backend_cfg)
    name = a.name or "_".join(f"{k}-{v}" for k, v in sorted(backend_cfg.items())
                              if v != run.cfg["backend"].get(k)) or "baseline"
    out_dir = run.path("ablations") / name
    out_dir.mkdir(parents=True, exist_ok=True)
    run.extra["ablation"] = {"name": name, "backend": backend_cfg, "strategy": strategy, "target": a.target}
    if a.target == "backend":
        model = _train_backend(run, backend_cfg, out_dir / "backend.pt")
        system = BackendSystem(model)
    else:
        strat = StrategyConfig(**strategy)
        backend_path = None
        if strat.split_training:
            backend_path = out_dir / "backend.pt"
            _train_backend(run, {**backend_cfg}, backend_path)
        system = _train_joint(run, backend_cfg, strat, out_dir / "joint.pt", backend_path)
    _evaluate_into(run, system, "report", out_dir)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dgtse", description=__doc__.split("\n")[0])
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--preset", default="toy", choices=["toy", "full"], help="built-in defaults")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. train.codec.steps=500")
    p.add_argument("--workdir", default="runs/default", help="artifact directory")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("toy-corpus", help="synthesize a toy speaker corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--speakers", type=int, default=3)
    s.add_argument("--utts", type=int, default=40)
    s.add_argument("--test-utts", type=int, default=10)
    s.set_defaults(func=cmd_toy_corpus)

    s = sub.add_parser("mix", help="index the corpus and freeze the evaluation manifest")
    s.add_argument("--write-examples", type=int, default=0, metavar="N")
    s.set_defaults(func=cmd_mix)

    for name, func, helptext in (("train-codec", cmd_train_codec, "train the codec"),
                                 ("train-frontend", cmd_train_frontend, "pre-train the front-end"),
                                 ("train-backend", cmd_train_backend, "train the standalone back-end")):
        sub.add_parser(name, help=helptext).set_defaults(func=func)

    s = sub.add_parser("train-joint", help="train (or assemble) the two-stage system")
    s.add_argument("--init-backend", action="store_true", help="start from <workdir>/backend.pt")
    s.set_defaults(func=cmd_train_joint)

    def inference_flags(sp):
        sp.add_argument("--checkpoint", help="joint or backend archive (default <workdir>/joint.pt)")
        sp.add_argument("--mode", type=str.upper, choices=["AR", "NAR"])
        sp.add_argument("--injection-ratio", type=float, metavar="R")

    s = sub.add_parser("extract", help="extract the target speaker from one mixture")
    inference_flags(s)
    s.add_argument("--mixture", required=True)
    s.add_argument("--enrollment", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tokens", help="write chosen (and pseudo) tokens as JSON")
    s.set_defaults(func=cmd_extract)

    def eval_flags(sp):
        sp.add_argument("--manifest", help="default <workdir>/manifests/eval.jsonl")
        sp.add_argument("--scorer", action="append", metavar="NAME=COMMAND")
        sp.add_argument("--save-wavs", action="store_true")

    s = sub.add_parser("evaluate", help="score a system on the frozen manifest")
    inference_flags(s)
    eval_flags(s)
    s.add_argument("--name", help="report name under <workdir>/reports")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", help="train and evaluate one ablation variant")
    eval_flags(s)
    s.add_argument("--mode", type=str.upper, choices=["AR", "NAR"])
    s.add_argument("--injection-ratio", type=float, metavar="R")
    s.add_argument("--name")
    s.add_argument("--target", choices=["backend", "joint"], default="backend")
    s.add_argument("--n-coarse", type=int)
    s.add_argument("--input-mode", choices=["continuous", "discrete"])
    s.add_argument("--output-layout", choices=["aligned", "ref_output"])
    s.add_argument("--encoder-input", choices=["all", "mix", "ref"])
    s.add_argument("--decoder-encoder", choices=["split", "joint"])
    s.add_argument("--stage-training", choices=["split", "joint"])
    s.add_argument("--frontend-mode", choices=["frozen", "unfrozen"])
    s.add_argument("--aux-sisdr", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--no-enrollment", action="store_true", help="drop the enrollment stream")
    s.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = resolve_config(args.preset, args.config, args.set)
        torch.manual_seed(cfg["seed"])
        run = Run(args, cfg)
        code = args.func(run) or EXIT_OK
        run.record(args.command)
        return code
    except (DgtseError, ckpt.CheckpointError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
