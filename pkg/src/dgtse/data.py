"""Corpus indexing, online two-speaker mixing and evaluation manifests."""

from __future__ import annotations

import functools
import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile

from .errors import DataError
from .signal import SAMPLE_RATE, mix_at_snr, read_wav

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
ENROLL_MAX_S = 5.0
TRAIN_SEGMENT_S = 3.0
SNR_RANGE = (0.0, 5.0)
MAX_RETRIES = 20


@dataclass(frozen=True)
class Utterance:
    speaker_id: str
    utterance_id: str
    path: str
    duration_s: float

    @property
    def n_samples(self) -> int:
        return int(round(self.duration_s * SAMPLE_RATE))


@dataclass
class CorpusIndex:
    utterances: list
    skipped: list = field(default_factory=list)
    sample_rate: int = SAMPLE_RATE

    def __len__(self):
        return len(self.utterances)

    @functools.cached_property
    def by_speaker(self) -> dict:
        groups = defaultdict(list)
        for u in self.utterances:
            groups[u.speaker_id].append(u)
        return dict(sorted(groups.items()))

    @property
    def speakers(self) -> list:
        return list(self.by_speaker)

    @property
    def hours(self) -> float:
        return sum(u.duration_s for u in self.utterances) / 3600.0

    def to_json(self) -> str:
        return json.dumps({"utterances": [asdict(u) for u in self.utterances], "skipped": self.skipped},
                          indent=1)


def index_corpus(root, sample_rate: int = SAMPLE_RATE) -> CorpusIndex:
    """Index ``root/<speaker>/<utterance>.wav`` in lexicographic order.

    Unreadable files or files with the wrong rate/channel count are listed in
    ``CorpusIndex.skipped`` instead of aborting.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"corpus root {root} is not a directory")
    utts, skipped = [], []
    for spk_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for wav in sorted(spk_dir.glob("*.wav")):
            try:
                sr, data = wavfile.read(str(wav), mmap=True)
                if sr != sample_rate:
                    raise ValueError(f"sample rate {sr}")
                if data.ndim != 1:
                    raise ValueError(f"{data.shape[1]} channels")
                if len(data) == 0:
                    raise ValueError("empty")
                utts.append(Utterance(spk_dir.name, wav.stem, str(wav), len(data) / sr))
            except Exception as exc:  # noqa: BLE001 - any unreadable file is reported
                skipped.append({"path": str(wav), "reason": str(exc)})
                logger.warning("skipping %s: %s", wav, exc)
    idx = CorpusIndex(utts, skipped, sample_rate)
    if len(idx.by_speaker) < 2:
        raise DataError(f"need at least 2 speakers, found {len(idx.by_speaker)} in {root}")
    return idx


@functools.lru_cache(maxsize=512)
def load_audio(path: str) -> np.ndarray:
    return read_wav(path).samples


@dataclass
class MixtureTriplet:
    mixture: np.ndarray
    enrollment: np.ndarray
    target: np.ndarray
    interferer: np.ndarray       # scaled, so mixture == target + interferer
    snr_db: float
    speaker_ids: tuple
    utterance_ids: tuple         # (target, interferer, enrollment)
    sources: dict                # name -> [path, offset, length]


def _crop(rng, n_total: int, n: int) -> int:
    return int(rng.integers(n_total - n + 1)) if n_total > n else 0


def _draw_sources(idx: CorpusIndex, rng, segment_s, enroll_max_s):
    groups = idx.by_speaker
    speakers = list(groups)
    for _ in range(MAX_RETRIES):
        tspk = speakers[rng.integers(len(speakers))]
        if len(groups[tspk]) >= 2:
            break
    else:
        raise DataError("could not find a target speaker with at least 2 utterances")
    tutts = groups[tspk]
    t_i = int(rng.integers(len(tutts)))
    others = [i for i in range(len(tutts)) if i != t_i]
    e_i = others[rng.integers(len(others))]
    ispk_choices = [s for s in speakers if s != tspk]
    ispk = ispk_choices[rng.integers(len(ispk_choices))]
    iutt = groups[ispk][rng.integers(len(groups[ispk]))]
    tutt, eutt = tutts[t_i], tutts[e_i]

    n = min(tutt.n_samples, iutt.n_samples)
    if segment_s is not None:
        n = min(n, int(segment_s * idx.sample_rate))
    ne = min(eutt.n_samples, int(enroll_max_s * idx.sample_rate))
    sources = {
        "mixture_src": [tutt.path, _crop(rng, tutt.n_samples, n), n],
        "interferer_src": [iutt.path, _crop(rng, iutt.n_samples, n), n],
        "enroll_src": [eutt.path, _crop(rng, eutt.n_samples, ne), ne],
    }
    snr = float(rng.uniform(*SNR_RANGE))
    return sources, snr, (tspk, ispk), (tutt.utterance_id, iutt.utterance_id, eutt.utterance_id)


def _read_src(src) -> np.ndarray:
    path, off, n = src
    audio = load_audio(path)
    seg = audio[off:off + n]
    if len(seg) < n:
        seg = np.pad(seg, (0, n - len(seg)))
    return seg


def materialize(sources: dict, snr_db: float, speaker_ids=("?", "?"), utterance_ids=("?", "?", "?")) -> MixtureTriplet:
    target = _read_src(sources["mixture_src"])
    interferer = _read_src(sources["interferer_src"])
    enroll = _read_src(sources["enroll_src"])
    mix = mix_at_snr(target, interferer, snr_db)
    return MixtureTriplet(
        mixture=mix.mixture.astype(np.float32),
        enrollment=enroll.astype(np.float32),
        target=mix.target.astype(np.float32),
        interferer=mix.scaled_interferer.astype(np.float32),
        snr_db=snr_db,
        speaker_ids=tuple(speaker_ids),
        utterance_ids=tuple(utterance_ids),
        sources=sources,
    )


def sample_triplet(idx: CorpusIndex, rng_seed, segment_s: float | None = TRAIN_SEGMENT_S,
                   enroll_max_s: float = ENROLL_MAX_S) -> MixtureTriplet:
    """Draw a (mixture, enrollment, target) triplet; a pure function of ``rng_seed``.

    The target and interferer come from different speakers, the enrollment is
    a different utterance of the target speaker cropped to at most
    ``enroll_max_s``, and the SNR is uniform in [0, 5] dB. Target and
    interferer are cropped to the shorter of the two (and ``segment_s``).
    """
    rng = np.random.default_rng(rng_seed)
    sources, snr, spk, utt = _draw_sources(idx, rng, segment_s, enroll_max_s)
    return materialize(sources, snr, spk, utt)


def build_eval_manifest(idx: CorpusIndex, n_items: int, seed: int, path=None,
                        segment_s: float | None = TRAIN_SEGMENT_S, enroll_max_s: float = ENROLL_MAX_S) -> list:
    """Fixed list of triplet recipes, written as JSON lines when ``path`` is given."""
    items = []
    for i in range(n_items):
        rng = np.random.default_rng([seed, i])
        sources, snr, spk, utt = _draw_sources(idx, rng, segment_s, enroll_max_s)
        items.append({
            "id": f"item{i:05d}",
            "version": MANIFEST_VERSION,
            **sources,
            "snr_db": snr,
            "seed": [seed, i],
            "speaker_ids": list(spk),
            "utterance_ids": list(utt),
        })
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for item in items:
                fh.write(json.dumps(item) + "\n")
    return items


def load_manifest(path) -> list:
    items = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                item = json.loads(line)
                if item.get("version", MANIFEST_VERSION) > MANIFEST_VERSION:
                    raise DataError(f"manifest version {item['version']} is newer than supported")
                items.append(item)
    return items


def triplet_from_manifest(item: dict) -> MixtureTriplet:
    return materialize(item, item["snr_db"], item.get("speaker_ids", ("?", "?")),
                       item.get("utterance_ids", ("?", "?", "?")))


def collate(triplets) -> dict:
    """Stack triplets, cropping each stream to the shortest length in the batch."""
    n = min(len(t.mixture) for t in triplets)
    ne = min(len(t.enrollment) for t in triplets)
    return {
        "mixture": torch.from_numpy(np.stack([t.mixture[:n] for t in triplets])),
        "target": torch.from_numpy(np.stack([t.target[:n] for t in triplets])),
        "enrollment": torch.from_numpy(np.stack([t.enrollment[:ne] for t in triplets])),
    }


class TripletSampler:
    """Online mixing: batch ``step`` is drawn from seeds ``(seed, step, b)``."""

    def __init__(self, idx: CorpusIndex, batch_size: int = 4, seed: int = 0,
                 segment_s: float = TRAIN_SEGMENT_S, enroll_max_s: float = ENROLL_MAX_S):
        self.idx = idx
        self.batch_size = batch_size
        self.seed = seed
        self.segment_s = segment_s
        self.enroll_max_s = enroll_max_s

    def __call__(self, step: int) -> dict:
        return collate([sample_triplet(self.idx, [self.seed, step, b], self.segment_s, self.enroll_max_s)
                        for b in range(self.batch_size)])

    def fixed_batches(self, n: int, offset: int = 10**6) -> list:
        return [self(offset + i) for i in range(n)]


class FixedSampler:
    """Always returns the same batch (single-sample overfitting)."""

    def __init__(self, batch: dict):
        self.batch = batch

    def __call__(self, step: int) -> dict:
        return self.batch
