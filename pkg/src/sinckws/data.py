"""Speech Commands ingestion: WAV decoding, labels, splits, silence and class weights."""

from __future__ import annotations

import csv
import io
import logging
import queue
import threading
import wave
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .model import CLASSES, CLIP_SAMPLES

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
KEYWORDS = CLASSES[:10]
UNKNOWN = CLASSES.index("unknown")
SILENCE = CLASSES.index("silence")
NOISE_DIR = "_background_noise_"
SILENCE_DIR = "_silence_"
SPLITS = ("train", "val", "test")
EXPECTED_KEYWORDS = {"v1": 30, "v2": 35}


class DatasetError(Exception):
    """Malformed audio or dataset layout."""


@dataclass
class AudioClip:
    samples: np.ndarray
    rate: int = SAMPLE_RATE


def decode_wav(data: bytes) -> AudioClip:
    """Decode 16-bit PCM mono 16 kHz WAV bytes to samples in [-1, 1)."""
    try:
        with wave.open(io.BytesIO(data), "rb") as wf:
            channels, width, rate, frames = wf.getnchannels(), wf.getsampwidth(), wf.getframerate(), wf.getnframes()
            raw = wf.readframes(frames)
    except (wave.Error, EOFError) as exc:
        raise DatasetError(f"not a PCM WAV file: {exc}") from exc
    if width != 2:
        raise DatasetError(f"expected 16-bit PCM, got {8 * width}-bit")
    if channels != 1:
        raise DatasetError(f"expected mono audio, got {channels} channels")
    if rate != SAMPLE_RATE:
        raise DatasetError(f"expected {SAMPLE_RATE} Hz, got {rate} Hz")
    if len(raw) != frames * 2:
        raise DatasetError(f"truncated data chunk: {len(raw)} of {frames * 2} bytes")
    pcm = np.frombuffer(raw, dtype="<i2")
    return AudioClip(pcm.astype(np.float32) / 32768.0, rate)


def encode_wav(samples: np.ndarray, rate: int = SAMPLE_RATE) -> bytes:
    """16-bit PCM mono WAV bytes; values are rounded and clipped to the int16 range."""
    pcm = np.clip(np.round(np.asarray(samples, dtype=np.float64) * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(rate)
        wf.writeframes(pcm.tobytes())
    return buf.getvalue()


def read_wav(path) -> AudioClip:
    try:
        return decode_wav(Path(path).read_bytes())
    except DatasetError as exc:
        raise DatasetError(f"{path}: {exc}") from exc


def condition_clip(clip: AudioClip, length: int = CLIP_SAMPLES) -> AudioClip:
    """Zero-pad symmetrically or centre-crop to exactly ``length`` samples."""
    x = np.asarray(clip.samples)
    n = len(x)
    if n == 0:
        raise DatasetError("empty clip")
    if n < length:
        left = (length - n) // 2
        x = np.pad(x, (left, length - n - left))
    elif n > length:
        start = (n - length) // 2
        x = x[start:start + length]
    return AudioClip(np.ascontiguousarray(x, dtype=np.float32), clip.rate)


@dataclass(frozen=True)
class Entry:
    path: str  # relative to the dataset root, forward slashes
    keyword: str
    label: int
    split: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[Entry]
    noise_files: list[str] = field(default_factory=list)
    version: str = "v1"
    weights: Optional[np.ndarray] = None

    def split(self, name: str) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    def counts(self, split: str = "train") -> np.ndarray:
        c = Counter(e.label for e in self.entries if e.split == split)
        return np.array([c.get(i, 0) for i in range(len(CLASSES))], dtype=np.int64)

    @property
    def classes(self) -> tuple:
        return CLASSES

    def class_weights(self) -> np.ndarray:
        if self.weights is None:
            self.weights = class_weights(self)
        return self.weights


def _read_list(path: Path) -> set[str]:
    return {line.strip().replace("\\", "/") for line in path.read_text().splitlines() if line.strip()}


def _label_for(keyword: str) -> int:
    if keyword in KEYWORDS:
        return KEYWORDS.index(keyword)
    if keyword == SILENCE_DIR:
        return SILENCE
    return UNKNOWN


def build_manifest(root, version: str = "v1", strict: bool = True) -> DatasetManifest:
    """Index a Speech Commands tree.

    Splits come from ``validation_list.txt`` / ``testing_list.txt``; every
    other clip is training data.  ``strict=False`` tolerates target classes
    with no samples (for small synthetic sets).
    """
    root = Path(root)
    if version not in EXPECTED_KEYWORDS:
        raise DatasetError(f"unknown dataset version {version!r}")
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} is not a directory")
    val_list, test_list = root / "validation_list.txt", root / "testing_list.txt"
    for p in (val_list, test_list):
        if not p.is_file():
            raise DatasetError(f"missing list file {p}")
    val, test = _read_list(val_list), _read_list(test_list)
    overlap = val & test
    if overlap:
        raise DatasetError(f"{len(overlap)} files listed in both validation and testing lists")

    folders = sorted(d.name for d in root.iterdir() if d.is_dir() and not d.name.startswith("_"))
    if not folders:
        raise DatasetError(f"no keyword folders under {root}")
    if len(folders) != EXPECTED_KEYWORDS[version]:
        log.warning("found %d keyword folders, %s has %d", len(folders), version, EXPECTED_KEYWORDS[version])

    entries = []
    for kw in folders + ([SILENCE_DIR] if (root / SILENCE_DIR).is_dir() else []):
        for wav in sorted((root / kw).glob("*.wav")):
            rel = f"{kw}/{wav.name}"
            split = "test" if rel in test else "val" if rel in val else "train"
            if kw == SILENCE_DIR and split == "train":
                continue  # only released test/val silence lists are used as-is
            entries.append(Entry(rel, kw, _label_for(kw), split))
    noise = sorted(f"{NOISE_DIR}/{p.name}" for p in (root / NOISE_DIR).glob("*.wav")) if (root / NOISE_DIR).is_dir() else []

    manifest = DatasetManifest(root, entries, noise, version)
    if strict:
        counts = manifest.counts("train")
        missing = [CLASSES[i] for i in range(10) if counts[i] == 0]
        if missing:
            raise DatasetError(f"no training samples for {missing}")
    manifest.weights = class_weights(manifest, strict=strict)
    return manifest


def write_manifest_csv(manifest: DatasetManifest, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        for e in manifest.entries:
            writer.writerow([e.path, CLASSES[e.label], e.split])


def read_manifest_csv(path, root, version: str = "v1", strict: bool = True) -> DatasetManifest:
    root = Path(root)
    entries = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["path", "label", "split"]:
            raise DatasetError(f"unexpected manifest header {reader.fieldnames}")
        for row in reader:
            if row["label"] not in CLASSES or row["split"] not in SPLITS:
                raise DatasetError(f"bad manifest row {row}")
            entries.append(Entry(row["path"], row["path"].split("/")[0], CLASSES.index(row["label"]), row["split"]))
    noise = sorted(f"{NOISE_DIR}/{p.name}" for p in (root / NOISE_DIR).glob("*.wav")) if (root / NOISE_DIR).is_dir() else []
    manifest = DatasetManifest(root, entries, noise, version)
    manifest.weights = class_weights(manifest, strict=strict)
    return manifest


def class_weights(manifest: DatasetManifest, strict: bool = True) -> np.ndarray:
    """Down-weight ``unknown`` so its total weight equals the mean keyword count.

    All other classes get weight 1.
    """
    counts = manifest.counts("train")
    kw = counts[:10]
    if strict and (np.any(kw == 0) or counts[UNKNOWN] == 0):
        empty = [CLASSES[i] for i in range(11) if counts[i] == 0]
        raise DatasetError(f"cannot weight empty classes {empty}")
    weights = np.ones(len(CLASSES), dtype=np.float64)
    present = kw[kw > 0]
    if counts[UNKNOWN] > 0 and len(present):
        weights[UNKNOWN] = float(Fraction(int(present.sum()), len(present)) / int(counts[UNKNOWN]))
    return weights


def silence_sampler(noise: Sequence[np.ndarray], rng: np.random.Generator, length: int = CLIP_SAMPLES,
                    scale: bool = True) -> AudioClip:
    """Random one-second crop of a random noise recording, scaled by U[0, 1]."""
    if not noise:
        raise DatasetError("no background noise recordings for silence")
    idx = int(rng.integers(len(noise)))
    src = noise[idx]
    if len(src) < length:
        raise DatasetError(f"noise recording {idx} is shorter than {length} samples")
    start = int(rng.integers(len(src) - length + 1))
    crop = np.asarray(src[start:start + length], dtype=np.float32)
    if scale:
        crop = crop * np.float32(rng.uniform(0.0, 1.0))
    return AudioClip(crop)


class ClipStore:
    """Loads and conditions clips of a manifest, keeping up to ``cache_size`` in memory."""

    def __init__(self, manifest: DatasetManifest, cache_size: int = 0):
        self.manifest = manifest
        self.cache_size = cache_size
        self._cache: dict[str, np.ndarray] = {}
        self._noise: Optional[list[np.ndarray]] = None

    def load(self, rel: str) -> np.ndarray:
        hit = self._cache.get(rel)
        if hit is not None:
            return hit
        x = condition_clip(read_wav(self.manifest.root / rel)).samples
        if len(self._cache) < self.cache_size:
            self._cache[rel] = x
        return x

    @property
    def noise(self) -> list[np.ndarray]:
        if self._noise is None:
            self._noise = [read_wav(self.manifest.root / p).samples for p in self.manifest.noise_files]
        return self._noise


def silence_count(n_entries: int, silence_fraction: float) -> int:
    """Synthesized silence clips so that they make up ``silence_fraction`` of an epoch."""
    if not 0.0 <= silence_fraction < 1.0:
        raise ValueError("silence_fraction must be in [0, 1)")
    return int(round(n_entries * silence_fraction / (1.0 - silence_fraction)))


def epoch_plan(manifest: DatasetManifest, split: str, silence_fraction: float,
               rng: np.random.Generator) -> list[Optional[Entry]]:
    """Shuffled item order for one pass; ``None`` marks a synthesized silence clip."""
    entries = manifest.split(split)
    has_silence = any(e.label == SILENCE for e in entries)
    n_sil = 0 if has_silence else silence_count(len(entries), silence_fraction)
    if n_sil and not manifest.noise_files:
        raise DatasetError("silence requested but the dataset has no background noise files")
    items: list[Optional[Entry]] = list(entries) + [None] * n_sil
    order = rng.permutation(len(items))
    return [items[i] for i in order]


def batch_iterator(manifest: DatasetManifest, split: str, batch_size: int, silence_fraction: float,
                   rng: np.random.Generator, store: Optional[ClipStore] = None,
                   prefetch: int = 0) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(clips [b, 16000], labels [b])`` for one shuffled pass over ``split``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    items = epoch_plan(manifest, split, silence_fraction, rng)
    if not items:
        raise DatasetError(f"split {split!r} is empty")
    store = store or ClipStore(manifest)

    def gen():
        for lo in range(0, len(items), batch_size):
            chunk = items[lo:lo + batch_size]
            clips = np.empty((len(chunk), CLIP_SAMPLES), dtype=np.float32)
            labels = np.empty(len(chunk), dtype=np.int64)
            for j, item in enumerate(chunk):
                if item is None:
                    clips[j] = silence_sampler(store.noise, rng).samples
                    labels[j] = SILENCE
                else:
                    clips[j] = store.load(item.path)
                    labels[j] = item.label
            yield clips, labels

    return _prefetched(gen(), prefetch) if prefetch > 0 else gen()


_DONE = object()


def _prefetched(it: Iterator, depth: int) -> Iterator:
    """Run ``it`` on a background thread through a bounded queue."""
    q: queue.Queue = queue.Queue(maxsize=depth)

    def worker():
        try:
            for item in it:
                q.put(item)
        except BaseException as exc:  # re-raised on the consumer side
            q.put(exc)
        q.put(_DONE)

    threading.Thread(target=worker, daemon=True).start()
    while True:
        item = q.get()
        if item is _DONE:
            return
        if isinstance(item, BaseException):
            raise item
        yield item
