"""Learnable band-pass filterbank built from pairs of cutoff frequencies.

Each filter is the difference of two windowed sinc low-pass filters.  The
stored (trainable) values are unconstrained; the effective cutoffs are

    f1 = clip(min_low_hz + |low|, <= nyquist - min_band_hz)
    f2 = clip(f1 + min_band_hz + |band|, <= nyquist)

so any real-valued raw parameters give a valid band.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .ops import grouped_conv1d
from .tensor import Tensor, check_finite, record

N_FFT = 4096
CSV_HEADER = ["filter_id", "f1_hz", "f2_hz", "tap_index", "tap_value", "fft_bin_hz", "fft_magnitude"]


@dataclass(frozen=True)
class SincConvConfig:
    n_filters: int = 40
    kernel_length: int = 101
    stride: int = 8
    sample_rate: int = 16000
    min_low_hz: float = 30.0
    min_band_hz: float = 50.0

    def __post_init__(self):
        if self.n_filters < 1:
            raise ValueError("n_filters must be >= 1")
        if self.kernel_length < 1 or self.kernel_length % 2 == 0:
            raise ValueError("kernel_length must be odd so the filter has a centre tap")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        if self.min_low_hz + self.min_band_hz > self.nyquist:
            raise ValueError("min_low_hz + min_band_hz exceeds the Nyquist frequency")

    @property
    def nyquist(self) -> float:
        return self.sample_rate / 2.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class SincFilterParams:
    """Lower and upper cutoff of one band, in Hz."""

    f1: float
    f2: float


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_initialize(config: SincConvConfig) -> list[SincFilterParams]:
    """Bands of a triangular mel filterbank: band ``i`` spans mel points ``i .. i+2``."""
    points = mel_to_hz(np.linspace(hz_to_mel(config.min_low_hz), hz_to_mel(config.nyquist),
                                   config.n_filters + 2))
    points[0], points[-1] = config.min_low_hz, config.nyquist
    bands = [SincFilterParams(float(points[i]), float(points[i + 2])) for i in range(config.n_filters)]
    narrow = [i for i, b in enumerate(bands) if b.f2 - b.f1 < config.min_band_hz]
    if narrow:
        raise ValueError(
            f"{config.n_filters} mel bands leave band(s) {narrow} narrower than "
            f"min_band_hz={config.min_band_hz}"
        )
    return bands


def params_to_raw(params: list[SincFilterParams], config: SincConvConfig) -> tuple[np.ndarray, np.ndarray]:
    """Invert the reparametrization for valid cutoff pairs."""
    f1 = np.array([p.f1 for p in params], dtype=np.float64)
    f2 = np.array([p.f2 for p in params], dtype=np.float64)
    low = f1 - config.min_low_hz
    band = f2 - f1 - config.min_band_hz
    if np.any(low < 0) or np.any(band < 0):
        raise ValueError("cutoffs violate min_low_hz / min_band_hz")
    return low, band


def effective_cutoffs(low, band, config: SincConvConfig) -> tuple[np.ndarray, np.ndarray]:
    f1, f2, _, _ = _cutoffs(np.asarray(low, dtype=np.float64), np.asarray(band, dtype=np.float64), config)
    return f1, f2


def _cutoffs(low, band, config):
    nyq = config.nyquist
    f1_raw = config.min_low_hz + np.abs(low)
    f1_free = f1_raw <= nyq - config.min_band_hz
    f1 = np.where(f1_free, f1_raw, nyq - config.min_band_hz)
    f2_raw = f1 + config.min_band_hz + np.abs(band)
    f2_free = f2_raw <= nyq
    f2 = np.where(f2_free, f2_raw, nyq)
    return f1, f2, f1_free, f2_free


def tap_offsets(config: SincConvConfig) -> np.ndarray:
    half = (config.kernel_length - 1) // 2
    return np.arange(-half, half + 1, dtype=np.float64)


@functools.lru_cache(maxsize=8)
def _cos_table(kernel_length: int, n_fft: int) -> np.ndarray:
    half = (kernel_length - 1) // 2
    n = np.arange(-half, half + 1, dtype=np.float64)
    omega = 2.0 * np.pi * np.arange(n_fft // 2 + 1) / n_fft
    table = np.cos(np.outer(omega, n))
    table.setflags(write=False)
    return table


def build_filters(low: Tensor, band: Tensor, config: SincConvConfig, normalize: bool = True) -> Tensor:
    """Construct the ``[F, 1, L]`` filter taps from raw cutoff parameters.

    Taps are ``2 f2 sinc(2 pi f2 n) - 2 f1 sinc(2 pi f1 n)`` with frequencies
    normalized by the sample rate, Hamming-windowed.  With ``normalize`` each
    filter is divided by its peak magnitude response on an ``N_FFT`` grid.
    Differentiable with respect to ``low`` and ``band``.
    """
    lo = low.data.astype(np.float64)
    bw = band.data.astype(np.float64)
    if lo.shape != (config.n_filters,) or bw.shape != (config.n_filters,):
        raise ValueError(f"expected {config.n_filters} low/band values")
    check_finite(lo, "build_filters")
    check_finite(bw, "build_filters")
    sr = config.sample_rate
    f1, f2, f1_free, f2_free = _cutoffs(lo, bw, config)
    a1, a2 = f1[:, None] / sr, f2[:, None] / sr
    n = tap_offsets(config)[None, :]
    window = np.hamming(config.kernel_length)[None, :]
    # sin(2 pi a n) / (pi n) == 2a * np.sinc(2 a n)
    raw = (2 * a2 * np.sinc(2 * a2 * n) - 2 * a1 * np.sinc(2 * a1 * n)) * window

    if normalize:
        table = _cos_table(config.kernel_length, N_FFT)
        response = raw @ table.T  # [F, bins]
        peak_bin = np.argmax(np.abs(response), axis=1)
        rows = np.arange(config.n_filters)
        peak = response[rows, peak_bin]
        scale = np.abs(peak)
        taps = raw / scale[:, None]
    else:
        taps = raw
    dtype = low.dtype

    def backward_fn(gy):
        G = gy.reshape(config.n_filters, config.kernel_length).astype(np.float64)
        if normalize:
            sign = np.sign(peak)
            proj = (G * raw).sum(axis=1) / scale ** 2
            G = G / scale[:, None] - (sign * proj)[:, None] * table[peak_bin]
        G = G * window
        d_f2 = (G * 2 * np.cos(2 * np.pi * a2 * n)).sum(axis=1) / sr
        d_f1 = -(G * 2 * np.cos(2 * np.pi * a1 * n)).sum(axis=1) / sr
        d_f2 = np.where(f2_free, d_f2, 0.0)
        d_f1_total = np.where(f1_free, d_f1 + d_f2, 0.0)
        g_low = d_f1_total * np.sign(lo)
        g_band = d_f2 * np.sign(bw)
        return g_low.astype(dtype), g_band.astype(dtype)

    out = Tensor(taps[:, None, :].astype(dtype))
    return record("build_filters", (low, band), out, backward_fn)


def sinc_forward(audio: Tensor, low: Tensor, band: Tensor, config: SincConvConfig) -> Tensor:
    """Valid strided convolution of ``[1, T]`` (or ``[n, 1, T]``) audio with every band."""
    length = audio.shape[-1]
    if audio.shape[-2] != 1:
        raise ValueError(f"sinc_forward expects mono audio, got shape {audio.shape}")
    if length < config.kernel_length:
        raise ValueError(f"clip of {length} samples is shorter than the {config.kernel_length}-tap filters")
    filters = build_filters(low, band, config)
    return grouped_conv1d(audio, filters, stride=config.stride)


class SincConv:
    """Holds the raw trainable cutoffs of one filterbank layer."""

    def __init__(self, config: SincConvConfig, params: Optional[list[SincFilterParams]] = None,
                 dtype=np.float32):
        self.config = config
        low, band = params_to_raw(params or mel_initialize(config), config)
        self.low = Tensor(low.astype(dtype), requires_grad=True, name="sinc.low")
        self.band = Tensor(band.astype(dtype), requires_grad=True, name="sinc.band")

    def parameters(self) -> list[Tensor]:
        return [self.low, self.band]

    def __call__(self, audio: Tensor) -> Tensor:
        return sinc_forward(audio, self.low, self.band, self.config)

    def filters(self, normalize: bool = True) -> np.ndarray:
        return build_filters(self.low, self.band, self.config, normalize).data[:, 0, :]

    def cutoffs(self) -> list[SincFilterParams]:
        f1, f2 = effective_cutoffs(self.low.data, self.band.data, self.config)
        return [SincFilterParams(float(a), float(b)) for a, b in zip(f1, f2)]


@dataclass
class FilterRecord:
    filter_id: int
    f1_hz: float
    f2_hz: float
    taps: np.ndarray
    bin_hz: np.ndarray
    magnitude: np.ndarray


def filter_spectrum(taps: np.ndarray, sample_rate: int, n_fft: int = N_FFT) -> tuple[np.ndarray, np.ndarray]:
    mag = np.abs(np.fft.rfft(taps, n_fft))
    return np.fft.rfftfreq(n_fft, 1.0 / sample_rate), mag


def export_filters(low, band, config: SincConvConfig, n_fft: int = N_FFT) -> list[FilterRecord]:
    low_t = low if isinstance(low, Tensor) else Tensor(np.asarray(low, dtype=np.float64))
    band_t = band if isinstance(band, Tensor) else Tensor(np.asarray(band, dtype=np.float64))
    taps = build_filters(low_t, band_t, config).data[:, 0, :].astype(np.float64)
    f1, f2 = effective_cutoffs(low_t.data, band_t.data, config)
    records = []
    for i in range(config.n_filters):
        bins, mag = filter_spectrum(taps[i], config.sample_rate, n_fft)
        records.append(FilterRecord(i, float(f1[i]), float(f2[i]), taps[i], bins, mag))
    return records


def write_filters_csv(records: list[FilterRecord], path) -> int:
    """Long format: one row per tap, then one row per FFT bin.  Returns the row count."""
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for rec in records:
            half = (len(rec.taps) - 1) // 2
            for j, v in enumerate(rec.taps):
                writer.writerow([rec.filter_id, repr(rec.f1_hz), repr(rec.f2_hz), j - half, repr(float(v)), "", ""])
                rows += 1
            for hz, mag in zip(rec.bin_hz, rec.magnitude):
                writer.writerow([rec.filter_id, repr(rec.f1_hz), repr(rec.f2_hz), "", "", repr(float(hz)), repr(float(mag))])
                rows += 1
    return rows


def read_filters_csv(path) -> list[FilterRecord]:
    by_id: dict[int, dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_HEADER:
            raise ValueError(f"unexpected filter CSV header {reader.fieldnames}")
        for row in reader:
            fid = int(row["filter_id"])
            entry = by_id.setdefault(fid, {"f1": float(row["f1_hz"]), "f2": float(row["f2_hz"]),
                                           "taps": [], "bins": [], "mag": []})
            if row["tap_index"]:
                entry["taps"].append(float(row["tap_value"]))
            else:
                entry["bins"].append(float(row["fft_bin_hz"]))
                entry["mag"].append(float(row["fft_magnitude"]))
    return [FilterRecord(fid, e["f1"], e["f2"], np.array(e["taps"]), np.array(e["bins"]), np.array(e["mag"]))
            for fid, e in sorted(by_id.items())]
