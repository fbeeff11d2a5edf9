"""Deterministic signal processing for the feature pipeline.

Filtering (50 Hz notch, 4-45 Hz bandpass), integer-ratio downsampling to
128 Hz, Welch band power, and windowed differential entropy. All operations
are pure functions on float64 arrays: same input, bit-identical output.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import signal as sps

log = logging.getLogger("mmqnet.dsp")

TARGET_FS = 128.0
NOTCH_Q = 30.0
BANDPASS_LO = 4.0
BANDPASS_HI = 45.0
FILTER_ORDER = 4
WELCH_NPERSEG = 256          # 2 s at 128 Hz
DE_WINDOW_S = 2.0
SIGMA_FLOOR = 1e-8           # clamp for zero-variance DE windows


class DspError(ValueError):
    """Invalid parameter or insufficient data for a DSP operation."""


@dataclass(frozen=True)
class TimeSeries:
    """One channel of signal: float64 samples at a fixed sampling rate."""

    samples: np.ndarray
    fs: float
    channel_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        object.__setattr__(self, "samples", samples)
        if self.fs <= 0:
            raise DspError(f"sampling rate must be positive, got {self.fs}")
        if samples.ndim != 1:
            raise DspError("TimeSeries samples must be one-dimensional")
        if not np.isfinite(samples).all():
            raise DspError("TimeSeries samples must be finite")

    def __len__(self) -> int:
        return len(self.samples)


@dataclass(frozen=True)
class BandSpec:
    name: str
    lo_hz: float
    hi_hz: float

    def __post_init__(self):
        if not 0 < self.lo_hz < self.hi_hz:
            raise DspError(f"invalid band edges for {self.name}: [{self.lo_hz}, {self.hi_hz}]")


# The canonical five analysis bands, in feature order.
CANONICAL_BANDS = (
    BandSpec("theta", 4.0, 7.0),
    BandSpec("alpha", 8.0, 10.0),
    BandSpec("slow_alpha", 8.0, 13.0),
    BandSpec("beta", 14.0, 29.0),
    BandSpec("gamma", 30.0, 45.0),
)

N_BANDS = len(CANONICAL_BANDS)
FEATURES_PER_CHANNEL = 2 * N_BANDS  # DE block then PSD block


@lru_cache(maxsize=64)
def _notch_design(f0: float, fs: float):
    return sps.iirnotch(f0, NOTCH_Q, fs=fs)


@lru_cache(maxsize=64)
def _bandpass_design(lo: float, hi: float, fs: float):
    return sps.butter(FILTER_ORDER, [lo, hi], btype="bandpass", fs=fs, output="sos")


def notch_filter(x: TimeSeries, f0: float = 50.0) -> TimeSeries:
    """Remove a narrow line component at f0 with a biquad notch (Q=30)."""
    if f0 >= x.fs / 2:
        raise DspError(f"notch frequency {f0} Hz is at or above Nyquist ({x.fs / 2} Hz)")
    b, a = _notch_design(float(f0), float(x.fs))
    y = sps.lfilter(b, a, x.samples)
    return TimeSeries(y, x.fs, x.channel_id)


def bandpass_4_45(x: TimeSeries) -> TimeSeries:
    """4-45 Hz zero-phase Butterworth bandpass."""
    if x.fs < 100:
        raise DspError(f"sampling rate {x.fs} Hz leaves no margin above the 45 Hz band edge")
    return bandpass(x, BANDPASS_LO, BANDPASS_HI)


def bandpass(x: TimeSeries, lo: float, hi: float) -> TimeSeries:
    """Zero-phase Butterworth bandpass between lo and hi Hz (SOS realization)."""
    if not 0 < lo < hi < x.fs / 2:
        raise DspError(f"band [{lo}, {hi}] Hz invalid for fs={x.fs}")
    sos = sps.butter(FILTER_ORDER, [lo, hi], btype="bandpass", fs=x.fs, output="sos")
    y = sps.sosfiltfilt(sos, x.samples)
    return TimeSeries(y, x.fs, x.channel_id)


def downsample_128(x: TimeSeries) -> TimeSeries:
    """Decimate to 128 Hz. Requires an integer rate ratio and a pre-bandlimited input."""
    ratio = x.fs / TARGET_FS
    if abs(ratio - round(ratio)) > 1e-9:
        raise DspError(f"sampling rate {x.fs} is not an integer multiple of {TARGET_FS}")
    step = int(round(ratio))
    if step == 1:
        return TimeSeries(x.samples.copy(), TARGET_FS, x.channel_id)
    return TimeSeries(x.samples[::step].copy(), TARGET_FS, x.channel_id)


def welch_psd(x: TimeSeries, bands: Sequence[BandSpec] = CANONICAL_BANDS) -> np.ndarray:
    """Per-band power: Welch density (2 s Hann segments, 50% overlap) integrated over each band."""
    if len(x) < WELCH_NPERSEG:
        raise DspError(f"need at least {WELCH_NPERSEG} samples for one Welch segment, got {len(x)}")
    freqs, density = sps.welch(
        x.samples,
        fs=x.fs,
        window="hann",
        nperseg=WELCH_NPERSEG,
        noverlap=WELCH_NPERSEG // 2,
        detrend=False,
    )
    powers = np.empty(len(bands), dtype=np.float64)
    for i, band in enumerate(bands):
        if band.hi_hz >= x.fs / 2:
            raise DspError(f"band {band.name} exceeds Nyquist for fs={x.fs}")
        sel = (freqs >= band.lo_hz) & (freqs <= band.hi_hz)
        powers[i] = np.trapezoid(density[sel], freqs[sel])
    return powers


def diff_entropy(x: TimeSeries, window_s: float = DE_WINDOW_S) -> np.ndarray:
    """Differential entropy 0.5*ln(2*pi*e*sigma^2) per non-overlapping window, in nats."""
    win = int(round(window_s * x.fs))
    if len(x) < win:
        raise DspError(f"signal shorter than one {window_s} s window ({win} samples)")
    n_win = len(x) // win
    out = np.empty(n_win, dtype=np.float64)
    for k in range(n_win):
        seg = x.samples[k * win:(k + 1) * win]
        sigma = float(np.std(seg))
        if sigma < SIGMA_FLOOR:
            log.debug("zero-variance DE window %d on %s, clamping sigma to %g",
                      k, x.channel_id or "<unnamed>", SIGMA_FLOOR)
            sigma = SIGMA_FLOOR
        out[k] = 0.5 * math.log(2.0 * math.pi * math.e * sigma * sigma)
    return out


def preprocess(x: TimeSeries, notch_hz: float = 50.0) -> TimeSeries:
    """Standard chain: notch, 4-45 Hz bandpass, downsample to 128 Hz."""
    return downsample_128(bandpass_4_45(notch_filter(x, notch_hz)))


def channel_features(x: TimeSeries, bands: Sequence[BandSpec] = CANONICAL_BANDS) -> np.ndarray:
    """Length-10 feature block for one preprocessed channel.

    Layout: mean windowed DE of the band-filtered signal for each band,
    then Welch power for each band.
    """
    de = np.empty(len(bands), dtype=np.float64)
    for i, band in enumerate(bands):
        band_sig = bandpass(x, band.lo_hz, band.hi_hz)
        de[i] = float(np.mean(diff_entropy(band_sig)))
    psd = welch_psd(x, bands)
    return np.concatenate([de, psd])


def extract_modality_features(channels: Sequence[TimeSeries]) -> np.ndarray:
    """Concatenated per-channel feature blocks for one preprocessed modality."""
    if not channels:
        raise DspError("modality has no channels")
    return np.concatenate([channel_features(ch) for ch in channels])
