"""Labeled synthetic multi-modal physiological recordings.

Stands in for licensed recording datasets: EEG-like channels with 1/f
background, band-limited oscillations and 50 Hz line noise, plus peripheral
channels (skin conductance events, pulse waves, respiration, temperature).
Class 1 boosts EEG alpha power and pulse rate; class 0 boosts EEG beta
power and skin-conductance event rate, with a shared per-sample intensity
latent so modalities stay mutually predictive. Generation is counter-based
per record, so datasets are reproducible and order-independent.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp, seeds
from .dsp import TimeSeries

DATASET_MAGIC = b"MMQD"
DATASET_VERSION = 1

DEFAULT_MODALITIES = (("EEG", 4), ("GSR", 1), ("PPG", 1), ("RESP", 1), ("TEMP", 1))
SPLIT_FRACTIONS = {"train": 0.70, "val": 0.15, "test": 0.15}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_samples: int
    modalities: tuple[tuple[str, int], ...] = DEFAULT_MODALITIES
    duration_s: float = 8.0
    fs_raw: float = 512.0
    missing_rate: float = 0.0
    artifact_prob: float = 0.1
    artifact_amp: float = 5.0
    class_sep: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples <= 0:
            raise ConfigError("n_samples must be positive")
        if not self.modalities:
            raise ConfigError("at least one modality required")
        if self.duration_s * dsp.TARGET_FS < dsp.WELCH_NPERSEG:
            raise ConfigError("duration too short for one 2 s analysis window")
        if self.fs_raw <= 0 or self.fs_raw % dsp.TARGET_FS != 0:
            raise ConfigError(f"fs_raw must be a positive multiple of {dsp.TARGET_FS}")
        for name, rate in (("missing_rate", self.missing_rate),
                           ("artifact_prob", self.artifact_prob)):
            if not 0.0 <= rate <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.class_sep < 0 or self.artifact_amp <= 0:
            raise ConfigError("class_sep must be >= 0 and artifact_amp > 0")

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def n_timesteps(self) -> int:
        return int(round(self.duration_s * self.fs_raw))

    def feature_lens(self) -> tuple[int, ...]:
        return tuple(ch * dsp.FEATURES_PER_CHANNEL for _, ch in self.modalities)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["modalities"] = [list(m) for m in self.modalities]
        return d

    @staticmethod
    def from_dict(d: dict) -> "GenConfig":
        d = dict(d)
        d["modalities"] = tuple((str(n), int(c)) for n, c in d["modalities"])
        return GenConfig(**d)


@dataclass(frozen=True)
class SignalRecord:
    x: tuple[tuple[TimeSeries, ...], ...]   # per modality, per channel
    a: np.ndarray                           # availability bits, length M
    y: np.ndarray                           # one-hot label

    @property
    def label(self) -> int:
        return int(np.argmax(self.y))


@dataclass
class Dataset:
    records: list[SignalRecord]
    config: GenConfig
    split: np.ndarray                       # "train"/"val"/"test" per record

    def indices(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.split == tag)


@dataclass(frozen=True)
class FeatureSet:
    vectors: tuple[np.ndarray, ...]         # per modality; zeros when missing
    avail: np.ndarray
    y: np.ndarray

    @property
    def label(self) -> int:
        return int(np.argmax(self.y))


# ---------------------------------------------------------------------------
# record synthesis


def _pink_noise(rng: np.random.Generator, n: int, fs: float) -> np.ndarray:
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    spec /= np.sqrt(np.maximum(freqs, 1.0))
    x = np.fft.irfft(spec, n)
    rms = np.sqrt(np.mean(x * x))
    return x / max(rms, 1e-12)


def _scr_kernel(t: np.ndarray, rise: float = 0.03, decay: float = 0.8) -> np.ndarray:
    k = (1.0 - np.exp(-np.maximum(t, 0.0) / rise)) * np.exp(-np.maximum(t, 0.0) / decay)
    k[t < 0] = 0.0
    return k


def _eeg_channel(rng, t, fs, y, sep, u):
    alpha_amp = 0.6 * (1.0 + sep * u * (y == 1))
    beta_amp = 0.6 * (1.0 + sep * u * (y == 0))
    jitter = rng.uniform(0.9, 1.1, size=5)
    sig = _pink_noise(rng, t.size, fs)
    for amp, f, j in zip((0.3, alpha_amp, beta_amp, 0.2, 0.4),
                         (5.5, 9.5, 21.0, 36.0, 50.0), jitter):
        sig += amp * j * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    return sig


def _gsr_channel(rng, t, fs, y, sep, u):
    rate = 2.0 * (1.0 + 1.5 * sep * u * (y == 0))
    n_events = rng.poisson(rate)
    sig = 2.0 + 0.5 * np.sin(2 * np.pi * 0.05 * t + rng.uniform(0, 2 * np.pi))
    for _ in range(n_events):
        onset = rng.uniform(0.0, t[-1])
        amp = rng.uniform(0.3, 0.6)
        sig += amp * _scr_kernel(t - onset)
    sig += 0.05 * rng.standard_normal(t.size)
    sig += 0.05 * np.sin(2 * np.pi * 50.0 * t + rng.uniform(0, 2 * np.pi))
    return sig


def _ppg_channel(rng, t, fs, y, sep, u):
    bpm = 65.0 + 25.0 * sep * u * (y == 1)
    period = 60.0 / bpm
    phase = rng.uniform(0.0, period)
    beat_times = np.arange(phase, t[-1] + period, period)
    sig = 0.05 * rng.standard_normal(t.size)
    for bt in beat_times:
        sig += np.exp(-0.5 * ((t - bt) / 0.01) ** 2)
    return sig


def _resp_channel(rng, t, fs, y, sep, u):
    f = rng.uniform(0.22, 0.28)
    sig = np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))
    sig += 0.15 * np.sin(2 * np.pi * 2 * f * t + rng.uniform(0, 2 * np.pi))
    return sig + 0.05 * rng.standard_normal(t.size)


def _temp_channel(rng, t, fs, y, sep, u):
    base = rng.uniform(36.3, 36.9)
    return base + 0.01 * t + 0.02 * rng.standard_normal(t.size)


_CHANNEL_MODELS = {
    "EEG": _eeg_channel,
    "GSR": _gsr_channel,
    "PPG": _ppg_channel,
    "RESP": _resp_channel,
    "TEMP": _temp_channel,
}


def _generic_channel(rng, t, fs, y, sep, u):
    return _pink_noise(rng, t.size, fs)


def record_label(index: int) -> int:
    """Alternating labels give exactly balanced classes by construction."""
    return index % 2


def generate_record(cfg: GenConfig, index: int) -> SignalRecord:
    """Synthesize one record; a pure function of (cfg, index)."""
    rng = seeds.stream(cfg.seed, seeds.GEN, index)
    y = record_label(index)
    u = rng.uniform(0.7, 1.3)      # shared intensity latent, ties modalities together
    n = cfg.n_timesteps
    t = np.arange(n) / cfg.fs_raw

    modalities = []
    for name, channels in cfg.modalities:
        model = _CHANNEL_MODELS.get(name, _generic_channel)
        chans = []
        for c in range(channels):
            sig = model(rng, t, cfg.fs_raw, y, cfg.class_sep, u)
            # f32 quantization keeps the on-disk round trip lossless
            sig = sig.astype(np.float32).astype(np.float64)
            chans.append(TimeSeries(sig, cfg.fs_raw, f"{name}:{c}"))
        modalities.append(tuple(chans))

    onehot = np.zeros(2)
    onehot[y] = 1.0
    return SignalRecord(x=tuple(modalities), a=np.ones(cfg.n_modalities, dtype=np.int8), y=onehot)


def _assign_splits(labels: np.ndarray, seed: int) -> np.ndarray:
    """Stratified train/val/test tags, reproducible from the seed."""
    rng = seeds.stream(seed, seeds.SPLIT)
    split = np.empty(labels.size, dtype=object)
    for cls in np.unique(labels):
        idx = np.flatnonzero(labels == cls)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(round(SPLIT_FRACTIONS["test"] * idx.size))
        n_val = int(round(SPLIT_FRACTIONS["val"] * idx.size))
        split[idx[:n_test]] = "test"
        split[idx[n_test:n_test + n_val]] = "val"
        split[idx[n_test + n_val:]] = "train"
    return split.astype(str)


def generate_dataset(cfg: GenConfig) -> Dataset:
    """Full synthesis pipeline: records, interference, missingness, splits."""
    records = [generate_record(cfg, i) for i in range(cfg.n_samples)]
    labels = np.array([r.label for r in records])
    ds = Dataset(records=records, config=cfg, split=_assign_splits(labels, cfg.seed))
    if cfg.artifact_prob > 0:
        ds = inject_interference(ds, cfg.artifact_prob, cfg.artifact_amp, cfg.seed)
    if cfg.missing_rate > 0:
        ds = apply_missingness(ds, cfg.missing_rate, cfg.seed)
    return ds


def sample_availability(rate: float, m: int, seed: int, label: int, counters: tuple[int, ...]) -> np.ndarray:
    """One Bernoulli availability mask with the uniform force-keep policy."""
    rng = seeds.stream(seed, label, *counters)
    a = (rng.random(m) >= rate).astype(np.int8)
    if a.sum() == 0:
        a[rng.integers(m)] = 1
    return a


def sample_availability_matrix(n: int, m: int, rate: float, seed: int,
                               label: int = seeds.MASK,
                               extra: tuple[int, ...] = ()) -> np.ndarray:
    """(n, M) availability masks, drawn per-record so order never matters."""
    return np.stack([sample_availability(rate, m, seed, label, extra + (i,)) for i in range(n)])


def _mask_record(rec: SignalRecord, index: int, rate: float, seed: int) -> SignalRecord:
    a = sample_availability(rate, rec.a.size, seed, seeds.MASK, (index,))
    return dataclasses.replace(rec, a=a)


def apply_missingness(ds: Dataset, rate: float, seed: int) -> Dataset:
    """Drop each (record, modality) independently with probability `rate`.

    A record that would lose every modality keeps one, chosen uniformly.
    Input records are untouched; only new availability masks are built.
    """
    if not 0.0 <= rate <= 1.0:
        raise ConfigError("missing rate must lie in [0, 1]")
    out = [_mask_record(rec, i, rate, seed) for i, rec in enumerate(ds.records)]
    return Dataset(records=out, config=ds.config, split=ds.split.copy())


def _interfere_record(rec: SignalRecord, index: int, prob: float, amp_factor: float,
                      seed: int, cfg: GenConfig) -> SignalRecord:
    rng = seeds.stream(seed, seeds.INTERFERENCE, index)
    if rng.random() >= prob:
        return rec
    avail = np.flatnonzero(rec.a)
    target = int(avail[rng.integers(avail.size)])
    burst_s = rng.uniform(0.5, 1.5)
    burst_n = min(int(round(burst_s * cfg.fs_raw)), cfg.n_timesteps)
    start = int(rng.integers(0, cfg.n_timesteps - burst_n + 1))
    freq = rng.uniform(5.0, 25.0)
    window = np.hanning(burst_n)
    tt = np.arange(burst_n) / cfg.fs_raw

    new_chans = []
    for ch in rec.x[target]:
        rms = float(np.sqrt(np.mean(ch.samples ** 2)))
        burst = amp_factor * max(rms, 1e-12) * window * np.sin(
            2 * np.pi * freq * tt + rng.uniform(0, 2 * np.pi))
        samples = ch.samples.copy()
        samples[start:start + burst_n] += burst
        samples = samples.astype(np.float32).astype(np.float64)
        new_chans.append(TimeSeries(samples, ch.fs, ch.channel_id))
    x = list(rec.x)
    x[target] = tuple(new_chans)
    return dataclasses.replace(rec, x=tuple(x))


def inject_interference(ds: Dataset, prob: float, amp_factor: float, seed: int) -> Dataset:
    """Add a 0.5-1.5 s transient burst to one available modality per affected
    record, with probability `prob` per record, independent of the label."""
    if not 0.0 <= prob <= 1.0:
        raise ConfigError("interference probability must lie in [0, 1]")
    if amp_factor <= 0:
        raise ConfigError("amp_factor must be positive")
    out = [_interfere_record(rec, i, prob, amp_factor, seed, ds.config)
           for i, rec in enumerate(ds.records)]
    return Dataset(records=out, config=ds.config, split=ds.split.copy())


# ---------------------------------------------------------------------------
# featurization


def featurize_record(rec: SignalRecord, cfg: GenConfig) -> FeatureSet:
    vectors = []
    for m, (name, channels) in enumerate(cfg.modalities):
        if rec.a[m]:
            processed = [dsp.preprocess(ch) for ch in rec.x[m]]
            vectors.append(dsp.extract_modality_features(processed))
        else:
            # placeholder only; Eq.-style masking keeps it unread downstream
            vectors.append(np.zeros(channels * dsp.FEATURES_PER_CHANNEL))
    return FeatureSet(vectors=tuple(vectors), avail=rec.a.astype(np.float64), y=rec.y.copy())


def featurize(ds: Dataset) -> list[FeatureSet]:
    return [featurize_record(rec, ds.config) for rec in ds.records]


@dataclass
class FeatureTable:
    """Column-stacked features for a whole dataset."""

    feats: list[np.ndarray]        # per modality: (n, len_m)
    avail: np.ndarray              # (n, M)
    labels: np.ndarray             # (n,) class indices
    onehot: np.ndarray             # (n, n_classes)
    split: np.ndarray              # (n,) tags

    def subset(self, idx: np.ndarray) -> "FeatureTable":
        return FeatureTable(
            feats=[f[idx] for f in self.feats],
            avail=self.avail[idx],
            labels=self.labels[idx],
            onehot=self.onehot[idx],
            split=self.split[idx],
        )

    def indices(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.split == tag)

    @property
    def n(self) -> int:
        return self.labels.size


def stack_featuresets(fsets: list[FeatureSet], split: np.ndarray) -> FeatureTable:
    m = len(fsets[0].vectors)
    feats = [np.stack([fs.vectors[j] for fs in fsets]) for j in range(m)]
    avail = np.stack([fs.avail for fs in fsets])
    onehot = np.stack([fs.y for fs in fsets])
    labels = onehot.argmax(axis=1)
    return FeatureTable(feats=feats, avail=avail, labels=labels,
                        onehot=onehot, split=np.asarray(split))


def feature_table(ds: Dataset) -> FeatureTable:
    return stack_featuresets(featurize(ds), ds.split)


def generate_feature_table(cfg: GenConfig) -> FeatureTable:
    """Streamed generate-and-featurize: one record in memory at a time.

    Byte-identical to feature_table(generate_dataset(cfg)) by construction,
    since every step draws from the same per-record streams.
    """
    labels = np.array([record_label(i) for i in range(cfg.n_samples)])
    split = _assign_splits(labels, cfg.seed)
    fsets = []
    for i in range(cfg.n_samples):
        rec = generate_record(cfg, i)
        if cfg.artifact_prob > 0:
            rec = _interfere_record(rec, i, cfg.artifact_prob, cfg.artifact_amp, cfg.seed, cfg)
        if cfg.missing_rate > 0:
            rec = _mask_record(rec, i, cfg.missing_rate, cfg.seed)
        fsets.append(featurize_record(rec, cfg))
    return stack_featuresets(fsets, split)


# ---------------------------------------------------------------------------
# dataset directory format


def save_dataset(ds: Dataset, path) -> None:
    """Write meta.json, signals.bin and labels.csv into a directory."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    cfg = ds.config

    meta = {
        "format": DATASET_MAGIC.decode(),
        "version": DATASET_VERSION,
        "config": cfg.to_dict(),
        "n_timesteps": cfg.n_timesteps,
        "splits": {tag: [int(i) for i in ds.indices(tag)] for tag in ("train", "val", "test")},
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    with open(root / "signals.bin", "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<HHII", DATASET_VERSION, cfg.n_modalities, cfg.n_samples, 0))
        for rec in ds.records:
            for chans in rec.x:
                for ch in chans:
                    fh.write(ch.samples.astype("<f4").tobytes())

    with open(root / "labels.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "y"] + [f"a_{m}" for m in range(cfg.n_modalities)])
        for i, rec in enumerate(ds.records):
            writer.writerow([i, rec.label] + [int(b) for b in rec.a])


def load_dataset(path) -> Dataset:
    root = Path(path)
    meta = json.loads((root / "meta.json").read_text())
    if meta.get("format") != DATASET_MAGIC.decode() or meta.get("version") != DATASET_VERSION:
        raise ConfigError(f"unsupported dataset format in {root}")
    cfg = GenConfig.from_dict(meta["config"])
    n_t = cfg.n_timesteps

    with open(root / "signals.bin", "rb") as fh:
        header = fh.read(16)
        magic, version, m, n, _ = struct.unpack("<4sHHII", header)
        if magic != DATASET_MAGIC or version != DATASET_VERSION:
            raise ConfigError("signals.bin header does not match dataset format")
        if m != cfg.n_modalities or n != cfg.n_samples:
            raise ConfigError("signals.bin header disagrees with meta.json")
        payload = np.frombuffer(fh.read(), dtype="<f4")

    total_ch = sum(ch for _, ch in cfg.modalities)
    if payload.size != n * total_ch * n_t:
        raise ConfigError("signals.bin payload size mismatch")

    labels = []
    masks = []
    with open(root / "labels.csv", newline="") as fh:
        for row in csv.DictReader(fh):
            labels.append(int(row["y"]))
            masks.append([int(row[f"a_{j}"]) for j in range(cfg.n_modalities)])

    records = []
    cursor = 0
    for i in range(n):
        modalities = []
        for name, channels in cfg.modalities:
            chans = []
            for c in range(channels):
                samples = payload[cursor:cursor + n_t].astype(np.float64)
                cursor += n_t
                chans.append(TimeSeries(samples, cfg.fs_raw, f"{name}:{c}"))
            modalities.append(tuple(chans))
        onehot = np.zeros(2)
        onehot[labels[i]] = 1.0
        records.append(SignalRecord(x=tuple(modalities),
                                    a=np.asarray(masks[i], dtype=np.int8), y=onehot))

    split = np.empty(n, dtype=object)
    for tag, idx in meta["splits"].items():
        split[np.asarray(idx, dtype=int)] = tag
    return Dataset(records=records, config=cfg, split=split.astype(str))
