"""Missing-rate sweeps, ablations, and the mean-imputation baseline.

One model is trained per (configuration, seed) on data masked at a fixed
training missing rate, then scored on the test split at each requested rate
with freshly drawn masks. Results land in a metrics table that serializes
to CSV/JSON (and a small SVG chart) byte-reproducibly.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import seeds
from .losses import LossWeights
from .network import Model, ModelConfig
from .synth import FeatureTable, GenConfig, generate_feature_table, sample_availability_matrix
from .training import Scaler, TrainConfig, predict_logits, save_checkpoint, train

log = logging.getLogger("mmqnet.evaluation")

CSV_HEADER = "config,rate,seed,accuracy,lr_final,runtime_s"

ABLATIONS = ("full", "no_lr", "no_li")


def ablation_weights(base: LossWeights, ablation: str) -> LossWeights:
    if ablation == "full":
        return base
    if ablation == "no_lr":
        return replace(base, lambda1=0.0)
    if ablation == "no_li":
        return replace(base, lambda3=0.0)
    raise ValueError(f"unknown ablation '{ablation}'")


@dataclass(frozen=True)
class SweepSpec:
    missing_rates: tuple[float, ...] = (0.0, 0.1, 0.3, 0.5, 0.7)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    ablations: tuple[str, ...] = ("full",)
    train_rate: float = 0.3
    train_per_rate: bool = False
    include_baseline: bool = False

    def __post_init__(self):
        if any(not 0.0 <= r <= 1.0 for r in self.missing_rates):
            raise ValueError("missing rates must lie in [0, 1]")
        if list(self.missing_rates) != sorted(self.missing_rates):
            raise ValueError("missing rates must be sorted ascending")
        if not self.seeds:
            raise ValueError("at least one seed required")
        for ab in self.ablations:
            if ab not in ABLATIONS:
                raise ValueError(f"unknown ablation '{ab}'")


@dataclass(frozen=True)
class MetricsRow:
    config: str
    rate: float
    seed: int
    accuracy: float
    lr_final: float
    runtime_s: float

    def csv_row(self) -> str:
        return ",".join([self.config, repr(self.rate), str(self.seed),
                         repr(self.accuracy), repr(self.lr_final), repr(self.runtime_s)])


@dataclass
class MetricsTable:
    rows: list[MetricsRow] = field(default_factory=list)

    def append(self, row: MetricsRow) -> None:
        self.rows.append(row)

    def configs(self) -> list[str]:
        out = []
        for r in self.rows:
            if r.config not in out:
                out.append(r.config)
        return out

    def rates(self, config: str) -> list[float]:
        out = []
        for r in self.rows:
            if r.config == config and r.rate not in out:
                out.append(r.rate)
        return out

    def median_accuracy(self, config: str, rate: float) -> float:
        vals = [r.accuracy for r in self.rows if r.config == config and r.rate == rate]
        if not vals:
            raise KeyError(f"no rows for ({config}, {rate})")
        return float(np.median(vals))


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of argmax matches between score rows and labels."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.size == 0 or labels.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    pred_idx = predictions.argmax(axis=1) if predictions.ndim == 2 else predictions
    true_idx = labels.argmax(axis=1) if labels.ndim == 2 else labels
    if pred_idx.shape != true_idx.shape:
        raise ValueError(f"length mismatch: {pred_idx.shape} vs {true_idx.shape}")
    return float((pred_idx == true_idx).mean())


def linear_probe_accuracy(x_train: np.ndarray, y_train: np.ndarray,
                          x_test: np.ndarray, y_test: np.ndarray,
                          ridge: float = 1e-3) -> float:
    """Closed-form ridge probe; a deterministic separability meter."""

    def design(x):
        return np.hstack([x, np.ones((x.shape[0], 1))])

    xd = design(x_train)
    onehot = np.eye(int(y_train.max()) + 1)[y_train.astype(int)]
    gram = xd.T @ xd + ridge * np.eye(xd.shape[1])
    w = np.linalg.solve(gram, xd.T @ onehot)
    return accuracy(design(x_test) @ w, y_test)


# ---------------------------------------------------------------------------
# sweep execution


def _standardized(table: FeatureTable, train_avail: np.ndarray) -> tuple[FeatureTable, Scaler]:
    masked = FeatureTable(feats=table.feats, avail=train_avail, labels=table.labels,
                          onehot=table.onehot, split=table.split)
    scaler = Scaler.fit(masked, masked.indices("train"))
    std = FeatureTable(feats=scaler.transform(table.feats), avail=train_avail,
                       labels=table.labels, onehot=table.onehot, split=table.split)
    return std, scaler


def _train_one(table: FeatureTable, gen_cfg: GenConfig, train_cfg: TrainConfig,
               weights: LossWeights, seed: int, train_rate: float,
               use_masked_queries: bool = True, cell_dir: Path | None = None):
    n, m = table.avail.shape
    train_avail = sample_availability_matrix(n, m, train_rate, seed)
    std, scaler = _standardized(table, train_avail)
    cfg = ModelConfig(feature_lens=gen_cfg.feature_lens(),
                      use_masked_queries=use_masked_queries)
    model = Model(cfg, seeds.stream(seed, seeds.INIT))
    tcfg = replace(train_cfg, seed=seed, weights=weights)
    history_path = None
    if cell_dir is not None:
        cell_dir.mkdir(parents=True, exist_ok=True)
        history_path = cell_dir / "history.csv"
    history = train(model, std, tcfg, history_path=history_path)
    if cell_dir is not None:
        save_checkpoint(cell_dir / "params.bin", model, scaler)
    return model, scaler, std, history


def _test_masks(table: FeatureTable, rate: float, seed: int, rate_index: int) -> np.ndarray:
    test_idx = table.indices("test")
    return sample_availability_matrix(test_idx.size, table.avail.shape[1], rate,
                                      seed, label=seeds.EVAL, extra=(rate_index,))


def run_sweep(spec: SweepSpec, gen_cfg: GenConfig, train_cfg: TrainConfig,
              out_dir=None) -> MetricsTable:
    """Train per (ablation, seed) and score the test split at every rate.

    With `out_dir` set, each trained cell leaves history.csv and params.bin
    under out_dir/cells/.
    """
    table_cache: dict[int, FeatureTable] = {}

    def table_for(seed: int) -> FeatureTable:
        if seed not in table_cache:
            cfg = replace(gen_cfg, seed=seed, missing_rate=0.0)
            log.info("featurizing dataset for seed %d (n=%d)", seed, cfg.n_samples)
            table_cache[seed] = generate_feature_table(cfg)
        return table_cache[seed]

    def cell_dir(name: str) -> Path | None:
        return Path(out_dir) / "cells" / name if out_dir is not None else None

    out = MetricsTable()
    for ablation in spec.ablations:
        weights = ablation_weights(train_cfg.weights, ablation)
        for seed in spec.seeds:
            table = table_for(seed)
            test_idx = table.indices("test")
            if spec.train_per_rate:
                for ri, rate in enumerate(spec.missing_rates):
                    t0 = time.perf_counter()
                    model, scaler, std, history = _train_one(
                        table, gen_cfg, train_cfg, weights, seed, rate,
                        cell_dir=cell_dir(f"{ablation}_seed{seed}_rate{rate:g}"))
                    acc = _score(model, std, test_idx, _test_masks(table, rate, seed, ri))
                    out.append(MetricsRow(ablation, rate, seed, acc,
                                          history.final.l_recon,
                                          time.perf_counter() - t0))
            else:
                t0 = time.perf_counter()
                model, scaler, std, history = _train_one(
                    table, gen_cfg, train_cfg, weights, seed, spec.train_rate,
                    cell_dir=cell_dir(f"{ablation}_seed{seed}"))
                train_time = time.perf_counter() - t0
                for ri, rate in enumerate(spec.missing_rates):
                    t1 = time.perf_counter()
                    acc = _score(model, std, test_idx, _test_masks(table, rate, seed, ri))
                    out.append(MetricsRow(ablation, rate, seed, acc,
                                          history.final.l_recon,
                                          train_time + time.perf_counter() - t1))
            log.info("sweep cell done: %s seed=%d", ablation, seed)

    if spec.include_baseline:
        baseline = mean_impute_baseline(spec, gen_cfg, train_cfg,
                                        table_cache=table_cache, out_dir=out_dir)
        out.rows.extend(baseline.rows)
    return out


def _score(model: Model, std: FeatureTable, test_idx: np.ndarray, masks: np.ndarray) -> float:
    logits = predict_logits(model, [f[test_idx] for f in std.feats], masks)
    return accuracy(logits, std.labels[test_idx])


# ---------------------------------------------------------------------------
# mean-imputation baseline


def _impute(feats: list[np.ndarray], avail: np.ndarray,
            means: list[np.ndarray]) -> list[np.ndarray]:
    out = []
    for m, block in enumerate(feats):
        filled = block.copy()
        missing = avail[:, m] == 0
        filled[missing] = means[m]
        out.append(filled)
    return out


def mean_impute_baseline(spec: SweepSpec, gen_cfg: GenConfig, train_cfg: TrainConfig,
                         table_cache: dict[int, FeatureTable] | None = None,
                         out_dir=None) -> MetricsTable:
    """Replace missing features by training-split modality means and train the
    same transformer with no modality queries and no attention mask."""
    out = MetricsTable()
    table_cache = table_cache if table_cache is not None else {}
    for seed in spec.seeds:
        if seed not in table_cache:
            table_cache[seed] = generate_feature_table(
                replace(gen_cfg, seed=seed, missing_rate=0.0))
        table = table_cache[seed]
        n, m = table.avail.shape
        t0 = time.perf_counter()

        train_avail = sample_availability_matrix(n, m, spec.train_rate, seed)
        train_idx = table.indices("train")
        means = []
        for j, block in enumerate(table.feats):
            present = train_idx[train_avail[train_idx, j] > 0]
            means.append(block[present].mean(axis=0) if present.size else
                         np.zeros(block.shape[1]))

        imputed = _impute(table.feats, train_avail, means)
        all_avail = np.ones_like(table.avail, dtype=np.float64)
        imputed_table = FeatureTable(feats=imputed, avail=all_avail, labels=table.labels,
                                     onehot=table.onehot, split=table.split)
        std, scaler = _standardized(imputed_table, all_avail)
        cfg = ModelConfig(feature_lens=gen_cfg.feature_lens(), use_masked_queries=False)
        model = Model(cfg, seeds.stream(seed, seeds.INIT))
        history_path = None
        if out_dir is not None:
            cell = Path(out_dir) / "cells" / f"mean_impute_seed{seed}"
            cell.mkdir(parents=True, exist_ok=True)
            history_path = cell / "history.csv"
        history = train(model, std, replace(train_cfg, seed=seed), history_path=history_path)
        if out_dir is not None:
            save_checkpoint(Path(out_dir) / "cells" / f"mean_impute_seed{seed}" / "params.bin",
                            model, scaler)
        train_time = time.perf_counter() - t0

        test_idx = table.indices("test")
        for ri, rate in enumerate(spec.missing_rates):
            t1 = time.perf_counter()
            masks = _test_masks(table, rate, seed, ri)
            test_feats = [f[test_idx] for f in table.feats]
            test_imputed = scaler.transform(_impute(test_feats, masks, means))
            logits = predict_logits(model, test_imputed, np.ones_like(masks, dtype=np.float64))
            acc = accuracy(logits, table.labels[test_idx])
            out.append(MetricsRow("mean_impute", rate, seed, acc,
                                  history.final.l_recon,
                                  train_time + time.perf_counter() - t1))
        log.info("baseline cell done: seed=%d", seed)
    return out


# ---------------------------------------------------------------------------
# table emission


def emit_tables(table: MetricsTable, out_dir, plot: bool = True) -> list[Path]:
    """Write results.csv, results.json and (optionally) plot.svg."""
    if not table.rows:
        raise ValueError("refusing to emit an empty metrics table")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    written = []

    csv_path = root / "results.csv"
    csv_path.write_text("\n".join([CSV_HEADER] + [r.csv_row() for r in table.rows]) + "\n")
    written.append(csv_path)

    nested: dict = {}
    for cfg_name in table.configs():
        nested[cfg_name] = {}
        for rate in table.rates(cfg_name):
            rows = [r for r in table.rows if r.config == cfg_name and r.rate == rate]
            nested[cfg_name][repr(rate)] = {
                "rows": [{"seed": r.seed, "accuracy": r.accuracy,
                          "lr_final": r.lr_final, "runtime_s": r.runtime_s}
                         for r in rows],
                "median_accuracy": float(np.median([r.accuracy for r in rows])),
            }
    json_path = root / "results.json"
    json_path.write_text(json.dumps(nested, indent=2, sort_keys=True) + "\n")
    written.append(json_path)

    if plot:
        svg_path = root / "plot.svg"
        svg_path.write_text(_render_plot(table))
        written.append(svg_path)
    return written


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _render_plot(table: MetricsTable) -> str:
    """Median accuracy vs missing rate, one polyline per config."""
    width, height, margin = 640, 440, 60
    inner_w, inner_h = width - 2 * margin, height - 2 * margin

    def sx(rate):
        return margin + rate * inner_w

    def sy(acc):
        return height - margin - acc * inner_h

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" '
        f'y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 15}" text-anchor="middle" '
        f'font-size="14">missing rate</text>',
        f'<text x="18" y="{height // 2}" text-anchor="middle" font-size="14" '
        f'transform="rotate(-90 18 {height // 2})">test accuracy</text>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        parts.append(f'<text x="{sx(tick):.1f}" y="{height - margin + 18}" '
                     f'text-anchor="middle" font-size="11">{tick:g}</text>')
        parts.append(f'<text x="{margin - 8:.1f}" y="{sy(tick) + 4:.1f}" '
                     f'text-anchor="end" font-size="11">{tick:g}</text>')
    for ci, cfg_name in enumerate(table.configs()):
        color = _PALETTE[ci % len(_PALETTE)]
        pts = [(rate, table.median_accuracy(cfg_name, rate)) for rate in table.rates(cfg_name)]
        coords = " ".join(f"{sx(r):.2f},{sy(a):.2f}" for r, a in pts)
        parts.append(f'<polyline points="{coords}" fill="none" stroke="{color}" stroke-width="2"/>')
        for r, a in pts:
            parts.append(f'<circle cx="{sx(r):.2f}" cy="{sy(a):.2f}" r="3" fill="{color}"/>')
        ly = margin + 18 * ci
        parts.append(f'<line x1="{width - margin - 110}" y1="{ly}" x2="{width - margin - 90}" '
                     f'y2="{ly}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - margin - 84}" y="{ly + 4}" '
                     f'font-size="12">{cfg_name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
