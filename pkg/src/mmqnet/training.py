"""Adam training loop with alternating estimator updates.

Per batch: forward pass, reconstruction and classification losses, five
estimator steps on detached category/interference features, conditional-
information estimate with frozen estimator weights, then one Adam step on
the main model. Shuffling, initialization and the estimator all draw from
labeled substreams of one seed, so runs are bit-reproducible.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import seeds
from .autodiff import Adam, Tensor
from .losses import CmiEstimator, LossWeights, cmi_estimate, recon_loss, total_loss, train_estimator
from .network import Model
from .synth import FeatureTable

log = logging.getLogger("mmqnet.training")

HISTORY_HEADER = "epoch,L_R,L_C,L_I,L_total,train_acc,val_acc"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 6e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 300
    batch_size: int = 128
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    estimator_steps: int = 5

    def __post_init__(self):
        if self.lr <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise ValueError("invalid Adam hyperparameters")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["weights"] = [self.weights.lambda1, self.weights.lambda2, self.weights.lambda3]
        return d


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    l_recon: float
    l_class: float
    l_info: float
    l_total: float
    train_acc: float
    val_acc: float

    def csv_row(self) -> str:
        return ",".join([str(self.epoch)] + [repr(v) for v in (
            self.l_recon, self.l_class, self.l_info, self.l_total,
            self.train_acc, self.val_acc)])


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)

    @property
    def final(self) -> EpochStats | None:
        return self.epochs[-1] if self.epochs else None

    def write_csv(self, path) -> None:
        lines = [HISTORY_HEADER] + [e.csv_row() for e in self.epochs]
        Path(path).write_text("\n".join(lines) + "\n")


class TrainAbort(RuntimeError):
    """Numeric failure mid-training; carries the history up to the abort."""

    def __init__(self, message: str, history: TrainHistory):
        super().__init__(message)
        self.history = history


@dataclass
class Scaler:
    """Per-modality feature standardization fitted on the training split."""

    means: list[np.ndarray]
    stds: list[np.ndarray]

    @staticmethod
    def fit(table: FeatureTable, idx: np.ndarray) -> "Scaler":
        means, stds = [], []
        for m, feats in enumerate(table.feats):
            present = idx[table.avail[idx, m] > 0]
            if present.size == 0:
                means.append(np.zeros(feats.shape[1]))
                stds.append(np.ones(feats.shape[1]))
                continue
            block = feats[present]
            means.append(block.mean(axis=0))
            stds.append(np.maximum(block.std(axis=0), 1e-8))
        return Scaler(means=means, stds=stds)

    def transform(self, feats: list[np.ndarray]) -> list[np.ndarray]:
        return [(f - mu) / sd for f, mu, sd in zip(feats, self.means, self.stds)]

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for m, (mu, sd) in enumerate(zip(self.means, self.stds)):
            out[f"norm.{m}.mean"] = mu
            out[f"norm.{m}.std"] = sd
        return out

    @staticmethod
    def from_arrays(arrays: dict[str, np.ndarray], n_modalities: int) -> "Scaler":
        means = [arrays[f"norm.{m}.mean"] for m in range(n_modalities)]
        stds = [arrays[f"norm.{m}.std"] for m in range(n_modalities)]
        return Scaler(means=means, stds=stds)


def predict_logits(model: Model, feats: list[np.ndarray], avail: np.ndarray,
                   batch_size: int = 256) -> np.ndarray:
    n = avail.shape[0]
    out = np.empty((n, model.cfg.n_classes))
    for lo in range(0, n, batch_size):
        hi = min(lo + batch_size, n)
        res = model.forward([f[lo:hi] for f in feats], avail[lo:hi])
        out[lo:hi] = res.logits.data
    return out


def train(model: Model, table: FeatureTable, cfg: TrainConfig,
          history_path=None, checkpoint_path=None) -> TrainHistory:
    """Run the optimization loop on a standardized feature table.

    `table` must already carry the training availability masks; rows tagged
    "train" are optimized over, "val" only scored. On a numeric failure the
    last completed epoch's parameters are written to `checkpoint_path` (when
    given) and TrainAbort is raised.
    """
    train_idx = table.indices("train")
    val_idx = table.indices("val")
    if train_idx.size == 0:
        raise ValueError("feature table has no training rows")

    opt = Adam(model.parameters(), lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    est = None
    if cfg.weights.lambda3 > 0:
        est = CmiEstimator(model.cfg.d_model, model.cfg.n_classes,
                           rng=seeds.stream(cfg.seed, seeds.ESTIMATOR), lr=cfg.lr)

    history = TrainHistory()
    if history_path is not None:
        Path(history_path).write_text(HISTORY_HEADER + "\n")
    snapshot = model.state_arrays()

    for epoch in range(cfg.epochs):
        perm = seeds.stream(cfg.seed, seeds.SHUFFLE, epoch).permutation(train_idx.size)
        order = train_idx[perm]
        sums = np.zeros(4)
        correct = 0
        try:
            for lo in range(0, order.size, cfg.batch_size):
                idx = order[lo:lo + cfg.batch_size]
                feats_b = [f[idx] for f in table.feats]
                avail_b = table.avail[idx]
                y_b = table.onehot[idx]

                model.zero_grad()
                out = model.forward(feats_b, avail_b)
                l_r = recon_loss(out.recon, out.recon_target, avail_b)
                l_c = ad.cross_entropy_with_logits(out.logits, y_b)
                if est is not None:
                    train_estimator(est, out.category_out.data, out.interference_out.data,
                                    y_b, cfg.estimator_steps)
                    l_i = cmi_estimate(est, out.category_out, out.interference_out, y_b)
                else:
                    l_i = Tensor(0.0)
                loss = total_loss(l_r, l_c, l_i, cfg.weights)
                ad.backward(loss)
                opt.step()

                w = idx.size
                sums += w * np.array([l_r.item(), l_c.item(), l_i.item(), loss.item()])
                correct += int((out.logits.data.argmax(axis=1) == table.labels[idx]).sum())
        except ad.NumericError as exc:
            model.load_state_arrays(snapshot)
            if checkpoint_path is not None:
                ad.save_tensors(checkpoint_path, snapshot)
            log.error("numeric failure in epoch %d: %s", epoch, exc)
            raise TrainAbort(f"numeric failure in epoch {epoch}: {exc}", history) from exc

        means = sums / order.size
        val_acc = 0.0
        if val_idx.size:
            logits = predict_logits(model, [f[val_idx] for f in table.feats],
                                    table.avail[val_idx], batch_size=cfg.batch_size)
            val_acc = float((logits.argmax(axis=1) == table.labels[val_idx]).mean())
        stats = EpochStats(epoch=epoch, l_recon=means[0], l_class=means[1],
                           l_info=means[2], l_total=means[3],
                           train_acc=correct / order.size, val_acc=val_acc)
        history.epochs.append(stats)
        if history_path is not None:
            with open(history_path, "a") as fh:
                fh.write(stats.csv_row() + "\n")
        snapshot = model.state_arrays()
        log.debug("epoch %d: total=%.4f train_acc=%.3f val_acc=%.3f",
                  epoch, stats.l_total, stats.train_acc, stats.val_acc)

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, model)
    return history


def save_checkpoint(path, model: Model, scaler: Scaler | None = None) -> None:
    arrays = model.state_arrays()
    if scaler is not None:
        arrays.update(scaler.arrays())
    ad.save_tensors(path, arrays)


def load_checkpoint(path, model: Model) -> Scaler | None:
    """Restore model tensors (strict names and shapes) and any stored scaler."""
    arrays = ad.load_tensors(path)
    norm = {k: v for k, v in arrays.items() if k.startswith("norm.")}
    model.load_state_arrays({k: v for k, v in arrays.items() if not k.startswith("norm.")})
    if norm:
        return Scaler.from_arrays(norm, model.cfg.n_modalities)
    return None
