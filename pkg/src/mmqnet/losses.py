"""The three training objectives and their weighted combination.

Reconstruction of available-modality embeddings, cross-entropy on the
category-query output, and a conditional-information penalty on the
interference-query output. The penalty is a classifier-difference estimate
of I(y; interference | category): two small MLPs predict the label from
(category, interference) and from category alone, and the mean difference
of their log-likelihoods estimates the extra information carried by the
interference features. The estimator trains on detached features; the main
model sees its frozen weights and receives gradients through the features.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 0.01

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ValueError("loss weights must be nonnegative")


def recon_loss(recon: Tensor, target: Tensor, avail: np.ndarray) -> Tensor:
    """Squared error on available modality rows, normalized by their count.

    recon/target are (B, M, d); avail is the (B, M) availability matrix.
    Returns exactly 0 when no modality is available anywhere in the batch.
    """
    avail = np.asarray(avail, dtype=np.float64)
    total = avail.sum()
    if total == 0:
        return Tensor(0.0)
    d = recon.shape[-1]
    keep = np.repeat(avail[:, :, None], d, axis=2)
    diff = ad.hadamard(ad.sub(recon, target), Tensor(keep))
    return ad.scale(ad.sum_all(ad.hadamard(diff, diff)), 1.0 / total)


def class_loss(category_out: Tensor, y_onehot: np.ndarray, mlp) -> Tensor:
    """Mean cross-entropy of mlp(category features) against one-hot labels."""
    return ad.cross_entropy_with_logits(mlp(category_out), y_onehot)


def total_loss(l_recon, l_class, l_info, w: LossWeights) -> Tensor:
    def as_t(x):
        return x if isinstance(x, Tensor) else Tensor(x)

    weighted = ad.add(ad.scale(as_t(l_recon), w.lambda1), ad.scale(as_t(l_class), w.lambda2))
    return ad.add(weighted, ad.scale(as_t(l_info), w.lambda3))


class CmiEstimator:
    """Classifier pair backing the conditional-information estimate.

    ``joint`` predicts y from (category, interference) features, ``marginal``
    from category features alone. Both carry their own Adam state so they can
    be advanced a few steps per main-model step.
    """

    def __init__(self, d_model: int, n_classes: int = 2, hidden: int = 32,
                 rng: np.random.Generator | None = None, lr: float = 6e-4):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.d_model = d_model
        self.n_classes = n_classes
        self.params: dict[str, Tensor] = {}

        def uniform(name, shape, fan_in):
            bound = 1.0 / np.sqrt(fan_in)
            self.params[name] = Tensor(rng.uniform(-bound, bound, size=shape),
                                       requires_grad=True)

        uniform("joint.w1", (2 * d_model, hidden), 2 * d_model)
        uniform("joint.b1", (hidden,), 2 * d_model)
        uniform("joint.w2", (hidden, n_classes), hidden)
        uniform("joint.b2", (n_classes,), hidden)
        uniform("marginal.w1", (d_model, hidden), d_model)
        uniform("marginal.b1", (hidden,), d_model)
        uniform("marginal.w2", (hidden, n_classes), hidden)
        uniform("marginal.b2", (n_classes,), hidden)
        self.opt = Adam(list(self.params.values()), lr=lr)

    def _mlp(self, x: Tensor, prefix: str, frozen: bool) -> Tensor:
        def p(name):
            t = self.params[f"{prefix}.{name}"]
            return Tensor(t.data) if frozen else t

        h = ad.relu(ad.bias_add(ad.matmul(x, p("w1")), p("b1")))
        return ad.bias_add(ad.matmul(h, p("w2")), p("b2"))

    def joint_logits(self, category: Tensor, interference: Tensor, frozen: bool = False) -> Tensor:
        return self._mlp(ad.concat([category, interference], axis=1), "joint", frozen)

    def marginal_logits(self, category: Tensor, frozen: bool = False) -> Tensor:
        return self._mlp(category, "marginal", frozen)

    def joint_log_probs(self, category: Tensor, interference: Tensor) -> Tensor:
        return ad.log_softmax_lastdim(self.joint_logits(category, interference, frozen=True))

    def marginal_log_probs(self, category: Tensor) -> Tensor:
        return ad.log_softmax_lastdim(self.marginal_logits(category, frozen=True))


def train_estimator(est: CmiEstimator, category: np.ndarray, interference: np.ndarray,
                    y_onehot: np.ndarray, steps: int) -> CmiEstimator:
    """Advance both classifiers `steps` Adam steps on detached features."""
    fc = Tensor(np.asarray(category, dtype=np.float64))
    fi = Tensor(np.asarray(interference, dtype=np.float64))
    for _ in range(steps):
        est.opt.zero_grad()
        ce_joint = ad.cross_entropy_with_logits(est.joint_logits(fc, fi), y_onehot)
        ce_marginal = ad.cross_entropy_with_logits(est.marginal_logits(fc), y_onehot)
        ad.backward(ad.add(ce_joint, ce_marginal))
        est.opt.step()
    return est


def cmi_estimate(est: CmiEstimator, category: Tensor, interference: Tensor,
                 y_onehot: np.ndarray) -> Tensor:
    """Mean [log p(y|category,interference) - log p(y|category)].

    Estimator weights are frozen; gradients flow into the feature tensors.
    Finite-sample estimates may be negative.
    """
    ce_joint = ad.cross_entropy_with_logits(
        est.joint_logits(category, interference, frozen=True), y_onehot)
    ce_marginal = ad.cross_entropy_with_logits(
        est.marginal_logits(category, frozen=True), y_onehot)
    return ad.sub(ce_marginal, ce_joint)
