"""Finite-difference verification suites.

Central-difference gradient checks for every tensor op and for the full
model-plus-objective composite. Shared by the `gradcheck` CLI command and
the test suite so both report the same numbers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import CmiEstimator, LossWeights, cmi_estimate, recon_loss, total_loss
from .network import Model, ModelConfig, additive_mask, build_mask

GRAD_TOL = 1e-4


@dataclass(frozen=True)
class GradReport:
    name: str
    max_rel_err: float
    tolerance: float = GRAD_TOL

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tolerance


def _rand(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def op_checks(seed: int = 0) -> list[GradReport]:
    rng = np.random.default_rng(seed)
    reports = []

    def check(name, f, *xs, eps=1e-5, tol=GRAD_TOL):
        reports.append(GradReport(name, ad.grad_check(f, list(xs), eps), tol))

    a, b = _rand(rng, 3, 4), _rand(rng, 3, 4)
    check("add", lambda x, y: ad.sum_all(ad.hadamard(ad.add(x, y), ad.add(x, y))), a, b)
    check("sub", lambda x, y: ad.sum_all(ad.hadamard(ad.sub(x, y), ad.sub(x, y))), a, b)
    check("hadamard", lambda x, y: ad.sum_all(ad.hadamard(x, y)), a, b)
    check("scale", lambda x: ad.scale(ad.sum_all(ad.hadamard(x, x)), 0.37), _rand(rng, 4, 2))
    check("matmul", lambda x, y: ad.sum_all(ad.hadamard(ad.matmul(x, y), ad.matmul(x, y))),
          _rand(rng, 3, 5), _rand(rng, 5, 2))
    check("matmul_batched",
          lambda x, y: ad.sum_all(ad.hadamard(ad.matmul(x, y), ad.matmul(x, y))),
          _rand(rng, 2, 3, 4), _rand(rng, 4, 3))
    check("bias_add", lambda x, y: ad.sum_all(ad.hadamard(ad.bias_add(x, y), ad.bias_add(x, y))),
          _rand(rng, 4, 3), _rand(rng, 3))
    check("transpose", lambda x: ad.sum_all(ad.hadamard(ad.transpose(x, (1, 0)),
                                                        ad.transpose(x, (1, 0)))),
          _rand(rng, 3, 4))
    check("reshape", lambda x: ad.sum_all(ad.hadamard(ad.reshape(x, (2, 6)),
                                                      ad.reshape(x, (2, 6)))),
          _rand(rng, 3, 4))
    check("concat", lambda x, y: ad.sum_all(ad.hadamard(ad.concat([x, y], axis=1),
                                                        ad.concat([x, y], axis=1))),
          _rand(rng, 2, 3), _rand(rng, 2, 2))
    check("slice", lambda x: ad.sum_all(ad.hadamard(
        ad.slice_(x, (slice(None), slice(1, 3))), ad.slice_(x, (slice(None), slice(1, 3))))),
        _rand(rng, 3, 4))
    check("tile_leading", lambda x: ad.sum_all(ad.hadamard(ad.tile_leading(x, 3),
                                                           ad.tile_leading(x, 3))),
          _rand(rng, 2, 4))
    check("relu", lambda x: ad.sum_all(ad.hadamard(ad.relu(x), ad.relu(x))),
          Tensor(rng.standard_normal((4, 4)) + 0.4, requires_grad=True))
    check("log", lambda x: ad.sum_all(ad.log(x)),
          Tensor(rng.uniform(0.5, 2.0, (3, 3)), requires_grad=True))
    check("mean", lambda x: ad.mean_all(ad.hadamard(x, x)), _rand(rng, 3, 4))
    check("sum", lambda x: ad.sum_all(ad.hadamard(x, x)), _rand(rng, 3, 4))
    check("mse", lambda x, y: ad.mse(x, y), _rand(rng, 3, 4), _rand(rng, 3, 4))

    y_onehot = np.eye(2)[rng.integers(0, 2, size=4)]
    check("cross_entropy_with_logits",
          lambda x: ad.cross_entropy_with_logits(x, y_onehot), _rand(rng, 4, 2))
    w_ls = Tensor(np.ones((4, 3)))
    check("log_softmax", lambda x: ad.sum_all(ad.hadamard(
        ad.log_softmax_lastdim(x), w_ls)), _rand(rng, 4, 3))

    mask = np.where(rng.random((4, 4)) < 0.3, ad.MASK_NEG, 0.0)
    np.fill_diagonal(mask, 0.0)
    w_sm = Tensor(rng.standard_normal((4, 4)))
    check("softmax_masked", lambda x: ad.sum_all(ad.hadamard(
        ad.softmax_lastdim(x, mask), w_sm)), _rand(rng, 4, 4))
    check("softmax_plain", lambda x: ad.sum_all(ad.hadamard(
        ad.softmax_lastdim(x), w_sm)), _rand(rng, 4, 4))
    w_ln = Tensor(rng.standard_normal((3, 6)))
    check("layer_norm", lambda x, g, bb: ad.sum_all(ad.hadamard(
        ad.layer_norm(x, g, bb), w_ln)),
        _rand(rng, 3, 6), Tensor(rng.uniform(0.5, 1.5, 6), requires_grad=True),
        _rand(rng, 6))
    return reports


def attention_block_check(seed: int = 0) -> GradReport:
    """Masked multi-head block at the production width (d=16, 4 heads)."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(feature_lens=(6, 5, 4), d_model=16, n_heads=4, ffn_dim=32, n_layers=1)
    model = Model(cfg, rng)
    avail = np.array([1, 0, 1])
    mask = additive_mask(build_mask(avail))[None, None, :, :]
    x = Tensor(rng.standard_normal((2, cfg.n_tokens, 16)), requires_grad=True)
    weights = Tensor(rng.standard_normal((2, cfg.n_tokens, 16)))

    block_params = [t for name, t in model.named_parameters() if name.startswith("block0")]
    for t in model.parameters():
        t.requires_grad = False
    for t in block_params:
        t.requires_grad = True

    def f(*_):
        out = model.encoder_block(x, 0, mask)
        return ad.sum_all(ad.hadamard(out, weights))

    err = ad.grad_check(f, [x] + block_params, eps=1e-5)
    return GradReport("masked_attention_block", err)


def composite_check(seed: int = 0) -> GradReport:
    """forward + weighted three-term objective on a 4-sample batch.

    A narrow model keeps the coordinate count tractable; estimator weights
    stay frozen so the check covers exactly the main-model gradient path.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(feature_lens=(5, 4, 3), d_model=8, n_heads=2, ffn_dim=12,
                      n_layers=2, cls_hidden=6)
    model = Model(cfg, rng)
    est = CmiEstimator(cfg.d_model, hidden=8, rng=rng)
    weights = LossWeights(1.0, 1.0, 0.01)

    feats = [rng.standard_normal((4, flen)) for flen in cfg.feature_lens]
    avail = np.array([[1, 1, 1], [1, 0, 1], [0, 0, 1], [1, 1, 0]], dtype=np.float64)
    y_onehot = np.eye(2)[np.array([0, 1, 1, 0])]

    def f(*_):
        out = model.forward(feats, avail)
        l_r = recon_loss(out.recon, out.recon_target, avail)
        l_c = ad.cross_entropy_with_logits(out.logits, y_onehot)
        l_i = cmi_estimate(est, out.category_out, out.interference_out, y_onehot)
        return total_loss(l_r, l_c, l_i, weights)

    err = ad.grad_check(f, model.parameters(), eps=1e-5)
    return GradReport("forward_total_loss_composite", err)


def run_gradient_suite(seed: int = 0) -> list[GradReport]:
    reports = op_checks(seed)
    reports.append(attention_block_check(seed))
    reports.append(composite_check(seed))
    return reports
