"""Multi-masked querying transformer.

Feature vectors of the available modalities are embedded into a shared
16-dimensional token space; missing modalities are replaced by learnable
modality query tokens, and two extra learnable tokens (category and
interference queries) are appended. A per-sample attention mask keeps every
token from attending to missing-modality keys (each token always sees its
own key), so outputs are provably independent of missing-slot content.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

D_MODEL = 16
N_HEADS = 4
FFN_DIM = 128
N_LAYERS = 2
CLS_HIDDEN = 32
N_CLASSES = 2


@dataclass(frozen=True)
class ModelConfig:
    feature_lens: tuple[int, ...]          # raw feature length per modality
    d_model: int = D_MODEL
    n_heads: int = N_HEADS
    ffn_dim: int = FFN_DIM
    n_layers: int = N_LAYERS
    cls_hidden: int = CLS_HIDDEN
    n_classes: int = N_CLASSES
    # Baseline switch: False drops the modality queries and the attention
    # mask, i.e. a plain transformer over (imputed) modality embeddings.
    use_masked_queries: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ad.ShapeError("model dim must divide evenly into heads")
        if not self.feature_lens:
            raise ad.ShapeError("at least one modality required")

    @property
    def n_modalities(self) -> int:
        return len(self.feature_lens)

    @property
    def n_tokens(self) -> int:
        return self.n_modalities + 2

    def to_dict(self) -> dict:
        return {
            "feature_lens": list(self.feature_lens),
            "d_model": self.d_model,
            "n_heads": self.n_heads,
            "ffn_dim": self.ffn_dim,
            "n_layers": self.n_layers,
            "cls_hidden": self.cls_hidden,
            "n_classes": self.n_classes,
            "use_masked_queries": self.use_masked_queries,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(
            feature_lens=tuple(d["feature_lens"]),
            d_model=d["d_model"],
            n_heads=d["n_heads"],
            ffn_dim=d["ffn_dim"],
            n_layers=d["n_layers"],
            cls_hidden=d["cls_hidden"],
            n_classes=d["n_classes"],
            use_masked_queries=d["use_masked_queries"],
        )


def sinusoidal_positions(n_tokens: int, d_model: int) -> np.ndarray:
    """Fixed sine/cosine encoding over token index."""
    pos = np.arange(n_tokens, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, i / d_model)
    pe = np.zeros((n_tokens, d_model), dtype=np.float64)
    pe[:, 0::2] = np.sin(angles)
    pe[:, 1::2] = np.cos(angles)
    return pe


def build_mask(avail: np.ndarray) -> np.ndarray:
    """Boolean allowed-key matrix for one sample.

    allowed(i, j) is True when j is an available-modality token, a query
    token (category/interference), or equal to i (self-attention floor).
    """
    avail = np.asarray(avail)
    m = avail.shape[0]
    a_tilde = np.concatenate([avail.astype(bool), [True, True]])
    return np.eye(m + 2, dtype=bool) | a_tilde[None, :]


def additive_mask(allowed: np.ndarray) -> np.ndarray:
    """0 where allowed, -1e9 where not (added to attention logits)."""
    return np.where(allowed, 0.0, ad.MASK_NEG)


@dataclass
class ForwardResult:
    logits: Tensor                  # (B, n_classes)
    modality_out: Tensor            # (B, M, d) decoded modality rows
    category_out: Tensor            # (B, d)
    interference_out: Tensor        # (B, d)
    recon: Tensor                   # (B, M, d) reconstruction-head output
    recon_target: Tensor            # (B, M, d) embedding targets, missing rows zeroed
    attention: list[np.ndarray] = field(default_factory=list)


class Model:
    """Parameter container plus forward pass."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.params: dict[str, Tensor] = {}
        d = cfg.d_model

        def uniform(name: str, shape: tuple[int, ...], fan_in: int):
            bound = 1.0 / np.sqrt(fan_in)
            t = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)
            self.params[name] = t
            return t

        for m, flen in enumerate(cfg.feature_lens):
            uniform(f"embed.{m}.w", (flen, d), flen)
            uniform(f"embed.{m}.b", (d,), flen)
        if cfg.use_masked_queries:
            uniform("queries.modality", (cfg.n_modalities, d), d)
        uniform("queries.category", (1, d), d)
        uniform("queries.interference", (1, d), d)
        for layer in range(cfg.n_layers):
            p = f"block{layer}"
            for proj in ("q", "k", "v", "o"):
                uniform(f"{p}.attn.{proj}.w", (d, d), d)
                if proj != "k":
                    # a key bias shifts every logit row uniformly and cancels
                    # in the softmax; it would be an exactly-dead parameter
                    uniform(f"{p}.attn.{proj}.b", (d,), d)
            uniform(f"{p}.ffn.w1", (d, cfg.ffn_dim), d)
            uniform(f"{p}.ffn.b1", (cfg.ffn_dim,), d)
            uniform(f"{p}.ffn.w2", (cfg.ffn_dim, d), cfg.ffn_dim)
            uniform(f"{p}.ffn.b2", (d,), cfg.ffn_dim)
            for ln in ("ln1", "ln2"):
                self.params[f"{p}.{ln}.g"] = Tensor(np.ones(d), requires_grad=True)
                self.params[f"{p}.{ln}.b"] = Tensor(np.zeros(d), requires_grad=True)
        uniform("recon.w", (d, d), d)
        uniform("recon.b", (d,), d)
        uniform("cls.w1", (d, cfg.cls_hidden), d)
        uniform("cls.b1", (cfg.cls_hidden,), d)
        uniform("cls.w2", (cfg.cls_hidden, cfg.n_classes), cfg.cls_hidden)
        uniform("cls.b2", (cfg.n_classes,), cfg.cls_hidden)

        self.positions = sinusoidal_positions(cfg.n_tokens, d)

    # -- parameter bookkeeping ------------------------------------------

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return sorted(self.params.items())

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            if name not in arrays:
                raise ad.ShapeError(f"checkpoint is missing tensor '{name}'")
            if arrays[name].shape != t.data.shape:
                raise ad.ShapeError(
                    f"tensor '{name}' has shape {arrays[name].shape}, expected {t.data.shape}")
        extra = set(arrays) - set(self.params)
        if extra:
            raise ad.ShapeError(f"checkpoint has unexpected tensor '{sorted(extra)[0]}'")
        for name, t in self.named_parameters():
            t.data = arrays[name].astype(np.float64).copy()

    # -- forward pieces --------------------------------------------------

    def embed_modalities(self, feats: Sequence[np.ndarray]) -> Tensor:
        """Project per-modality raw features into (B, M, d) token embeddings."""
        cfg = self.cfg
        if len(feats) != cfg.n_modalities:
            raise ad.ShapeError(f"expected {cfg.n_modalities} modalities, got {len(feats)}")
        cols = []
        for m, x in enumerate(feats):
            x = np.asarray(x, dtype=np.float64)
            if x.ndim != 2 or x.shape[1] != cfg.feature_lens[m]:
                raise ad.ShapeError(
                    f"modality {m}: features {x.shape}, expected (B, {cfg.feature_lens[m]})")
            e = ad.bias_add(ad.matmul(Tensor(x), self.params[f"embed.{m}.w"]),
                            self.params[f"embed.{m}.b"])
            cols.append(ad.reshape(e, (x.shape[0], 1, cfg.d_model)))
        return ad.concat(cols, axis=1)

    def assemble_tokens(self, embedded: Tensor, avail: np.ndarray) -> Tensor:
        """Mix embeddings with modality queries per availability, append the
        category and interference queries, and add positional encoding."""
        cfg = self.cfg
        b, m, d = embedded.shape
        avail = np.asarray(avail, dtype=np.float64).reshape(b, m)
        if cfg.use_masked_queries:
            keep = np.repeat(avail[:, :, None], d, axis=2)
            queries = ad.tile_leading(self.params["queries.modality"], b)
            rows = ad.add(ad.hadamard(embedded, Tensor(keep)),
                          ad.hadamard(queries, Tensor(1.0 - keep)))
        else:
            rows = embedded
        qc = ad.tile_leading(self.params["queries.category"], b)
        qi = ad.tile_leading(self.params["queries.interference"], b)
        tokens = ad.concat([rows, qc, qi], axis=1)
        pos = np.broadcast_to(self.positions, (b, cfg.n_tokens, d)).copy()
        return ad.add(tokens, Tensor(pos))

    def encoder_block(self, x: Tensor, layer: int, mask: np.ndarray | None,
                      attention_sink: list[np.ndarray] | None = None) -> Tensor:
        cfg = self.cfg
        p = self.params
        b, t, d = x.shape
        heads, hd = cfg.n_heads, cfg.d_model // cfg.n_heads
        pre = f"block{layer}"

        def proj(kind: str) -> Tensor:
            y = ad.matmul(x, p[f"{pre}.attn.{kind}.w"])
            if kind != "k":
                y = ad.bias_add(y, p[f"{pre}.attn.{kind}.b"])
            return ad.transpose(ad.reshape(y, (b, t, heads, hd)), (0, 2, 1, 3))

        q, k, v = proj("q"), proj("k"), proj("v")
        logits = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
        att = ad.softmax_lastdim(logits, mask)
        if attention_sink is not None:
            attention_sink.append(att.data.copy())
        mixed = ad.reshape(ad.transpose(ad.matmul(att, v), (0, 2, 1, 3)), (b, t, d))
        out = ad.bias_add(ad.matmul(mixed, p[f"{pre}.attn.o.w"]), p[f"{pre}.attn.o.b"])
        x = ad.layer_norm(ad.add(x, out), p[f"{pre}.ln1.g"], p[f"{pre}.ln1.b"])
        h = ad.relu(ad.bias_add(ad.matmul(x, p[f"{pre}.ffn.w1"]), p[f"{pre}.ffn.b1"]))
        ff = ad.bias_add(ad.matmul(h, p[f"{pre}.ffn.w2"]), p[f"{pre}.ffn.b2"])
        return ad.layer_norm(ad.add(x, ff), p[f"{pre}.ln2.g"], p[f"{pre}.ln2.b"])

    def classify(self, category_out: Tensor) -> Tensor:
        p = self.params
        h = ad.relu(ad.bias_add(ad.matmul(category_out, p["cls.w1"]), p["cls.b1"]))
        return ad.bias_add(ad.matmul(h, p["cls.w2"]), p["cls.b2"])

    def forward(self, feats: Sequence[np.ndarray], avail: np.ndarray,
                capture_attention: bool = False) -> ForwardResult:
        """Full pass: embed, assemble, encode, split, decode heads."""
        cfg = self.cfg
        avail = np.asarray(avail, dtype=np.float64)
        b = avail.shape[0]
        if b == 0:
            raise ad.ShapeError("empty batch")
        m = cfg.n_modalities

        embedded = self.embed_modalities(feats)
        tokens = self.assemble_tokens(embedded, avail)

        if cfg.use_masked_queries:
            allowed = np.stack([build_mask(avail[i]) for i in range(b)])
            mask = additive_mask(allowed)[:, None, :, :]     # broadcast over heads
        else:
            mask = None
        sink: list[np.ndarray] | None = [] if capture_attention else None
        z = tokens
        for layer in range(cfg.n_layers):
            z = self.encoder_block(z, layer, mask, sink)

        f_mod = ad.slice_(z, (slice(None), slice(0, m), slice(None)))
        f_cat = ad.slice_(z, (slice(None), m, slice(None)))
        f_int = ad.slice_(z, (slice(None), m + 1, slice(None)))
        recon = ad.bias_add(ad.matmul(f_mod, self.params["recon.w"]), self.params["recon.b"])
        logits = self.classify(f_cat)
        # Targets are the pre-masking embeddings with missing rows zeroed at
        # the source, so no output ever depends on missing-slot content.
        keep = np.repeat((avail > 0)[:, :, None], cfg.d_model, axis=2)
        return ForwardResult(
            logits=logits,
            modality_out=f_mod,
            category_out=f_cat,
            interference_out=f_int,
            recon=recon,
            recon_target=ad.mask_rows(embedded, keep),
            attention=sink or [],
        )


def split_outputs(z: Tensor, n_modalities: int) -> tuple[Tensor, Tensor, Tensor]:
    """Decompose encoder output rows into (modality, category, interference) parts."""
    if z.shape[-2] != n_modalities + 2:
        raise ad.ShapeError(f"expected {n_modalities + 2} token rows, got {z.shape}")
    lead = (slice(None),) * (len(z.shape) - 2)
    f_mod = ad.slice_(z, lead + (slice(0, n_modalities), slice(None)))
    f_cat = ad.slice_(z, lead + (n_modalities, slice(None)))
    f_int = ad.slice_(z, lead + (n_modalities + 1, slice(None)))
    return f_mod, f_cat, f_int
