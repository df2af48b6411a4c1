"""Frozen text encoder and synthetic image-feature generation.

The text encoder is a small pre-LN transformer over embedding rows: the
caller supplies per-position d_model vectors (a prompt sequence), and the
encoder returns a unit-norm d_feat feature. All encoder parameters are
frozen; gradients flow only through the input embeddings, which is what
lets a prompt-tuning step update class rows without touching the model.

Image features come either from a feature file (see data / store modules)
or from the synthetic generator here: class means on the unit sphere plus
seeded Gaussian noise, renormalized.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .data import FeatureDataset
from .errors import DomainError, UsageError


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions, temperature, and the encoder's own seed.

    The encoder seed is deliberately separate from any run seed: the
    encoder stands in for a fixed pretrained model, so sweeping run seeds
    must not change it.
    """

    tau: float = 0.01
    d_model: int = 32
    d_feat: int = 32
    n_layers: int = 2
    n_heads: int = 4
    max_seq_len: int = 16
    seed: int = 0

    def __post_init__(self):
        if not (self.tau > 0):
            raise DomainError(f"tau must be positive, got {self.tau}")
        if self.d_model % self.n_heads != 0:
            raise UsageError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        for name in ("d_model", "d_feat", "n_layers", "n_heads", "max_seq_len"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")


@dataclass
class LayerParams:
    ln1_gain: nm.DenseTensor
    ln1_bias: nm.DenseTensor
    wq: nm.DenseTensor
    bq: nm.DenseTensor
    wk: nm.DenseTensor
    bk: nm.DenseTensor
    wv: nm.DenseTensor
    bv: nm.DenseTensor
    wo: nm.DenseTensor
    bo: nm.DenseTensor
    ln2_gain: nm.DenseTensor
    ln2_bias: nm.DenseTensor
    w1: nm.DenseTensor
    b1: nm.DenseTensor
    w2: nm.DenseTensor
    b2: nm.DenseTensor

    def in_order(self):
        return (
            self.ln1_gain, self.ln1_bias,
            self.wq, self.bq, self.wk, self.bk, self.wv, self.bv,
            self.wo, self.bo,
            self.ln2_gain, self.ln2_bias,
            self.w1, self.b1, self.w2, self.b2,
        )


@dataclass
class TextEncoderParams:
    """Frozen transformer weights. requires_grad is false on every tensor."""

    config: ModelConfig
    positional: nm.DenseTensor = field(repr=False)
    layers: list[LayerParams] = field(repr=False)
    final_gain: nm.DenseTensor = field(repr=False)
    final_bias: nm.DenseTensor = field(repr=False)
    projection: nm.DenseTensor = field(repr=False)

    def all_tensors(self):
        out = [self.positional]
        for layer in self.layers:
            out.extend(layer.in_order())
        out.extend([self.final_gain, self.final_bias, self.projection])
        return out

    def content_hash(self) -> str:
        """sha256 over every parameter's bytes in a fixed traversal order."""
        h = hashlib.sha256()
        c = self.config
        h.update(
            f"{c.d_model}:{c.d_feat}:{c.n_layers}:{c.n_heads}:{c.max_seq_len}".encode()
        )
        for t in self.all_tensors():
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def _frozen(arr: np.ndarray) -> nm.DenseTensor:
    return nm.DenseTensor(arr, requires_grad=False)


def init_text_encoder(config: ModelConfig) -> TextEncoderParams:
    """Draw frozen weights from Gaussian(0, 0.02); LayerNorm gains 1, biases 0.

    The draw order is fixed, so one seed gives one bitwise-identical
    parameter set for the life of the format.
    """
    rng = np.random.default_rng(config.seed)
    d = config.d_model
    hidden = 4 * d

    def gauss(*shape):
        return _frozen(rng.standard_normal(shape) * 0.02)

    positional = gauss(config.max_seq_len, d)
    layers = []
    for _ in range(config.n_layers):
        layers.append(LayerParams(
            ln1_gain=_frozen(np.ones(d)),
            ln1_bias=_frozen(np.zeros(d)),
            wq=gauss(d, d), bq=gauss(d),
            wk=gauss(d, d), bk=gauss(d),
            wv=gauss(d, d), bv=gauss(d),
            wo=gauss(d, d), bo=gauss(d),
            ln2_gain=_frozen(np.ones(d)),
            ln2_bias=_frozen(np.zeros(d)),
            w1=gauss(d, hidden), b1=gauss(hidden),
            w2=gauss(hidden, d), b2=gauss(d),
        ))
    final_gain = _frozen(np.ones(d))
    final_bias = _frozen(np.zeros(d))
    projection = gauss(d, config.d_feat)
    return TextEncoderParams(
        config=config,
        positional=positional,
        layers=layers,
        final_gain=final_gain,
        final_bias=final_bias,
        projection=projection,
    )


def encode_text(params: TextEncoderParams, seq) -> nm.DenseTensor:
    """Map a prompt sequence to a unit-norm d_feat feature vector.

    `seq` is either a PromptSequence (anything with .assemble()) or an
    already-assembled (L, d_model) DenseTensor. Pipeline: add positional
    embeddings, n_layers pre-LN blocks, final LayerNorm, take the last
    position, project, L2-normalize. Differentiable w.r.t. the input rows
    only; the frozen parameters never accumulate grads.
    """
    rows = seq.assemble() if hasattr(seq, "assemble") else seq
    if rows.data.ndim != 2 or rows.data.shape[1] != params.config.d_model:
        raise UsageError(
            f"expected (L, {params.config.d_model}) embedding rows, "
            f"got shape {rows.data.shape}"
        )
    length = rows.data.shape[0]
    if length < 1:
        raise UsageError("empty prompt sequence")
    if length > params.config.max_seq_len:
        raise UsageError(
            f"sequence length {length} exceeds max_seq_len {params.config.max_seq_len}"
        )

    h = nm.add(rows, _frozen(params.positional.data[:length]))
    for layer in params.layers:
        attn_in = nm.layernorm(h, layer.ln1_gain, layer.ln1_bias)
        attn_out = nm.multi_head_attention(
            attn_in,
            layer.wq, layer.bq, layer.wk, layer.bk, layer.wv, layer.bv,
            layer.wo, layer.bo,
            params.config.n_heads,
        )
        h = nm.add(h, attn_out)
        mlp_in = nm.layernorm(h, layer.ln2_gain, layer.ln2_bias)
        mid = nm.gelu(nm.add(nm.matmul(mlp_in, layer.w1), layer.b1))
        h = nm.add(h, nm.add(nm.matmul(mid, layer.w2), layer.b2))
    h = nm.layernorm(h, params.final_gain, params.final_bias)
    pooled = nm.take_row(h, length - 1)
    return nm.l2_normalize(nm.matmul(pooled, params.projection))


def encode_text_batch(params: TextEncoderParams, seqs) -> np.ndarray:
    """Plain-array features for many sequences, outside any tape."""
    return np.stack([encode_text(params, s).data for s in seqs], axis=0)


# --------------------------------------------------------------------------
# Synthetic image features
# --------------------------------------------------------------------------

def sphere_means(n_classes: int, d_feat: int, seed: int) -> np.ndarray:
    """K class means drawn uniformly on the unit sphere (seeded)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    v = rng.standard_normal((n_classes, d_feat))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def synthetic_feature(
    means: np.ndarray, label: int, item_id: int, seed: int, sigma: float = 0.25
) -> np.ndarray:
    """normalize(mean_label + sigma * noise), noise keyed by (seed, label, id)."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, label, int(item_id)]))
    f = means[label] + sigma * rng.standard_normal(means.shape[1])
    norm = np.linalg.norm(f)
    if norm == 0.0:
        raise DomainError("synthetic feature collapsed to zero norm")
    return f / norm


def make_synthetic_dataset(
    n_classes: int,
    items_per_class: int,
    d_feat: int,
    seed: int,
    sigma: float = 0.25,
    means: np.ndarray | None = None,
    class_names: list[str] | None = None,
    noise_seed: int | None = None,
) -> FeatureDataset:
    """Generate a labeled unit-norm feature set around per-class means.

    When `means` is given it must be (n_classes, d_feat) unit rows; this is
    how the harness injects means tied to text features. `noise_seed`
    (default: `seed`) keys only the per-item noise, so an alternate
    distribution can share means with a different draw.
    """
    if noise_seed is None:
        noise_seed = seed
    if means is None:
        means = sphere_means(n_classes, d_feat, seed)
    means = np.asarray(means, dtype=np.float64)
    if means.shape != (n_classes, d_feat):
        raise UsageError(
            f"means shape {means.shape} does not match ({n_classes}, {d_feat})"
        )
    if class_names is None:
        class_names = [f"class{i:02d}" for i in range(n_classes)]
    if len(class_names) != n_classes:
        raise UsageError("class_names length does not match n_classes")

    item_ids = []
    labels = []
    feats = []
    next_id = 0
    for c in range(n_classes):
        for _ in range(items_per_class):
            item_ids.append(next_id)
            labels.append(c)
            feats.append(synthetic_feature(means, c, next_id, noise_seed, sigma))
            next_id += 1
    return FeatureDataset(
        item_ids=np.array(item_ids, dtype=np.uint64),
        labels=np.array(labels, dtype=np.int64),
        features=np.stack(feats, axis=0),
        class_names=list(class_names),
    )
