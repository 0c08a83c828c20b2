"""Dual-branch adversarial classifier.

A configurable residual convolutional feature extractor feeds two heads: a
label classifier (softmax over classes) and a domain classifier (single
logit) that sees the features through a gradient reversal layer. The label
branch never passes through the GRL.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor

__all__ = [
    "DannConfig",
    "DannModel",
    "build_dann",
    "forward",
    "label_logits",
    "predict_proba",
    "parameter_count",
    "desk_config",
    "resnet50_shape",
]


@dataclass(frozen=True)
class DannConfig:
    """Architecture description. ``stages`` lists (filters, blocks, stride)."""

    input_shape: tuple = (3, 32, 32)
    feature_dim: int = 512
    num_classes: int = 2
    dropout_rate: float = 0.5
    stages: tuple = ((16, 2, 1), (32, 2, 2))
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(
            self, "stages", tuple(tuple(int(v) for v in s) for s in self.stages)
        )
        self.validate()

    def validate(self):
        if len(self.input_shape) != 3 or any(v < 1 for v in self.input_shape):
            raise ValueError(f"input_shape must be (channels, height, width), got {self.input_shape}")
        if self.feature_dim < 1:
            raise ValueError(f"feature_dim must be positive, got {self.feature_dim}")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if not self.stages:
            raise ValueError("at least one extractor stage is required")
        for s in self.stages:
            if len(s) != 3 or s[0] < 1 or s[1] < 1 or s[2] < 1:
                raise ValueError(f"stage must be (filters, blocks, stride) of positive ints, got {s}")
        # 3x3 convs with pad 1: spatial size after a stride-s stage start
        h, w = self.input_shape[1], self.input_shape[2]
        for filters, blocks, stride in self.stages:
            h = (h + 2 - 3) // stride + 1
            w = (w + 2 - 3) // stride + 1
            if h < 1 or w < 1:
                raise ValueError(
                    f"extractor_spec underflows spatially at stage {(filters, blocks, stride)}"
                )

    def to_dict(self):
        return {
            "input_shape": list(self.input_shape),
            "feature_dim": self.feature_dim,
            "num_classes": self.num_classes,
            "dropout_rate": self.dropout_rate,
            "stages": [list(s) for s in self.stages],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            input_shape=tuple(d["input_shape"]),
            feature_dim=d["feature_dim"],
            num_classes=d["num_classes"],
            dropout_rate=d["dropout_rate"],
            stages=tuple(tuple(s) for s in d["stages"]),
            seed=d["seed"],
        )


def desk_config(**overrides):
    """Small configuration that trains in minutes on a CPU."""
    base = dict(
        input_shape=(3, 32, 32),
        feature_dim=64,
        num_classes=2,
        dropout_rate=0.5,
        stages=((8, 1, 2), (16, 1, 2), (32, 1, 2)),
        seed=0,
    )
    base.update(overrides)
    return DannConfig(**base)


def resnet50_shape(**overrides):
    """Stage layout scaled toward the ResNet-50 silhouette (basic blocks)."""
    base = dict(
        input_shape=(3, 224, 224),
        feature_dim=512,
        num_classes=2,
        dropout_rate=0.5,
        stages=((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2)),
        seed=0,
    )
    base.update(overrides)
    return DannConfig(**base)


def _block_specs(config):
    """Yield (name, in_ch, out_ch, stride, has_skip_conv) for every block."""
    in_ch = config.stages[0][0]
    for si, (filters, blocks, stride) in enumerate(config.stages):
        for bi in range(blocks):
            s = stride if bi == 0 else 1
            skip = s != 1 or in_ch != filters
            yield f"stage{si}.block{bi}", in_ch, filters, s, skip
            in_ch = filters


class DannModel:
    """Parameter container; use module-level ``forward``/``predict_proba``."""

    def __init__(self, config, params):
        self.config = config
        self.params = params

    def named_parameters(self):
        return self.params

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    @property
    def parameter_count(self):
        return sum(p.size for p in self.params.values())

    def state_arrays(self):
        return {name: p.data for name, p in self.params.items()}


def _he_conv(rng, out_ch, in_ch, k, dtype):
    std = np.sqrt(2.0 / (in_ch * k * k))
    return (rng.standard_normal((out_ch, in_ch, k, k)) * std).astype(dtype)


def _he_affine(rng, in_dim, out_dim, dtype):
    std = np.sqrt(2.0 / in_dim)
    return (rng.standard_normal((in_dim, out_dim)) * std).astype(dtype)


def build_dann(config):
    """Initialize a model: He fan-in weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(config.seed)
    dtype = T.default_dtype()
    params = {}

    def add_conv(name, in_ch, out_ch, k):
        params[f"{name}.w"] = Tensor(_he_conv(rng, out_ch, in_ch, k, dtype), requires_grad=True)
        # conv bias kept (F,1,1) so it broadcasts over NCHW activations
        params[f"{name}.b"] = Tensor(np.zeros((out_ch, 1, 1), dtype=dtype), requires_grad=True)

    def add_affine(name, in_dim, out_dim):
        params[f"{name}.w"] = Tensor(_he_affine(rng, in_dim, out_dim, dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros((out_dim,), dtype=dtype), requires_grad=True)

    in_ch = config.input_shape[0]
    add_conv("stem", in_ch, config.stages[0][0], 3)
    for name, bin_ch, bout_ch, stride, skip in _block_specs(config):
        add_conv(f"{name}.conv1", bin_ch, bout_ch, 3)
        add_conv(f"{name}.conv2", bout_ch, bout_ch, 3)
        if skip:
            add_conv(f"{name}.skip", bin_ch, bout_ch, 1)
    add_affine("fc", config.stages[-1][0], config.feature_dim)
    add_affine("label_head", config.feature_dim, config.num_classes)
    add_affine("domain_head", config.feature_dim, 1)
    return DannModel(config, params)


def parameter_count(config):
    """Closed-form parameter count for a configuration."""
    total = 0

    def conv(in_ch, out_ch, k):
        return out_ch * in_ch * k * k + out_ch

    total += conv(config.input_shape[0], config.stages[0][0], 3)
    for _, in_ch, out_ch, _, skip in _block_specs(config):
        total += conv(in_ch, out_ch, 3) + conv(out_ch, out_ch, 3)
        if skip:
            total += conv(in_ch, out_ch, 1)
    total += config.stages[-1][0] * config.feature_dim + config.feature_dim
    total += config.feature_dim * config.num_classes + config.num_classes
    total += config.feature_dim * 1 + 1
    return total


def _extract_features(model, x, train_mode, rng):
    """Shared trunk: input batch -> feature vector (N, feature_dim)."""
    cfg = model.config
    p = model.params
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x), dtype=p["stem.w"].dtype)
    if x.ndim != 4 or tuple(x.shape[1:]) != cfg.input_shape:
        raise T.ShapeError(
            f"forward: expected batch of shape (N, {cfg.input_shape}), got {tuple(x.shape)}"
        )
    if train_mode and cfg.dropout_rate > 0 and rng is None:
        raise ValueError("forward: train_mode with dropout requires an rng")

    h = T.relu(T.conv2d(x, p["stem.w"], stride=1, padding=1) + p["stem.b"])
    for name, _, _, stride, skip in _block_specs(cfg):
        y = T.relu(T.conv2d(h, p[f"{name}.conv1.w"], stride=stride, padding=1) + p[f"{name}.conv1.b"])
        y = T.conv2d(y, p[f"{name}.conv2.w"], stride=1, padding=1) + p[f"{name}.conv2.b"]
        if skip:
            s = T.conv2d(h, p[f"{name}.skip.w"], stride=stride, padding=0) + p[f"{name}.skip.b"]
        else:
            s = h
        h = T.relu(y + s)

    pooled = T.global_avg_pool(h)
    feat = T.relu(pooled @ p["fc.w"] + p["fc.b"])
    return T.dropout(feat, cfg.dropout_rate, train_mode, rng)


def forward(model, x, lam, train_mode=False, rng=None):
    """Run the dual-branch network.

    Returns (class_probs (N,C), domain_logits (N,1), features (N,feature_dim)).
    The domain branch is domain_head(gradient_reversal(features, lam)); the
    label branch consumes the features directly.
    """
    p = model.params
    features = _extract_features(model, x, train_mode, rng)

    class_logits = features @ p["label_head.w"] + p["label_head.b"]
    class_probs = T.softmax(class_logits, axis=1)

    reversed_feat = T.gradient_reversal(features, lam)
    domain_logits = reversed_feat @ p["domain_head.w"] + p["domain_head.b"]

    if not np.all(np.isfinite(class_logits.data)) or not np.all(np.isfinite(domain_logits.data)):
        raise T.NonFiniteError("forward: non-finite activations in head outputs")
    return class_probs, domain_logits, features


def label_logits(model, x):
    """Label-branch raw scores (pre-softmax), eval mode, graph recorded."""
    features = _extract_features(model, x, train_mode=False, rng=None)
    return features @ model.params["label_head.w"] + model.params["label_head.b"]


def predict_proba(model, x):
    """Eval-mode class probabilities, no graph recorded."""
    with T.no_grad():
        probs, _, _ = forward(model, x, lam=0.0, train_mode=False)
    return probs.data
