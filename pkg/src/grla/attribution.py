"""Integrated Gradients attribution with grayscale and overlay renderings.

Attribution follows the path-integral form attr_j = (x_j - b_j) * avg_k
dF_c/dx_j evaluated along the straight line from a baseline image b to the
input x. F_c is the label-branch score for the target class: the softmax
probability by default, or the raw logit. The Riemann sum uses right
endpoints by default (k/steps), with a midpoint rule available for accuracy
studies. The residual |sum(attr) - (F_c(x) - F_c(b))| is recorded on the
result as completeness_gap rather than hidden.
"""

import struct
import warnings
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import forward, label_logits
from .tensor import ShapeError, Tensor

__all__ = [
    "AttributionMap",
    "integrated_gradients",
    "render_attribution",
    "save_raw_attribution",
    "load_raw_attribution",
]

_RAW_MAGIC = b"GRAT"


@dataclass
class AttributionMap:
    """Signed per-pixel attributions (C, H, W) plus provenance metadata."""

    values: np.ndarray
    input_ref: str
    target_class: int
    steps: int
    completeness_gap: float

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise ShapeError(f"attribution values must be (C, H, W), got {self.values.shape}")


def _probability_score(model, target_class):
    def score(xt):
        probs, _, _ = forward(model, xt, lam=0.0, train_mode=False)
        idx = np.full(xt.shape[0], target_class, dtype=np.int64)
        return T.gather_cols(probs, idx)

    return score


def _logit_score(model, target_class):
    def score(xt):
        logits = label_logits(model, xt)
        idx = np.full(xt.shape[0], target_class, dtype=np.int64)
        return T.gather_cols(logits, idx)

    return score


def integrated_gradients(
    model,
    image,
    baseline,
    target_class,
    steps=100,
    rule="right",
    target="probability",
    score_fn=None,
    chunk_size=64,
    input_ref="",
):
    """Attribute F_c(image) against a baseline image.

    ``score_fn``, when given, replaces the model entirely: it must map a
    Tensor batch (N, C, H, W) to a Tensor of scores (N,) built from tensor
    ops. This is how the closed-form linear-model oracle is checked.
    Dropout is never applied (eval-mode forward), so maps are deterministic.
    """
    x = np.asarray(image, dtype=np.float64)
    b = np.asarray(baseline, dtype=np.float64)
    if x.shape != b.shape:
        raise ShapeError(f"baseline shape {b.shape} != image shape {x.shape}")
    if x.ndim != 3:
        raise ShapeError(f"image must be (C, H, W), got {x.shape}")
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if rule not in ("right", "midpoint"):
        raise ValueError(f"rule must be 'right' or 'midpoint', got {rule!r}")
    if target not in ("probability", "logit"):
        raise ValueError(f"target must be 'probability' or 'logit', got {target!r}")

    if score_fn is None:
        if target == "probability":
            score_fn = _probability_score(model, target_class)
        else:
            score_fn = _logit_score(model, target_class)
        run_dtype = model.params["stem.w"].dtype
    else:
        run_dtype = np.float64

    if rule == "right":
        alphas = np.arange(1, steps + 1, dtype=np.float64) / steps
    else:
        alphas = (np.arange(steps, dtype=np.float64) + 0.5) / steps

    diff = x - b
    grad_sum = np.zeros_like(x)
    for start in range(0, steps, chunk_size):
        a = alphas[start : start + chunk_size]
        points = b[None] + a[:, None, None, None] * diff[None]
        xt = Tensor(points, requires_grad=True, dtype=run_dtype)
        scores = score_fn(xt)
        # per-sample gradients are independent, so one backward of the sum
        # yields every step's dF/dx in xt.grad
        T.backward(T.reduce_sum(scores))
        grad_sum += xt.grad.astype(np.float64).sum(axis=0)

    values = diff * (grad_sum / steps)

    with T.no_grad():
        ends = Tensor(np.stack([x, b]), dtype=run_dtype)
        end_scores = score_fn(ends).data.astype(np.float64)
    gap = abs(float(values.sum()) - float(end_scores[0] - end_scores[1]))

    return AttributionMap(
        values=values,
        input_ref=input_ref,
        target_class=int(target_class),
        steps=int(steps),
        completeness_gap=gap,
    )


def render_attribution(amap, mode="grayscale", underlying=None):
    """Turn a signed attribution map into a displayable [0, 1] image.

    grayscale: channel-summed map, symmetric normalization by max |value|;
    0.5 is the neutral point (zero attribution), 1 the strongest positive,
    0 the strongest negative. Returns (H, W).

    overlay: signed map painted red (positive) / blue (negative) around a
    mid-gray neutral, alpha-blended at 0.5 over the underlying input image.
    Returns (3, H, W).
    """
    if mode not in ("grayscale", "overlay"):
        raise ValueError(f"mode must be 'grayscale' or 'overlay', got {mode!r}")
    signed = amap.values.sum(axis=0)
    peak = float(np.abs(signed).max())
    if peak == 0.0:
        warnings.warn("all-zero attribution map: rendering neutral image", stacklevel=2)
        unit = np.zeros_like(signed)
    else:
        unit = signed / peak  # in [-1, 1]

    if mode == "grayscale":
        return (0.5 + 0.5 * unit).astype(np.float32)

    if underlying is None:
        raise ValueError("overlay mode requires the underlying image")
    under = np.asarray(underlying, dtype=np.float64)
    if under.shape != amap.values.shape:
        raise ShapeError(f"underlying shape {under.shape} != map shape {amap.values.shape}")
    pos = np.maximum(unit, 0.0)
    neg = np.maximum(-unit, 0.0)
    color = np.empty_like(under)
    color[0] = 0.5 + 0.5 * pos - 0.5 * neg
    color[1] = 0.5 - 0.5 * pos - 0.5 * neg
    color[2] = 0.5 - 0.5 * pos + 0.5 * neg
    blended = 0.5 * color + 0.5 * under
    return np.clip(blended, 0.0, 1.0).astype(np.float32)


def save_raw_attribution(amap, path):
    """Write attributions as a flat little-endian binary tensor with header."""
    values = np.ascontiguousarray(amap.values)
    dtype_str = values.dtype.str.encode("ascii")
    with open(path, "wb") as fh:
        fh.write(_RAW_MAGIC)
        fh.write(struct.pack("<B", values.ndim))
        for dim in values.shape:
            fh.write(struct.pack("<I", dim))
        fh.write(struct.pack("<B", len(dtype_str)))
        fh.write(dtype_str)
        fh.write(values.tobytes())


def load_raw_attribution(path):
    """Read back an array written by save_raw_attribution."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _RAW_MAGIC:
        raise ValueError(f"{path}: not a raw attribution tensor")
    off = 4
    (ndim,) = struct.unpack_from("<B", blob, off)
    off += 1
    shape = []
    for _ in range(ndim):
        (dim,) = struct.unpack_from("<I", blob, off)
        shape.append(dim)
        off += 4
    (dlen,) = struct.unpack_from("<B", blob, off)
    off += 1
    dtype = np.dtype(blob[off : off + dlen].decode("ascii"))
    off += dlen
    expected = int(np.prod(shape)) * dtype.itemsize
    payload = blob[off:]
    if len(payload) != expected:
        raise ValueError(f"{path}: payload holds {len(payload)} bytes, header implies {expected}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()
