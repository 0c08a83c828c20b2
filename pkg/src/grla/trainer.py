"""SGD training loop with gradient clipping, lambda/LR schedules, target-label
masking, binary checkpoints, and a line-delimited run manifest.

Target-domain class labels pass through this module untouched and are
excluded from the class loss by domain index inside the objectives; nothing
here branches on their values, which is what the leakage experiments verify.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .evaluation import compute_metrics
from .model import DannConfig, DannModel, forward, predict_proba
from .objectives import (
    LAMBDA_KINDS,
    domain_bce,
    lambda_value,
    lr_value,
    masked_cross_entropy,
)
from .tensor import Tensor

__all__ = [
    "TrainConfig",
    "RunManifest",
    "DivergenceError",
    "CheckpointError",
    "sgd_step",
    "train",
    "evaluate",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "INJECT_LEAK_MODES",
]

CHECKPOINT_MAGIC = b"GRLA"
CHECKPOINT_VERSION = 1

# deliberate-bug fixtures for regression-testing the leakage experiments:
# "soft_mask" includes target rows in the class loss at weight 0.01,
# "unmasked" includes them at full weight.
INJECT_LEAK_MODES = ("soft_mask", "unmasked")


class DivergenceError(RuntimeError):
    """Training loss went non-finite or past the divergence threshold."""

    def __init__(self, message, checkpoint_path=None, manifest=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
        self.manifest = manifest


class CheckpointError(RuntimeError):
    """Checkpoint file malformed: bad magic, version, or checksum."""


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "sgd"
    lr: float = 0.1
    weight_decay: float = 1e-4
    batch_size: int = 32
    epochs: int = 50
    max_grad_norm: float = 1.0
    lambda_kind: str = "parabolic_up"
    seed: int = 0
    eval_every: int = 1  # 0 disables mid-run evaluation
    divergence_threshold: float = 1e4

    def __post_init__(self):
        if self.optimizer != "sgd":
            raise ValueError(f"unsupported optimizer {self.optimizer!r}; only 'sgd'")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.max_grad_norm <= 0:
            raise ValueError(f"max_grad_norm must be > 0, got {self.max_grad_norm}")
        if self.lambda_kind not in LAMBDA_KINDS:
            raise ValueError(
                f"unknown lambda_kind {self.lambda_kind!r}; choose one of {LAMBDA_KINDS}"
            )
        if self.eval_every < 0:
            raise ValueError(f"eval_every must be >= 0, got {self.eval_every}")

    def to_dict(self):
        return {
            "optimizer": self.optimizer,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "max_grad_norm": self.max_grad_norm,
            "lambda_kind": self.lambda_kind,
            "seed": self.seed,
            "eval_every": self.eval_every,
            "divergence_threshold": self.divergence_threshold,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class RunManifest:
    """Config snapshot plus one structured record per completed epoch."""

    train_config: dict
    model_config: dict
    seed: int
    dataset_fingerprint: str
    records: list = field(default_factory=list)

    def add_epoch(self, **record):
        self.records.append(record)

    def header(self):
        return {
            "kind": "header",
            "train_config": self.train_config,
            "model_config": self.model_config,
            "seed": self.seed,
            "dataset_fingerprint": self.dataset_fingerprint,
        }

    def write_jsonl(self, path):
        with open(path, "w") as f:
            f.write(_canonical_json_str(self.header()) + "\n")
            for r in self.records:
                f.write(_canonical_json_str({"kind": "epoch", **r}) + "\n")

    @classmethod
    def read_jsonl(cls, path):
        with open(path) as f:
            lines = [json.loads(line) for line in f if line.strip()]
        if not lines or lines[0].get("kind") != "header":
            raise ValueError(f"manifest {path} missing header record")
        head = lines[0]
        records = [
            {k: v for k, v in r.items() if k != "kind"}
            for r in lines[1:]
            if r.get("kind") == "epoch"
        ]
        return cls(
            train_config=head["train_config"],
            model_config=head["model_config"],
            seed=head["seed"],
            dataset_fingerprint=head["dataset_fingerprint"],
            records=records,
        )


def _canonical_json_str(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def sgd_step(params, grads, lr, weight_decay):
    """Classical SGD with coupled L2 decay: w <- w - lr*(g + weight_decay*w).

    ``params`` maps name -> Tensor or ndarray (updated in place); a name
    missing from ``grads`` is treated as zero gradient (decay still applies).
    """
    if lr < 0:
        raise ValueError(f"lr must be >= 0, got {lr}")
    for name, p in params.items():
        w = p.data if isinstance(p, Tensor) else p
        dt = w.dtype.type
        g = grads.get(name)
        if g is None:
            w -= dt(lr) * (dt(weight_decay) * w)
            continue
        g = np.asarray(g)
        if g.shape != w.shape:
            raise T.ShapeError(
                f"sgd_step: gradient shape {g.shape} != param shape {w.shape} for {name!r}"
            )
        w -= dt(lr) * (g + dt(weight_decay) * w)
    return params


def _training_fingerprint(source, target):
    """Hash of the bytes the trainer actually consumes.

    Source images and labels count; target images count but target labels do
    not, because they never enter training.
    """
    h = hashlib.sha256()
    h.update(source.fingerprint(include_labels=True).encode() if source is not None
             and len(source) else b"no-source")
    h.update(target.fingerprint(include_labels=False).encode() if target is not None
             and len(target) else b"no-target")
    return h.hexdigest()


def _make_batches(rng, n_source, n_target, batch_size):
    """Index batches per epoch: half source + half target while both last,
    then full-size remainder batches from whichever stream is left."""
    half = max(1, batch_size // 2)
    src_order = rng.permutation(n_source)
    tgt_order = rng.permutation(n_target)
    empty = np.empty(0, dtype=np.int64)
    batches = []
    si = ti = 0
    while si < n_source and ti < n_target:
        batches.append((src_order[si:si + half], tgt_order[ti:ti + half]))
        si += half
        ti += half
    while si < n_source:
        batches.append((src_order[si:si + batch_size], empty))
        si += batch_size
    while ti < n_target:
        batches.append((empty, tgt_order[ti:ti + batch_size]))
        ti += batch_size
    return batches


def _batch_loss(probs, dlogits, labels, domains, inject_leak):
    if inject_leak is None:
        cls, n_src, clamps = masked_cross_entropy(probs, labels, domains)
    elif inject_leak == "soft_mask":
        w = np.where(domains == 0, 1.0, 0.01).astype(probs.dtype)
        cls, n_src, clamps = masked_cross_entropy(
            probs, labels, np.zeros_like(domains), weights=w
        )
    elif inject_leak == "unmasked":
        cls, n_src, clamps = masked_cross_entropy(
            probs, labels, np.zeros_like(domains)
        )
    else:
        raise ValueError(
            f"unknown inject_leak mode {inject_leak!r}; choose one of {INJECT_LEAK_MODES}"
        )
    dom = domain_bce(dlogits, domains)
    return cls + dom, cls, dom, clamps


def train(model, source, target, cfg, *, val_source=None, val_target=None,
          out_dir=None, inject_leak=None):
    """Train the dual-branch model; returns (model, RunManifest).

    Per epoch: lambda and lr come from the closed-form schedules at
    p = epoch/epochs; batches mix source rows (domain 0) and target rows
    (domain 1); each step backpropagates the combined loss, clips the global
    gradient norm, and applies SGD. A run is aborted with DivergenceError if
    the loss exceeds cfg.divergence_threshold or goes non-finite, after
    saving the last completed epoch's parameters when out_dir is given.
    """
    n_s = len(source) if source is not None else 0
    n_t = len(target) if target is not None else 0
    if n_s + n_t == 0:
        raise ValueError("train: no training data (source and target both empty)")

    xs = source.images if n_s else np.empty((0,) + tuple(model.config.input_shape), np.float32)
    ys = source.class_labels if n_s else np.empty(0, np.int64)
    xt = target.images if n_t else np.empty((0,) + tuple(model.config.input_shape), np.float32)
    yt = target.class_labels if n_t else np.empty(0, np.int64)

    manifest = RunManifest(
        train_config=cfg.to_dict(),
        model_config=model.config.to_dict(),
        seed=cfg.seed,
        dataset_fingerprint=_training_fingerprint(source, target),
    )
    rng = np.random.default_rng(cfg.seed)
    params = model.params
    last_good = {name: p.data.copy() for name, p in params.items()}
    best_val = None  # (accuracy, snapshot)

    def abort(message, epoch):
        for name, p in params.items():
            p.data[...] = last_good[name]
        path = None
        if out_dir:
            os.makedirs(out_dir, exist_ok=True)
            path = os.path.join(out_dir, "last_good.grla")
            save_checkpoint(model, manifest, path)
        raise DivergenceError(
            f"training diverged at epoch {epoch}: {message}",
            checkpoint_path=path,
            manifest=manifest,
        )

    for epoch in range(cfg.epochs):
        lam = lambda_value(cfg.lambda_kind, epoch / cfg.epochs)
        lr = lr_value(cfg.lr, epoch, cfg.epochs)
        cls_sum = dom_sum = tot_sum = 0.0
        grad_norm_sum = 0.0
        clipped = 0
        clamp_events = 0
        batches = _make_batches(rng, n_s, n_t, cfg.batch_size)
        for sidx, tidx in batches:
            xb = np.concatenate([xs[sidx], xt[tidx]], axis=0)
            yb = np.concatenate([ys[sidx], yt[tidx]], axis=0)
            db = np.concatenate([
                np.zeros(len(sidx), np.int64),
                np.ones(len(tidx), np.int64),
            ])
            model.zero_grad()
            try:
                probs, dlogits, _ = forward(model, xb, lam, train_mode=True, rng=rng)
                total, cls, dom, clamps = _batch_loss(probs, dlogits, yb, db, inject_leak)
                value = float(total.data)
                if not np.isfinite(value) or value > cfg.divergence_threshold:
                    abort(f"loss {value}", epoch)
                T.backward(total)
                grads = {
                    name: (p.grad if p.grad is not None else np.zeros_like(p.data))
                    for name, p in params.items()
                }
                norm = T.clip_grad_norm(grads, cfg.max_grad_norm)
            except T.NonFiniteError as e:
                abort(str(e), epoch)
            sgd_step(params, grads, lr, cfg.weight_decay)
            cls_sum += float(cls.data)
            dom_sum += float(dom.data)
            tot_sum += value
            grad_norm_sum += norm
            clipped += norm > cfg.max_grad_norm
            clamp_events += clamps

        nb = len(batches)
        record = {
            "epoch": epoch,
            "lambda": lam,
            "lr": lr,
            "class_loss": cls_sum / nb,
            "domain_loss": dom_sum / nb,
            "total_loss": tot_sum / nb,
            "batches": nb,
            "n_source": int(n_s),
            "n_target": int(n_t),
            "grad_norm_mean": grad_norm_sum / nb,
            "clipped_batches": int(clipped),
            "clamp_events": int(clamp_events),
        }
        if cfg.eval_every and (epoch + 1) % cfg.eval_every == 0:
            val = {}
            if val_source is not None and len(val_source):
                val["source"] = evaluate(model, val_source, "source_val").to_dict()
            if val_target is not None and len(val_target):
                val["target"] = evaluate(model, val_target, "target_val").to_dict()
            if val:
                record["val"] = val
                accs = [v["accuracy"] for v in val.values()]
                mean_acc = float(np.mean(accs))
                if best_val is None or mean_acc > best_val[0]:
                    best_val = (mean_acc, {n: p.data.copy() for n, p in params.items()})
        manifest.add_epoch(**record)
        last_good = {name: p.data.copy() for name, p in params.items()}

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(model, manifest, os.path.join(out_dir, "checkpoint.grla"))
        manifest.write_jsonl(os.path.join(out_dir, "manifest.jsonl"))
        if best_val is not None:
            saved = {name: p.data.copy() for name, p in params.items()}
            for name, p in params.items():
                p.data[...] = best_val[1][name]
            save_checkpoint(model, manifest, os.path.join(out_dir, "best_val.grla"))
            for name, p in params.items():
                p.data[...] = saved[name]
    return model, manifest


def evaluate(model, dataset, domain_tag="", batch_size=32):
    """Eval-mode metrics over a labeled dataset."""
    n = len(dataset)
    if n == 0:
        raise ValueError("evaluate: empty dataset")
    preds = np.empty(n, dtype=np.int64)
    for start in range(0, n, batch_size):
        chunk = dataset.images[start:start + batch_size]
        probs = predict_proba(model, chunk)
        preds[start:start + len(chunk)] = probs.argmax(axis=1)
    return compute_metrics(
        preds, dataset.class_labels,
        num_classes=model.config.num_classes,
        domain_tag=domain_tag,
    )


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, canonical JSON header blob, then one
# record per tensor (name, dtype, shape, raw little-endian bytes, CRC32)


def _checkpoint_header(model, manifest):
    if manifest is None:
        info = {"train_config": None, "seed": None,
                "dataset_fingerprint": None, "epochs_completed": 0}
    elif isinstance(manifest, RunManifest):
        info = {
            "train_config": manifest.train_config,
            "seed": manifest.seed,
            "dataset_fingerprint": manifest.dataset_fingerprint,
            "epochs_completed": len(manifest.records),
        }
    else:  # header dict from a loaded checkpoint
        info = {
            "train_config": manifest.get("train_config"),
            "seed": manifest.get("seed"),
            "dataset_fingerprint": manifest.get("dataset_fingerprint"),
            "epochs_completed": manifest.get("epochs_completed", 0),
        }
    info["model_config"] = model.config.to_dict()
    return info


def save_checkpoint(model, manifest, path, extra_arrays=None):
    """Write a self-describing binary checkpoint; see module docstring."""
    blob = _canonical_json_str(_checkpoint_header(model, manifest)).encode()
    records = [(name, p.data) for name, p in model.params.items()]
    for name, arr in (extra_arrays or {}).items():
        records.append((f"extra:{name}", np.asarray(arr)))

    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", CHECKPOINT_VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(struct.pack("<I", zlib.crc32(blob)))
        f.write(struct.pack("<I", len(records)))
        for name, arr in records:
            arr = np.ascontiguousarray(arr)
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            raw = le.tobytes()
            nb = name.encode()
            dt = le.dtype.str.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", len(dt)))
            f.write(dt)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(struct.pack("<Q", len(raw)))
            f.write(raw)
            f.write(struct.pack("<I", zlib.crc32(raw)))
    return path


def _read_exact(f, n, what):
    # a corrupted length field must surface as CheckpointError, not as an
    # attempt to allocate petabytes
    remaining = os.fstat(f.fileno()).st_size - f.tell()
    if n > remaining:
        raise CheckpointError(
            f"truncated checkpoint while reading {what} "
            f"(need {n} bytes, {remaining} left)"
        )
    data = f.read(n)
    if len(data) != n:
        raise CheckpointError(f"truncated checkpoint while reading {what}")
    return data


def load_checkpoint(path):
    """Read a checkpoint; returns (DannModel, info dict).

    info carries train_config/seed/dataset_fingerprint/epochs_completed from
    the header plus an "extra" dict of any non-parameter arrays stored.
    """
    with open(path, "rb") as f:
        magic = _read_exact(f, 4, "magic")
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path} is not a GRLA checkpoint (magic {magic!r})")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"checkpoint version {version} unsupported (expected {CHECKPOINT_VERSION})"
            )
        (blob_len,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        blob = _read_exact(f, blob_len, "header")
        (blob_crc,) = struct.unpack("<I", _read_exact(f, 4, "header checksum"))
        if zlib.crc32(blob) != blob_crc:
            raise CheckpointError("header checksum failure: checkpoint corrupted")
        info = json.loads(blob.decode())
        (count,) = struct.unpack("<I", _read_exact(f, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read_exact(f, 2, "name length"))
            name = _read_exact(f, name_len, "name").decode()
            (dt_len,) = struct.unpack("<B", _read_exact(f, 1, "dtype length"))
            dtype = np.dtype(_read_exact(f, dt_len, "dtype").decode())
            (ndim,) = struct.unpack("<B", _read_exact(f, 1, "ndim"))
            shape = tuple(
                struct.unpack("<I", _read_exact(f, 4, "dim"))[0] for _ in range(ndim)
            )
            (nbytes,) = struct.unpack("<Q", _read_exact(f, 8, "data length"))
            raw = _read_exact(f, nbytes, f"data for {name!r}")
            (crc,) = struct.unpack("<I", _read_exact(f, 4, "data checksum"))
            if zlib.crc32(raw) != crc:
                raise CheckpointError(
                    f"data checksum failure for tensor {name!r}: checkpoint corrupted"
                )
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()
        if f.read(1):
            raise CheckpointError("trailing bytes after final tensor record")

    config = DannConfig.from_dict(info["model_config"])
    params = {}
    extra = {}
    for name, arr in tensors.items():
        if name.startswith("extra:"):
            extra[name[len("extra:"):]] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)
    info["extra"] = extra
    return DannModel(config, params), info
