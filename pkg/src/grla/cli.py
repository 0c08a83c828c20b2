"""Experiment driver: deterministic batch commands over the library.

One JSON config fully determines a run (together with dataset bytes): a
domains list with source/target roles, the shared synthetic-shift settings,
split ratios, model and training sections, and a single top-level seed that
feeds every random stream. Unknown config keys are rejected by name rather
than ignored.

Exit codes are a stable contract:
  0 success          1 verification failed   2 config error
  3 training diverged 4 missing artifact     5 degenerate stain reference
  6 shape mismatch
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from .data import (
    MULTI_CANCER_BINARIZATION,
    DomainRecipe,
    ShiftSpec,
    SplitSpec,
    concat_sets,
    load_image_dataset,
    split,
    synth_domain,
)
from .model import DannConfig, build_dann, desk_config
from .stain import DegenerateStainError, compute_stain_stats, normalize_dataset, normalize_image
from .tensor import ShapeError
from .trainer import DivergenceError, TrainConfig, evaluate, load_checkpoint, train

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_MISSING = 4
EXIT_DEGENERATE = 5
EXIT_SHAPE = 6


class ConfigError(ValueError):
    """Config file unusable; message names the offending key where possible."""


# ---------------------------------------------------------------------------
# config schema

_TOP_KEYS = {"seed", "outdir", "stain_norm", "domains", "synth", "split", "model", "train"}
_DOMAIN_KEYS = {"name", "role", "recipe", "path", "binarization"}
_RECIPE_KEYS = {"background_rgb", "tint_rgb", "brightness", "noise_scale",
                "texture_seed", "channel_perm"}
_SYNTH_KEYS = {"n_per_class", "image_size", "benign_nuclei", "malignant_nuclei",
               "radius_range", "nucleus_rgb"}
_SPLIT_KEYS = {"ratios", "stratify"}
_MODEL_KEYS = {"preset", "input_shape", "feature_dim", "num_classes", "dropout_rate", "stages"}
_TRAIN_KEYS = {"optimizer", "lr", "weight_decay", "batch_size", "epochs",
               "max_grad_norm", "lambda_kind", "eval_every", "divergence_threshold"}
# per-section seeds are intentionally absent from the schema: every random
# stream derives from the one top-level seed


def _check_keys(section, allowed, where):
    if not isinstance(section, dict):
        raise ConfigError(f"config section '{where}' must be an object")
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown config key: {where}.{key}" if where else
                              f"unknown config key: {key}")


def _tuplify(value):
    if isinstance(value, list):
        return tuple(_tuplify(v) for v in value)
    return value


@dataclass
class DomainSpec:
    name: str
    role: str  # "source" | "target"
    recipe: DomainRecipe | None = None
    path: str | None = None
    binarization: dict | None = None


@dataclass
class ExperimentConfig:
    """A fully resolved run description; see module docstring for the schema."""

    seed: int
    outdir: str
    stain_norm: bool
    domains: list
    shift: ShiftSpec
    split_spec: SplitSpec
    model: DannConfig
    train: TrainConfig
    raw: dict = field(default_factory=dict, repr=False)


def _parse_domain(entry, index, seed):
    _check_keys(entry, _DOMAIN_KEYS, f"domains[{index}]")
    name = entry.get("name")
    if not name or not isinstance(name, str):
        raise ConfigError(f"domains[{index}].name must be a nonempty string")
    role = entry.get("role")
    if role not in ("source", "target"):
        raise ConfigError(f"domains[{index}].role must be 'source' or 'target', got {role!r}")
    recipe = None
    path = entry.get("path")
    binarization = None
    if "recipe" in entry:
        if path is not None:
            raise ConfigError(f"domains[{index}]: give either recipe or path, not both")
        _check_keys(entry["recipe"], _RECIPE_KEYS, f"domains[{index}].recipe")
        recipe = DomainRecipe(**{k: _tuplify(v) for k, v in entry["recipe"].items()})
    elif path is not None:
        b = entry.get("binarization")
        if isinstance(b, str):
            if b not in MULTI_CANCER_BINARIZATION:
                raise ConfigError(
                    f"domains[{index}].binarization: unknown preset {b!r}; "
                    f"presets are {sorted(MULTI_CANCER_BINARIZATION)}"
                )
            binarization = MULTI_CANCER_BINARIZATION[b]
        elif isinstance(b, dict):
            binarization = {str(k): int(v) for k, v in b.items()}
        else:
            raise ConfigError(f"domains[{index}].binarization must be a preset name or a map")
    else:
        raise ConfigError(f"domains[{index}] needs a synth recipe or a dataset path")
    return DomainSpec(name=name, role=role, recipe=recipe, path=path, binarization=binarization)


def load_experiment_config(path, seed_override=None, outdir_override=None):
    """Parse and validate a config file into resolved dataclasses."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    _check_keys(raw, _TOP_KEYS, "")

    seed = int(raw.get("seed", 0)) if seed_override is None else int(seed_override)
    outdir = outdir_override or raw.get("outdir")
    if not outdir:
        raise ConfigError("config needs an 'outdir' (or pass --out)")

    entries = raw.get("domains")
    if not isinstance(entries, list) or not entries:
        raise ConfigError("config needs a nonempty 'domains' list")
    domains = [_parse_domain(e, i, seed) for i, e in enumerate(entries)]
    names = [d.name for d in domains]
    if len(set(names)) != len(names):
        raise ConfigError(f"duplicate domain names: {names}")
    n_targets = sum(1 for d in domains if d.role == "target")
    if n_targets > 1:
        raise ConfigError(f"at most one target domain, got {n_targets}")

    synth_section = raw.get("synth", {})
    _check_keys(synth_section, _SYNTH_KEYS, "synth")
    try:
        shift = ShiftSpec(seed=seed, **{k: _tuplify(v) for k, v in synth_section.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"synth: {exc}") from exc

    split_section = raw.get("split", {})
    _check_keys(split_section, _SPLIT_KEYS, "split")
    try:
        split_spec = SplitSpec(seed=seed, **{k: _tuplify(v) for k, v in split_section.items()})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"split: {exc}") from exc

    model_section = dict(raw.get("model", {}))
    _check_keys(model_section, _MODEL_KEYS, "model")
    preset = model_section.pop("preset", "desk")
    if preset == "desk":
        base = desk_config(seed=seed).to_dict()
    elif preset == "paper_shape":
        from .model import resnet50_shape
        base = resnet50_shape(seed=seed).to_dict()
    else:
        raise ConfigError(f"model.preset must be 'desk' or 'paper_shape', got {preset!r}")
    base.update({k: _tuplify(v) for k, v in model_section.items()})
    base["seed"] = seed
    try:
        model_config = DannConfig(**base)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model: {exc}") from exc

    train_section = raw.get("train", {})
    _check_keys(train_section, _TRAIN_KEYS, "train")
    try:
        train_config = TrainConfig(seed=seed, **train_section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"train: {exc}") from exc

    return ExperimentConfig(
        seed=seed, outdir=outdir, stain_norm=bool(raw.get("stain_norm", False)),
        domains=domains, shift=shift, split_spec=split_spec,
        model=model_config, train=train_config, raw=raw,
    )


# ---------------------------------------------------------------------------
# dataset assembly

def realize_domains(cfg, lenient=False):
    """Materialize every configured domain as a LabeledImageSet."""
    c, h, w = cfg.model.input_shape
    out = []
    for idx, dom in enumerate(cfg.domains):
        if dom.recipe is not None:
            rng = np.random.default_rng([cfg.seed, idx])
            ds = synth_domain(cfg.shift, dom.recipe, dom.name, rng)
            if ds.image_shape != (c, h, w):
                raise ShapeError(
                    f"domain {dom.name}: synth images {ds.image_shape} != model input {(c, h, w)}"
                )
        else:
            ds = load_image_dataset(dom.path, dom.binarization, image_size=(h, w),
                                    domain_id=dom.name, lenient=lenient)
        out.append((dom, ds))
    return out


def _split_all(realized, split_spec):
    return {dom.name: (dom, split(ds, split_spec)) for dom, ds in realized}


def assemble_training_sets(cfg, lenient=False):
    """Realize, split, and (optionally) stain-normalize the configured domains.

    Returns (splits, source_train, source_val, target_train, target_val,
    ref_stats). splits maps name -> (DomainSpec, (train, val, test)). The
    stain reference comes from the source training split only; when several
    sources exist their training images are pooled for the reference.
    """
    realized = realize_domains(cfg, lenient=lenient)
    splits = _split_all(realized, cfg.split_spec)

    ref_stats = None
    if cfg.stain_norm:
        source_trains = [parts[0] for dom, parts in splits.values() if dom.role == "source"]
        if not source_trains:
            raise ConfigError("stain_norm needs at least one source domain for the reference")
        pooled = np.concatenate([s.images for s in source_trains], axis=0)
        ref_stats = compute_stain_stats(pooled, reference_id="source-train")
        splits = {
            name: (dom, tuple(normalize_dataset(part, ref_stats) for part in parts))
            for name, (dom, parts) in splits.items()
        }

    src_parts = [parts for dom, parts in splits.values() if dom.role == "source"]
    tgt_parts = [parts for dom, parts in splits.values() if dom.role == "target"]

    def _concat(sets, tag):
        if not sets:
            return None
        merged = sets[0]
        for s in sets[1:]:
            merged = concat_sets(merged, s, domain_id=tag)
        return merged

    source_train = _concat([p[0] for p in src_parts], "source")
    source_val = _concat([p[1] for p in src_parts], "source")
    target_train = tgt_parts[0][0] if tgt_parts else None
    target_val = tgt_parts[0][1] if tgt_parts else None
    return splits, source_train, source_val, target_train, target_val, ref_stats


# ---------------------------------------------------------------------------
# artifact writers

def _float_str(v):
    return repr(float(v))


def write_metrics_csv(rows, path):
    """rows: list of dicts with stable keys; written RFC-4180, repr() floats."""
    if not rows:
        raise ValueError("no metric rows to write")
    fields = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\r\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({
                k: _float_str(v) if isinstance(v, float) else v for k, v in row.items()
            })


def _metrics_row(report, extra=None):
    row = dict(extra or {})
    row.update({
        "n": report.n,
        "accuracy": report.accuracy,
        "macro_precision": report.macro_precision,
        "macro_recall": report.macro_recall,
        "macro_f1": report.macro_f1,
        "confusion": ";".join(str(int(v)) for v in np.asarray(report.confusion).ravel()),
    })
    return row


def _write_resolved_config(cfg, path):
    resolved = {
        "seed": cfg.seed,
        "outdir": cfg.outdir,
        "stain_norm": cfg.stain_norm,
        "domains": [
            {"name": d.name, "role": d.role,
             "recipe": None if d.recipe is None else d.recipe.__dict__,
             "path": d.path}
            for d in cfg.domains
        ],
        "split": {"ratios": cfg.split_spec.ratios, "stratify": cfg.split_spec.stratify},
        "model": cfg.model.to_dict(),
        "train": cfg.train.to_dict(),
    }
    with open(path, "w") as fh:
        json.dump(resolved, fh, sort_keys=True, indent=2, default=list)
        fh.write("\n")


# ---------------------------------------------------------------------------
# commands

def cmd_train(args):
    cfg = load_experiment_config(args.config, args.seed_override, args.out)
    os.makedirs(cfg.outdir, exist_ok=True)
    splits, s_tr, s_va, t_tr, t_va, ref_stats = assemble_training_sets(cfg, args.lenient)

    model = build_dann(cfg.model)
    model, manifest = train(
        model, s_tr, t_tr, cfg.train,
        val_source=s_va, val_target=t_va,
        out_dir=cfg.outdir, inject_leak=args.inject_leak,
    )

    rows = []
    for name, (dom, (tr, va, te)) in sorted(splits.items()):
        for split_name, part in (("val", va), ("test", te)):
            rep = evaluate(model, part, domain_tag=name)
            rows.append(_metrics_row(rep, {"domain": name, "role": dom.role,
                                           "split": split_name}))
    write_metrics_csv(rows, os.path.join(cfg.outdir, "metrics.csv"))

    from .plotting import plot_training_curves
    plot_training_curves(manifest.records, os.path.join(cfg.outdir, "curves.png"))
    if ref_stats is not None:
        with open(os.path.join(cfg.outdir, "stain_reference.json"), "w") as fh:
            fh.write(ref_stats.to_json() + "\n")
    _write_resolved_config(cfg, os.path.join(cfg.outdir, "config_resolved.json"))
    print(f"train: wrote checkpoint, manifest, metrics to {cfg.outdir}")
    return EXIT_OK


def _load_checkpoint_or_exit(path):
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_eval(args):
    cfg = load_experiment_config(args.config, args.seed_override, args.out)
    model, _info = _load_checkpoint_or_exit(args.checkpoint)
    os.makedirs(cfg.outdir, exist_ok=True)
    splits, *_rest = assemble_training_sets(cfg, args.lenient)
    rows = []
    for name, (dom, (tr, va, te)) in sorted(splits.items()):
        rep = evaluate(model, te, domain_tag=name)
        rows.append(_metrics_row(rep, {"domain": name, "role": dom.role, "split": "test"}))
    out_csv = os.path.join(cfg.outdir, "eval_metrics.csv")
    write_metrics_csv(rows, out_csv)
    print(f"eval: wrote {out_csv}")
    return EXIT_OK


def cmd_ensemble(args):
    from .evaluation import compute_metrics, ensemble_predict

    cfg = load_experiment_config(args.config, args.seed_override, args.out)
    models = [_load_checkpoint_or_exit(p)[0] for p in args.checkpoints]
    os.makedirs(cfg.outdir, exist_ok=True)
    splits, *_rest = assemble_training_sets(cfg, args.lenient)
    if args.target is not None and args.target not in splits:
        raise ConfigError(f"--target {args.target!r} is not a configured domain")
    rows = []
    for name, (dom, (tr, va, te)) in sorted(splits.items()):
        if args.target is not None:
            if name != args.target:
                continue
        elif dom.role != "target":
            continue
        probs = ensemble_predict(models, te.images)
        rep = compute_metrics(np.argmax(probs, axis=1), te.class_labels,
                              num_classes=cfg.model.num_classes, domain_tag=name)
        rows.append(_metrics_row(rep, {"domain": name, "role": dom.role, "split": "test",
                                       "members": len(models)}))
    if not rows:
        raise ConfigError("ensemble needs a target domain in the config")
    out_csv = os.path.join(cfg.outdir, "ensemble_metrics.csv")
    write_metrics_csv(rows, out_csv)
    print(f"ensemble: wrote {out_csv}")
    return EXIT_OK


def cmd_crossdomain(args):
    from .evaluation import cross_domain_eval
    from .plotting import plot_cross_domain

    cfg = load_experiment_config(args.config, args.seed_override, args.out)
    models = {}
    for pair in args.models:
        if "=" not in pair:
            raise ConfigError(f"--models entries look like name=checkpoint, got {pair!r}")
        name, ckpt = pair.split("=", 1)
        models[name] = _load_checkpoint_or_exit(ckpt)[0]
    os.makedirs(cfg.outdir, exist_ok=True)
    splits, *_rest = assemble_training_sets(cfg, args.lenient)
    datasets = {name: parts[2] for name, (dom, parts) in splits.items()}
    unknown = sorted(set(models) - set(datasets))
    if unknown:
        raise ConfigError(f"--models names not in config domains: {unknown}")
    matrix = cross_domain_eval(models, datasets)
    rows = matrix.to_rows()
    out_csv = os.path.join(cfg.outdir, "cross_domain.csv")
    write_metrics_csv(rows, out_csv)
    plot_cross_domain(matrix, os.path.join(cfg.outdir, "cross_domain.png"))
    print(f"crossdomain: wrote {out_csv} and heatmap")
    return EXIT_OK


def cmd_stain_normalize(args):
    from PIL import Image

    if not os.path.isdir(args.in_dir):
        raise FileNotFoundError(f"input directory not found: {args.in_dir}")
    ref_dir = args.reference or args.in_dir
    if not os.path.isdir(ref_dir):
        raise FileNotFoundError(f"reference directory not found: {ref_dir}")

    def _iter_images(root):
        for dirpath, dirnames, filenames in os.walk(root):
            dirnames.sort()
            for fname in sorted(filenames):
                if os.path.splitext(fname)[1].lower() in (".png", ".jpg", ".jpeg", ".bmp"):
                    yield os.path.join(dirpath, fname)

    def _read(path):
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0

    ref_paths = list(_iter_images(ref_dir))
    if not ref_paths:
        raise DegenerateStainError(f"reference directory has no images: {ref_dir}")
    ref_images = np.stack([_read(p) for p in ref_paths])
    ref_stats = compute_stain_stats(ref_images, reference_id=os.path.basename(ref_dir))

    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "stain_reference.json"), "w") as fh:
        fh.write(ref_stats.to_json() + "\n")

    count = 0
    in_paths = list(_iter_images(args.in_dir))
    if not in_paths:
        raise FileNotFoundError(f"no images under {args.in_dir}")
    in_images = np.stack([_read(p) for p in in_paths])
    own_stats = compute_stain_stats(in_images, reference_id=os.path.basename(args.in_dir))
    for path, img in zip(in_paths, in_images):
        rel = os.path.relpath(path, args.in_dir)
        dest = os.path.join(args.out, rel)
        os.makedirs(os.path.dirname(dest), exist_ok=True)
        normed = normalize_image(img, own_stats, ref_stats)
        pixels = (np.clip(normed, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
        Image.fromarray(pixels.transpose(1, 2, 0)).save(
            os.path.splitext(dest)[0] + ".png", format="PNG")
        count += 1
    print(f"stain-normalize: wrote {count} images to {args.out}")
    return EXIT_OK


def cmd_attribute(args):
    from PIL import Image

    from .attribution import integrated_gradients, render_attribution, save_raw_attribution
    from .plotting import save_image_png

    model, _info = _load_checkpoint_or_exit(args.checkpoint)
    if not os.path.exists(args.image):
        raise FileNotFoundError(f"image not found: {args.image}")
    c, h, w = model.config.input_shape
    with Image.open(args.image) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
    if arr.shape != (c, h, w):
        raise ShapeError(f"image {args.image} is {arr.shape}, model expects {(c, h, w)}")

    if args.baseline:
        if not os.path.exists(args.baseline):
            raise FileNotFoundError(f"baseline image not found: {args.baseline}")
        with Image.open(args.baseline) as im:
            baseline = np.asarray(im.convert("RGB"), dtype=np.float32).transpose(2, 0, 1) / 255.0
        if baseline.shape != (c, h, w):
            raise ShapeError(f"baseline {args.baseline} is {baseline.shape}, expected {(c, h, w)}")
    else:
        # default: the input's own per-channel average as a flat baseline
        baseline = np.broadcast_to(arr.mean(axis=(1, 2), keepdims=True), (c, h, w)).copy()

    from .model import predict_proba
    target_class = int(np.argmax(predict_proba(model, arr[None])[0])) \
        if args.target_class is None else args.target_class
    amap = integrated_gradients(
        model, arr, baseline, target_class, steps=args.steps,
        rule=args.rule, target="logit" if args.logit else "probability",
        input_ref=os.path.basename(args.image),
    )
    prefix = args.out_prefix
    out_dir = os.path.dirname(prefix)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    save_image_png(render_attribution(amap, "grayscale"), prefix + "_gray.png")
    save_image_png(render_attribution(amap, "overlay", underlying=arr), prefix + "_overlay.png")
    save_raw_attribution(amap, prefix + "_raw.bin")
    print(f"completeness_gap {amap.completeness_gap:.8e} target_class {target_class}")
    return EXIT_OK


def cmd_verify(args):
    from .evaluation import verify_no_leakage

    cfg = load_experiment_config(args.config, args.seed_override, args.out)
    os.makedirs(cfg.outdir, exist_ok=True)
    _splits, s_tr, _s_va, t_tr, _t_va, _ref = assemble_training_sets(cfg, args.lenient)
    if t_tr is None:
        raise ConfigError("verify needs a target domain in the config")
    report = verify_no_leakage(cfg.train, s_tr, t_tr, model_config=cfg.model,
                               workdir=cfg.outdir, inject_leak=args.inject_leak)
    report_path = os.path.join(cfg.outdir, "verification.txt")
    with open(report_path, "w") as fh:
        fh.write(report.to_text() + "\n")
    print(report.to_text())
    return EXIT_OK if report.passed else EXIT_VERIFY_FAIL


def cmd_synth(args):
    """Materialize configured synthetic domains as PNG folder datasets."""
    cfg = load_experiment_config(args.config, args.seed_override, args.out)
    from PIL import Image

    os.makedirs(cfg.outdir, exist_ok=True)
    written = []
    for dom, ds in realize_domains(cfg):
        if dom.recipe is None:
            continue
        for cls in (0, 1):
            os.makedirs(os.path.join(cfg.outdir, dom.name, f"class{cls}"), exist_ok=True)
        for i in range(len(ds)):
            pixels = (np.clip(ds.images[i], 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
            dest = os.path.join(cfg.outdir, dom.name, f"class{int(ds.class_labels[i])}",
                                f"{i:05d}.png")
            Image.fromarray(pixels.transpose(1, 2, 0)).save(dest, format="PNG")
        written.append(dom.name)
    print(f"synth: wrote domains {written} under {cfg.outdir}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point

def build_parser():
    parser = argparse.ArgumentParser(
        prog="grla",
        description="domain-adversarial training toolkit (gradient-reversal pipeline)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="experiment config JSON")
        p.add_argument("--seed-override", type=int, default=None,
                       help="replace the config seed")
        p.add_argument("--out", default=None, help="override the config outdir")
        p.add_argument("--lenient", action="store_true",
                       help="skip undecodable dataset files instead of failing")

    p = sub.add_parser("train", help="train a dual-branch model from a config")
    add_common(p)
    p.add_argument("--inject-leak", choices=("soft_mask", "unmasked"), default=None,
                   help="sabotage fixture for verification tests")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on configured test splits")
    add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ensemble", help="average probabilities of several checkpoints")
    add_common(p)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--target", default=None,
                   help="evaluate on this domain's test split (default: the "
                        "config's target-role domains)")
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("crossdomain", help="train-domain x eval-domain accuracy matrix")
    add_common(p)
    p.add_argument("--models", nargs="+", required=True, metavar="NAME=CKPT")
    p.set_defaults(func=cmd_crossdomain)

    p = sub.add_parser("stain-normalize", help="normalize an image folder to a reference")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--reference", default=None,
                   help="reference image folder (defaults to --in)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stain_normalize)

    p = sub.add_parser("attribute", help="integrated-gradients maps for one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out-prefix", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--rule", choices=("right", "midpoint"), default="right")
    p.add_argument("--logit", action="store_true", help="attribute the logit, not probability")
    p.add_argument("--baseline", default=None,
                   help="baseline image (default: input's per-channel mean)")
    p.add_argument("--target-class", type=int, default=None)
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("verify", help="run the leakage-verification experiments")
    add_common(p)
    p.add_argument("--inject-leak", choices=("soft_mask", "unmasked"), default=None)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("synth", help="write configured synthetic domains as PNG datasets")
    add_common(p)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DegenerateStainError as exc:
        print(f"degenerate stain reference: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except ShapeError as exc:
        print(f"shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
