"""Release gates for the toolkit, one test per criterion.

Each test prints a single ``[criterion NN] PASS/FAIL`` line on the real
terminal (bypassing capture) so a full run yields an eleven-line scoreboard,
and then asserts, so pytest fails loudly on any regression.  The heavier
gates (the adversarial-gap experiment, the leakage verification) budget
their own wall-clock limits.
"""

import json
import os
import shutil
import time

import numpy as np

import grla.tensor as T
from grla.attribution import integrated_gradients
from grla.cli import main as cli_main
from grla.data import (
    ShiftSpec,
    SplitSpec,
    mean_image_baseline,
    split,
    synth_shifted_pair,
)
from grla.evaluation import compute_metrics, ensemble_predict, verify_no_leakage
from grla.model import DannConfig, build_dann, desk_config, forward, predict_proba
from grla.objectives import (
    domain_bce,
    lambda_value,
    lr_value,
    masked_cross_entropy,
    total_loss,
)
from grla.stain import compute_stain_stats, normalize_dataset, normalize_image, rgb_to_lalphabeta
from grla.tensor import Tensor
from grla.trainer import TrainConfig, evaluate, train


def _report(capsys, num, ok, label):
    with capsys.disabled():
        print(f"[criterion {num:02d}] {'PASS' if ok else 'FAIL'}  {label}")
    assert ok, f"criterion {num:02d}: {label}"


# ---------------------------------------------------------------------------
# 1. autodiff vs central finite differences on a three-layer conv net


def test_criterion_01_conv_net_gradcheck(capsys):
    t0 = time.monotonic()
    rng = np.random.default_rng(0)
    x64 = rng.normal(0.0, 1.0, size=(2, 3, 12, 12))
    labels = np.array([0, 2])
    shapes = [("w1", (4, 3, 3, 3)), ("b1", (4, 1, 1)),
              ("w2", (5, 4, 3, 3)), ("b2", (5, 1, 1)),
              ("w3", (6, 5, 3, 3)), ("b3", (6, 1, 1)),
              ("head", (24, 3))]
    params = {name: rng.normal(0.0, 0.4, size=shape) for name, shape in shapes}

    def loss_of(tensors):
        h = Tensor(x64, dtype=np.float64)
        for i in (1, 2, 3):
            h = T.relu(T.conv2d(h, tensors[f"w{i}"], stride=2, padding=1)
                       + tensors[f"b{i}"])
        z = T.flatten(h) @ tensors["head"]
        picked = T.gather_cols(T.softmax(z, axis=1), labels)
        return T.reduce_mean(-T.log(T.clamp_min(picked, 1e-12)))

    tracked = {k: Tensor(v, requires_grad=True, dtype=np.float64)
               for k, v in params.items()}
    T.backward(loss_of(tracked))

    def loss_now():
        with T.no_grad():
            frozen = {k: Tensor(v, dtype=np.float64) for k, v in params.items()}
            return float(loss_of(frozen).data)

    coords = [(name, i) for name, shape in shapes for i in range(int(np.prod(shape)))]
    pick = np.random.default_rng(123).choice(len(coords), size=100, replace=False)
    eps = 1e-3
    worst = 0.0
    for ci in pick:
        name, i = coords[ci]
        orig = params[name].flat[i]
        params[name].flat[i] = orig + eps
        up = loss_now()
        params[name].flat[i] = orig - eps
        dn = loss_now()
        params[name].flat[i] = orig
        numeric = (up - dn) / (2 * eps)
        rel = abs(tracked[name].grad.flat[i] - numeric) / max(abs(numeric), 1e-6)
        worst = max(worst, rel)
    elapsed = time.monotonic() - t0
    ok = worst < 1e-4 and elapsed < 60.0
    _report(capsys, 1, ok,
            f"conv-net gradcheck: worst rel err {worst:.2e} over 100 params, "
            f"{elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. gradient-reversal semantics


def test_criterion_02_reversal_semantics(capsys):
    rng = np.random.default_rng(5)
    x = rng.uniform(0.0, 1.0, size=(6, 3, 32, 32)).astype(np.float32)
    domains = [0, 1, 0, 1, 0, 1]

    def domain_grads(lam, reverse):
        model = build_dann(desk_config(seed=9, dropout_rate=0.0))
        if reverse:
            dlog = forward(model, x, lam=lam)[1]
        else:
            from grla.model import _extract_features

            feat = _extract_features(model, x, train_mode=False, rng=None)
            dlog = feat @ model.params["domain_head.w"] + model.params["domain_head.b"]
        T.backward(domain_bce(dlog, domains))
        return {k: p.grad.copy() for k, p in model.params.items()
                if p.grad is not None}

    ident = domain_grads(1.0, reverse=False)
    worst = 0.0
    for lam in (0.0, 0.25, 1.0):
        rev = domain_grads(lam, reverse=True)
        for k, g in ident.items():
            want = g if k.startswith("domain_head") else -lam * g
            scale = max(float(np.abs(want).max()), 1e-9)
            worst = max(worst, float(np.abs(rev[k] - want).max()) / scale)

    xt = Tensor(rng.normal(size=(4, 7)), requires_grad=True, dtype=np.float64)
    bit_identical = T.gradient_reversal(xt, 0.25).data.tobytes() == xt.data.tobytes()

    ok = worst < 1e-6 and bit_identical
    _report(capsys, 2, ok,
            f"reversal grads match -lambda x identity (worst rel {worst:.2e}); "
            f"forward bit-identical: {bit_identical}")


# ---------------------------------------------------------------------------
# 3. masking exactness: the two leakage experiments


def test_criterion_03_masking_exactness(capsys, tmp_path):
    t0 = time.monotonic()
    source, target = synth_shifted_pair(ShiftSpec(n_per_class=250, seed=0))
    cfg = TrainConfig(epochs=5, batch_size=32, seed=0, eval_every=0)
    report = verify_no_leakage(cfg, source, target,
                               model_config=desk_config(seed=0),
                               workdir=str(tmp_path))
    elapsed = time.monotonic() - t0
    losses_zero = all(v == 0.0 for v in report.per_epoch_class_loss)
    ok = (report.experiment_a_pass and report.experiment_b_pass
          and losses_zero and elapsed < 300.0)
    _report(capsys, 3, ok,
            f"label rewrite -> identical checkpoint: {report.experiment_a_pass}; "
            f"target-only class loss all zero: {losses_zero}, "
            f"accuracy {report.target_accuracy:.3f}; {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 4. schedule closed forms


def test_criterion_04_schedule_closed_forms(capsys):
    import math

    closed = {
        "parabolic_up": lambda p: p * p,
        "linear_up": lambda p: p,
        "linear_down": lambda p: 1.0 - p,
        "parabolic_down": lambda p: 1.0 - p * p,
        "constant_half": lambda p: 0.5,
        "logistic": lambda p: 2.0 / (1.0 + math.exp(-10.0 * p)) - 1.0,
    }
    grid = (0.0, 0.25, 0.5, 0.75, 1.0)
    worst = 0.0
    for kind, form in closed.items():
        for p in grid:
            worst = max(worst, abs(lambda_value(kind, p) - form(p)))
    for epoch, total in ((0, 8), (2, 8), (4, 8), (6, 8), (8, 8)):
        worst = max(worst, abs(lr_value(0.1, epoch, total) - 0.1 * (1 - epoch / total)))
    endpoints = (lambda_value("parabolic_up", 0.0) == 0.0
                 and lambda_value("parabolic_up", 1.0) == 1.0)
    ok = worst <= 1e-12 and endpoints
    _report(capsys, 4, ok,
            f"six lambda schedules + linear LR match closed forms "
            f"(worst dev {worst:.1e}); parabolic endpoints exact: {endpoints}")


# ---------------------------------------------------------------------------
# 5. loss oracle values


def test_criterion_05_loss_oracles(capsys):
    ce, _, _ = masked_cross_entropy(
        np.array([[0.9, 0.1], [0.2, 0.8]]), [0, 1], [0, 1])
    ce_err = abs(float(ce.data) - 0.1054)
    bce = domain_bce(np.array([1.0, -1.0]), [1, 0])
    bce_err = abs(float(bce.data) - 0.3133)

    rng = np.random.default_rng(11)
    worst_sum = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 17))
        c = int(rng.integers(2, 6))
        probs = rng.uniform(0.01, 1.0, size=(n, c))
        probs /= probs.sum(axis=1, keepdims=True)
        logits = rng.normal(0.0, 3.0, size=n)
        labels = rng.integers(0, c, size=n)
        domains = rng.integers(0, 2, size=n)
        lb = total_loss(probs, logits, labels, domains)
        worst_sum = max(worst_sum, abs(
            float(lb.total.data) - (float(lb.class_loss.data) + float(lb.domain_loss.data))))
    ok = ce_err < 1e-4 and bce_err < 1e-4 and worst_sum <= 1e-6
    _report(capsys, 5, ok,
            f"masked CE off by {ce_err:.1e}, domain BCE off by {bce_err:.1e}, "
            f"total-vs-sum worst {worst_sum:.1e} over 1000 batches")


# ---------------------------------------------------------------------------
# 6. desk-scale adversarial gap over three seeds


def test_criterion_06_adversarial_gap(capsys):
    t0 = time.monotonic()
    source, target = synth_shifted_pair(ShiftSpec(n_per_class=500, seed=0))
    s_tr, _s_va, _s_te = split(source, SplitSpec(seed=0))
    t_tr, _t_va, t_te = split(target, SplitSpec(seed=0))
    gaps = []
    for seed in (0, 1, 2):
        acc = {}
        for kind in ("parabolic_up", "constant_zero"):
            model = build_dann(desk_config(seed=seed))
            cfg = TrainConfig(epochs=30, seed=seed, lambda_kind=kind, eval_every=0)
            train(model, s_tr, t_tr, cfg)
            acc[kind] = evaluate(model, t_te, domain_tag="target").accuracy
        gaps.append(100.0 * (acc["parabolic_up"] - acc["constant_zero"]))
    median_gap = sorted(gaps)[1]
    elapsed = time.monotonic() - t0
    ok = median_gap >= 10.0 and elapsed < 600.0
    _report(capsys, 6, ok,
            f"adversarial vs frozen-lambda control: per-seed gaps "
            f"{[round(g, 1) for g in gaps]} points, median {median_gap:.1f} "
            f"(need >= 10); {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# 7. integrated-gradients exactness and completeness


def test_criterion_07_integrated_gradients(capsys):
    rng = np.random.default_rng(2)
    img = rng.uniform(0.0, 1.0, size=(3, 8, 8))
    base = rng.uniform(0.0, 1.0, size=(3, 8, 8))
    w = rng.normal(size=(3 * 8 * 8, 1))

    def linear_score(xt):
        return T.reshape(T.flatten(xt) @ Tensor(w, dtype=np.float64), (-1,))

    zero_map = integrated_gradients(None, img, img.copy(), 0, steps=16,
                                    score_fn=linear_score)
    zero_exact = np.all(zero_map.values == 0.0) and zero_map.completeness_gap == 0.0

    lin_map = integrated_gradients(None, img, base, 0, steps=7,
                                   score_fn=linear_score)
    lin_err = float(np.abs(
        lin_map.values - (img - base) * w.reshape(3, 8, 8)).max())

    source, _ = synth_shifted_pair(ShiftSpec(n_per_class=60, seed=0))
    s_tr, _s_va, s_te = split(source, SplitSpec(seed=0))
    net = build_dann(desk_config(seed=1))
    train(net, s_tr, None, TrainConfig(epochs=12, batch_size=32, seed=0, eval_every=0))
    baseline = mean_image_baseline(s_tr)

    worst_ratio = 0.0
    mono = 0
    for i in range(10):
        image = s_te.images[i]
        cls = int(np.argmax(predict_proba(net, image[None])[0]))
        gaps = {s: integrated_gradients(net, image, baseline, cls, steps=s,
                                        rule="midpoint").completeness_gap
                for s in (32, 256, 1024)}
        p_x = predict_proba(net, image[None])[0][cls]
        p_b = predict_proba(net, baseline[None])[0][cls]
        worst_ratio = max(worst_ratio, gaps[256] / max(abs(p_x - p_b), 1e-12))
        mono += gaps[1024] < gaps[32]

    ok = zero_exact and lin_err < 1e-6 and worst_ratio <= 0.01 and mono == 10
    _report(capsys, 7, ok,
            f"zero-baseline exact: {zero_exact}; linear err {lin_err:.1e}; "
            f"worst completeness ratio {worst_ratio:.4f} at 256 steps on 10 "
            f"test images; 1024<32 steps on {mono}/10")


# ---------------------------------------------------------------------------
# 8. stain normalization


def _lab_means(images):
    lab = rgb_to_lalphabeta(images)
    return lab.mean(axis=(0, 2, 3))


def test_criterion_08_stain_normalization(capsys):
    source, target = synth_shifted_pair(ShiftSpec(n_per_class=40, seed=0))
    ref = compute_stain_stats(source.images)
    normed = normalize_dataset(target, ref)
    mean_gap = float(np.abs(_lab_means(normed.images) - _lab_means(source.images)).max())

    double = normalize_dataset(normed, ref)
    double_delta = float(np.median(np.abs(double.images - normed.images)))

    own = compute_stain_stats(normed.images)
    idn = np.stack([normalize_image(im, own, own) for im in normed.images[:20]])
    ident_delta = float(np.median(np.abs(idn - normed.images[:20])))

    ok = mean_gap < 0.02 and double_delta < 1.0 / 255.0 and ident_delta <= 1e-3
    _report(capsys, 8, ok,
            f"decorrelated means agree to {mean_gap:.4f}; double-apply median "
            f"delta {double_delta:.2e}; matching-stats identity delta {ident_delta:.2e}")


# ---------------------------------------------------------------------------
# 9. metrics vs brute force


def _brute_metrics(pred, true, k):
    pred, true = np.asarray(pred), np.asarray(true)
    cm = np.zeros((k, k), dtype=np.int64)
    for p, t in zip(pred, true):
        cm[t, p] += 1
    precisions, recalls, f1s = [], [], []
    for c in range(k):
        tp = cm[c, c]
        pred_c = (pred == c).sum()
        true_c = (true == c).sum()
        prec = tp / pred_c if pred_c else 0.0
        rec = tp / true_c if true_c else 0.0
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    return ((pred == true).mean(), np.mean(precisions), np.mean(recalls),
            np.mean(f1s), cm)


def test_criterion_09_metrics_oracle(capsys):
    mismatches = 0
    cases = 0

    def check(pred, true, k):
        nonlocal mismatches, cases
        cases += 1
        rep = compute_metrics(pred, true, num_classes=k)
        acc, mp, mr, mf, cm = _brute_metrics(pred, true, k)
        same = (rep.accuracy == acc and rep.macro_precision == mp
                and rep.macro_recall == mr and rep.macro_f1 == mf
                and np.array_equal(rep.confusion, cm))
        mismatches += not same

    true4 = [0, 0, 1, 1]
    for bits in range(16):
        check([(bits >> i) & 1 for i in range(4)], true4, 2)
    rng = np.random.default_rng(17)
    for _ in range(20):
        k = int(rng.integers(2, 5))
        check(rng.integers(0, k, size=100), rng.integers(0, k, size=100), k)

    ok = mismatches == 0
    _report(capsys, 9, ok,
            f"metrics equal brute-force confusion math on {cases} cases "
            f"({mismatches} mismatches)")


# ---------------------------------------------------------------------------
# 10. ensemble contract


def test_criterion_10_ensemble_contract(capsys):
    import itertools

    cfg = dict(input_shape=(3, 8, 8), feature_dim=8, num_classes=2,
               dropout_rate=0.0, stages=((4, 1, 2),))
    models = [build_dann(DannConfig(seed=s, **cfg)) for s in (0, 1, 2)]
    images = np.random.default_rng(4).uniform(0, 1, size=(12, 3, 8, 8)).astype(np.float32)

    member_probs = sorted((predict_proba(m, images) for m in models),
                          key=lambda p: p.tobytes())
    acc = np.zeros(member_probs[0].shape, dtype=np.float64)
    for p in member_probs:
        acc += p
    manual = (acc / len(member_probs)).astype(member_probs[0].dtype)
    got = ensemble_predict(models, images)
    mean_exact = np.array_equal(got, manual)

    perm_exact = all(
        np.array_equal(ensemble_predict([models[i] for i in order], images), got)
        for order in itertools.permutations(range(3)))

    solo = predict_proba(models[0], images)
    ident_exact = np.array_equal(
        ensemble_predict([models[0], models[0], models[0]], images), solo)

    ok = mean_exact and perm_exact and ident_exact
    _report(capsys, 10, ok,
            f"mean contract exact: {mean_exact}; permutation-invariant: "
            f"{perm_exact}; identical members == single model: {ident_exact}")


# ---------------------------------------------------------------------------
# 11. end-to-end training determinism


_RERUN_CONFIG = {
    "seed": 0,
    "outdir": "runs/unused",
    "synth": {"n_per_class": 12, "image_size": [3, 8, 8], "benign_nuclei": [1, 2],
              "malignant_nuclei": [6, 9], "radius_range": [0.7, 1.0]},
    "domains": [
        {"name": "src", "role": "source",
         "recipe": {"background_rgb": [0.93, 0.8, 0.86], "tint_rgb": [1.0, 0.92, 0.96],
                    "brightness": 1.0, "texture_seed": 101}},
        {"name": "tgt", "role": "target",
         "recipe": {"background_rgb": [0.93, 0.8, 0.86], "tint_rgb": [1.0, 0.92, 0.96],
                    "brightness": 0.62, "texture_seed": 202, "channel_perm": [2, 0, 1]}},
    ],
    "model": {"input_shape": [3, 8, 8], "feature_dim": 8, "num_classes": 2,
              "dropout_rate": 0.0, "stages": [[4, 1, 2]]},
    "train": {"epochs": 2, "batch_size": 8, "lr": 0.05},
}


def test_criterion_11_training_determinism(capsys, tmp_path):
    config = tmp_path / "config.json"
    config.write_text(json.dumps(_RERUN_CONFIG))
    out = str(tmp_path / "run")
    watched = ("checkpoint.grla", "best_val.grla", "metrics.csv")

    assert cli_main(["train", "--config", str(config), "--out", out]) == 0
    first = {n: open(os.path.join(out, n), "rb").read() for n in watched}
    shutil.rmtree(out)
    assert cli_main(["train", "--config", str(config), "--out", out]) == 0
    stable = [n for n in watched
              if open(os.path.join(out, n), "rb").read() == first[n]]

    ok = len(stable) == len(watched)
    _report(capsys, 11, ok,
            f"rerun reproduced {len(stable)}/{len(watched)} artifacts "
            f"byte-for-byte ({', '.join(watched)})")
