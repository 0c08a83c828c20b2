"""Reproduction protocol: the five experimental arms at desk scale.

Runs the baseline single-domain models, the leave-one-out probability
ensemble, and the three adversarial arms (all sources / drop the low-chroma
"kidneylike" domain / dropped + stain-normalized) on a four-domain synthetic
family, then checks the directional claims that survive desk scale:

  * adversarial training beats the λ≡0 source-only control on the target
    domain by at least 10 accuracy points;
  * at least one leave-one-out ensemble carries over its best member's
    ability on the held-out domain (within 5 points of a member that is
    itself well above chance) — the rest are allowed to sit near 0.50,
    which is what full-scale runs showed too;
  * each baseline model scores highest on its own domain's test split.

Published full-scale accuracies are quoted in the summary as annotations
only — they come from 40k-image training runs and are not reproduced here.
"""

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, field

from .cli import main as cli_main

__all__ = ["ArmResult", "run_repro_suite", "ARM_NAMES"]

ARM_NAMES = ("baseline", "ensemble", "dann_with_kidney", "dann_no_kidney", "dann_stain_norm")

_DOMAINS = ("alpha", "beta", "kidneylike", "delta")
_TARGET = "delta"

# full-scale reference numbers (target-domain accuracy), quoted verbatim in
# the summary with the caveat that desk-scale runs do not reproduce them
_PAPER_SCALE_NOTES = {
    "baseline": "paper-scale, not reproduced here: best cross-domain cells "
                "kidney->colon 0.626, lung->breast 0.691",
    "ensemble": "paper-scale, not reproduced here: left-out colon 0.623, "
                "other domains near 0.50",
    "dann_with_kidney": "paper-scale, not reproduced here: lung 0.8695, "
                        "breast 0.5608, colon 0.7515, kidney 0.4110",
    "dann_no_kidney": "paper-scale, not reproduced here: lung 0.9556, "
                      "breast 0.4922, colon 0.7848",
    "dann_stain_norm": "paper-scale, not reproduced here: lung 0.6660, "
                       "breast 0.8129, colon 0.8336",
}


@dataclass
class ArmResult:
    name: str
    metrics: dict = field(default_factory=dict)
    assertions: list = field(default_factory=list)  # (description, passed)
    annotation: str = ""

    @property
    def passed(self):
        return all(ok for _desc, ok in self.assertions)


def _run_cli(argv):
    code = cli_main(argv)
    if code != 0:
        raise RuntimeError(f"cli {argv[0]} exited {code} (argv={argv})")


def _read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _patched_config(src, dst, n_per_class=None, epochs=None):
    with open(src) as fh:
        cfg = json.load(fh)
    if n_per_class is not None:
        cfg.setdefault("synth", {})["n_per_class"] = n_per_class
    if epochs is not None:
        cfg.setdefault("train", {})["epochs"] = epochs
    os.makedirs(os.path.dirname(dst), exist_ok=True)
    with open(dst, "w") as fh:
        json.dump(cfg, fh, indent=2)
        fh.write("\n")
    return dst


def run_repro_suite(workdir="runs/repro", configs_dir="configs",
                    n_per_class=None, epochs=None, log=print):
    """Run all five arms; returns list of ArmResult and writes summary files.

    ``n_per_class`` / ``epochs`` override the shipped configs (used by the
    quick mode and the test suite); the defaults run each arm in well under
    ten minutes on one CPU core.
    """
    os.makedirs(workdir, exist_ok=True)

    def prep(name):
        src = os.path.join(configs_dir, name + ".json")
        if n_per_class is None and epochs is None:
            return src
        return _patched_config(src, os.path.join(workdir, "configs", name + ".json"),
                               n_per_class=n_per_class, epochs=epochs)

    results = []

    # ---- baseline: one plain classifier per domain, full cross-domain grid
    checkpoints = {}
    for dom in _DOMAINS:
        out = os.path.join(workdir, f"baseline_{dom}")
        log(f"[baseline] training {dom}")
        _run_cli(["train", "--config", prep(f"baseline_{dom}"), "--out", out])
        checkpoints[dom] = os.path.join(out, "checkpoint.grla")
    cd_out = os.path.join(workdir, "crossdomain")
    _run_cli(["crossdomain", "--config", prep("crossdomain"), "--out", cd_out,
              "--models"] + [f"{d}={p}" for d, p in checkpoints.items()])
    grid_rows = _read_csv(os.path.join(cd_out, "cross_domain.csv"))
    acc = {(r["train_domain"], r["eval_domain"]): float(r["accuracy"]) for r in grid_rows}
    own_highest = all(
        acc[(d, d)] >= max(acc[(d, e)] for e in _DOMAINS) for d in _DOMAINS
    )
    baseline = ArmResult(
        name="baseline",
        metrics={f"{d}->{e}": acc[(d, e)] for d in _DOMAINS for e in _DOMAINS},
        annotation=_PAPER_SCALE_NOTES["baseline"],
    )
    baseline.assertions.append(("each model scores highest on its own domain", own_highest))
    results.append(baseline)

    # ---- ensemble: leave-one-out mean probabilities, one grid row per
    # held-out domain.  Full-scale runs only saw carryover on one domain
    # (the kidney model's colon ability); mirror that as an existence claim.
    ensemble = ArmResult(name="ensemble", annotation=_PAPER_SCALE_NOTES["ensemble"])
    carried = []
    for held_out in _DOMAINS:
        ens_out = os.path.join(workdir, f"ensemble_{held_out}")
        members = [d for d in _DOMAINS if d != held_out]
        _run_cli(["ensemble", "--config", prep("ensemble"), "--out", ens_out,
                  "--target", held_out,
                  "--checkpoints"] + [checkpoints[d] for d in members])
        ens_rows = _read_csv(os.path.join(ens_out, "ensemble_metrics.csv"))
        ens_acc = float(ens_rows[0]["accuracy"])
        member_best = max(acc[(d, held_out)] for d in members)
        ensemble.metrics[f"leave_out_{held_out}"] = ens_acc
        ensemble.metrics[f"best_member_{held_out}"] = member_best
        carried.append(member_best >= 0.60 and ens_acc >= member_best - 0.05)
    ensemble.assertions.append(
        ("some held-out domain carries over its best member (>=0.60, within 5 points)",
         any(carried))
    )
    results.append(ensemble)

    # ---- adversarial arms plus the λ≡0 control for the gap assertion
    def train_arm(config_name):
        out = os.path.join(workdir, config_name)
        log(f"[{config_name}] training")
        _run_cli(["train", "--config", prep(config_name), "--out", out])
        rows = _read_csv(os.path.join(out, "metrics.csv"))
        picked = [r for r in rows if r["domain"] == _TARGET and r["split"] == "test"]
        return float(picked[0]["accuracy"])

    arm_acc = {}
    for arm in ("dann_with_kidney", "dann_no_kidney", "dann_stain_norm"):
        arm_acc[arm] = train_arm(arm)
    control_acc = train_arm("dann_control_no_kidney")

    for arm in ("dann_with_kidney", "dann_no_kidney", "dann_stain_norm"):
        res = ArmResult(
            name=arm,
            metrics={"target_accuracy": arm_acc[arm], "control_accuracy": control_acc},
            annotation=_PAPER_SCALE_NOTES[arm],
        )
        if arm == "dann_no_kidney":
            res.assertions.append(
                ("adversarial beats λ≡0 control by >= 10 points on target",
                 arm_acc[arm] - control_acc >= 0.10)
            )
        results.append(res)

    _write_summary(results, workdir)
    return results


def _write_summary(results, workdir):
    txt_lines = ["arm summary (synthetic desk-scale runs)", "=" * 46]
    csv_rows = []
    for res in results:
        txt_lines.append(f"\n{res.name}")
        for key, value in sorted(res.metrics.items()):
            txt_lines.append(f"  {key}: {value:.4f}")
            csv_rows.append({"arm": res.name, "metric": key, "value": repr(float(value))})
        for desc, ok in res.assertions:
            txt_lines.append(f"  [{'PASS' if ok else 'FAIL'}] {desc}")
        if res.annotation:
            txt_lines.append(f"  note: {res.annotation}")
    text = "\n".join(txt_lines) + "\n"
    with open(os.path.join(workdir, "summary.txt"), "w") as fh:
        fh.write(text)
    with open(os.path.join(workdir, "summary.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["arm", "metric", "value"],
                                lineterminator="\r\n")
        writer.writeheader()
        writer.writerows(csv_rows)
    print(text)


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="grla-repro", description="run the five-arm reproduction protocol")
    parser.add_argument("--workdir", default="runs/repro")
    parser.add_argument("--configs", default="configs")
    parser.add_argument("--quick", action="store_true",
                        help="tiny datasets and few epochs; smoke test only")
    args = parser.parse_args(argv)
    kwargs = {"n_per_class": 60, "epochs": 3} if args.quick else {}
    results = run_repro_suite(args.workdir, args.configs, **kwargs)
    return 0 if all(r.passed for r in results) else 1


if __name__ == "__main__":
    sys.exit(main())
