"""Training-loop behavior on a deliberately tiny network: determinism,
masking at the checkpoint level, divergence handling, SGD arithmetic, batch
interleaving, and the checkpoint container format."""

import os

import numpy as np
import pytest

import grla.tensor as T
from grla.data import LabeledImageSet
from grla.model import DannConfig, build_dann
from grla.trainer import (
    CheckpointError,
    DivergenceError,
    RunManifest,
    TrainConfig,
    _make_batches,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    sgd_step,
    train,
)

MINI = DannConfig(input_shape=(3, 8, 8), feature_dim=8, num_classes=2,
                  dropout_rate=0.0, stages=((4, 1, 2),), seed=0)


def mini_set(n=16, seed=0, domain_id="src"):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 2
    images = rng.uniform(0.1, 0.9, size=(n, 3, 8, 8)).astype(np.float32)
    # make the classes separable so short runs actually learn
    images[labels == 1, :, :4, :] += 0.4
    return LabeledImageSet(np.clip(images, 0, 1), labels, domain_id)


def mini_cfg(**kw):
    base = dict(lr=0.05, batch_size=8, epochs=3, seed=0, eval_every=0)
    base.update(kw)
    return TrainConfig(**base)


class TestTrainConfig:
    @pytest.mark.parametrize("bad", [
        dict(optimizer="adam"),
        dict(lr=0.0),
        dict(weight_decay=-1e-4),
        dict(batch_size=1),
        dict(epochs=0),
        dict(max_grad_norm=0.0),
        dict(lambda_kind="linear_sideways"),
        dict(eval_every=-1),
    ])
    def test_invalid_rejected(self, bad):
        with pytest.raises(ValueError):
            TrainConfig(**bad)

    def test_round_trips_through_dict(self):
        cfg = mini_cfg(lambda_kind="constant_half")
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


class TestSgdStep:
    def test_update_formula(self):
        w = np.array([1.0, -2.0], dtype=np.float64)
        params = {"w": w}
        sgd_step(params, {"w": np.array([0.5, 0.5])}, lr=0.1, weight_decay=0.01)
        expect = np.array([1.0, -2.0]) - 0.1 * (np.array([0.5, 0.5])
                                                + 0.01 * np.array([1.0, -2.0]))
        assert np.allclose(params["w"], expect, atol=1e-12)

    def test_missing_grad_still_decays(self):
        params = {"w": np.array([2.0])}
        sgd_step(params, {}, lr=0.5, weight_decay=0.1)
        assert np.allclose(params["w"], 2.0 - 0.5 * 0.1 * 2.0)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(T.ShapeError):
            sgd_step({"w": np.zeros(3)}, {"w": np.zeros(2)}, lr=0.1, weight_decay=0.0)

    def test_updates_tensor_in_place(self):
        p = T.Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
        sgd_step({"w": p}, {"w": np.ones(2)}, lr=0.25, weight_decay=0.0)
        assert np.allclose(p.data, 0.75)


class TestBatchMixing:
    def test_half_and_half_while_both_last(self):
        rng = np.random.default_rng(0)
        batches = _make_batches(rng, n_source=8, n_target=8, batch_size=4)
        for s, t in batches:
            assert len(s) == 2 and len(t) == 2

    def test_remainder_comes_from_longer_stream(self):
        rng = np.random.default_rng(0)
        batches = _make_batches(rng, n_source=4, n_target=20, batch_size=4)
        tail = [(s, t) for s, t in batches if len(s) == 0]
        assert tail and all(len(t) <= 4 for _, t in tail)

    def test_every_index_seen_exactly_once(self):
        rng = np.random.default_rng(1)
        batches = _make_batches(rng, n_source=13, n_target=7, batch_size=4)
        src = np.concatenate([s for s, _ in batches])
        tgt = np.concatenate([t for _, t in batches])
        assert sorted(src) == list(range(13))
        assert sorted(tgt) == list(range(7))

    def test_source_only_stream(self):
        rng = np.random.default_rng(2)
        batches = _make_batches(rng, n_source=10, n_target=0, batch_size=4)
        assert all(len(t) == 0 for _, t in batches)
        assert sum(len(s) for s, _ in batches) == 10


class TestTrainLoop:
    def test_deterministic_given_seed(self):
        runs = []
        for _ in range(2):
            model, manifest = train(build_dann(MINI), mini_set(), mini_set(seed=5, domain_id="tgt"),
                                    mini_cfg())
            runs.append((model, manifest))
        a, b = runs
        for k in a[0].params:
            assert np.array_equal(a[0].params[k].data, b[0].params[k].data), k
        assert a[1].records == b[1].records

    def test_target_labels_never_enter_training(self, tmp_path):
        target = mini_set(seed=5, domain_id="tgt")
        scrambled = LabeledImageSet(target.images.copy(),
                                    1 - target.class_labels, "tgt")
        outs = []
        for tgt, sub in ((target, "a"), (scrambled, "b")):
            out = tmp_path / sub
            train(build_dann(MINI), mini_set(), tgt, mini_cfg(), out_dir=str(out))
            outs.append((out / "checkpoint.grla").read_bytes())
        assert outs[0] == outs[1]

    def test_leak_fixture_changes_the_checkpoint(self, tmp_path):
        outs = []
        for leak, sub in ((None, "clean"), ("unmasked", "leak")):
            out = tmp_path / sub
            train(build_dann(MINI), mini_set(), mini_set(seed=5, domain_id="tgt"),
                  mini_cfg(), out_dir=str(out), inject_leak=leak)
            outs.append((out / "checkpoint.grla").read_bytes())
        assert outs[0] != outs[1]

    def test_unknown_leak_mode_rejected(self):
        with pytest.raises(ValueError):
            train(build_dann(MINI), mini_set(), None, mini_cfg(epochs=1),
                  inject_leak="sideways")

    def test_target_only_class_loss_exactly_zero(self):
        _, manifest = train(build_dann(MINI), None, mini_set(domain_id="tgt"),
                            mini_cfg())
        assert all(r["class_loss"] == 0.0 for r in manifest.records)
        assert all(r["n_source"] == 0 for r in manifest.records)

    def test_source_only_runs(self):
        _, manifest = train(build_dann(MINI), mini_set(), None, mini_cfg())
        assert all(r["n_target"] == 0 for r in manifest.records)

    def test_no_data_rejected(self):
        with pytest.raises(ValueError):
            train(build_dann(MINI), None, None, mini_cfg())

    def test_manifest_schedule_columns(self):
        cfg = mini_cfg(epochs=4, lambda_kind="linear_up")
        _, manifest = train(build_dann(MINI), mini_set(), mini_set(seed=5, domain_id="tgt"), cfg)
        assert [r["epoch"] for r in manifest.records] == [0, 1, 2, 3]
        assert [r["lambda"] for r in manifest.records] == [0.0, 0.25, 0.5, 0.75]
        assert manifest.records[0]["lr"] == pytest.approx(cfg.lr)
        assert manifest.records[-1]["lr"] == pytest.approx(cfg.lr / 4)

    def test_learns_separable_data(self):
        model, _ = train(build_dann(MINI), mini_set(n=64), None,
                         mini_cfg(epochs=10, lr=0.1))
        rep = evaluate(model, mini_set(n=64), "train")
        assert rep.accuracy > 0.9

    def test_divergence_raises_and_saves_last_good(self, tmp_path):
        out = tmp_path / "run"
        with pytest.raises(DivergenceError) as exc_info:
            train(build_dann(MINI), mini_set(), None,
                  mini_cfg(lr=0.05, divergence_threshold=1e-6), out_dir=str(out))
        err = exc_info.value
        assert err.checkpoint_path is not None and os.path.exists(err.checkpoint_path)
        model, info = load_checkpoint(err.checkpoint_path)
        assert all(np.all(np.isfinite(p.data)) for p in model.params.values())

    def test_clipping_recorded(self):
        _, manifest = train(build_dann(MINI), mini_set(), None,
                            mini_cfg(epochs=1, max_grad_norm=1e-4))
        assert manifest.records[0]["clipped_batches"] > 0

    def test_best_val_checkpoint_written(self, tmp_path):
        out = tmp_path / "run"
        train(build_dann(MINI), mini_set(), mini_set(seed=5, domain_id="tgt"),
              mini_cfg(eval_every=1), out_dir=str(out),
              val_source=mini_set(seed=6), val_target=mini_set(seed=7, domain_id="tgt"))
        assert (out / "best_val.grla").exists()
        assert (out / "checkpoint.grla").exists()
        assert (out / "manifest.jsonl").exists()

    def test_no_eval_means_no_best_val(self, tmp_path):
        out = tmp_path / "run"
        train(build_dann(MINI), mini_set(), None, mini_cfg(eval_every=0),
              out_dir=str(out), val_source=mini_set(seed=6))
        assert not (out / "best_val.grla").exists()


class TestEvaluate:
    def test_matches_manual_accuracy(self):
        from grla.model import predict_proba

        model = build_dann(MINI)
        ds = mini_set(n=20, seed=3)
        rep = evaluate(model, ds, "check", batch_size=7)
        manual = (predict_proba(model, ds.images).argmax(1) == ds.class_labels).mean()
        assert rep.accuracy == pytest.approx(manual)
        assert rep.domain_tag == "check"

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            evaluate(build_dann(MINI),
                     LabeledImageSet(np.empty((0, 3, 8, 8), np.float32),
                                     np.empty(0, np.int64), "none"))


class TestCheckpointFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        model, manifest = train(build_dann(MINI), mini_set(), None, mini_cfg(epochs=1))
        path = str(tmp_path / "ck.grla")
        save_checkpoint(model, manifest, path)
        loaded, info = load_checkpoint(path)
        assert loaded.config == model.config
        for k in model.params:
            assert np.array_equal(loaded.params[k].data, model.params[k].data), k
        assert info["seed"] == manifest.seed
        assert info["dataset_fingerprint"] == manifest.dataset_fingerprint
        assert info["epochs_completed"] == 1

    def test_save_twice_identical_bytes(self, tmp_path):
        model = build_dann(MINI)
        p1, p2 = str(tmp_path / "a.grla"), str(tmp_path / "b.grla")
        save_checkpoint(model, None, p1)
        save_checkpoint(model, None, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    def test_extra_arrays_round_trip(self, tmp_path):
        model = build_dann(MINI)
        path = str(tmp_path / "ck.grla")
        stats = np.arange(6, dtype=np.float64).reshape(2, 3)
        save_checkpoint(model, None, path, extra_arrays={"stats": stats})
        _, info = load_checkpoint(path)
        assert np.array_equal(info["extra"]["stats"], stats)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "bad.grla"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    @staticmethod
    def _payload_offset(raw, name):
        """Byte offset of the named tensor's data inside a checkpoint."""
        off = raw.index(name) + len(name)
        dt_len = raw[off]
        off += 1 + dt_len
        ndim = raw[off]
        off += 1 + 4 * ndim + 8
        return off

    def test_corrupt_payload_rejected(self, tmp_path):
        model = build_dann(MINI)
        path = str(tmp_path / "ck.grla")
        save_checkpoint(model, None, path)
        raw = bytearray(open(path, "rb").read())
        raw[self._payload_offset(raw, b"stem.w") + 5] ^= 0xFF
        open(path, "wb").write(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_corrupt_length_field_rejected(self, tmp_path):
        model = build_dann(MINI)
        path = str(tmp_path / "ck.grla")
        save_checkpoint(model, None, path)
        raw = bytearray(open(path, "rb").read())
        # high byte of the 8-byte length that precedes stem.w's payload
        raw[self._payload_offset(raw, b"stem.w") - 2] = 0x7F
        open(path, "wb").write(bytes(raw))
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))

    def test_truncated_file_rejected(self, tmp_path):
        model = build_dann(MINI)
        path = str(tmp_path / "ck.grla")
        save_checkpoint(model, None, path)
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[: len(raw) // 2])
        with pytest.raises(CheckpointError):
            load_checkpoint(str(path))


class TestRunManifest:
    def test_jsonl_round_trip(self, tmp_path):
        _, manifest = train(build_dann(MINI), mini_set(), None, mini_cfg(epochs=2))
        path = str(tmp_path / "m.jsonl")
        manifest.write_jsonl(path)
        back = RunManifest.read_jsonl(path)
        assert back.records == manifest.records
        assert back.train_config == manifest.train_config
        assert back.dataset_fingerprint == manifest.dataset_fingerprint

    def test_missing_header_rejected(self, tmp_path):
        path = tmp_path / "m.jsonl"
        path.write_text('{"kind":"epoch","epoch":0}\n')
        with pytest.raises(ValueError):
            RunManifest.read_jsonl(str(path))

    def test_fingerprint_ignores_target_labels(self):
        tgt = mini_set(seed=5, domain_id="tgt")
        flipped = LabeledImageSet(tgt.images.copy(), 1 - tgt.class_labels, "tgt")
        src = mini_set()
        _, m1 = train(build_dann(MINI), src, tgt, mini_cfg(epochs=1))
        _, m2 = train(build_dann(MINI), src, flipped, mini_cfg(epochs=1))
        assert m1.dataset_fingerprint == m2.dataset_fingerprint

    def test_fingerprint_tracks_source_labels(self):
        src = mini_set()
        flipped = LabeledImageSet(src.images.copy(), 1 - src.class_labels, "src")
        _, m1 = train(build_dann(MINI), src, None, mini_cfg(epochs=1))
        _, m2 = train(build_dann(MINI), flipped, None, mini_cfg(epochs=1))
        assert m1.dataset_fingerprint != m2.dataset_fingerprint
