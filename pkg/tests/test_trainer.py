"""
Tests for the training loop, held-out split and checkpoints.
"""

import csv

import numpy as np
import pytest

from guidederain.checkpoint import CheckpointError, check_mode, load_checkpoint, save_checkpoint
from guidederain.config import ConfigError, RunConfig
from guidederain.data import DatasetError, RainParams, synthesize_rain, synthetic_background
from guidederain.metrics import psnr
from guidederain.network import AblationMode, DerainNetwork, ModelConfig
from guidederain.optim import AdamState
from guidederain.tensor import Tensor
from guidederain.trainer import (
    FINAL_CHECKPOINT,
    LOG_NAME,
    Trainer,
    clamp_unit,
    evaluate_pairs,
    mean_abs_error,
    prepare_pairs,
    split_holdout,
)


def tiny_config(**overrides):
    """Depth-1, 4-channel run on 16x16 synthetic pairs."""
    values = dict(
        seed=7,
        synthetic=True,
        synthetic_count=4,
        synthetic_size=16,
        holdout_fraction=0.0,
        base_channels=4,
        encoder_depth=1,
        crop=16,
        batch=2,
        epochs=2,
    )
    values.update(overrides)
    return RunConfig(**values)


def read_log(path):
    with open(path, newline='', encoding='utf-8') as f:
        return list(csv.DictReader(f))


class TestPreparePairs:
    def test_synthetic(self):
        pairs = prepare_pairs(tiny_config())
        assert len(pairs) == 4
        assert all(p.max_residual() == 0.0 for p in pairs)

    def test_no_source(self):
        with pytest.raises(DatasetError, match="--synthetic"):
            prepare_pairs(tiny_config(synthetic=False))


class TestSplitHoldout:
    def test_deterministic_and_disjoint(self):
        pairs = prepare_pairs(tiny_config(synthetic_count=8))
        train, held = split_holdout(pairs, 0.25, seed=3)
        again_train, again_held = split_holdout(pairs, 0.25, seed=3)
        assert [p.name for p in held] == [p.name for p in again_held]
        assert len(train) == 6 and len(held) == 2
        assert not {p.name for p in train} & {p.name for p in held}

    def test_keeps_one_training_pair(self):
        pairs = prepare_pairs(tiny_config(synthetic_count=2))
        train, held = split_holdout(pairs, 0.9, seed=0)
        assert len(train) == 1 and len(held) == 1

    def test_zero_fraction(self):
        pairs = prepare_pairs(tiny_config())
        assert split_holdout(pairs, 0.0, seed=0) == (pairs, [])


class TestValidate:
    def test_crop_larger_than_images(self):
        trainer = Trainer(tiny_config(crop=32))
        with pytest.raises(ConfigError, match="exceeds"):
            trainer.validate(prepare_pairs(tiny_config()))

    def test_crop_not_multiple(self):
        trainer = Trainer(tiny_config(crop=10))
        with pytest.raises(ConfigError, match="multiple of 4"):
            trainer.validate(prepare_pairs(tiny_config()))

    def test_no_pairs(self):
        with pytest.raises(DatasetError):
            Trainer(tiny_config()).validate([])


class TestFit:
    def test_writes_log_and_checkpoint(self, tmp_path):
        config = tiny_config(epochs=1)
        summary = Trainer(config).fit(prepare_pairs(config), str(tmp_path))
        assert summary.epochs == 1
        assert (tmp_path / FINAL_CHECKPOINT).exists()
        rows = read_log(tmp_path / LOG_NAME)
        assert len(rows) == 1
        assert int(rows[0]["batches"]) == 2
        assert str(summary).startswith("=" * 60)

    def test_total_column_matches_weights(self, tmp_path):
        config = tiny_config()
        Trainer(config).fit(prepare_pairs(config), str(tmp_path))
        for row in read_log(tmp_path / LOG_NAME):
            expected = (
                float(row["guide"]) + 0.5 * float(row["rain"])
                + 0.5 * float(row["rain_free"]) + 0.001 * float(row["physical"])
            )
            assert float(row["total"]) == pytest.approx(expected, rel=1e-12)

    def test_no_physical_loss_weights_term_by_zero(self, tmp_path):
        config = tiny_config(physical_loss=False)
        Trainer(config).fit(prepare_pairs(config), str(tmp_path))
        for row in read_log(tmp_path / LOG_NAME):
            assert float(row["physical"]) > 0
            expected = float(row["guide"]) + 0.5 * float(row["rain"]) + 0.5 * float(row["rain_free"])
            assert float(row["total"]) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("mode", ["m1", "m2", "m3"])
    def test_reduced_topologies_train(self, mode):
        config = tiny_config(mode=mode, epochs=1)
        summary = Trainer(config).fit(prepare_pairs(config))
        assert np.isfinite(summary.final_total)
        assert summary.checkpoint_path == ""

    def test_identical_runs_are_byte_identical(self, tmp_path):
        config = tiny_config()
        for name in ("a", "b"):
            Trainer(config).fit(prepare_pairs(config), str(tmp_path / name))
        for filename in (FINAL_CHECKPOINT, LOG_NAME):
            assert (tmp_path / "a" / filename).read_bytes() == (tmp_path / "b" / filename).read_bytes()

    def test_periodic_checkpoints(self, tmp_path):
        config = tiny_config(epochs=3, checkpoint_every=1)
        Trainer(config).fit(prepare_pairs(config), str(tmp_path))
        written = sorted(p.name for p in tmp_path.glob("checkpoint_epoch*.ckpt"))
        assert written == ["checkpoint_epoch0001.ckpt", "checkpoint_epoch0002.ckpt"]

    def test_resume_matches_uninterrupted_run(self, tmp_path):
        config = tiny_config(epochs=2, checkpoint_every=1)
        pairs = prepare_pairs(config)
        full = Trainer(config)
        full.fit(pairs, str(tmp_path / "full"))

        resumed = Trainer(config)
        resumed.resume(load_checkpoint(tmp_path / "full" / "checkpoint_epoch0001.ckpt"))
        assert resumed.start_epoch == 1
        summary = resumed.fit(pairs, str(tmp_path / "resumed"))
        assert [r.epoch for r in summary.records] == [0, 1]
        assert all(np.array_equal(full.params[n], resumed.params[n]) for n in full.params)
        for filename in (LOG_NAME, FINAL_CHECKPOINT):
            assert (tmp_path / "full" / filename).read_bytes() == (tmp_path / "resumed" / filename).read_bytes()

    def test_creates_nested_output_directory(self, tmp_path):
        config = tiny_config(epochs=1)
        out = tmp_path / "runs" / "M1_W"
        Trainer(config).fit(prepare_pairs(config), str(out))
        assert (out / LOG_NAME).exists() and (out / FINAL_CHECKPOINT).exists()

    def test_resume_rejects_other_topology(self, tmp_path):
        config = tiny_config(epochs=1)
        Trainer(config).fit(prepare_pairs(config), str(tmp_path))
        with pytest.raises(CheckpointError, match="M4"):
            Trainer(tiny_config(mode="m2")).resume(load_checkpoint(tmp_path / FINAL_CHECKPOINT))

    def test_finished_checkpoint_has_nothing_left(self, tmp_path):
        config = tiny_config(epochs=1)
        trainer = Trainer(config)
        trainer.fit(prepare_pairs(config), str(tmp_path))
        again = Trainer(config)
        again.resume(load_checkpoint(tmp_path / FINAL_CHECKPOINT))
        with pytest.raises(ConfigError, match="nothing left"):
            again.validate(prepare_pairs(config))

    def test_evaluate_reports_physical_residual(self):
        config = tiny_config(epochs=1)
        pairs = prepare_pairs(config)
        trainer = Trainer(config)
        trainer.fit(pairs)
        report = trainer.evaluate(pairs)
        assert len(report.rows) == 4
        assert all(r.physical_residual is not None for r in report.rows)
        assert all(-1 <= r.ssim <= 1 for r in report.rows)

    @pytest.mark.slow
    def test_loss_halves_on_toy_set(self):
        config = tiny_config(synthetic_count=8, synthetic_size=32, crop=32, base_channels=8, epochs=40)
        summary = Trainer(config).fit(prepare_pairs(config))
        assert summary.final_total < 0.5 * summary.first_total


class TestCheckpoint:
    @pytest.fixture
    def saved(self, tmp_path):
        network = DerainNetwork(ModelConfig(base_channels=4, encoder_depth=1, ablation=AblationMode("m3")))
        params = network.init_params(seed=0)
        state = AdamState.for_params(params)
        state.t = 5
        path = save_checkpoint(tmp_path / "a.ckpt", network.config, params, state, extra={"epoch": 5})
        return path, network, params

    def test_round_trip(self, saved):
        path, network, params = saved
        checkpoint = load_checkpoint(path)
        assert checkpoint.config == network.config
        assert checkpoint.params.names() == params.names()
        assert all(np.array_equal(checkpoint.params[n], params[n]) for n in params)
        assert checkpoint.state.t == 5
        assert set(checkpoint.state.m) == set(params.names())
        assert checkpoint.extra == {"epoch": 5}

    def test_saving_is_deterministic(self, saved, tmp_path):
        path, network, params = saved
        again = save_checkpoint(tmp_path / "b.ckpt", network.config, params, AdamState.for_params(params))
        first = save_checkpoint(tmp_path / "c.ckpt", network.config, params, AdamState.for_params(params))
        assert again.read_bytes() == first.read_bytes()

    def test_not_a_checkpoint(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"hello")
        with pytest.raises(CheckpointError, match="Not a guidederain checkpoint"):
            load_checkpoint(path)

    def test_truncated_blob(self, saved):
        path, _, _ = saved
        path.write_bytes(path.read_bytes()[:-16])
        with pytest.raises(CheckpointError, match="outside"):
            load_checkpoint(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="Cannot read"):
            load_checkpoint(tmp_path / "missing.ckpt")

    def test_check_mode(self, saved):
        path, _, _ = saved
        checkpoint = load_checkpoint(path)
        check_mode(checkpoint, None)
        check_mode(checkpoint, AblationMode("m3", no_physical_loss=True))
        with pytest.raises(CheckpointError, match="M3"):
            check_mode(checkpoint, AblationMode("m4"))


class TestEvaluatePairs:
    def test_m1_zero_head_scores_rainy_input(self):
        network = DerainNetwork(ModelConfig(base_channels=4, encoder_depth=1, ablation=AblationMode("m1")))
        store = network.init_params(seed=0)
        store.zero("rain.tail")
        rng = np.random.default_rng(0)
        pair = synthesize_rain(Tensor(synthetic_background(16, rng)), RainParams(seed=1))
        report = evaluate_pairs(network, store, [pair])
        assert report.rows[0].psnr == pytest.approx(psnr(pair.o, pair.b))
        assert report.rows[0].physical_residual is None
        expected = float(np.mean(np.abs(np.clip(pair.o.data, 0, 1) - pair.b.data)))
        assert mean_abs_error(network, store, [pair]) == pytest.approx(expected, abs=1e-7)


@pytest.mark.slow
def test_guided_model_fits_training_set_at_least_as_well():
    """At equal budget M4 ends with no larger |B^ - B| on its training pairs than M1 or M2."""
    errors = {}
    for mode in ("m1", "m2", "m4"):
        config = tiny_config(mode=mode, synthetic_count=8, synthetic_size=32, crop=32, base_channels=8, epochs=60)
        pairs = prepare_pairs(config)
        trainer = Trainer(config)
        trainer.fit(pairs)
        errors[mode] = trainer.training_error(pairs)
    assert errors["m4"] <= errors["m1"]
    assert errors["m4"] <= errors["m2"]


@pytest.mark.slow
def test_full_model_overfits_single_pair():
    """M4 with 16 base channels memorizes one 64x64 pair within 2000 steps."""
    config = RunConfig(
        seed=0,
        synthetic=True,
        synthetic_count=1,
        synthetic_size=64,
        holdout_fraction=0.0,
        base_channels=16,
        crop=64,
        batch=1,
        epochs=2000,
        lr=5e-4,
    )
    pairs = prepare_pairs(config)
    trainer = Trainer(config)
    trainer.fit(pairs)
    outputs = trainer.network.infer(pairs[0].o, trainer.params)
    assert psnr(clamp_unit(outputs.final), pairs[0].b) >= 30.0
