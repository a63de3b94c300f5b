"""
End-to-end tests for the train, derain, eval and ablate commands.
"""

import csv
import json

import numpy as np
import pytest
from PIL import Image

from guidederain.checkpoint import save_checkpoint
from guidederain.cli import build_parser, main
from guidederain.config import load_config, resolve_config
from guidederain.network import AblationMode, DerainNetwork, ModelConfig

TINY = """
seed: 7
synthetic-count: 4
synthetic-size: 16
base-channels: 4
encoder-depth: 1
crop: 16
batch: 2
epochs: 1
"""


@pytest.fixture
def tiny_config_file(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return path


def write_png(path, size=(33, 47), seed=0):
    pixels = np.random.default_rng(seed).integers(0, 256, size=size + (3,), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path)
    return pixels


def tiny_checkpoint(path, topology, zero=()):
    network = DerainNetwork(ModelConfig(base_channels=4, encoder_depth=1, ablation=AblationMode(topology)))
    params = network.init_params(seed=0)
    for prefix in zero:
        params.zero(prefix)
    return save_checkpoint(path, network.config, params)


def exit_code(argv):
    with pytest.raises(SystemExit) as excinfo:
        main(argv)
    return excinfo.value.code


class TestParser:
    def test_unset_flags_stay_none(self):
        args = build_parser().parse_args(["train", "--synthetic"])
        assert args.seed is None and args.multiscale is None and args.epochs is None
        assert args.synthetic is True

    def test_component_switches(self):
        args = build_parser().parse_args(["train", "--no-multiscale", "--no-dilated-streams", "--no-physical-loss"])
        assert (args.multiscale, args.dilated_streams, args.physical_loss) == (False, False, False)

    def test_no_command_prints_help(self):
        assert exit_code([]) == 0


class TestTrain:
    def test_synthetic_smoke_run(self, tmp_path, tiny_config_file):
        out = tmp_path / "run"
        main(["train", "--synthetic", "-c", str(tiny_config_file), "--seed", "7", "--out", str(out)])
        assert (out / "model.ckpt").exists()
        with open(out / "loss_log.csv", newline='') as f:
            assert len(list(csv.DictReader(f))) == 1

        echoed = resolve_config(load_config(out / "config.yaml"))
        assert echoed.seed == 7 and echoed.synthetic and echoed.base_channels == 4

    def test_rerun_from_echoed_config_is_byte_identical(self, tmp_path, tiny_config_file):
        first = tmp_path / "first"
        main(["train", "--synthetic", "-c", str(tiny_config_file), "--out", str(first)])
        second = tmp_path / "second"
        main(["train", "-c", str(first / "config.yaml"), "--out", str(second)])
        assert (first / "model.ckpt").read_bytes() == (second / "model.ckpt").read_bytes()
        assert (first / "loss_log.csv").read_bytes() == (second / "loss_log.csv").read_bytes()

    def test_missing_data_fails_before_training(self, tmp_path, tiny_config_file):
        out = tmp_path / "run"
        assert exit_code(["train", "-c", str(tiny_config_file), "--out", str(out)]) == 1
        assert not (out / "loss_log.csv").exists()

    def test_missing_config_file(self, tmp_path):
        assert exit_code(["train", "--synthetic", "-c", str(tmp_path / "nope.yaml")]) == 1

    def test_bad_dataset(self, tmp_path, tiny_config_file):
        (tmp_path / "data" / "rain").mkdir(parents=True)
        (tmp_path / "data" / "norain").mkdir()
        write_png(tmp_path / "data" / "rain" / "lonely.png")
        code = exit_code(["train", "-c", str(tiny_config_file), "--dataset", str(tmp_path / "data"),
                          "--out", str(tmp_path / "run")])
        assert code == 1


class TestDerain:
    def test_m1_zero_rain_head_is_identity(self, tmp_path):
        ckpt = tiny_checkpoint(tmp_path / "m1.ckpt", "m1", zero=("rain.tail",))
        pixels = write_png(tmp_path / "in" / "photo.png")
        out = tmp_path / "out"
        main(["derain", "--checkpoint", str(ckpt), "--out", str(out), str(tmp_path / "in" / "photo.png")])
        result = np.asarray(Image.open(out / "photo.png"))
        assert result.shape == (33, 47, 3)
        assert np.array_equal(result, pixels)

    def test_dump_intermediates_under_m4(self, tmp_path):
        ckpt = tiny_checkpoint(tmp_path / "m4.ckpt", "m4")
        for i in range(2):
            write_png(tmp_path / "in" / f"img{i}.png", size=(20, 24), seed=i)
        out = tmp_path / "out"
        main(["derain", "--checkpoint", str(ckpt), "--out", str(out), "--dump-intermediates", str(tmp_path / "in")])
        names = sorted(p.name for p in out.glob("*.png"))
        assert names == [
            "img0.png", "img0_free.png", "img0_rain.png",
            "img1.png", "img1_free.png", "img1_rain.png",
        ]
        assert (out / "config.yaml").exists()

    def test_mode_mismatch(self, tmp_path):
        ckpt = tiny_checkpoint(tmp_path / "m1.ckpt", "m1")
        write_png(tmp_path / "a.png")
        code = exit_code(["derain", "--checkpoint", str(ckpt), "--mode", "m4", "--out", str(tmp_path / "out"),
                          str(tmp_path / "a.png")])
        assert code == 1

    def test_requires_checkpoint(self, tmp_path):
        write_png(tmp_path / "a.png")
        assert exit_code(["derain", "--out", str(tmp_path / "out"), str(tmp_path / "a.png")]) == 1


class TestEval:
    def test_same_directory_gives_inf_and_one(self, tmp_path, capsys):
        for i in range(3):
            write_png(tmp_path / "imgs" / f"{i}.png", size=(16, 16), seed=i)
        main(["eval", "--derained", str(tmp_path / "imgs"), "--ground-truth", str(tmp_path / "imgs")])
        lines = capsys.readouterr().out.strip().split("\n")
        rows = list(csv.DictReader(lines))
        assert len(rows) == 4
        assert all(r["psnr"] == "Inf" and float(r["ssim"]) == pytest.approx(1.0) for r in rows[:-1])
        assert rows[-1]["image"] == "mean"

    def test_mean_row_is_mean_of_image_rows(self, tmp_path):
        for i in range(4):
            write_png(tmp_path / "derained" / f"{i}.png", size=(16, 16), seed=i)
            write_png(tmp_path / "gt" / f"{i}.png", size=(16, 16), seed=i + 10)
        main(["eval", "--derained", str(tmp_path / "derained"), "--ground-truth", str(tmp_path / "gt"),
              "--out", str(tmp_path / "report")])
        with open(tmp_path / "report" / "report.csv", newline='') as f:
            rows = list(csv.DictReader(f))
        images, mean_row = rows[:-1], rows[-1]
        assert len(images) == 4 and mean_row["image"] == "mean"
        for column in ("psnr", "ssim"):
            expected = sum(float(r[column]) for r in images) / len(images)
            assert float(mean_row[column]) == pytest.approx(expected, abs=1e-9)

    def test_physical_residual_and_report_file(self, tmp_path):
        ckpt = tiny_checkpoint(tmp_path / "m4.ckpt", "m4")
        write_png(tmp_path / "rainy" / "a.png", size=(16, 16), seed=1)
        write_png(tmp_path / "gt" / "a.png", size=(16, 16), seed=2)
        main(["derain", "--checkpoint", str(ckpt), "--out", str(tmp_path / "derained"), "--dump-intermediates",
              str(tmp_path / "rainy")])
        report_dir = tmp_path / "report"
        main(["eval", "--derained", str(tmp_path / "derained"), "--ground-truth", str(tmp_path / "gt"),
              "--rainy", str(tmp_path / "rainy"), "--format", "json", "--out", str(report_dir)])
        data = json.loads((report_dir / "report.json").read_text())
        assert data["images"][0]["image"] == "a"
        assert data["images"][0]["physical_residual"] >= 0
        assert (report_dir / "config.yaml").exists()

    def test_unmatched_files(self, tmp_path):
        write_png(tmp_path / "derained" / "a.png", size=(16, 16))
        write_png(tmp_path / "gt" / "b.png", size=(16, 16))
        code = exit_code(["eval", "--derained", str(tmp_path / "derained"), "--ground-truth", str(tmp_path / "gt")])
        assert code == 1


class TestAblate:
    def test_runs_every_configuration(self, tmp_path, tiny_config_file):
        out = tmp_path / "ablation"
        main(["ablate", "-c", str(tiny_config_file), "--out", str(out)])

        runs = sorted(p.name for p in (out / "runs").iterdir())
        assert runs == sorted(
            [f"M{i}_{v}" for i in range(1, 5) for v in ("W", "WO")] + ["R1", "R2", "R3"]
        )
        assert all((out / "runs" / r / "model.ckpt").exists() for r in runs)

        with open(out / "ablation_models.csv", newline='') as f:
            models = list(csv.DictReader(f))
        assert [r["variant"] for r in models] == ["W", "W/O"]
        assert all(r["M4_psnr"] and r["M4_train_l1"] for r in models)

        with open(out / "ablation_components.csv", newline='') as f:
            components = list(csv.DictReader(f))
        assert [r["metric"] for r in components] == ["psnr", "ssim", "final_loss", "train_l1"]

        with open(out / "runs" / "R2" / "loss_log.csv", newline='') as f:
            for row in csv.DictReader(f):
                expected = float(row["guide"]) + 0.5 * float(row["rain"]) + 0.5 * float(row["rain_free"])
                assert float(row["total"]) == pytest.approx(expected, rel=1e-12)

        assert resolve_config(load_config(out / "config.yaml")).synthetic
