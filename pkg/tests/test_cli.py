import json
import math
import os
import subprocess
import sys

import numpy as np
import pytest

from zsrobust.attacks import PIXEL
from zsrobust.cli import main
from zsrobust.data import load_dataset
from zsrobust.evaluation import load_frontier_csv, load_report_csv
from zsrobust.models import ArchConfig, Model, VisionEncoder, save_checkpoint

SMALL_DATA = ["--image-size", "8", "--per-class", "6", "--test-per-class", "3"]
SMALL_ARCH = {"image_shape": [3, 8, 8], "patch": 4, "width": 8, "depth": 2, "heads": 2, "embed_dim": 32}


def _tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in files:
            full = os.path.join(dirpath, f)
            with open(full, "rb") as fh:
                out[os.path.relpath(full, root)] = fh.read()
    return out


def _json(path, doc):
    path.write_text(json.dumps(doc))
    return str(path)


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--seed", "3", "--out", str(root / "data")] + SMALL_DATA) == 0
    return root


class TestGenData:
    def test_twice_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["gen-data", "--seed", "7", "--out", str(tmp_path / name)] + SMALL_DATA) == 0
        assert _tree(tmp_path / "a") == _tree(tmp_path / "b")

    def test_layout(self, small):
        names = set(os.listdir(small / "data"))
        assert {"pretrain", "train", "train_test", "banks", "spec.json", "manifest.json"} <= names
        assert any(n.startswith("heldout_") for n in names)
        manifest = json.loads((small / "data" / "manifest.json").read_text())
        assert manifest["command"] == "gen-data" and manifest["seed"] == 3


class TestExitCodes:
    def test_usage_errors(self, capsys):
        assert main([]) == 1
        assert main(["nonsense"]) == 1
        assert main(["gen-data", "--out", "x", "--bogus"]) == 1
        line = capsys.readouterr().err.strip().splitlines()[-1]
        assert json.loads(line)["exit"] == 1

    def test_validation_error_is_one_json_line(self, tmp_path, small, capsys):
        cfg = _json(tmp_path / "c.json", {"loss_variant": "tecoa", "adaptation": "full_ft", "tau": -1})
        code = main(["train", "--config", cfg, "--data", str(small / "data" / "train"),
                     "--bank", str(small / "data" / "banks" / "train.json"), "--out", str(tmp_path / "m.ckpt")])
        err = capsys.readouterr().err.strip().splitlines()
        assert code == 2 and len(err) == 1
        doc = json.loads(err[0])
        assert doc["error"] == "ConfigError" and "τ" in doc["message"]

    def test_missing_file(self, tmp_path, capsys):
        code = main(["pseudo-label", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(tmp_path),
                     "--bank", str(tmp_path / "b.json"), "--out", str(tmp_path / "o")])
        assert code == 2
        assert json.loads(capsys.readouterr().err.strip())["exit"] == 2

    def test_runtime_error(self, tmp_path, small, capsys):
        model = Model(VisionEncoder.init(ArchConfig(**{**SMALL_ARCH, "image_shape": (3, 8, 8)}), 0))
        model.encoder["patch_embed.weight"].data[:] = np.nan
        save_checkpoint(model, tmp_path / "nan.ckpt")
        code = main(["attack", "--checkpoint", str(tmp_path / "nan.ckpt"), "--data", str(small / "data" / "train"),
                     "--bank", str(small / "data" / "banks" / "train.json"), "--limit", "2",
                     "--out", str(tmp_path / "adv")])
        assert code == 3
        assert json.loads(capsys.readouterr().err.strip())["error"] == "AttackError"

    def test_module_entry_point(self):
        proc = subprocess.run([sys.executable, "-m", "zsrobust", "eval"], capture_output=True, text=True)
        assert proc.returncode == 1
        assert json.loads(proc.stderr.strip().splitlines()[-1])["exit"] == 1


class TestWorkflow:
    def test_train_attack_eval_pseudo_label(self, tmp_path, small):
        data = small / "data"
        cfg = _json(tmp_path / "c.json", {"loss_variant": "tecoa", "adaptation": "full_ft", "epochs": 2,
                                          "batch_size": 16, "arch": SMALL_ARCH})
        ckpt = tmp_path / "run" / "m.ckpt"
        assert main(["train", "--config", cfg, "--data", str(data / "train"),
                     "--bank", str(data / "banks" / "train.json"), "--out", str(ckpt), "--seed", "1"]) == 0
        log = [json.loads(line) for line in (tmp_path / "run" / "m.log.jsonl").read_text().splitlines()]
        assert [r["epoch"] for r in log] == [0, 1]
        manifest = json.loads((tmp_path / "run" / "m.manifest.json").read_text())
        assert manifest["seed"] == 1 and manifest["config"]["seed"] == 1 and len(manifest["config_hash"]) == 16
        assert set(manifest["inputs"]) == {cfg, str(data / "train"), str(data / "banks" / "train.json")}

        attack = _json(tmp_path / "a.json", {"eps": 4 * PIXEL, "alpha": PIXEL, "steps": 3})
        assert main(["attack", "--checkpoint", str(ckpt), "--data", str(data / "train"),
                     "--bank", str(data / "banks" / "train.json"), "--attack", attack, "--limit", "5",
                     "--out", str(tmp_path / "adv")]) == 0
        meta = json.loads((tmp_path / "adv" / "meta.json").read_text())
        assert meta["shape"][0] == 5 and meta["linf"] <= 4 * PIXEL + 1e-7

        out = tmp_path / "ev" / "report.json"
        assert main(["eval", "--checkpoint", str(ckpt), "--data-dir", str(data), "--banks-dir", str(data / "banks"),
                     "--attack", attack, "--out", str(out)]) == 0
        records, avg = load_report_csv(tmp_path / "ev" / "report.csv")
        assert [r["dataset"] for r in records] == [r["dataset"] for r in json.loads(out.read_text())["records"]]
        assert all(r["dataset"].startswith("heldout_") for r in records)
        assert all(r["robust"] <= r["clean"] for r in records)
        assert avg["dataset"] == "average"

        assert main(["pseudo-label", "--checkpoint", str(ckpt), "--data", str(data / "heldout_0"),
                     "--bank", str(data / "banks" / "heldout_0.json"), "--out", str(tmp_path / "pl")]) == 0
        assert load_dataset(tmp_path / "pl").labels.shape == (len(load_dataset(data / "heldout_0")),)

    def test_resume_cli(self, tmp_path, small):
        data = small / "data"
        cfg = _json(tmp_path / "c.json", {"loss_variant": "tecoa", "adaptation": "full_ft", "epochs": 2,
                                          "batch_size": 16, "arch": SMALL_ARCH})
        common = ["--config", cfg, "--data", str(data / "train"), "--bank", str(data / "banks" / "train.json")]
        assert main(["train", *common, "--out", str(tmp_path / "full.ckpt")]) == 0
        assert main(["train", *common, "--out", str(tmp_path / "half.ckpt"), "--stop-after", "1"]) == 0
        assert main(["train", *common, "--out", str(tmp_path / "rest.ckpt"),
                     "--resume", str(tmp_path / "half.state")]) == 0
        assert (tmp_path / "full.ckpt").read_bytes() == (tmp_path / "rest.ckpt").read_bytes()
        assert (tmp_path / "full.log.jsonl").read_bytes() == (tmp_path / "rest.log.jsonl").read_bytes()


class TestChance:
    def test_random_model_at_chance(self, tmp_path):
        data = tmp_path / "data"
        assert main(["gen-data", "--seed", "0", "--out", str(data), "--image-size", "8",
                     "--per-class", "100", "--test-per-class", "1"]) == 0
        arch = ArchConfig(image_shape=(3, 8, 8), patch=4, width=8, depth=2, heads=2, embed_dim=32)
        save_checkpoint(Model(VisionEncoder.init(arch, 11)), tmp_path / "rand.ckpt")
        null = _json(tmp_path / "null.json", None)
        out = tmp_path / "report.json"
        assert main(["eval", "--checkpoint", str(tmp_path / "rand.ckpt"), "--data-dir", str(data / "pretrain"),
                     "--banks-dir", str(data / "banks"), "--attack", null, "--out", str(out)]) == 0
        rec = json.loads(out.read_text())["records"][0]
        assert rec["n"] == 1600 and rec["robust"] is None
        p = 1 / 16
        assert abs(rec["clean"] - p) <= 3 * math.sqrt(p * (1 - p) / 1600)


class TestFig6Consistency:
    def test_endpoints_match_standalone_eval(self, tmp_path, small):
        data = small / "data"
        arch = ArchConfig(image_shape=(3, 8, 8), patch=4, width=8, depth=2, heads=2, embed_dim=32)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(Model(VisionEncoder.init(arch, 1)), a)
        save_checkpoint(Model(VisionEncoder.init(arch, 2)), b)
        assert main(["experiment", "fig6", "--seeds", "5", "--a", str(a), "--b", str(b),
                     "--data-dir", str(data), "--eps", "8", "--out", str(tmp_path / "exp")]) == 0
        frontier = load_frontier_csv(tmp_path / "exp" / "seed_5" / "fig6" / "frontier.csv")
        assert [r["w"] for r in frontier] == [0.0, 0.25, 0.5, 0.75, 1.0]
        attack = _json(tmp_path / "atk.json", {"eps": 8 * PIXEL})
        for ckpt, row in ((a, frontier[0]), (b, frontier[-1])):
            out = tmp_path / f"{ckpt.stem}.json"
            assert main(["eval", "--checkpoint", str(ckpt), "--data-dir", str(data), "--banks-dir",
                         str(data / "banks"), "--attack", attack, "--seed", "5", "--out", str(out)]) == 0
            avg = json.loads(out.read_text())["average"]
            assert (row["clean"], row["robust"]) == (avg["clean"], avg["robust"])
        standalone = json.loads((tmp_path / "a.json").read_text())["records"]
        swept = json.loads((tmp_path / "exp" / "seed_5" / "fig6" / "w_0" / "report.json").read_text())["records"]
        assert swept == standalone

    def test_a_without_b(self, tmp_path, small):
        assert main(["experiment", "fig6", "--a", "x.ckpt", "--out", str(tmp_path)]) == 2
