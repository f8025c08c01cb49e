import json
from pathlib import Path

import pytest

from nextx.cli import cli_main
from nextx.serialization import load_container

TINY_CONFIG = """
[run]
seed = 1
[data]
size = 32
num_classes = 2
[denoiser]
width = 16
depth = 1
heads = 2
[train]
epochs = 2
warmup_epochs = 1
batch_size = 16
[sample]
steps = 2
mode = ode
[eval]
holdout_size = 32
sample_count = 8
projections = 16
chunk = 8
"""


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "toy.cfg"
    path.write_text(TINY_CONFIG)
    return path


def _train(config_file, tmp_path) -> Path:
    out = tmp_path / "trainrun"
    assert cli_main(["train", "--config", str(config_file), "--out", str(out)]) == 0
    return out / "checkpoint.nxc"


class TestCli:
    def test_unknown_flag_is_usage_error_status_2(self):
        assert cli_main(["train", "--configg", "x"]) == 2

    def test_unknown_command_status_2(self):
        assert cli_main(["frobnicate"]) == 2

    def test_train_writes_checkpoint_metrics_provenance(self, config_file, tmp_path):
        ckpt = _train(config_file, tmp_path)
        out = ckpt.parent
        assert ckpt.exists()
        assert (out / "metrics.jsonl").exists()
        prov = json.loads((out / "provenance.json").read_text())
        assert "config_hash" in prov and "config_text" in prov

    def test_sample_writes_tensor_dump_and_raster(self, config_file, tmp_path):
        ckpt = _train(config_file, tmp_path)
        out = tmp_path / "samples"
        status = cli_main([
            "sample", "--checkpoint", str(ckpt), "--count", "4", "--steps", "2",
            "--mode", "ode", "--seed", "3", "--out", str(out),
        ])
        assert status == 0
        assert (out / "samples.png").exists()
        meta, tensors = load_container(out / "samples.nxc")
        assert tensors["latents"].shape == (4, 4, 4, 2)
        assert meta["seed"] == 3

    def test_sample_deterministic_across_runs(self, config_file, tmp_path):
        ckpt = _train(config_file, tmp_path)
        outs = []
        for name in ("s1", "s2"):
            out = tmp_path / name
            assert cli_main([
                "sample", "--checkpoint", str(ckpt), "--count", "2", "--steps", "2",
                "--mode", "ode", "--seed", "7", "--out", str(out),
            ]) == 0
            outs.append((out / "samples.nxc").read_bytes())
        assert outs[0] == outs[1]

    def test_eval_writes_metrics(self, config_file, tmp_path):
        ckpt = _train(config_file, tmp_path)
        out = tmp_path / "evalrun"
        status = cli_main(["eval", "--checkpoint", str(ckpt), "--out", str(out)])
        assert status == 0
        metrics = json.loads((out / "metrics.json").read_text())
        assert metrics["sliced_w2"] >= 0
        assert set(metrics["per_class"]) == {"0", "1"}

    def test_ablate_singleton_sweep(self, config_file, tmp_path):
        out = tmp_path / "sweep"
        status = cli_main([
            "ablate", "--config", str(config_file), "--axis", "steps",
            "--values", "2", "--seeds", "1", "--out", str(out),
        ])
        assert status == 0
        table = (out / "table.txt").read_text()
        assert len(table.strip().splitlines()) == 2  # header + one row
        rows = [json.loads(line) for line in (out / "runs.jsonl").read_text().splitlines()]
        assert len(rows) == 1 and rows[0]["axis"] == "steps"

    def test_ablate_time_policy_four_rows(self, config_file, tmp_path):
        out = tmp_path / "policysweep"
        status = cli_main([
            "ablate", "--config", str(config_file), "--axis", "time_policy",
            "--seeds", "1", "--out", str(out),
        ])
        assert status == 0
        table = (out / "table.txt").read_text()
        assert len(table.strip().splitlines()) == 5  # header + four policies
        for policy in ("clean", "increasing", "decreasing", "random"):
            assert policy in table

    def test_selftest_passes_on_fresh_checkout(self):
        assert cli_main(["selftest"]) == 0
