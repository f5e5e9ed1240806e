import csv
import json
import subprocess
import sys

import pytest

from mhimil.cli import DEFAULT_CONFIG, load_run_config, main
from mhimil.dataio import Bag, load_dataset, save_checkpoint, save_dataset
from mhimil.errors import ConfigError
from mhimil.milmodel import ModelConfig, init_params, predict

TINY = [
    "--set", "model.proj_dim=4",
    "--set", "model.lstm_hidden=3",
    "--set", "model.attn_dim=3",
    "--set", "train.epochs=2",
    "--set", "train.peak_lr=0.01",
    "--set", "train.batch_size=4",
]  # fmt: skip


def gen(tmp_path, n_bags=12, name="data.jsonl"):
    path = tmp_path / name
    argv = ["gen", "--out", str(path), "--seed", "3",
            "--set", f"synth.n_bags={n_bags}", "--set", "synth.bag_size_range=[3,6]",
            "--set", "synth.response_dim=4", "--set", "synth.prefix_dim=2"]  # fmt: skip
    assert main(argv) == 0
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def snapshot(directory):
    return {p.relative_to(directory).as_posix(): p.read_bytes() for p in sorted(directory.rglob("*")) if p.is_file()}


class TestConfig:
    def test_defaults_round_trip(self):
        assert load_run_config(env={}) == DEFAULT_CONFIG

    def test_precedence(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"seed": 5, "train": {"epochs": 7}}))
        assert load_run_config(path, env={})["seed"] == 5
        assert load_run_config(path, env={"MHIMIL_SEED": "9"})["seed"] == 9
        cfg = load_run_config(path, ["seed=11", "train.epochs=3"], env={"MHIMIL_SEED": "9"})
        assert cfg["seed"] == 11 and cfg["train"]["epochs"] == 3

    @pytest.mark.parametrize(
        "overrides",
        [["bogus=1"], ["train.nope=1"], ["mhim.t=-1"], ["k_list=[0]"], ["cv.fold=9"], ["criteria=[\"x\"]"]],
    )
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            load_run_config(None, overrides, env={})

    def test_print_config(self, capsys):
        assert main(["print-config"]) == 0
        assert json.loads(capsys.readouterr().out) == DEFAULT_CONFIG

    def test_bad_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("MHIMIL_JOBS", "many")
        assert main(["gen", "--out", str(tmp_path / "x.jsonl")]) == 1


def test_help_documents_flags():
    out = subprocess.run(
        [sys.executable, "-m", "mhimil.cli", "sensitivity", "--help"], capture_output=True, text=True, check=True
    ).stdout
    for flag in ("--checkpoint", "--data", "--criteria", "--k-list", "--baseline", "--mhim", "--seed", "--set"):
        assert flag in out


class TestCommands:
    def test_gen_deterministic(self, tmp_path):
        a = gen(tmp_path, name="a.jsonl")
        b = gen(tmp_path, name="b.jsonl")
        assert a.read_bytes() == b.read_bytes()
        assert len(load_dataset(a)) == 12

    def test_train_and_mhim_outputs(self, tmp_path):
        data = gen(tmp_path)
        assert main(["train", "--data", str(data), "--out", str(tmp_path / "p1")] + TINY) == 0
        files = set(snapshot(tmp_path / "p1"))
        assert {"checkpoint.json", "loss.csv", "manifest.json", "summary.json"} <= files
        rows = read_csv(tmp_path / "p1" / "loss.csv")
        assert len(rows) == 1 + 3 * 2
        donor = tmp_path / "p1" / "checkpoint.json"
        argv = ["train-mhim", "--data", str(data), "--donor", str(donor), "--out", str(tmp_path / "p2")]
        assert main(argv + TINY) == 0
        masks = read_csv(tmp_path / "p2" / "masks.csv")
        assert masks[0] == ["bag_id", "epoch", "masked_index", "pool"] and len(masks) > 1

    def test_eval_on_teacher_targets(self, tmp_path):
        cfg = ModelConfig(response_dim=4, prefix_dim=2, proj_dim=4, lstm_hidden=3, attn_dim=3, seed=4)
        params = init_params(cfg)
        bags = load_dataset(gen(tmp_path))
        preds, _ = predict(params, bags)
        teacher = [Bag(b.id, b.response, float(p), prefix=b.prefix, isl=b.isl) for b, p in zip(bags, preds)]
        save_dataset(teacher, tmp_path / "teacher.jsonl")
        save_checkpoint(params, tmp_path / "ckpt.json")
        argv = ["eval", "--checkpoint", str(tmp_path / "ckpt.json"), "--data", str(tmp_path / "teacher.jsonl"),
                "--out", str(tmp_path / "ev")]  # fmt: skip
        assert main(argv) == 0
        report = json.loads((tmp_path / "ev" / "report.json").read_text())
        assert abs(report["rmse"]) <= 1e-6

    def test_explain(self, tmp_path):
        data = gen(tmp_path)
        save_checkpoint(init_params(ModelConfig(4, 2, 4, 3, 3)), tmp_path / "c.json")
        argv = ["explain", "--checkpoint", str(tmp_path / "c.json"), "--data", str(data),
                "--k-list", "50,100", "--out", str(tmp_path / "ex")]  # fmt: skip
        assert main(argv) == 0
        recall = read_csv(tmp_path / "ex" / "recall.csv")
        assert recall[0] == ["k_percent", "recall"]
        assert [r[0] for r in recall[1:]] == ["50", "100"] and recall[2][1] == "1.0"
        attention = read_csv(tmp_path / "ex" / "attention.csv")
        assert len(attention) - 1 == sum(len(b) for b in load_dataset(data))

    def test_sensitivity_rows(self, tmp_path):
        data = gen(tmp_path)
        save_checkpoint(init_params(ModelConfig(4, 2, 4, 3, 3)), tmp_path / "c.json")
        save_checkpoint(init_params(ModelConfig(4, 2, 4, 3, 3, seed=1)), tmp_path / "d.json")
        argv = ["sensitivity", "--checkpoint", str(tmp_path / "c.json"), "--baseline", str(tmp_path / "d.json"),
                "--data", str(data), "--k-list", "10,20,50,80,90", "--out", str(tmp_path / "s")]  # fmt: skip
        assert main(argv) == 0
        rows = read_csv(tmp_path / "s" / "sensitivity.csv")[1:]
        for crit in ("baseline-attention", "mhim-attention", "random"):
            assert sum(r[0] == crit for r in rows) == 5

    def test_sensitivity_needs_baseline(self, tmp_path):
        data = gen(tmp_path)
        save_checkpoint(init_params(ModelConfig(4, 2, 4, 3, 3)), tmp_path / "c.json")
        argv = ["sensitivity", "--checkpoint", str(tmp_path / "c.json"), "--data", str(data),
                "--out", str(tmp_path / "s")]  # fmt: skip
        assert main(argv) == 1
        argv += ["--criteria", "random,mhim-attention"]
        assert main(argv) == 0

    def test_cv_ten_bags(self, tmp_path):
        data = gen(tmp_path, n_bags=10)
        argv = ["cv", "--data", str(data), "--out", str(tmp_path / "cv"),
                "--set", "cv.t_grid=[0,1]", "--set", "cv.b_grid=[0]", "--set", "train.epochs=1"]  # fmt: skip
        assert main(argv + TINY) == 0
        summary = json.loads((tmp_path / "cv" / "summary.json").read_text())
        assert len(summary["folds"]) == 5
        for f in summary["folds"]:
            sizes = tuple(len(f["fold"][k]) for k in ("train_ids", "val_ids", "test_ids"))
            assert sizes == (6, 2, 2)
        table = read_csv(tmp_path / "cv" / "table.csv")
        assert table[0][-1] == "std_convention" and [r[0] for r in table[1:]] == ["baseline", "baseline w/ MHIM"]


class TestExitCodes:
    def test_missing_data_file(self, tmp_path):
        assert main(["train", "--data", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "o")]) == 4

    def test_bad_data(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text("{oops\n")
        assert main(["train", "--data", str(path), "--out", str(tmp_path / "o")]) == 2

    def test_bad_config(self, tmp_path):
        data = gen(tmp_path)
        assert main(["train", "--data", str(data), "--out", str(tmp_path / "o"), "--set", "train.epochs=-1"]) == 1

    def test_divergence(self, tmp_path):
        data = gen(tmp_path)
        argv = ["train", "--data", str(data), "--out", str(tmp_path / "o"),
                "--set", "train.peak_lr=1e200", "--set", "train.floor_lr=1e200"]  # fmt: skip
        with pytest.warns(RuntimeWarning):
            assert main(argv + TINY[:6]) == 3

    def test_dimension_mismatch(self, tmp_path):
        data = gen(tmp_path)
        save_checkpoint(init_params(ModelConfig(7, 0, 4, 3, 3)), tmp_path / "c.json")
        argv = ["eval", "--checkpoint", str(tmp_path / "c.json"), "--data", str(data), "--out", str(tmp_path / "e")]
        assert main(argv) == 2


def test_byte_identical_reruns(tmp_path):
    data = gen(tmp_path)
    for run in ("a", "b"):
        out = tmp_path / run
        assert main(["train", "--data", str(data), "--out", str(out / "p1")] + TINY) == 0
        donor = str(out / "p1" / "checkpoint.json")
        assert main(["train-mhim", "--data", str(data), "--donor", donor, "--out", str(out / "p2")] + TINY) == 0
        ckpt = str(out / "p2" / "checkpoint.json")
        assert main(["eval", "--checkpoint", ckpt, "--data", str(data), "--out", str(out / "ev")]) == 0
        assert main(["explain", "--checkpoint", ckpt, "--data", str(data), "--out", str(out / "ex")]) == 0
        argv = ["sensitivity", "--checkpoint", ckpt, "--baseline", donor, "--data", str(data), "--out", str(out / "s")]
        assert main(argv) == 0
    a, b = snapshot(tmp_path / "a"), snapshot(tmp_path / "b")
    assert a.keys() == b.keys() and len(a) > 10
    assert a == b
