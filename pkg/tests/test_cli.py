import json

import pytest
import yaml
from click.testing import CliRunner

from flavars.cli import load_run_config, main
from flavars.datapipe.grounding import API_KEY_ENV
from flavars.datapipe.records import load_dataset, write_dataset
from flavars.datapipe.synthetic import make_synthetic_records
from flavars.errors import ConfigurationError

TINY_MODEL = {
    "vision": {"image_size": 32, "patch_size": 8, "width": 16, "depth": 1, "heads": 2, "proj_dim": 8, "mlp_ratio": 2},
    "text": {"max_len": 10, "width": 16, "depth": 1, "heads": 2, "proj_dim": 8, "mlp_ratio": 2},
    "fusion": {"width": 16, "depth": 1, "heads": 2, "mlp_ratio": 2},
    "location": {"max_degree": 2, "hidden_width": 16, "hidden_depth": 1, "proj_dim": 8},
    "codebook_size": 8,
}


def write_config(path, dataset, **train):
    cfg = {
        "seed": 0,
        "dataset": str(dataset),
        "fractions": [0.5, 0.25, 0.25],
        "out": str(path.parent / "run"),
        "train": {"batch_size": 8, "steps": 4, "warmup_steps": 1, "checkpoint_every": 2, "max_vocab": 40,
                  "codebook_patches": 256, "model": TINY_MODEL, **train},
        "probe": {"epochs": 10},
        "knn": {"k": 3},
    }
    path.write_text(yaml.safe_dump(cfg))
    return path


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def trained(tmp_path_factory, synth_dir):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_config(root / "cfg.yaml", synth_dir)
    res = CliRunner().invoke(main, ["pretrain", "--config", str(cfg), "--out", str(root / "run")])
    assert res.exit_code == 0, res.output
    return root


def test_pretrain_writes_checkpoint_and_log(trained):
    run = trained / "run"
    assert (run / "checkpoints" / "step_000004" / "manifest.json").is_file()
    assert len((run / "loss_log.jsonl").read_text().splitlines()) == 4
    assert (run / "split.json").is_file()


def test_pretrain_refuses_overwrite(runner, trained):
    res = runner.invoke(main, ["pretrain", "--config", str(trained / "cfg.yaml"), "--out", str(trained / "run")])
    assert res.exit_code == 2 and "--force" in res.output


def test_pretrain_unknown_key(runner, tmp_path, synth_dir):
    cfg = write_config(tmp_path / "c.yaml", synth_dir, learning_rat=0.1)
    res = runner.invoke(main, ["pretrain", "--config", str(cfg)])
    assert res.exit_code == 2 and "train.learning_rat" in res.output


def test_pretrain_missing_dataset(runner, tmp_path):
    cfg = write_config(tmp_path / "c.yaml", tmp_path / "nowhere")
    res = runner.invoke(main, ["pretrain", "--config", str(cfg), "--out", str(tmp_path / "run")])
    assert res.exit_code == 2
    assert not (tmp_path / "run" / "loss_log.jsonl").exists()


def test_pretrain_divergence_exit_1(runner, tmp_path, synth_dir):
    cfg = write_config(tmp_path / "c.yaml", synth_dir, learning_rate=1e30, warmup_steps=0, steps=6)
    res = runner.invoke(main, ["pretrain", "--config", str(cfg), "--out", str(tmp_path / "run")])
    assert res.exit_code == 1, res.output
    assert "non-finite" in res.output


def test_pretrain_resume(runner, trained, tmp_path):
    res = runner.invoke(
        main,
        ["pretrain", "--config", str(trained / "cfg.yaml"), "--out", str(tmp_path / "r"),
         "--checkpoint", str(trained / "run" / "checkpoints" / "step_000004")],
    )
    assert res.exit_code == 0 and "trained 4 steps" in res.output


@pytest.mark.parametrize("protocol", ["knn", "zeroshot", "locknn"])
def test_eval_accuracy_protocols(runner, trained, tmp_path, synth_dir, protocol):
    ck = trained / "run" / "checkpoints" / "step_000004"
    out = tmp_path / f"{protocol}.json"
    res = runner.invoke(
        main,
        ["eval", protocol, str(synth_dir), "--checkpoint", str(ck), "--split", str(trained / "run" / "split.json"),
         "--config", str(trained / "cfg.yaml"), "--out", str(out)],
    )
    assert res.exit_code == 0, res.output
    report = json.loads(out.read_text())
    assert report["metric"] == "accuracy" and 0 <= report["value"] <= 1
    assert "step_000004" in res.output


def test_eval_seg_records_deviation(runner, trained, tmp_path, synth_dir):
    out = tmp_path / "seg.json"
    res = runner.invoke(
        main,
        ["eval", "seg", str(synth_dir), "--checkpoint", str(trained / "run" / "checkpoints" / "step_000004"),
         "--split", str(trained / "run" / "split.json"), "--config", str(trained / "cfg.yaml"), "--out", str(out)],
    )
    assert res.exit_code == 0, res.output
    assert "linear per-patch probe" in json.loads(out.read_text())["notes"]["deviation"]


def test_eval_report_is_reproducible(runner, trained, tmp_path, synth_dir):
    args = ["eval", "knn", str(synth_dir), "--checkpoint", str(trained / "run" / "checkpoints" / "step_000002"),
            "--split", str(trained / "run" / "split.json"), "--config", str(trained / "cfg.yaml")]
    assert runner.invoke(main, args + ["--out", str(tmp_path / "a.json")]).exit_code == 0
    assert runner.invoke(main, args + ["--out", str(tmp_path / "b.json")]).exit_code == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_eval_missing_checkpoint(runner, trained, synth_dir):
    res = runner.invoke(main, ["eval", "knn", str(synth_dir), "--checkpoint", "/no/such", "--split", str(trained / "run" / "split.json")])
    assert res.exit_code == 2


def test_eval_fingerprint_mismatch(runner, trained, tmp_path, synth_dir):
    cfg = yaml.safe_load((trained / "cfg.yaml").read_text())
    cfg["train"]["model"]["vision"]["patch_size"] = 16
    (tmp_path / "other.yaml").write_text(yaml.safe_dump(cfg))
    res = runner.invoke(
        main,
        ["eval", "knn", str(synth_dir), "--checkpoint", str(trained / "run" / "checkpoints" / "step_000004"),
         "--split", str(trained / "run" / "split.json"), "--config", str(tmp_path / "other.yaml"), "--out", str(tmp_path / "x.json")],
    )
    assert res.exit_code == 2 and "fingerprint" in res.output


def test_eval_unknown_protocol(runner, trained, synth_dir):
    res = runner.invoke(main, ["eval", "retrieval", str(synth_dir), "--checkpoint", str(trained), "--split", "x"])
    assert res.exit_code == 2


# ---------------------------------------------------------------- data


def test_splits_twice_identical(runner, synth_dir, tmp_path):
    for name in ("a.json", "b.json"):
        res = runner.invoke(main, ["data", "splits", str(synth_dir), "--seed", "7", "--fractions", "0.7,0.1,0.2", "--out", str(tmp_path / name)])
        assert res.exit_code == 0, res.output
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    # identical rewrite is allowed; a different one needs --force
    again = ["data", "splits", str(synth_dir), "--seed", "7", "--out", str(tmp_path / "a.json")]
    assert runner.invoke(main, again).exit_code == 0
    other = ["data", "splits", str(synth_dir), "--seed", "8", "--out", str(tmp_path / "a.json")]
    assert runner.invoke(main, other).exit_code == 2
    assert runner.invoke(main, other + ["--force"]).exit_code == 0


def test_splits_bad_fractions(runner, synth_dir, tmp_path):
    assert runner.invoke(main, ["data", "splits", str(synth_dir), "--fractions", "0.5,0.5,0.2", "--out", str(tmp_path / "s")]).exit_code == 2
    assert runner.invoke(main, ["data", "splits", str(synth_dir), "--fractions", "a,b", "--out", str(tmp_path / "s")]).exit_code == 2


def test_filter_ten_records(runner, tmp_path):
    write_dataset(tmp_path / "ten", make_synthetic_records(10, seed=2))
    res = runner.invoke(main, ["data", "filter", str(tmp_path / "ten"), "--fraction", "0.3", "--out", str(tmp_path / "top")])
    assert res.exit_code == 0, res.output
    kept = load_dataset(tmp_path / "top")
    assert len(kept) == 3
    scores = sorted((r.score for r in load_dataset(tmp_path / "ten")), reverse=True)
    assert sorted((r.score for r in kept), reverse=True) == scores[:3]


def test_vocab_command(runner, synth_dir, tmp_path):
    res = runner.invoke(main, ["data", "vocab", str(synth_dir), "--out", str(tmp_path / "v.json"), "--max-size", "30"])
    assert res.exit_code == 0
    assert len(json.loads((tmp_path / "v.json").read_text())["tokens"]) == 30


def test_ground_without_credentials(runner, synth_dir, tmp_path, monkeypatch):
    monkeypatch.delenv(API_KEY_ENV, raising=False)
    res = runner.invoke(main, ["data", "ground", str(synth_dir), "--out", str(tmp_path / "g")])
    assert res.exit_code == 2 and API_KEY_ENV in res.output
    assert not (tmp_path / "g").exists()


def test_ground_with_mock_is_idempotent(runner, tmp_path):
    write_dataset(tmp_path / "ds", make_synthetic_records(4, seed=2))
    out = tmp_path / "g"
    res = runner.invoke(main, ["data", "ground", str(tmp_path / "ds"), "--out", str(out), "--mock-vlm"])
    assert res.exit_code == 0, res.output
    assert "ok=4" in res.output and "service calls 4" in res.output
    assert all(r.grounded is not None for r in load_dataset(out))
    res = runner.invoke(main, ["data", "ground", str(tmp_path / "ds"), "--out", str(out), "--mock-vlm", "--force"])
    assert res.exit_code == 0 and "service calls 0" in res.output


def test_synth_command(runner, tmp_path):
    res = runner.invoke(main, ["data", "synth", str(tmp_path / "s"), "--n", "6", "--seed", "1"])
    assert res.exit_code == 0 and len(load_dataset(tmp_path / "s")) == 6
    assert runner.invoke(main, ["data", "synth", str(tmp_path / "s"), "--n", "6"]).exit_code == 2


def test_seed_flag_overrides_config(tmp_path, synth_dir):
    cfg = write_config(tmp_path / "c.yaml", synth_dir)
    run = load_run_config(cfg, seed=9)
    assert run.seed == run.train.seed == run.probe.seed == 9


def test_config_type_errors(tmp_path, synth_dir):
    cfg = write_config(tmp_path / "c.yaml", synth_dir, batch_size=1)
    with pytest.raises(ConfigurationError):
        load_run_config(cfg)


def test_shipped_config_loads():
    from pathlib import Path

    run = load_run_config(Path(__file__).parent.parent / "configs" / "synthetic.yaml")
    assert run.train.steps == 1500 and run.train.weights.w_contrastive_tl == 0.0
