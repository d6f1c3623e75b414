import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest

from tokenar.cli import main
from tokenar.config import ConfigError, RunConfig
from tokenar.model import init_params, read_checkpoint

SMALL = [
    "--set", "model.d_model=16", "--set", "model.n_layers=1", "--set", "model.n_heads=2",
    "--set", "model.distill_dim=8", "--set", "layout.M=2", "--set", "training.steps=3",
    "--set", "training.batch_size=2", "--set", "training.lr=0.01",
]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert main(["gen-data", "--out", str(out), "--set", "datagen.count=12", "--set", "datagen.delta=0"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(dataset, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["train", "--data", str(dataset), "--out", str(out), *SMALL]) == 0
    return out


def test_gen_data_stats(dataset):
    stats = json.loads((dataset / "stats.json").read_text())
    assert stats["generated"] == stats["kept"] == 12
    assert sum(stats["relation_histogram"].values()) == 12
    assert len(list((dataset / "images").glob("*_target.ppm"))) == 12


def test_gen_data_impossible_threshold(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--set", "datagen.count=10",
                 "--set", "datagen.delta=1.01"]) == 0
    assert json.loads((tmp_path / "stats.json").read_text())["kept"] == 0


def test_missing_dataset_exit_code(tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 2
    assert "nope" in capsys.readouterr().err


def test_config_errors_exit_two(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--set", "datagen.colour=1"]) == 2
    assert main(["gen-data", "--out", str(tmp_path), "--set", "datagen.count"]) == 2
    assert main(["gen-data", "--out", str(tmp_path), "--set", "datagen.count=\"x\""]) == 2
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"extras": {}}))
    assert main(["gen-data", "--out", str(tmp_path), "--config", str(bad)]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_threads_env(tmp_path, monkeypatch):
    monkeypatch.setenv("TOKENAR_THREADS", "zero")
    assert main(["gen-data", "--out", str(tmp_path), "--set", "datagen.count=1"]) == 2
    monkeypatch.setenv("TOKENAR_THREADS", "1")
    assert main(["gen-data", "--out", str(tmp_path), "--set", "datagen.count=1"]) == 0


def test_config_round_trip():
    cfg = RunConfig.load(None, ["training.lr=0.001", "layout.itd=false", "generate.top_k=5"])
    again = RunConfig.from_dict(cfg.to_dict())
    assert again == cfg and again.training.lr == 0.001 and not again.layout.itd
    with pytest.raises(ConfigError):
        RunConfig.load(None, ["layout.itd=1"])


def test_train_outputs(trained):
    for name in ("final.tkar", "train_log.csv", "metrics.json", "config.json", "loss.png"):
        assert (trained / name).exists(), name
    with open(trained / "train_log.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3


def test_zero_steps_checkpoint_is_init(dataset, tmp_path):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), *SMALL, "--set", "training.steps=0"]) == 0
    cfg = RunConfig.load(None, [s for s in SMALL if s != "--set"])
    init = init_params(cfg.model_config(), 0)
    saved = read_checkpoint(tmp_path / "final.tkar")
    for name, p in init.named_parameters():
        assert np.array_equal(saved[name], p.detach().numpy())


def test_train_rerun_is_bit_identical(dataset, tmp_path, trained):
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path), "--threads", "1", *SMALL]) == 0
    assert (tmp_path / "final.tkar").read_bytes() == (trained / "final.tkar").read_bytes()


def test_generate_and_eval(dataset, trained, tmp_path):
    ckpt = str(trained / "final.tkar")
    gen = tmp_path / "gen"
    assert main(["generate", "--data", str(dataset), "--checkpoint", ckpt, "--out", str(gen),
                 "--limit", "3", *SMALL]) == 0
    spans = json.loads((gen / "spans.json").read_text())
    assert len(spans) == 3 and len(spans[0]["span"]) == 192
    assert main(["eval", "--data", str(dataset), "--predictions", str(gen), "--limit", "3",
                 "--out", str(tmp_path / "ev_pred"), *SMALL]) == 0
    ev = tmp_path / "ev"
    assert main(["eval", "--data", str(dataset), "--checkpoint", ckpt, "--out", str(ev), "--limit", "3", *SMALL]) == 0
    rep = json.loads((ev / "eval.json").read_text())
    assert rep["sample_count"] == 3 and len(rep["focus_entropy"]) == 1
    assert (ev / "focus_entropy.png").exists() and (ev / "prompt_divergence.png").exists()


def test_eval_on_ground_truth_is_perfect(dataset, tmp_path):
    preds = tmp_path / "truth"
    preds.mkdir()
    for i in range(4):
        shutil.copy(dataset / "images" / f"{i:06d}_target.ppm", preds / f"{i:06d}_pred.ppm")
    assert main(["eval", "--data", str(dataset), "--predictions", str(preds), "--limit", "4",
                 "--out", str(tmp_path / "ev")]) == 0
    rep = json.loads((tmp_path / "ev" / "eval.json").read_text())
    assert rep["token_accuracy"] == 1.0 and rep["identity_confusion"] == 0.0
    assert rep["psnr_full"] == 99.0


def test_checkpoint_mismatch_exit_code(dataset, trained, tmp_path, capsys):
    code = main(["eval", "--data", str(dataset), "--checkpoint", str(trained / "final.tkar"),
                 "--out", str(tmp_path), *SMALL, "--set", "model.d_model=32"])
    assert code == 2
    err = capsys.readouterr().err
    assert "final.tkar" in err and "d_model=32" in err


def test_inspect_attn(dataset, trained, tmp_path):
    assert main(["inspect-attn", "--data", str(dataset), "--checkpoint", str(trained / "final.tkar"),
                 "--out", str(tmp_path), "--limit", "2", *SMALL]) == 0
    sums = {}
    with open(tmp_path / "attn_trace.csv") as fh:
        for row in csv.DictReader(fh):
            key = (row["sample"], row["layer"], row["head"], row["query"], row["span"])
            sums[key] = sums.get(key, 0.0) + float(row["weight"])
    assert sums and all(abs(v - 1) <= 1e-5 for v in sums.values())
    with open(tmp_path / "attn_summary.csv") as fh:
        summary = list(csv.DictReader(fh))
    assert [r["layer"] for r in summary] == ["0"]
    assert (tmp_path / "focus_entropy.png").exists() and (tmp_path / "prompt_divergence.png").exists()


def test_ablate_emits_requested_variants(dataset, tmp_path):
    assert main(["ablate", "--data", str(dataset), "--out", str(tmp_path), *SMALL,
                 "--set", "training.steps=2", "--set", 'ablation.variants=["full", "baseline"]',
                 "--set", "ablation.seeds=[0]", "--set", "ablation.train_count=4",
                 "--set", "ablation.eval_count=2"]) == 0
    with open(tmp_path / "ablation_summary.csv") as fh:
        assert [r["variant"] for r in csv.DictReader(fh)] == ["full", "baseline"]
    assert (tmp_path / "ablation.png").exists()
    assert main(["ablate", "--data", str(dataset), "--out", str(tmp_path), *SMALL,
                 "--set", 'ablation.variants=["other"]']) == 2
