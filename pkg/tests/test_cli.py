import json

import pytest

from stctr.cli import main

GEN = ["--n-requests", "120", "--n-users", "30", "--n-items", "20", "--n-categories", "3",
       "--n-brands", "2", "--n-cities", "2", "--embedding-dim", "2", "--max-behaviors", "3",
       "--impressions-per-request", "4"]
TRAIN = ["--tower-widths", "[4]", "--ststl-rank", "2", "--batch-size", "32",
         "--warmup-steps", "2", "--total-steps", "4"]


@pytest.fixture(scope="module")
def gen_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert main(["generate", "--out", str(out)] + GEN) == 0
    return out


def test_generate_outputs(gen_dir):
    names = {p.name for p in gen_dir.iterdir()}
    assert {"dataset.jsonl", "truth.json", "stats.csv", "vocab.json", "manifest.json"} <= names
    manifest = json.loads((gen_dir / "manifest.json").read_text())
    assert manifest["configs"]["generate"]["n_requests"] == 120
    assert set(manifest["outputs"]) == {"dataset.jsonl", "truth.json", "stats.csv", "vocab.json"}


def test_train_evaluate_heatmap(gen_dir, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["train", "--data", str(gen_dir), "--out", str(run)] + TRAIN) == 0
    report = json.loads((run / "report.json").read_text())
    assert set(report) >= {"auc", "tauc", "cauc", "ndcg3", "ndcg10", "logloss"}
    ev = tmp_path / "ev"
    assert main(["evaluate", "--predictions", str(run / "predictions.csv"), "--out", str(ev)]) == 0
    from_preds = json.loads((ev / "report.json").read_text())
    assert "header" not in from_preds and "semantic_transform" in report["header"]["model"]
    assert from_preds == {k: v for k, v in report.items() if k != "header"}
    ev2 = tmp_path / "ev2"
    assert main(["evaluate", "--checkpoint", str(run / "checkpoint.bin"), "--data", str(gen_dir),
                 "--out", str(ev2)]) == 0
    assert (ev2 / "report.json").read_bytes() == (run / "report.json").read_bytes()
    heat = tmp_path / "heat.csv"
    assert main(["export-heatmap", "--checkpoint", str(run / "checkpoint.bin"),
                 "--data", str(gen_dir), "--out", str(heat)]) == 0
    assert heat.read_text().startswith("context_key,field_name,mean_alpha,count")


def test_config_file_with_flag_override(gen_dir, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("model:\n  tower_widths: [4]\n  ststl_rank: 2\n"
                   "train:\n  batch_size: 32\n  warmup_steps: 1\n  total_steps: 2\n"
                   "experiment:\n  variant: static\n")
    run = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--data", str(gen_dir), "--out", str(run),
                 "--total-steps", "3"]) == 0
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["configs"]["train"]["total_steps"] == 3
    assert manifest["configs"]["model"]["use_stael"] is False


@pytest.mark.parametrize("argv,code", [
    (["train", "--out", "{tmp}/r", "--data", "{gen}", "--warmup-steps", "9",
      "--total-steps", "3"], 2),
    (["train", "--out", "{tmp}/r", "--data", "{tmp}/none.jsonl"], 5),
    (["evaluate", "--out", "{tmp}/e"], 2),
    (["evaluate", "--out", "{tmp}/e", "--predictions", "{tmp}/bad.csv"], 3),
    (["train", "--out", "{tmp}/r", "--data", "{gen}", "--config", "{tmp}/bad.yaml"], 2),
])
def test_exit_codes(gen_dir, tmp_path, argv, code, capsys):
    (tmp_path / "bad.csv").write_text("request_id,score\n1,0.5\n")
    (tmp_path / "bad.yaml").write_text("optimiser: {}\n")
    argv = [a.format(tmp=tmp_path, gen=gen_dir) for a in argv]
    assert main(argv) == code
    assert "error" in capsys.readouterr().err


def test_heatmap_on_ablated_checkpoint_fails(gen_dir, tmp_path):
    run = tmp_path / "run"
    assert main(["train", "--data", str(gen_dir), "--out", str(run), "--variant", "no_stael"]
                + TRAIN) == 0
    assert main(["export-heatmap", "--checkpoint", str(run / "checkpoint.bin"),
                 "--data", str(gen_dir), "--out", str(tmp_path / "h.csv")]) == 2


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--batch-size", "4", "--rank", "2"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["passed"] and out["max_rel_error"] < 1e-4


def test_ablate_command(gen_dir, tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", "--data", str(gen_dir), "--out", str(out), "--repeats", "1",
                 "--variants", "full,static"] + TRAIN) == 0
    lines = (out / "ablation.csv").read_text().splitlines()
    assert lines[0] == "variant,AUC,TAUC,CAUC,Logloss,repeats" and len(lines) == 3
