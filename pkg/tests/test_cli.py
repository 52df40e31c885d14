import hashlib
import json
import subprocess
import sys
from pathlib import Path

import pytest

from dasid import cli, experiments
from dasid.trainer import TrainingDivergedError

DATA = Path(__file__).parent / "data"


def sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def run(argv, capsys):
    code = cli.run([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """gen-data and train once on the tiny configs."""
    root = tmp_path_factory.mktemp("pipe")
    assert cli.run(["gen-data", "--config", str(DATA / "tiny_synth.json"), "--out", str(root / "world")]) == 0
    assert cli.run(["train", "--config", str(DATA / "tiny_train.json"), "--data", str(root / "world"),
                    "--out", str(root / "m.ckpt")]) == 0
    return root


def test_unknown_flag_is_usage_error(capsys):
    code, _, err = run(["train", "--config", "c.json", "--data", "d", "--out", "o", "--bogus-flag"], capsys)
    assert code == 1
    assert "--bogus-flag" in err
    assert len(err.strip().splitlines()) == 1 and err.startswith("dasid: usage:")


def test_missing_subcommand_is_usage_error(capsys):
    assert run([], capsys)[0] == 1


def test_invalid_side_is_usage_error(capsys):
    code, _, err = run(["infer-sid", "--ckpt", "x", "--side", "item", "--in", "a", "--out", "b"], capsys)
    assert code == 1 and "item" in err


def test_unknown_config_key_is_validation_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text('{"n_users": 10, "bogus": 1}')
    code, _, err = run(["gen-data", "--config", cfg, "--out", tmp_path / "w"], capsys)
    assert code == 2 and "bogus" in err
    assert err.startswith("dasid: validation:")


def test_malformed_json_is_validation_error(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text("{")
    assert run(["gen-data", "--config", cfg, "--out", tmp_path / "w"], capsys)[0] == 2


def test_missing_dataset_is_validation_error(tmp_path, capsys):
    code, _, err = run(["train", "--config", DATA / "tiny_train.json", "--data", tmp_path / "nope",
                        "--out", tmp_path / "m.ckpt"], capsys)
    assert code == 2 and "nope" in err


def test_corrupt_checkpoint_is_validation_error(tmp_path, capsys):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    code, _, err = run(["infer-sid", "--ckpt", bad, "--side", "user", "--in", DATA / "tiny_users.dase",
                        "--out", tmp_path / "s.tsv"], capsys)
    assert code == 2 and "not a checkpoint" in err


def test_divergence_is_runtime_error(tmp_path, capsys, monkeypatch, pipeline):
    def diverge(*args, **kwargs):
        raise TrainingDivergedError("non-finite loss terms: ['cf']", {"cf": float("nan")})

    monkeypatch.setattr(cli, "fit", diverge)
    code, _, err = run(["train", "--config", DATA / "tiny_train.json", "--data", pipeline / "world",
                        "--out", tmp_path / "m.ckpt"], capsys)
    assert code == 3 and err.strip() == "dasid: runtime: non-finite loss terms: ['cf']"


def test_infer_sid_reproduces_golden_file(tmp_path, capsys):
    out = tmp_path / "sid.tsv"
    code, _, _ = run(["infer-sid", "--ckpt", DATA / "tiny.ckpt", "--side", "user", "--in", DATA / "tiny_users.dase",
                      "--out", out], capsys)
    assert code == 0
    assert out.read_bytes() == (DATA / "tiny_users.sid.tsv").read_bytes()


def test_infer_sid_rejects_wrong_dimension(tmp_path, capsys):
    code, _, err = run(["infer-sid", "--ckpt", DATA / "tiny.ckpt", "--side", "ad", "--in", DATA / "tiny_users.dase",
                        "--out", tmp_path / "s.tsv"], capsys)
    assert code == 2 and "dim" in err


def test_gen_data_writes_layout_and_manifest(pipeline):
    world = pipeline / "world"
    for name in ("users.dase", "ads.dase", "interactions.jsonl", "ground_truth.json", "manifest.json"):
        assert (world / name).exists(), name
    manifest = json.loads((world / "manifest.json").read_text())
    assert manifest["stage"] == "gen-data" and manifest["seed"] == 3
    assert manifest["config"]["n_users"] == 60
    assert 0.05 <= manifest["metrics"]["click_rate"] <= 0.2


def test_seed_flag_overrides_config(tmp_path, capsys):
    run(["gen-data", "--config", DATA / "tiny_synth.json", "--out", tmp_path / "w", "--seed", "11"], capsys)
    assert json.loads((tmp_path / "w" / "manifest.json").read_text())["config"]["seed"] == 11


def test_every_stage_is_rerun_stable(pipeline, tmp_path, capsys):
    again = tmp_path / "again"
    run(["gen-data", "--config", DATA / "tiny_synth.json", "--out", again / "world"], capsys)
    run(["train", "--config", DATA / "tiny_train.json", "--data", again / "world", "--out", again / "m.ckpt"], capsys)
    for name in ("users.dase", "ads.dase", "interactions.jsonl", "ground_truth.json"):
        assert sha(again / "world" / name) == sha(pipeline / "world" / name), name
    assert sha(again / "m.ckpt") == sha(pipeline / "m.ckpt")
    assert sha(again / "m.ckpt.trace.jsonl") == sha(pipeline / "m.ckpt.trace.jsonl")

    for root in (pipeline, again):
        assert run(["infer-sid", "--ckpt", root / "m.ckpt", "--side", "ad", "--in", pipeline / "world" / "ads.dase",
                    "--out", root / "ads.sid.tsv"], capsys)[0] == 0
        assert run(["featurize", "--ckpt", root / "m.ckpt", "--data", pipeline / "world",
                    "--out", root / "ex.jsonl"], capsys)[0] == 0
        assert run(["eval", "--ckpt", root / "m.ckpt", "--data", pipeline / "world", "--report", root / "r.json",
                    "--k", "10"], capsys)[0] == 0
    for name in ("ads.sid.tsv", "ex.jsonl", "r.json"):
        assert sha(again / name) == sha(pipeline / name), name


def test_featurize_output_matches_toggles(pipeline, tmp_path, capsys):
    out = tmp_path / "ex.jsonl"
    code, _, _ = run(["featurize", "--ckpt", pipeline / "m.ckpt", "--data", pipeline / "world", "--out", out,
                      "--features", "id+prefix", "--split", "test"], capsys)
    assert code == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 300
    first = json.loads(lines[0])
    assert first["dense"] == []
    assert first["sparse"][0].startswith("uid=") and any(s.startswith("ad_l3=") for s in first["sparse"])
    assert not any(s.startswith("hist_") or s.startswith("cnt_") for s in first["sparse"])


def test_featurize_rejects_unknown_family(pipeline, tmp_path, capsys):
    code, _, err = run(["featurize", "--ckpt", pipeline / "m.ckpt", "--data", pipeline / "world",
                        "--out", tmp_path / "x.jsonl", "--features", "id+magic"], capsys)
    assert code == 2 and "magic" in err


def test_eval_report_contents(pipeline, tmp_path, capsys):
    report = tmp_path / "r.json"
    code, out, _ = run(["eval", "--ckpt", pipeline / "m.ckpt", "--data", pipeline / "world", "--report", report,
                        "--k", "10"], capsys)
    assert code == 0
    rep = json.loads(report.read_text())
    assert set(rep["retrieval"]) == {"cu_int_zi", "zu_ci_pro"}
    assert len(rep["codebooks"]["user"]) == 3
    assert 0.0 <= rep["probe_auc"] <= 1.0 and 0.0 <= rep["probe_auc_id_only"] <= 1.0
    assert "auc_cu_int_zi" in out
    assert (tmp_path / "r.json.manifest.json").exists()


def test_eval_rejects_mismatched_dataset(pipeline, tmp_path, capsys):
    cfg = json.loads((DATA / "tiny_synth.json").read_text())
    cfg["n_users"] = 61
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    run(["gen-data", "--config", tmp_path / "c.json", "--out", tmp_path / "w"], capsys)
    code, _, err = run(["eval", "--ckpt", pipeline / "m.ckpt", "--data", tmp_path / "w",
                        "--report", tmp_path / "r.json"], capsys)
    assert code == 2 and "entity ids" in err


def test_ablate_lists_seven_variants(tmp_path, capsys):
    grid = {
        "synth": json.loads((DATA / "tiny_synth.json").read_text()),
        "train": {**json.loads((DATA / "tiny_train.json").read_text()), "epochs": 1},
        "seeds": [0],
        "eval": {"k": 10},
        "probe": {"epochs": 1},
    }
    (tmp_path / "g.json").write_text(json.dumps(grid))
    code, out, _ = run(["ablate", "--grid", tmp_path / "g.json", "--out", tmp_path / "abl"], capsys)
    assert code == 0
    rows = [line.split()[0] for line in out.splitlines()[1:] if line.split() and line.split()[0] in experiments.VARIANTS]
    assert rows == list(experiments.VARIANTS) and len(rows) == 7
    assert "full" in rows
    saved = json.loads((tmp_path / "abl" / "ablation.json").read_text())
    assert [m["variant"] for m in saved["medians"]] == list(experiments.VARIANTS)
    assert (tmp_path / "abl" / "ablation.txt").read_text() == out


def test_ablate_rejects_unknown_variant(tmp_path, capsys):
    (tmp_path / "g.json").write_text('{"variants": ["full", "turbo"]}')
    code, _, err = run(["ablate", "--grid", tmp_path / "g.json"], capsys)
    assert code == 2 and "turbo" in err


def test_atomic_write_leaves_no_temp_files(tmp_path):
    cli.atomic_write_text(tmp_path / "a" / "m.json", "x")
    assert [p.name for p in (tmp_path / "a").iterdir()] == ["m.json"]


def test_module_entry_point_exit_codes():
    proc = subprocess.run([sys.executable, "-m", "dasid.cli", "--nope"], capture_output=True, text=True)
    assert proc.returncode == 1 and "--nope" in proc.stderr
    proc = subprocess.run([sys.executable, "-m", "dasid.cli", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "ablate" in proc.stdout
