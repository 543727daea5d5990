import csv
import json
from pathlib import Path

import numpy as np
import pytest

from multinav.cli import REPORT_COLUMNS, main
from multinav.config import OUT_ROOT_ENV, load_config
from multinav.trainer import ConfigError

from tests.conftest import TINY_DIMS


def write_cfg(path, tiny_assets, out_dir, **overrides):
    data = dict(worlds_dir=str(tiny_assets / "worlds"),
                corpus_dir=str(tiny_assets / "corpus"),
                out_dir=str(out_dir), steps=3, batch_size=2, seeds=[0],
                task_mode="multi", env_mode="plain", eval_interval=0,
                learning_rate=0.2, max_episode_len=6, model=dict(TINY_DIMS))
    data.update(overrides)
    path.write_text(json.dumps(data))
    return path


def run_cli(*argv):
    return main(list(argv))


def test_generate_worlds_layout_and_determinism(tmp_path, capsys):
    out_a = tmp_path / "wa"
    assert run_cli("generate-worlds", "--out", str(out_a), "--train-houses", "2",
                   "--unseen-houses", "1", "--nodes", "12", "--rooms", "3",
                   "--seed", "9") == 0
    folds = json.loads((out_a / "folds.json").read_text())
    assert folds["val_seen"] == folds["train"]
    assert not set(folds["train"]) & set(folds["val_unseen"])
    assert len(list((out_a / "train").glob("house_*.json"))) == 2
    assert len(list((out_a / "val_unseen").glob("house_*.json"))) == 1

    out_b = tmp_path / "wb"
    run_cli("generate-worlds", "--out", str(out_b), "--train-houses", "2",
            "--unseen-houses", "1", "--nodes", "12", "--rooms", "3", "--seed", "9")
    for rel in ("folds.json", "train/house_000.json", "val_unseen/house_002.json"):
        assert (out_a / rel).read_bytes() == (out_b / rel).read_bytes()


def test_generate_worlds_refuses_overwrite(tmp_path, capsys):
    out = tmp_path / "w"
    run_cli("generate-worlds", "--out", str(out), "--train-houses", "1",
            "--unseen-houses", "1", "--nodes", "8", "--rooms", "2")
    code = run_cli("generate-worlds", "--out", str(out), "--train-houses", "1",
                   "--unseen-houses", "1", "--nodes", "8", "--rooms", "2")
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "force" in err["error"]


def test_generate_corpus_val_seen_uses_train_houses(tiny_assets):
    folds = json.loads((tiny_assets / "worlds" / "folds.json").read_text())
    seen_records = [json.loads(line) for line in
                    (tiny_assets / "corpus" / "val_seen.jsonl").read_text().splitlines()]
    assert seen_records
    assert {r["house_id"] for r in seen_records} <= set(folds["train"])
    unseen_records = [json.loads(line) for line in
                      (tiny_assets / "corpus" / "val_unseen.jsonl").read_text().splitlines()]
    assert {r["house_id"] for r in unseen_records} <= set(folds["val_unseen"])


def test_train_dry_run_validates_without_output(tmp_path, tiny_assets, capsys):
    cfg = write_cfg(tmp_path / "cfg.json", tiny_assets, tmp_path / "run")
    assert run_cli("train", "--config", str(cfg), "--dry-run") == 0
    assert not (tmp_path / "run").exists()
    assert json.loads(capsys.readouterr().out)["status"] == "config ok"


def test_train_rejects_unknown_keys_with_listing(tmp_path, tiny_assets, capsys):
    cfg = tmp_path / "cfg.json"
    data = json.loads(write_cfg(tmp_path / "base.json", tiny_assets,
                                tmp_path / "run").read_text())
    data["learning"] = 1
    data["optimiser"] = "sgd"
    cfg.write_text(json.dumps(data))
    assert run_cli("train", "--config", str(cfg), "--dry-run") == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "learning" in err["error"] and "optimiser" in err["error"]


def test_train_missing_corpus_path_is_precise(tmp_path, tiny_assets, capsys):
    cfg = tmp_path / "cfg.json"
    data = json.loads(write_cfg(tmp_path / "base.json", tiny_assets,
                                tmp_path / "run").read_text())
    del data["corpus_dir"]
    cfg.write_text(json.dumps(data))
    assert run_cli("train", "--config", str(cfg)) == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert "corpus_dir" in err["error"]


@pytest.fixture(scope="module")
def trained_run(tiny_assets, tmp_path_factory):
    out = tmp_path_factory.mktemp("trained")
    cfg_path = write_cfg(out / "cfg.json", tiny_assets, out / "run", steps=4,
                         eval_interval=2)
    assert run_cli("train", "--config", str(cfg_path)) == 0
    return out


def test_train_writes_manifest_referencing_artifacts(trained_run):
    run_dir = trained_run / "run"
    manifest = json.loads((run_dir / "manifest.json").read_text())
    on_disk = {str(p.relative_to(run_dir)) for p in run_dir.rglob("*")
               if p.is_file() and p.name != "manifest.json"}
    assert set(manifest["artifacts"]) == on_disk
    assert manifest["world_hashes"] and manifest["corpus_hashes"]
    assert (run_dir / "summary.csv").exists()
    assert (run_dir / "summary.png").stat().st_size > 0
    assert (run_dir / "curves_seed0.png").stat().st_size > 0


def test_resume_continues_step_counter(tmp_path, tiny_assets):
    cfg_path = write_cfg(tmp_path / "c1.json", tiny_assets, tmp_path / "run", steps=2)
    assert run_cli("train", "--config", str(cfg_path)) == 0
    state = json.loads((tmp_path / "run" / "state_seed0.json").read_text())
    assert state["step"] == 2
    cfg_path2 = write_cfg(tmp_path / "c2.json", tiny_assets, tmp_path / "run",
                          steps=5)
    assert run_cli("train", "--config", str(cfg_path2), "--resume",
                   str(tmp_path / "run")) == 0
    state = json.loads((tmp_path / "run" / "state_seed0.json").read_text())
    assert state["step"] == 5
    log = [json.loads(line) for line in
           (tmp_path / "run" / "train_log_seed0.jsonl").read_text().splitlines()]
    assert log[0]["step"] == 3 and log[-1]["step"] == 5


def test_evaluate_writes_reports_and_figure(trained_run, tiny_assets, tmp_path):
    out = tmp_path / "eval"
    assert run_cli("evaluate", "--config", str(trained_run / "cfg.json"),
                   "--checkpoint", str(trained_run / "run" / "checkpoint_seed0.txt"),
                   "--out", str(out)) == 0
    report = json.loads((out / "report.json").read_text())
    assert set(report) == {"vln", "ndh"}
    with open(out / "report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0].keys() == dict.fromkeys(REPORT_COLUMNS).keys()
    folds = {r["fold"] for r in rows}
    assert {"val_seen", "val_unseen", "gap"} <= folds
    episodes = [json.loads(line) for line in
                (out / "episodes.jsonl").read_text().splitlines()]
    assert all({"fold", "task", "predicted", "reference", "metrics"} <= set(e)
               for e in episodes)
    assert (out / "report.png").stat().st_size > 0


def test_evaluate_missing_fold_errors(trained_run, tmp_path, capsys):
    assert run_cli("evaluate", "--config", str(trained_run / "cfg.json"),
                   "--checkpoint", str(trained_run / "run" / "checkpoint_seed0.txt"),
                   "--out", str(tmp_path / "x"), "--folds", "val_weird") == 2
    assert "val_weird" in capsys.readouterr().err


def test_shortest_path_policy_upper_bounds_progress(trained_run, tmp_path):
    def progress(policy):
        out = tmp_path / f"eval_{policy}"
        assert run_cli("evaluate", "--config", str(trained_run / "cfg.json"),
                       "--checkpoint",
                       str(trained_run / "run" / "checkpoint_seed0.txt"),
                       "--out", str(out), "--policy", policy, "--seed", "3") == 0
        report = json.loads((out / "report.json").read_text())
        return report["ndh"]["folds"]["val_unseen"]["progress"]

    shortest = progress("shortest")
    trained = progress("greedy")
    random_walk = progress("random")
    assert shortest >= trained
    assert shortest >= random_walk
    assert abs(random_walk) < shortest or random_walk <= 0.5 * shortest


def test_dump_latents_row_count_and_width(trained_run, tiny_assets, tmp_path):
    out = tmp_path / "latents"
    assert run_cli("dump-latents", "--config", str(trained_run / "cfg.json"),
                   "--checkpoint", str(trained_run / "run" / "checkpoint_seed0.txt"),
                   "--out", str(out), "--fold", "train", "--max-episodes", "5") == 0
    with open(out / "latents.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows
    z_cols = [c for c in rows[0] if c.startswith("z")]
    assert len(z_cols) == TINY_DIMS["traj_hidden"]
    episodes = {r["episode"] for r in rows}
    assert len(episodes) == 5
    assert (out / "latents.png").stat().st_size > 0


def test_ablate_grid_runs_each_cell(tmp_path, tiny_assets):
    cfg_path = write_cfg(tmp_path / "cfg.json", tiny_assets, tmp_path / "ab",
                         steps=2, task_mode="vln")
    out = tmp_path / "ablate"
    assert run_cli("ablate", "--config", str(cfg_path), "--out", str(out),
                   "--tasks", "vln,multi", "--env-modes", "plain,agnostic") == 0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    cells = {r["cell"] for r in rows}
    assert cells == {"vln-plain", "vln-agnostic", "multi-plain", "multi-agnostic"}
    assert list(rows[0].keys()) == ["cell"] + REPORT_COLUMNS
    assert (out / "gaps.png").stat().st_size > 0
    payload = json.loads((out / "ablation.json").read_text())
    assert set(payload) == cells


def test_ablate_fixed_fractions_mode(tmp_path, tiny_assets):
    cfg_path = write_cfg(tmp_path / "cfg.json", tiny_assets, tmp_path / "fx",
                         steps=2)
    out = tmp_path / "ablate_fixed"
    assert run_cli("ablate", "--config", str(cfg_path), "--out", str(out),
                   "--fixed-fractions", "0,0.5", "--fixed-total", "6") == 0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [float(r["fraction"]) for r in rows] == [0.0, 0.5]
    assert all(int(r["train_size"]) == 6 for r in rows)


def test_out_root_env_override(tmp_path, tiny_assets, monkeypatch):
    monkeypatch.setenv(OUT_ROOT_ENV, str(tmp_path / "root"))
    cfg_path = write_cfg(tmp_path / "cfg.json", tiny_assets, "nested/run")
    cfg = load_config(cfg_path)
    assert cfg.out_dir == str(tmp_path / "root" / "nested" / "run")


def test_config_loader_rejects_bad_json(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)
