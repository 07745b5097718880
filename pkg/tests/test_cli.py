import csv
import hashlib

import pytest
import yaml

from cmcseg import cli


def _run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def _checksums(root):
    return {str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file() and p.name != cli.MANIFEST}


def test_generate_paired_summary_and_determinism(tmp_path, capsys):
    code, out, _ = _run(capsys, "generate-data", "--config", "paired", "--out", tmp_path / "d1")
    assert code == 0
    assert "labeled N=4 unlabeled M=36" in out and "paired=true" in out
    manifest = yaml.safe_load((tmp_path / "d1" / "run.yaml").read_text())
    assert "split.yaml" in manifest["artifacts"]
    assert all((tmp_path / "d1" / p).exists() for p in manifest["artifacts"])
    _run(capsys, "generate-data", "--config", "paired", "--out", tmp_path / "d2")
    assert _checksums(tmp_path / "d1") == _checksums(tmp_path / "d2")


def test_generate_unpaired(tmp_path, capsys):
    code, out, _ = _run(capsys, "generate-data", "--config", "unpaired", "--out", tmp_path)
    assert code == 0 and "paired=false" in out


@pytest.fixture(scope="module")
def smoke_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert cli.main(["generate-data", "--config", "smoke", "--out", str(root / "data")]) == 0
    assert cli.main(["train", "--config", "smoke", "--data", str(root / "data"), "--out", str(root / "train")]) == 0
    return root


def test_train_writes_declared_artifacts(smoke_run):
    run = smoke_run / "train"
    manifest = yaml.safe_load((run / "run.yaml").read_text())
    for name in ("train_log.csv", "best.pt", "last.pt", "val_dice.png", "eval.csv", "per_class_dice.png"):
        assert name in manifest["artifacts"] and (run / name).stat().st_size > 0
    assert manifest["config"]["epochs"] == 2
    assert manifest["data"].endswith("data")


def test_train_baseline_flag_zeroes_unsupervised_terms(tmp_path, capsys):
    code, _, _ = _run(capsys, "train", "--config", "smoke", "--ablation", "baseline", "--out", tmp_path)
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "train_log.csv")))
    assert rows and all(float(r["csc"]) == 0 and float(r["cac"]) == 0 for r in rows)
    cfg = yaml.safe_load((tmp_path / "run.yaml").read_text())["config"]
    assert cfg["ablation"] == {"modality_specific_encoder": False, "cmc_strategy": False, "ccl_module": False}


def test_labeled_fraction_flag_overrides(tmp_path, capsys):
    code, out, _ = _run(capsys, "generate-data", "--config", "paired", "--labeled-fraction", "0.2",
                        "--out", tmp_path)
    assert code == 0 and "labeled N=8 unlabeled M=32" in out
    assert yaml.safe_load((tmp_path / "run.yaml").read_text())["config"]["labeled_fraction"] == 0.2


def test_evaluate_matches_csv(smoke_run, capsys):
    out_dir = smoke_run / "eval"
    code, out, _ = _run(capsys, "evaluate", "--checkpoint", smoke_run / "train" / "best.pt",
                        "--split", "test", "--out", out_dir)
    assert code == 0
    rows = list(csv.DictReader(open(out_dir / "eval.csv")))
    n_test, n_mod, n_fg = 2, 2, 2
    assert len(rows) == n_test * n_mod * n_fg + n_mod * n_fg + n_mod
    assert (out_dir / "per_class_dice.png").stat().st_size > 0
    means = cli.read_eval_means(out_dir / "eval.csv")
    for m in ("a", "b"):
        assert f"{m}: dice {means[m][0]:.4f} assd {means[m][1]:.3f}mm" in out
        # recompute from the per-sample rows
        per_sample = {}
        for r in rows:
            if r["modality"] == m and r["sample_id"] != "mean":
                per_sample.setdefault(r["sample_id"], []).append(float(r["dice"]))
        recomputed = sum(sum(v) / len(v) for v in per_sample.values()) / len(per_sample)
        assert recomputed == pytest.approx(means[m][0], abs=1e-12)


def test_report_two_runs(smoke_run, tmp_path, capsys):
    runs = [smoke_run / "train", smoke_run / "eval"]
    if not (smoke_run / "eval" / "run.yaml").exists():
        assert cli.main(["evaluate", "--checkpoint", str(smoke_run / "train" / "best.pt"),
                         "--out", str(smoke_run / "eval")]) == 0
    code, _, _ = _run(capsys, "report", *runs, "--out", tmp_path)
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "comparison.csv")))
    assert len(rows) == 2
    # both evaluate the best checkpoint on the test split
    for col in cli.COMPARISON_COLUMNS[1:]:
        assert rows[0][col] == rows[1][col]
    means = cli.read_eval_means(smoke_run / "train" / "eval.csv")
    assert float(rows[0]["mean_dice"]) == pytest.approx((means["a"][0] + means["b"][0]) / 2)


def test_report_missing_manifest(tmp_path, capsys):
    code, _, err = _run(capsys, "report", tmp_path / "nope", "--out", tmp_path / "r")
    assert code == 2 and "nope" in err


def test_bad_config_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("preset: smoke\nmodel:\n  num_heads: 5\n")
    code, _, err = _run(capsys, "train", "--config", bad, "--out", tmp_path / "o")
    assert code == 2 and "num_heads" in err
    bad.write_text("epochs: many\n")
    code, _, err = _run(capsys, "train", "--config", bad, "--out", tmp_path / "o")
    assert code == 2 and "epochs" in err


def test_inconsistent_class_counts_rejected(tmp_path, capsys):
    cfg = tmp_path / "k4.yaml"
    cfg.write_text(yaml.safe_dump({"preset": "smoke", "model": {"num_classes": 4}}))
    code, _, err = _run(capsys, "generate-data", "--config", cfg, "--out", tmp_path / "o")
    assert code == 2 and "num_classes" in err


def test_unknown_preset_and_flag_conflict(tmp_path, capsys):
    code, _, _ = _run(capsys, "train", "--config", "nosuch", "--out", tmp_path)
    assert code == 2
    code, _, err = _run(capsys, "train", "--config", "smoke", "--data", tmp_path, "--labeled-fraction", "0.2",
                        "--out", tmp_path)
    assert code == 2 and "labeled-fraction" in err


def test_evaluate_class_mismatch(smoke_run, tmp_path, capsys):
    cfg = tmp_path / "k4.yaml"
    cfg.write_text(yaml.safe_dump({"preset": "smoke", "model": {"num_classes": 4},
                                   "data": {"phantom": {"num_classes": 4},
                                            "appearance_a": {"class_intensity": [0.1, 0.9, 0.5, 0.7]},
                                            "appearance_b": {"class_intensity": [0.8, 0.3, 0.1, 0.5]}}}))
    assert cli.main(["generate-data", "--config", str(cfg), "--out", str(tmp_path / "d4")]) == 0
    code, _, err = _run(capsys, "evaluate", "--checkpoint", smoke_run / "train" / "best.pt",
                        "--data", tmp_path / "d4", "--out", tmp_path / "e")
    assert code == 1 and "classes" in err


def test_env_default_output_root(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path))
    code, _, _ = _run(capsys, "generate-data", "--config", "smoke")
    assert code == 0
    (run,) = tmp_path.iterdir()
    assert run.name.startswith("data-") and (run / "run.yaml").exists()


def test_ablate_table(tmp_path, capsys):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(yaml.safe_dump({"preset": "smoke", "epochs": 1}))
    code, out, _ = _run(capsys, "ablate", "--config", cfg, "--out", tmp_path / "a")
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "a" / "ablation.csv")))
    assert [r["row"] for r in rows] == ["baseline", "encoder", "cmc", "full"]
    assert all(r[c] for r in rows for c in ("dice_a", "dice_b", "assd_a", "assd_b"))
    assert (tmp_path / "a" / "ablation.txt").read_text() == out
