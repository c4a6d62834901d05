"""End-to-end command-line behavior: artifact contracts, config precedence,
exit codes, reproducibility, and the augmentation preview. All invocations go
through cli.main() in-process so exit codes and stdout are observable."""

from __future__ import annotations

import json
import re
import shutil

import numpy as np
import pytest
import torch
from PIL import Image as PILImage

from fds import cli
from fds.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, RunManifest, _hash_tree
from fds.dataset import _read_image, _read_mask, build_episode, load_mvtec_category
from fds.losses import NumericalError
from fds.model import load_checkpoint
from fds.trainer import evaluate_model


TRAIN_ARTIFACTS = ("manifest.json", "checkpoint.pt", "trainlog.jsonl",
                   "metrics.json", "metrics.csv", "roc.png")


@pytest.fixture(scope="module")
def trained_dir(synth_root, tmp_path_factory):
    """One 120-iteration CLI training run on the stripes category."""
    out = tmp_path_factory.mktemp("trained")
    rc = cli.main(["train", "--data", str(synth_root / "stripes"),
                   "--out", str(out), "--iters", "120", "--seed", "0"])
    assert rc == EXIT_OK
    return out


def _trainlog_lines(path):
    return [json.loads(l) for l in path.read_text().splitlines()]


# ---------------------------------------------------------------------------
# synth


class TestSynth:
    def test_deterministic_across_invocations(self, tmp_path, capsys):
        args = ["synth", "--seed", "5", "--texture", "checker", "--defect", "hole",
                "--n-normal-train", "3", "--n-defect-train", "1", "--n-defect-test", "2",
                "--n-normal-test", "2"]
        assert cli.main(args + ["--out", str(tmp_path / "a")]) == EXIT_OK
        out_a = capsys.readouterr().out
        assert cli.main(args + ["--out", str(tmp_path / "b")]) == EXIT_OK
        out_b = capsys.readouterr().out
        assert _hash_tree(tmp_path / "a") == _hash_tree(tmp_path / "b")
        sa, sb = json.loads(out_a), json.loads(out_b)
        sa.pop("root"), sb.pop("root")
        assert sa == sb

    def test_summary_counts_match_disk(self, tmp_path, capsys):
        rc = cli.main(["synth", "--out", str(tmp_path), "--seed", "1",
                       "--n-normal-train", "4", "--n-defect-train", "2",
                       "--n-defect-test", "3", "--n-normal-test", "2"])
        assert rc == EXIT_OK
        s = json.loads(capsys.readouterr().out)
        cat = tmp_path / s["category"]
        assert s["n_normal_train"] == len(list((cat / "train" / "good").glob("*.png"))) == 4
        assert s["n_normal_test"] == len(list((cat / "test" / "good").glob("*.png"))) == 2
        defect_dirs = [d for d in (cat / "test").iterdir() if d.name != "good"]
        assert s["n_defect"] == sum(len(list(d.glob("*.png"))) for d in defect_dirs) == 5

    def test_rejects_unknown_texture(self, tmp_path):
        assert cli.main(["synth", "--out", str(tmp_path),
                         "--texture", "plaid"]) == EXIT_USAGE


# ---------------------------------------------------------------------------
# train


class TestTrain:
    def test_writes_all_artifacts(self, trained_dir):
        for name in TRAIN_ARTIFACTS:
            assert (trained_dir / name).is_file(), name

    def test_manifest_is_self_describing(self, synth_root, trained_dir):
        m = RunManifest.read(trained_dir / "manifest.json")
        assert m.category == "stripes"
        assert m.seed == 0
        assert m.config["iterations"] == 120
        assert m.config["k_shot"] == 1
        assert m.model_config["input_resolution"] == 64
        assert m.dataset_hash == _hash_tree(synth_root / "stripes")
        assert m.per_defect_type is True

    def test_trainlog_has_final_snapshot(self, trained_dir):
        lines = _trainlog_lines(trained_dir / "trainlog.jsonl")
        recs = [l for l in lines if l["type"] == "record"]
        snaps = [l for l in lines if l["type"] == "eval"]
        assert len(recs) == 120
        assert [s["iteration"] for s in snaps] == [120]

    def test_rerun_reproduces_metrics(self, synth_root, tmp_path, capsys):
        args = ["train", "--data", str(synth_root / "stripes"), "--iters", "30",
                "--seed", "2"]
        assert cli.main(args + ["--out", str(tmp_path / "r1")]) == EXIT_OK
        out1 = capsys.readouterr().out
        assert cli.main(args + ["--out", str(tmp_path / "r2")]) == EXIT_OK
        out2 = capsys.readouterr().out
        iou1 = re.search(r"final mean IOU: ([0-9.]+)", out1).group(1)
        iou2 = re.search(r"final mean IOU: ([0-9.]+)", out2).group(1)
        assert iou1 == iou2
        assert ((tmp_path / "r1" / "metrics.json").read_text()
                == (tmp_path / "r2" / "metrics.json").read_text())

    def test_category_flag_selects_within_root(self, synth_root, tmp_path):
        rc = cli.main(["train", "--data", str(synth_root), "--category", "checker",
                       "--out", str(tmp_path), "--iters", "2", "--seed", "0"])
        assert rc == EXIT_OK
        assert RunManifest.read(tmp_path / "manifest.json").category == "checker"

    def test_multi_category_root_needs_flag(self, synth_root, tmp_path):
        rc = cli.main(["train", "--data", str(synth_root),
                       "--out", str(tmp_path), "--iters", "2"])
        assert rc == EXIT_USAGE

    def test_missing_data_dir_is_data_error(self, tmp_path):
        rc = cli.main(["train", "--data", str(tmp_path / "nope"),
                       "--out", str(tmp_path / "out"), "--iters", "2"])
        assert rc == EXIT_DATA

    def test_unknown_flag_is_usage_error(self, synth_root, tmp_path):
        rc = cli.main(["train", "--data", str(synth_root / "stripes"),
                       "--out", str(tmp_path), "--warmup", "5"])
        assert rc == EXIT_USAGE

    def test_numerical_failure_exit_code(self, synth_root, tmp_path, monkeypatch):
        def explode(*a, **k):
            raise NumericalError("injected")

        monkeypatch.setattr(cli, "train", explode)
        rc = cli.main(["train", "--data", str(synth_root / "stripes"),
                       "--out", str(tmp_path), "--iters", "2"])
        assert rc == EXIT_NUMERIC


class TestConfigPrecedence:
    def test_flags_beat_file_beats_defaults(self, synth_root, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text('[train]\niters = 9\nseed = 3\nlambda_mode = "fixed1"\n')
        out = tmp_path / "out"
        rc = cli.main(["train", "--data", str(synth_root / "stripes"),
                       "--out", str(out), "--config", str(cfg), "--iters", "4"])
        assert rc == EXIT_OK
        m = RunManifest.read(out / "manifest.json")
        assert m.config["iterations"] == 4          # flag wins
        assert m.config["seed"] == 3                # file fills the gap
        assert m.config["lambda_mode"] == "fixed_one"  # CLI spelling mapped
        assert m.config["cap_probability"] == 0.5   # untouched default
        recs = [l for l in _trainlog_lines(out / "trainlog.jsonl") if l["type"] == "record"]
        assert len(recs) == 4

    def test_env_seed_fallback(self, synth_root, tmp_path, monkeypatch):
        monkeypatch.setenv("FDS_SEED", "11")
        out = tmp_path / "out"
        rc = cli.main(["train", "--data", str(synth_root / "stripes"),
                       "--out", str(out), "--iters", "2"])
        assert rc == EXIT_OK
        assert RunManifest.read(out / "manifest.json").seed == 11

    def test_flag_seed_beats_env(self, synth_root, tmp_path, monkeypatch):
        monkeypatch.setenv("FDS_SEED", "11")
        out = tmp_path / "out"
        rc = cli.main(["train", "--data", str(synth_root / "stripes"),
                       "--out", str(out), "--iters", "2", "--seed", "5"])
        assert rc == EXIT_OK
        assert RunManifest.read(out / "manifest.json").seed == 5

    def test_bad_env_seed_is_usage_error(self, synth_root, tmp_path, monkeypatch):
        monkeypatch.setenv("FDS_SEED", "eleven")
        rc = cli.main(["train", "--data", str(synth_root / "stripes"),
                       "--out", str(tmp_path), "--iters", "2"])
        assert rc == EXIT_USAGE

    def test_unknown_file_key_is_usage_error(self, synth_root, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text("[train]\nwarmup = 5\n")
        rc = cli.main(["train", "--data", str(synth_root / "stripes"),
                       "--out", str(tmp_path / "out"), "--config", str(cfg)])
        assert rc == EXIT_USAGE


# ---------------------------------------------------------------------------
# eval


class TestEval:
    def test_matches_training_report_and_final_snapshot(self, synth_root, trained_dir,
                                                        tmp_path, capsys):
        rc = cli.main(["eval", "--checkpoint", str(trained_dir / "checkpoint.pt"),
                       "--data", str(synth_root / "stripes"), "--out", str(tmp_path)])
        assert rc == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        train_report = json.loads((trained_dir / "metrics.json").read_text())
        assert report == train_report
        snaps = [l for l in _trainlog_lines(trained_dir / "trainlog.jsonl")
                 if l["type"] == "eval"]
        assert report["per_category"]["stripes"]["mean_iou"] == pytest.approx(
            snaps[-1]["mean_iou"], rel=1e-12)

    def test_eval_twice_identical_json(self, synth_root, trained_dir, tmp_path, capsys):
        args = ["eval", "--checkpoint", str(trained_dir / "checkpoint.pt"),
                "--data", str(synth_root / "stripes")]
        assert cli.main(args + ["--out", str(tmp_path / "e1")]) == EXIT_OK
        out1 = capsys.readouterr().out
        assert cli.main(args + ["--out", str(tmp_path / "e2")]) == EXIT_OK
        out2 = capsys.readouterr().out
        assert out1 == out2
        assert ((tmp_path / "e1" / "metrics.json").read_text()
                == (tmp_path / "e2" / "metrics.json").read_text())

    def test_threshold_changes_report_and_matches_library(self, synth_root, trained_dir,
                                                          tmp_path, capsys):
        reports = {}
        for thr in ("0.3", "0.7"):
            rc = cli.main(["eval", "--checkpoint", str(trained_dir / "checkpoint.pt"),
                           "--data", str(synth_root / "stripes"),
                           "--out", str(tmp_path / thr), "--threshold", thr])
            assert rc == EXIT_OK
            reports[thr] = json.loads(capsys.readouterr().out)
        assert reports["0.3"] != reports["0.7"]

        # recompute one of them directly through the library
        model, _ = load_checkpoint(trained_dir / "checkpoint.pt")
        manifest = RunManifest.read(trained_dir / "manifest.json")
        normal_train, defect_pool, normal_test = load_mvtec_category(synth_root, "stripes")
        episode = build_episode(defect_pool, normal_train,
                                manifest.config["k_shot"], manifest.seed)
        evals = evaluate_model(model, episode.test_pairs, normal_test,
                               threshold=0.3, category="stripes")
        want = float(np.mean([e.iou for e in evals if e.is_defect]))
        assert reports["0.3"]["per_category"]["stripes"]["mean_iou"] == pytest.approx(
            want, rel=1e-12)

    def test_bare_checkpoint_requires_k(self, synth_root, trained_dir, tmp_path, capsys):
        bare = tmp_path / "bare.pt"
        shutil.copy(trained_dir / "checkpoint.pt", bare)
        rc = cli.main(["eval", "--checkpoint", str(bare),
                       "--data", str(synth_root / "stripes"), "--out", str(tmp_path / "e")])
        assert rc == EXIT_USAGE
        rc = cli.main(["eval", "--checkpoint", str(bare), "--k", "1", "--seed", "0",
                       "--data", str(synth_root / "stripes"), "--out", str(tmp_path / "e")])
        assert rc == EXIT_OK
        report = json.loads(capsys.readouterr().out)
        assert report == json.loads((trained_dir / "metrics.json").read_text())

    def test_missing_checkpoint_is_data_error(self, synth_root, tmp_path):
        rc = cli.main(["eval", "--checkpoint", str(tmp_path / "ghost.pt"),
                       "--data", str(synth_root / "stripes"), "--out", str(tmp_path)])
        assert rc == EXIT_DATA

    def test_overlays_written_on_request(self, synth_root, trained_dir, tmp_path, capsys):
        rc = cli.main(["eval", "--checkpoint", str(trained_dir / "checkpoint.pt"),
                       "--data", str(synth_root / "stripes"),
                       "--out", str(tmp_path), "--dump-overlays"])
        assert rc == EXIT_OK
        capsys.readouterr()
        overlays = list((tmp_path / "overlays").glob("overlay_*.png"))
        # 20 defect images in the category, minus the one 1-shot training pick
        assert len(overlays) == 19


# ---------------------------------------------------------------------------
# augment-preview


def _preview(capsys, synth_root, normal_path, out_dir, checkpoint=None):
    args = ["augment-preview",
            "--defect-image", str(synth_root / "stripes/test/blob/000.png"),
            "--defect-mask", str(synth_root / "stripes/ground_truth/blob/000_mask.png"),
            "--normal-image", str(normal_path), "--out", str(out_dir)]
    if checkpoint is not None:
        args += ["--checkpoint", str(checkpoint)]
    rc = cli.main(args)
    return rc, capsys.readouterr().out


class TestAugmentPreview:
    def test_self_paste_reproduces_defect_image(self, synth_root, trained_dir,
                                                tmp_path, capsys):
        defect = synth_root / "stripes/test/blob/000.png"
        rc, out = _preview(capsys, synth_root, defect, tmp_path,
                           checkpoint=trained_dir / "checkpoint.pt")
        assert rc == EXIT_OK
        got = np.asarray(PILImage.open(tmp_path / "composite.png"))
        want = np.asarray(PILImage.open(defect))
        np.testing.assert_array_equal(got, want)
        lam = float(re.search(r"lambda = ([0-9.]+)", out).group(1))
        assert lam >= 0.999999

    def test_zero_mask_reproduces_normal_image(self, synth_root, tmp_path, capsys):
        zero_mask = tmp_path / "zero_mask.png"
        PILImage.fromarray(np.zeros((64, 64), dtype=np.uint8)).save(zero_mask)
        normal = synth_root / "stripes/train/good/000.png"
        rc = cli.main(["augment-preview",
                       "--defect-image", str(synth_root / "stripes/test/blob/000.png"),
                       "--defect-mask", str(zero_mask),
                       "--normal-image", str(normal), "--out", str(tmp_path)])
        assert rc == EXIT_OK
        capsys.readouterr()
        got = np.asarray(PILImage.open(tmp_path / "composite.png"))
        want = np.asarray(PILImage.open(normal))
        np.testing.assert_array_equal(got, want)

    def test_lambda_unavailable_without_checkpoint(self, synth_root, tmp_path, capsys):
        normal = synth_root / "stripes/train/good/000.png"
        rc, out = _preview(capsys, synth_root, normal, tmp_path)
        assert rc == EXIT_OK
        assert "lambda unavailable" in out
        assert (tmp_path / "composite.png").is_file()

    def test_similar_background_scores_higher(self, synth_root, trained_dir,
                                              tmp_path, capsys):
        # independent similarity oracle: RMS pixel distance to the defect
        # image outside the defect region picks the most/least similar donor
        d_img = _read_image(synth_root / "stripes/test/blob/000.png")
        d_mask = _read_mask(synth_root / "stripes/ground_truth/blob/000_mask.png")
        outside = d_mask.values == 0

        def rms(path):
            n = _read_image(path)
            return float(np.sqrt(np.mean((n.pixels[outside] - d_img.pixels[outside]) ** 2)))

        similar = min(sorted((synth_root / "stripes/train/good").glob("*.png")), key=rms)
        dissimilar = max(sorted((synth_root / "checker/train/good").glob("*.png")), key=rms)
        assert rms(similar) < rms(dissimilar)

        lams = {}
        for tag, path in (("sim", similar), ("dis", dissimilar)):
            rc, out = _preview(capsys, synth_root, path, tmp_path / tag,
                               checkpoint=trained_dir / "checkpoint.pt")
            assert rc == EXIT_OK
            lams[tag] = float(re.search(r"lambda = ([0-9.]+)", out).group(1))
        assert lams["sim"] > lams["dis"]

    def test_shape_mismatch_is_data_error(self, synth_root, tmp_path, capsys):
        odd = tmp_path / "odd.png"
        PILImage.fromarray(np.zeros((64, 128, 3), dtype=np.uint8)).save(odd)
        rc, _ = _preview(capsys, synth_root, odd, tmp_path)
        assert rc == EXIT_DATA


# ---------------------------------------------------------------------------
# parser plumbing


class TestParser:
    def test_no_command_is_usage_error(self):
        assert cli.main([]) == EXIT_USAGE

    def test_unknown_command_is_usage_error(self):
        assert cli.main(["deploy"]) == EXIT_USAGE

    def test_bad_choice_is_usage_error(self, synth_root, tmp_path):
        rc = cli.main(["train", "--data", str(synth_root / "stripes"),
                       "--out", str(tmp_path), "--ablation", "B_CAP"])
        assert rc == EXIT_USAGE
