"""Subcommand behavior, file outputs, exit codes, reproducibility.

Everything runs in-process through cli.main() at toy scale (16x16
scenes, a handful of samples, one epoch) so the whole module stays
fast.  Teachers are trained once per session and shared.
"""

import json

import numpy as np
import pytest

from amalgam import cli
from amalgam import config as cfg
from amalgam import tensor as T
from amalgam.checkpoint import load_json, load_model, load_online_student, load_shard
from amalgam.nets import init_state, run_trunk
from amalgam.scenegen import SceneDataset
from amalgam.training import evaluate as evaluate_state

TINY = """
scene.h = 16
scene.w = 16
data.train = 8
data.eval = 4
net.widths = 4,8,4,2
net.depth_bins = 8
net.depth_bin_len = 1.25
teacher.epochs = 1
teacher.batch_size = 4
amalgamate.epochs_per_block = 1
amalgamate.fine_tune_epochs = 1
amalgamate.batch_size = 4
eval.batch_size = 4
"""


@pytest.fixture(scope="session")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    (d / "tiny.cfg").write_text(TINY)
    return d


def run(workdir, *argv):
    base = ("--config", str(workdir / "tiny.cfg"))
    return cli.main(list(argv) + list(base))


@pytest.fixture(scope="session")
def teachers(workdir):
    out = workdir / "teachers"
    for task in ("seg", "depth", "normal"):
        assert run(workdir, "train-teacher", "--task", task,
                   "--out", str(out)) == 0
    return {task: out / f"teacher-{task}.ckpt"
            for task in ("seg", "depth", "normal")}


def tiny_values(workdir, **extra):
    return cfg.resolve(workdir / "tiny.cfg", extra)


# ---------------------------------------------------------------------------
# gen-data

def test_gen_data_writes_both_shards(workdir, tmp_path):
    assert run(workdir, "gen-data", "--out", str(tmp_path)) == 0
    train, scene = load_shard(tmp_path / "train.shard")
    eval_, _ = load_shard(tmp_path / "eval.shard")
    assert len(train) == 8 and len(eval_) == 4
    assert scene.h == 16
    # shard content matches direct generation at the same indices
    ds = SceneDataset(scene)
    assert np.array_equal(train[3].image, ds.sample(3).image)
    assert np.array_equal(eval_[0].image, ds.sample(8).image)


def test_gen_data_is_byte_reproducible(workdir, tmp_path):
    for sub in ("a", "b"):
        assert run(workdir, "gen-data", "--out", str(tmp_path / sub)) == 0
    assert ((tmp_path / "a" / "train.shard").read_bytes()
            == (tmp_path / "b" / "train.shard").read_bytes())
    assert ((tmp_path / "a" / "eval.shard").read_bytes()
            == (tmp_path / "b" / "eval.shard").read_bytes())


def test_flag_overrides_config_file(workdir, tmp_path):
    assert run(workdir, "gen-data", "--out", str(tmp_path),
               "--scene.h", "32", "--data.train", "2", "--data.eval", "1") == 0
    samples, scene = load_shard(tmp_path / "train.shard")
    assert scene.h == 32 and scene.w == 16
    assert len(samples) == 2


def test_undersized_scene_is_a_usage_error(workdir, tmp_path):
    assert run(workdir, "gen-data", "--out", str(tmp_path),
               "--scene.h", "8") == 2


# ---------------------------------------------------------------------------
# train-teacher

def test_train_teacher_outputs(workdir, teachers):
    spec, state = load_model(teachers["seg"])
    assert spec.head.classes == 5
    metrics = load_json(teachers["seg"].parent / "teacher-seg-metrics.json")
    assert metrics["miou"] is not None and metrics["abs_rel"] is None
    curve = (teachers["seg"].parent / "teacher-seg-curve.csv").read_text()
    lines = curve.strip().split("\n")
    assert lines[0] == "epoch,loss" and len(lines) == 2  # one epoch
    assert float(lines[1].split(",")[1]) > 0


def test_train_teacher_zero_epochs_equals_initialization(workdir, tmp_path):
    assert run(workdir, "train-teacher", "--task", "depth",
               "--out", str(tmp_path), "--teacher.epochs", "0") == 0
    spec, state = load_model(tmp_path / "teacher-depth.ckpt")
    fresh = init_state(spec, 0, labels=("teacher", "depth"))
    assert state.sha256() == fresh.sha256()
    curve = (tmp_path / "teacher-depth-curve.csv").read_text()
    assert curve == "epoch,loss\n"


def test_train_teacher_accepts_reference_profile(workdir, tmp_path):
    # the decayed profile ships without a planned step count; the
    # training loop must fill it in rather than reject the config
    assert run(workdir, "train-teacher", "--task", "seg",
               "--out", str(tmp_path), "--optim.profile", "reference") == 0
    assert (tmp_path / "teacher-seg.ckpt").exists()


def test_train_teacher_is_byte_reproducible(workdir, tmp_path):
    for sub in ("a", "b"):
        assert run(workdir, "train-teacher", "--task", "seg",
                   "--out", str(tmp_path / sub)) == 0
    for name in ("teacher-seg.ckpt", "teacher-seg-metrics.json",
                 "teacher-seg-curve.csv"):
        assert ((tmp_path / "a" / name).read_bytes()
                == (tmp_path / "b" / name).read_bytes())


def test_teacher_metrics_match_direct_evaluation(workdir, teachers):
    spec, state = load_model(teachers["depth"])
    values = tiny_values(workdir)
    _, _, eval_view = cfg.data_views(values)
    report = evaluate_state(spec, state, eval_view, values["eval.batch_size"])
    saved = load_json(teachers["depth"].parent / "teacher-depth-metrics.json")
    assert saved == report.to_dict()


# ---------------------------------------------------------------------------
# amalgamate

def test_amalgamate_two_teachers(workdir, teachers, tmp_path, capsys):
    assert run(workdir, "amalgamate", "--teachers", str(teachers["seg"]),
               str(teachers["depth"]), "--out", str(tmp_path)) == 0
    spec, state = load_model(tmp_path / "student.ckpt")
    assert sorted(b.task for b in spec.head.branches) == ["depth", "seg"]
    report = load_json(tmp_path / "report.json")
    assert report["teachers"] == {"seg": str(teachers["seg"]),
                                  "depth": str(teachers["depth"])}
    assert report["params"]["student"] < report["params"]["teacher_total"]
    assert set(report["plan"]) == {"p_depth", "p_seg", "removed_blocks"}
    text = (tmp_path / "report.txt").read_text()
    assert "branch out:" in text and text in capsys.readouterr().out + text


def test_amalgamate_is_byte_reproducible(workdir, teachers, tmp_path):
    for sub in ("a", "b"):
        assert run(workdir, "amalgamate", "--teachers", str(teachers["seg"]),
                   str(teachers["depth"]), "--out", str(tmp_path / sub)) == 0
    for name in ("student.ckpt", "report.json", "report.txt"):
        assert ((tmp_path / "a" / name).read_bytes()
                == (tmp_path / "b" / name).read_bytes())


def test_amalgamate_three_teachers(workdir, teachers, tmp_path):
    assert run(workdir, "amalgamate", "--teachers", str(teachers["seg"]),
               str(teachers["depth"]), str(teachers["normal"]),
               "--out", str(tmp_path)) == 0
    spec, _ = load_model(tmp_path / "student.ckpt")
    assert sorted(b.task for b in spec.head.branches) == ["depth", "norm", "seg"]
    report = load_json(tmp_path / "report.json")
    assert "angle_mean" in report["metrics"]


def test_amalgamate_rejects_partial_roster(workdir, teachers, tmp_path):
    assert run(workdir, "amalgamate", "--teachers", str(teachers["seg"]),
               str(teachers["normal"]), "--out", str(tmp_path)) == 2
    assert run(workdir, "amalgamate", "--teachers", str(teachers["seg"]),
               str(teachers["seg"]), "--out", str(tmp_path)) == 2


def test_amalgamate_online(workdir, teachers, tmp_path):
    base = tmp_path / "base"
    assert run(workdir, "amalgamate", "--teachers", str(teachers["seg"]),
               str(teachers["depth"]), "--out", str(base)) == 0
    out = tmp_path / "online"
    assert run(workdir, "amalgamate", "--online-base", str(base / "student.ckpt"),
               "--teachers", str(teachers["normal"]), "--out", str(out)) == 0
    student3 = load_online_student(out / "student3.ckpt")
    report = load_json(out / "report.json")
    assert report["freeze_audit"]["unchanged"] is True
    assert report["plan"]["p_norm"] == student3.attach_m
    assert report["plan"]["p_u2"] == student3.attach_u
    assert report["params"]["student"] == student3.own_param_count()
    # donors stayed byte-identical on disk too
    spec2, state2 = load_model(base / "student.ckpt")
    assert state2.sha256() == report["freeze_audit"]["online_base_sha256_before"]


def test_online_base_needs_exactly_one_normal_teacher(workdir, teachers, tmp_path):
    base = tmp_path / "base"
    assert run(workdir, "amalgamate", "--teachers", str(teachers["seg"]),
               str(teachers["depth"]), "--out", str(base)) == 0
    assert run(workdir, "amalgamate", "--online-base", str(base / "student.ckpt"),
               "--teachers", str(teachers["seg"]), "--out", str(tmp_path)) == 2
    assert run(workdir, "amalgamate", "--online-base", str(base / "student.ckpt"),
               "--teachers", str(teachers["normal"]), str(teachers["seg"]),
               "--out", str(tmp_path)) == 2


def test_amalgamate_rejects_multihead_teacher(workdir, teachers, tmp_path):
    base = tmp_path / "base"
    assert run(workdir, "amalgamate", "--teachers", str(teachers["seg"]),
               str(teachers["depth"]), "--out", str(base)) == 0
    assert run(workdir, "amalgamate",
               "--teachers", str(base / "student.ckpt"), str(teachers["normal"]),
               "--out", str(tmp_path)) == 2


# ---------------------------------------------------------------------------
# evaluate

def test_evaluate_writes_metrics_sidecar(workdir, teachers, tmp_path, capsys):
    assert run(workdir, "evaluate", "--checkpoint", str(teachers["normal"]),
               "--out", str(tmp_path)) == 0
    saved = load_json(tmp_path / "teacher-normal-metrics.json")
    assert saved["angle_mean"] is not None and saved["miou"] is None
    assert "angle_mean=" in capsys.readouterr().out


def test_evaluate_missing_checkpoint_is_a_data_error(workdir, tmp_path):
    assert run(workdir, "evaluate", "--checkpoint", str(tmp_path / "no.ckpt"),
               "--out", str(tmp_path)) == 3


def test_evaluate_corrupt_checkpoint_is_a_data_error(workdir, teachers, tmp_path):
    clipped = tmp_path / "clipped.ckpt"
    clipped.write_bytes(teachers["seg"].read_bytes()[:300])
    assert run(workdir, "evaluate", "--checkpoint", str(clipped),
               "--out", str(tmp_path)) == 3


# ---------------------------------------------------------------------------
# graft-probe

def probe_features(workdir, teachers, block):
    values = tiny_values(workdir)
    spec, state = load_model(teachers["seg"])
    ds = SceneDataset(cfg.scene_config(values))
    start, count = values["data.train"], values["probe.count"]
    images = T.constant(np.stack([ds.image(start + i) for i in range(count)]))
    return run_trunk(spec, state, images, upto=block)[-1].data


def test_probe_with_the_networks_own_features_changes_nothing(
        workdir, teachers, tmp_path):
    feats = probe_features(workdir, teachers, 2)
    np.save(tmp_path / "own.npy", feats)
    assert run(workdir, "graft-probe", "--checkpoint", str(teachers["seg"]),
               "--block", "2", "--features", str(tmp_path / "own.npy"),
               "--out", str(tmp_path)) == 0
    summary = load_json(tmp_path / "probe-summary.json")
    assert summary["max_abs_delta"] == 0.0 and summary["delta_l2"] == 0.0
    delta = np.load(tmp_path / "probe-delta.npy")
    assert not delta.any()


def test_probe_with_foreign_features_reports_the_true_delta(
        workdir, teachers, tmp_path):
    feats = probe_features(workdir, teachers, 2)
    np.save(tmp_path / "zeros.npy", np.zeros_like(feats))
    assert run(workdir, "graft-probe", "--checkpoint", str(teachers["seg"]),
               "--block", "2", "--features", str(tmp_path / "zeros.npy"),
               "--out", str(tmp_path)) == 0
    summary = load_json(tmp_path / "probe-summary.json")
    delta = np.load(tmp_path / "probe-delta.npy")
    pred = np.load(tmp_path / "probe-prediction.npy")
    assert summary["max_abs_delta"] == float(np.abs(delta).max()) > 0
    assert summary["delta_l2"] == float(np.sqrt((delta ** 2).sum()))
    assert list(pred.shape) == summary["prediction_shape"] == [2, 5, 16, 16]


def test_probe_shape_mismatch_is_a_data_error(workdir, teachers, tmp_path):
    np.save(tmp_path / "bad.npy", np.zeros((1, 8, 4, 4)))
    assert run(workdir, "graft-probe", "--checkpoint", str(teachers["seg"]),
               "--block", "2", "--features", str(tmp_path / "bad.npy"),
               "--out", str(tmp_path)) == 3


def test_probe_missing_features_file_is_a_data_error(workdir, teachers, tmp_path):
    assert run(workdir, "graft-probe", "--checkpoint", str(teachers["seg"]),
               "--block", "2", "--features", str(tmp_path / "no.npy"),
               "--out", str(tmp_path)) == 3


# ---------------------------------------------------------------------------
# usage plumbing

def test_bad_log_level_is_a_usage_error(workdir, tmp_path, monkeypatch):
    monkeypatch.setenv("AMALGAM_LOG", "loud")
    assert run(workdir, "gen-data", "--out", str(tmp_path)) == 2


def test_unknown_config_key_is_a_usage_error(workdir, tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("scene.height = 16\n")
    assert cli.main(["gen-data", "--config", str(bad),
                     "--out", str(tmp_path)]) == 2


def test_unknown_flag_exits_two(workdir, tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["gen-data", "--scene.height", "16", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_divergence_exits_four(workdir, tmp_path, monkeypatch):
    from amalgam.errors import TrainingDivergence

    def explode(*a, **k):
        raise TrainingDivergence("loss became non-finite",
                                 report={"epoch": 0, "batch": 1})

    monkeypatch.setattr(cli, "train_teacher", explode)
    assert run(workdir, "train-teacher", "--task", "seg",
               "--out", str(tmp_path)) == 4
