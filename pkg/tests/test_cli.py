import argparse
import json
import re
import subprocess
import sys

import pytest

from dualseg import cli

SMALL = {
    "pipeline": {"stage1_size": 32, "stage2_size": 32},
    "train": {"phase_a_epochs": 1, "phase_b_epochs": 1, "batch_size": 4},
}


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _error_line(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1, err
    m = re.fullmatch(r"dualseg: error\[([a-z-]+)\]: (.+)", lines[0])
    assert m, lines[0]
    return m.group(1), m.group(2)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Corpus, preprocessed frames and both checkpoints, built once through the CLI."""
    root = tmp_path_factory.mktemp("cli")
    conf = root / "conf.json"
    conf.write_text(json.dumps(SMALL))
    steps = [
        ["gen-data", "--n", 4, "--dims", 2, 64, 64, "--seed", 3, "--out", root / "corpus"],
        ["preprocess", "--data", root / "corpus", "--out", root / "prep", "--config", conf],
        ["train", "--stage", 1, "--data", root / "prep", "--out", root / "s1", "--config", conf, "--seed", 1],
        ["extract-roi", "--data", root / "prep", "--stage1-ckpt", root / "s1" / "stage1.ckpt",
         "--out", root / "roi", "--config", conf],
        ["train", "--stage", 2, "--data", root / "prep", "--stage1-roi", root / "roi" / "rois.json",
         "--out", root / "s2", "--config", conf, "--seed", 1],
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv]) == 0, argv
    return root, conf


def _subparsers():
    parser = cli.build_parser()
    action = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return action.choices


def test_help_lists_every_flag_with_default():
    commands = _subparsers()
    assert set(commands) == {"gen-data", "preprocess", "train", "infer", "extract-roi", "pipeline", "evaluate",
                             "cross-validate"}
    for name, sub in commands.items():
        text = " ".join(sub.format_help().split())
        for action in sub._actions:
            if action.dest == "help":
                continue
            flag = max(action.option_strings, key=len)
            assert flag in text, (name, flag)
            assert re.search(re.escape(action.help) + r" \(default: ", text), (name, flag)


def test_help_exits_zero():
    proc = subprocess.run([sys.executable, "-m", "dualseg", "cross-validate", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "--folds" in proc.stdout and "(default: 4)" in proc.stdout


def test_unknown_config_key(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"seed": 1, "learning_rate": 3}))
    code, _, err = run(["gen-data", "--config", conf, "--out", tmp_path / "o"], capsys)
    assert code == 1
    assert _error_line(err) == ("invalid-config", "unknown config keys: ['learning_rate']")


def test_invalid_nested_config(tmp_path, capsys):
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"pipeline": {"stage1_size": 33}}))
    (tmp_path / "corpus").mkdir()
    code, _, err = run(["preprocess", "--config", conf, "--data", tmp_path / "corpus", "--out", tmp_path / "o"], capsys)
    assert code == 1 and _error_line(err)[0] == "invalid-config"


def test_missing_inputs(tmp_path, capsys):
    code, _, err = run(["preprocess", "--data", tmp_path / "nope", "--out", tmp_path / "o"], capsys)
    assert code == 1 and _error_line(err)[0] == "missing-input"
    code, _, err = run(["preprocess", "--out", tmp_path / "o"], capsys)
    assert code == 2 and _error_line(err) == ("usage", "--data is required")


def test_usage_errors_one_line(capsys):
    code, _, err = run(["train"], capsys)
    assert code == 2 and _error_line(err)[0] == "usage"
    code, _, err = run(["no-such-command"], capsys)
    assert code == 2 and _error_line(err)[0] == "usage"


def test_stage2_requires_roi_manifest(workspace, capsys):
    root, conf = workspace
    code, _, err = run(["train", "--stage", 2, "--data", root / "prep", "--out", root / "x", "--config", conf], capsys)
    assert code == 2
    kind, msg = _error_line(err)
    assert kind == "usage" and msg.startswith("stage-2 requires ROI manifest")


def test_incompatible_checkpoint(workspace, capsys):
    root, conf = workspace
    code, _, err = run(["pipeline", "--data", root / "corpus", "--config", conf, "--out", root / "bad",
                        "--stage1-ckpt", root / "s2" / "stage2.ckpt", "--stage2-ckpt", root / "s2" / "stage2.ckpt"],
                       capsys)
    assert code == 1 and _error_line(err)[0] == "incompatible-checkpoint"


def test_workspace_outputs(workspace):
    root, _ = workspace
    assert len(json.loads((root / "corpus" / "manifest.json").read_text())["cases"]) == 4
    prep = json.loads((root / "prep" / "preprocessed.json").read_text())
    assert prep["crop_size"] == 376 and prep["entries"]
    e = prep["entries"][0]
    assert set(e) == {"case", "slice", "image", "crop", "orig_dims", "mask"}
    rois = json.loads((root / "roi" / "rois.json").read_text())["entries"]
    assert len(rois) == len(prep["entries"])
    for n in (1, 2):
        lines = (root / f"s{n}" / f"history_stage{n}.jsonl").read_text().splitlines()
        assert [json.loads(line)["phase"] for line in lines] == ["A", "B"]


def test_pipeline_and_evaluate(workspace, capsys):
    root, conf = workspace
    common = ["--data", root / "corpus", "--config", conf,
              "--stage1-ckpt", root / "s1" / "stage1.ckpt", "--stage2-ckpt", root / "s2" / "stage2.ckpt"]
    assert run(["pipeline", *common, "--out", root / "p1"], capsys)[0] == 0
    assert run(["pipeline", *common, "--out", root / "p2"], capsys)[0] == 0
    m1 = (root / "p1" / "predictions.json").read_bytes()
    assert m1 == (root / "p2" / "predictions.json").read_bytes()
    assert (root / "p1" / "report.json").read_bytes() == (root / "p2" / "report.json").read_bytes()
    report = json.loads((root / "p1" / "report.json").read_text())
    assert set(report) == {"per_slice", "per_case", "failed_slices"}
    assert report["per_case"]["dsc"]["n"] == 4

    code, out, _ = run(["evaluate", "--data", root / "corpus", "--pred", root / "p1", "--out", root / "eval.json"],
                       capsys)
    assert code == 0
    evaluated = json.loads(out)
    assert evaluated["per_slice"]["dsc"]["mean"] == pytest.approx(report["per_slice"]["dsc"]["mean"], abs=1e-9)


def test_infer_stages(workspace, capsys):
    root, conf = workspace
    assert run(["infer", "--stage", 1, "--data", root / "prep", "--ckpt", root / "s1" / "stage1.ckpt",
                "--out", root / "i1", "--config", conf], capsys)[0] == 0
    assert (root / "i1" / "rois.json").read_bytes() == (root / "roi" / "rois.json").read_bytes()
    code, _, err = run(["infer", "--stage", 2, "--data", root / "prep", "--ckpt", root / "s2" / "stage2.ckpt",
                        "--out", root / "i2", "--config", conf], capsys)
    assert code == 2 and "stage-2 requires ROI manifest" in err
    assert run(["infer", "--stage", 2, "--data", root / "prep", "--ckpt", root / "s2" / "stage2.ckpt",
                "--stage1-roi", root / "roi" / "rois.json", "--out", root / "i2", "--config", conf], capsys)[0] == 0
    assert json.loads((root / "i2" / "predictions.json").read_text())


def test_train_idempotent(workspace, capsys):
    root, conf = workspace
    argv = ["train", "--stage", 1, "--data", root / "prep", "--out", root / "again", "--config", conf, "--seed", 1]
    assert run(argv, capsys)[0] == 0
    assert (root / "again" / "stage1.ckpt").read_bytes() == (root / "s1" / "stage1.ckpt").read_bytes()
    assert (root / "again" / "history_stage1.jsonl").read_bytes() == (root / "s1" / "history_stage1.jsonl").read_bytes()


def test_config_seed_and_flag_override(workspace, capsys):
    root, _ = workspace
    conf = root / "seeded.json"
    conf.write_text(json.dumps({**SMALL, "seed": 1}))
    assert run(["train", "--stage", 1, "--data", root / "prep", "--out", root / "cfgseed", "--config", conf],
               capsys)[0] == 0
    assert (root / "cfgseed" / "stage1.ckpt").read_bytes() == (root / "s1" / "stage1.ckpt").read_bytes()
    assert run(["train", "--stage", 1, "--data", root / "prep", "--out", root / "flagseed", "--config", conf,
                "--seed=2"], capsys)[0] == 0
    assert (root / "flagseed" / "stage1.ckpt").read_bytes() != (root / "s1" / "stage1.ckpt").read_bytes()


def test_cross_validate_report(workspace, capsys):
    root, conf = workspace
    code, out, _ = run(["cross-validate", "--folds", 4, "--seed", 7, "--data", root / "corpus", "--config", conf,
                        "--out", root / "cv.json"], capsys)
    assert code == 0
    report = json.loads(out)
    assert report == json.loads((root / "cv.json").read_text())
    assert len(report["folds"]) == 4
    assert all(set(f["results"]) == {"full"} for f in report["folds"])
    assert set(report["aggregate"]["full"]["per_slice"]) >= {"dsc", "iou", "specificity", "precision", "recall"}
