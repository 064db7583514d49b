import json
import subprocess
import sys

import pytest

from mmslt.cli import main

SMALL = ["--set", "mmlp.epochs=1", "--set", "slt.epochs=1", "--set", "decode.beam_size=2"]


def _run(cmd, run_dir, *extra):
    return main([cmd, "--run-dir", str(run_dir), *extra])


def _err(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


def test_help_exits_zero(capsys):
    assert main(["--help"]) == 0
    assert main(["pretrain", "--help"]) == 0


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "mmslt", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "make-toy" in r.stdout


def test_usage_errors(tmp_path, capsys):
    assert main(["nope"]) == 2
    assert main(["pretrain"]) == 2     # --run-dir missing
    assert _err(capsys)["exit_code"] == 2


def test_bad_config_exits_3(tmp_path, capsys):
    assert _run("make-toy", tmp_path, "--preset", "toy", "--set", "slt.bogus=1") == 3
    assert _err(capsys)["error"] == "config"
    bad = tmp_path / "bad.yaml"
    bad.write_text("mmlp:\n  lr_max: fast\n")
    assert _run("make-toy", tmp_path / "r", "--config", str(bad)) == 3


def test_missing_prerequisites_exit_4(tmp_path, capsys):
    assert _run("pretrain", tmp_path, "--preset", "toy") == 4
    assert _run("make-toy", tmp_path, "--n-videos", "40", "--vocab-size", "8", "--max-len", "4") == 0
    assert _run("finetune", tmp_path) == 4
    assert "stage-1" in _err(capsys)["message"]
    assert _run("translate", tmp_path) == 4
    assert _run("evaluate", tmp_path) == 4
    assert _run("build-feature-store", tmp_path) == 4


def test_overwrite_needs_force(tmp_path, capsys):
    args = ["--n-videos", "40", "--vocab-size", "8", "--max-len", "4"]
    assert _run("make-toy", tmp_path, *args) == 0
    assert _run("make-toy", tmp_path, *args) == 2
    assert "--force" in _err(capsys)["message"]
    assert _run("make-toy", tmp_path, *args, "--force") == 0
    # a different configuration for an existing run is refused too
    assert _run("make-toy", tmp_path, *args, "--set", "slt.epochs=2") == 3


def test_small_pipeline(tmp_path, capsys):
    assert _run("make-toy", tmp_path, "--preset", "toy", *SMALL,
                "--n-videos", "40", "--vocab-size", "8", "--max-len", "4", "--toy-seed", "3") == 0
    for cmd in ("gen-desc", "build-feature-store", "pretrain", "finetune", "translate", "evaluate"):
        assert _run(cmd, tmp_path) == 0, cmd
    capsys.readouterr()
    # second description pass is served entirely from the cache
    assert _run("gen-desc", tmp_path) == 0
    out = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert out["client_calls"] == 0 and out["new"] == 0
    rep = json.loads((tmp_path / "outputs" / "eval_test.json").read_text())
    for k in ("bleu1", "bleu4", "rouge_l"):
        assert 0.0 <= rep[k] <= 100.0
    for name in ("eval_test.txt", "eval_test.tsv", "eval_test.png"):
        assert (tmp_path / "outputs" / name).exists()
    assert (tmp_path / "logs" / "mmlp.png").exists()
    rows = (tmp_path / "outputs" / "translations_test.jsonl").read_text().splitlines()
    assert len(rows) == 4 and {"id", "hypothesis", "reference"} <= set(json.loads(rows[0]))
    # stale feature store: a changed cache invalidates it
    cache = tmp_path / "cache" / "descriptions.jsonl"
    lines = cache.read_text().splitlines()
    first = json.loads(lines[0])
    first["text"] += " edited"
    cache.write_text("\n".join([json.dumps(first)] + lines[1:]) + "\n")
    assert _run("pretrain", tmp_path, "--force") == 4
    assert "rebuild" in _err(capsys)["message"]
