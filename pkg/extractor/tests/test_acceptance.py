"""Extractor acceptance: extract-verify round trip on the 20-image fixture,
with the classifier package consuming the file through its public CLI."""

import subprocess
import sys

from feature_export import bncf
from feature_export.cli import main as extract_cli
from feature_export.extract import discover_classes, list_images


def run_primary(*args):
    """The classifier CLI, exercised as an external interface."""
    return subprocess.run(
        [sys.executable, "-m", "bnc.cli", *args], capture_output=True, text=True
    )


def test_extract_verify_roundtrip_and_primary_interop(fixture_tree, tmp_path, capsys):
    out = tmp_path / "art.bncf"
    assert extract_cli([
        "extract", "--root", str(fixture_tree), "--domain", "art",
        "--out", str(out), "--weights", "random", "--seed", "0",
    ]) == 0
    assert extract_cli(["verify", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "rows 20, dim 2048, classes 5" in printed

    # row order matches sorted paths
    _, labels, _, _ = bncf.read(out)
    expected = [label for _, label in list_images(fixture_tree, discover_classes(fixture_tree))]
    assert labels.tolist() == expected

    # the primary artifact trains on and evaluates the file without error
    ckpt = tmp_path / "m.ckpt"
    trained = run_primary(
        "train-source", "--source", str(out), "--model-out", str(ckpt),
        "--epochs-source", "1", "--batch-size", "8", "--hidden-dim", "16",
    )
    assert trained.returncode == 0, trained.stderr
    evaluated = run_primary("eval", "--model", str(ckpt), "--data", str(out))
    assert evaluated.returncode == 0, evaluated.stderr
    assert "accuracy" in evaluated.stdout
    print("PASS extractor round-trip: 20-image fixture extracted, verified, and "
          "consumed by the classifier CLI; row order matches sorted paths")
