"""Exported bundles must replay torch logits through the consuming CLI.

The only bridge here is the file formats plus the installed ``dynlin``
command; nothing from the consuming library is imported.
"""

import shutil
import subprocess

import numpy as np
import pytest
import torch
from torch import nn

from dynlin_exporter import (
    batch_to_tokens,
    build_attention_demo,
    build_toy_mlp,
    export_bundle,
    torch_logits,
    train_toy_cnn,
    write_grid,
)

needs_cli = pytest.mark.skipif(shutil.which("dynlin") is None,
                               reason="consuming CLI is not installed")


def run_cli(*args):
    proc = subprocess.run(["dynlin", *args], capture_output=True, text=True)
    return proc.returncode, proc.stdout, proc.stderr


def verified_logits(bundle, grid):
    code, out, err = run_cli("verify", "--model", str(bundle),
                             "--input", str(grid))
    assert code == 0, err or out
    vals = [float(line.split()[2].split("=", 1)[1])
            for line in out.splitlines() if line.startswith("class ")]
    assert vals, out
    return np.array(vals)


@needs_cli
class TestReplayParity:
    def check(self, model, block, tokens, bundle_dir, grid_path):
        export_bundle(model, block, bundle_dir)
        write_grid(grid_path, tokens, block)
        want = torch_logits(model, tokens, block)
        got = verified_logits(bundle_dir, grid_path)
        np.testing.assert_allclose(got, want, atol=1e-4)

    def test_mlp_with_gelu(self, tmp_path):
        block = {"tokens": 1, "channels": 4}
        x = np.random.default_rng(1).standard_normal((1, 4))
        self.check(build_toy_mlp(0), block, x,
                   tmp_path / "bundle", tmp_path / "x.grid")

    def test_attention_stack(self, tmp_path):
        block = {"tokens": 5, "channels": 4}
        x = np.random.default_rng(2).standard_normal((5, 4))
        self.check(build_attention_demo(0), block, x,
                   tmp_path / "bundle", tmp_path / "x.grid")

    def test_conv_batchnorm_stack(self, tmp_path):
        torch.manual_seed(4)
        bn = nn.BatchNorm2d(3)
        bn.running_mean += torch.randn(3) * 0.2
        bn.running_var *= torch.rand(3) + 0.5
        model = nn.Sequential(
            nn.Conv2d(1, 3, 3, padding=1), bn, nn.ReLU(),
            nn.AvgPool2d(2), nn.Flatten(), nn.Linear(27, 2)).eval()
        block = {"height": 6, "width": 6, "channels": 1}
        x = np.random.default_rng(3).standard_normal((36, 1))
        self.check(model, block, x, tmp_path / "bundle", tmp_path / "x.grid")

    def test_trained_cnn_and_oracle(self, tmp_path):
        model, acc, x_test, _ = train_toy_cnn(seed=0, steps=300)
        assert acc >= 0.95
        block = {"height": 8, "width": 8, "channels": 1}
        tokens = batch_to_tokens(x_test[0])
        bundle, grid = tmp_path / "bundle", tmp_path / "x.grid"
        self.check(model, block, tokens, bundle, grid)
        code, out, err = run_cli("oracle-check", "--model", str(bundle),
                                 "--input", str(grid))
        assert code == 0, err or out
        code, _, err = run_cli("explain", "--model", str(bundle),
                               "--input", str(grid), "--class", "0",
                               "--out", str(tmp_path / "report"))
        assert code == 0, err
        assert (tmp_path / "report" / "attribution.grid").is_file()
        assert (tmp_path / "report" / "heatmap.png").is_file()
