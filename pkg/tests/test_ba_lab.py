"""Test the pose-refinement experiments and coarse-to-fine encodings."""

import os
import tempfile
from pathlib import Path

import numpy as np
import pandas as pd
import pytest

from dbarf.core.autodiff import Tape, Tensor, backward
from dbarf.core.ba_lab import (
    cmd_ba_lab,
    coarse_to_fine_weights,
    encoding_alpha,
    encoding_gradient_scale,
    monotone_fraction,
    positional_encoding,
)
from dbarf.core.models import TRAJECTORY_COLUMNS
from dbarf.core.training import cmd_pretrain

from .conftest import make_tiny_config


def test_coarse_to_fine_weights():
    np.testing.assert_array_equal(coarse_to_fine_weights(0.0, 3), [0.0, 0.0, 0.0])
    np.testing.assert_allclose(coarse_to_fine_weights(1.5, 3), [1.0, 0.5, 0.0])
    np.testing.assert_array_equal(coarse_to_fine_weights(3.0, 3), [1.0, 1.0, 1.0])


def test_encoding_alpha_schedule():
    assert encoding_alpha(0.05, 6, [0.1, 0.5]) == 0.0
    assert encoding_alpha(0.3, 6, [0.1, 0.5]) == pytest.approx(3.0)
    assert encoding_alpha(0.9, 6, [0.1, 0.5]) == 6.0


def test_positional_encoding_layout():
    x = np.array([[0.25, 0.0, 1.0]])
    out = positional_encoding(Tensor(x), 2).data
    assert out.shape == (1, 3 + 12)
    np.testing.assert_array_equal(out[0, :3], x[0])
    np.testing.assert_allclose(out[0, 3:6], np.cos(np.pi * x[0]), atol=1e-12)
    np.testing.assert_allclose(out[0, 12:15], np.sin(2 * np.pi * x[0]), atol=1e-12)


def test_masked_bands_pass_no_gradient():
    rng = np.random.default_rng(0)
    x = Tensor(rng.uniform(-1, 1, (4, 3)), requires_grad=True)
    with Tape() as tape:
        out = positional_encoding(x, 3, alpha=1.0)
    seed = np.zeros(out.shape)
    seed[:, 9:] = rng.standard_normal((4, 12))
    (grad,) = backward(tape, out, seed=seed, inputs=[x])
    np.testing.assert_array_equal(grad, 0.0)

    seed = np.zeros(out.shape)
    seed[:, 3:9] = 1.0
    (grad,) = backward(tape, out, seed=seed, inputs=[x])
    assert np.abs(grad).sum() > 0


def test_encoding_gradient_scale_grows_geometrically():
    scale = encoding_gradient_scale(4)
    np.testing.assert_allclose(scale, np.pi * np.array([1, 2, 4, 8]))


def test_monotone_fraction():
    rows = [
        {"target": 0, "iteration": i, "rot_err_deg": v} for i, v in enumerate([3.0, 2.0, 1.0])
    ] + [{"target": 1, "iteration": i, "rot_err_deg": v} for i, v in enumerate([1.0, 2.0, 0.5])]
    assert monotone_fraction(rows) == 0.5
    assert np.isnan(monotone_fraction([]))


def test_unknown_mode_and_missing_checkpoint():
    config = make_tiny_config()
    with tempfile.TemporaryDirectory() as tmpdir:
        with pytest.raises(ValueError):
            cmd_ba_lab(None, 0, "newton", config, tmpdir)
        with pytest.raises(ValueError):
            cmd_ba_lab(None, 0, "direct", config, tmpdir)


def test_modes_merge_into_one_trajectory_file():
    config = make_tiny_config(pretrain_iters=0)
    with tempfile.TemporaryDirectory() as tmpdir:
        ckpt = cmd_pretrain(config, os.path.join(tmpdir, "pre"))
        out = Path(tmpdir) / "lab"

        barf = cmd_ba_lab(None, 0, "barf-pe", config, out)
        assert list(barf.columns) == TRAJECTORY_COLUMNS
        assert sorted(barf["iteration"]) == list(range(config.ba_lab_steps + 1))
        assert (out / "ba_lab_barf-pe.png").exists()

        direct = cmd_ba_lab(ckpt, 0, "direct", config, out)
        assert set(direct["mode"]) == {"barf-pe", "direct"}
        first = direct[direct["mode"] == "direct"].iloc[0]
        assert first["iteration"] == 0 and first["rot_err_deg"] >= 0.0

        learned = cmd_ba_lab(ckpt, 0, "dbarf", config, out)
        rows = learned[learned["mode"] == "dbarf"]
        assert set(rows["iteration"]) == set(range(config.t_max + 1))
        assert set(rows["target"]) == set(range(config.n_views_per_scene))

        again = cmd_ba_lab(None, 0, "barf-pe", config, out)
        on_disk = pd.read_csv(out / "trajectories.csv")
        assert len(on_disk) == len(again)
        assert (on_disk["mode"] == "barf-pe").sum() == config.ba_lab_steps + 1
        assert set(on_disk["mode"]) == {"barf-pe", "direct", "dbarf"}


def test_barf_pe_without_steps_writes_initial_row():
    config = make_tiny_config(ba_lab_steps=0)
    with tempfile.TemporaryDirectory() as tmpdir:
        df = cmd_ba_lab(None, 0, "barf-pe", config, tmpdir)
        assert len(df) == 1
        assert df.iloc[0]["iteration"] == 0
        assert os.path.exists(os.path.join(tmpdir, "trajectories.csv"))
