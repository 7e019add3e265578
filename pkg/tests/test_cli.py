"""End-to-end checks of the command line on small configurations."""

import csv
import hashlib
import json
import os
from dataclasses import replace

import numpy as np
import pytest

from mskinv.cli import main
from mskinv.homogenize import HomogenizedMap
from mskinv.model_error import load_model
from mskinv.scenario import PRESETS, save_config

QUICK = """\
# functional-check run
epsilon = 1/16
h_obs = 1/128
h = 1/16
M = 32
J = 12
N = 10
seed = 5
"""


def _sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _manifest(out_dir):
    with open(os.path.join(out_dir, "manifest.json")) as fh:
        return json.load(fh)


@pytest.fixture(scope="module")
def quick_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "quick.cfg"
    path.write_text(QUICK)
    return str(path)


@pytest.fixture(scope="module")
def generated(quick_cfg, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("gen"))
    assert main(["generate", "--config", quick_cfg, "--out", out]) == 0
    return out


@pytest.fixture(scope="module")
def inverted(quick_cfg, generated, tmp_path_factory):
    out = str(tmp_path_factory.mktemp("inv"))
    rc = main(["invert", "--config", quick_cfg,
               "--data", os.path.join(generated, "observations.csv"),
               "--out", out, "--save-ensemble"])
    assert rc == 0
    return out


def test_generate_manifest_inventory_matches_files(generated):
    man = _manifest(generated)
    assert man["command"] == "generate"
    entry = man["files"]["observations.csv"]
    path = os.path.join(generated, "observations.csv")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["index", "value"]
    assert len(rows) - 1 == entry["rows"] == 36
    assert _sha(path) == entry["sha256"]


def test_generate_is_deterministic(quick_cfg, generated, tmp_path):
    out = str(tmp_path / "again")
    assert main(["generate", "--config", quick_cfg, "--out", out]) == 0
    assert (_sha(os.path.join(out, "observations.csv"))
            == _sha(os.path.join(generated, "observations.csv")))


def test_noise_override_zero_is_flagged(quick_cfg, generated, tmp_path):
    out = str(tmp_path / "clean")
    assert main(["generate", "--config", quick_cfg, "--out", out,
                 "--gamma", "0"]) == 0
    man = _manifest(out)
    assert man["noiseless"] is True
    assert man["gamma_used"] == 0.0
    # the noiseless draw must differ from the default noisy one
    assert (_sha(os.path.join(out, "observations.csv"))
            != _sha(os.path.join(generated, "observations.csv")))


def test_missing_required_key_names_it(tmp_path, capsys):
    cfg = tmp_path / "broken.cfg"
    cfg.write_text("h_obs = 1/128\nh = 1/16\n")
    assert main(["generate", "--config", str(cfg),
                 "--out", str(tmp_path / "o")]) == 2
    assert "epsilon" in capsys.readouterr().err


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "broken.cfg"
    cfg.write_text(QUICK + "warp = 9\n")
    assert main(["generate", "--config", str(cfg),
                 "--out", str(tmp_path / "o")]) == 2
    assert "warp" in capsys.readouterr().err


def test_missing_config_file_is_config_error(tmp_path):
    assert main(["generate", "--config", str(tmp_path / "nope.cfg"),
                 "--out", str(tmp_path / "o")]) == 2


def test_unknown_flag_exits_two(quick_cfg):
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--config", quick_cfg, "--frobnicate"])
    assert exc.value.code == 2


def test_invert_outputs_declared_inventory(inverted):
    man = _manifest(inverted)
    # 17x17 macro nodes, one diagnostics row per iteration plus the start
    assert man["files"]["sigma.csv"]["rows"] == 289
    assert man["files"]["diagnostics.csv"]["rows"] == 11
    assert man["files"]["ensemble.csv"]["rows"] == 12 * 32
    for name, entry in man["files"].items():
        path = os.path.join(inverted, name)
        assert _sha(path) == entry["sha256"]
    assert 0.0 < man["relative_error"] < 2.0


def test_invert_reports_misfit_decrease(inverted):
    with open(os.path.join(inverted, "diagnostics.csv"), newline="") as fh:
        rd = csv.reader(fh)
        next(rd)
        misfits = [float(row[1]) for row in rd]
    assert misfits[-1] < misfits[0]


def test_invert_deterministic_across_runs_and_threads(quick_cfg, generated,
                                                      inverted, tmp_path):
    data = os.path.join(generated, "observations.csv")
    rerun = str(tmp_path / "rerun")
    threaded = str(tmp_path / "threaded")
    assert main(["invert", "--config", quick_cfg, "--data", data,
                 "--out", rerun]) == 0
    assert main(["invert", "--config", quick_cfg, "--data", data,
                 "--out", threaded, "--threads", "4"]) == 0
    for name in ("sigma.csv", "diagnostics.csv"):
        ref = _sha(os.path.join(inverted, name))
        assert _sha(os.path.join(rerun, name)) == ref
        assert _sha(os.path.join(threaded, name)) == ref
    assert (_manifest(rerun)["files"]["sigma.csv"]["sha256"]
            == _manifest(inverted)["files"]["sigma.csv"]["sha256"])


def test_data_length_mismatch_is_numeric_failure(quick_cfg, generated,
                                                 tmp_path):
    src = os.path.join(generated, "observations.csv")
    with open(src, newline="") as fh:
        rows = list(csv.reader(fh))
    short = tmp_path / "short.csv"
    with open(short, "w", newline="") as fh:
        csv.writer(fh).writerows(rows[:-5])
    assert main(["invert", "--config", quick_cfg, "--data", str(short),
                 "--out", str(tmp_path / "o")]) == 3


def test_malformed_data_file_is_config_error(quick_cfg, tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("x,y,value\n0.0,0.0,1.0\n")
    assert main(["invert", "--config", quick_cfg, "--data", str(bad),
                 "--out", str(tmp_path / "o")]) == 2


def test_runaway_data_is_numeric_failure(quick_cfg, generated, tmp_path):
    # scale the observations far outside the reachable flux range; the
    # update throws particles out of the tabulated parameter interval
    src = os.path.join(generated, "observations.csv")
    with open(src, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        rows = [(i, float(v) * 1e6) for i, v in rd]
    huge = tmp_path / "huge.csv"
    with open(huge, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)
    assert main(["invert", "--config", quick_cfg, "--data", str(huge),
                 "--out", str(tmp_path / "o")]) == 3


def test_more_particles_estimate_better(tmp_path):
    """Paired runs differing only in ensemble size, shared data."""
    base = replace(PRESETS["desk"], seed=2)
    data_dir = str(tmp_path / "data")
    cfg_small = tmp_path / "small.cfg"
    cfg_large = tmp_path / "large.cfg"
    save_config(replace(base, J=10), cfg_small)
    save_config(base, cfg_large)
    assert main(["generate", "--config", str(cfg_large),
                 "--out", data_dir]) == 0
    data = os.path.join(data_dir, "observations.csv")
    errs = {}
    for name, cfg in (("small", cfg_small), ("large", cfg_large)):
        out = str(tmp_path / name)
        assert main(["invert", "--config", str(cfg), "--data", data,
                     "--out", out]) == 0
        errs[name] = _manifest(out)["relative_error"]
    assert errs["small"] > errs["large"]


def test_study_command_writes_report(tmp_path):
    out = str(tmp_path / "study")
    assert main(["study", "--kind", "fem_rate", "--out", out]) == 0
    man = _manifest(out)
    assert man["study"]["passed"] is True
    with open(os.path.join(out, "study_fem_rate.csv"), newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) - 1 == man["files"]["study_fem_rate.csv"]["rows"] == 4
    with open(os.path.join(out, "summary.csv"), newline="") as fh:
        keys = [row[0] for row in csv.reader(fh)]
    assert "passed" in keys


def test_homog_table_roundtrips(quick_cfg, tmp_path):
    out = str(tmp_path / "table")
    assert main(["homog-table", "--config", quick_cfg, "--out", out,
                 "--n-cell", "16"]) == 0
    man = _manifest(out)
    path = os.path.join(out, "homog_table.csv")
    loaded = HomogenizedMap.from_csv(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert len(rows) - 1 == man["files"]["homog_table.csv"]["rows"]
    mid = 0.5 * (loaded.lo + loaded.hi)
    assert np.all(np.isfinite(loaded(np.array([mid]))))


def test_model_error_estimate_saves_loadable_model(tmp_path):
    cfg_path = tmp_path / "me.cfg"
    cfg_path.write_text("epsilon = 1/4\nh_obs = 1/32\nh = 1/16\n"
                        "M = 16\nJ = 8\nN = 4\nN_E = 4\nseed = 3\n")
    out = str(tmp_path / "model")
    assert main(["model-error-estimate", "--config", str(cfg_path),
                 "--out", out]) == 0
    man = _manifest(out)
    assert man["model"]["N_E"] == 4
    assert man["model"]["C_E"] > 0
    model = load_model(out)
    assert model.mean.shape == (36,)
    assert model.n_samples == 4
    # the saved model drives a corrected inversion directly
    data_dir = str(tmp_path / "data")
    assert main(["generate", "--config", str(cfg_path),
                 "--out", data_dir]) == 0
    inv = str(tmp_path / "inv")
    rc = main(["invert", "--config", str(cfg_path), "--model-error",
               "offline", "--model", out, "--data",
               os.path.join(data_dir, "observations.csv"), "--out", inv])
    assert rc == 0
    assert _manifest(inv)["model_error"] == "offline"
