"""CLI wiring: config handling, subcommand smoke runs, exit codes, and
determinism under a fixed seed."""

import numpy as np
import pytest

from volblend import cli
from volblend import config as vc
from volblend import mesh as vm
from volblend.errors import FormatError


# ---------------------------------------------------------------------------
# config


def test_config_defaults_hash_stable():
    a = vc.load_config(None)
    b = vc.load_config(None)
    assert a.hash() == b.hash()
    assert len(a.hash()) == 12


def test_config_rejects_unknown_key(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[solver_weights]\nw_nonsense = 1\n")
    with pytest.raises(FormatError, match="w_nonsense"):
        vc.load_config(path)


def test_config_rejects_unknown_section(tmp_path):
    path = tmp_path / "bad.ini"
    path.write_text("[rendering]\nfoo = 1\n")
    with pytest.raises(FormatError, match="rendering"):
        vc.load_config(path)


def test_config_override_changes_hash(tmp_path):
    path = tmp_path / "c.ini"
    path.write_text("[solver_weights]\nw_vol = 500\n")
    cfg = vc.load_config(path)
    assert cfg["solver_weights"]["w_vol"] == 500
    assert cfg.hash() != vc.load_config(None).hash()
    # paper-table defaults are greppable in the effective config
    out = tmp_path / "eff.ini"
    vc.write_config(cfg, out)
    text = out.read_text()
    assert "w_str = 100.0" in text
    assert "w_rect = 1.0" in text


def test_config_round_trip(tmp_path):
    cfg = vc.load_config(None)
    path = tmp_path / "eff.ini"
    vc.write_config(cfg, path)
    back = vc.load_config(path)
    assert back.hash() == cfg.hash()


# ---------------------------------------------------------------------------
# CLI end-to-end (level 0, small numbers)


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    return tmp_path_factory.mktemp("cli")


@pytest.fixture(scope="module")
def template_dir(workdir):
    out = workdir / "template"
    assert cli.main(["template", "--level", "0", "--out", str(out),
                     "--seed", "0"]) == 0
    return out


@pytest.fixture(scope="module")
def regressor_path(workdir, template_dir):
    out = workdir / "reg.vbsr"
    assert cli.main(["train-regressor", "--lhm", str(template_dir),
                     "--instances", "10", "--out", str(out), "--seed", "1"]) == 0
    return out


def test_template_output_reloadable(template_dir):
    from volblend import lhm as vl
    model = vl.load_lhm(template_dir)
    model.validate()
    assert model.skin_wrap.n_faces == 320
    manifest = (template_dir / "manifest.txt").read_text()
    assert "stamp = config" in manifest


def test_template_level_quadruples_face_count(workdir):
    out = workdir / "template_l1"
    assert cli.main(["template", "--level", "1", "--out", str(out)]) == 0
    from volblend import lhm as vl
    model = vl.load_lhm(out)
    assert model.skin_wrap.n_faces == 4 * 320


def test_fit_self_and_invalid_topology(workdir, template_dir, regressor_path):
    out = workdir / "fit_self"
    skin_obj = workdir / "skin.obj"
    from volblend import lhm as vl
    template = vl.load_lhm(template_dir)
    vm.write_obj(template.skin, skin_obj)
    assert cli.main(["fit", "--lhm", str(template_dir), "--regressor",
                     str(regressor_path), "--skin", str(skin_obj),
                     "--out", str(out)]) == 0
    fitted = vl.load_lhm(out)
    fitted.validate()

    bad_obj = workdir / "bad.obj"
    vm.write_obj(vm.icosphere(1), bad_obj)
    rc = cli.main(["fit", "--lhm", str(template_dir), "--regressor",
                   str(regressor_path), "--skin", str(bad_obj),
                   "--out", str(workdir / "nope")])
    assert rc == 2  # validation failure exit code


def test_simulate_round_trip_and_energy_log(workdir, template_dir):
    from volblend import lhm as vl
    template = vl.load_lhm(template_dir)
    target_obj = workdir / "target.obj"
    verts = template.skin.vertices.copy()
    dirs = verts / np.linalg.norm(verts, axis=1, keepdims=True)
    bump = np.exp(-0.5 * (np.arccos(np.clip(dirs @ np.array([0, -0.4, 0.9])
                                            / np.linalg.norm([0, -0.4, 0.9]),
                                            -1, 1)) / 0.3) ** 2)
    vm.write_obj(vm.TriangleMesh(verts + 3.0 * bump[:, None] * dirs,
                                 template.skin.faces), target_obj)

    inv_out = workdir / "sim_inv"
    assert cli.main(["simulate-inverse", "--lhm", str(template_dir),
                     "--target", str(target_obj), "--out", str(inv_out)]) == 0
    assert (inv_out / "state.vbsv").exists()
    energy = (inv_out / "energy.csv").read_text().splitlines()
    assert energy[0].startswith("# config")
    assert energy[1].split(",")[0] == "iter"

    fwd_out = workdir / "sim_fwd"
    assert cli.main(["simulate-forward", "--lhm", str(template_dir),
                     "--state", str(inv_out / "state.vbsv"),
                     "--out", str(fwd_out)]) == 0
    rebuilt = vm.read_obj(fwd_out / "skin.obj")
    target = vm.read_obj(target_obj)
    err = np.linalg.norm(rebuilt.vertices - target.vertices, axis=1).mean()
    assert err <= 2.0


def test_missing_file_gives_io_exit_code(workdir):
    rc = cli.main(["simulate-forward", "--lhm", str(workdir / "nonexistent"),
                   "--state", "nope.vbsv", "--out", str(workdir / "x")])
    assert rc == 4


@pytest.mark.slow
def test_end_to_end_smoke_under_ten_minutes(workdir, template_dir, regressor_path):
    import time
    t0 = time.time()
    data_path = workdir / "smoke.npz"
    assert cli.main(["gendata", "--lhm", str(template_dir), "--regressor",
                     str(regressor_path), "--identities", "5",
                     "--expressions", "2", "--out", str(data_path),
                     "--seed", "3"]) == 0
    model_path = workdir / "smoke.vbsn"
    log_path = workdir / "smoke_log.csv"
    assert cli.main(["train", "--dataset", str(data_path), "--steps", "200",
                     "--out", str(model_path), "--log", str(log_path),
                     "--seed", "3"]) == 0
    metrics_path = workdir / "metrics.csv"
    assert cli.main(["eval", "--model", str(model_path), "--dataset",
                     str(data_path), "--out", str(metrics_path),
                     "--latency-calls", "20", "--seed", "3"]) == 0
    text = metrics_path.read_text()
    assert "mean_error_mm" in text
    assert "latency_mean_ms" in text

    # infer command round trip on one instance
    data = np.load(data_path)
    from volblend import lhm as vl
    template = vl.load_lhm(template_dir)
    neutral_obj = workdir / "inf_neutral.obj"
    linear_obj = workdir / "inf_linear.obj"
    vm.write_obj(vm.TriangleMesh(data["neutral"][0].reshape(-1, 3),
                                 template.skin.faces), neutral_obj)
    vm.write_obj(vm.TriangleMesh(
        (data["neutral"][0] + data["linear_delta"][0]).reshape(-1, 3),
        template.skin.faces), linear_obj)
    assert cli.main(["infer", "--model", str(model_path), "--neutral",
                     str(neutral_obj), "--linear", str(linear_obj),
                     "--out", str(workdir / "corrected.obj")]) == 0
    assert time.time() - t0 < 600

    # determinism: retraining with the same seed reproduces the loss curve
    log2_path = workdir / "smoke_log2.csv"
    assert cli.main(["train", "--dataset", str(data_path), "--steps", "200",
                     "--out", str(workdir / "smoke2.vbsn"),
                     "--log", str(log2_path), "--seed", "3"]) == 0
    assert log_path.read_text() == log2_path.read_text()
