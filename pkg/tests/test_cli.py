import argparse
import json
import subprocess
import sys

import numpy as np
import pytest

from dynct import __version__
from dynct.cli import EXIT_NUMERIC, EXIT_OK, EXIT_TOLERANCE, EXIT_USAGE, build_parser, main
from dynct.radon import read_sinogram
from dynct.volumes import read_volume


@pytest.fixture
def spec_file(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text(json.dumps({"preset": "shepp_logan", "dim": 2,
                                "motion": {"kind": "translate", "velocity": [0.1, 0, 0]}}))
    return path


def run(*argv):
    return main([str(a) for a in argv])


def _manifest(path):
    return json.loads(path.with_name(path.stem + ".manifest.json").read_text())


# --- parser ------------------------------------------------------------------------


def _subparsers(parser):
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices
    return {}


def test_help_documents_every_flag():
    parser = build_parser()
    parsers = {"": parser, **_subparsers(parser)}
    assert set(parsers) >= {"", "phantom", "project", "reconstruct", "baseline", "render", "metrics",
                            "gradcheck", "adjoint-test"}
    for name, p in parsers.items():
        text = p.format_help()
        for action in p._actions:
            if isinstance(action, argparse._SubParsersAction):
                continue
            assert action.help, f"{name}: {action.option_strings or action.dest} has no help"
            for flag in action.option_strings:
                assert flag in text, f"{name}: {flag} missing from --help"


def test_version_via_module():
    out = subprocess.run([sys.executable, "-m", "dynct", "--version"], capture_output=True, text=True)
    assert out.returncode == 0 and __version__ in out.stdout


# --- phantom / project ----------------------------------------------------------------


def test_phantom_volumetric_frames(tmp_path):
    spec = tmp_path / "s3.json"
    spec.write_text(json.dumps({"preset": "shepp_logan", "dim": 3,
                                "motion": {"kind": "squeeze", "axis": "y", "peak": 0.2}}))
    out = tmp_path / "gt.f32"
    assert run("phantom", "--spec", spec, "--side", 80, "--frames", 10, "--out", out) == EXIT_OK
    seq = read_volume(out)
    assert seq.shape == (10, 80, 80, 80)
    m = _manifest(out)
    assert m["command"] == "phantom" and m["version"] == __version__
    assert m["config"]["side"] == 80 and m["outputs"] == [str(out)]


def test_phantom_single_frame_is_static(tmp_path, spec_file):
    out = tmp_path / "v.f32"
    assert run("phantom", "--spec", spec_file, "--side", 16, "--frames", 1, "--out", out) == EXIT_OK
    assert read_volume(out).shape == (1, 16, 16)


def test_phantom_missing_spec(tmp_path):
    assert run("phantom", "--spec", tmp_path / "nope.json", "--side", 16, "--out", tmp_path / "v") == EXIT_USAGE


def test_phantom_invalid_spec(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"preset": "shepp_logan", "motion": {"kind": "translate",
                                                                   "velocity": [0.9, 0, 0]}}))
    assert run("phantom", "--spec", bad, "--side", 16, "--out", tmp_path / "v") == EXIT_USAGE


@pytest.mark.parametrize("stop,turns", [(180, 1), (720, 4)])
def test_project_schedules(tmp_path, spec_file, stop, turns):
    scene = tmp_path / "gt.f32"
    run("phantom", "--spec", spec_file, "--side", 32, "--frames", 10, "--out", scene)
    sino = tmp_path / "s.f32"
    assert run("project", "--vol", scene, "--arc", 0, stop, "--n", 90, "--out", sino) == EXIT_OK
    s = read_sinogram(sino)
    assert s.shape == (90, 1, 32)
    assert s.schedule.angles_deg[-1] == stop
    assert np.sum(np.diff(np.floor(s.schedule.angles_deg / 180.0)) > 0) == turns


def test_project_static_rows_match_per_angle(tmp_path):
    spec = tmp_path / "s.json"
    spec.write_text(json.dumps({"preset": "shepp_logan", "dim": 2}))
    scene = tmp_path / "gt.f32"
    run("phantom", "--spec", spec, "--side", 24, "--frames", 1, "--out", scene)
    a, b = tmp_path / "a.f32", tmp_path / "b.f32"
    run("project", "--vol", scene, "--arc", 0, 180, "--n", 6, "--endpoint-exclusive", "--out", a)
    run("project", "--vol", scene, "--arc", 180, 360, "--n", 6, "--endpoint-exclusive", "--out", b)
    # a parallel-beam view at theta + 180 is the mirrored view at theta
    np.testing.assert_allclose(read_sinogram(b).data, read_sinogram(a).data[:, :, ::-1], atol=1e-5)


def test_project_exact_times_mismatch(tmp_path, spec_file):
    scene = tmp_path / "gt.f32"
    run("phantom", "--spec", spec_file, "--side", 16, "--frames", 10, "--out", scene)
    code = run("project", "--vol", scene, "--n", 90, "--exact-times", "--out", tmp_path / "s.f32")
    assert code == EXIT_USAGE


def test_project_noise_is_seeded(tmp_path, spec_file):
    scene = tmp_path / "gt.f32"
    run("phantom", "--spec", spec_file, "--side", 16, "--frames", 2, "--out", scene)
    outs = []
    for name, seed in (("a", 1), ("b", 1), ("c", 2)):
        out = tmp_path / f"{name}.f32"
        run("project", "--vol", scene, "--n", 2, "--noise", 0.01, "--seed", seed, "--out", out)
        outs.append(read_sinogram(out).data)
    assert outs[0].tobytes() == outs[1].tobytes() != outs[2].tobytes()


# --- baseline / metrics ----------------------------------------------------------------


@pytest.fixture(scope="module")
def static128(tmp_path_factory):
    d = tmp_path_factory.mktemp("static")
    spec = d / "s.json"
    spec.write_text(json.dumps({"preset": "shepp_logan", "dim": 2}))
    run("phantom", "--spec", spec, "--side", 128, "--frames", 1, "--supersample", "--out", d / "gt.f32")
    run("project", "--vol", d / "gt.f32", "--n", 180, "--endpoint-exclusive", "--out", d / "sino.f32")
    return d


def test_baseline_fbp_threshold(static128, capsys):
    out = static128 / "fbp.f32"
    code = run("baseline", "fbp", "--sino", static128 / "sino.f32", "--gt", static128 / "gt.f32",
               "--min-psnr", 25, "--out", out)
    assert code == EXIT_OK
    assert "PSNR" in capsys.readouterr().out
    assert _manifest(out)["psnr_db"] >= 25.0


def test_baseline_tolerance_breach(static128):
    code = run("baseline", "sart", "--sino", static128 / "sino.f32", "--iters", 1, "--gt",
               static128 / "gt.f32", "--min-psnr", 99, "--out", static128 / "sart.f32")
    assert code == EXIT_TOLERANCE


def test_metrics_command(static128, capsys):
    run("baseline", "fbp", "--sino", static128 / "sino.f32", "--out", static128 / "f.f32")
    report = static128 / "m.csv"
    code = run("metrics", "--est", static128 / "f.f32", "--gt", static128 / "gt.f32", "--label", "fbp",
               "--out", report)
    assert code == EXIT_OK
    lines = report.read_text().splitlines()
    assert lines[0] == "method,frame,t,psnr_db,ssim"
    assert lines[-1].startswith("fbp,mean,")
    assert "fbp" in capsys.readouterr().out


def test_metrics_shape_mismatch(static128, tmp_path, spec_file):
    run("phantom", "--spec", spec_file, "--side", 16, "--frames", 1, "--out", tmp_path / "small.f32")
    code = run("metrics", "--est", tmp_path / "small.f32", "--gt", static128 / "gt.f32", "--out",
               tmp_path / "m.csv")
    assert code == EXIT_USAGE


# --- reconstruct / render ----------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_artifact(tmp_path_factory):
    d = tmp_path_factory.mktemp("recon")
    spec = d / "s.json"
    spec.write_text(json.dumps({"preset": "shepp_logan", "dim": 2,
                                "motion": {"kind": "translate", "velocity": [0.1, 0, 0]}}))
    run("phantom", "--spec", spec, "--side", 16, "--frames", 10, "--out", d / "gt.f32")
    run("project", "--vol", d / "gt.f32", "--n", 12, "--out", d / "sino.f32")
    cfg = d / "c.json"
    cfg.write_text(json.dumps({"iters": 12, "m": 8, "hidden": 16, "k": 3, "alpha_schedule": [[0, 2]],
                               "angles_per_batch": 4}))
    code = run("--threads", 1, "reconstruct", "--sino", d / "sino.f32", "--config", cfg, "--out",
               d / "art", "--log-every", 5)
    assert code == EXIT_OK
    return d


def test_reconstruct_writes_artifact(tiny_artifact):
    art = tiny_artifact / "art"
    names = {p.name for p in art.iterdir()}
    assert {"inr.bin", "inr.json", "motion.bin", "motion.json", "config.json", "schedule.json",
            "loss_history.csv", "manifest.json"} <= names
    m = json.loads((art / "manifest.json").read_text())
    assert m["command"] == "reconstruct" and len(m["config_digest"]) == 12


def test_reconstruct_rerun_from_manifest_is_bitwise(tiny_artifact, tmp_path):
    m = json.loads((tiny_artifact / "art" / "manifest.json").read_text())
    argv = list(m["argv"])
    argv[argv.index("--out") + 1] = str(tmp_path / "again")
    assert main(argv) == EXIT_OK
    for name in ("inr.bin", "motion.bin", "loss_history.csv"):
        assert (tmp_path / "again" / name).read_bytes() == (tiny_artifact / "art" / name).read_bytes()


def test_render_upsampled(tiny_artifact):
    out = tiny_artifact / "r.f32"
    code = run("render", "--artifact", tiny_artifact / "art", "--side", 32, "--frames", 30, "--out", out)
    assert code == EXIT_OK
    seq = read_volume(out)
    assert seq.shape == (30, 1, 32, 32)
    assert seq.data.min() >= 0.0


def test_render_missing_artifact(tmp_path):
    code = run("render", "--artifact", tmp_path / "none", "--side", 8, "--out", tmp_path / "r.f32")
    assert code == EXIT_USAGE


def test_bad_config_is_usage_error(tiny_artifact, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"lambda1": -1}))
    code = run("reconstruct", "--sino", tiny_artifact / "sino.f32", "--config", cfg, "--out", tmp_path / "a")
    assert code == EXIT_USAGE


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numeric_failure_exit_code(tiny_artifact, tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"iters": 5, "m": 8, "hidden": 16, "k": 3, "alpha_schedule": [[0, 2]],
                               "lr": 1e300}))
    code = run("reconstruct", "--sino", tiny_artifact / "sino.f32", "--config", cfg, "--out", tmp_path / "a",
               "--log-every", 0)
    assert code == EXIT_NUMERIC
    assert "iteration" in capsys.readouterr().err


def test_threads_env_validated(monkeypatch, tmp_path):
    monkeypatch.setenv("DYNCT_THREADS", "many")
    assert run("adjoint-test", "--side", 8, "--angles", 4, "--pairs", 2) == EXIT_USAGE
    assert run("--threads", 0, "adjoint-test", "--side", 8) == EXIT_USAGE


# --- verification ---------------------------------------------------------------------------


def test_gradcheck_tiny_passes(tmp_path, capsys):
    out = tmp_path / "grad.json"
    assert run("gradcheck", "--size", "tiny", "--out", out) == EXIT_OK
    text = capsys.readouterr().out
    assert text.count("PASS") >= 4 and "FAIL" not in text


def test_adjoint_test_command(tmp_path, capsys):
    assert run("adjoint-test", "--side", 16, "--angles", 8, "--pairs", 5, "--out", tmp_path / "adj.json") == EXIT_OK
    assert "PASS" in capsys.readouterr().out
    assert run("adjoint-test", "--side", 16, "--angles", 8, "--pairs", 5, "--tol", 0) == EXIT_TOLERANCE
