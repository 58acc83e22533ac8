import json

import numpy as np
import pytest

from gpshape import cli, confidence as cf
from gpshape import template as tpl
from gpshape.geometry import CameraIntrinsics, RigidTransform
from gpshape.synthbench import CSV_HEADER

CAM = CameraIntrinsics(800.0, 800.0, 320.0, 320.0)
FAST_FIT = ["--cameras", "20", "--rays-per-camera", "150", "--train", "300", "--test", "800",
            "--iters", "40"]
SMALL_SWEEP = {"yaw_deg": [0.0, 40.0], "pitch_deg": [0.0], "distances": [1.2],
               "outlier_probs": [0.0, 0.3], "sigma_outliers": [20.0], "trials": 2,
               "n_points": 100}


def run(argv, capsys):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert cli.main(["make-shape", "--shape", "sphere", "--subdivisions", "3",
                     "--out", str(d / "sphere.obj")]) == 0
    assert cli.main(["fit", "--input", str(d / "sphere.obj"), *FAST_FIT,
                     "--out", str(d / "sphere.json")]) == 0
    assert cli.main(["make-shape", "--shape", "sphere", "--kind", "cloud", "--n", "3000",
                     "--out", str(d / "points.xyz")]) == 0
    return d


def test_fit_reports_small_radial_error(workspace, tmp_path, capsys):
    out = tmp_path / "t.json"
    code, text, _ = run(["fit", "--input", workspace / "sphere.obj", *FAST_FIT, "--json",
                         "--out", out], capsys)
    assert code == 0
    res = json.loads(text)
    assert res["mean_radial_error"] < 1e-2
    assert res["k"] == 1 and res["clusters"][0]["sigma_hat"] > 0
    assert tpl.load(out).k == 1


def test_fit_is_deterministic(workspace, tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    for p in (a, b):
        assert cli.main(["fit", "--input", str(workspace / "sphere.obj"), *FAST_FIT,
                         "--out", str(p)]) == 0
    assert a.read_bytes() == b.read_bytes() == (workspace / "sphere.json").read_bytes()


def test_fit_human_output(workspace, tmp_path, capsys):
    code, text, _ = run(["fit", "--input", workspace / "points.xyz", "--train", "300",
                         "--test", "800", "--iters", "20", "--refs", "2",
                         "--out", tmp_path / "t.json"], capsys)
    assert code == 0
    assert "cluster 0:" in text and "cluster 1:" in text and "mean radial error" in text


def test_fit_manual_centers(workspace, tmp_path, capsys):
    (tmp_path / "c.json").write_text("[[0.2, 0, 0], [-0.2, 0, 0]]")
    code, _, _ = run(["fit", "--input", workspace / "points.xyz", "--train", "300", "--test",
                      "800", "--iters", "5", "--centers", tmp_path / "c.json",
                      "--out", tmp_path / "t.json"], capsys)
    assert code == 0
    np.testing.assert_allclose(tpl.load(tmp_path / "t.json").centers[:, 0], [0.2, -0.2])


def test_fit_writes_manifest(workspace):
    doc = json.loads((workspace / "sphere.json.manifest.json").read_text())
    assert doc["command"] == "fit"
    assert doc["config"]["refs"] == 1 and doc["config"]["kernel"] == "rq"
    assert set(doc["inputs"]) == {str(workspace / "sphere.obj")}
    out = str(workspace / "sphere.json")
    assert len(doc["outputs"][out]) == 64


@pytest.mark.parametrize("argv,code", [
    (["fit", "--input", "missing.obj", "--out", "x.json"], "E_IO"),
    (["fit", "--input", "{obj}", "--refs", "0", "--out", "x.json"], "E_CONFIG"),
    (["fit", "--input", "{obj}", "--kernel", "cubic", "--out", "x.json"], "E_CONFIG"),
    (["fit", "--input", "{obj}"], "E_CONFIG"),
    (["fit", "--input", "{obj}", *FAST_FIT[:4], "--train", "5000", "--out", "x.json"], "E_DATA"),
    (["eval-shape", "--template", "{tpl}", "--gt", "{xyz}", "--tau", "0"], "E_CONFIG"),
    (["eval-shape", "--template", "{xyz}", "--gt", "{xyz}"], "E_PARSE"),
    (["--threads", "0"], "E_CONFIG"),
])
def test_error_codes(workspace, tmp_path, capsys, monkeypatch, argv, code):
    monkeypatch.chdir(tmp_path)
    subs = {"{obj}": workspace / "sphere.obj", "{tpl}": workspace / "sphere.json",
            "{xyz}": workspace / "points.xyz"}
    argv = [str(subs.get(a, a)) for a in argv]
    rc, _, err = run(argv, capsys)
    assert rc == 1
    lines = err.strip().splitlines()
    assert lines[-1].startswith(f"error: {code}: ")
    assert "\x1b[" not in err


def test_memory_error_exit_code(workspace, tmp_path, capsys, monkeypatch):
    def oom(*a, **k):
        raise MemoryError("Unable to allocate 74.5 GiB")

    monkeypatch.setattr(cli.tpl, "build_template", oom)
    rc, _, err = run(["fit", "--input", workspace / "points.xyz", "--train", "100", "--test",
                      "100", "--out", tmp_path / "t.json"], capsys)
    assert rc == 1 and "error: E_MEMORY:" in err


def test_internal_error_exit_code(workspace, tmp_path, capsys, monkeypatch):
    def boom(*a, **k):
        raise RuntimeError("invariant broken")

    monkeypatch.setattr(cli.tpl, "load", boom)
    rc, _, err = run(["eval-shape", "--template", workspace / "sphere.json", "--gt",
                      workspace / "points.xyz", "--report", tmp_path / "r.json"], capsys)
    assert rc == 2
    assert err.strip().endswith("error: E_INTERNAL: RuntimeError: invariant broken")


def test_eval_shape_report(workspace, tmp_path, capsys):
    report = tmp_path / "r.json"
    code, text, _ = run(["eval-shape", "--template", workspace / "sphere.json", "--gt",
                         workspace / "points.xyz", "--report", report], capsys)
    assert code == 0
    res = json.loads(text)
    assert set(res) == {"chamfer", "precision", "recall", "fscore", "tau", "n_gt", "n_est"}
    assert res == json.loads(report.read_text())
    assert res["fscore"] > 0.95 and res["tau"] == 0.01 and res["n_gt"] == 3000


def test_eval_shape_directions_and_baseline(workspace, tmp_path, capsys):
    code, text, _ = run(["eval-shape", "--template", workspace / "sphere.json", "--gt",
                         workspace / "points.xyz", "--directions", "500", "--baseline-train",
                         workspace / "points.xyz", "--report", tmp_path / "r.json"], capsys)
    assert code == 0
    assert json.loads(text)["n_est"] <= 500
    man = json.loads((tmp_path / "r.json.manifest.json").read_text())
    assert man["result"]["comparison"]["nn_baseline"] == 0.0


@pytest.fixture
def score_inputs(workspace, tmp_path):
    """Noise-free correspondences on the template surface, in original units."""
    t = tpl.load(workspace / "sphere.json")
    rng = np.random.default_rng(3)
    u = rng.normal(size=(80, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    Xn = tpl.reconstruct_at(t, t.centers[0] + u).points
    X = Xn / t.scale + t.center
    T = RigidTransform(np.eye(3), [0.05, -0.02, 3.0 / t.scale])
    cf.write_pose(tmp_path / "pose.json", T)
    cf.write_intrinsics(tmp_path / "cam.json", CAM)
    cf.write_correspondences(tmp_path / "corr.csv",
                             cf.Correspondences(CAM.project(T.apply(X)), X))
    return t, tmp_path


def test_score_perfect_pose_is_accepted(workspace, score_inputs, capsys):
    t, d = score_inputs
    code, text, _ = run(["score", "--template", workspace / "sphere.json", "--pose",
                         d / "pose.json", "--intrinsics", d / "cam.json", "--corr",
                         d / "corr.csv", "--delta", "0.01", "--report", d / "s.json"], capsys)
    assert code == 0
    res = json.loads(text)
    assert set(res) == {"score", "bound", "accepted", "n_points", "n_excluded"}
    assert res["accepted"] is True
    assert res["n_points"] == 80 and res["n_excluded"] == 0
    peak = 1 / (np.sqrt(2 * np.pi) * t.calibrated_sigma[0])
    assert res["score"] == pytest.approx(peak, rel=1e-6)
    man = json.loads((d / "s.json.manifest.json").read_text())
    assert man["result"]["threshold"] == pytest.approx(cf.confidence_bound(t, None, 0.01))


def test_score_rejects_wrong_pose(workspace, score_inputs, capsys):
    t, d = score_inputs
    T = cf.read_pose(d / "pose.json")
    cf.write_pose(d / "bad.json", RigidTransform(T.rotation, T.translation + [0.5 / t.scale, 0, 0]))
    code, text, _ = run(["score", "--template", workspace / "sphere.json", "--pose",
                         d / "bad.json", "--intrinsics", d / "cam.json", "--corr",
                         d / "corr.csv", "--delta", "0.003", "--report", d / "s.json"], capsys)
    assert code == 0
    res = json.loads(text)
    assert res["accepted"] is False and res["score"] < res["bound"]


def test_score_millimetre_delta(workspace, score_inputs, capsys):
    t, d = score_inputs
    code, _, _ = run(["score", "--template", workspace / "sphere.json", "--pose",
                      d / "pose.json", "--intrinsics", d / "cam.json", "--corr",
                      d / "corr.csv", "--units", "mm", "--delta", "2", "--model-diameter",
                      "200", "--report", d / "s.json"], capsys)
    assert code == 0
    man = json.loads((d / "s.json.manifest.json").read_text())
    assert man["result"]["delta_model_units"] == pytest.approx(0.02)
    run(["score", "--template", workspace / "sphere.json", "--pose", d / "pose.json",
         "--intrinsics", d / "cam.json", "--corr", d / "corr.csv", "--units", "mm",
         "--delta", "2", "--report", d / "s.json"], capsys)
    man = json.loads((d / "s.json.manifest.json").read_text())
    assert man["result"]["delta_model_units"] == pytest.approx(2 * t.scale)


def test_score_explicit_threshold(workspace, score_inputs, capsys):
    t, d = score_inputs
    code, text, _ = run(["score", "--template", workspace / "sphere.json", "--pose",
                         d / "pose.json", "--intrinsics", d / "cam.json", "--corr",
                         d / "corr.csv", "--threshold", "1e12", "--report", d / "s.json"], capsys)
    assert code == 0 and json.loads(text)["accepted"] is False


@pytest.mark.parametrize("bad,code", [("pose.json", "E_PARSE"), ("corr.csv", "E_PARSE"),
                                      ("cam.json", "E_PARSE")])
def test_score_corrupt_inputs(workspace, score_inputs, capsys, bad, code):
    _, d = score_inputs
    (d / bad).write_text("{not json")
    rc, _, err = run(["score", "--template", workspace / "sphere.json", "--pose",
                      d / "pose.json", "--intrinsics", d / "cam.json", "--corr",
                      d / "corr.csv", "--report", d / "s.json"], capsys)
    assert rc == 1 and err.strip().splitlines()[-1].startswith(f"error: {code}:")


def test_score_invalid_delta(workspace, score_inputs, capsys):
    _, d = score_inputs
    rc, _, err = run(["score", "--template", workspace / "sphere.json", "--pose",
                      d / "pose.json", "--intrinsics", d / "cam.json", "--corr",
                      d / "corr.csv", "--delta", "-1", "--report", d / "s.json"], capsys)
    assert rc == 1 and "E_CONFIG" in err


def test_bench_synth_outputs_and_determinism(workspace, tmp_path, capsys):
    (tmp_path / "sweep.json").write_text(json.dumps(SMALL_SWEEP))
    outs = []
    for name in ("a.csv", "b.csv"):
        code, text, _ = run(["bench-synth", "--template", workspace / "sphere.json", "--model",
                             workspace / "points.xyz", "--sweep", tmp_path / "sweep.json",
                             "--out", tmp_path / name, "--name", "sphere", "--json"], capsys)
        assert code == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    lines = outs[0].decode().splitlines()
    assert lines[0] == ",".join(CSV_HEADER) and len(lines) == 1 + 8
    summary = json.loads((tmp_path / "a.summary.json").read_text())
    assert summary == json.loads(text.strip().splitlines()[-1])
    assert summary["object"] == "sphere"
    assert {"spearman", "n_trials", "failures"} <= set(summary)
    assert summary["n_trials"] == 8
    assert not (tmp_path / "a.csv.partial").exists()
    man = json.loads((tmp_path / "a.csv.manifest.json").read_text())
    assert man["result"]["sweep"]["trials"] == 2


def test_bench_synth_seed_override(workspace, tmp_path, capsys):
    (tmp_path / "sweep.json").write_text(json.dumps(SMALL_SWEEP))
    for name, seed in (("a.csv", "0"), ("b.csv", "1")):
        assert run(["bench-synth", "--template", workspace / "sphere.json", "--model",
                    workspace / "points.xyz", "--sweep", tmp_path / "sweep.json", "--seed", seed,
                    "--out", tmp_path / name], capsys)[0] == 0
    assert (tmp_path / "a.csv").read_bytes() != (tmp_path / "b.csv").read_bytes()


@pytest.mark.parametrize("sweep", [dict(SMALL_SWEEP, yaw_deg=[]), {"unknown": 1}])
def test_bench_synth_bad_sweep(workspace, tmp_path, capsys, sweep):
    (tmp_path / "sweep.json").write_text(json.dumps(sweep))
    rc, _, err = run(["bench-synth", "--template", workspace / "sphere.json", "--model",
                      workspace / "points.xyz", "--sweep", tmp_path / "sweep.json",
                      "--out", tmp_path / "r.csv"], capsys)
    assert rc == 1 and "error: E_CONFIG:" in err


def test_json_logging(workspace, tmp_path, capsys):
    code, _, err = run(["fit", "--input", workspace / "points.xyz", "--train", "200", "--test",
                        "300", "--iters", "3", "-v", "--json", "--out", tmp_path / "t.json"],
                       capsys)
    assert code == 0
    records = [json.loads(line) for line in err.strip().splitlines()]
    assert any("mean radial error" in r["message"] for r in records)


def test_color_only_on_tty(capsys, monkeypatch):
    class Tty:
        def __init__(self):
            self.text = ""

        def isatty(self):
            return True

        def write(self, s):
            self.text += s

        def flush(self):
            pass

    tty = Tty()
    monkeypatch.setattr("sys.stderr", tty)
    monkeypatch.delenv("NO_COLOR", raising=False)
    cli._report_error("E_IO", "x")
    assert tty.text.startswith("\x1b[31m")
    tty.text = ""
    monkeypatch.setenv("NO_COLOR", "1")
    cli._report_error("E_IO", "x")
    assert tty.text == "error: E_IO: x\n"


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--version"])
    assert exc.value.code == 0
    assert "gpshape" in capsys.readouterr().out
