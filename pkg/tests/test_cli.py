"""End-to-end tests of the command-line workflows."""
import json

import numpy as np
import pytest

from raybench.bench import read_table
from raybench.cli import EXIT_CONFIG, EXIT_MANIFEST, EXIT_OK, EXIT_PARAMS, EXIT_SCENE, main
from raybench.config import load_manifest
from raybench.radiomap import parse_grid_table, read_pgm
from raybench.scenes import city_positions, write_city_obj, write_positions

CITY = dict(nx=2, ny=2)


@pytest.fixture()
def work(tmp_path):
    write_city_obj(tmp_path / "city.obj", **CITY)
    tx, rx = city_positions(n_tx=2, n_rx=3, **CITY)
    write_positions(tmp_path / "pos.csv", tx, rx)
    (tmp_path / "mat.ini").write_text("[concrete]\neps_r = 5.31\nsigma = 0.4838\n")
    (tmp_path / "run.ini").write_text(
        "[run]\nscene = city.obj\nmaterials = mat.ini\npositions = pos.csv\nout = out\nwarmup_secs = 0\n\n"
        "[params]\nns = 2000\ndepth = 2\n\n"
        "[sweep]\nkinds = sl, ml\ndepths = 1-2\nsampling_kind = ns\nsampling_values = 2000\nscattering = off\n\n"
        "[radiomap]\ntx = 40.0, 40.0, 7.0\nresolution = 10\n"
    )
    return tmp_path


def cfg(work):
    return ["--config", str(work / "run.ini")]


class TestValidate:
    def test_valid_manifest(self, work, capsys):
        assert main(["validate", *cfg(work)]) == EXIT_OK
        assert capsys.readouterr().out.strip() == "ok"

    def test_both_sampling_options(self, work, capsys):
        assert main(["validate", *cfg(work), "--as-deg", "0.5", "--ns", "1e4"]) == 1
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 1 and lines[0].startswith("params:")

    def test_receiver_outside(self, work, capsys):
        with open(work / "pos.csv", "a") as fh:
            fh.write("Rfar,rx,5000.0,0.0,1.5\n")
        assert main(["validate", *cfg(work)]) == 1
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines == ["positions: rx Rfar outside scene bounds"]

    def test_missing_mesh(self, work, capsys):
        assert main(["validate", *cfg(work), "--scene", str(work / "nope.obj")]) == 1
        assert "nope.obj" in capsys.readouterr().out

    def test_radiomap_inputs(self, work, capsys):
        assert main(["validate", *cfg(work), "--for", "radiomap"]) == EXIT_OK
        assert main(["validate", *cfg(work), "--for", "radiomap", "--tx", "9000,0,7"]) == 1
        assert "outside" in capsys.readouterr().out


class TestExitCodes:
    def test_missing_mesh_run(self, work, capsys):
        rc = main(["trace", *cfg(work), "--scene", str(work / "gone.obj")])
        assert rc == EXIT_SCENE
        assert "gone.obj" in capsys.readouterr().err

    def test_empty_mesh(self, work):
        (work / "empty.obj").write_text("# nothing\n")
        assert main(["trace", *cfg(work), "--scene", str(work / "empty.obj")]) == EXIT_SCENE

    def test_unreadable_manifest(self, work):
        (work / "bad.ini").write_text("[run\nscene=")
        assert main(["bench", "--config", str(work / "bad.ini")]) == EXIT_MANIFEST

    def test_conflicting_sampling(self, work):
        assert main(["trace", *cfg(work), "--as-deg", "0.5", "--ns", "100"]) == EXIT_PARAMS

    def test_tx_outside(self, work):
        assert main(["radiomap", *cfg(work), "--tx", "9000,0,7"]) == EXIT_CONFIG


class TestWorkflows:
    def test_ground_only_radiomap(self, tmp_path, capsys):
        (tmp_path / "ground.obj").write_text("v -50 -50 0\nv 50 -50 0\nv 50 50 0\nv -50 50 0\nf 1 2 3 4\n")
        (tmp_path / "mat.ini").write_text("[concrete]\neps_r = 5.31\nsigma = 0.4838\n")
        rc = main(["radiomap", "--scene", str(tmp_path / "ground.obj"), "--materials", str(tmp_path / "mat.ini"),
                   "--out", str(tmp_path / "o"), "--tx", "0,0,10", "--extent=-50,-50,50,50",
                   "--resolution", "10", "--depth", "1", "--method", "image"])
        assert rc == EXIT_OK, capsys.readouterr().err
        m = parse_grid_table(tmp_path / "o" / "radiomap.asc", 1.5)
        assert m.gains_db.shape == (10, 10)
        assert np.isfinite(m.gains_db).all()
        w, h, px = read_pgm(tmp_path / "o" / "radiomap.pgm")
        assert (w, h) == (10, 10) and px.min() >= 1

    def test_bench_small_sweep(self, work):
        assert main(["bench", *cfg(work)]) == EXIT_OK
        out = work / "out"
        summary = read_table(out / "summary.csv")
        assert len(summary) == 4
        assert len(read_table(out / "results.csv")) == 2 * 6 + 2 * 2
        assert set(read_table(out / "plot_sl_ns.csv")[0]) == {"series", "depth", "mu", "sigma"}
        assert all(float(r["mu"]) > 0 for r in summary)

    def test_trace_dump(self, work):
        assert main(["trace", *cfg(work)]) == EXIT_OK
        lines = (work / "out" / "paths.jsonl").read_text().splitlines()
        head = json.loads(lines[0])["header"]
        assert "param_hash" in json.dumps(head)
        recs = [json.loads(l) for l in lines[1:]]
        assert recs and {r["tx"] for r in recs} <= {"T0", "T1"}

    def test_reruns_byte_identical(self, work):
        for name in ("a", "b"):
            assert main(["trace", *cfg(work), "--out", str(work / name)]) == EXIT_OK
            assert main(["radiomap", *cfg(work), "--out", str(work / name), "--resolution", "20"]) == EXIT_OK
        for f in ("paths.jsonl", "radiomap.asc", "radiomap.pgm"):
            assert (work / "a" / f).read_bytes() == (work / "b" / f).read_bytes()


class TestManifest:
    def test_flags_override_file(self, work):
        m = load_manifest(work / "run.ini", {"depth": 5, "as_deg": 0.25, "mode": "ml"})
        assert m.params.max_reflections == 5
        assert m.params.angular_separation == 0.25 and m.params.num_samples is None
        assert m.sweep.kinds == ["ml"]
        assert m.sweep.depths == [5]

    def test_file_values(self, work):
        m = load_manifest(work / "run.ini")
        assert m.params.num_samples == 2000
        assert m.sweep.kinds == ["sl", "ml"] and list(m.sweep.depths) == [1, 2]
        assert m.scene == [str(work / "city.obj")] or m.scene == [work / "city.obj"]

    def test_sweep_include(self, work):
        (work / "grid.ini").write_text("[sweep]\nkinds = ml\ndepths = 1-4\nsampling_kind = ns\n"
                                       "sampling_values = 1000, 2000\nscattering = off, on\n")
        text = (work / "run.ini").read_text().replace("warmup_secs = 0\n", "warmup_secs = 0\nsweep = grid.ini\n")
        text = text.split("[sweep]")[0] + "[radiomap]" + text.split("[radiomap]")[1]
        (work / "run.ini").write_text(text)
        m = load_manifest(work / "run.ini")
        assert m.sweep.kinds == ["ml"] and m.sweep.n_cells() == 16

    def test_inline_comments(self, work):
        text = (work / "run.ini").read_text().replace("depth = 2\n", "depth = 4   ; reflections\n")
        (work / "run.ini").write_text(text)
        assert load_manifest(work / "run.ini").params.max_reflections == 4

    def test_header_has_no_timestamp(self, work):
        m = load_manifest(work / "run.ini")
        assert "time" not in json.dumps(m.header_params()).lower()
