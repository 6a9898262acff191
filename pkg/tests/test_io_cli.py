import json
import math

import numpy as np
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hardcrowd import io
from hardcrowd.cli import main
from hardcrowd.config import ConfigError, Scenario, dump_scenario, load_scenario, scenario_from_dict, scenario_to_dict, seeds

SMALL = {
    "name": "small",
    "model": "both",
    "seed": 3,
    "tau": 0.02,
    "steps": 60,
    "resolution": 0.2,
    "room": {"outer": [[0, 0], [3, 0], [3, 2], [0, 2]], "exits": [[[3, 0.6], [3, 1.4]]]},
    "micro": {"radius": 0.2, "population": {"kind": "random", "count": 12, "region": [0, 0, 2, 2]}},
    "macro": {"initial": "from_micro"},
    "output": {"frame_stride": 5},
}


# --- formats ---------------------------------------------------------------


@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)), elements=st.floats(-1e6, 1e6)))
def test_grid_csv_round_trip(tmp_path_factory, a):
    p = tmp_path_factory.mktemp("csv") / "g.csv"
    io.write_grid_csv(a, p)
    np.testing.assert_array_equal(io.read_grid_csv(p), a)


def test_grid_csv_layout_and_nan(tmp_path):
    a = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]])  # nx = 3, ny = 2
    io.write_grid_csv(a, tmp_path / "g.csv")
    rows = (tmp_path / "g.csv").read_text().split()
    # top image row is the largest y
    assert rows[0] == "2,4,6"
    with pytest.raises(ValueError):
        io.write_grid_csv(np.array([[np.nan]]), tmp_path / "bad.csv")


def test_pgm_round_trip(tmp_path):
    a = np.array([[0.0, 0.5], [1.0, 2.0], [0.25, 0.75]])
    io.write_pgm(a, tmp_path / "a.pgm", vmax=2.0)
    img, scale = io.read_pgm(tmp_path / "a.pgm")
    assert scale == 2.0
    assert img.shape == a.shape
    np.testing.assert_allclose(img / 255 * scale, a, atol=scale / 255)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n")


def test_metrics_writer(tmp_path):
    with io.MetricsWriter(tmp_path / "m.csv", ["step", "x"]) as w:
        w.write({"step": 0, "x": 0.1})
        w.write({"step": 1, "x": 1 / 3})
        with pytest.raises(ValueError):
            w.write({"step": 2, "x": math.nan})
        with pytest.raises(ValueError):
            w.write({"step": 2, "x": math.inf})
    m = io.read_metrics(tmp_path / "m.csv")
    assert m["x"].tolist() == [0.1, 1 / 3]
    assert m["step"].tolist() == [0, 1]


def test_frames_jsonl_round_trip(tmp_path):
    rec = io.frame_record(3, 0.06, [[0.1, 0.2], [1.0, 1.5]], [False, True], [(0, -1, 2.5)])
    io.write_jsonl([rec, rec], tmp_path / "f.jsonl")
    back = io.read_jsonl(tmp_path / "f.jsonl")
    assert back == [rec, rec]
    assert back[0]["exited"] == [0, 1]
    with pytest.raises(ValueError):
        io.write_jsonl([{"x": math.nan}], tmp_path / "bad.jsonl")


# --- configuration ---------------------------------------------------------


@pytest.mark.parametrize(
    "patch, where",
    [
        ({"tau": -1}, "tau"),
        ({"model": "hybrid"}, "model"),
        ({"room": {"walls": []}}, "room.walls"),
        ({"micro": {"radius": 0}}, "micro.radius"),
        ({"micro": {"types": {"default": {"strategy": "run"}}}}, "micro.types.default.strategy"),
        ({"macro": {"rectangles": [{"box": [0, 0, 1, 1], "density": 1.5}]}, "model": "macro"}, "macro.rectangles[0].density"),
        ({"fields": {"default": {"kind": "magnetic"}}}, "fields.default.kind"),
        ({"macro": {"rho_ref": 2.0}}, "macro.rho_ref"),
    ],
)
def test_config_errors_name_the_field(patch, where):
    data = {**SMALL, **patch}
    with pytest.raises(ConfigError) as exc:
        scenario_from_dict(data)
    assert str(exc.value).startswith(where)


def test_defaults_and_manifest_round_trip(tmp_path):
    s = scenario_from_dict(SMALL)
    assert s.micro.population.count == 12
    assert s.micro.jam_window == Scenario().micro.jam_window
    dump_scenario(s, tmp_path / "a.yaml")
    s2 = load_scenario(tmp_path / "a.yaml")
    dump_scenario(s2, tmp_path / "b.yaml")
    assert (tmp_path / "a.yaml").read_bytes() == (tmp_path / "b.yaml").read_bytes()
    assert scenario_to_dict(s2) == scenario_to_dict(s)


def test_seed_split_is_stable():
    a, b = seeds(7), seeds(7)
    assert a == b and len(set(a.values())) == 3
    assert seeds(8) != a


def test_shipped_configs_load():
    import pathlib

    root = pathlib.Path(__file__).resolve().parents[1] / "configs"
    names = sorted(p.name for p in root.glob("*.yaml"))
    assert "door.yaml" in names
    for p in root.glob("*.yaml"):
        load_scenario(p)


# --- command line ----------------------------------------------------------


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    cfg = d / "small.yaml"
    cfg.write_text(yaml.safe_dump(SMALL))
    out = d / "run"
    assert main(["run", str(cfg), "-o", str(out)]) == 0
    return cfg, out


def test_cli_run_writes_outputs(small_run):
    _, out = small_run
    for rel in ("manifest.yaml", "summary.json", "micro/metrics.csv", "micro/frames.jsonl", "macro/metrics.csv", "comparison"):
        assert (out / rel).exists(), rel
    summary = json.loads((out / "summary.json").read_text())
    assert summary["micro"]["kkt_ok"]
    assert summary["macro"]["feasible"]
    # re-running from the manifest reproduces the micro metrics exactly
    rerun = out.parent / "rerun"
    assert main(["run", str(out / "manifest.yaml"), "-o", str(rerun)]) == 0
    assert (rerun / "micro/metrics.csv").read_bytes() == (out / "micro/metrics.csv").read_bytes()
    assert (rerun / "macro/metrics.csv").read_bytes() == (out / "macro/metrics.csv").read_bytes()


def test_cli_metrics_compare_rasterize(small_run, tmp_path, capsys):
    _, out = small_run
    assert main(["metrics", str(out / "micro"), "-o", str(tmp_path / "curve.csv")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["kind"] == "micro"
    assert io.read_metrics(tmp_path / "curve.csv")["time"].size == rep["frames"]
    assert main(["metrics", str(out / "macro")]) == 0
    assert json.loads(capsys.readouterr().out)["kind"] == "macro"
    assert main(["compare", str(out / "micro"), str(out / "macro"), "-o", str(tmp_path / "cmp")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert "max_l1" in rep
    assert main(["rasterize", str(out / "micro"), "-o", str(tmp_path / "r"), "--rho-ref", "0.9"]) == 0
    assert len(list((tmp_path / "r").glob("density_*.csv"))) > 0
    for p in (tmp_path / "r").glob("density_*.csv"):
        a = io.read_grid_csv(p)
        assert a.min() >= 0 and a.max() <= 1


def test_cli_distance_field(small_run, tmp_path, capsys):
    cfg, _ = small_run
    assert main(["distance-field", str(cfg), "-o", str(tmp_path / "d.csv")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["shape"] == [15, 10]
    assert np.loadtxt(tmp_path / "d.csv", delimiter=",").shape == (10, 15)


def test_cli_error_codes(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({**SMALL, "tau": 0}))
    assert main(["run", str(bad), "-o", str(tmp_path / "x")]) == 2
    assert "tau" in capsys.readouterr().err
    assert main(["run", str(tmp_path / "missing.yaml")]) == 2
    assert main(["metrics", str(tmp_path / "nowhere")]) == 2
