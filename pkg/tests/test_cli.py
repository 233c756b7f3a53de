import csv
import json

import numpy as np
import pytest

from dirac_edge.cli import ConfigError, list_experiments, main, thread_count
from dirac_edge.edge_kernel import halfplane_kernel

ALL_EXPERIMENTS = [
    "kernel-grid", "edge-decay-fit", "zigzag-demo", "born-series",
    "magnetic-neumann", "schur-sweep", "hs-matrix-check", "fiber-F",
    "edge-bulk-gap", "dispersion", "bulk-edge", "combes-thomas",
]


def _write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def _read_rows(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_list_enumerates_all_experiments(capsys):
    assert main(["list"]) == 0
    out = capsys.readouterr().out
    for name in ALL_EXPERIMENTS:
        assert name in out
    # help text names the required keys
    assert "required config keys" in out
    assert len(list_experiments().splitlines()) == 2 * len(ALL_EXPERIMENTS)


def test_kernel_grid_run_is_deterministic(tmp_path):
    cfg = {"experiment": "kernel-grid", "output": str(tmp_path / "kg"),
           "gamma": 1.0, "lam": 1.0, "n": 7}
    path = _write_cfg(tmp_path, cfg)
    assert main(["run", path]) == 0
    first = (tmp_path / "kg.csv").read_bytes()
    rows = _read_rows(tmp_path / "kg.csv")
    assert {"x1", "x2", "K00_re", "K00_im", "K11_im"} <= set(rows[0])
    # spot value against the kernel itself
    r = rows[0]
    K = halfplane_kernel(1.0, 1.0, [float(r["x1"]), float(r["x2"])], [0.0, 0.5])
    assert abs(complex(float(r["K00_re"]), float(r["K00_im"])) - K[0, 0]) < 1e-12
    # sidecar carries the resolved config; rerun is byte-identical
    meta = json.loads((tmp_path / "kg.meta.json").read_text())
    assert meta["config"] == cfg and meta["n_rows"] == len(rows)
    assert main(["run", path]) == 0
    assert (tmp_path / "kg.csv").read_bytes() == first


def test_missing_config_exits_2_without_outputs(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.json")]) == 2
    assert "config error" in capsys.readouterr().err
    assert list(tmp_path.iterdir()) == []


def test_config_validation_aggregates_problems(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", str(bad)]) == 2

    path = _write_cfg(tmp_path, {"experiment": "nope", "output": "x"}, "unk.json")
    assert main(["run", path]) == 2
    assert "unknown experiment" in capsys.readouterr().err

    path = _write_cfg(tmp_path, {"experiment": "born-series"}, "inc.json")
    assert main(["run", path]) == 2
    err = capsys.readouterr().err
    # one aggregated diagnostic naming every missing key
    for key in ("output", "gamma", "lam", "x", "xprime"):
        assert f"'{key}'" in err


def test_module_precondition_maps_to_exit_2(tmp_path, capsys):
    path = _write_cfg(tmp_path, {
        "experiment": "born-series", "output": str(tmp_path / "b"),
        "gamma": 1.0, "lam": 2.0, "w0": 5.0,
        "x": [0.3, 0.8], "xprime": [1.0, 0.4],
    })
    assert main(["run", path]) == 2
    assert "convergence regime" in capsys.readouterr().err
    assert not (tmp_path / "b.csv").exists()


def test_nonconvergence_maps_to_exit_3(tmp_path, capsys):
    path = _write_cfg(tmp_path, {
        "experiment": "fiber-F", "output": str(tmp_path / "f"),
        "F": {"type": "gaussian", "center": 0.0, "sigma": 0.35},
        "gamma": 1.0, "b": 1.0, "xi": 0.0,
        "t_values": [0.5], "tprime_values": [1.0],
        "h": 1.0 / 64, "T_dom": 6.0, "rich_tol": 1e-12,
    })
    assert main(["run", path]) == 3
    assert "non-convergence" in capsys.readouterr().err
    assert not (tmp_path / "f.csv").exists()


def test_zigzag_demo_reports_anomaly_slope(tmp_path):
    path = _write_cfg(tmp_path, {"experiment": "zigzag-demo",
                                 "output": str(tmp_path / "zz")})
    assert main(["run", path]) == 0
    meta = json.loads((tmp_path / "zz.meta.json").read_text())
    assert abs(meta["zigzag_slope"] + 2.0) < 0.01
    # the non-zigzag kernel stays bounded over the same boundary approach
    assert meta["regular_max"] < 1.0


def test_born_series_experiment_rows(tmp_path):
    path = _write_cfg(tmp_path, {
        "experiment": "born-series", "output": str(tmp_path / "b"),
        "gamma": 1.0, "lam": 2.0, "w3": 0.2,
        "x": [0.3, 0.8], "xprime": [1.0, 0.4], "orders": [0, 1],
    })
    assert main(["run", path]) == 0
    rows = _read_rows(tmp_path / "b.csv")
    assert [r["order"] for r in rows] == ["0", "1"]
    K = halfplane_kernel(1.0, 2.0, [0.3, 0.8], [1.0, 0.4])
    assert abs(complex(float(rows[0]["K01_re"]), float(rows[0]["K01_im"]))
               - K[0, 1]) < 1e-12
    tails = [float(r["tail_bound"]) for r in rows]
    assert tails[0] > tails[1] > 0.0


def test_combes_thomas_experiment_within_bound(tmp_path):
    path = _write_cfg(tmp_path, {
        "experiment": "combes-thomas", "output": str(tmp_path / "ct"),
        "gamma": 1.0, "b": 1.0, "xi": 0.0,
        "C1_values": [0.5], "v_values": [1.0],
    })
    assert main(["run", path]) == 0
    rows = _read_rows(tmp_path / "ct.csv")
    assert len(rows) == 1
    assert float(rows[0]["bound"]) == pytest.approx(2.0)
    assert float(rows[0]["measured"]) <= 1.1 * float(rows[0]["bound"])


def test_thread_count_env(monkeypatch):
    monkeypatch.setenv("DIRAC_EDGE_THREADS", "4")
    assert thread_count() == 4
    monkeypatch.setenv("DIRAC_EDGE_THREADS", "0")
    assert thread_count() >= 1
    monkeypatch.setenv("DIRAC_EDGE_THREADS", "many")
    with pytest.raises(ConfigError):
        thread_count()
