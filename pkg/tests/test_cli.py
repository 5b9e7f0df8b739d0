import json
import subprocess
import sys

import pytest

from nvensemble import io as nvio
from nvensemble.cli import main
from nvensemble.protocols import Ensemble


def _write(tmp_path, name, doc):
    p = tmp_path / name
    p.write_text(json.dumps(doc) if not isinstance(doc, str) else doc)
    return p


T1_CONFIG = {
    "seed": 3,
    "system": {"sites": [{"A_parallel": 0, "A_perpendicular": 50}], "relaxation": {"nuclear_T1": 100}},
    "protocol": {"delays_ms": [0, 25, 50, 100, 200, 400]},
    "output": {"prefix": "t1run"},
}


def test_simulate_t1_writes_deterministic_artifacts(tmp_path, capsys):
    cfg = _write(tmp_path, "t1.json", T1_CONFIG)
    assert main(["simulate", "t1", "--config", str(cfg), "--out", str(tmp_path / "a")]) == 0
    assert main(["simulate", "t1", "--config", str(cfg), "--out", str(tmp_path / "b")]) == 0
    a = (tmp_path / "a" / "t1run.json").read_text()
    assert a == (tmp_path / "b" / "t1run.json").read_text()
    doc = nvio.loads(a)
    assert doc["seed"] == 3 and doc["run_config"]["seed"] == 3
    assert doc["derived"]["T1_ms"] == pytest.approx(100, rel=0.05)
    res = nvio.read_sweep(a, (tmp_path / "a" / "t1run.csv").read_text())
    assert list(res.x_values) == T1_CONFIG["protocol"]["delays_ms"]
    meta = json.loads((tmp_path / "a" / "t1run.meta.json").read_text())
    assert {"timestamp", "version", "command"} <= set(meta)


@pytest.mark.parametrize("protocol, extra", [
    ("propi", {"M": 20, "N": 20}),
    ("rabi", {"tau_rf_us": [0, 25, 50, 75, 100, 125, 150, 175, 200, 225, 250, 275, 300]}),
    ("fid", {"taus_ms": [0, 0.02, 0.04, 0.06, 0.08, 0.1, 0.12, 0.14, 0.16], "nv_state": "ms-1"}),
    ("echo", {"taus_ms": [0, 0.05, 0.1, 0.15]}),
])
def test_simulate_other_protocols(tmp_path, protocol, extra):
    cfg = _write(tmp_path, "c.json", {"system": {"sites": [{"A_parallel": 50, "A_perpendicular": 50}]},
                                      "protocol": extra})
    assert main(["simulate", protocol, "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / f"{protocol}.json").exists() and (tmp_path / f"{protocol}.csv").exists()


def test_spectra_odmr(capsys):
    assert main(["spectra", "odmr", "--group", "C"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "offset_MHz,weight"
    rows = [tuple(map(float, line.split(","))) for line in lines[1:]]
    assert rows == [(-130.0, 0.25), (0.0, 0.5), (130.0, 0.25)]


def test_dsl_check_and_expand(tmp_path, capsys):
    good = _write(tmp_path, "p.pseq", "rabi mw 10000\nparam t 5\nblock b repeat 2 { laser 3; mw pulse dur $t rabi 10 }\n")
    assert main(["dsl", "check", str(good)]) == 0
    assert "ok (4 events, 16 us)" in capsys.readouterr().out
    assert main(["dsl", "expand", str(good), "--param", "t=1"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("channel,start_us") and len(out) == 5


def test_dsl_overlap_exits_1_with_location(tmp_path, capsys):
    bad = _write(tmp_path, "bad.pseq", "block b repeat 1 {\n mw pulse dur 5 rabi 1;\n mw pulse dur 5 rabi 1 at 1\n}\n")
    assert main(["dsl", "check", str(bad)]) == 1
    err = capsys.readouterr().err
    assert f"{bad}:3:" in err and "overlap" in err


def test_usage_errors_exit_2(capsys):
    with pytest.raises(SystemExit) as info:
        main(["simulate", "warp"])
    assert info.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_config_errors_exit_1(tmp_path, capsys):
    cfg = _write(tmp_path, "bad.json", {"seed": 0, "sytem": {}})
    assert main(["simulate", "t1", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    assert "sytem" in capsys.readouterr().err
    cfg = _write(tmp_path, "bad2.json", {"protocol": {"taus_ms": [1]}})
    assert main(["simulate", "t1", "--config", str(cfg), "--out", str(tmp_path)]) == 1
    cfg = _write(tmp_path, "bad3.json", "{not json")
    assert main(["simulate", "t1", "--config", str(cfg), "--out", str(tmp_path)]) == 1


def test_layer_stats(tmp_path):
    assert main(["layer", "stats", "--out", str(tmp_path)]) == 0
    doc = nvio.loads((tmp_path / "layer_stats.json").read_text())
    assert set(doc["reference_fits"]) >= {"theoretical", "sample_A"}
    assert sum(doc["group_probabilities"]) == pytest.approx(1.0)


def test_version(capsys):
    assert main(["version"]) == 0
    assert capsys.readouterr().out.strip()


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "nvensemble", "version"], capture_output=True, text=True)
    assert out.returncode == 0 and out.stdout.strip()


def test_build_system_variants():
    const = nvio.RunConfig().load_constants()
    ens = nvio.build_system({"gaussian_ensemble": {"mean_A_parallel": 50, "sigma": 2, "n_nodes": 4}}, const)
    assert isinstance(ens, Ensemble) and len(ens.members) == 4
    clusters = nvio.build_system({"layer_profile": {"n_members": 2, "sites_per_member": 1, "radius_nm": 1.5}},
                                 const, seed=1)
    assert len(clusters.members) == 2
    with pytest.raises(nvio.ConfigError):
        nvio.build_system({"sites": [], "gaussian_ensemble": {}}, const)
    with pytest.raises(nvio.ConfigError):
        nvio.build_system({"sites": [{"A_parallel": 1, "A_perp": 2}]}, const)


def test_canonical_json_handles_non_finite():
    text = nvio.dumps({"b": float("inf"), "a": float("nan")})
    assert text.index('"a"') < text.index('"b"')
    back = nvio.loads(text)
    assert back["b"] == float("inf")
