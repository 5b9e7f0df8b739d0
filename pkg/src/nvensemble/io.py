"""Run configuration, system construction and result artifacts.

A run configuration is a JSON object::

    {
      "seed": 0,
      "system": {"sites": [{"A_parallel": 50, "A_perpendicular": 50}],
                 "B0": 458, "relaxation": {"nuclear_T1": 100}},
      "constants": {"contrast": 0.3},
      "protocol": {"M": 100, "delays_ms": [0, 10, 50, 100, 200, 500]},
      "output": {"prefix": "t1"}
    }

``system`` takes exactly one of ``sites`` (explicit couplings),
``gaussian_ensemble`` (A_par spread) or ``layer_profile`` (clusters cut from
sampled baths).  Unknown keys are rejected at every level.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .config import Constants, load_constants
from .fitting import DecayFit, OscillationFit
from .lattice import LayerProfile
from .protocols import (
    Ensemble,
    PropiConfig,
    PropiResult,
    SweepResult,
    cluster_ensemble,
    gaussian_hyperfine_ensemble,
)
from .spin_core import (
    HyperfineTensor,
    NuclearSpinSite,
    RelaxationParams,
    SpinSystemSpec,
    StaticField,
    carbon13,
)


class ConfigError(ValueError):
    pass


def _reject_unknown(data: Mapping[str, Any], allowed, where: str) -> None:
    if not isinstance(data, Mapping):
        raise ConfigError(f"{where} must be a JSON object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")


_SWEEP_KEYS = {
    "propi": set(),
    "t1": {"delays_ms"},
    "rabi": {"tau_rf_us", "rf_rabi"},
    "fid": {"taus_ms", "nv_state", "envelope", "fit"},
    "echo": {"taus_ms", "nv_state"},
}
_PROPI_KEYS = {f.name for f in fields(PropiConfig)}


@dataclass
class RunConfig:
    seed: int = 0
    system: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    protocol: dict = field(default_factory=dict)
    output: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "RunConfig":
        _reject_unknown(data, {"seed", "system", "constants", "protocol", "output"}, "run config")
        seed = data.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("seed must be an integer")
        out = dict(data.get("output", {}))
        _reject_unknown(out, {"prefix"}, "output")
        return cls(seed, dict(data.get("system", {})), dict(data.get("constants", {})),
                   dict(data.get("protocol", {})), out)

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "system": self.system, "constants": self.constants,
                "protocol": self.protocol, "output": self.output}

    def load_constants(self) -> Constants:
        try:
            return load_constants(overrides=self.constants)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0])) from exc

    def propi_config(self, kind: str, const: Constants) -> PropiConfig:
        _reject_unknown(self.protocol, _PROPI_KEYS | _SWEEP_KEYS[kind], f"protocol ({kind})")
        kw = {k: v for k, v in self.protocol.items() if k in _PROPI_KEYS}
        kw.setdefault("seed", self.seed)
        return PropiConfig.from_constants(const, **kw)


def _relaxation(data: Mapping[str, Any] | None) -> RelaxationParams:
    data = data or {}
    _reject_unknown(data, {"nv_T1", "nv_T2", "nuclear_T1", "nuclear_T2"}, "system.relaxation")
    return RelaxationParams(**data)


def build_system(spec: Mapping[str, Any], const: Constants, seed: int = 0) -> SpinSystemSpec | Ensemble:
    _reject_unknown(spec, {"sites", "gaussian_ensemble", "layer_profile", "B0", "relaxation"}, "system")
    kinds = [k for k in ("sites", "gaussian_ensemble", "layer_profile") if k in spec]
    if len(kinds) > 1:
        raise ConfigError(f"system takes one of sites / gaussian_ensemble / layer_profile, got {kinds}")
    B0 = float(spec.get("B0", const.B0_gauss))
    relax = _relaxation(spec.get("relaxation"))
    kind = kinds[0] if kinds else "sites"
    if kind == "sites":
        species = carbon13(const)
        sites = []
        for i, s in enumerate(spec.get("sites", [])):
            _reject_unknown(s, {"A_parallel", "A_perpendicular", "position"}, f"system.sites[{i}]")
            pos = tuple(s.get("position", (0.0, 0.0, 1.0)))
            sites.append(NuclearSpinSite(pos, species, HyperfineTensor(float(s["A_parallel"]),
                                                                        float(s["A_perpendicular"]))))
        return SpinSystemSpec(StaticField(B0), tuple(sites), relax, const.max_exact_sites)
    if kind == "gaussian_ensemble":
        g = spec["gaussian_ensemble"]
        _reject_unknown(g, {"mean_A_parallel", "sigma", "A_perpendicular", "n_nodes"}, "system.gaussian_ensemble")
        return gaussian_hyperfine_ensemble(float(g["mean_A_parallel"]), float(g["sigma"]),
                                           float(g.get("A_perpendicular", 50.0)), int(g.get("n_nodes", 16)),
                                           B0, relax, const)
    lp = dict(spec["layer_profile"])
    _reject_unknown(lp, {"profile", "n_members", "sites_per_member", "radius_nm"}, "system.layer_profile")
    prof = LayerProfile.from_constants(const, **lp.get("profile", {}))
    return cluster_ensemble(prof, int(lp.get("n_members", 8)), int(lp.get("sites_per_member", 2)), seed, B0,
                            relax, lp.get("radius_nm"), const)


# ---------------------------------------------------------------------------
# Artifacts
# ---------------------------------------------------------------------------


def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, inf/nan to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_clean(v) for v in obj.tolist()]
    if isinstance(obj, (np.floating, float)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if isinstance(obj, (np.integer,)):
        return int(obj)
    return obj


def dumps(doc: Mapping[str, Any]) -> str:
    """Canonical JSON text (sorted keys, fixed indentation, trailing newline)."""
    return json.dumps(_clean(doc), indent=2, sort_keys=True, allow_nan=False) + "\n"


def _restore(obj):
    if isinstance(obj, dict):
        return {k: _restore(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_restore(v) for v in obj]
    if obj in ("nan", "inf", "-inf"):
        return float(obj)
    return obj


def loads(text: str) -> dict:
    return _restore(json.loads(text))


def result_document(result: SweepResult | PropiResult, run: RunConfig) -> dict:
    doc = result.to_dict()
    doc["seed"] = run.seed
    doc["run_config"] = run.to_dict()
    return doc


def write_artifacts(out_dir: str | Path, prefix: str, document: Mapping[str, Any], trace_csv: str,
                    meta: Mapping[str, Any]) -> list[Path]:
    """Write ``prefix.json`` (deterministic), ``prefix.csv`` and ``prefix.meta.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f"{prefix}.json", out / f"{prefix}.csv", out / f"{prefix}.meta.json"]
    paths[0].write_text(dumps(document))
    paths[1].write_text(trace_csv)
    paths[2].write_text(dumps(meta))
    return paths


def _fit_from_dict(d: Mapping[str, Any] | None):
    if d is None:
        return None
    if d["model"].startswith("A*exp(-t/T)"):
        return DecayFit(d["amplitude"], d["time_constant"], d["offset"], d["uncertainty"], d["converged"],
                        d["identifiable"], d["residual_rms"], [], d["residual_norm"], d["iterations"], d["options"])
    decay = math.inf if d["decay_time"] is None else d["decay_time"]
    return OscillationFit(d["amplitude"], d["frequency"], d["phase"], decay, d["offset"], d["envelope"],
                          d["uncertainty"], d["converged"], d["residual_rms"], [], d["residual_norm"],
                          d["iterations"], d["options"])


def read_trace_csv(text: str) -> tuple[int, list[str], list[list[float]]]:
    """(seed, header, rows) of a trace written by a result's ``to_csv``."""
    reader = csv.reader(io.StringIO(text))
    first = next(reader)
    if first[0] != "# seed":
        raise ValueError("trace CSV lacks the seed line")
    header = next(reader)
    rows = [[float(x) for x in r] for r in reader if r]
    return int(first[1]), header, rows


def read_sweep(json_text: str, csv_text: str) -> SweepResult:
    doc = loads(json_text)
    seed, header, rows = read_trace_csv(csv_text)
    if seed != doc["seed"]:
        raise ValueError("seed mismatch between JSON and CSV")
    arr = np.array(rows, dtype=float).reshape(-1, 3)
    norm = None if np.all(np.isnan(arr[:, 2])) else arr[:, 2]
    return SweepResult(doc["protocol"], arr[:, 0], arr[:, 1], doc["x_unit"], _fit_from_dict(doc["fit"]), norm,
                       doc["references"], doc["derived"], doc["seed"], doc["config"])


def read_propi(json_text: str, csv_text: str) -> PropiResult:
    doc = loads(json_text)
    seed, header, rows = read_trace_csv(csv_text)
    b1 = np.array([r[2] for r in rows if r[0] == 1.0])
    b2 = np.array([r[2] for r in rows if r[0] == 2.0])
    return PropiResult(b1, b2, doc["A_up"], doc["A_down"], doc["saturation_step"], doc["baseline_up"],
                       doc["baseline_down"], doc["omega_lock_kHz"], seed, doc["config"])
