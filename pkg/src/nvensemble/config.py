"""Physical constants and protocol defaults.

Defaults ship in ``defaults.json`` next to this module.  A user file can
override any subset of keys; its path is taken from the ``NVENSEMBLE_CONFIG``
environment variable when no explicit path is given.
"""

from __future__ import annotations

import dataclasses
import functools
import json
import os
from dataclasses import dataclass, fields
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

ENV_VAR = "NVENSEMBLE_CONFIG"


@dataclass(frozen=True)
class Constants:
    """Configuration constants.  Units are encoded in the field names."""

    B0_gauss: float
    gamma_c13_khz_per_gauss: float
    gamma_e_mhz_per_gauss: float
    zero_field_splitting_mhz: float
    first_shell_coupling_mhz: float
    lattice_constant_nm: float
    dipole_floor_nm: float
    max_exact_sites: int
    laser_duration_us: float
    laser_reset_fidelity: float
    mw_rabi_khz: float
    rf_rabi_khz: float
    spin_lock_us: float
    propi_repeats: int
    control_repeats: int
    contrast: float
    d_over_Z: float
    lambda_over_Z: float
    Z_nm: float
    c_peak: float
    c_baseline: float
    nv_window_nm: float
    bath_radius_nm: float
    linewidth_radius_nm: float
    intrinsic_linewidth_mhz: float
    conditioned_retry_cap: int

    def replace(self, **changes: Any) -> "Constants":
        return _coerce(dataclasses.replace(self, **changes))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(c: Constants) -> Constants:
    # JSON gives ints where floats are meant and vice versa; normalise once.
    values = {}
    for f in fields(c):
        v = getattr(c, f.name)
        values[f.name] = int(v) if f.type in ("int", int) else float(v)
    return Constants(**values)


def _check_keys(data: Mapping[str, Any], source: str) -> None:
    known = {f.name for f in fields(Constants)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise KeyError(f"unknown constant(s) in {source}: {', '.join(unknown)}")


@functools.lru_cache(maxsize=None)
def default_constants() -> Constants:
    text = resources.files(__package__).joinpath("defaults.json").read_text()
    data = json.loads(text)
    return _coerce(Constants(**data))


def load_constants(
    path: str | os.PathLike | None = None,
    overrides: Mapping[str, Any] | None = None,
) -> Constants:
    """Defaults, then the config file (explicit path or env var), then overrides."""
    const = default_constants()
    if path is None:
        path = os.environ.get(ENV_VAR) or None
    if path is not None:
        data = json.loads(Path(path).read_text())
        data = data.get("constants", data) if isinstance(data, dict) else data
        _check_keys(data, str(path))
        const = const.replace(**data)
    if overrides:
        _check_keys(overrides, "overrides")
        const = const.replace(**overrides)
    return const
