"""13C layer profile, bath sampling, first-shell statistics and ODMR linewidths.

Geometry: ideal diamond lattice with the vacancy at the origin and the NV
axis ([111], towards the nitrogen) along z.  The growth direction is taken
parallel to the NV axis, so a site at NV-frame height ``z`` sits at depth
``z_nv + z`` in the layer profile.
"""

from __future__ import annotations

import csv
import functools
import io
import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import comb, erf

from .config import Constants, default_constants
from .fitting import FitError, minimize_least_squares
from .spin_core import (
    HyperfineTensor,
    NuclearSpinSite,
    carbon13,
    dipole_field_coefficient,
)


class GroupLabel(str, Enum):
    A = "A"
    B = "B"
    C = "C"
    D = "D"

    @property
    def count(self) -> int:
        return "ABCD".index(self.value)

    @classmethod
    def from_count(cls, k: int) -> "GroupLabel":
        if not 0 <= k <= 3:
            raise ValueError(f"first-shell count must be 0..3, got {k}")
        return cls("ABCD"[k])


class ConditionUnreachable(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Profile
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LayerProfile:
    """erf-smoothed 13C slab on a natural-abundance background.

    ``z0`` is the layer start and ``z_nv`` the NV depth, both in nm.  When
    ``z_nv`` is ``None`` the NV sits at the slab centre.
    """

    d_over_Z: float = 0.39
    lambda_over_Z: float = 0.2
    Z: float = 2.5
    c_peak: float = 0.984
    c_baseline: float = 0.011
    z0: float = 0.0
    z_nv: float | None = None

    def __post_init__(self):
        if not 0 <= self.c_baseline <= self.c_peak <= 1:
            raise ValueError("need 0 <= c_baseline <= c_peak <= 1")
        if not (self.d_over_Z > 0 and self.lambda_over_Z > 0 and self.Z > 0):
            raise ValueError("d_over_Z, lambda_over_Z and Z must be > 0")

    @classmethod
    def from_constants(cls, const: Constants | None = None, **kw) -> "LayerProfile":
        const = const or default_constants()
        base = dict(d_over_Z=const.d_over_Z, lambda_over_Z=const.lambda_over_Z, Z=const.Z_nm,
                    c_peak=const.c_peak, c_baseline=const.c_baseline)
        base.update(kw)
        return cls(**base)

    @property
    def d(self) -> float:
        return self.d_over_Z * self.Z

    @property
    def lam(self) -> float:
        return self.lambda_over_Z * self.Z

    @property
    def nv_depth(self) -> float:
        return self.z0 + 0.5 * self.d if self.z_nv is None else self.z_nv

    def replace(self, **kw) -> "LayerProfile":
        return LayerProfile(**{**asdict(self), **kw})

    def to_json(self) -> str:
        doc = {"units": {"Z": "nm", "z0": "nm", "z_nv": "nm", "c_peak": "fraction",
                         "c_baseline": "fraction", "d_over_Z": "1", "lambda_over_Z": "1"},
               **asdict(self)}
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LayerProfile":
        doc = json.loads(text)
        doc.pop("units", None)
        return cls(**doc)


def concentration_at(profile: LayerProfile, z):
    """13C fraction at depth ``z`` (nm); vectorised over ``z``."""
    z = np.asarray(z, dtype=float)
    u = (z - profile.z0) / profile.lam
    slab = 0.5 * (erf(u) - erf(u - profile.d / profile.lam))
    c = profile.c_baseline + (profile.c_peak - profile.c_baseline) * slab
    return float(c) if c.ndim == 0 else c


# ---------------------------------------------------------------------------
# Group probabilities
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GroupProbabilities:
    p_A: float
    p_B: float
    p_C: float
    p_D: float

    def __post_init__(self):
        p = self.as_array()
        if np.any(p < -1e-12) or np.any(p > 1 + 1e-12):
            raise ValueError(f"probabilities out of range: {p}")
        if abs(p.sum() - 1) > 1e-9:
            raise ValueError(f"probabilities sum to {p.sum()!r}, not 1")

    def as_array(self) -> np.ndarray:
        return np.array([self.p_A, self.p_B, self.p_C, self.p_D])

    @classmethod
    def from_array(cls, p) -> "GroupProbabilities":
        """Renormalize (tabulated percentages carry rounding); reject anything else."""
        p = np.asarray(p, dtype=float)
        if p.shape != (4,) or np.any(p < -1e-12) or abs(p.sum() - 1) > 0.01:
            raise ValueError(f"expected four nonnegative probabilities summing to 1, got {p.tolist()}")
        p = np.clip(p, 0.0, None)
        p = p / p.sum()
        return cls(*map(float, p))

    @classmethod
    def from_percent(cls, *values: float) -> "GroupProbabilities":
        return cls.from_array(np.array(values, dtype=float) / 100.0)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["group", "probability"])
        for g, p in zip("ABCD", self.as_array()):
            w.writerow([g, repr(float(p))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "GroupProbabilities":
        rows = {r["group"]: float(r["probability"]) for r in csv.DictReader(io.StringIO(text))}
        return cls(*(rows[g] for g in "ABCD"))


# Reference first-shell group statistics (measured samples and the binomial expectation), percent A..D
REFERENCE_GROUP_PERCENT = {
    "sample_A": (73.4, 13.7, 7.2, 5.7),
    "sample_B_5keV": (88.1, 11.9, 0.0, 0.0),
    "sample_B_2.5keV": (84.5, 14.6, 1.0, 0.0),
    "sample_B_1keV": (88.5, 11.5, 0.0, 0.0),
    "theoretical": (72.75, 13.065, 9.075, 5.11),
}


def _binomial3(c) -> np.ndarray:
    c = np.asarray(c, dtype=float)
    return np.stack([comb(3, k) * c**k * (1 - c) ** (3 - k) for k in range(4)], axis=-1)


def first_shell_group_probabilities(c: float) -> GroupProbabilities:
    if not 0 <= c <= 1:
        raise ValueError(f"concentration must lie in [0, 1], got {c}")
    return GroupProbabilities(*map(float, _binomial3(c)))


def uniform_depth_distribution(z_lo: float, z_hi: float, n: int = 401) -> list[tuple[float, float]]:
    """Midpoint-rule weights for NV depths uniform on [z_lo, z_hi] (nm)."""
    if not z_hi > z_lo:
        raise ValueError("need z_hi > z_lo")
    edges = np.linspace(z_lo, z_hi, n + 1)
    mids = 0.5 * (edges[1:] + edges[:-1])
    return [(float(z), 1.0 / n) for z in mids]


def default_depth_window(profile: LayerProfile, const: Constants | None = None) -> tuple[float, float]:
    const = const or default_constants()
    w = const.nv_window_nm
    return profile.z0 - w, profile.z0 + profile.d + w


def depth_averaged_group_probabilities(
    profile: LayerProfile, nv_depth_distribution: Sequence[tuple[float, float]]
) -> GroupProbabilities:
    if len(nv_depth_distribution) == 0:
        raise ValueError("empty NV depth distribution")
    z, w = (np.asarray(x, dtype=float) for x in zip(*nv_depth_distribution))
    if np.any(w < 0) or not w.sum() > 0:
        raise ValueError("weights must be nonnegative with a positive sum")
    p = (w[:, None] * _binomial3(concentration_at(profile, z))).sum(axis=0) / w.sum()
    return GroupProbabilities.from_array(p)


@dataclass
class GroupModelFit:
    model: str
    parameters: dict[str, float]
    fitted: GroupProbabilities
    per_group_residual: np.ndarray  # model - observed
    total_residual: float  # sum of squares
    converged: bool = True

    def to_dict(self) -> dict:
        return {"model": self.model, "parameters": self.parameters,
                "fitted": self.fitted.as_array().tolist(),
                "per_group_residual": self.per_group_residual.tolist(),
                "total_residual": self.total_residual, "converged": self.converged}


def fit_group_model(
    observed: GroupProbabilities,
    model: str = "single-c",
    profile: LayerProfile | None = None,
) -> GroupModelFit:
    """Least-squares fit of first-shell group statistics.

    Models:
      * ``single-c``: one binomial concentration.
      * ``two-region``: a fraction ``f`` of NVs at ``c_high``, the rest at
        ``c_low``.
      * ``profile``: NV depths uniform on a window ``[lo, hi]`` (in units of
        Z, relative to the layer start) through the given layer profile
        (defaults to the optimal-parameter profile).
    """
    obs = observed.as_array()
    if model == "single-c":
        names = ["c"]
        fwd = lambda p: _binomial3(p[0])
        starts = [[c] for c in np.linspace(0.05, 0.95, 10)]
        bounds = ([0.0], [1.0])
    elif model == "two-region":
        names = ["f", "c_low", "c_high"]

        def fwd(p):
            return p[0] * _binomial3(p[2]) + (1 - p[0]) * _binomial3(p[1])

        starts = [[f, lo, hi] for f in (0.05, 0.2, 0.5) for lo in (0.01, 0.1) for hi in (0.5, 0.9)]
        bounds = ([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
    elif model == "profile":
        prof = profile or LayerProfile()
        names = ["window_low_over_Z", "window_high_over_Z"]
        nodes = (np.arange(400) + 0.5) / 400

        def fwd(p):
            lo, hi = sorted(p)
            z = prof.z0 + prof.Z * (lo + (hi - lo) * nodes)
            return _binomial3(concentration_at(prof, z)).mean(axis=0)

        starts = [[lo, hi] for lo in np.linspace(-3.0, 0.3, 6) for hi in np.linspace(0.2, 4.0, 6) if hi > lo + 0.05]
        bounds = ([-20.0, -20.0], [20.0, 20.0])
    else:
        raise ValueError(f"unknown group model {model!r}")

    best = None
    for x0 in starts:
        try:
            res = minimize_least_squares(lambda p: fwd(p) - obs, x0, bounds=bounds)
        except FitError as exc:
            res = exc.best
            if res is None:
                continue
        if best is None or res.cost < best.cost:
            best = res
    if best is None:
        raise FitError(f"group model {model!r} could not be evaluated")
    params = np.array(best.x, dtype=float)
    if model == "profile":
        params = np.sort(params)
    if model == "two-region" and params[1] > params[2]:
        params = np.array([1 - params[0], params[2], params[1]])
    pred = fwd(params)
    resid = pred - obs
    return GroupModelFit(model, dict(zip(names, map(float, params))),
                         GroupProbabilities.from_array(pred), resid, float(resid @ resid), bool(best.converged))


# ---------------------------------------------------------------------------
# Lattice and hyperfine assignment
# ---------------------------------------------------------------------------

_ROT = np.array([
    [1 / math.sqrt(2), -1 / math.sqrt(2), 0.0],
    [1 / math.sqrt(6), 1 / math.sqrt(6), -2 / math.sqrt(6)],
    [1 / math.sqrt(3), 1 / math.sqrt(3), 1 / math.sqrt(3)],
])


@dataclass(frozen=True)
class SiteTable:
    positions: np.ndarray  # (n, 3) nm, NV frame
    first_shell: np.ndarray  # bool mask
    a_par: np.ndarray  # kHz
    a_perp: np.ndarray  # kHz

    @property
    def n(self) -> int:
        return len(self.positions)


@functools.lru_cache(maxsize=16)
def _lattice_positions(a: float, radius: float) -> tuple[np.ndarray, np.ndarray]:
    n = int(math.ceil(2 * radius / a)) + 2
    rng = np.arange(-n, n + 1)
    i, j, k = (g.ravel() for g in np.meshgrid(rng, rng, rng, indexing="ij"))
    fcc = np.stack([i, j, k], axis=1)[(i + j + k) % 2 == 0] * (a / 2)
    pts = np.concatenate([fcc, fcc + a / 4])
    nitrogen = np.array([a / 4, a / 4, a / 4])
    keep = (np.linalg.norm(pts, axis=1) > 1e-9) & (np.linalg.norm(pts - nitrogen, axis=1) > 1e-9)
    pts = pts[keep]
    pts = pts[np.linalg.norm(pts, axis=1) <= radius + 1e-9]
    first = np.abs(np.linalg.norm(pts, axis=1) - a * math.sqrt(3) / 4) < 1e-6
    rotated = pts @ _ROT.T
    order = np.lexsort((rotated[:, 2], rotated[:, 1], rotated[:, 0], np.linalg.norm(rotated, axis=1)))
    return rotated[order], first[order]


def dipolar_couplings(positions: np.ndarray, const: Constants, clamp: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised point-dipole (A_par, A_perp) in kHz.

    With ``clamp`` the radius is floored at the dipole validity floor, keeping
    the direction: the tabulated value used for sites inside the floor.
    """
    r = np.linalg.norm(positions, axis=1)
    cos_t = positions[:, 2] / r
    sin_t = np.hypot(positions[:, 0], positions[:, 1]) / r
    r_eff = np.maximum(r, const.dipole_floor_nm) if clamp else r
    k = const.gamma_c13_khz_per_gauss * dipole_field_coefficient(const) / r_eff**3
    return k * (3 * cos_t**2 - 1), 3 * k * sin_t * cos_t


def site_table(radius: float | None = None, const: Constants | None = None) -> SiteTable:
    """All carbon sites within ``radius`` of the vacancy with their couplings.

    First-shell sites get the tabulated first-shell contact coupling (no
    transverse part); sites inside the dipole floor get the floor-clamped
    dipolar value; everything else is point-dipole.
    """
    const = const or default_constants()
    radius = const.bath_radius_nm if radius is None else radius
    pos, first = _lattice_positions(const.lattice_constant_nm, float(radius))
    a_par, a_perp = dipolar_couplings(pos, const)
    a_par = np.where(first, const.first_shell_coupling_mhz * 1e3, a_par)
    a_perp = np.where(first, 0.0, a_perp)
    return SiteTable(pos, first, a_par, a_perp)


def assign_hyperfine(position, first_shell: bool = False, const: Constants | None = None) -> HyperfineTensor:
    const = const or default_constants()
    if first_shell:
        return HyperfineTensor(const.first_shell_coupling_mhz * 1e3, 0.0)
    a_par, a_perp = dipolar_couplings(np.asarray(position, dtype=float)[None, :], const)
    return HyperfineTensor(float(a_par[0]), float(a_perp[0]))


# ---------------------------------------------------------------------------
# Bath sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BathConfiguration:
    sites: tuple[NuclearSpinSite, ...]
    first_shell_count: int
    rng_seed: int
    z_nv: float

    def __post_init__(self):
        if sum(s.first_shell for s in self.sites) != self.first_shell_count:
            raise ValueError("first_shell_count does not match the flagged sites")

    @property
    def group(self) -> GroupLabel:
        return GroupLabel.from_count(self.first_shell_count)

    def bath_sites(self) -> list[NuclearSpinSite]:
        return [s for s in self.sites if not s.first_shell]


def _condition_first_shell(rng, p_shell: np.ndarray, k: int, cap: int) -> np.ndarray:
    drawn = 0
    chunk = min(cap, 4096)
    while drawn < cap:
        n = min(chunk, cap - drawn)
        occ = rng.random((n, len(p_shell))) < p_shell
        hits = np.flatnonzero(occ.sum(axis=1) == k)
        if hits.size:
            return occ[hits[0]]
        drawn += n
        chunk = min(chunk * 4, 1 << 18)
    raise ConditionUnreachable(f"no first-shell draw with {k} spins after {cap} attempts")


def sample_bath_configuration(
    profile: LayerProfile,
    condition: GroupLabel | str | None = None,
    seed: int = 0,
    radius: float | None = None,
    const: Constants | None = None,
) -> BathConfiguration:
    """Occupy lattice sites independently with probability c(depth).

    With a ``condition``, the first shell is redrawn until it holds the
    group's number of spins (bounded by ``conditioned_retry_cap``).
    """
    const = const or default_constants()
    table = site_table(radius, const)
    rng = np.random.default_rng(seed)
    z_nv = profile.nv_depth
    c = concentration_at(profile, z_nv + table.positions[:, 2])
    occ = rng.random(table.n) < c
    if condition is not None:
        k = GroupLabel(condition).count
        shell = np.flatnonzero(table.first_shell)
        occ[shell] = _condition_first_shell(rng, np.asarray(c)[shell], k, const.conditioned_retry_cap)
    species = carbon13(const)
    sites = tuple(
        NuclearSpinSite(tuple(map(float, table.positions[i])), species,
                        HyperfineTensor(float(table.a_par[i]), float(table.a_perp[i])), bool(table.first_shell[i]))
        for i in np.flatnonzero(occ)
    )
    return BathConfiguration(sites, int(occ[table.first_shell].sum()), int(seed), float(z_nv))


# ---------------------------------------------------------------------------
# ODMR sticks and linewidths
# ---------------------------------------------------------------------------


def odmr_stick_spectrum(group: GroupLabel | str, first_shell_coupling: float = 130.0) -> list[tuple[float, float]]:
    """Lines (offset MHz, weight) for k equally coupled first-shell spins."""
    if not first_shell_coupling > 0:
        raise ValueError("coupling must be > 0")
    k = GroupLabel(group).count
    lines = [((k - 2 * m) * first_shell_coupling / 2, comb(k, m) / 2**k) for m in range(k + 1)]
    return sorted((float(o) + 0.0, float(w)) for o, w in lines)


@dataclass(frozen=True)
class LinewidthEstimate:
    group: GroupLabel
    delta_nu: float  # MHz
    std_dev: float  # MHz
    n_samples: int
    effective_samples: float | None = None

    def __post_init__(self):
        if not self.delta_nu >= 0:
            raise ValueError(f"delta_nu must be >= 0, got {self.delta_nu}")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")


def configuration_linewidth(config: BathConfiguration | Sequence[NuclearSpinSite], intrinsic: float = 0.0) -> float:
    """Second-moment width (MHz): sqrt(sum A_par^2)/2 over non-first-shell spins + intrinsic."""
    sites = config.sites if isinstance(config, BathConfiguration) else config
    s = sum((site.hyperfine.A_parallel * 1e-3) ** 2 for site in sites if not site.first_shell)
    return math.sqrt(s) / 2 + intrinsic


def simulate_linewidths(
    profile: LayerProfile,
    n_samples: int,
    seed: int = 0,
    depth_window: tuple[float, float] | None = None,
    intrinsic: float | None = None,
    radius: float | None = None,
    const: Constants | None = None,
) -> dict[GroupLabel, LinewidthEstimate]:
    """Monte Carlo linewidth statistics for all four groups at once.

    Each sample draws an NV depth uniformly on ``depth_window`` and a bath
    occupation.  The first shell is independent of the bath given the depth,
    so conditioning on a group reweights samples by
    P(first-shell count = k | depth), which is exact in expectation and
    equivalent to rejection sampling.
    """
    const = const or default_constants()
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    intrinsic = const.intrinsic_linewidth_mhz if intrinsic is None else intrinsic
    radius = const.linewidth_radius_nm if radius is None else radius
    lo, hi = depth_window or default_depth_window(profile, const)
    table = site_table(radius, const)
    bath = ~table.first_shell
    w = (table.a_par[bath] * 1e-3) ** 2
    z_bath = table.positions[bath, 2]
    planes, plane_idx = np.unique(np.round(z_bath, 9), return_inverse=True)
    z_shell = table.positions[table.first_shell, 2]

    rng = np.random.default_rng(seed)
    z_nv = rng.uniform(lo, hi, n_samples)
    widths = np.empty(n_samples)
    chunk = max(1, min(n_samples, 2_000_000 // max(len(w), 1)))
    w32 = w.astype(np.float32)
    for s in range(0, n_samples, chunk):
        zc = z_nv[s:s + chunk]
        c_planes = concentration_at(profile, zc[:, None] + planes[None, :]).astype(np.float32)
        occ = rng.random((len(zc), len(w)), dtype=np.float32) < c_planes[:, plane_idx]
        widths[s:s + chunk] = np.sqrt(occ.astype(np.float32) @ w32) / 2 + intrinsic

    c_shell = concentration_at(profile, z_nv[:, None] + z_shell[None, :])
    weights = _poisson_binomial(c_shell)  # (n, 4)
    out = {}
    for k, g in enumerate(GroupLabel):
        wk = weights[:, k]
        tot = wk.sum()
        if not tot > 0:
            raise ConditionUnreachable(f"group {g.value} has zero probability for this profile")
        mean = float(wk @ widths / tot)
        var = float(wk @ (widths - mean) ** 2 / tot)
        ess = float(tot**2 / (wk @ wk))
        out[g] = LinewidthEstimate(g, mean, math.sqrt(max(var, 0.0)), n_samples, ess)
    return out


def _poisson_binomial(p: np.ndarray) -> np.ndarray:
    """Distribution of the number of successes for rows of independent probabilities."""
    dist = np.zeros((p.shape[0], p.shape[1] + 1))
    dist[:, 0] = 1.0
    for j in range(p.shape[1]):
        pj = p[:, j:j + 1]
        dist[:, 1:] = dist[:, 1:] * (1 - pj) + dist[:, :-1] * pj
        dist[:, 0] *= 1 - p[:, j]
    return dist


def simulated_group_linewidth(
    profile: LayerProfile,
    group: GroupLabel | str,
    n_samples: int,
    seed: int = 0,
    **kw,
) -> LinewidthEstimate:
    return simulate_linewidths(profile, n_samples, seed, **kw)[GroupLabel(group)]


@dataclass
class LayerFit:
    d_over_Z: float
    lambda_over_Z: float
    residual: float
    model: dict[GroupLabel, LinewidthEstimate]
    iterations: int

    def to_dict(self) -> dict:
        return {
            "d_over_Z": self.d_over_Z,
            "lambda_over_Z": self.lambda_over_Z,
            "residual": self.residual,
            "iterations": self.iterations,
            "model": {g.value: {"delta_nu_MHz": e.delta_nu, "std_dev_MHz": e.std_dev}
                      for g, e in self.model.items()},
        }


def fit_layer_profile(
    target: Sequence[LinewidthEstimate],
    n_samples: int = 10_000,
    seed: int = 0,
    template: LayerProfile | None = None,
    grid: Sequence[float] = (0.1, 0.2, 0.35, 0.5, 0.7, 1.0),
    const: Constants | None = None,
    **sim_kw,
) -> LayerFit:
    """Fit (d/Z, lambda/Z) to per-group linewidth means and spreads.

    Coarse grid over ``grid x grid`` followed by damped least squares from the
    best grid point.  The forward model reuses ``seed`` at every evaluation
    (common random numbers), so the objective is deterministic.
    """
    const = const or default_constants()
    target = list(target)
    if len({t.group for t in target}) < 2:
        raise ValueError("need at least two groups to fit")
    tvec = np.array([[t.delta_nu, t.std_dev] for t in target]).ravel()
    if not np.any(tvec != 0):
        raise ValueError("degenerate target: all linewidths are zero")
    template = template or LayerProfile.from_constants(const)
    groups = [GroupLabel(t.group) for t in target]

    def forward(p):
        prof = template.replace(d_over_Z=float(p[0]), lambda_over_Z=float(p[1]))
        return simulate_linewidths(prof, n_samples, seed, const=const, **sim_kw)

    def residual(p):
        m = forward(p)
        return np.array([[m[g].delta_nu, m[g].std_dev] for g in groups]).ravel() - tvec

    best_p, best_c = None, math.inf
    for d in grid:
        for lam in grid:
            r = residual([d, lam])
            c = float(r @ r)
            if c < best_c:
                best_p, best_c = [d, lam], c
    res = minimize_least_squares(residual, best_p, bounds=([1e-3, 1e-3], [1.0, 1.0]),
                                 options={"fd_step": 2e-3, "max_iter": 40, "ftol": 1e-6, "xtol": 1e-4})
    p = np.asarray(res.x, dtype=float)
    return LayerFit(float(p[0]), float(p[1]), float(2 * res.cost), forward(p), res.iterations)
