"""Experiment generators and runners: PROPI, T1, nuclear Rabi, FID and Hahn echo.

Every runner builds its pulse program as DSL text (``*_program``), compiles
it block by block and evolves the blocks in order:

1. polarization block (``block1`` of PROPI, ``M`` steps) from thermal nuclei,
2. an evolution window (delay, RF pulse, FID or echo),
3. a readout block (``block1`` again) whose per-step fluorescence is reduced
   to an area.

Relaxation from the system's :class:`RelaxationParams` acts only during the
evolution window; the polarization and readout blocks are treated as ideal.
Sweeps over an :class:`Ensemble` average the per-member areas with weights.
"""

from __future__ import annotations

import csv
import io
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence, Union

import numpy as np

from .config import Constants, default_constants
from .dsl import Block, SequenceAST, Timeline, parse, validate
from .evolution import Engine, MeasurementModel, QuantumState, fluorescence
from .fitting import DecayFit, FitError, OscillationFit, fit_damped_cosine, fit_exponential
from .spin_core import (
    HyperfineTensor,
    NuclearSpinSite,
    RelaxationParams,
    SpinSystemSpec,
    StaticField,
    carbon13,
    larmor_frequency,
)

# ---------------------------------------------------------------------------
# Configuration and results
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PropiConfig:
    """Shared protocol settings.  Times in µs, frequencies in kHz, phases in degrees.

    ``omega_lock=None`` locks at the nuclear Larmor frequency of the system.
    ``initial`` selects the nuclear state PROPI starts from: ``"thermal"``
    (fresh, unpolarized) or ``"steady"`` (the periodic steady state reached
    by repeating the full block1/block2 cycle).
    """

    M: int = 100
    N: int = 100
    tau_SL: float = 20.0
    omega_lock: float | None = None
    phase_block2_offset: float = 180.0
    lock_phase: float = 270.0
    laser_us: float = 3.0
    mw_rabi: float = 10000.0
    rf_rabi: float = 5.0
    readout_repeats: int | None = None
    initial: str = "thermal"
    seed: int = 0
    check_invariants: bool = False
    max_cycles: int = 200

    def __post_init__(self):
        if self.M < 1 or self.N < 1:
            raise ValueError("M and N must be >= 1")
        if not self.tau_SL > 0:
            raise ValueError("tau_SL must be > 0")
        if self.initial not in ("thermal", "steady"):
            raise ValueError(f"unknown initial state {self.initial!r}")
        if self.readout_repeats is not None and self.readout_repeats < 1:
            raise ValueError("readout_repeats must be >= 1")

    @classmethod
    def from_constants(cls, const: Constants | None = None, **kw) -> "PropiConfig":
        const = const or default_constants()
        base = dict(M=const.propi_repeats, N=const.propi_repeats, tau_SL=const.spin_lock_us,
                    laser_us=const.laser_duration_us, mw_rabi=const.mw_rabi_khz, rf_rabi=const.rf_rabi_khz)
        base.update(kw)
        return cls(**base)

    @property
    def n_readout(self) -> int:
        return self.readout_repeats or self.M

    def replace(self, **kw) -> "PropiConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class PropiResult:
    block1: np.ndarray  # per-step fluorescence, length M
    block2: np.ndarray  # length N
    A_up: float
    A_down: float
    saturation_step: int
    baseline_up: float
    baseline_down: float
    omega_lock: float
    seed: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.A_up < 0 or self.A_down < 0:
            raise ValueError("areas must be >= 0")

    @property
    def per_step_fluorescence(self) -> np.ndarray:
        return np.concatenate([self.block1, self.block2])

    @property
    def asymmetry(self) -> float:
        """|A_up - A_down| / A_up (0 when both vanish)."""
        if self.A_up == 0:
            return 0.0 if self.A_down == 0 else math.inf
        return abs(self.A_up - self.A_down) / self.A_up

    def to_dict(self) -> dict:
        return {
            "protocol": "propi",
            "seed": self.seed,
            "config": self.config,
            "omega_lock_kHz": self.omega_lock,
            "A_up": self.A_up,
            "A_down": self.A_down,
            "asymmetry": self.asymmetry,
            "saturation_step": self.saturation_step,
            "baseline_up": self.baseline_up,
            "baseline_down": self.baseline_down,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["# seed", self.seed])
        w.writerow(["block", "step", "fluorescence"])
        for name, trace in (("1", self.block1), ("2", self.block2)):
            for i, s in enumerate(trace):
                w.writerow([name, i, repr(float(s))])
        return buf.getvalue()


@dataclass
class SweepResult:
    protocol: str
    x_values: np.ndarray
    y_values: np.ndarray  # readout areas
    x_unit: str
    fitted: DecayFit | OscillationFit | None = None
    normalized: np.ndarray | None = None
    references: dict = field(default_factory=dict)
    derived: dict = field(default_factory=dict)
    seed: int = 0
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x_values = np.asarray(self.x_values, dtype=float)
        self.y_values = np.asarray(self.y_values, dtype=float)
        if self.x_values.shape != self.y_values.shape:
            raise ValueError("x_values and y_values differ in length")
        if self.normalized is not None and np.shape(self.normalized) != self.x_values.shape:
            raise ValueError("normalized differs in length")

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "seed": self.seed,
            "config": self.config,
            "x_unit": self.x_unit,
            "n_points": int(self.x_values.size),
            "references": self.references,
            "derived": self.derived,
            "fit": None if self.fitted is None else self.fitted.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["# seed", self.seed])
        w.writerow([f"x_{self.x_unit}", "area", "normalized"])
        norm = self.normalized if self.normalized is not None else [math.nan] * self.x_values.size
        for x, y, n in zip(self.x_values, self.y_values, norm):
            w.writerow([repr(float(x)), repr(float(y)), repr(float(n))])
        return buf.getvalue()


@dataclass(frozen=True)
class Ensemble:
    """Weighted set of independent small spin systems, averaged at readout."""

    members: tuple[SpinSystemSpec, ...]
    weights: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "members", tuple(self.members))
        if not self.members:
            raise ValueError("empty ensemble")
        w = np.ones(len(self.members)) if self.weights is None else np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.members),) or np.any(w < 0) or not w.sum() > 0:
            raise ValueError("weights must be nonnegative, one per member, with a positive sum")
        object.__setattr__(self, "weights", tuple(float(x) for x in w / w.sum()))

    def with_relaxation(self, relaxation: RelaxationParams) -> "Ensemble":
        return Ensemble(tuple(m.with_relaxation(relaxation) for m in self.members), self.weights)


SystemLike = Union[SpinSystemSpec, Ensemble]


def _members(system: SystemLike) -> list[tuple[SpinSystemSpec, float]]:
    if isinstance(system, Ensemble):
        return list(zip(system.members, system.weights))
    return [(system, 1.0)]


def gaussian_hyperfine_ensemble(
    mean_A_parallel: float,
    sigma: float,
    A_perpendicular: float = 50.0,
    n_nodes: int = 16,
    B0: float | None = None,
    relaxation: RelaxationParams | None = None,
    const: Constants | None = None,
) -> Ensemble:
    """Single-nucleus members with A_par normally distributed (Gauss-Hermite nodes)."""
    const = const or default_constants()
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x, w = np.polynomial.hermite.hermgauss(n_nodes)
    field_ = StaticField(const.B0_gauss if B0 is None else B0)
    species = carbon13(const)
    members = []
    for xi in x:
        a_par = mean_A_parallel + math.sqrt(2) * sigma * xi
        site = NuclearSpinSite((0.0, 0.0, 1.0), species, HyperfineTensor(a_par, A_perpendicular))
        members.append(SpinSystemSpec(field_, (site,), relaxation or RelaxationParams(), const.max_exact_sites))
    return Ensemble(tuple(members), tuple(w / w.sum()))


def cluster_ensemble(
    profile,
    n_members: int = 8,
    sites_per_member: int = 2,
    seed: int = 0,
    B0: float | None = None,
    relaxation: RelaxationParams | None = None,
    radius: float | None = None,
    const: Constants | None = None,
) -> Ensemble:
    """Ensemble of small clusters cut from sampled 13C baths.

    Member ``i`` uses the bath drawn with seed ``seed + i`` and keeps its
    ``sites_per_member`` most strongly coupled non-first-shell spins; the
    first shell (~100 MHz) is far off any nuclear resonance that the
    protocols address.
    """
    from .lattice import sample_bath_configuration

    const = const or default_constants()
    if n_members < 1 or sites_per_member < 0:
        raise ValueError("need n_members >= 1 and sites_per_member >= 0")
    if sites_per_member > const.max_exact_sites:
        raise ValueError(f"sites_per_member exceeds the exact-evolution cap {const.max_exact_sites}")
    field_ = StaticField(const.B0_gauss if B0 is None else B0)
    members = []
    for i in range(n_members):
        bath = sample_bath_configuration(profile, seed=seed + i, radius=radius, const=const).bath_sites()
        bath.sort(key=lambda s: -math.hypot(s.hyperfine.A_parallel, s.hyperfine.A_perpendicular))
        members.append(SpinSystemSpec(field_, tuple(bath[:sites_per_member]),
                                      relaxation or RelaxationParams(), const.max_exact_sites))
    return Ensemble(tuple(members))


# ---------------------------------------------------------------------------
# Readout processing
# ---------------------------------------------------------------------------


def area_under_curve(signal: Sequence[float], baseline: float | None = None) -> float:
    """Discrete area sum |s_i - baseline|.

    Without an explicit baseline, the mean of the last 10% of the signal
    (at least one point) is used.
    """
    s = np.asarray(signal, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("empty signal")
    if baseline is None:
        baseline = tail_baseline(s)
    return float(np.abs(s - baseline).sum())


def tail_baseline(signal: Sequence[float], fraction: float = 0.1) -> float:
    s = np.asarray(signal, dtype=float).ravel()
    if s.size == 0:
        raise ValueError("empty signal")
    k = max(1, int(round(fraction * s.size)))
    return float(s[-k:].mean())


def saturation_step(signal: Sequence[float], baseline: float, rel_tol: float = 0.01) -> int:
    """First step whose excess over the baseline is within ``rel_tol`` of the peak excess."""
    exc = np.abs(np.asarray(signal, dtype=float) - baseline)
    peak = float(exc.max()) if exc.size else 0.0
    if peak <= 1e-12:
        return 0
    below = np.flatnonzero(exc <= rel_tol * peak)
    for i in below:
        if np.all(exc[i:] <= rel_tol * peak):
            return int(i)
    return int(exc.size)


def hartmann_hahn_detuning(omega_lock: float, system: SpinSystemSpec | None = None,
                           const: Constants | None = None) -> float:
    """Lock Rabi frequency minus the nuclear Larmor frequency (kHz); zero is matched."""
    const = const or default_constants()
    if system is None:
        return omega_lock - larmor_frequency(carbon13(const), StaticField(const.B0_gauss))
    species = system.sites[0].species if system.sites else carbon13(const)
    return omega_lock - larmor_frequency(species, system.field)


def effective_lock_frequency(system: SystemLike, const: Constants | None = None) -> float:
    """Lock Rabi frequency at the dressed-state resonance, omega_L + <A_par>/2 (kHz).

    With couplings acting only in the ms=-1 branch, the nuclear splitting
    averaged over the spin-locked NV is shifted by half the parallel
    coupling, so the transfer peaks slightly above the bare Larmor match.
    """
    const = const or default_constants()
    first = _members(system)[0][0]
    couplings = [s.hyperfine.A_parallel for m, _ in _members(system) for s in m.sites]
    shift = 0.5 * float(np.mean(couplings)) if couplings else 0.0
    return -hartmann_hahn_detuning(0.0, first, const) + shift


# ---------------------------------------------------------------------------
# Program generators (DSL text)
# ---------------------------------------------------------------------------


def _num(x: float) -> str:
    x = float(x)
    return str(int(x)) if x == int(x) and abs(x) < 1e15 else repr(x)


def _header(cfg: PropiConfig) -> str:
    return f"rabi mw {_num(cfg.mw_rabi)} kHz\nrabi rf {_num(cfg.rf_rabi)} kHz\n"


def _step_text(cfg: PropiConfig, omega_lock: float, phase: float) -> str:
    return (f"laser {_num(cfg.laser_us)}; mw pi/2 phase {_num(phase % 360)}; "
            f"mw lock {_num(cfg.tau_SL)} phase {_num(cfg.lock_phase % 360)} rabi {_num(omega_lock)}; "
            f"mw pi/2 phase {_num(phase % 360)}")


def propi_program(cfg: PropiConfig, omega_lock: float) -> str:
    """Full PROPI program: block1 x M, block2 (pi/2 phases offset) x N, final read."""
    return (_header(cfg)
            + f"block polarize_up repeat {cfg.M} {{ {_step_text(cfg, omega_lock, 0.0)} }}\n"
            + f"block polarize_down repeat {cfg.N} {{ {_step_text(cfg, omega_lock, cfg.phase_block2_offset)} }}\n"
            + f"block read repeat 1 {{ laser {_num(cfg.laser_us)} }}\n")


def _window_program(cfg: PropiConfig, omega_lock: float, window: str) -> str:
    return (_header(cfg)
            + f"block polarize repeat {cfg.M} {{ {_step_text(cfg, omega_lock, 0.0)} }}\n"
            + f"block window repeat 1 {{ {window} }}\n"
            + f"block readout repeat {cfg.n_readout} {{ {_step_text(cfg, omega_lock, 0.0)} }}\n"
            + f"block read repeat 1 {{ laser {_num(cfg.laser_us)} }}\n")


def t1_program(cfg: PropiConfig, omega_lock: float, delay_ms: float) -> str:
    return _window_program(cfg, omega_lock, f"laser {_num(cfg.laser_us)}; wait {_num(delay_ms * 1e3)}")


def rabi_program(cfg: PropiConfig, omega_lock: float, tau_rf_us: float, rf_rabi: float) -> str:
    return _window_program(cfg, omega_lock,
                           f"laser {_num(cfg.laser_us)}; rf pulse dur {_num(tau_rf_us)} phase 0 rabi {_num(rf_rabi)}")


def fid_program(cfg: PropiConfig, omega_lock: float, tau_ms: float, nv_state: str = "ms0") -> str:
    hold = "mw pi; " if nv_state == "ms-1" else ""
    lz = _num(cfg.laser_us)
    return _window_program(cfg, omega_lock,
                           f"laser {lz}; rf pi/2 phase 0; {hold}wait {_num(tau_ms * 1e3)}; laser {lz}; rf pi/2 phase 0")


def echo_program(cfg: PropiConfig, omega_lock: float, tau_ms: float, nv_state: str = "ms-1") -> str:
    hold = "mw pi; " if nv_state == "ms-1" else ""
    lz = _num(cfg.laser_us)
    tau = _num(tau_ms * 1e3)
    return _window_program(
        cfg, omega_lock,
        f"laser {lz}; rf pi/2 phase 0; laser {lz}; {hold}wait {tau}; laser {lz}; rf pi phase 0; "
        f"laser {lz}; {hold}wait {tau}; laser {lz}; rf pi/2 phase 180")


def _block_timelines(source: str) -> dict[str, tuple[Timeline, int]]:
    """One-repetition timeline for each named block, with its repeat count."""
    ast = parse(source)
    out = {}
    for b in ast.blocks:
        single = SequenceAST((Block(b.name, b.events, 1),), ast.parameters, ast.rabi)
        out[b.name] = (validate(single), b.repeat)
    return out


# ---------------------------------------------------------------------------
# Execution
# ---------------------------------------------------------------------------


def _nuclear_state(n: int, kind: str) -> QuantumState:
    return QuantumState.product(0, kind, n)


def _flip_nuclei(state: QuantumState) -> QuantumState:
    """Apply X to every nucleus."""
    n = state.n_sites
    perm = np.arange(2 ** n) ^ (2 ** n - 1)
    full = np.concatenate([perm, perm + 2 ** n])
    return QuantumState(state.rho[np.ix_(full, full)], n)


def larmor_phase_average(state: QuantumState) -> QuantumState:
    """Average over a random start time under the nuclear Zeeman term.

    Shots are not synchronized with the nuclear Larmor precession, so the
    shot average removes every coherence between different total-Fz
    sectors of the nuclear register.
    """
    n = state.n_sites
    fz = np.zeros(2 ** n, dtype=int)
    for k in range(n):
        fz += 1 - 2 * ((np.arange(2 ** n) >> (n - 1 - k)) & 1)
    fz = np.concatenate([fz, fz])
    return QuantumState(np.where(fz[:, None] == fz[None, :], state.rho, 0.0), n)


def _hermitian_basis(d: int) -> list[np.ndarray]:
    basis = []
    for i in range(d):
        m = np.zeros((d, d), dtype=complex)
        m[i, i] = 1
        basis.append(m)
        for j in range(i + 1, d):
            m = np.zeros((d, d), dtype=complex)
            m[i, j] = m[j, i] = 1 / math.sqrt(2)
            basis.append(m)
            m = np.zeros((d, d), dtype=complex)
            m[i, j], m[j, i] = 1j / math.sqrt(2), -1j / math.sqrt(2)
            basis.append(m)
    return basis


class _MemberRunner:
    """Polarize / window / readout machinery for one small spin system."""

    def __init__(self, system: SpinSystemSpec, cfg: PropiConfig, const: Constants, omega_lock: float):
        self.system = system
        self.cfg = cfg
        self.const = const
        self.model = MeasurementModel(contrast=const.contrast)
        ideal = system.with_relaxation(RelaxationParams())
        self.ideal = Engine(ideal, self.model, const, cfg.check_invariants)
        self.relaxing = Engine(system, self.model, const, cfg.check_invariants)
        self.omega_lock = omega_lock
        self._readout_map: np.ndarray | None = None
        self._step_up, _ = _block_timelines(propi_program(cfg, omega_lock))["polarize_up"]
        self._polarized: QuantumState | None = None
        self.baseline: float | None = None

    def run_steps(self, state: QuantumState, step: Timeline, n: int, engine: Engine | None = None,
                  t_offset: float = 0.0) -> tuple[np.ndarray, QuantumState]:
        """Per-step readouts (fluorescence at the next laser) of ``n`` repetitions."""
        engine = engine or self.ideal
        signals = np.empty(n)
        for k in range(n):
            traj = engine.evolve(step, state, record="lasers", t_offset=t_offset + k * step.total_duration)
            if k > 0:
                signals[k - 1] = traj.records[0].fluorescence
            state = traj.final
        signals[n - 1] = fluorescence(state, self.model)
        return signals, state

    def polarized(self) -> QuantumState:
        if self._polarized is None:
            sig, st = self.run_steps(_nuclear_state(self.system.n_sites, "thermal"), self._step_up, self.cfg.M)
            self.baseline = tail_baseline(sig)
            self._polarized = larmor_phase_average(st)
        return self._polarized

    def _build_readout_map(self) -> np.ndarray:
        n = self.system.n_sites
        rows = []
        p0 = np.array([[1, 0], [0, 0]], dtype=complex)
        saved = self.ideal.check_invariants
        self.ideal.check_invariants = False  # basis elements are not physical states
        try:
            for b in _hermitian_basis(2 ** n):
                sig, _ = self.run_steps(QuantumState(np.kron(p0, b), n), self._step_up, self.cfg.n_readout)
                rows.append((1.0 - sig / self.model.bright_rate) / self.model.contrast)
        finally:
            self.ideal.check_invariants = saved
        return np.array(rows)

    def readout_signal(self, state: QuantumState, use_map: bool) -> np.ndarray:
        if not use_map:
            sig, _ = self.run_steps(state, self._step_up, self.cfg.n_readout)
            return sig
        if self._readout_map is None:
            self._readout_map = self._build_readout_map()
        rho_n = state.nuclear_reduced()
        coef = np.array([np.trace(b @ rho_n).real for b in _hermitian_basis(rho_n.shape[0])])
        p_m1 = coef @ self._readout_map
        return self.model.bright_rate * (1.0 - self.model.contrast * p_m1)

    def readout_area(self, state: QuantumState, use_map: bool) -> float:
        self.polarized()
        return area_under_curve(self.readout_signal(state, use_map), self.baseline)

    def run_window(self, state: QuantumState, window: Timeline, t_offset: float) -> QuantumState:
        if window.total_duration <= 0:
            return state
        return self.relaxing.evolve(window, state, record="none", t_offset=t_offset).final

    def references(self, use_map: bool) -> dict[str, float]:
        pol = self.polarized()
        n = self.system.n_sites
        return {
            "polarized": self.readout_area(pol, use_map),
            "thermal": self.readout_area(_nuclear_state(n, "thermal"), use_map),
            "inverted": self.readout_area(_flip_nuclei(pol), use_map),
        }


def _lock_frequency(system: SystemLike, cfg: PropiConfig, const: Constants, warn: bool = True) -> float:
    first = _members(system)[0][0]
    if cfg.omega_lock is None:
        return -hartmann_hahn_detuning(0.0, first, const)
    det = hartmann_hahn_detuning(cfg.omega_lock, first, const)
    det_eff = cfg.omega_lock - effective_lock_frequency(system, const)
    if warn and min(abs(det), abs(det_eff)) > 1.0:
        warnings.warn(f"spin-lock Rabi frequency is detuned by {det:.3g} kHz from the Larmor frequency; "
                      "transfer will be reduced", stacklevel=3)
    return cfg.omega_lock


def run_propi(system: SpinSystemSpec, config: PropiConfig | None = None,
              const: Constants | None = None) -> PropiResult:
    """Polarization readout by polarization inversion.

    Block 1 (``M`` steps) polarizes the nuclei; block 2 (``N`` steps, both
    pi/2 phases offset by ``phase_block2_offset``) polarizes them the other
    way.  Fluorescence is read at every step; the areas above the saturated
    baseline of each block are ``A_up`` and ``A_down``.
    """
    const = const or default_constants()
    cfg = config or PropiConfig.from_constants(const)
    omega = _lock_frequency(system, cfg, const)
    runner = _MemberRunner(system, cfg, const, omega)
    blocks = _block_timelines(propi_program(cfg, omega))
    up, _ = blocks["polarize_up"]
    down, _ = blocks["polarize_down"]
    n = system.n_sites
    state = _nuclear_state(n, "thermal")
    if cfg.initial == "steady":
        for _ in range(cfg.max_cycles):
            prev = state.nuclear_reduced()
            _, state = runner.run_steps(state, up, cfg.M)
            _, state = runner.run_steps(state, down, cfg.N)
            if np.max(np.abs(state.nuclear_reduced() - prev)) < 1e-12:
                break
    s1, state = runner.run_steps(state, up, cfg.M)
    s2, state = runner.run_steps(state, down, cfg.N,
                                 t_offset=cfg.M * up.total_duration)
    b1, b2 = tail_baseline(s1), tail_baseline(s2)
    return PropiResult(s1, s2, area_under_curve(s1, b1), area_under_curve(s2, b2),
                       saturation_step(s1, b1), b1, b2, omega, cfg.seed, cfg.to_dict())


def _sweep(system: SystemLike, cfg: PropiConfig, const: Constants, program_for, xs) -> tuple[np.ndarray, dict, list]:
    """Run ``program_for(x)`` windows over ``xs``; weighted mean areas and references."""
    omega = _lock_frequency(system, cfg, const)
    areas = np.zeros(len(xs))
    refs = {"polarized": 0.0, "thermal": 0.0, "inverted": 0.0}
    runners = []
    for member, weight in _members(system):
        r = _MemberRunner(member, cfg, const, omega)
        use_map = 4 ** member.n_sites <= len(xs) + 3
        pol = r.polarized()
        t_window = cfg.M * r._step_up.total_duration
        for i, x in enumerate(xs):
            window, _ = _block_timelines(program_for(omega, x))["window"]
            areas[i] += weight * r.readout_area(r.run_window(pol, window, t_window), use_map)
        for k, v in r.references(use_map).items():
            refs[k] += weight * v
        runners.append(r)
    return areas, refs, runners


def _normalize(areas: np.ndarray, refs: dict) -> np.ndarray:
    span = refs["inverted"] - refs["thermal"]
    if abs(span) < 1e-9:
        raise FitError("readout cannot distinguish inverted from thermal nuclei (no polarization transfer)")
    return (areas - refs["thermal"]) / span


def run_t1_measurement(system: SystemLike, config: PropiConfig | None, delays_ms: Sequence[float],
                       const: Constants | None = None) -> SweepResult:
    """Saturate, wait ``delay`` with nuclear relaxation on, then re-polarize and read the area.

    The recovery factor (A(delay) - A(0)) / (A_thermal - A(0)) rises from 0
    towards 1 as the nuclei relax to thermal.
    """
    const = const or default_constants()
    cfg = config or PropiConfig.from_constants(const)
    delays = np.asarray(delays_ms, dtype=float)
    if np.any(delays < 0):
        raise ValueError("delays must be >= 0")
    areas, refs, _ = _sweep(system, cfg, const, lambda om, d: t1_program(cfg, om, d), delays)
    a0 = refs["polarized"]
    recovery = (areas - a0) / (refs["thermal"] - a0) if refs["thermal"] != a0 else np.zeros_like(areas)
    fit = fit_exponential(delays, areas) if delays.size >= 4 else None
    derived = {"recovery": recovery.tolist()}
    if fit is not None:
        derived["T1_ms"] = fit.time_constant
    return SweepResult("t1", delays, areas, "ms", fit, recovery, refs, derived, cfg.seed, cfg.to_dict())


def run_nuclear_rabi(system: SystemLike, config: PropiConfig | None, tau_rf_us: Sequence[float],
                     rf_rabi: float | None = None, const: Constants | None = None) -> SweepResult:
    """Polarize, apply one resonant RF pulse of length ``tau_rf``, read the repolarization area."""
    const = const or default_constants()
    cfg = config or PropiConfig.from_constants(const)
    rf_rabi = cfg.rf_rabi if rf_rabi is None else rf_rabi
    if not rf_rabi > 0:
        raise ValueError("rf_rabi must be > 0")
    taus = np.asarray(tau_rf_us, dtype=float)
    if np.any(taus < 0):
        raise ValueError("RF pulse lengths must be >= 0")
    areas, refs, _ = _sweep(system, cfg, const, lambda om, t: rabi_program(cfg, om, t, rf_rabi), taus)
    fit, derived = None, {"rf_rabi_kHz": rf_rabi}
    if taus.size >= 8:
        try:
            fit = fit_damped_cosine(taus, areas)
            derived["rabi_frequency_kHz"] = fit.frequency * 1e3  # cycles per µs -> kHz
        except FitError as exc:
            derived["fit_error"] = str(exc)
    norm = _normalize(areas, refs) if abs(refs["inverted"] - refs["thermal"]) >= 1e-9 else None
    return SweepResult("rabi", taus, areas, "us", fit, norm, refs, derived, cfg.seed, cfg.to_dict())


def _fit_coherence(x: np.ndarray, y: np.ndarray, fit: str, envelope: str):
    if x.size < 4:
        return None, {}
    if fit in ("auto", "cosine") and x.size >= 8:
        try:
            res = fit_damped_cosine(x, y, envelope=envelope)
            if res.converged and res.amplitude > 0:
                return res, {"decay_time_ms": res.decay_time, "fringe_frequency_kHz": res.frequency}
        except FitError:
            if fit == "cosine":
                raise
    res = fit_exponential(x, y)
    return res, {"decay_time_ms": res.time_constant}


def run_fid(system: SystemLike, config: PropiConfig | None, taus_ms: Sequence[float],
            nv_state_during_evolution: str = "ms0", const: Constants | None = None,
            fit: str = "auto", envelope: str = "exponential") -> SweepResult:
    """Nuclear free induction decay: RF pi/2 - free evolution - RF pi/2.

    With ``"ms-1"`` the NV is put in ms=-1 (laser + MW pi) for the free
    evolution.  ``normalized`` is (A - A_thermal)/(A_inverted - A_thermal),
    1 for a perfect net inversion.  The fitted decay time is T2* (ms).
    """
    const = const or default_constants()
    cfg = config or PropiConfig.from_constants(const)
    if nv_state_during_evolution not in ("ms0", "ms-1"):
        raise ValueError("nv_state_during_evolution must be 'ms0' or 'ms-1'")
    taus = np.asarray(taus_ms, dtype=float)
    if np.any(taus < 0):
        raise ValueError("taus must be >= 0")
    areas, refs, _ = _sweep(system, cfg, const,
                            lambda om, t: fid_program(cfg, om, t, nv_state_during_evolution), taus)
    norm = _normalize(areas, refs)
    fitted, derived = _fit_coherence(taus, norm, fit, envelope)
    if "decay_time_ms" in derived:
        derived["T2star_ms"] = derived["decay_time_ms"]
        if math.isfinite(derived["T2star_ms"]):
            derived["linewidth_kHz"] = 1.0 / (math.pi * derived["T2star_ms"])
    derived["nv_state"] = nv_state_during_evolution
    return SweepResult("fid", taus, areas, "ms", fitted, norm, refs, derived, cfg.seed, cfg.to_dict())


def run_hahn_echo(system: SystemLike, config: PropiConfig | None, taus_ms: Sequence[float],
                  nv_state_during_evolution: str = "ms-1", const: Constants | None = None) -> SweepResult:
    """RF pi/2 - tau - pi - tau - pi/2(180) with the NV held in the chosen state.

    The decay is fitted against the total free evolution time 2*tau.
    """
    const = const or default_constants()
    cfg = config or PropiConfig.from_constants(const)
    if nv_state_during_evolution not in ("ms0", "ms-1"):
        raise ValueError("nv_state_during_evolution must be 'ms0' or 'ms-1'")
    taus = np.asarray(taus_ms, dtype=float)
    if np.any(taus < 0):
        raise ValueError("taus must be >= 0")
    areas, refs, _ = _sweep(system, cfg, const,
                            lambda om, t: echo_program(cfg, om, t, nv_state_during_evolution), taus)
    norm = _normalize(areas, refs)
    fitted, derived = None, {"nv_state": nv_state_during_evolution}
    if taus.size >= 4:
        fitted = fit_exponential(2 * taus, norm)
        derived["T2_ms"] = fitted.time_constant
    return SweepResult("echo", taus, areas, "ms", fitted, norm, refs, derived, cfg.seed, cfg.to_dict())
