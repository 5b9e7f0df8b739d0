"""Density-matrix evolution over a pulse timeline.

Propagators take Hamiltonians in kHz and durations in µs,
``U = exp(-i 2 pi H dt)`` with the kHz*µs product scaled by 1e-3.
Relaxation is applied after each piecewise-constant segment as exact
single-qubit channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import Constants, default_constants
from .dsl import PulseEvent, Timeline
from .spin_core import (
    DimensionError,
    Drive,
    RelaxationParams,
    SpinSystemSpec,
    build_rotating_frame_hamiltonian,
    larmor_frequency,
)

KHZ_US = 1e-3  # kHz * µs -> cycles


class InvariantError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# States
# ---------------------------------------------------------------------------

_NUCLEAR_KETS = {
    "up": np.array([[1, 0], [0, 0]], dtype=complex),
    "down": np.array([[0, 0], [0, 1]], dtype=complex),
    "thermal": np.eye(2, dtype=complex) / 2,
}
_NV_KETS = {
    0: np.array([[1, 0], [0, 0]], dtype=complex),
    -1: np.array([[0, 0], [0, 1]], dtype=complex),
}


@dataclass
class QuantumState:
    """Density matrix over NV (x) nuclei; the NV is the leading tensor factor."""

    rho: np.ndarray
    n_sites: int

    def __post_init__(self):
        d = 2 * 2**self.n_sites
        if self.rho.shape != (d, d):
            raise ValueError(f"rho has shape {self.rho.shape}, expected {(d, d)}")

    @classmethod
    def product(cls, nv: int = 0, nuclear: str | Sequence[str] = "thermal", n_sites: int = 0) -> "QuantumState":
        labels = [nuclear] * n_sites if isinstance(nuclear, str) else list(nuclear)
        rho = _NV_KETS[nv]
        for lab in labels:
            rho = np.kron(rho, _NUCLEAR_KETS[lab])
        return cls(rho.astype(complex), len(labels))

    def copy(self) -> "QuantumState":
        return QuantumState(self.rho.copy(), self.n_sites)

    @property
    def trace(self) -> float:
        return float(np.trace(self.rho).real)

    def nuclear_reduced(self) -> np.ndarray:
        dn = 2**self.n_sites
        r = self.rho.reshape(2, dn, 2, dn)
        return r[0, :, 0, :] + r[1, :, 1, :]

    def nv_population(self, level: int = -1) -> float:
        dn = 2**self.n_sites
        idx = 0 if level == 0 else 1
        block = self.rho[idx * dn:(idx + 1) * dn, idx * dn:(idx + 1) * dn]
        return float(np.trace(block).real)

    def check(self, trace_tol: float = 1e-9, herm_tol: float = 1e-10, psd_tol: float = 1e-9) -> None:
        if abs(self.trace - 1.0) > trace_tol:
            raise InvariantError(f"trace {self.trace!r} deviates from 1")
        if np.max(np.abs(self.rho - self.rho.conj().T)) > herm_tol:
            raise InvariantError("density matrix is not Hermitian")
        w = np.linalg.eigvalsh(0.5 * (self.rho + self.rho.conj().T))
        if w[0] < -psd_tol:
            raise InvariantError(f"negative eigenvalue {w[0]!r}")


@dataclass(frozen=True)
class MeasurementModel:
    bright_rate: float = 1.0
    contrast: float = 0.30

    def __post_init__(self):
        if not 0 < self.contrast <= 1:
            raise ValueError(f"contrast must lie in (0, 1], got {self.contrast}")


def fluorescence(state: QuantumState, model: MeasurementModel = MeasurementModel()) -> float:
    return model.bright_rate * (1.0 - model.contrast * state.nv_population(-1))


def nuclear_polarization(state: QuantumState) -> list[float]:
    """<Iz> per nuclear site."""
    n = state.n_sites
    p = np.real(np.diag(state.rho)).reshape((2,) * (n + 1))
    out = []
    for k in range(n):
        marg = p.sum(axis=tuple(a for a in range(n + 1) if a != k + 1))
        out.append(0.5 * float(marg[0] - marg[1]))
    return out


def laser_reset(state: QuantumState, fidelity: float = 1.0) -> QuantumState:
    """Repump the NV into ms=0, keeping the nuclear reduced state exactly."""
    nv = np.array([[fidelity, 0], [0, 1 - fidelity]], dtype=complex)
    return QuantumState(np.kron(nv, state.nuclear_reduced()), state.n_sites)


# ---------------------------------------------------------------------------
# Propagators
# ---------------------------------------------------------------------------


def _check_hermitian(h: np.ndarray, tol: float = 1e-12) -> None:
    scale = max(float(np.max(np.abs(h))), 1.0)
    if np.max(np.abs(h - h.conj().T)) > tol * scale:
        raise ValueError("Hamiltonian is not Hermitian")


def propagator(h: np.ndarray, dt: float) -> np.ndarray:
    """exp(-i 2 pi H dt) for H in kHz and dt in µs, by eigendecomposition."""
    _check_hermitian(h)
    w, v = np.linalg.eigh(0.5 * (h + h.conj().T))
    phases = np.exp(-2j * math.pi * KHZ_US * dt * w)
    return (v * phases) @ v.conj().T


# ---------------------------------------------------------------------------
# Relaxation
# ---------------------------------------------------------------------------


def _qubit_channel(rho: np.ndarray, k: int, n_qubits: int, pop_factor: float, coh_factor: float) -> np.ndarray:
    """Pauli channel on qubit k: Z component scaled by pop_factor, X/Y by coh_factor.

    Populations relax toward the maximally mixed state of that qubit.
    """
    if pop_factor == 1.0 and coh_factor == 1.0:
        return rho
    d = rho.shape[0]
    left = 2**k
    right = 2 ** (n_qubits - k - 1)
    t = rho.reshape(left, 2, right, left, 2, right)
    out = np.empty_like(t)
    a = t[:, 0, :, :, 0, :]
    b = t[:, 1, :, :, 1, :]
    mean = 0.5 * (a + b)
    diff = 0.5 * (a - b) * pop_factor
    out[:, 0, :, :, 0, :] = mean + diff
    out[:, 1, :, :, 1, :] = mean - diff
    out[:, 0, :, :, 1, :] = t[:, 0, :, :, 1, :] * coh_factor
    out[:, 1, :, :, 0, :] = t[:, 1, :, :, 0, :] * coh_factor
    return out.reshape(d, d)


def _factors(t1_ms: float | None, t2_ms: float | None, dt_ms: float) -> tuple[float, float]:
    pop = math.exp(-dt_ms / t1_ms) if t1_ms else 1.0
    coh = math.exp(-dt_ms / (2 * t1_ms)) if t1_ms else 1.0
    if t2_ms:
        coh *= math.exp(-dt_ms / t2_ms)
    return pop, coh


def apply_relaxation(
    state: QuantumState, params: RelaxationParams, dt: float, subsystem: str = "all"
) -> QuantumState:
    """Exact relaxation over ``dt`` µs.

    Longitudinal decay toward the maximally mixed state at rate 1/T1; the
    coherences decay by ``exp(-dt/(2 T1)) * exp(-dt/T2)``, i.e. pure dephasing
    at 1/T2 on top of the T1 contribution.
    """
    if dt < 0:
        raise ValueError("dt must be >= 0")
    if subsystem not in ("all", "nv", "nuclear"):
        raise ValueError(f"unknown subsystem {subsystem!r}")
    if dt == 0 or not params.enabled:
        return state
    n_q = state.n_sites + 1
    dt_ms = dt * 1e-3
    rho = state.rho
    if subsystem in ("all", "nv"):
        nv_t2_ms = params.nv_T2 * 1e-3 if params.nv_T2 else None
        pop, coh = _factors(params.nv_T1, nv_t2_ms, dt_ms)
        rho = _qubit_channel(rho, 0, n_q, pop, coh)
    if subsystem in ("all", "nuclear"):
        pop, coh = _factors(params.nuclear_T1, params.nuclear_T2, dt_ms)
        for k in range(1, n_q):
            rho = _qubit_channel(rho, k, n_q, pop, coh)
    return QuantumState(rho, state.n_sites)


# ---------------------------------------------------------------------------
# Timeline evolution
# ---------------------------------------------------------------------------


@dataclass
class Record:
    time: float  # µs
    kind: str  # "laser" or "segment"
    fluorescence: float
    nuclear_iz: list[float]
    event: PulseEvent | None = None
    state: QuantumState | None = None


@dataclass
class Trajectory:
    records: list[Record]
    final: QuantumState

    def laser_signals(self) -> np.ndarray:
        return np.array([r.fluorescence for r in self.records if r.kind == "laser"])

    def to_csv(self) -> str:
        """Columns: time_us, signal, then one Iz column per nuclear site."""
        n = len(self.records[0].nuclear_iz) if self.records else self.final.n_sites
        lines = [",".join(["time_us", "signal", *(f"iz_{k}" for k in range(n))])]
        for r in self.records:
            lines.append(",".join(repr(float(x)) for x in (r.time, r.fluorescence, *r.nuclear_iz)))
        return "\n".join(lines) + "\n"


def read_trajectory_csv(text: str) -> np.ndarray:
    """Numeric table written by :meth:`Trajectory.to_csv` (header dropped)."""
    rows = [line.split(",") for line in text.strip().splitlines()[1:]]
    return np.array(rows, dtype=float).reshape(len(rows), -1)


class Engine:
    """Evolves states of one spin system; caches propagators across calls."""

    def __init__(
        self,
        system: SpinSystemSpec,
        model: MeasurementModel | None = None,
        const: Constants | None = None,
        check_invariants: bool = False,
    ):
        if system.n_sites > system.max_sites:
            raise DimensionError(f"{system.n_sites} sites exceed cap {system.max_sites}")
        self.system = system
        self.const = const or default_constants()
        self.model = model or MeasurementModel(contrast=self.const.contrast)
        self.check_invariants = check_invariants
        self.larmor = [larmor_frequency(s.species, system.field) for s in system.sites]
        self._hams: dict[tuple, np.ndarray] = {}
        self._props: dict[tuple, np.ndarray] = {}
        n = system.n_sites
        # Fz diagonal of the full register, for RF frame changes
        fz = np.zeros(2**n)
        for k in range(n):
            bits = (np.arange(2**n) >> (n - 1 - k)) & 1
            fz += 0.5 - bits
        self._fz = np.concatenate([fz, fz])

    def hamiltonian(self, key: tuple) -> np.ndarray:
        h = self._hams.get(key)
        if h is None:
            drives = [Drive(ch, rabi, math.radians(ph), det) for ch, rabi, ph, det in key]
            h = build_rotating_frame_hamiltonian(self.system, drives, self.larmor)
            self._hams[key] = h
        return h

    def unitary(self, key: tuple, dt: float) -> np.ndarray:
        pk = (key, dt)
        u = self._props.get(pk)
        if u is None:
            u = propagator(self.hamiltonian(key), dt)
            if len(self._props) > 4096:
                self._props.clear()
            self._props[pk] = u
        return u

    def _rf_frame(self, carrier: float, t: float) -> np.ndarray:
        return np.exp(2j * math.pi * KHZ_US * carrier * t * self._fz)

    def evolve_segment(self, state: QuantumState, active: Sequence[PulseEvent], t0: float, t1: float) -> QuantumState:
        dt = t1 - t0
        key = tuple(sorted((e.channel, e.amplitude, e.phase, e.detuning)
                           for e in active if e.channel in ("MW", "RF")))
        u = self.unitary(key, dt)
        rf = [e for e in active if e.channel == "RF"]
        if rf:
            # lab-frame nuclei: U_lab = R(t1)^dag U_rot R(t0), R(t) = exp(+i 2 pi f t Fz)
            carrier = self.larmor[0] - rf[0].detuning if self.larmor else 0.0
            r0 = self._rf_frame(carrier, t0)
            r1c = self._rf_frame(carrier, t1).conj()
            u = (r1c[:, None] * u) * r0[None, :]
        rho = u @ state.rho @ u.conj().T
        out = QuantumState(rho, state.n_sites)
        if self.system.relaxation.enabled:
            out = apply_relaxation(out, self.system.relaxation, dt)
        if any(e.channel == "LASER" for e in active):
            out = laser_reset(out, self.const.laser_reset_fidelity)
        return out

    def _record(self, state, t, kind, event, keep_state) -> Record:
        if self.check_invariants:
            state.check()
        return Record(t, kind, fluorescence(state, self.model), nuclear_polarization(state), event,
                      state.copy() if keep_state else None)

    def evolve(
        self,
        timeline: Timeline,
        initial: QuantumState,
        record: str | int = "lasers",
        keep_states: bool = False,
        t_offset: float = 0.0,
    ) -> Trajectory:
        """Evolve ``initial`` through ``timeline``.

        ``record`` is ``"lasers"`` (one record at the start of every laser
        pulse, i.e. a readout), ``"segments"`` (every segment end), ``"none"``,
        or an int stride applied to the laser records.  ``t_offset`` shifts
        the absolute clock used for RF phase references.
        """
        if initial.n_sites != self.system.n_sites:
            raise ValueError("state and system have different site counts")
        events = timeline.events
        bounds = sorted({0.0, timeline.total_duration, *(e.start for e in events), *(e.end for e in events)})
        starts = sorted(events, key=lambda e: e.start)
        state = initial
        records: list[Record] = []
        n_laser = 0
        active: list[PulseEvent] = []
        j = 0
        for t0, t1 in zip(bounds[:-1], bounds[1:]):
            active = [e for e in active if e.end > t0 + 1e-12]
            while j < len(starts) and starts[j].start <= t0 + 1e-12:
                e = starts[j]
                j += 1
                active.append(e)
                if e.channel == "LASER":
                    if record == "lasers" or (isinstance(record, int) and not isinstance(record, bool)
                                              and n_laser % record == 0):
                        records.append(self._record(state, t_offset + t0, "laser", e, keep_states))
                    n_laser += 1
                    state = laser_reset(state, self.const.laser_reset_fidelity)
            if t1 - t0 <= 1e-12:
                continue
            state = self.evolve_segment(state, active, t_offset + t0, t_offset + t1)
            if record == "segments":
                records.append(self._record(state, t_offset + t1, "segment", None, keep_states))
        if self.check_invariants:
            state.check()
        return Trajectory(records, state)


def evolve_timeline(
    system: SpinSystemSpec,
    timeline: Timeline,
    initial: QuantumState,
    record: str | int = "lasers",
    model: MeasurementModel | None = None,
    const: Constants | None = None,
    keep_states: bool = False,
) -> Trajectory:
    return Engine(system, model, const).evolve(timeline, initial, record, keep_states)


def expectation(state: QuantumState, op: np.ndarray) -> float:
    return float(np.trace(state.rho @ op).real)
