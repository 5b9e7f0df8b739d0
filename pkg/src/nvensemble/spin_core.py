"""Spin species, fields, hyperfine couplings and Hamiltonian construction.

Conventions
-----------
* Frequencies in kHz, fields in gauss, lengths in nm, times in ms unless a
  name says otherwise (pulse timing is in µs).
* The NV electron is an effective two-level system on {ms=0, ms=-1}.  Basis
  index 0 is ms=0, index 1 is ms=-1.  Nuclear basis index 0 is |up> (Iz=+1/2).
* Tensor order is NV first, then nuclear sites in list order.
* Hamiltonians are returned in frequency units (kHz); the 2*pi only enters
  when a propagator is built (see :mod:`nvensemble.evolution`).
* Secular hyperfine acts only in the ms=-1 branch:
  ``H_hf = |-1><-1| (x) sum_i (A_par_i Iz_i + A_perp_i Ix_i)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import Constants, default_constants

# mu0/(4 pi) * h, SI (T m^3 per Hz/T)
_MU0_H_OVER_4PI = 1e-7 * 6.62607015e-34


class DimensionError(ValueError):
    """Hilbert space exceeds the exact-evolution cap."""


class DipoleValidityError(ValueError):
    """Position is inside the point-dipole validity floor.

    Sites this close to the vacancy take tabulated shell couplings instead
    (see :func:`nvensemble.lattice.assign_hyperfine`).
    """


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpinSpecies:
    name: str
    gyromagnetic_ratio: float  # kHz/G
    spin_quantum_number: float = 0.5

    def __post_init__(self):
        if not math.isfinite(self.gyromagnetic_ratio) or self.gyromagnetic_ratio == 0:
            raise ValueError(f"gyromagnetic ratio must be finite and nonzero, got {self.gyromagnetic_ratio}")
        if self.spin_quantum_number != 0.5:
            raise ValueError("only spin-1/2 nuclei are supported")


def carbon13(const: Constants | None = None) -> SpinSpecies:
    const = const or default_constants()
    return SpinSpecies("13C", const.gamma_c13_khz_per_gauss)


@dataclass(frozen=True)
class StaticField:
    magnitude_B0: float  # G
    direction: tuple[float, float, float] = (0.0, 0.0, 1.0)

    def __post_init__(self):
        if not self.magnitude_B0 >= 0:
            raise ValueError(f"B0 must be >= 0, got {self.magnitude_B0}")
        norm = math.sqrt(sum(x * x for x in self.direction))
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"field direction must be a unit vector (norm {norm})")


@dataclass(frozen=True)
class HyperfineTensor:
    """Secular hyperfine components in kHz."""

    A_parallel: float
    A_perpendicular: float

    def __post_init__(self):
        if not (math.isfinite(self.A_parallel) and math.isfinite(self.A_perpendicular)):
            raise ValueError("hyperfine components must be finite")

    def scaled(self, factor: float) -> "HyperfineTensor":
        return HyperfineTensor(self.A_parallel * factor, self.A_perpendicular * factor)


@dataclass(frozen=True)
class NuclearSpinSite:
    position: tuple[float, float, float]  # nm, NV at origin, z along NV axis
    species: SpinSpecies
    hyperfine: HyperfineTensor
    first_shell: bool = False

    def __post_init__(self):
        if float(np.linalg.norm(self.position)) <= 0.05:
            raise ValueError(f"site at {self.position} coincides with the NV")


@dataclass(frozen=True)
class RelaxationParams:
    """Phenomenological relaxation times; ``None`` disables a channel.

    nv_T2 is in µs, the other three in ms.
    """

    nv_T1: Optional[float] = None
    nv_T2: Optional[float] = None
    nuclear_T1: Optional[float] = None
    nuclear_T2: Optional[float] = None

    def __post_init__(self):
        for name in ("nv_T1", "nv_T2", "nuclear_T1", "nuclear_T2"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ValueError(f"{name} must be > 0, got {v}")

    @property
    def enabled(self) -> bool:
        return any(v is not None for v in (self.nv_T1, self.nv_T2, self.nuclear_T1, self.nuclear_T2))


@dataclass(frozen=True)
class SpinSystemSpec:
    field: StaticField
    sites: tuple[NuclearSpinSite, ...] = ()
    relaxation: RelaxationParams = RelaxationParams()
    max_sites: int = 10
    nv_transition: tuple[int, int] = (0, -1)

    def __post_init__(self):
        object.__setattr__(self, "sites", tuple(self.sites))
        if self.nv_transition != (0, -1):
            raise ValueError("only the {ms=0, ms=-1} transition is modelled")
        if len(self.sites) > self.max_sites:
            raise DimensionError(
                f"{len(self.sites)} nuclear sites exceed the exact-evolution cap of {self.max_sites}"
            )

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def dimension(self) -> int:
        return 2 * 2 ** len(self.sites)

    def with_relaxation(self, relaxation: RelaxationParams) -> "SpinSystemSpec":
        return SpinSystemSpec(self.field, self.sites, relaxation, self.max_sites)


def make_system(
    hyperfines: Sequence[tuple[float, float]] = (),
    B0: float | None = None,
    relaxation: RelaxationParams | None = None,
    const: Constants | None = None,
) -> SpinSystemSpec:
    """Convenience builder from ``(A_par, A_perp)`` pairs in kHz.

    Positions are placeholders on a ring (the Hamiltonian only uses the
    couplings).
    """
    const = const or default_constants()
    species = carbon13(const)
    sites = []
    for k, (a_par, a_perp) in enumerate(hyperfines):
        phi = 2 * math.pi * k / max(len(hyperfines), 1)
        sites.append(
            NuclearSpinSite((math.cos(phi), math.sin(phi), 0.5), species, HyperfineTensor(a_par, a_perp))
        )
    field_ = StaticField(const.B0_gauss if B0 is None else B0)
    return SpinSystemSpec(field_, tuple(sites), relaxation or RelaxationParams(), const.max_exact_sites)


# ---------------------------------------------------------------------------
# Scalar physics
# ---------------------------------------------------------------------------


def larmor_frequency(species: SpinSpecies, field: StaticField) -> float:
    """Nuclear Larmor frequency gamma*B0 in kHz."""
    return species.gyromagnetic_ratio * field.magnitude_B0


def dipole_field_coefficient(const: Constants | None = None) -> float:
    """mu0/(4 pi) * h * gamma_e: the electron dipole field scale in G nm^3."""
    const = const or default_constants()
    gamma_e_hz_per_tesla = const.gamma_e_mhz_per_gauss * 1e6 * 1e4
    tesla_m3 = _MU0_H_OVER_4PI * gamma_e_hz_per_tesla
    return tesla_m3 * 1e4 / 1e-27


def _check_floor(position, const: Constants) -> tuple[np.ndarray, float]:
    r_vec = np.asarray(position, dtype=float)
    r = float(np.linalg.norm(r_vec))
    if r < const.dipole_floor_nm:
        raise DipoleValidityError(
            f"|r| = {r:.4g} nm is below the point-dipole floor of {const.dipole_floor_nm} nm; "
            "use the tabulated shell couplings"
        )
    return r_vec, r


def point_dipole_hyperfine(
    position, species: SpinSpecies | None = None, const: Constants | None = None
) -> HyperfineTensor:
    """Secular point-dipole coupling of a nucleus to the NV electron.

    ``A_par = C (3 cos^2 t - 1) / r^3`` and ``A_perp = 3 C sin t cos t / r^3``
    with ``C = gamma_n * mu0 h gamma_e / (4 pi)`` and ``t`` the polar angle
    from the NV axis.
    """
    const = const or default_constants()
    species = species or carbon13(const)
    r_vec, r = _check_floor(position, const)
    cos_t = r_vec[2] / r
    sin_t = math.hypot(r_vec[0], r_vec[1]) / r
    k = species.gyromagnetic_ratio * dipole_field_coefficient(const) / r**3
    return HyperfineTensor(k * (3 * cos_t**2 - 1), 3 * k * sin_t * cos_t)


def distance_from_hyperfine(
    hf: HyperfineTensor,
    species: SpinSpecies | None = None,
    const: Constants | None = None,
    geometry: str = "solve",
) -> float:
    """Invert :func:`point_dipole_hyperfine` for the NV-nucleus distance (nm).

    ``geometry="solve"`` recovers the polar angle from the component ratio
    and is exact for any site.  Writing the couplings as
    ``A_par = k (1/2 + 3/2 cos 2t)``, ``A_perp = k (3/2) sin 2t`` gives
    ``2k^2 + A_par k - (A_par^2 + A_perp^2) = 0`` for ``k = C / r^3``.

    ``geometry="axial"`` assumes the site sits on the NV axis and uses the
    total coupling magnitude, ``|A| = 2C / r^3``.
    """
    const = const or default_constants()
    species = species or carbon13(const)
    a_par, a_perp = hf.A_parallel, hf.A_perpendicular
    total_sq = a_par**2 + a_perp**2
    if total_sq == 0:
        raise ValueError("zero hyperfine tensor has no distance solution")
    c = abs(species.gyromagnetic_ratio) * dipole_field_coefficient(const)
    if geometry == "solve":
        k = (-a_par + math.sqrt(a_par**2 + 8 * total_sq)) / 4
    elif geometry == "axial":
        k = math.sqrt(total_sq) / 2
    else:
        raise ValueError(f"unknown geometry {geometry!r}")
    return (c / k) ** (1.0 / 3.0)


def nv_field_at(position, nv_state: int, const: Constants | None = None) -> tuple[float, float]:
    """Secular (z) dipolar field of the NV electron and its radial gradient.

    Returns ``(B_z [G], dB_z/dr [G/nm])``.  The moment vanishes in ms=0.  In
    ms=-1 the z-field is ``B_c (3 cos^2 t - 1) / r^3``, so the radial
    derivative at fixed direction is ``-3 B_z / r``.
    """
    const = const or default_constants()
    if nv_state not in (0, -1):
        raise ValueError(f"nv_state must be 0 or -1, got {nv_state}")
    r_vec, r = _check_floor(position, const)
    if nv_state == 0:
        return 0.0, 0.0
    cos_t = r_vec[2] / r
    b_z = dipole_field_coefficient(const) * (3 * cos_t**2 - 1) / r**3
    return b_z, -3.0 * b_z / r


def gradient_broadening(gradient: float, extent: float, species: SpinSpecies) -> float:
    """Line broadening (kHz) from a field gradient (G/nm) across ``extent`` nm."""
    if gradient < 0 or extent < 0:
        raise ValueError("gradient and extent must be >= 0")
    return gradient * extent * species.gyromagnetic_ratio


def linewidth_from_t2star(t2star: float) -> float:
    """Lorentzian FWHM 1/(pi T2*) in kHz for T2* in ms."""
    if not t2star > 0:
        raise ValueError(f"T2* must be > 0, got {t2star}")
    return 1.0 / (math.pi * t2star)


# ---------------------------------------------------------------------------
# Operators and Hamiltonian
# ---------------------------------------------------------------------------

SX = np.array([[0, 0.5], [0.5, 0]], dtype=complex)
SY = np.array([[0, -0.5j], [0.5j, 0]], dtype=complex)
SZ = np.array([[0.5, 0], [0, -0.5]], dtype=complex)
P0 = np.array([[1, 0], [0, 0]], dtype=complex)
PM1 = np.array([[0, 0], [0, 1]], dtype=complex)


def embed(op: np.ndarray, k: int, n: int) -> np.ndarray:
    """``op`` acting on qubit ``k`` of an ``n``-qubit register."""
    return np.kron(np.kron(np.eye(2**k), op), np.eye(2 ** (n - k - 1)))


def nuclear_operator(single: np.ndarray, n: int, coefficients: Sequence[float] | None = None) -> np.ndarray:
    """``sum_k c_k single_k`` on the nuclear register (dimension 2**n)."""
    out = np.zeros((2**n, 2**n), dtype=complex)
    for k in range(n):
        c = 1.0 if coefficients is None else coefficients[k]
        if c != 0:
            out += c * embed(single, k, n)
    return out


@dataclass(frozen=True)
class Drive:
    """A continuous drive in its own rotating frame.

    ``detuning`` is transition minus carrier (kHz); ``phase`` in radians.
    """

    channel: str
    rabi: float
    phase: float = 0.0
    detuning: float = 0.0

    def __post_init__(self):
        if self.channel not in ("MW", "RF"):
            raise ValueError(f"unknown drive channel {self.channel!r}")


def build_rotating_frame_hamiltonian(
    system: SpinSystemSpec,
    drive: Drive | Sequence[Drive] | None = None,
    species_larmor: Sequence[float] | None = None,
) -> np.ndarray:
    """Hamiltonian (kHz) of the NV (x) nuclei register.

    The NV is always described in the frame of the MW carrier.  Nuclei are in
    the lab frame unless an RF drive is present, in which case they are in
    the frame of the RF carrier and the (non-secular) ``A_perp Ix`` term is
    dropped.
    """
    if system.n_sites > system.max_sites:
        raise DimensionError(f"{system.n_sites} sites exceed cap {system.max_sites}")
    drives = [] if drive is None else ([drive] if isinstance(drive, Drive) else list(drive))
    mw = [d for d in drives if d.channel == "MW"]
    rf = [d for d in drives if d.channel == "RF"]
    if len(mw) > 1 or len(rf) > 1:
        raise ValueError("at most one drive per channel")

    n = system.n_sites
    dn = 2**n
    if species_larmor is None:
        species_larmor = [larmor_frequency(s.species, system.field) for s in system.sites]
    a_par = [s.hyperfine.A_parallel for s in system.sites]
    a_perp = [s.hyperfine.A_perpendicular for s in system.sites]

    h_e = np.zeros((2, 2), dtype=complex)
    if mw:
        d = mw[0]
        h_e = d.rabi * (math.cos(d.phase) * SX + math.sin(d.phase) * SY) + d.detuning * PM1

    if rf:
        d = rf[0]
        zeeman = nuclear_operator(SZ, n, [d.detuning] * n)
        h_rf = nuclear_operator(math.cos(d.phase) * SX + math.sin(d.phase) * SY, n, [d.rabi] * n)
        h_n0 = zeeman + h_rf
        h_hf = nuclear_operator(SZ, n, a_par)
    else:
        h_n0 = nuclear_operator(SZ, n, species_larmor)
        h_hf = nuclear_operator(SZ, n, a_par) + nuclear_operator(SX, n, a_perp)

    eye_n = np.eye(dn)
    h = np.kron(h_e, eye_n) + np.kron(np.eye(2), h_n0) + np.kron(PM1, h_hf)
    return h
