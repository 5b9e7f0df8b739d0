"""Simulation and analysis of an NV electron spin coupled to a 13C nuclear ensemble.

Modules
-------
spin_core   constants, spin species, hyperfine couplings, Hamiltonians
lattice     13C layer profile, bath sampling, ODMR group statistics, linewidths
dsl         pulse-sequence language: parse, validate, serialize
evolution   density-matrix propagation, relaxation, laser reset, fluorescence
protocols   PROPI, T1, nuclear Rabi, FID and Hahn-echo runners
fitting     damped least squares, exponential and damped-cosine fits
cli         command-line entry point
"""

from .config import Constants, default_constants, load_constants

__all__ = ["Constants", "default_constants", "load_constants"]
