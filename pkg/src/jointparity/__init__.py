"""Simulation and analysis of two-mode joint-parity measurements on a trapped ion.

Submodules:

``qstate``       Hilbert spaces, states, operators and phase-space quantities
``hamiltonian``  drive Hamiltonians and their ideal limits
``evolve``       unitary and Lindblad propagation, noise channels
``protocols``    experiment sequences and calibration scans
``analysis``     density-matrix estimation, CHSH search, error budgets
``cli``          command-line entry point
"""

from .evolve import NoiseModel
from .hamiltonian import DrivePhases, NoiseDrive
from .qstate import DensityMatrix, HilbertSpec, StateVector

__all__ = ["HilbertSpec", "StateVector", "DensityMatrix", "DrivePhases", "NoiseDrive", "NoiseModel"]
__version__ = "0.1.0"
