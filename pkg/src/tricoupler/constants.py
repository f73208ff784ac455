"""Physical constants and unit conversions shared by every module.

Unit conventions used throughout the package:

* energies are frequencies in GHz (E/h),
* external fluxes are dimensionless (units of the flux quantum),
* phases are in radians,
* currents in nA, inductances in pH, capacitances in fF.

Constant values are CODATA 2018; the electron charge and Planck constant
are exact by definition of the 2019 SI.
"""

import math

# CODATA 2018 (exact)
E_CHARGE = 1.602176634e-19
"""Elementary charge, C."""

H_PLANCK = 6.62607015e-34
"""Planck constant, J*s."""

HBAR = H_PLANCK / (2.0 * math.pi)
"""Reduced Planck constant, J*s."""

PHI0 = H_PLANCK / (2.0 * E_CHARGE)
"""Magnetic flux quantum h/2e, Wb."""

PHI0_BAR = HBAR / (2.0 * E_CHARGE)
"""Reduced flux quantum hbar/2e, Wb/rad."""

GHZ = 1.0e9


def josephson_energy_ghz(critical_current_na: float) -> float:
    """Josephson energy of a junction with the given critical current.

    Parameters
    ----------
    critical_current_na : float
        Junction critical current in nA.

    Returns
    -------
    float
        Josephson energy in GHz.
    """
    return PHI0_BAR * critical_current_na * 1e-9 / H_PLANCK / GHZ


def inductive_energy_ghz(inductance_ph: float) -> float:
    """Inductive energy scale of a loop inductance.

    The inductive potential of a phase ``phi`` across the inductor is
    ``inductive_energy_ghz(L) * phi**2 / 2`` in GHz.

    Parameters
    ----------
    inductance_ph : float
        Inductance in pH.

    Returns
    -------
    float
        Energy per squared radian of phase, GHz/rad^2.
    """
    return PHI0_BAR**2 / (inductance_ph * 1e-12) / H_PLANCK / GHZ


def ghz_to_inductance_ph(energy_ghz: float) -> float:
    """Inverse of :func:`inductive_energy_ghz`."""
    return PHI0_BAR**2 / (energy_ghz * GHZ * H_PLANCK) * 1e12


def charging_coeff_ghz(capacitance_ff: float) -> float:
    """Kinetic-energy coefficient 4 e^2 / C for one capacitance.

    With ``n`` the dimensionless charge conjugate to a phase, the kinetic
    term reads ``charging_coeff_ghz(C) * n**2 / 2``.

    Parameters
    ----------
    capacitance_ff : float
        Capacitance in fF.

    Returns
    -------
    float
        Coefficient in GHz.
    """
    return 4.0 * E_CHARGE**2 / (capacitance_ff * 1e-15) / H_PLANCK / GHZ


def phase_to_current_na(inductance_ph: float) -> float:
    """Conversion factor from an inductor phase (rad) to its current (nA)."""
    return PHI0_BAR / (inductance_ph * 1e-12) * 1e9


def mutual_flux_shift(mutual_ph: float, current_na: float) -> float:
    """Reduced flux induced in a loop by a current in a coupled loop.

    Parameters
    ----------
    mutual_ph : float
        Mutual inductance in pH (signed).
    current_na : float
        Circulating current in nA (signed).

    Returns
    -------
    float
        Flux shift in units of the flux quantum.
    """
    return mutual_ph * 1e-12 * current_na * 1e-9 / PHI0
