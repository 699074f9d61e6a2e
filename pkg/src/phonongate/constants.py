"""Physical constants used throughout the package (SI units)."""

from scipy import constants as _c

HBAR = _c.hbar
ELEMENTARY_CHARGE = _c.elementary_charge
ATOMIC_MASS = _c.atomic_mass

# Coulomb constant times e^2: the pair interaction is K_COULOMB / r  [J·m]
K_COULOMB = _c.e**2 / (4.0 * _c.pi * _c.epsilon_0)

TWO_PI = 2.0 * _c.pi
