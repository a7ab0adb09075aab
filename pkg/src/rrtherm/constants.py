"""Physical constants and default experimental parameters (SI units)."""

# Boltzmann constant, exact by SI definition [J/K]
K_B = 1.380649e-23

# Potassium-41 atom mass [kg] (40.9618 u)
MASS_K41 = 6.8013e-26

# Gravitational acceleration [m/s^2]
STANDARD_GRAVITY = 9.81

# Tweezer laser wavelength [m]
DEFAULT_WAVELENGTH = 790e-9
