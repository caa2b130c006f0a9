"""Physical constants (CODATA 2018, exact SI values where defined)."""

import math

PLANCK = 6.62607015e-34  # J s
ELEMENTARY_CHARGE = 1.602176634e-19  # C
BOLTZMANN = 1.380649e-23  # J / K
FLUX_QUANTUM = PLANCK / (2 * ELEMENTARY_CHARGE)  # Wb
REDUCED_FLUX_QUANTUM = FLUX_QUANTUM / (2 * math.pi)

GHZ = 1e9
FEMTO = 1e-15
NANO = 1e-9

CODATA_RELEASE = "CODATA 2018"
