"""Physical constants (CODATA 2018, via scipy).

Model code reads these through the module (``constants.HBAR``) rather than
importing the names, so a single patch point affects every evaluation.
"""

import math

from scipy import constants as _c

HBAR = _c.hbar
H = _c.h
K_B = _c.k
TWO_PI = 2.0 * math.pi

# Delta(0) = BCS_GAP_RATIO * k_B * T_c
BCS_GAP_RATIO = 3.3
