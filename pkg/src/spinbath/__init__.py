from pathlib import Path

__version__ = "0.3.0"

DEFAULT_WORKING_DIR = Path.cwd().joinpath("spinbath_runs").resolve(strict=False)

# Y sites per unit volume in Y2SiO5 (both crystallographic sites), spins/m^3
Y_SITE_DENSITY = 1.87e28
PPM_DENSITY = Y_SITE_DENSITY * 1e-6
