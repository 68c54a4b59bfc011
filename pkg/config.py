import os
from dotenv import load_dotenv

load_dotenv()

# Process-level defaults (overridable from .env / environment)
OUTPUT_DIR = os.getenv("SGNS_OUTPUT_DIR", "output")
LOG_LEVEL = os.getenv("SGNS_LOG_LEVEL", "INFO")
THREADS = int(os.getenv("SGNS_THREADS", "1"))
SEED = int(os.getenv("SGNS_SEED", "0"))

if THREADS < 1:
    raise ValueError("SGNS_THREADS must be a positive integer. Please check your .env file.")

# Geometry (channel with a square obstacle)
CHANNEL_LENGTH = 12.0
CHANNEL_HALFHEIGHT = 1.0
OBSTACLE_BOX = (1.75, 2.25, -0.25, 0.25)  # (x_min, x_max, y_min, y_max)
REFINEMENT = 1
INFLOW_AMPLITUDE = 1.0
RAMP_RATE = 5.0  # 1/s, inflow ramp (1 - exp(-5 t))

# Stochastic viscosity
MEAN_VISCOSITY = 0.02  # Re_1 = 100
COV = 0.1
CORRELATION_LENGTH_X = 3.0
CORRELATION_LENGTH_Y = 0.5
STOCHASTIC_DIM = 2
POLY_DEGREE = 3
KL_TERMS_1D = 10

# Time stepping
TOLERANCE = 1e-4
INITIAL_STEP = 1e-9
REJECT_FACTOR = 0.7
AVERAGING_PERIOD = 10
FINAL_TIME = 10.0
MAX_REJECTIONS = 20
ZERO_ERROR_GROWTH = 10.0
TIME_BARRIERS = (0.0, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 6.0, 8.0, 10.0)

# Linear solvers
GMRES_TOLERANCE = 1e-8
GMRES_MAX_ITER = 100
CHEBYSHEV_ITERATIONS = 5
SMOOTHER_SWEEPS = 2

# Sampling and post-processing
N_MONTE_CARLO = 200
SURROGATE_SAMPLES = 10_000
KDE_GRID_POINTS = 200
PROBE_POINTS = ((4.0100, -0.4339), (4.0100, 0.4339), (3.6436, 0.0))
