from datetime import datetime
import os
from dotenv import load_dotenv

load_dotenv()

TIMESTAMP = datetime.now().strftime("%Y-%m-%d_%H-%M-%S")
RUNS_DIR = os.getenv("RANKSHIELD_RUNS_DIR", "runs")
LOG_DIR = os.getenv("RANKSHIELD_LOG_DIR", "logs")
SEED_ENV_VAR = "RANKSHIELD_SEED"

MODEL_FORMAT_VERSION = 1
SOFTWARE_VERSION = "0.1.0"

# model_core
SOFTPLUS_RHO = 10.0
SOFTPLUS_LINEAR_CUTOFF = 30.0
HVP_STEP_SCALE = 1e-3
EXACT_HESSIAN_MAX_DIM = 64
POWER_ITERATIONS = 50
POWER_TOLERANCE = 1e-6
GAP_FD_STEP = 1e-3

# explain
SMOOTHGRAD_SAMPLES = 50
SMOOTHGRAD_SIGMA2 = 0.5
IG_STEPS = 100

# thickness
THICKNESS_M1 = 32
THICKNESS_M2 = 8
LIPSCHITZ_SAMPLES = 32

# attacks
ATTACK_STEP_SIZE = 1e-3
ATTACK_MAX_ITERS = 1000
ATTACK_PRED_EPSILON = 0.2
ATTACK_MIN_STEP_FRACTION = 2.0 ** -10
MOO_GAMMA = 0.5
MOO_ETA = 0.1
MOO_CRIT_EPSILON = 1e-4
MOO_RADIUS_FLOOR = 1e-8
MOO_TARGET_FRACTION = 0.5
MOO_TARGET_MARGIN = 1e-3
LP_PIVOT_TOLERANCE = 1e-9

# training
LEARNING_RATE = 1e-2
LAMBDA1 = 0.1
LAMBDA2 = 0.01
TOP_K = 8
FULL_PAIRS_MAX_DIM = 64

# metrics
FULL_REMOVAL_SET_MAX_DIM = 32
REMOVAL_PERCENTAGES = (0.01, 0.05, 0.10, 0.20, 0.50)

# cli exit codes
EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4
