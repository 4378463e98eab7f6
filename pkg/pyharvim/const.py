# Defaults follow the published hyperparameter table where one exists

from enum import Enum, IntEnum

# Soft mask sharpness
MASK_ALPHA = 0.15
MASK_BETA = 0.01

# Outer loop
LEARNING_RATE = 0.05
REG_COEFF = 0.001
META_STEPS = 1
LAMBDA_TARGET = 1.0
GRID_MLE_STEPS = 50
ADAMW_WEIGHT_DECAY = 0.01

# Inner loop
NOISE_SIGMA = 0.05
INNER_STEP_SIZE = 1e-3

# Metrics
PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2

# Glyph area bounds as a fraction of the image area
MIN_GLYPH_AREA = 0.04
MAX_GLYPH_AREA = 0.40

# Grid search candidates for the padding ratios, in lexicographic order
GRID_RATIOS = (0.0, 0.5, 1.0)
# Padding ratios are reached through a logistic, so the grid edges are pulled in slightly
GRID_EDGE = 0.01

CHECKPOINT_MAGIC = b"HVMF"
CHECKPOINT_VERSION = 1


class MetaGradientMode(Enum):
    EXACT_K1 = "exact-k1"
    FIRST_ORDER = "first-order"
    HVP = "hvp"


class RemoverKind(Enum):
    FLOW_R = "flow-r"
    HEAT_DIFFUSION = "heat"
    BLIND_THRESHOLD = "blind"


class WatermarkArm(Enum):
    RANDOM = "random"
    HARVIM = "harvim"


OBSERVATION = "observation"


class ExitCode(IntEnum):
    OK = 0
    USAGE = 1
    NUMERICAL = 2
    IO = 3
