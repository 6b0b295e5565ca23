"""Defaults shared by the library and the run_* scripts."""

DEFAULT_SEED = 0

# model
IMAGE_SIZE = 64
IN_CHANNELS = 3
STAGE_WIDTHS = (16, 32, 64, 128)
BLOCKS_PER_STAGE = 2
INPUT_LAYER = "input"

# classifier training
TRAIN_LR = 1e-3
TRAIN_BATCH_SIZE = 32
TRAIN_EPOCHS = 20
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# surrogate training
SURROGATE_LR = 1e-3
SURROGATE_EPOCHS = 10
SURROGATE_BATCH_SIZE = 64
SURROGATE_INIT_NOISE = 0.01

# hooks
FORWARD_ROLLS = ((0, 0), (0, 1), (1, 0), (1, 1))

# saliency
IG_STEPS = 32
IG_BATCH = 32
SMOOTHGRAD_N = 20
SMOOTHGRAD_SIGMA = 0.2
DEEPLIFT_EPS = 1e-7
REDUCE_MODE = "mean_abs"

# metrics
TV_EPS = 1e-6
PHASE_EPS = 1e-12
INSDEL_STEPS = 100
BLUR_KERNEL = 11
BLUR_SIGMA = 5.0
CURVE_BATCH = 32
EVAL_BATCH = 64

# dataset
SHAPE_CLASSES = ("circle", "square", "triangle", "cross")

# outputs
OVERLAY_ALPHA = 0.5
MODES = ("original", "surrogate", "backward", "forward")
METHODS = ("grad", "ig", "deeplift", "gradcam")
