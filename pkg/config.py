import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    BASE_DIR = os.path.dirname(os.path.abspath(__file__))

    # Logging / output
    LOG_LEVEL = os.getenv("RDM_LOG_LEVEL", "INFO")
    OUTPUT_DIR = os.getenv("RDM_OUTPUT_DIR", os.path.join(BASE_DIR, "runs"))

    # Diffusion settings
    NUM_TIMESTEPS = 20
    SCHEDULE_FAMILY = "linear"
    NOISE_KIND = "absorbing"

    # Model settings
    EMBED_DIM = 32
    TIME_DIM = 16
    HIDDEN_DIM = 64
    CONTEXT_KIND = "window"
    WINDOW = 3
    INIT_SCALE = 0.05

    # Training settings
    BATCH_SIZE = 32
    TRAIN_STEPS = 3000
    LEARNING_RATE = 5e-4
    WARMUP_STEPS = 100
    WEIGHT_DECAY = 0.01
    LABEL_SMOOTHING = 0.1
    EMA_DECAY = 0.9999
    EMA_START = 0
    ADAM_BETAS = (0.9, 0.98)
    ADAM_EPS = 1e-9
    LOG_EVERY = 100

    # Sampling settings
    SAMPLING_STEPS = 10
    TEMPERATURE = 1.0
    CANDIDATES = 1

    # Verification settings
    VERIFY_DRAWS = int(os.getenv("RDM_VERIFY_DRAWS", "100000"))
    SIGNIFICANCE = 0.001
    EXACT_TOLERANCE = 1e-12
    LOSS_TOLERANCE = 1e-10
    GRAD_TOLERANCE = 1e-4
    FD_STEP = 1e-5

    # Storage
    CHECKPOINT_NAME = "checkpoint.json"
    LOSS_CURVE_NAME = "loss_curve.csv"
    CONFIG_NAME = "config.json"

config = Config()
