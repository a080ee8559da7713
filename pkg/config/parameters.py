"""
SEAL Default Parameters
Desk-scale defaults for diffusion fine-tuning, watermark optimisation, detection and evaluation.
Step counts and budgets keep the ratios of the published Stable Diffusion settings, scaled down.
"""

# Image geometry (channels, height, width); height and width must be divisible by 4
IMAGE_SHAPE = (3, 32, 32)

# Noise schedule (linear betas)
NUM_TIMESTEPS = 200
BETA_START = 1e-4
BETA_END = 0.02

# Denoiser (small conv encoder-decoder, ~100K params at BASE_CHANNELS=16)
DENOISER_BASE_CHANNELS = 16
TIME_EMBED_DIM = 64
COND_EMBED_DIM = 32

# Sampling
SAMPLING_STEPS = 50  # ancestral DDPM over a respaced subsequence of the schedule

# Prompt vocabulary
PAD_TOKEN = 0
IDENTIFIER_TOKEN = 1  # reserved "[V]" / "sks" placeholder slot
PROMPT_LENGTH = 8

# Base ("public") model pretraining on the generic corpus
BASE_PRETRAIN_STEPS = 600
BASE_PRETRAIN_LR = 2e-3
BASE_PRETRAIN_BATCH_SIZE = 16
BASE_CORPUS_SIZE = 256

# Watermark optimisation
WATERMARK_BUDGETS = (4 / 255, 2 / 255)
DEFAULT_ETA = 4 / 255
MAX_ETA = 32 / 255  # larger budgets are visibly destructive
PGD_STEP_FRACTION = 0.1  # PGD step = eta / 10
INNER_STEPS = (5, 5, 5)  # (clean warm-up SGD, PGD, watermarked SGD)
WATERMARK_EPOCHS = 3
WATERMARK_BATCH_SIZE = 4
WATERMARK_MODEL_LR = 1e-2

# Fine-tuning method kinds
METHOD_KINDS = ("FULL_FT", "DREAMBOOTH_LIKE", "TEXTUAL_INVERSION_LIKE", "LORA_LIKE")

METHOD_LABELS = {
    "FULL_FT": "Text-to-Image (full denoiser)",
    "DREAMBOOTH_LIKE": "DreamBooth-like (denoiser + embeddings)",
    "TEXTUAL_INVERSION_LIKE": "Textual-Inversion-like (one token row)",
    "LORA_LIKE": "LoRA-like (low-rank adapters)",
}

# Published step counts; desk scale multiplies by SCALE_FACTOR
FINETUNE_BASE_STEPS = {
    "FULL_FT": 300,
    "DREAMBOOTH_LIKE": 800,
    "TEXTUAL_INVERSION_LIKE": 1500,
    "LORA_LIKE": 3000,
}
SCALE_FACTOR = 0.2

# Desk-scale Adam learning rates and batch sizes
FINETUNE_LR = {
    "FULL_FT": 5e-4,
    "DREAMBOOTH_LIKE": 2e-4,
    "TEXTUAL_INVERSION_LIKE": 1e-2,
    "LORA_LIKE": 1e-3,
}
FINETUNE_BATCH_SIZE = {
    "FULL_FT": 6,
    "DREAMBOOTH_LIKE": 4,
    "TEXTUAL_INVERSION_LIKE": 16,
    "LORA_LIKE": 8,
}
LORA_RANK = 4
LORA_TARGET_PREFIXES = ("mid.",)  # middle blocks of the denoiser
PRIOR_PRESERVATION = False
PRIOR_LOSS_WEIGHT = 1.0

# Generation for detector training / evaluation
STYLE_PROMPT_COUNT = 60
OBJECT_PROMPT_COUNT = 30
IMAGES_PER_PROMPT = 1

# Detectors (experts and gating)
DETECTOR_LR = 1e-3
DETECTOR_WEIGHT_DECAY = 0.01
DETECTOR_STEPS = 400
DETECTOR_BATCH_SIZE = 32
DETECTOR_CHANNELS = (32, 64, 96, 128)
DETECTION_THRESHOLD = 0.5
MAX_CLASS_IMBALANCE = 10.0
HOLDOUT_FRACTION = 0.25

# Corruptions
CORRUPTION_KINDS = ("JPEG", "GAUSS_NOISE", "GAUSS_BLUR", "RANDOM_CROP")

AUGMENTATION_DEFAULTS = {
    "enabled": list(CORRUPTION_KINDS),
    "jpeg_quality": [50, 95],
    "noise_sigma": [0.0, 0.05],
    "blur_kernel": [3, 5],
    "blur_sigma": [0.3, 1.5],
    "crop_ratio": [0.7, 1.0],
    "probability": 0.5,
}

# Fixed corruption strengths for the robustness table
EVAL_CORRUPTIONS = {
    "JPEG": {"quality": 75},
    "GAUSS_NOISE": {"sigma": 0.03},
    "GAUSS_BLUR": {"kernel": 3, "sigma": 1.0},
    "RANDOM_CROP": {"ratio": 0.8},
}

# Evaluation
ROC_GRID_POINTS = 101
STEP_GRID_FRACTIONS = (0.1, 0.25, 0.5, 1.0)
WATERMARK_RATES = (0.2, 0.5, 0.8, 1.0)
SWEEP_SEEDS = (0, 1, 2)

# FID feature extractor (frozen, randomly initialised)
FID_EXTRACTOR_SEED = 1234
FID_FEATURE_DIM = 64
FID_EXTRACTOR_VERSION = "randconv-v1"
FID_EPS = 1e-6

# Tensor blob format
BLOB_MAGIC = b"FTSH"
FORMAT_VERSION = 1

# Synthetic datasets
DEFAULT_DATASET_SIZE = 64
DATASET_KINDS = ("style", "object")

# Environment variables (read through python-dotenv)
ENV_OUTPUT_ROOT = "SEAL_OUTPUT_ROOT"
ENV_JOBS = "SEAL_JOBS"
DEFAULT_OUTPUT_ROOT = "runs"
