"""
Django settings for the SR-OOD experiment project.

The project has no database and no HTTP surface; Django provides the app
registry, the management-command CLI, the LOGGING configuration and the
test runner.

For the full list of settings and their values, see
https://docs.djangoproject.com/en/5.2/ref/settings/
"""

from pathlib import Path
import os
from dotenv import load_dotenv

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

# Load environment variables from .env file
# Try multiple locations to support both local development and Docker
env_paths = [
    os.path.join(BASE_DIR, '..', '.env'),  # Local development: repo root .env
    '/app/.env',  # Docker: /app/.env
    '.env'  # Current directory
]

for env_path in env_paths:
    if os.path.exists(env_path):
        load_dotenv(env_path)
        break


# Only used for Django's signing machinery, which the CLI never touches
SECRET_KEY = os.getenv("DJANGO_SECRET_KEY", "srood-local-only")

DEBUG = os.getenv("DJANGO_DEBUG", "False") == "True"

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    "datasets",
    "erosion",
    "repairer",
    "metrics",
    "training",
    "scoring",
    "evaluation",
    "experiments",
]

# Experiments are file based; no app defines ORM models
DATABASES = {}

DEFAULT_AUTO_FIELD = "django.db.models.BigAutoField"


# Internationalization

LANGUAGE_CODE = "en-us"

TIME_ZONE = "UTC"

USE_I18N = False

USE_TZ = True


# SR-OOD runtime configuration
SROOD_DATA_ROOT = os.getenv("SROOD_DATA_ROOT")
SROOD_NUM_WORKERS = int(os.getenv("SROOD_NUM_WORKERS", "4"))
SROOD_TORCH_THREADS = int(os.getenv("SROOD_TORCH_THREADS", "1"))

# Defaults for every experiment config key; a config file may override any
# of them and nothing else.
SROOD_DEFAULTS = {
    "experiment.manifest": "manifest.csv",
    "experiment.variant": "sr",
    "experiment.out_dir": "runs/default",
    "experiment.seed": "0",
    "experiment.seeds": "0,1,2",
    "repairer.resolution": "28x28",
    "repairer.channels": "1",
    "repairer.latent_dim": "32",
    "repairer.encoder_widths": "16,32",
    "repairer.decoder_widths": "32,16",
    "repairer.mix_alpha": "0.3",
    "phi.mode": "learned",
    "phi.widths": "8,16",
    "phi.tap_layers": "1,2",
    "phi.n_iter": "500",
    "phi.batch_size": "32",
    "phi.learning_rate": "1e-3",
    "loss.lambda1": "1",
    "loss.lambda2": "0.8",
    "train.n_iter": "3000",
    "train.batch_size": "32",
    "train.learning_rate": "1e-3",
    "train.optimizer": "adaptive-moments",
    "train.checkpoint_every": "500",
    "train.log_every": "100",
    "threshold.method": "id-quantile",
    "threshold.epsilon": "0",
    "threshold.quantile": "0.95",
    "scoring.score_fn": "lpips",
    "scoring.label_free_selection": "false",
    "scoring.baselines": "false",
    "scoring.batch_size": "256",
    "baseline.n_iter": "500",
    "baseline.learning_rate": "1e-2",
    "report.grid_samples": "8",
    "report.histogram_bins": "40",
    "diagnose.n_probes": "200",
    "diagnose.refine_steps": "20",
    "diagnose.samples": "64",
}

# Logging Configuration
LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {module} {process:d} {thread:d} {message}',
            'style': '{',
        },
        'simple': {
            'format': '{levelname} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'root': {
        'handlers': ['console'],
        'level': os.getenv("SROOD_LOG_LEVEL", "INFO"),
    },
    'loggers': {
        'training.services': {
            'handlers': ['console'],
            'level': os.getenv("SROOD_LOG_LEVEL", "INFO"),
            'propagate': False,
        },
    },
}

SROOD_LOG_FILE = os.getenv("SROOD_LOG_FILE")
if SROOD_LOG_FILE:
    os.makedirs(os.path.dirname(os.path.abspath(SROOD_LOG_FILE)), exist_ok=True)
    LOGGING['handlers']['file'] = {
        'level': 'INFO',
        'class': 'logging.FileHandler',
        'filename': SROOD_LOG_FILE,
        'formatter': 'verbose',
    }
    LOGGING['root']['handlers'].append('file')
    LOGGING['loggers']['training.services']['handlers'].append('file')
