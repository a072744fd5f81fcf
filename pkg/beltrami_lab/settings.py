"""
Django settings for the beltrami_lab project.

The project hosts no web surface: Django supplies configuration, logging,
management commands and the test runner for the spectral toolkit apps.
"""

import os
from pathlib import Path

# Build paths inside the project like this: BASE_DIR / 'subdir'.
BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get('BELTRAMI_SECRET_KEY', 'beltrami-lab-batch-only-not-a-secret')

DEBUG = False

ALLOWED_HOSTS = []


# Application definition

INSTALLED_APPS = [
    'django.contrib.contenttypes',
    'django.contrib.auth',
    'rest_framework',
    'geometry',
    'spectra',
    'experiments',
]

MIDDLEWARE = []

DATABASES = {
    'default': {
        'ENGINE': 'django.db.backends.sqlite3',
        'NAME': BASE_DIR / 'db.sqlite3',
    }
}

DEFAULT_AUTO_FIELD = 'django.db.models.BigAutoField'

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True


# Spectral toolkit

TOOLKIT_VERSION = '1.0.0'

SPECTRAL_TOOLKIT = {
    # positive-definiteness: smallest Cholesky pivot
    'PD_TOL': 1e-12,
    # coclosed solver
    'KERNEL_CUTOFF_FACTOR': 10.0,
    'KERNEL_CUTOFF_FLOOR': 1e-8,
    'GAP_TOL': 1e-6,
    'BORDERLINE_FACTOR': 100.0,
    'SOLVER_TOL': 1e-10,
    'SOLVER_MAXITER': 20000,
    'ORTHONORMAL_TOL': 1e-8,
    # perturbation
    'DET_TOL': 1e-8,
    'A_GRID': [-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.5, 2.0],
    'FD_STEP': 1e-4,
    # contour integrals
    'CONTOUR_NODES': 64,
    'CONTOUR_CLEARANCE': 0.05,
    'CONDITION_LIMIT': 1e6,
    # tracking
    'OVERLAP_THRESHOLD': 0.5,
    'MAX_REFINEMENTS': 3,
    'CROSSING_TOL': 1e-8,
    'BISECTION_DEPTH': 14,
    'BISECTION_DT': 1e-4,
    # orchestration
    'DEFAULT_SEED': 20240917,
    'DEFAULT_THREADS': 1,
    'PROGRESS': False,
}


# Logging

LOG_LEVEL = os.environ.get('BELTRAMI_LOG_LEVEL', 'INFO').upper()

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'verbose': {
            'format': '{levelname} {asctime} {name} {message}',
            'style': '{',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'verbose',
        },
    },
    'loggers': {
        'geometry': {'handlers': ['console'], 'level': LOG_LEVEL, 'propagate': False},
        'spectra': {'handlers': ['console'], 'level': LOG_LEVEL, 'propagate': False},
        'experiments': {'handlers': ['console'], 'level': LOG_LEVEL, 'propagate': False},
    },
}
