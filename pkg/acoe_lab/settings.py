"""Process-level settings for the acoe_lab package."""

import os

import django
import environ
from django.conf import settings as django_settings

BASE_DIR = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
env = environ.Env()
environ.Env.read_env(env_file=os.path.join(BASE_DIR, ".env"))

# Output and logging
OUTPUT_ROOT = env("ACOE_OUTPUT_ROOT", default=os.path.join(BASE_DIR, "runs"))
LOG_LEVEL = env("ACOE_LOG_LEVEL", default="INFO")
LOG_FILE = env("ACOE_LOG_FILE", default=None)
PROGRESS = env.bool("ACOE_PROGRESS", default=False)

# Django configuration, only the serializer layer of rest_framework is used
INSTALLED_APPS = [
    "rest_framework",
]
REST_FRAMEWORK = {
    "NON_FIELD_ERRORS_KEY": "non_field_errors",
}

if not django_settings.configured:
    django_settings.configure(
        USE_I18N=False,
        INSTALLED_APPS=INSTALLED_APPS,
        REST_FRAMEWORK=REST_FRAMEWORK,
    )
    django.setup()

# Numerical defaults shared across modules
HIDDEN_SIZES = (64, 64)
GAUSSIAN_INIT_STD = 0.5
CATEGORICAL_LOG_FLOOR = 1e-12
PROBABILITY_ATOL = 1e-9

# Belief construction
NEIGHBORHOOD_SIZE = 10
A3B_SURROGATE_STEPS = 50
A3B_DENOMINATOR_FLOOR = 1e-8
A3B_SCORE_CLAMP = 50.0
SURROGATE_CACHE_QUANTUM = 1e-12

# Attack defaults used by evaluation
PGD_EVAL_EPS = 0.1
PGD_EVAL_STEPS = 10
PGD_STEP_FRACTION = 0.25
MAD_EVAL_EPS = 0.15
MAD_EVAL_STEPS = 10

# Training defaults
ROBUSTNESS_LAMBDA = 0.2
TRAIN_ATTACK_EPS = 0.1
LEARNING_RATE = 0.005

# Oracle tolerances
VALUE_TOLERANCE = 1e-12
DELTA_STAR_TOLERANCE = 1e-8
SOLVER_SLACK = 1e-9
TREE_NODE_CAP = 200_000
