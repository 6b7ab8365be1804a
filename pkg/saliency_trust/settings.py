"""
Django settings for the saliency_trust project.

The project has no web surface: Django hosts the management commands, the
configuration serializers and the test runner.
"""
import os
from pathlib import Path

BASE_DIR = Path(__file__).resolve().parent.parent

SECRET_KEY = os.environ.get('TRUST_SECRET_KEY', 'saliency-trust-offline-key')

DEBUG = False

ALLOWED_HOSTS = []

INSTALLED_APPS = [
    'rest_framework',
    'trust.apps.TrustConfig',
]

# Nothing is persisted through the ORM
DATABASES = {}

LANGUAGE_CODE = 'en-us'

TIME_ZONE = 'UTC'

USE_I18N = False

USE_TZ = True

# Experiment defaults, overridable with --config
TRUST_DEFAULT_CONFIG = BASE_DIR / 'configs' / 'default.json'

# None means one worker per processor
TRUST_WORKERS = None

LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'simple': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
        },
    },
    'loggers': {
        'trust': {
            'handlers': ['console'],
            'level': os.environ.get('TRUST_LOG_LEVEL', 'INFO'),
            'propagate': False,
        },
    },
}
