from .base import *

DATABASES = {
    "default": {
        "ENGINE": "django.db.backends.sqlite3",
        "NAME": ":memory:",
    }
}

CELERY_BROKER_URL = "memory://"
CELERY_RESULT_BACKEND = "cache+memory://"
CELERY_TASK_ALWAYS_EAGER = True

DRFCP = {
    "OUTPUT_DIR": None,
    "THREADS": 1,
}

LOGGING["loggers"]["drfcp"]["level"] = "WARNING"
# let pytest's caplog see records
LOGGING["loggers"]["drfcp"]["propagate"] = True
