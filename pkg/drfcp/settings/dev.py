from .base import *

DEBUG = True
ALLOWED_HOSTS = env.list("DJANGO_ALLOWED_HOSTS", default=["*"])

LOGGING["loggers"]["drfcp"]["level"] = env("DRFCP_LOG_LEVEL", default="DEBUG")
