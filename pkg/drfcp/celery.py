# drfcp/celery.py
import os
from celery import Celery

# workers use production settings unless told otherwise
os.environ.setdefault("DJANGO_SETTINGS_MODULE", "drfcp.settings.prod")

app = Celery("drfcp")

# CELERY_* keys of the Django settings configure the app
app.config_from_object("django.conf:settings", namespace="CELERY")

# picks up drfcp.app.tasks
app.autodiscover_tasks()
