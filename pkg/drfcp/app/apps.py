from django.apps import AppConfig


class AppConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'drfcp.app'
    label = 'app'
    verbose_name = 'Conformal prediction runs'
