from django.apps import AppConfig


class RepairerConfig(AppConfig):
    default_auto_field = "django.db.models.BigAutoField"
    name = "repairer"
