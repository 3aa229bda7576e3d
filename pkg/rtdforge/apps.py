from django.apps import AppConfig


class RtdforgeConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'rtdforge'
    verbose_name = 'Replaced-token-detection pretraining'
