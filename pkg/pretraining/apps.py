from django.apps import AppConfig


class PretrainingConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'pretraining'
    verbose_name = 'Omni-feature masked pretraining'
