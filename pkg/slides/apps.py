from django.apps import AppConfig


class SlidesConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'slides'
    verbose_name = 'Synthetic slides and mock tile encoders'
