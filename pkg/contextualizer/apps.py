from django.apps import AppConfig


class ContextualizerConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'contextualizer'
    verbose_name = 'Tile contextualizer network'
