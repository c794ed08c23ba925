from django.apps import AppConfig


class WsiPipelineConfig(AppConfig):
    default_auto_field = 'django.db.models.BigAutoField'
    name = 'wsi_pipeline'
    verbose_name = 'WSI Pipeline'
