from django.apps import AppConfig


class GeometryConfig(AppConfig):
    name = 'geometry'
    verbose_name = 'Metrics, meshes and the S3 frame model'
