from django.conf import settings


def toolkit_setting(name):
    """Look up a toolkit default from ``settings.SPECTRAL_TOOLKIT``."""
    return settings.SPECTRAL_TOOLKIT[name]
