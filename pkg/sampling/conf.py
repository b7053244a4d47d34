from django.conf import settings
from django.core.exceptions import ImproperlyConfigured


def setting(name, default):
    """Project setting with a fallback, usable outside a configured Django process."""
    try:
        return getattr(settings, name, default)
    except ImproperlyConfigured:
        return default
