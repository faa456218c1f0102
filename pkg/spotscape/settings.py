"""
Réglages Django minimaux pour exécuter Spotscape hors d'un projet hôte.

Un projet qui installe l'application peut surcharger les hyperparamètres via
le dictionnaire SPOTSCAPE (mêmes clés que apps.DEFAULT_CFG).
"""
import os

SECRET_KEY = os.environ.get("SPOTSCAPE_SECRET_KEY", "spotscape-standalone")
DEBUG = False

INSTALLED_APPS = [
    "spotscape",
]

# Aucun modèle persistant : les résultats sont des fichiers
DATABASES = {}

USE_TZ = True
USE_I18N = True
LANGUAGE_CODE = "fr"

SPOTSCAPE = {}

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "standard": {
            "format": "%(asctime)s  %(levelname)s  %(name)s  %(message)s",
        },
    },
    "handlers": {
        "console": {
            "class": "logging.StreamHandler",
            "formatter": "standard",
        },
    },
    "loggers": {
        "spotscape": {
            "handlers": ["console"],
            "level": os.environ.get("SPOTSCAPE_LOG_LEVEL", "INFO"),
            "propagate": False,
        },
    },
}
