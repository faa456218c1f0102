"""
Erreurs numériques et d'exécution du pipeline.

Les erreurs de saisie (paramètres, fichiers, configuration) passent par
django.core.exceptions.ValidationError, voir validations.py.
"""


class SpotscapeError(Exception):
    """Racine des erreurs d'exécution (code de sortie 2 en ligne de commande)."""


class ShapeError(SpotscapeError, ValueError):
    pass


class DegenerateRowError(SpotscapeError, ArithmeticError):
    def __init__(self, row, norm=0.0):
        self.row = int(row)
        self.norm = float(norm)
        super().__init__(f"Ligne {self.row} dégénérée : norme {self.norm:.3e} inférieure au seuil")


class NumericError(SpotscapeError, ArithmeticError):
    def __init__(self, message, epoch=None):
        self.epoch = epoch
        if epoch is not None:
            message = f"[epoch {epoch}] {message}"
        super().__init__(message)


class StateError(SpotscapeError, RuntimeError):
    pass


class TapeError(SpotscapeError, RuntimeError):
    pass


class UndefinedMetricError(SpotscapeError, ValueError):
    pass
