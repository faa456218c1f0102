import os

from django.core.exceptions import ValidationError

from .apps import DEFAULT_CFG
from .graph import MASK_MODES
from .losses import granularity_sizes
from .network import FINAL_ACTIVATIONS

TRAIN_MODES = ("single", "multi")
LR_SEARCH_CRITERIA = ("silhouette", "nmi")


class RunConfigValidation:
    """
    Contrôle d'un document de configuration à plat : clés connues, types des valeurs.
    """

    @classmethod
    def validate(cls, data, source="configuration"):
        errors = []

        for error in validate_known_keys(data, source):
            errors.append(ValidationError(error["message"], code="unknown_key"))

        for error in validate_value_types(data):
            errors.append(ValidationError(error["message"], code="invalid_value"))

        if errors:
            raise ValidationError(errors)


def validate_known_keys(data, source):
    unknown = sorted(set(data) - set(DEFAULT_CFG))
    return [{"message": f"{source} : clé inconnue '{key}'"} for key in unknown]


LIST_ITEM_TYPES = {
    "encoder_dims": int,
    "pcl_granularities": float,
    "lr_grid": float,
    "inputs": str,
}


def _is_of_type(value, expected):
    if isinstance(value, bool) or expected is bool:
        return isinstance(value, bool) and expected is bool
    if expected is int:
        return isinstance(value, int)
    if expected is float:
        return isinstance(value, (int, float))
    return isinstance(value, expected)


def validate_value_types(data):
    errors = []
    for key, value in data.items():
        if key not in DEFAULT_CFG:
            continue
        expected = DEFAULT_CFG[key]
        if isinstance(expected, list):
            if not isinstance(value, (list, tuple)):
                valid = False
            else:
                item_type = LIST_ITEM_TYPES.get(key, str)
                bad = [item for item in value if not _is_of_type(item, item_type)]
                if bad:
                    errors.append({
                        "message": f"{key} : élément {bad[0]!r} invalide, {item_type.__name__} attendu",
                    })
                    continue
                valid = True
        else:
            valid = _is_of_type(value, type(expected))
        if not valid:
            errors.append({"message": f"{key} : valeur {value!r} de type {type(value).__name__} invalide"})
    return errors


class TrainConfigValidation:
    """
    Règles d'entraînement ; le jeu de données, s'il est fourni, ajoute les contrôles de taille.
    """

    @classmethod
    def validate(cls, config, dataset=None):
        errors = []

        for error in validate_training_schedule(config):
            errors.append(ValidationError(error["message"], code="parameter_error"))

        for error in validate_augmentation(config):
            errors.append(ValidationError(error["message"], code="parameter_error"))

        for error in validate_loss_settings(config):
            errors.append(ValidationError(error["message"], code="parameter_error"))

        if dataset is not None:
            for error in validate_dataset_fit(config, dataset):
                errors.append(ValidationError(error["message"], code="parameter_error"))

        if errors:
            raise ValidationError(errors)


def validate_training_schedule(config):
    errors = []
    if config.mode not in TRAIN_MODES:
        errors.append({"message": f"mode '{config.mode}' inconnu (single|multi)"})
    if config.epochs < 1:
        errors.append({"message": f"epochs={config.epochs} : au moins une epoch requise"})
    if config.learning_rate <= 0:
        errors.append({"message": f"learning_rate={config.learning_rate} doit être > 0"})
    if config.weight_decay < 0:
        errors.append({"message": f"weight_decay={config.weight_decay} doit être ≥ 0"})
    if config.checkpoint_every < 1:
        errors.append({"message": "checkpoint_every doit être ≥ 1"})
    if config.threads < 1:
        errors.append({"message": "threads doit être ≥ 1"})
    if not config.encoder_dims or any(d < 1 for d in config.encoder_dims):
        errors.append({"message": f"encoder_dims={list(config.encoder_dims)} invalide"})
    if config.decoder_hidden < 1:
        errors.append({"message": "decoder_hidden doit être ≥ 1"})
    if config.final_activation not in FINAL_ACTIVATIONS:
        errors.append({"message": f"final_activation '{config.final_activation}' inconnue (relu|none)"})
    if not config.lr_grid or any(lr <= 0 for lr in config.lr_grid):
        errors.append({"message": "lr_grid doit contenir des taux > 0"})
    if config.lr_search_criterion not in LR_SEARCH_CRITERIA:
        errors.append({"message": f"lr_search_criterion '{config.lr_search_criterion}' inconnu (silhouette|nmi)"})
    if config.kmeans_restarts < 1:
        errors.append({"message": "kmeans_restarts doit être ≥ 1"})
    return errors


def validate_augmentation(config):
    errors = []
    for name in ("feature_mask_rate_1", "feature_mask_rate_2", "edge_mask_rate_1", "edge_mask_rate_2"):
        rate = getattr(config, name)
        if not 0.0 <= rate <= 1.0:
            errors.append({"message": f"{name}={rate} hors de [0, 1]"})
    if config.mask_mode not in MASK_MODES:
        errors.append({"message": f"mask_mode '{config.mask_mode}' inconnu (column|entry)"})
    if config.snn_k < 1:
        errors.append({"message": f"snn_k={config.snn_k} doit être ≥ 1"})
    return errors


def validate_loss_settings(config):
    errors = []
    for name in ("lambda_sc", "lambda_recon", "lambda_pcl", "lambda_ss"):
        if getattr(config, name) < 0:
            errors.append({"message": f"{name}={getattr(config, name)} doit être ≥ 0"})
    if config.tau <= 0:
        errors.append({"message": f"tau={config.tau} doit être > 0"})
    if config.top_k < 1:
        errors.append({"message": f"top_k={config.top_k} doit être ≥ 1"})
    if config.warmup_epochs < 0:
        errors.append({"message": "warmup_epochs doit être ≥ 0"})
    if config.pcl_refresh_every < 1:
        errors.append({"message": "pcl_refresh_every doit être ≥ 1"})
    if not config.pcl_granularities or any(g <= 0 for g in config.pcl_granularities):
        errors.append({"message": "pcl_granularities doit contenir des facteurs > 0"})
    if config.n_clusters < 2:
        errors.append({"message": f"n_clusters={config.n_clusters} : au moins 2 domaines requis"})
    return errors


def validate_dataset_fit(config, dataset):
    errors = []
    if config.mode == "multi" and dataset.n_slices < 2:
        errors.append({"message": f"mode multi : {dataset.n_slices} coupe fournie, au moins 2 requises"})
    if config.mode == "single" and dataset.n_slices > 1:
        errors.append({"message": f"mode single : {dataset.n_slices} coupes fournies, une seule attendue"})
    for s in dataset.slices:
        if s.n_spots < config.snn_k + 1:
            errors.append({"message": f"{s.slice_id} : {s.n_spots} spots pour snn_k={config.snn_k}"})
        if config.mode == "multi":
            needed = config.top_k + (0 if config.ss_include_self else 1)
            if s.n_spots < needed:
                errors.append({"message": f"{s.slice_id} : {s.n_spots} spots pour top_k={config.top_k}"})
    uses_pcl = config.mode == "multi" or config.single_pcl
    if uses_pcl and config.epochs > config.warmup_epochs and config.pcl_granularities:
        largest = max(granularity_sizes(config.n_clusters, config.pcl_granularities))
        if largest > dataset.n_spots:
            errors.append({"message": f"{dataset.n_spots} spots pour {largest} prototypes (n_clusters={config.n_clusters})"})
    return errors


class InputPathsValidation:
    """
    Vérifie les chemins d'entrée avant tout calcul.
    """

    @classmethod
    def validate(cls, directories=(), files=()):
        errors = []

        for error in validate_directories(directories):
            errors.append(ValidationError(error["message"], code="ingestion_error"))

        for error in validate_files(files):
            errors.append(ValidationError(error["message"], code="ingestion_error"))

        if errors:
            raise ValidationError(errors)


def validate_directories(directories):
    return [{"message": f"Répertoire introuvable : {d}"} for d in directories if not os.path.isdir(d)]


def validate_files(files):
    return [{"message": f"Fichier introuvable : {f}"} for f in files if f and not os.path.isfile(f)]
