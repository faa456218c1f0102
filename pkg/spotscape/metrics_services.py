"""
Métriques d'évaluation : K-means, ARI / NMI / CA, silhouette, mélange des coupes,
transfert d'étiquettes et recherche du taux d'apprentissage.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from django.core.exceptions import ValidationError
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans
from sklearn.metrics import (
    adjusted_rand_score,
    normalized_mutual_info_score,
    silhouette_samples,
    silhouette_score,
)
from sklearn.metrics.cluster import contingency_matrix
from sklearn.preprocessing import normalize

from .exceptions import SpotscapeError, UndefinedMetricError
from .numeric import SeededRng
from .services import TrainingService, embed

logger = logging.getLogger(__name__)

KMEANS_MAX_ITER = 300
KMEANS_TOL = 1e-6
TRANSFER_CHUNK = 4096


def _as_matrix(embeddings):
    if hasattr(embeddings, "detach"):
        embeddings = embeddings.detach().cpu().numpy()
    return np.asarray(embeddings, dtype=np.float64)


def _check_lengths(truth, pred):
    truth, pred = np.asarray(truth), np.asarray(pred)
    if truth.shape[0] != pred.shape[0]:
        raise ValidationError(
            f"Partitions de longueurs différentes : {truth.shape[0]} et {pred.shape[0]}",
            code="shape_mismatch",
        )
    return truth, pred


def _kmeans_seed(rng):
    if isinstance(rng, SeededRng):
        return rng.integer_seed()
    return SeededRng(0 if rng is None else rng, "kmeans").integer_seed()


# --------------------------------------------------------------------
# Clustering
# --------------------------------------------------------------------

@dataclass
class Partition:
    labels: np.ndarray
    centers: Optional[np.ndarray] = None
    objective: Optional[float] = None

    @property
    def n_clusters(self):
        return len(np.unique(self.labels))


def k_means(embeddings, k, rng=None, restarts=10):
    """
    Meilleur de `restarts` lancements k-means++ / Lloyd (inertie minimale).
    rng : SeededRng ou graine entière.
    """
    points = _as_matrix(embeddings)
    n_spots = points.shape[0]
    if not 2 <= k <= n_spots:
        raise ValidationError(f"k={k} hors de [2, {n_spots}]", code="parameter_error")
    if restarts < 1:
        raise ValidationError("restarts doit être ≥ 1", code="parameter_error")
    model = KMeans(
        n_clusters=k,
        init="k-means++",
        n_init=restarts,
        max_iter=KMEANS_MAX_ITER,
        tol=KMEANS_TOL,
        algorithm="lloyd",
        random_state=_kmeans_seed(rng),
    ).fit(points)
    return Partition(labels=model.labels_.astype(int), centers=model.cluster_centers_, objective=float(model.inertia_))


def ari(truth, pred):
    truth, pred = _check_lengths(truth, pred)
    return float(adjusted_rand_score(truth, pred))


def nmi(truth, pred):
    """
    Information mutuelle normalisée par la moyenne arithmétique des entropies.
    Deux partitions à un seul groupe : 1.0.
    """
    truth, pred = _check_lengths(truth, pred)
    return float(normalized_mutual_info_score(truth, pred, average_method="arithmetic"))


def clustering_accuracy(truth, pred):
    """
    Fraction appariée sous la meilleure bijection d'étiquettes (affectation optimale
    sur la table de contingence).
    """
    truth, pred = _check_lengths(truth, pred)
    if truth.shape[0] == 0:
        raise ValidationError("Partitions vides", code="parameter_error")
    table = contingency_matrix(truth, pred)
    rows, cols = linear_sum_assignment(table, maximize=True)
    return float(table[rows, cols].sum() / truth.shape[0])


def silhouette(embeddings, labels):
    """
    Silhouette euclidienne moyenne ; un spot seul dans son groupe vaut 0.
    """
    points = _as_matrix(embeddings)
    labels = np.asarray(labels)
    _check_lengths(points, labels)
    n_labels = len(np.unique(labels))
    if n_labels < 2:
        raise UndefinedMetricError("Silhouette indéfinie : un seul groupe")
    if n_labels == points.shape[0]:
        return 0.0
    return float(silhouette_score(points, labels, metric="euclidean"))


def silhouette_batch(embeddings, domain_labels, membership, skipped=None):
    """
    Par domaine : 1 − moyenne |silhouette| avec les coupes comme étiquettes ; moyenne sur
    les domaines. Un domaine présent dans une seule coupe est écarté (ajouté à `skipped`).
    """
    points = _as_matrix(embeddings)
    domain_labels = np.asarray(domain_labels)
    membership = np.asarray(membership)
    _check_lengths(points, domain_labels)
    _check_lengths(points, membership)
    if len(np.unique(membership)) < 2:
        raise ValidationError("silhouette_batch exige au moins 2 coupes", code="parameter_error")
    skipped = skipped if skipped is not None else []
    scores = []
    for domain in np.unique(domain_labels):
        idx = np.flatnonzero(domain_labels == domain)
        batches = membership[idx]
        n_batches = len(np.unique(batches))
        if n_batches < 2:
            skipped.append(str(domain))
            logger.warning(f"[Eval] domaine {domain} présent dans une seule coupe : ignoré par silhouette_batch")
            continue
        if n_batches == len(idx):
            values = np.zeros(len(idx))
        else:
            values = silhouette_samples(points[idx], batches, metric="euclidean")
        scores.append(1.0 - float(np.abs(values).mean()))
    if not scores:
        raise UndefinedMetricError("silhouette_batch indéfinie : aucun domaine partagé entre coupes")
    return float(np.mean(scores))


# --------------------------------------------------------------------
# Alignement
# --------------------------------------------------------------------

def transfer_labels(ref_embeddings, ref_labels, query_embeddings):
    """
    Plus proche spot de référence au sens cosinus pour chaque requête
    (égalité : indice le plus faible). Retourne (indices, étiquettes transférées).
    """
    ref = _as_matrix(ref_embeddings)
    query = _as_matrix(query_embeddings)
    ref_labels = np.asarray(ref_labels)
    if ref.shape[0] == 0:
        raise ValidationError("Référence vide : aucun spot à apparier", code="parameter_error")
    if ref_labels.shape[0] != ref.shape[0]:
        raise ValidationError(
            f"{ref_labels.shape[0]} étiquettes pour {ref.shape[0]} spots de référence",
            code="shape_mismatch",
        )
    if ref.shape[1] != query.shape[1]:
        raise ValidationError(
            f"Dimensions différentes : référence {ref.shape[1]}, requête {query.shape[1]}",
            code="shape_mismatch",
        )
    ref_unit = normalize(ref)
    query_unit = normalize(query)
    nearest = np.empty(query.shape[0], dtype=int)
    for start in range(0, query.shape[0], TRANSFER_CHUNK):
        stop = start + TRANSFER_CHUNK
        nearest[start:stop] = np.argmax(query_unit[start:stop] @ ref_unit.T, axis=1)

    # cosinus indéfini pour une ligne nulle : correspondance exacte avec une référence nulle
    zero_query = np.flatnonzero(~query.any(axis=1))
    if len(zero_query):
        zero_ref = np.flatnonzero(~ref.any(axis=1))
        if len(zero_ref):
            nearest[zero_query] = zero_ref[0]
        else:
            logger.warning(
                f"[Eval] {len(zero_query)} spot(s) requête de norme nulle sans référence nulle, "
                f"appariés au spot {nearest[zero_query[0]]}"
            )
    return nearest, ref_labels[nearest]


def label_transfer_ari(ref_embeddings, ref_labels, query_embeddings, query_truth):
    _, transferred = transfer_labels(ref_embeddings, ref_labels, query_embeddings)
    return ari(query_truth, transferred)


def anchor_similarity(embeddings, anchor):
    """
    Similarité cosinus du spot `anchor` avec tous les spots.
    """
    points = _as_matrix(embeddings)
    if not 0 <= anchor < points.shape[0]:
        raise ValidationError(f"Spot d'ancrage {anchor} hors de [0, {points.shape[0] - 1}]", code="parameter_error")
    unit = normalize(points)
    return unit @ unit[anchor]


# --------------------------------------------------------------------
# Rapport de métriques
# --------------------------------------------------------------------

@dataclass
class MetricsReport:
    ari: Optional[float] = None
    nmi: Optional[float] = None
    ca: Optional[float] = None
    silhouette: Optional[float] = None
    silhouette_batch: Optional[float] = None
    ltari: Optional[float] = None
    k: Optional[int] = None
    seed: List[int] = field(default_factory=list)
    partition: Optional[np.ndarray] = field(default=None, repr=False)
    skipped_domains: List[str] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)

    def to_json(self):
        return {
            "ari": self.ari,
            "nmi": self.nmi,
            "ca": self.ca,
            "silhouette": self.silhouette,
            "silhouette_batch": self.silhouette_batch,
            "ltari": self.ltari,
            "k": self.k,
            "seed": list(self.seed),
        }


@dataclass
class MetricContext:
    embeddings: np.ndarray
    predicted: np.ndarray
    truth: Optional[np.ndarray] = None
    membership: Optional[np.ndarray] = None
    skipped: List[str] = field(default_factory=list)


def _metric_ari(ctx):
    return None if ctx.truth is None else ari(ctx.truth, ctx.predicted)


def _metric_nmi(ctx):
    return None if ctx.truth is None else nmi(ctx.truth, ctx.predicted)


def _metric_ca(ctx):
    return None if ctx.truth is None else clustering_accuracy(ctx.truth, ctx.predicted)


def _metric_silhouette(ctx):
    return silhouette(ctx.embeddings, ctx.predicted)


def _metric_silhouette_batch(ctx):
    if ctx.membership is None or len(np.unique(ctx.membership)) < 2:
        return None
    domains = ctx.truth if ctx.truth is not None else ctx.predicted
    return silhouette_batch(ctx.embeddings, domains, ctx.membership, skipped=ctx.skipped)


METRICS = {
    "ari": _metric_ari,
    "nmi": _metric_nmi,
    "ca": _metric_ca,
    "silhouette": _metric_silhouette,
    "silhouette_batch": _metric_silhouette_batch,
}


def compute_metrics_report(embeddings, k, seeds=(0,), labels=None, membership=None, restarts=10):
    """
    K-means à k pour chaque graine puis calcul de chaque métrique du registre ;
    les valeurs sont moyennées sur les graines. Une métrique en échec est journalisée,
    vaut None, et n'empêche pas les autres.
    """
    points = _as_matrix(embeddings)
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValidationError("Au moins une graine requise", code="parameter_error")
    if labels is not None:
        _check_lengths(points, labels)
        labels = np.asarray(labels)
    if membership is not None:
        _check_lengths(points, membership)
        membership = np.asarray(membership)

    collected = {name: [] for name in METRICS}
    report = MetricsReport(k=int(k), seed=seeds)
    for seed in seeds:
        partition = k_means(points, k, rng=seed, restarts=restarts)
        if report.partition is None:
            report.partition = partition.labels
        ctx = MetricContext(points, partition.labels, truth=labels, membership=membership)
        for name, fn in METRICS.items():
            try:
                value = fn(ctx)
                if value is not None:
                    collected[name].append(value)
            except (SpotscapeError, ValidationError, ValueError) as e:
                msg = f"{name} (graine {seed}) : {e}"
                report.errors.append(msg)
                logger.error(f"[Eval] {msg}")
        for domain in ctx.skipped:
            if domain not in report.skipped_domains:
                report.skipped_domains.append(domain)

    for name, values in collected.items():
        if values:
            setattr(report, name, float(np.mean(values)))
    logger.info(
        f"[Eval] k={k}, graines {seeds} : ari={report.ari} nmi={report.nmi} ca={report.ca} "
        f"silhouette={report.silhouette} silhouette_batch={report.silhouette_batch}"
    )
    return report


# --------------------------------------------------------------------
# Recherche du taux d'apprentissage
# --------------------------------------------------------------------

@dataclass
class LrSearchResult:
    best_lr: float
    criterion: str
    scores: dict
    model: object = field(repr=False, default=None)
    report: object = field(repr=False, default=None)

    def to_dict(self):
        return {
            "criterion": self.criterion,
            "best_learning_rate": self.best_lr,
            "scores": [{"learning_rate": lr, "score": score} for lr, score in self.scores.items()],
        }


def lr_search(dataset, graph, config, lr_grid=None, criterion=None, checkpoint_path=None):
    """
    Un entraînement par taux (graine fixe), K-means à n_clusters sur les plongements,
    score par taux ; le meilleur score l'emporte, égalité : le plus petit taux.

    criterion : silhouette (non supervisé) ou nmi (exige les étiquettes).
    checkpoint_path : reçoit le point de reprise de l'entraînement retenu.
    """
    grid = sorted(float(lr) for lr in (lr_grid or config.lr_grid))
    criterion = criterion or config.lr_search_criterion
    if not grid:
        raise ValidationError("Grille de taux d'apprentissage vide", code="parameter_error")
    if criterion not in ("silhouette", "nmi"):
        raise ValidationError(f"Critère inconnu : {criterion}", code="parameter_error")
    if criterion == "nmi" and dataset.labels is None:
        raise ValidationError("Le critère nmi exige labels.csv pour chaque coupe", code="parameter_error")

    scores = {}
    candidates = {}
    best = None
    for i, lr in enumerate(grid):
        candidates[lr] = f"{checkpoint_path}.lr-{i}" if checkpoint_path else None
        service = TrainingService(config.replace(learning_rate=lr), checkpoint_path=candidates[lr])
        model, report = service.train(dataset, graph)
        embeddings = embed(model, dataset, graph)
        partition = k_means(embeddings, config.n_clusters, rng=config.seed, restarts=config.kmeans_restarts)
        try:
            if criterion == "silhouette":
                score = silhouette(embeddings, partition.labels)
            else:
                score = nmi(dataset.labels, partition.labels)
        except UndefinedMetricError as e:
            logger.warning(f"[Eval] lr={lr} : score indéfini ({e})")
            score = None
        scores[lr] = score
        logger.info(f"[Eval] lr={lr} : {criterion}={score}")
        if score is not None and (best is None or score > best[1]):
            best = (lr, score, model, report)

    if best is None:
        best_lr = grid[0]
        logger.warning(f"[Eval] aucun score défini sur la grille, lr={best_lr} retenu")
        best = (best_lr, None) + _retrain(dataset, graph, config, best_lr, candidates[best_lr])
    _keep_candidate(candidates, best[0], checkpoint_path)
    result = LrSearchResult(best_lr=best[0], criterion=criterion, scores=scores, model=best[2], report=best[3])
    best[3].lr_search = result.to_dict()
    return result


def _retrain(dataset, graph, config, lr, checkpoint_path):
    return TrainingService(config.replace(learning_rate=lr), checkpoint_path=checkpoint_path).train(dataset, graph)


def _keep_candidate(candidates, best_lr, checkpoint_path):
    if not checkpoint_path:
        return
    for lr, path in candidates.items():
        if lr == best_lr:
            os.replace(path, checkpoint_path)
        elif os.path.exists(path):
            os.remove(path)
