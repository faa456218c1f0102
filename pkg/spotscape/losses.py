"""
Pertes Spotscape : télescope de similarité, reconstruction, contraste prototypique
et mise à l'échelle des similarités inter-coupes, plus leurs combinaisons pondérées.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import List

import numpy as np
import torch
import torch.nn.functional as F
from django.core.exceptions import ValidationError
from sklearn.cluster import KMeans

from .exceptions import ShapeError
from .numeric import DTYPE, SeededRng, as_tensor, row_l2_normalize, top_k_mean

logger = logging.getLogger(__name__)

PROTOTYPE_MAX_ITER = 100
PROTOTYPE_TOL = 1e-6


@dataclass
class LossWeights:
    lambda_sc: float = 1.0
    lambda_recon: float = 0.1
    lambda_pcl: float = 0.01
    lambda_ss: float = 1.0
    tau: float = 0.75
    top_k: int = 5
    warmup_epochs: int = 500

    def validate(self):
        errors = []
        for name in ("lambda_sc", "lambda_recon", "lambda_pcl", "lambda_ss"):
            if getattr(self, name) < 0:
                errors.append(ValidationError(f"{name} doit être positif ou nul", code="parameter_error"))
        if self.tau <= 0:
            errors.append(ValidationError("tau doit être > 0", code="parameter_error"))
        if self.top_k < 1:
            errors.append(ValidationError("top_k doit être ≥ 1", code="parameter_error"))
        if self.warmup_epochs < 0:
            errors.append(ValidationError("warmup_epochs doit être ≥ 0", code="parameter_error"))
        if errors:
            raise ValidationError(errors)
        return self


@dataclass
class LossParts:
    """
    Composantes non pondérées d'une epoch (0 pour une composante inactive).
    """
    sc: torch.Tensor
    recon: torch.Tensor
    pcl: torch.Tensor = None
    ss: torch.Tensor = None

    def __post_init__(self):
        zero = torch.zeros((), dtype=DTYPE)
        if self.pcl is None:
            self.pcl = zero
        if self.ss is None:
            self.ss = zero

    def as_floats(self):
        return {name: float(getattr(self, name).detach()) for name in ("sc", "recon", "pcl", "ss")}


@dataclass
class PrototypeSet:
    """
    Une granularité par entrée : centroïdes unitaires (K_t × D) et affectation spot → centroïde.
    """
    centroids: List[torch.Tensor] = field(default_factory=list)
    assignments: List[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if len(self.centroids) != len(self.assignments):
            raise ValidationError("Autant d'affectations que de granularités requises", code="parameter_error")

    @property
    def n_granularities(self):
        return len(self.centroids)

    @property
    def sizes(self):
        return [int(c.shape[0]) for c in self.centroids]

    def to_state(self):
        return {
            "centroids": [c.detach().clone() for c in self.centroids],
            "assignments": [torch.as_tensor(a, dtype=torch.long) for a in self.assignments],
        }

    @classmethod
    def from_state(cls, state):
        if state is None:
            return None
        return cls(
            centroids=[as_tensor(c) for c in state["centroids"]],
            assignments=[np.asarray(a, dtype=int) for a in state["assignments"]],
        )


# --------------------------------------------------------------------
# Pertes
# --------------------------------------------------------------------

def similarity_telescope_loss(z1, z2):
    """
    H = norm(Z̃) · norm(Z̃′)ᵀ ; perte = moyenne de (H − Hᵀ)² sur les N_s² entrées.
    H est renvoyée pour la perte de mise à l'échelle.
    """
    z1, z2 = as_tensor(z1), as_tensor(z2)
    if z1.shape != z2.shape:
        raise ShapeError(f"Vues de formes différentes : {tuple(z1.shape)} et {tuple(z2.shape)}")
    h = row_l2_normalize(z1) @ row_l2_normalize(z2).T
    return ((h - h.T) ** 2).mean(), h


def reconstruction_loss(x, x_hat1, x_hat2):
    x, x_hat1, x_hat2 = as_tensor(x), as_tensor(x_hat1), as_tensor(x_hat2)
    if x_hat1.shape != x.shape or x_hat2.shape != x.shape:
        raise ShapeError(
            f"Reconstruction : cible {tuple(x.shape)}, sorties {tuple(x_hat1.shape)} et {tuple(x_hat2.shape)}"
        )
    return F.mse_loss(x_hat1, x) + F.mse_loss(x_hat2, x)


def granularity_sizes(k_base, granularities=(1.0, 1.5, 2.0)):
    # arrondi au plus proche, demi-entiers vers le haut
    return [int(np.floor(g * k_base + 0.5)) for g in granularities]


def compute_prototypes(z2, k_base, granularities=(1.0, 1.5, 2.0), rng=None):
    """
    K-means (k-means++, Lloyd) sur Z̃′ normalisée à K_t ∈ {K, round(1.5K), 2K}.

    Les centroïdes sont renormalisés et détachés du ruban. Un cluster vidé pendant
    Lloyd est réensemencé sur le point le plus éloigné (comportement de scikit-learn).
    """
    z2 = as_tensor(z2).detach()
    n_spots = z2.shape[0]
    if k_base < 2:
        raise ValidationError(f"n_clusters={k_base} : au moins 2 prototypes requis", code="parameter_error")
    sizes = granularity_sizes(k_base, granularities)
    if max(sizes) > n_spots:
        raise ValidationError(
            f"{n_spots} spots pour {max(sizes)} prototypes (n_clusters={k_base})",
            code="parameter_error",
        )
    rng = rng or SeededRng(0, "prototypes")
    points = row_l2_normalize(z2).numpy()
    centroids, assignments = [], []
    for t, k_t in enumerate(sizes):
        kmeans = KMeans(
            n_clusters=k_t,
            init="k-means++",
            n_init=1,
            max_iter=PROTOTYPE_MAX_ITER,
            tol=PROTOTYPE_TOL,
            algorithm="lloyd",
            random_state=rng.spawn(t).integer_seed(),
        ).fit(points)
        centers = row_l2_normalize(as_tensor(kmeans.cluster_centers_))
        centroids.append(centers)
        assignments.append(kmeans.labels_.astype(int))
    logger.debug(f"[Train] prototypes recalculés : K_t={sizes}")
    return PrototypeSet(centroids=centroids, assignments=assignments)


def prototypical_loss(z1, prototypes, tau=0.75):
    """
    −moyenne sur les spots de la moyenne sur les granularités du log-softmax
    de cos(Z̃_i, p)/τ au prototype affecté.
    """
    if tau <= 0:
        raise ValidationError(f"tau={tau} : la température doit être > 0", code="parameter_error")
    z1 = as_tensor(z1)
    if prototypes.n_granularities == 0:
        raise ValidationError("Ensemble de prototypes vide", code="parameter_error")
    normalized = row_l2_normalize(z1)
    total = torch.zeros((), dtype=DTYPE)
    for centers, assigned in zip(prototypes.centroids, prototypes.assignments):
        centers = as_tensor(centers).detach()
        if centers.shape[1] != normalized.shape[1]:
            raise ShapeError(f"Prototypes de dimension {centers.shape[1]} pour des plongements {normalized.shape[1]}")
        if len(assigned) != normalized.shape[0]:
            raise ShapeError(f"{len(assigned)} affectations pour {normalized.shape[0]} spots")
        log_probs = torch.log_softmax(normalized @ centers.T / tau, dim=1)
        index = torch.as_tensor(np.asarray(assigned), dtype=torch.long).unsqueeze(1)
        total = total + log_probs.gather(1, index).squeeze(1).mean()
    return -total / prototypes.n_granularities


def similarity_scaling_loss(h, membership, k=5, include_self=True):
    """
    Pour chaque spot i de la coupe c et chaque autre coupe j :
    (topk(H_i sur c) − topk(H_i sur j))², somme divisée par N_s·(N_d − 1).
    """
    h = as_tensor(h)
    membership = np.asarray(membership, dtype=int)
    n_spots = h.shape[0]
    if h.shape != (n_spots, n_spots) or len(membership) != n_spots:
        raise ShapeError(f"H {tuple(h.shape)} pour {len(membership)} appartenances")
    slices = np.unique(membership)
    if len(slices) < 2:
        raise ValidationError("La mise à l'échelle des similarités exige au moins 2 coupes", code="parameter_error")
    if k < 1:
        raise ValidationError(f"top_k={k} doit être ≥ 1", code="parameter_error")
    members = {c: np.flatnonzero(membership == c) for c in slices}
    for c, idx in members.items():
        needed = k + (0 if include_self else 1)
        if len(idx) < needed:
            raise ValidationError(
                f"Coupe {c} : {len(idx)} spots, top_k={k} en exige au moins {needed}",
                code="parameter_error",
            )
    total = torch.zeros((), dtype=DTYPE)
    for c, rows in members.items():
        rows_t = torch.as_tensor(rows, dtype=torch.long)
        block = h[rows_t][:, rows_t]
        if not include_self:
            diagonal = torch.eye(len(rows), dtype=torch.bool)
            block = block.masked_fill(diagonal, float("-inf"))
        own = top_k_mean(block, k)
        for j, cols in members.items():
            if j == c:
                continue
            other = top_k_mean(h[rows_t][:, torch.as_tensor(cols, dtype=torch.long)], k)
            total = total + ((own - other) ** 2).sum()
    return total / (n_spots * (len(slices) - 1))


# --------------------------------------------------------------------
# Combinaisons
# --------------------------------------------------------------------

def combined_single_loss(parts, weights):
    return weights.lambda_sc * parts.sc + weights.lambda_recon * parts.recon


def combined_multi_loss(parts, weights, epoch):
    """
    Le terme prototypique n'intervient qu'à partir de warmup_epochs ; SS dès l'epoch 0.
    """
    total = weights.lambda_sc * parts.sc + weights.lambda_recon * parts.recon + weights.lambda_ss * parts.ss
    if epoch >= weights.warmup_epochs:
        total = total + weights.lambda_pcl * parts.pcl
    return total


def weights_from_config(config):
    names = asdict(LossWeights()).keys()
    return LossWeights(**{name: getattr(config, name) for name in names}).validate()
