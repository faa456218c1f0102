"""
Socle numérique : produits dense/creux, normalisation des lignes, moyenne top-k,
normalisation par lots, pas d'Adam, gradients et générateurs aléatoires nommés.

Toute la partie entraînement travaille en float64. Le ruban de gradients est
celui de torch.autograd : les opérations ci-dessous sont enregistrées par torch
et rejouées par gradients_of().
"""
import logging
import zlib
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import torch
import torch.nn.functional as F
from django.core.exceptions import ValidationError

from .exceptions import DegenerateRowError, NumericError, ShapeError, StateError, TapeError

logger = logging.getLogger(__name__)

DTYPE = torch.float64
ROW_NORM_EPS = 1e-12
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


def as_tensor(values):
    if isinstance(values, torch.Tensor):
        return values if values.dtype == DTYPE else values.to(DTYPE)
    return torch.as_tensor(np.asarray(values, dtype=np.float64), dtype=DTYPE)


def is_finite(values):
    """
    Contrôle de validité : aucune valeur NaN / Inf.
    """
    if isinstance(values, torch.Tensor):
        return bool(torch.isfinite(values).all())
    return bool(np.isfinite(np.asarray(values, dtype=np.float64)).all())


# --------------------------------------------------------------------
# Matrice d'adjacence creuse
# --------------------------------------------------------------------

@dataclass(eq=False)
class SparseAdjacency:
    """
    Adjacence creuse (CSR) sur n_nodes sommets.
    """
    matrix: sp.csr_matrix
    symmetric: bool = True
    _torch: torch.Tensor = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.matrix = sp.csr_matrix(self.matrix, dtype=np.float64)
        self.matrix.sum_duplicates()
        self.matrix.sort_indices()
        if self.matrix.shape[0] != self.matrix.shape[1]:
            raise ShapeError(f"Adjacence non carrée : {self.matrix.shape}")

    @classmethod
    def from_edges(cls, n_nodes, edges, symmetric=True):
        """
        Construit l'adjacence depuis une liste (source, cible, poids).
        """
        edges = list(edges)
        seen = set()
        for source, target, _weight in edges:
            if not (0 <= source < n_nodes and 0 <= target < n_nodes):
                raise ValidationError(
                    f"Arête ({source}, {target}) hors bornes pour {n_nodes} sommets",
                    code="parameter_error",
                )
            if (source, target) in seen:
                raise ValidationError(f"Arête ({source}, {target}) dupliquée", code="parameter_error")
            seen.add((source, target))
        if symmetric and any((t, s) not in seen for s, t in seen):
            raise ValidationError("Liste d'arêtes déclarée symétrique mais non symétrique", code="parameter_error")
        rows = [e[0] for e in edges]
        cols = [e[1] for e in edges]
        weights = [float(e[2]) for e in edges]
        matrix = sp.csr_matrix((weights, (rows, cols)), shape=(n_nodes, n_nodes))
        return cls(matrix, symmetric=symmetric)

    @property
    def n_nodes(self):
        return self.matrix.shape[0]

    @property
    def n_edges(self):
        return self.matrix.nnz

    def edge_list(self):
        coo = self.matrix.tocoo()
        return [(int(i), int(j), float(w)) for i, j, w in zip(coo.row, coo.col, coo.data)]

    def to_dense(self):
        return self.matrix.toarray()

    def to_torch(self):
        if self._torch is None:
            coo = self.matrix.tocoo()
            indices = torch.as_tensor(np.vstack([coo.row, coo.col]), dtype=torch.long)
            values = torch.as_tensor(coo.data, dtype=DTYPE)
            self._torch = torch.sparse_coo_tensor(indices, values, coo.shape).coalesce()
        return self._torch


# --------------------------------------------------------------------
# Opérations différentiables
# --------------------------------------------------------------------

def matmul(a, b):
    """
    Produit exact a × b ; a peut être creux (seules les arêtes stockées sont lues).
    """
    b = as_tensor(b)
    if isinstance(a, SparseAdjacency):
        a = a.to_torch()
    elif not isinstance(a, torch.Tensor):
        a = as_tensor(a)
    if a.dim() != 2 or b.dim() != 2:
        raise ShapeError(f"matmul attend deux matrices, reçu {tuple(a.shape)} et {tuple(b.shape)}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"Dimensions incompatibles : {tuple(a.shape)} × {tuple(b.shape)}")
    if a.is_sparse:
        return torch.sparse.mm(a, b)
    return a @ b


def row_l2_normalize(m, eps=ROW_NORM_EPS):
    m = as_tensor(m)
    norms = torch.linalg.vector_norm(m, dim=1)
    degenerate = torch.nonzero(norms < eps)
    if degenerate.numel():
        row = int(degenerate[0, 0])
        raise DegenerateRowError(row, float(norms[row]))
    return m / norms.unsqueeze(1)


def top_k_mean(values, k):
    """
    Moyenne des k plus grandes valeurs sur la dernière dimension.

    Égalités départagées par l'indice le plus faible ; l'ensemble retenu est une
    constante de la passe avant, le sous-gradient ne va qu'aux entrées retenues.
    """
    values = as_tensor(values)
    size = values.shape[-1]
    if k < 1 or k > size:
        raise ValidationError(f"top-k impossible : k={k} pour {size} valeurs", code="parameter_error")
    order = torch.sort(values.detach(), dim=-1, descending=True, stable=True).indices[..., :k]
    return torch.gather(values, -1, order).mean(dim=-1)


@dataclass
class RunningStats:
    """
    Statistiques glissantes d'une normalisation par lots.
    """
    mean: torch.Tensor
    var: torch.Tensor
    num_batches_tracked: torch.Tensor

    @classmethod
    def empty(cls, n_columns):
        return cls(
            mean=torch.zeros(n_columns, dtype=DTYPE),
            var=torch.ones(n_columns, dtype=DTYPE),
            num_batches_tracked=torch.zeros((), dtype=torch.long),
        )


def batch_norm_column(x, gamma, beta, running, mode="train", momentum=BN_MOMENTUM, eps=BN_EPS):
    """
    Normalisation colonne par colonne.

    train : moyenne / variance biaisée du lot, mise à jour des statistiques glissantes ;
    eval : statistiques glissantes, qui doivent avoir été alimentées.
    """
    x = as_tensor(x)
    if gamma.shape[0] != x.shape[1] or beta.shape[0] != x.shape[1]:
        raise ShapeError(f"Normalisation : {x.shape[1]} colonnes, gamma {gamma.shape[0]}, beta {beta.shape[0]}")
    if mode not in ("train", "eval"):
        raise ValidationError(f"Mode inconnu : {mode}", code="parameter_error")
    training = mode == "train"
    if not training and int(running.num_batches_tracked) == 0:
        raise StateError("Statistiques glissantes vides : impossible d'évaluer en mode eval")
    if training:
        running.num_batches_tracked.add_(1)
    return F.batch_norm(
        x, running.mean, running.var, weight=gamma, bias=beta,
        training=training, momentum=momentum, eps=eps,
    )


# --------------------------------------------------------------------
# Optimisation et gradients
# --------------------------------------------------------------------

def make_optimizer(params, lr, weight_decay=0.0):
    """
    Adam ; la décroissance des poids est un terme L2 ajouté au gradient.
    """
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS, weight_decay=weight_decay)


def adam_step(optimizer, epoch=None):
    """
    Applique un pas d'Adam après contrôle des gradients ; un gradient non fini annule le pas.
    """
    for group in optimizer.param_groups:
        for param in group["params"]:
            if param.grad is not None and not torch.isfinite(param.grad).all():
                raise NumericError("Gradient non fini, pas d'optimisation annulé", epoch=epoch)
    optimizer.step()


def gradients_of(loss, leaves):
    """
    Adjoints exacts de la perte scalaire ; une feuille hors du chemin reçoit zéro.
    """
    if not isinstance(loss, torch.Tensor) or loss.grad_fn is None or not loss.requires_grad:
        raise TapeError("La perte n'est pas reliée au ruban de gradients")
    if loss.numel() != 1:
        raise TapeError(f"La perte doit être scalaire, forme reçue {tuple(loss.shape)}")
    leaves = list(leaves)
    grads = torch.autograd.grad(loss, leaves, allow_unused=True, retain_graph=True)
    return [torch.zeros_like(leaf) if grad is None else grad for leaf, grad in zip(leaves, grads)]


# --------------------------------------------------------------------
# Aléa reproductible
# --------------------------------------------------------------------

class SeededRng:
    """
    Générateur nommé : (graine, flux) donne toujours la même suite de tirages.
    Les flux (augmentation, K-means, initialisation) sont indépendants entre eux.
    """

    def __init__(self, seed, stream="default"):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.stream = str(stream)
        self._sequence = np.random.SeedSequence([self.seed, zlib.crc32(self.stream.encode("utf-8"))])
        self.numpy = np.random.default_rng(self._sequence)
        self._torch = None

    def __repr__(self):
        return f"SeededRng(seed={self.seed}, stream={self.stream!r})"

    def spawn(self, label):
        return SeededRng(self.seed, f"{self.stream}/{label}")

    def integer_seed(self):
        """
        Graine 32 bits dérivée, pour les bibliothèques qui attendent un entier (scikit-learn).
        """
        return int(self._sequence.generate_state(1, dtype=np.uint32)[0])

    @property
    def torch(self):
        if self._torch is None:
            generator = torch.Generator()
            generator.manual_seed(int(self._sequence.generate_state(1, dtype=np.uint64)[0]) >> 1)
            self._torch = generator
        return self._torch


def configure_threads(threads=1):
    """
    threads=1 : mode séquentiel, reproductible bit à bit.
    """
    threads = max(1, int(threads))
    torch.set_num_threads(threads)
    if threads > 1:
        logger.info(f"[Numeric] réduction parallèle sur {threads} threads (reproductibilité à 1e-10 près)")
    return threads
