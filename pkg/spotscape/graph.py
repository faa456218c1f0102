"""
Graphe SNN (plus proches voisins spatiaux), structure bloc multi-coupes,
opérateur GCN normalisé et vues augmentées.
"""
import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import torch
from django.core.exceptions import ValidationError
from scipy.spatial.distance import cdist

from .numeric import SparseAdjacency, as_tensor

logger = logging.getLogger(__name__)

MASK_MODES = ("column", "entry")
DISTANCE_CHUNK = 2048


@dataclass(eq=False)
class SnnGraph:
    """
    Adjacence symétrique non pondérée sans boucle, avec l'appartenance de chaque spot à sa coupe.
    """
    adjacency: SparseAdjacency
    membership: np.ndarray
    _normalized: SparseAdjacency = field(default=None, init=False, repr=False)

    def __post_init__(self):
        self.membership = np.asarray(self.membership, dtype=int)
        if len(self.membership) != self.adjacency.n_nodes:
            raise ValidationError(
                f"{len(self.membership)} appartenances pour {self.adjacency.n_nodes} spots",
                code="parameter_error",
            )

    @property
    def n_spots(self):
        return self.adjacency.n_nodes

    @property
    def n_edges(self):
        """Nombre d'arêtes non orientées."""
        return self.adjacency.n_edges // 2

    @property
    def normalized(self):
        if self._normalized is None:
            self._normalized = gcn_normalize(self.adjacency)
        return self._normalized

    def operator(self):
        return self.normalized.to_torch()


@dataclass(eq=False)
class AugmentedView:
    """
    Vue augmentée (X̃, Ã) ; l'opérateur GCN se recalcule sur Ã.
    """
    features: torch.Tensor
    adjacency: SparseAdjacency
    feature_mask_rate: float
    edge_mask_rate: float
    stream: str = ""
    _operator: SparseAdjacency = field(default=None, init=False, repr=False)

    def operator(self):
        if self._operator is None:
            self._operator = gcn_normalize(self.adjacency)
        return self._operator.to_torch()


def build_snn_graph(coords, k=6):
    """
    Relie chaque spot à ses k plus proches voisins (distance euclidienne),
    puis symétrise par union. Égalités de distance : indice le plus faible d'abord.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n_spots = coords.shape[0]
    if k < 1:
        raise ValidationError(f"snn_k doit être ≥ 1 (reçu {k})", code="parameter_error")
    if n_spots < k + 1:
        raise ValidationError(
            f"{n_spots} spots pour snn_k={k} : au moins k+1 spots requis",
            code="parameter_error",
        )
    rows, cols = [], []
    for start in range(0, n_spots, DISTANCE_CHUNK):
        stop = min(start + DISTANCE_CHUNK, n_spots)
        distances = cdist(coords[start:stop], coords)
        distances[np.arange(stop - start), np.arange(start, stop)] = np.inf
        neighbors = np.argsort(distances, axis=1, kind="stable")[:, :k]
        rows.append(np.repeat(np.arange(start, stop), k))
        cols.append(neighbors.ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    directed = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_spots, n_spots))
    adjacency = directed.maximum(directed.T)
    adjacency.data[:] = 1.0
    graph = SnnGraph(SparseAdjacency(adjacency, symmetric=True), np.zeros(n_spots, dtype=int))
    logger.debug(f"[Graph] SNN : {n_spots} spots, k={k}, {graph.n_edges} arêtes")
    return graph


def build_multi_slice_graph(dataset, k=6):
    """
    Assemble les graphes SNN de chaque coupe en blocs diagonaux (indices globaux).
    """
    blocks = []
    for s in dataset.slices:
        blocks.append(build_snn_graph(s.coords, k).adjacency.matrix)
    adjacency = sp.block_diag(blocks, format="csr")
    graph = SnnGraph(SparseAdjacency(adjacency, symmetric=True), dataset.membership)
    logger.info(f"[Graph] {dataset.n_slices} coupe(s), {graph.n_spots} spots, {graph.n_edges} arêtes")
    return graph


def gcn_normalize(adjacency):
    """
    Â = D̃^(-1/2) (A + I) D̃^(-1/2), D̃ = degrés de A + I.
    """
    matrix = adjacency.matrix if isinstance(adjacency, SparseAdjacency) else sp.csr_matrix(adjacency)
    n_nodes = matrix.shape[0]
    with_loops = matrix + sp.identity(n_nodes, dtype=np.float64, format="csr")
    degree = np.asarray(with_loops.sum(axis=1)).ravel()
    inv_sqrt = sp.diags(1.0 / np.sqrt(degree))
    return SparseAdjacency(inv_sqrt @ with_loops @ inv_sqrt, symmetric=True)


def augment(graph, features, feature_mask_rate=0.2, edge_mask_rate=0.2, rng=None, mask_mode="column"):
    """
    Masquage des variables (colonnes de gènes entières, ou entrées isolées en mode entry)
    et suppression d'arêtes non orientées (les deux sens ensemble).
    """
    for name, rate in (("feature_mask_rate", feature_mask_rate), ("edge_mask_rate", edge_mask_rate)):
        if not 0.0 <= rate <= 1.0:
            raise ValidationError(f"{name}={rate} hors de [0, 1]", code="parameter_error")
    if mask_mode not in MASK_MODES:
        raise ValidationError(f"mask_mode inconnu : {mask_mode}", code="parameter_error")
    features = as_tensor(features)
    draws = rng.numpy

    if mask_mode == "column":
        keep = draws.random(features.shape[1]) >= feature_mask_rate
        mask = torch.as_tensor(keep, dtype=features.dtype).unsqueeze(0)
    else:
        keep = draws.random(tuple(features.shape)) >= feature_mask_rate
        mask = torch.as_tensor(keep, dtype=features.dtype)
    masked_features = features * mask

    upper = sp.triu(graph.adjacency.matrix, k=1).tocoo()
    survive = draws.random(upper.nnz) >= edge_mask_rate
    kept = sp.csr_matrix(
        (upper.data[survive], (upper.row[survive], upper.col[survive])),
        shape=upper.shape,
    )
    masked_adjacency = SparseAdjacency(kept + kept.T, symmetric=True)
    return AugmentedView(
        features=masked_features,
        adjacency=masked_adjacency,
        feature_mask_rate=feature_mask_rate,
        edge_mask_rate=edge_mask_rate,
        stream=rng.stream,
    )
