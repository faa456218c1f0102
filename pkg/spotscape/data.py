"""
Coupes SRT : lecture, écriture, prétraitement, concaténation et données synthétiques.
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field, replace
from typing import List, Optional

import numpy as np
import pandas as pd
import scipy.io
import scipy.sparse as sp
from django.core.exceptions import ValidationError

from .bundle import atomic_write_text, write_frame_csv

logger = logging.getLogger(__name__)

EXPRESSION_CSV = "expression.csv"
EXPRESSION_MTX = "expression.mtx"
GENES_TXT = "genes.txt"
COORDS_CSV = "coords.csv"
LABELS_CSV = "labels.csv"
PREPROCESSING_MARKER = "preprocessing.json"


@dataclass
class Slice:
    """
    Une coupe : expression (spots × gènes), coordonnées 2D, gènes, domaines optionnels.
    """
    expression: np.ndarray
    coords: np.ndarray
    gene_names: List[str]
    labels: Optional[np.ndarray] = None
    slice_id: str = "slice_0"
    preprocessed: bool = False

    def __post_init__(self):
        self.expression = np.asarray(self.expression, dtype=np.float64)
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.gene_names = [str(g) for g in self.gene_names]
        if self.labels is not None:
            self.labels = np.asarray(self.labels).astype(str)
        errors = validate_slice_shapes(self)
        if errors:
            raise ValidationError(errors)

    @property
    def n_spots(self):
        return self.expression.shape[0]

    @property
    def n_genes(self):
        return self.expression.shape[1]


def validate_slice_shapes(slice_):
    errors = []
    if slice_.expression.ndim != 2:
        errors.append(ValidationError("La matrice d'expression doit être 2D", code="ingestion_error"))
        return errors
    n_spots, n_genes = slice_.expression.shape
    if slice_.coords.shape != (n_spots, 2):
        errors.append(ValidationError(
            f"{slice_.slice_id} : coordonnées {slice_.coords.shape} pour {n_spots} spots (attendu ({n_spots}, 2))",
            code="ingestion_error",
        ))
    if len(slice_.gene_names) != n_genes:
        errors.append(ValidationError(
            f"{slice_.slice_id} : {len(slice_.gene_names)} noms de gènes pour {n_genes} colonnes",
            code="ingestion_error",
        ))
    if len(set(slice_.gene_names)) != len(slice_.gene_names):
        errors.append(ValidationError(f"{slice_.slice_id} : noms de gènes dupliqués", code="ingestion_error"))
    if slice_.labels is not None and len(slice_.labels) != n_spots:
        errors.append(ValidationError(
            f"{slice_.slice_id} : {len(slice_.labels)} étiquettes pour {n_spots} spots",
            code="ingestion_error",
        ))
    if not slice_.preprocessed and n_spots and (slice_.expression < 0).any():
        errors.append(ValidationError(f"{slice_.slice_id} : comptages négatifs", code="ingestion_error"))
    return errors


@dataclass
class MultiSliceDataset:
    """
    Coupes partageant un vocabulaire de gènes ; les spots sont indexés globalement.
    """
    slices: List[Slice] = field(default_factory=list)

    def __post_init__(self):
        if not self.slices:
            raise ValidationError("Le jeu de données doit contenir au moins une coupe", code="parameter_error")
        reference = self.slices[0].gene_names
        for s in self.slices[1:]:
            if s.gene_names != reference:
                raise ValidationError(
                    f"{s.slice_id} : vocabulaire de gènes différent de {self.slices[0].slice_id}",
                    code="ingestion_error",
                )

    @property
    def n_slices(self):
        return len(self.slices)

    @property
    def n_spots(self):
        return sum(s.n_spots for s in self.slices)

    @property
    def n_genes(self):
        return self.slices[0].n_genes

    @property
    def gene_names(self):
        return list(self.slices[0].gene_names)

    @property
    def slice_ids(self):
        return [s.slice_id for s in self.slices]

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum([s.n_spots for s in self.slices])]).astype(int)

    @property
    def expression(self):
        return np.vstack([s.expression for s in self.slices])

    @property
    def coords(self):
        return np.vstack([s.coords for s in self.slices])

    @property
    def membership(self):
        return np.concatenate([np.full(s.n_spots, i, dtype=int) for i, s in enumerate(self.slices)])

    @property
    def labels(self):
        if any(s.labels is None for s in self.slices):
            return None
        return np.concatenate([s.labels for s in self.slices])

    @property
    def preprocessed(self):
        return all(s.preprocessed for s in self.slices)

    def global_index(self, slice_index, row):
        return int(self.offsets[slice_index] + row)


@dataclass
class SyntheticSpec:
    """
    Tissu en bandes horizontales sur une grille unité, comptages de Poisson.
    """
    spots: int = 900
    genes: int = 200
    domains: int = 3
    slices: int = 1
    batch_shift: float = 0.0
    seed: int = 0
    marker_fraction: float = 0.3
    marker_fold: float = 3.0
    base_rate: float = 2.0
    jitter: float = 0.2
    rates: Optional[np.ndarray] = None

    def validate(self):
        errors = []
        if self.domains < 2:
            errors.append(ValidationError(f"Au moins 2 domaines requis (reçu {self.domains})", code="parameter_error"))
        if self.batch_shift < 0:
            errors.append(ValidationError("batch_shift doit être positif ou nul", code="parameter_error"))
        if self.slices < 1:
            errors.append(ValidationError("Au moins une coupe requise", code="parameter_error"))
        if self.genes < 1:
            errors.append(ValidationError("Au moins un gène requis", code="parameter_error"))
        if self.spots < self.domains:
            errors.append(ValidationError("Moins de spots que de domaines", code="parameter_error"))
        if self.rates is not None and np.asarray(self.rates).shape != (self.domains, self.genes):
            errors.append(ValidationError("rates doit être de forme (domaines, gènes)", code="parameter_error"))
        if errors:
            raise ValidationError(errors)


# --------------------------------------------------------------------
# Lecture / écriture des répertoires de coupes
# --------------------------------------------------------------------

def _read_csv(path, **kwargs):
    try:
        return pd.read_csv(path, encoding="utf-8", **kwargs)
    except FileNotFoundError:
        raise ValidationError(f"Fichier introuvable : {path}", code="ingestion_error")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path} : {exc}", code="ingestion_error")


def _numeric_block(frame, path):
    """
    Convertit un tableau lu en flottants ; signale la première cellule invalide
    avec son numéro de ligne dans le fichier (en-tête = ligne 1).
    """
    values = frame.apply(pd.to_numeric, errors="coerce").to_numpy(dtype=np.float64)
    bad = np.argwhere(~np.isfinite(values))
    if len(bad):
        row, col = bad[0]
        raise ValidationError(
            f"{path}, ligne {row + 2} : valeur manquante ou non numérique (colonne {frame.columns[col]})",
            code="ingestion_error",
        )
    return values


def _read_gene_header(path):
    """
    En-tête brut de expression.csv ; pandas renomme les doublons (g, g.1), on les refuse avant.
    """
    header = [str(name) for name in _read_csv(path, header=None, nrows=1, dtype=str, keep_default_na=False).iloc[0]]
    duplicated = sorted({name for name in header if header.count(name) > 1})
    if duplicated:
        raise ValidationError(
            f"{path} : noms de gènes dupliqués dans l'en-tête : {', '.join(duplicated)}",
            code="ingestion_error",
        )
    return header


def load_slice(directory):
    """
    Lit une coupe depuis un répertoire (expression.csv ou expression.mtx + genes.txt,
    coords.csv, labels.csv optionnel).
    """
    directory = os.fspath(directory)
    if not os.path.isdir(directory):
        raise ValidationError(f"Répertoire introuvable : {directory}", code="ingestion_error")
    slice_id = os.path.basename(os.path.normpath(directory))

    csv_path = os.path.join(directory, EXPRESSION_CSV)
    mtx_path = os.path.join(directory, EXPRESSION_MTX)
    if os.path.exists(csv_path):
        gene_names = _read_gene_header(csv_path)
        frame = _read_csv(csv_path)
        expression = _numeric_block(frame, csv_path)
    elif os.path.exists(mtx_path):
        expression, gene_names = _read_mtx(mtx_path, os.path.join(directory, GENES_TXT))
    else:
        raise ValidationError(
            f"{directory} : ni {EXPRESSION_CSV} ni {EXPRESSION_MTX}",
            code="ingestion_error",
        )

    coords_path = os.path.join(directory, COORDS_CSV)
    coords_frame = _read_csv(coords_path)
    if list(coords_frame.columns) != ["x", "y"]:
        raise ValidationError(f"{coords_path} : en-tête attendu x,y", code="ingestion_error")
    coords = _numeric_block(coords_frame, coords_path)
    if coords.shape[0] != expression.shape[0]:
        raise ValidationError(
            f"{coords_path} : {coords.shape[0]} lignes pour {expression.shape[0]} spots d'expression",
            code="ingestion_error",
        )

    labels = None
    labels_path = os.path.join(directory, LABELS_CSV)
    if os.path.exists(labels_path):
        labels_frame = _read_csv(labels_path, dtype=str, keep_default_na=False)
        if "label" not in labels_frame.columns:
            raise ValidationError(f"{labels_path} : colonne label absente", code="ingestion_error")
        labels = labels_frame["label"].to_numpy(dtype=str)
        if len(labels) != expression.shape[0]:
            raise ValidationError(
                f"{labels_path} : {len(labels)} étiquettes pour {expression.shape[0]} spots",
                code="ingestion_error",
            )

    preprocessed = os.path.exists(os.path.join(directory, PREPROCESSING_MARKER))
    if not preprocessed:
        negative = np.argwhere(expression < 0)
        if len(negative):
            row, col = negative[0]
            raise ValidationError(
                f"{directory} : comptage négatif au spot {row}, gène {gene_names[col]}",
                code="ingestion_error",
            )
    logger.debug(f"[Data] {slice_id} : {expression.shape[0]} spots × {expression.shape[1]} gènes")
    return Slice(
        expression=expression,
        coords=coords,
        gene_names=gene_names,
        labels=labels,
        slice_id=slice_id,
        preprocessed=preprocessed,
    )


def _read_mtx(mtx_path, genes_path):
    try:
        matrix = scipy.io.mmread(mtx_path)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"{mtx_path} : {exc}", code="ingestion_error")
    if not os.path.exists(genes_path):
        raise ValidationError(f"Fichier introuvable : {genes_path}", code="ingestion_error")
    with open(genes_path, "r", encoding="utf-8") as handle:
        gene_names = [line.strip() for line in handle if line.strip()]
    expression = matrix.toarray() if sp.issparse(matrix) else np.asarray(matrix)
    expression = expression.astype(np.float64)
    if expression.shape[1] != len(gene_names):
        raise ValidationError(
            f"{genes_path} : {len(gene_names)} gènes pour {expression.shape[1]} colonnes",
            code="ingestion_error",
        )
    return expression, gene_names


def write_slice(slice_, directory, marker=None):
    """
    Écrit une coupe au format répertoire ; chaque fichier est écrit de façon atomique.
    Retourne la liste des chemins écrits.
    """
    os.makedirs(directory, exist_ok=True)
    written = []
    if slice_.preprocessed:
        expression = pd.DataFrame(slice_.expression, columns=slice_.gene_names)
    else:
        expression = pd.DataFrame(np.rint(slice_.expression).astype(np.int64), columns=slice_.gene_names)
    written.append(write_frame_csv(expression, os.path.join(directory, EXPRESSION_CSV)))
    coords = pd.DataFrame(slice_.coords, columns=["x", "y"])
    written.append(write_frame_csv(coords, os.path.join(directory, COORDS_CSV)))
    if slice_.labels is not None:
        labels = pd.DataFrame({"label": slice_.labels})
        written.append(write_frame_csv(labels, os.path.join(directory, LABELS_CSV)))
    if marker is not None:
        path = os.path.join(directory, PREPROCESSING_MARKER)
        atomic_write_text(path, json.dumps(marker, indent=2, sort_keys=True) + "\n")
        written.append(path)
    return written


def load_dataset(directories):
    slices = [load_slice(d) for d in directories]
    return concatenate_slices(slices)


# --------------------------------------------------------------------
# Prétraitement
# --------------------------------------------------------------------

def select_hvg(dataset, n=5000):
    """
    Garde les n gènes de plus forte variance de log1p(comptages) sur tous les spots.

    Substitut documenté de la sélection Seurat v3 ; ordre d'origine conservé,
    égalités départagées par l'indice.
    """
    n_genes = dataset.n_genes
    if n < 1 or n > n_genes:
        raise ValidationError(f"hvg_n={n} hors de [1, {n_genes}]", code="parameter_error")
    if n == n_genes:
        return dataset
    variance = np.log1p(dataset.expression).var(axis=0)
    ranking = np.argsort(-variance, kind="stable")
    keep = np.sort(ranking[:n])
    logger.info(f"[Data] {n}/{n_genes} gènes hautement variables retenus")
    return MultiSliceDataset([
        replace(s, expression=s.expression[:, keep], gene_names=[s.gene_names[i] for i in keep])
        for s in dataset.slices
    ])


def normalize_cpm_log1p(slice_, target_sum=10000.0):
    """
    Met chaque spot à la somme target_sum puis applique log(1 + x).
    """
    totals = slice_.expression.sum(axis=1)
    empty = np.flatnonzero(totals <= 0)
    if len(empty):
        raise ValidationError(
            f"{slice_.slice_id} : spot {int(empty[0])} sans comptage, normalisation impossible",
            code="degenerate_spot",
        )
    scaled = slice_.expression * (target_sum / totals)[:, None]
    return replace(slice_, expression=np.log1p(scaled), preprocessed=True)


def preprocess(dataset, hvg_n=5000, target_sum=10000.0):
    """
    Sélection des gènes variables puis normalisation CPM + log1p, coupe par coupe.
    """
    dataset = select_hvg(dataset, hvg_n)
    return MultiSliceDataset([normalize_cpm_log1p(s, target_sum) for s in dataset.slices])


def concatenate_slices(slices):
    """
    Concatène des coupes ; les gènes sont réduits à l'intersection, dans l'ordre de la coupe 0.
    """
    slices = list(slices)
    if not slices:
        raise ValidationError("Aucune coupe à concaténer", code="ingestion_error")
    shared = set(slices[0].gene_names)
    for s in slices[1:]:
        shared &= set(s.gene_names)
    genes = [g for g in slices[0].gene_names if g in shared]
    if not genes:
        raise ValidationError("Intersection vide des vocabulaires de gènes", code="ingestion_error")
    aligned = []
    for s in slices:
        if s.gene_names == genes:
            aligned.append(s)
            continue
        position = {g: i for i, g in enumerate(s.gene_names)}
        columns = [position[g] for g in genes]
        dropped = s.n_genes - len(genes)
        if dropped:
            logger.warning(f"[Data] {s.slice_id} : {dropped} gènes absents des autres coupes écartés")
        aligned.append(replace(s, expression=s.expression[:, columns], gene_names=list(genes)))
    ids = [s.slice_id for s in aligned]
    if len(set(ids)) != len(ids):
        aligned = [replace(s, slice_id=f"{s.slice_id}_{i}") for i, s in enumerate(aligned)]
    return MultiSliceDataset(aligned)


# --------------------------------------------------------------------
# Données synthétiques
# --------------------------------------------------------------------

def domain_rates(spec):
    """
    Taux moyens (domaines × gènes) : un fond commun plus un bloc de gènes marqueurs par domaine.
    """
    if spec.rates is not None:
        return np.asarray(spec.rates, dtype=np.float64)
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1]))
    base = spec.base_rate * rng.gamma(shape=2.0, scale=0.5, size=spec.genes) + 0.1
    rates = np.tile(base, (spec.domains, 1))
    n_markers = max(1, int(round(spec.marker_fraction * spec.genes / spec.domains)))
    markers = rng.permutation(spec.genes)
    for d in range(spec.domains):
        block = markers[(d * n_markers) % spec.genes:][:n_markers]
        rates[d, block] *= spec.marker_fold
    return rates


def _grid(spots):
    side = int(math.ceil(math.sqrt(spots)))
    n_rows = int(math.ceil(spots / side))
    rows, cols = np.divmod(np.arange(spots), side)
    return rows, cols, n_rows


def generate_synthetic(spec):
    """
    Jeu synthétique en bandes horizontales, étiquettes de vérité incluses.

    Coupe s ≠ 0 : facteur de lot exp(batch_shift · g_s[gène]), g_s ~ N(0, 1).
    """
    spec.validate()
    rates = domain_rates(spec)
    rows, cols, n_rows = _grid(spec.spots)
    domain = np.minimum((rows * spec.domains) // n_rows, spec.domains - 1)
    labels = np.array([f"domain_{d}" for d in domain])
    gene_names = [f"gene_{g:04d}" for g in range(spec.genes)]

    slices = []
    for s in range(spec.slices):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1000 + s]))
        factor = np.ones(spec.genes)
        if s > 0:
            factor = np.exp(spec.batch_shift * rng.standard_normal(spec.genes))
        jitter = rng.uniform(-spec.jitter / 2, spec.jitter / 2, size=(spec.spots, 2))
        coords = np.column_stack([cols, rows]).astype(np.float64) + jitter
        counts = rng.poisson(rates[domain] * factor[None, :]).astype(np.float64)
        slices.append(Slice(
            expression=counts,
            coords=coords,
            gene_names=gene_names,
            labels=labels.copy(),
            slice_id=f"slice_{s}",
        ))
    logger.info(
        f"[Data] synthèse : {spec.slices} coupe(s) × {spec.spots} spots, {spec.genes} gènes, "
        f"{spec.domains} domaines, batch_shift={spec.batch_shift}"
    )
    return MultiSliceDataset(slices)


# --------------------------------------------------------------------
# Fichiers tabulaires produits (plongements, étiquettes, appartenances)
# --------------------------------------------------------------------

def read_matrix_csv(path):
    """
    Lit un CSV numérique avec en-tête ; retourne (valeurs, noms de colonnes).
    """
    frame = _read_csv(path)
    return _numeric_block(frame, path), [str(c) for c in frame.columns]


def read_column_csv(path, column):
    frame = _read_csv(path, dtype=str, keep_default_na=False)
    if column not in frame.columns:
        raise ValidationError(f"{path} : colonne {column} absente", code="ingestion_error")
    return frame[column].to_numpy(dtype=str)
