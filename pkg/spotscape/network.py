"""
Encodeur siamois f_θ (GCN à 2 couches) et décodeur g_θ (MLP à 2 couches).
"""
import logging
import math
import os
import tempfile

import torch
from django.core.exceptions import ValidationError
from torch import nn

from .exceptions import ShapeError
from .numeric import DTYPE, RunningStats, SeededRng, as_tensor, batch_norm_column, make_optimizer, matmul

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "spotscape-checkpoint"
CHECKPOINT_VERSION = 1
FINAL_ACTIVATIONS = ("relu", "none")


def glorot_uniform_(weight, generator):
    fan_in, fan_out = weight.shape
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    with torch.no_grad():
        weight.uniform_(-bound, bound, generator=generator)
    return weight


class ColumnBatchNorm(nn.BatchNorm1d):
    """
    BatchNorm1d qui refuse le mode eval tant qu'aucun lot n'a été vu.
    """

    def __init__(self, num_features):
        super().__init__(num_features, eps=1e-5, momentum=0.1, dtype=DTYPE)

    def forward(self, x):
        running = RunningStats(self.running_mean, self.running_var, self.num_batches_tracked)
        mode = "train" if self.training else "eval"
        return batch_norm_column(x, self.weight, self.bias, running, mode=mode,
                                 momentum=self.momentum, eps=self.eps)


class GraphConvolution(nn.Module):
    """
    Â · H · W + b
    """

    def __init__(self, in_features, out_features):
        super().__init__()
        # stockage (entrée, sortie) pour que les bornes de Glorot lisent (fan_in, fan_out)
        self.weight = nn.Parameter(torch.empty(in_features, out_features, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=DTYPE))

    def forward(self, features, operator):
        return matmul(operator, features @ self.weight) + self.bias


class Dense(nn.Module):
    def __init__(self, in_features, out_features):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(in_features, out_features, dtype=DTYPE))
        self.bias = nn.Parameter(torch.zeros(out_features, dtype=DTYPE))

    def forward(self, x):
        return x @ self.weight + self.bias


class SpotEncoder(nn.Module):
    """
    Deux couches GCN, chacune suivie de batch-norm puis ReLU
    (ReLU finale optionnelle via final_activation).
    """

    def __init__(self, n_genes, dims=(256, 64), final_activation="relu"):
        super().__init__()
        if final_activation not in FINAL_ACTIVATIONS:
            raise ValueError(f"final_activation inconnue : {final_activation}")
        sizes = [n_genes, *dims]
        self.n_genes = n_genes
        self.final_activation = final_activation
        self.layers = nn.ModuleList(GraphConvolution(a, b) for a, b in zip(sizes[:-1], sizes[1:]))
        self.norms = nn.ModuleList(ColumnBatchNorm(b) for b in sizes[1:])

    @property
    def out_dim(self):
        return self.layers[-1].weight.shape[1]

    def forward(self, features, operator):
        if features.shape[1] != self.n_genes:
            raise ShapeError(f"Encodeur : {features.shape[1]} colonnes pour {self.n_genes} gènes attendus")
        h = features
        last = len(self.layers) - 1
        for i, (layer, norm) in enumerate(zip(self.layers, self.norms)):
            h = norm(layer(h, operator))
            if i < last or self.final_activation == "relu":
                h = torch.relu(h)
        return h


class SpotDecoder(nn.Module):
    """
    Linéaire → batch-norm → ReLU → linéaire ; tête finale sans activation.
    """

    def __init__(self, n_genes, latent_dim=64, hidden=256):
        super().__init__()
        self.latent_dim = latent_dim
        self.hidden = Dense(latent_dim, hidden)
        self.norm = ColumnBatchNorm(hidden)
        self.output = Dense(hidden, n_genes)

    def forward(self, embeddings):
        if embeddings.shape[1] != self.latent_dim:
            raise ShapeError(f"Décodeur : {embeddings.shape[1]} colonnes pour {self.latent_dim} attendues")
        return self.output(torch.relu(self.norm(self.hidden(embeddings))))


class SpotscapeModel(nn.Module):
    def __init__(self, n_genes, encoder_dims=(256, 64), decoder_hidden=256, final_activation="relu"):
        super().__init__()
        self.encoder = SpotEncoder(n_genes, encoder_dims, final_activation)
        self.decoder = SpotDecoder(n_genes, self.encoder.out_dim, decoder_hidden)

    def dense_layers(self):
        return [*self.encoder.layers, self.decoder.hidden, self.decoder.output]


def init_params(n_genes, seed, encoder_dims=(256, 64), decoder_hidden=256, final_activation="relu",
                learning_rate=1e-4, weight_decay=1e-4):
    """
    Poids Glorot-uniformes, biais nuls, batch-norm (1, 0) ; déterministe par graine.
    Retourne le modèle (encodeur + décodeur) et l'état de l'optimiseur Adam.
    """
    if n_genes < 1:
        raise ValueError("n_genes doit être ≥ 1")
    model = SpotscapeModel(n_genes, tuple(encoder_dims), decoder_hidden, final_activation)
    generator = SeededRng(seed, "init").torch
    for layer in model.dense_layers():
        glorot_uniform_(layer.weight, generator)
    optimizer = make_optimizer(model.parameters(), learning_rate, weight_decay)
    return model, optimizer


def _set_mode(model, mode):
    if mode not in ("train", "eval"):
        raise ValueError(f"Mode inconnu : {mode}")
    model.train(mode == "train")


def encode(model, features, operator, mode="train"):
    _set_mode(model, mode)
    return model.encoder(as_tensor(features), operator)


def decode(model, embeddings, mode="train"):
    _set_mode(model, mode)
    return model.decoder(as_tensor(embeddings))


def infer_embeddings(model, dataset, graph):
    """
    Encodage en mode eval sur le graphe et les variables d'origine (sans augmentation).
    """
    with torch.no_grad():
        return encode(model, dataset.expression, graph.operator(), mode="eval")


# --------------------------------------------------------------------
# Points de reprise
# --------------------------------------------------------------------

def save_checkpoint(path, model, optimizer, epoch, config, config_hash, gene_names,
                    prototypes=None, report=None):
    """
    Écrit un point de reprise versionné (écriture atomique).
    """
    document = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "epoch": int(epoch),
        "config": config,
        "config_hash": config_hash,
        "gene_names": list(gene_names),
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict(),
        "prototypes": prototypes.to_state() if prototypes is not None else None,
        "report": report,
    }
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".pt")
    os.close(fd)
    try:
        torch.save(document, tmp_path)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    logger.debug(f"[Train] point de reprise écrit : {path} (epoch {epoch})")
    return path


def load_checkpoint(path):
    try:
        document = torch.load(os.fspath(path), map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise ValidationError(f"Point de reprise introuvable : {path}", code="ingestion_error")
    if not isinstance(document, dict) or document.get("format") != CHECKPOINT_FORMAT:
        raise ValidationError(f"{path} n'est pas un point de reprise Spotscape", code="ingestion_error")
    if document.get("version") != CHECKPOINT_VERSION:
        raise ValidationError(
            f"{path} : version {document.get('version')} non prise en charge",
            code="ingestion_error",
        )
    return document


def restore_model(document):
    """
    Reconstruit modèle et optimiseur depuis un point de reprise chargé.
    """
    config = document["config"]
    model, optimizer = init_params(
        len(document["gene_names"]),
        config["seed"],
        encoder_dims=config["encoder_dims"],
        decoder_hidden=config["decoder_hidden"],
        final_activation=config["final_activation"],
        learning_rate=config["learning_rate"],
        weight_decay=config["weight_decay"],
    )
    model.load_state_dict(document["model"])
    optimizer.load_state_dict(document["optimizer"])
    return model, optimizer
