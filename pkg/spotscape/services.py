import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

import torch
from django.core.exceptions import ValidationError

from .apps import DEFAULT_CFG, module_config
from .exceptions import NumericError
from .graph import augment, build_multi_slice_graph
from .losses import (
    LossParts,
    PrototypeSet,
    combined_multi_loss,
    combined_single_loss,
    compute_prototypes,
    prototypical_loss,
    reconstruction_loss,
    similarity_scaling_loss,
    similarity_telescope_loss,
    weights_from_config,
)
from .network import (
    decode,
    encode,
    infer_embeddings,
    init_params,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from .numeric import SeededRng, adam_step, as_tensor, gradients_of, is_finite
from .validations import RunConfigValidation, TrainConfigValidation

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

logger = logging.getLogger(__name__)

LOG_EVERY = 100

# Clés sans effet sur les paramètres appris : exclues de l'empreinte de configuration
RUNTIME_KEYS = (
    "inputs", "out", "write_imputed", "threads", "checkpoint_every",
    "kmeans_restarts", "lr_grid", "lr_search_criterion",
)


# --------------------------------------------------------------------
# Configuration
# --------------------------------------------------------------------

def load_run_config(path):
    """
    Lit un fichier de configuration TOML à plat ; toute clé inconnue est refusée.
    """
    try:
        with open(path, "rb") as handle:
            data = tomllib.load(handle)
    except FileNotFoundError:
        raise ValidationError(f"Fichier de configuration introuvable : {path}", code="ingestion_error")
    except tomllib.TOMLDecodeError as exc:
        raise ValidationError(f"{path} : TOML invalide ({exc})", code="ingestion_error")
    RunConfigValidation.validate(data, source=str(path))
    return data


@dataclass
class TrainConfig:
    mode: str = DEFAULT_CFG["mode"]
    epochs: int = DEFAULT_CFG["epochs"]
    learning_rate: float = DEFAULT_CFG["learning_rate"]
    weight_decay: float = DEFAULT_CFG["weight_decay"]
    seed: int = DEFAULT_CFG["seed"]
    threads: int = DEFAULT_CFG["threads"]
    checkpoint_every: int = DEFAULT_CFG["checkpoint_every"]
    hvg_n: int = DEFAULT_CFG["hvg_n"]
    target_sum: float = DEFAULT_CFG["target_sum"]
    snn_k: int = DEFAULT_CFG["snn_k"]
    feature_mask_rate_1: float = DEFAULT_CFG["feature_mask_rate_1"]
    feature_mask_rate_2: float = DEFAULT_CFG["feature_mask_rate_2"]
    edge_mask_rate_1: float = DEFAULT_CFG["edge_mask_rate_1"]
    edge_mask_rate_2: float = DEFAULT_CFG["edge_mask_rate_2"]
    mask_mode: str = DEFAULT_CFG["mask_mode"]
    encoder_dims: List[int] = field(default_factory=lambda: list(DEFAULT_CFG["encoder_dims"]))
    decoder_hidden: int = DEFAULT_CFG["decoder_hidden"]
    final_activation: str = DEFAULT_CFG["final_activation"]
    lambda_sc: float = DEFAULT_CFG["lambda_sc"]
    lambda_recon: float = DEFAULT_CFG["lambda_recon"]
    lambda_pcl: float = DEFAULT_CFG["lambda_pcl"]
    lambda_ss: float = DEFAULT_CFG["lambda_ss"]
    tau: float = DEFAULT_CFG["tau"]
    top_k: int = DEFAULT_CFG["top_k"]
    warmup_epochs: int = DEFAULT_CFG["warmup_epochs"]
    pcl_granularities: List[float] = field(default_factory=lambda: list(DEFAULT_CFG["pcl_granularities"]))
    pcl_refresh_every: int = DEFAULT_CFG["pcl_refresh_every"]
    ss_include_self: bool = DEFAULT_CFG["ss_include_self"]
    single_pcl: bool = DEFAULT_CFG["single_pcl"]
    n_clusters: int = DEFAULT_CFG["n_clusters"]
    kmeans_restarts: int = DEFAULT_CFG["kmeans_restarts"]
    lr_grid: List[float] = field(default_factory=lambda: list(DEFAULT_CFG["lr_grid"]))
    lr_search_criterion: str = DEFAULT_CFG["lr_search_criterion"]
    inputs: List[str] = field(default_factory=list)
    out: str = DEFAULT_CFG["out"]
    write_imputed: bool = DEFAULT_CFG["write_imputed"]

    @classmethod
    def from_mapping(cls, data=None, **overrides):
        """
        Défauts du module < document de configuration < surcharges explicites (drapeaux).
        """
        data = dict(data or {})
        RunConfigValidation.validate(data)
        values = {**module_config(), **data}
        values.update({k: v for k, v in overrides.items() if v is not None})
        values = {k: list(v) if isinstance(v, (list, tuple)) else v for k, v in values.items()}
        return cls(**values)

    def to_dict(self):
        return asdict(self)

    def replace(self, **changes):
        return TrainConfig.from_mapping({**self.to_dict(), **changes})

    def config_hash(self):
        payload = {k: v for k, v in self.to_dict().items() if k not in RUNTIME_KEYS}
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    @property
    def uses_pcl(self):
        return self.mode == "multi" or self.single_pcl


# --------------------------------------------------------------------
# Rapport d'entraînement
# --------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    sc: float
    recon: float
    pcl: float
    ss: float
    total: float


@dataclass
class TrainingReport:
    """
    Une ligne par epoch (composantes non pondérées + total pondéré), poids et configuration.
    La durée n'est pas sérialisée : report.json reste identique d'une exécution à l'autre.
    """
    mode: str
    seed: int
    config: dict
    config_hash: str
    weights: dict
    epochs: List[EpochRecord] = field(default_factory=list)
    lr_search: Optional[dict] = None
    final_metrics: Optional[dict] = None
    wall_time: float = 0.0

    def to_dict(self):
        document = asdict(self)
        document.pop("wall_time")
        return document

    @classmethod
    def from_dict(cls, document):
        document = dict(document)
        records = [EpochRecord(**r) for r in document.pop("epochs", [])]
        known = {f.name for f in fields(cls)}
        return cls(epochs=records, **{k: v for k, v in document.items() if k in known})

    @property
    def final_loss(self):
        return self.epochs[-1].total if self.epochs else None


# --------------------------------------------------------------------
# Entraînement
# --------------------------------------------------------------------

class TrainingService:
    """
    Entraînement plein lot, un pas d'Adam par epoch.

    Les tirages de chaque epoch viennent de flux nommés (augment-1/<epoch>,
    augment-2/<epoch>, prototypes/<epoch>) : une reprise depuis un point de
    sauvegarde rejoue exactement les mêmes tirages qu'une exécution continue.
    """

    def __init__(self, config, validation_class=TrainConfigValidation, checkpoint_path=None):
        self.config = config
        self.validation_class = validation_class
        self.checkpoint_path = checkpoint_path
        self.weights = weights_from_config(config)

    # ------------------------------------------------------------
    # Points d'entrée
    # ------------------------------------------------------------

    def train(self, dataset, graph=None):
        if self.config.mode == "multi":
            return self.train_multi(dataset, graph)
        return self.train_single(dataset, graph)

    def train_single(self, dataset, graph=None):
        if self.config.mode != "single":
            self.config = self.config.replace(mode="single")
        return self._fresh_run(dataset, graph)

    def train_multi(self, dataset, graph=None):
        if self.config.mode != "multi":
            self.config = self.config.replace(mode="multi")
        return self._fresh_run(dataset, graph)

    def resume(self, checkpoint_path, dataset, graph=None, epochs=None):
        """
        Reprend à l'epoch enregistrée ; `epochs` permet de prolonger le total prévu.
        """
        document = load_checkpoint(checkpoint_path)
        if list(document["gene_names"]) != list(dataset.gene_names):
            raise ValidationError(
                f"{checkpoint_path} : gènes du point de reprise différents des entrées",
                code="stale_checkpoint",
            )
        config = TrainConfig.from_mapping(document["config"])
        if epochs is not None:
            config = config.replace(epochs=epochs)
        self.config = config
        self.weights = weights_from_config(config)
        self.validation_class.validate(config, dataset)
        graph = graph or build_multi_slice_graph(dataset, config.snn_k)
        model, optimizer = restore_model(document)
        report = TrainingReport.from_dict(document["report"])
        report.config = config.to_dict()
        report.config_hash = config.config_hash()
        prototypes = PrototypeSet.from_state(document["prototypes"])
        logger.info(f"[Train] reprise à l'epoch {document['epoch']} / {config.epochs}")
        return self._run(dataset, graph, model, optimizer, report, document["epoch"], prototypes)

    # ------------------------------------------------------------
    # Boucle
    # ------------------------------------------------------------

    def _fresh_run(self, dataset, graph):
        config = self.config
        self.validation_class.validate(config, dataset)
        if not dataset.preprocessed:
            logger.warning("[Train] entrées non prétraitées : les comptages bruts sont utilisés tels quels")
        graph = graph or build_multi_slice_graph(dataset, config.snn_k)
        model, optimizer = init_params(
            dataset.n_genes,
            config.seed,
            encoder_dims=config.encoder_dims,
            decoder_hidden=config.decoder_hidden,
            final_activation=config.final_activation,
            learning_rate=config.learning_rate,
            weight_decay=config.weight_decay,
        )
        report = TrainingReport(
            mode=config.mode,
            seed=config.seed,
            config=config.to_dict(),
            config_hash=config.config_hash(),
            weights=asdict(self.weights),
        )
        return self._run(dataset, graph, model, optimizer, report, 0, None)

    def _run(self, dataset, graph, model, optimizer, report, start_epoch, prototypes):
        config = self.config
        features = as_tensor(dataset.expression)
        started = time.perf_counter()
        logger.info(
            f"[Train] mode {config.mode} : {dataset.n_spots} spots, {dataset.n_genes} gènes, "
            f"{dataset.n_slices} coupe(s), epochs {start_epoch} → {config.epochs}, lr={config.learning_rate}"
        )
        for epoch in range(start_epoch, config.epochs):
            parts, total, prototypes = self._epoch(epoch, model, optimizer, features, graph, prototypes)
            values = parts.as_floats()
            total_value = float(total.detach())
            report.epochs.append(EpochRecord(epoch=epoch, total=total_value, **values))
            message = (
                f"[Train] epoch {epoch} : total={total_value:.6f} sc={values['sc']:.6f} "
                f"recon={values['recon']:.6f} pcl={values['pcl']:.6f} ss={values['ss']:.6f}"
            )
            if (epoch + 1) % LOG_EVERY == 0:
                logger.info(message)
            else:
                logger.debug(message)
            last = epoch + 1 == config.epochs
            if self.checkpoint_path and ((epoch + 1) % config.checkpoint_every == 0 or last):
                self.save(model, optimizer, epoch + 1, dataset.gene_names, prototypes, report)
        report.wall_time = time.perf_counter() - started
        logger.info(f"[Train] terminé en {report.wall_time:.1f} s, perte finale {report.final_loss}")
        return model, report

    def _epoch(self, epoch, model, optimizer, features, graph, prototypes):
        config = self.config
        multi = config.mode == "multi"
        view1 = augment(
            graph, features, config.feature_mask_rate_1, config.edge_mask_rate_1,
            rng=SeededRng(config.seed, f"augment-1/{epoch}"), mask_mode=config.mask_mode,
        )
        view2 = augment(
            graph, features, config.feature_mask_rate_2, config.edge_mask_rate_2,
            rng=SeededRng(config.seed, f"augment-2/{epoch}"), mask_mode=config.mask_mode,
        )
        z1 = encode(model, view1.features, view1.operator(), mode="train")
        z2 = encode(model, view2.features, view2.operator(), mode="train")
        x1 = decode(model, z1, mode="train")
        x2 = decode(model, z2, mode="train")

        sc, h = similarity_telescope_loss(z1, z2)
        parts = LossParts(sc=sc, recon=reconstruction_loss(features, x1, x2))
        if multi:
            parts.ss = similarity_scaling_loss(h, graph.membership, config.top_k, config.ss_include_self)
        pcl_active = config.uses_pcl and epoch >= config.warmup_epochs
        if pcl_active:
            due = (epoch - config.warmup_epochs) % config.pcl_refresh_every == 0
            if prototypes is None or due:
                prototypes = compute_prototypes(
                    z2, config.n_clusters, config.pcl_granularities,
                    rng=SeededRng(config.seed, f"prototypes/{epoch}"),
                )
            parts.pcl = prototypical_loss(z1, prototypes, config.tau)

        if config.uses_pcl:
            total = combined_multi_loss(parts, self.weights, epoch)
        else:
            total = combined_single_loss(parts, self.weights)
        if not is_finite(total.detach()):
            raise NumericError(f"Perte non finie ({float(total.detach())})", epoch=epoch)

        if self._has_active_weight(multi, pcl_active):
            params = list(model.parameters())
            for param, grad in zip(params, gradients_of(total, params)):
                param.grad = grad
            adam_step(optimizer, epoch=epoch)
        return parts, total, prototypes

    def _has_active_weight(self, multi, pcl_active):
        w = self.weights
        active = [w.lambda_sc, w.lambda_recon]
        if multi:
            active.append(w.lambda_ss)
        if pcl_active:
            active.append(w.lambda_pcl)
        return any(value > 0 for value in active)

    def save(self, model, optimizer, next_epoch, gene_names, prototypes, report):
        return save_checkpoint(
            self.checkpoint_path,
            model,
            optimizer,
            next_epoch,
            config=self.config.to_dict(),
            config_hash=self.config.config_hash(),
            gene_names=gene_names,
            prototypes=prototypes,
            report=report.to_dict(),
        )


# --------------------------------------------------------------------
# Produits d'inférence
# --------------------------------------------------------------------

def embed(model, dataset, graph):
    return infer_embeddings(model, dataset, graph)


def impute_expression(model, dataset, graph):
    """
    Reconstruction en mode eval sur le graphe d'origine : la matrice imputée (N_s × N_g).
    """
    with torch.no_grad():
        return decode(model, infer_embeddings(model, dataset, graph), mode="eval")
