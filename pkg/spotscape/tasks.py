import logging
import os

import numpy as np
import pandas as pd
from django.core.exceptions import ValidationError

from .bundle import OutputBundle, write_frame_csv, write_json
from .data import (
    generate_synthetic,
    load_dataset,
    preprocess,
    read_column_csv,
    read_matrix_csv,
    write_slice,
)
from .graph import build_multi_slice_graph
from .metrics_services import (
    anchor_similarity,
    compute_metrics_report,
    label_transfer_ari,
    lr_search,
    transfer_labels,
)
from .network import load_checkpoint, restore_model
from .numeric import configure_threads
from .services import TrainConfig, TrainingService, embed, impute_expression
from .validations import InputPathsValidation

logger = logging.getLogger(__name__)

EMBEDDINGS_CSV = "embeddings.csv"
SPOTS_CSV = "spots.csv"
CLUSTERS_CSV = "clusters.csv"
METRICS_JSON = "metrics.json"
REPORT_JSON = "report.json"
CHECKPOINT_PT = "checkpoint.pt"
IMPUTED_CSV = "imputed.csv"
ALIGNMENT_JSON = "alignment.json"
TRANSFERRED_CSV = "transferred.csv"
ANCHOR_CSV = "anchor_similarity.csv"


# --------------------------------------------------------------------
# Utilitaires
# --------------------------------------------------------------------

def _numpy(values):
    if hasattr(values, "detach"):
        values = values.detach().cpu().numpy()
    return np.asarray(values, dtype=np.float64)


def embeddings_frame(embeddings):
    values = _numpy(embeddings)
    return pd.DataFrame(values, columns=[f"dim_{d}" for d in range(values.shape[1])])


def spots_frame(dataset):
    frame = pd.DataFrame({
        "spot": np.arange(dataset.n_spots),
        "slice": np.repeat(dataset.slice_ids, [s.n_spots for s in dataset.slices]),
    })
    if dataset.labels is not None:
        frame["label"] = dataset.labels
    return frame


def prepare_dataset(inputs, hvg_n, target_sum):
    """
    Charge les coupes ; les entrées brutes sont prétraitées (hvg_n ramené à N_g si besoin).
    """
    if not inputs:
        raise ValidationError("Aucun répertoire d'entrée fourni", code="parameter_error")
    InputPathsValidation.validate(directories=inputs)
    dataset = load_dataset(inputs)
    if dataset.preprocessed:
        return dataset
    if hvg_n > dataset.n_genes:
        logger.info(f"[Job] hvg_n={hvg_n} ramené à {dataset.n_genes} gènes disponibles")
        hvg_n = dataset.n_genes
    return preprocess(dataset, hvg_n, target_sum)


def _check_output_dir(out):
    if not out:
        raise ValidationError("Répertoire de sortie manquant (--out)", code="parameter_error")
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"Répertoire de sortie inutilisable : {out} ({exc})", code="ingestion_error")
    if not os.access(out, os.W_OK):
        raise ValidationError(f"Répertoire de sortie non inscriptible : {out}", code="ingestion_error")
    return OutputBundle(out)


# --------------------------------------------------------------------
# Travaux
# --------------------------------------------------------------------

def run_synth_job(spec, out):
    """
    Écrit une coupe synthétique par sous-répertoire slice_<s>.
    """
    bundle = _check_output_dir(out)
    dataset = generate_synthetic(spec)
    for s in dataset.slices:
        bundle.extend(write_slice(s, bundle.path(s.slice_id)))
    bundle.add(bundle.write_manifest())
    logger.info(f"[Job] synthèse écrite dans {out} ({dataset.n_slices} coupe(s))")
    return dataset, bundle


def run_preprocess_job(inputs, out, hvg_n=5000, target_sum=10000.0):
    bundle = _check_output_dir(out)
    dataset = prepare_dataset(inputs, hvg_n, target_sum)
    marker = {"hvg_n": dataset.n_genes, "target_sum": float(target_sum)}
    for s in dataset.slices:
        bundle.extend(write_slice(s, bundle.path(s.slice_id), marker=marker))
    bundle.add(bundle.write_manifest())
    logger.info(f"[Job] {dataset.n_slices} coupe(s) prétraitée(s) écrites dans {out}")
    return dataset, bundle


def run_training_job(config, search_lr=False):
    """
    Entraîne puis écrit le lot de sortie : plongements, spots, clusters, rapport,
    point de reprise, métriques (si étiquettes) et imputation (si demandée).
    """
    configure_threads(config.threads)
    bundle = _check_output_dir(config.out)
    dataset = prepare_dataset(config.inputs, config.hvg_n, config.target_sum)
    graph = build_multi_slice_graph(dataset, config.snn_k)
    checkpoint_path = bundle.path(CHECKPOINT_PT)

    if search_lr:
        result = lr_search(dataset, graph, config, checkpoint_path=checkpoint_path)
        model, report = result.model, result.report
        logger.info(f"[Job] taux retenu par {result.criterion} : {result.best_lr}")
    else:
        model, report = TrainingService(config, checkpoint_path=checkpoint_path).train(dataset, graph)
    bundle.add(checkpoint_path)

    embeddings = embed(model, dataset, graph)
    bundle.add(write_frame_csv(embeddings_frame(embeddings), bundle.path(EMBEDDINGS_CSV)))
    bundle.add(write_frame_csv(spots_frame(dataset), bundle.path(SPOTS_CSV)))

    membership = dataset.membership if dataset.n_slices > 1 else None
    metrics = compute_metrics_report(
        embeddings,
        k=config.n_clusters,
        seeds=[config.seed],
        labels=dataset.labels,
        membership=membership,
        restarts=config.kmeans_restarts,
    )
    clusters = pd.DataFrame({"spot": np.arange(dataset.n_spots), "cluster": metrics.partition})
    bundle.add(write_frame_csv(clusters, bundle.path(CLUSTERS_CSV)))
    if dataset.labels is not None:
        report.final_metrics = metrics.to_json()
        bundle.add(write_json(metrics.to_json(), bundle.path(METRICS_JSON)))

    if config.write_imputed:
        imputed = pd.DataFrame(_numpy(impute_expression(model, dataset, graph)), columns=dataset.gene_names)
        bundle.add(write_frame_csv(imputed, bundle.path(IMPUTED_CSV)))

    bundle.add(write_json(report.to_dict(), bundle.path(REPORT_JSON)))
    bundle.add(bundle.write_manifest())
    return model, report, bundle


def run_evaluate_job(embeddings_path, out, k, seed=0, repeats=1, labels_path=None,
                     slices_path=None, anchor=None, restarts=10):
    InputPathsValidation.validate(files=[embeddings_path, labels_path, slices_path])
    bundle = _check_output_dir(out)
    embeddings, _ = read_matrix_csv(embeddings_path)
    labels = read_column_csv(labels_path, "label") if labels_path else None
    membership = read_column_csv(slices_path, "slice") if slices_path else None
    for name, column in (("labels", labels), ("slices", membership)):
        if column is not None and len(column) != embeddings.shape[0]:
            raise ValidationError(
                f"{name} : {len(column)} lignes pour {embeddings.shape[0]} plongements",
                code="shape_mismatch",
            )
    if repeats < 1:
        raise ValidationError("repeats doit être ≥ 1", code="parameter_error")

    metrics = compute_metrics_report(
        embeddings,
        k=k,
        seeds=range(seed, seed + repeats),
        labels=labels,
        membership=membership,
        restarts=restarts,
    )
    bundle.add(write_json(metrics.to_json(), bundle.path(METRICS_JSON)))
    if anchor is not None:
        similarity = pd.DataFrame({
            "spot": np.arange(embeddings.shape[0]),
            "similarity": anchor_similarity(embeddings, anchor),
        })
        bundle.add(write_frame_csv(similarity, bundle.path(ANCHOR_CSV)))
    bundle.add(bundle.write_manifest())
    return metrics, bundle


def run_align_job(reference_path, reference_labels_path, query_path, out, query_labels_path=None):
    InputPathsValidation.validate(files=[reference_path, reference_labels_path, query_path, query_labels_path])
    bundle = _check_output_dir(out)
    reference, _ = read_matrix_csv(reference_path)
    query, _ = read_matrix_csv(query_path)
    reference_labels = read_column_csv(reference_labels_path, "label")
    nearest, transferred = transfer_labels(reference, reference_labels, query)

    ltari = None
    if query_labels_path:
        truth = read_column_csv(query_labels_path, "label")
        if len(truth) != query.shape[0]:
            raise ValidationError(
                f"{query_labels_path} : {len(truth)} étiquettes pour {query.shape[0]} spots requête",
                code="shape_mismatch",
            )
        ltari = label_transfer_ari(reference, reference_labels, query, truth)

    frame = pd.DataFrame({
        "spot": np.arange(query.shape[0]),
        "reference_spot": nearest,
        "label": transferred,
    })
    bundle.add(write_frame_csv(frame, bundle.path(TRANSFERRED_CSV)))
    document = {"ltari": ltari, "n_reference": int(reference.shape[0]), "n_query": int(query.shape[0])}
    bundle.add(write_json(document, bundle.path(ALIGNMENT_JSON)))
    bundle.add(bundle.write_manifest())
    logger.info(f"[Job] alignement de {query.shape[0]} spots, ltari={ltari}")
    return document, bundle


def _check_config_hash(checkpoint_path, document, config, lr_searched):
    if lr_searched:
        # le taux retenu par la recherche remplace celui du document
        searched = document["config"]["learning_rate"]
        if searched not in config.lr_grid:
            raise ValidationError(
                f"{checkpoint_path} : taux {searched} absent de lr_grid, point de reprise périmé",
                code="stale_checkpoint",
            )
        config = config.replace(learning_rate=searched)
    if config.config_hash() != document["config_hash"]:
        raise ValidationError(
            f"{checkpoint_path} : empreinte de configuration différente, point de reprise périmé",
            code="stale_checkpoint",
        )


def run_impute_job(checkpoint_path, inputs, out, config=None, lr_searched=False):
    """
    Imputation depuis un point de reprise. Refuse un point de reprise dont l'empreinte
    de configuration ou les gènes ne correspondent pas aux entrées.

    lr_searched : le point de reprise vient de train --lr-search ; son taux doit appartenir
    à lr_grid et remplace learning_rate avant la comparaison des empreintes.
    """
    InputPathsValidation.validate(directories=inputs, files=[checkpoint_path])
    bundle = _check_output_dir(out)
    document = load_checkpoint(checkpoint_path)
    if config is not None:
        _check_config_hash(checkpoint_path, document, config, lr_searched)
    trained = TrainConfig.from_mapping(document["config"])
    configure_threads(config.threads if config is not None else trained.threads)
    dataset = prepare_dataset(inputs, trained.hvg_n, trained.target_sum)
    if dataset.gene_names != list(document["gene_names"]):
        raise ValidationError(
            f"{checkpoint_path} : gènes du point de reprise différents des entrées",
            code="stale_checkpoint",
        )
    graph = build_multi_slice_graph(dataset, trained.snn_k)
    model, _ = restore_model(document)
    imputed = pd.DataFrame(_numpy(impute_expression(model, dataset, graph)), columns=dataset.gene_names)
    bundle.add(write_frame_csv(imputed, bundle.path(IMPUTED_CSV)))
    bundle.add(bundle.write_manifest())
    return imputed, bundle
