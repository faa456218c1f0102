import json
import os
import shutil
import tempfile
from io import StringIO
from unittest import mock

import numpy as np
import pandas as pd
import torch
from django.core.management import call_command
from django.core.management.base import CommandError
from django.test import SimpleTestCase

from spotscape.bundle import write_frame_csv
from spotscape.data import load_dataset
from spotscape.graph import build_multi_slice_graph
from spotscape.network import load_checkpoint, restore_model
from spotscape.numeric import DTYPE
from spotscape.services import impute_expression
from spotscape.tests.helpers import SLICE_A, SLICE_B, SMALL_CONFIG, fixture_dataset

TRAIN_OUTPUTS = {
    "checkpoint.pt", "embeddings.csv", "spots.csv", "clusters.csv",
    "metrics.json", "report.json", "manifest.json",
}


def _read(path):
    with open(path, "rb") as handle:
        return handle.read()


def _load_json(path):
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)


class CommandTestCase(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.addCleanup(shutil.rmtree, self.tmp, ignore_errors=True)

    def path(self, *parts):
        return os.path.join(self.tmp, *parts)

    def call(self, name, *args, **options):
        return call_command(name, *args, stdout=StringIO(), **options)

    def assertExitCode(self, code, name, *args, **options):
        with self.assertRaises(CommandError) as ctx:
            self.call(name, *args, **options)
        self.assertEqual(ctx.exception.returncode, code)
        return ctx.exception

    def write_config(self, extra):
        path = self.path("run.toml")
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(_read(SMALL_CONFIG).decode("utf-8") + extra)
        return path


class SynthCommandTest(CommandTestCase):

    def test_writes_one_directory_per_slice(self):
        self.call("synth", out=self.path("a"), spots=60, genes=12, domains=3, slices=2, batch_shift=0.5, seed=7)
        dataset = load_dataset([self.path("a", "slice_0"), self.path("a", "slice_1")])
        self.assertEqual(dataset.n_spots, 120)
        self.assertEqual(sorted(set(dataset.labels)), ["domain_0", "domain_1", "domain_2"])
        self.assertTrue(os.path.exists(self.path("a", "manifest.json")))

    def test_same_seed_same_bytes(self):
        for name in ("a", "b"):
            self.call("synth", out=self.path(name), spots=40, genes=8, seed=3)
        self.assertEqual(
            _read(self.path("a", "slice_0", "expression.csv")),
            _read(self.path("b", "slice_0", "expression.csv")),
        )

    def test_single_domain_is_a_usage_error(self):
        self.assertExitCode(1, "synth", out=self.path("a"), domains=1)

    def test_out_is_required(self):
        self.assertExitCode(1, "synth")


class PreprocessCommandTest(CommandTestCase):

    def test_marker_and_gene_selection(self):
        self.call("preprocess", inputs=[SLICE_A, SLICE_B], out=self.path("pre"), hvg_n=4)
        marker = _load_json(self.path("pre", "slice_a", "preprocessing.json"))
        self.assertEqual(marker["hvg_n"], 4)
        dataset = load_dataset([self.path("pre", "slice_a"), self.path("pre", "slice_b")])
        self.assertTrue(dataset.preprocessed)
        self.assertEqual(dataset.n_genes, 4)

    def test_missing_input_directory(self):
        self.assertExitCode(1, "preprocess", inputs=[self.path("absent")], out=self.path("pre"))


class TrainCommandTest(CommandTestCase):

    def test_single_slice_outputs(self):
        out = self.path("run")
        self.call("train", config=SMALL_CONFIG, inputs=[SLICE_A], out=out)
        self.assertTrue(TRAIN_OUTPUTS <= set(os.listdir(out)))
        embeddings = pd.read_csv(os.path.join(out, "embeddings.csv"))
        self.assertEqual(embeddings.shape, (12, 16))
        self.assertEqual(list(embeddings.columns[:2]), ["dim_0", "dim_1"])
        report = _load_json(os.path.join(out, "report.json"))
        self.assertEqual(len(report["epochs"]), 6)
        self.assertEqual(report["mode"], "single")
        self.assertIn("ari", _load_json(os.path.join(out, "metrics.json")))
        manifest = {entry["path"] for entry in _load_json(os.path.join(out, "manifest.json"))["files"]}
        self.assertIn("report.json", manifest)

    def test_multi_slice_run(self):
        out = self.path("run")
        self.call("train", config=SMALL_CONFIG, mode="multi", inputs=[SLICE_A, SLICE_B], out=out)
        spots = pd.read_csv(os.path.join(out, "spots.csv"))
        self.assertEqual(list(spots["slice"].unique()), ["slice_a", "slice_b"])
        self.assertIsNotNone(_load_json(os.path.join(out, "metrics.json"))["silhouette_batch"])

    def test_rerun_gives_identical_files(self):
        out = self.path("run")
        names = ("embeddings.csv", "clusters.csv", "report.json", "metrics.json")
        self.call("train", config=SMALL_CONFIG, inputs=[SLICE_A], out=out)
        first = {name: _read(os.path.join(out, name)) for name in names}
        self.call("train", config=SMALL_CONFIG, inputs=[SLICE_A], out=out)
        for name in names:
            self.assertEqual(first[name], _read(os.path.join(out, name)), name)

    def test_flags_override_config_file(self):
        out = self.path("run")
        self.call("train", config=SMALL_CONFIG, inputs=[SLICE_A], out=out, epochs=2)
        self.assertEqual(len(_load_json(os.path.join(out, "report.json"))["epochs"]), 2)

    def test_multi_mode_on_one_slice(self):
        error = self.assertExitCode(1, "train", config=SMALL_CONFIG, mode="multi", inputs=[SLICE_A], out=self.path("r"))
        self.assertIn("multi", str(error))

    def test_unknown_config_key(self):
        config = self.write_config("\nlerning_rate = 0.1\n")
        self.assertExitCode(1, "train", config=config, inputs=[SLICE_A], out=self.path("r"))

    def test_bad_list_element_is_a_validation_error(self):
        config = self.write_config("\npcl_granularities = [\"a\"]\n")
        error = self.assertExitCode(1, "train", config=config, inputs=[SLICE_A], out=self.path("r"))
        self.assertIn("pcl_granularities", str(error))

    def test_lr_search_excludes_learning_rate(self):
        self.assertExitCode(
            1, "train", config=SMALL_CONFIG, inputs=[SLICE_A], out=self.path("r"), lr_search=True, learning_rate=0.1,
        )

    def test_invalid_mode_choice(self):
        self.assertExitCode(1, "train", "--mode", "both", config=SMALL_CONFIG, inputs=[SLICE_A], out=self.path("r"))

    def test_non_finite_loss_exits_with_two(self):
        nan = torch.tensor(float("nan"), dtype=DTYPE)
        with mock.patch("spotscape.services.reconstruction_loss", return_value=nan):
            self.assertExitCode(2, "train", config=SMALL_CONFIG, inputs=[SLICE_A], out=self.path("r"))


class EvaluateCommandTest(CommandTestCase):

    def setUp(self):
        super().setUp()
        truth = ["a"] * 6 + ["b"] * 6
        one_hot = np.array([[1.0, 0.0] if t == "a" else [0.0, 1.0] for t in truth])
        pd.DataFrame(one_hot, columns=["dim_0", "dim_1"]).to_csv(self.path("embeddings.csv"), index=False)
        pd.DataFrame({"label": truth}).to_csv(self.path("labels.csv"), index=False)
        pd.DataFrame({"slice": ["s0", "s1"] * 6}).to_csv(self.path("spots.csv"), index=False)

    def test_perfect_embeddings(self):
        out = self.path("eval")
        self.call("evaluate", embeddings=self.path("embeddings.csv"), labels=self.path("labels.csv"), k=2, out=out)
        metrics = _load_json(os.path.join(out, "metrics.json"))
        self.assertEqual(metrics["ari"], 1.0)
        self.assertEqual(metrics["nmi"], 1.0)
        self.assertEqual(metrics["ca"], 1.0)
        self.assertEqual(metrics["k"], 2)

    def test_batch_mixing_and_anchor(self):
        out = self.path("eval")
        self.call(
            "evaluate", embeddings=self.path("embeddings.csv"), labels=self.path("labels.csv"),
            slices=self.path("spots.csv"), k=2, anchor=0, out=out,
        )
        self.assertIsNotNone(_load_json(os.path.join(out, "metrics.json"))["silhouette_batch"])
        similarity = pd.read_csv(os.path.join(out, "anchor_similarity.csv"))
        np.testing.assert_allclose(similarity["similarity"], [1.0] * 6 + [0.0] * 6, atol=1e-12)

    def test_repeated_seeds_are_recorded(self):
        out = self.path("eval")
        self.call("evaluate", embeddings=self.path("embeddings.csv"), k=2, repeats=3, seed=4, out=out)
        metrics = _load_json(os.path.join(out, "metrics.json"))
        self.assertEqual(metrics["seed"], [4, 5, 6])
        self.assertIsNone(metrics["ari"])

    def test_rerun_gives_identical_metrics(self):
        for name in ("e1", "e2"):
            self.call("evaluate", embeddings=self.path("embeddings.csv"), labels=self.path("labels.csv"),
                      k=2, out=self.path(name))
        self.assertEqual(_read(self.path("e1", "metrics.json")), _read(self.path("e2", "metrics.json")))

    def test_supervised_flag_needs_labels(self):
        self.assertExitCode(1, "evaluate", embeddings=self.path("embeddings.csv"), ari=True, out=self.path("e"))

    def test_embeddings_option_is_required(self):
        self.assertExitCode(1, "evaluate", out=self.path("e"))

    def test_label_count_mismatch(self):
        pd.DataFrame({"label": ["a"] * 5}).to_csv(self.path("short.csv"), index=False)
        self.assertExitCode(
            1, "evaluate", embeddings=self.path("embeddings.csv"), labels=self.path("short.csv"), k=2, out=self.path("e"),
        )


class AlignCommandTest(CommandTestCase):

    def setUp(self):
        super().setUp()
        embeddings = np.random.default_rng(0).normal(size=(15, 3))
        pd.DataFrame(embeddings, columns=["dim_0", "dim_1", "dim_2"]).to_csv(self.path("emb.csv"), index=False)
        pd.DataFrame({"label": ["x", "y", "z"] * 5}).to_csv(self.path("labels.csv"), index=False)

    def test_self_alignment(self):
        out = self.path("align")
        self.call(
            "align", reference=self.path("emb.csv"), reference_labels=self.path("labels.csv"),
            query=self.path("emb.csv"), query_labels=self.path("labels.csv"), out=out,
        )
        document = _load_json(os.path.join(out, "alignment.json"))
        self.assertEqual(document, {"ltari": 1.0, "n_reference": 15, "n_query": 15})
        transferred = pd.read_csv(os.path.join(out, "transferred.csv"))
        self.assertEqual(list(transferred["reference_spot"]), list(range(15)))

    def test_without_query_labels(self):
        out = self.path("align")
        self.call(
            "align", reference=self.path("emb.csv"), reference_labels=self.path("labels.csv"),
            query=self.path("emb.csv"), out=out,
        )
        self.assertIsNone(_load_json(os.path.join(out, "alignment.json"))["ltari"])


class ImputeCommandTest(CommandTestCase):

    def setUp(self):
        super().setUp()
        self.run_dir = self.path("run")
        self.call("train", config=SMALL_CONFIG, inputs=[SLICE_A], out=self.run_dir)
        self.checkpoint = os.path.join(self.run_dir, "checkpoint.pt")

    def test_imputed_matrix(self):
        out = self.path("imputed")
        self.call("impute", checkpoint=self.checkpoint, inputs=[SLICE_A], out=out)
        imputed = pd.read_csv(os.path.join(out, "imputed.csv"))
        self.assertEqual(imputed.shape, (12, 8))
        self.assertEqual(list(imputed.columns), [f"g{i}" for i in range(8)])

    def test_matching_config_is_accepted(self):
        self.call(
            "impute", checkpoint=self.checkpoint, inputs=[SLICE_A], config=SMALL_CONFIG, out=self.path("i"),
        )
        self.assertTrue(os.path.exists(self.path("i", "imputed.csv")))

    def test_stale_config_is_refused(self):
        config = self.write_config("\nseed = 99\n")
        error = self.assertExitCode(
            1, "impute", checkpoint=self.checkpoint, inputs=[SLICE_A], config=config, out=self.path("i"),
        )
        self.assertIn("périmé", str(error))

    def test_training_flags_are_replayed(self):
        run_dir = self.path("multi")
        inputs = [SLICE_A, SLICE_B]
        self.call("train", config=SMALL_CONFIG, mode="multi", epochs=2, inputs=inputs, out=run_dir)
        checkpoint = os.path.join(run_dir, "checkpoint.pt")
        self.call(
            "impute", checkpoint=checkpoint, inputs=inputs, config=SMALL_CONFIG, mode="multi", epochs=2,
            out=self.path("i"),
        )
        self.assertEqual(pd.read_csv(self.path("i", "imputed.csv")).shape, (24, 8))
        error = self.assertExitCode(
            1, "impute", checkpoint=checkpoint, inputs=inputs, config=SMALL_CONFIG, out=self.path("j"),
        )
        self.assertIn("périmé", str(error))

    def test_searched_learning_rate_is_accepted(self):
        config = self.write_config("\nlr_grid = [0.001, 0.005]\n")
        run_dir = self.path("search")
        self.call("train", config=config, inputs=[SLICE_A], epochs=2, lr_search=True, out=run_dir)
        checkpoint = os.path.join(run_dir, "checkpoint.pt")
        self.call(
            "impute", checkpoint=checkpoint, inputs=[SLICE_A], config=config, epochs=2, lr_search=True,
            out=self.path("i"),
        )
        self.assertTrue(os.path.exists(self.path("i", "imputed.csv")))
        narrowed = self.write_config("\nlr_grid = [0.0001]\n")
        self.assertExitCode(
            1, "impute", checkpoint=checkpoint, inputs=[SLICE_A], config=narrowed, epochs=2, lr_search=True,
            out=self.path("j"),
        )

    def test_training_flags_need_config(self):
        self.assertExitCode(
            1, "impute", checkpoint=self.checkpoint, inputs=[SLICE_A], mode="multi", out=self.path("i"),
        )

    def test_missing_checkpoint(self):
        self.assertExitCode(1, "impute", checkpoint=self.path("none.pt"), inputs=[SLICE_A], out=self.path("i"))

    def test_file_matches_in_process_imputation(self):
        out = self.path("imputed")
        self.call("impute", checkpoint=self.checkpoint, inputs=[SLICE_A], out=out)
        model, _ = restore_model(load_checkpoint(self.checkpoint))
        dataset = fixture_dataset(SLICE_A)
        expected = impute_expression(model, dataset, build_multi_slice_graph(dataset, 4)).numpy()
        write_frame_csv(pd.DataFrame(expected, columns=dataset.gene_names), self.path("expected.csv"))
        self.assertEqual(_read(os.path.join(out, "imputed.csv")), _read(self.path("expected.csv")))
