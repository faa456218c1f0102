import math
import os
import tempfile

import numpy as np
import torch
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase
from torch.func import functional_call

from spotscape.exceptions import ShapeError, StateError
from spotscape.graph import build_multi_slice_graph
from spotscape.network import (
    decode,
    encode,
    infer_embeddings,
    init_params,
    load_checkpoint,
    restore_model,
    save_checkpoint,
)
from spotscape.numeric import DTYPE, as_tensor
from spotscape.tests.helpers import error_codes, fixture_dataset

SMALL = {"encoder_dims": (6, 4), "decoder_hidden": 5, "final_activation": "none"}


class InitParamsTest(SimpleTestCase):

    def test_same_seed_same_weights(self):
        a, _ = init_params(8, seed=3, **SMALL)
        b, _ = init_params(8, seed=3, **SMALL)
        c, _ = init_params(8, seed=4, **SMALL)
        for (name, pa), (_, pb), (_, pc) in zip(
            a.named_parameters(), b.named_parameters(), c.named_parameters(),
        ):
            self.assertTrue(torch.equal(pa, pb), name)
            if name.endswith("weight") and pa.dim() == 2:
                self.assertFalse(torch.equal(pa, pc), name)

    def test_glorot_bounds_and_zero_biases(self):
        model, _ = init_params(8, seed=0, **SMALL)
        for layer in model.dense_layers():
            fan_in, fan_out = layer.weight.shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            self.assertLessEqual(float(layer.weight.abs().max()), bound)
            self.assertEqual(float(layer.bias.abs().sum()), 0.0)
        for norm in [*model.encoder.norms, model.decoder.norm]:
            self.assertTrue(torch.equal(norm.weight, torch.ones_like(norm.weight)))
            self.assertTrue(torch.equal(norm.bias, torch.zeros_like(norm.bias)))

    def test_parameters_are_float64(self):
        model, _ = init_params(8, seed=0, **SMALL)
        self.assertTrue(all(p.dtype == DTYPE for p in model.parameters()))


class EncodeDecodeTest(SimpleTestCase):

    def setUp(self):
        self.dataset = fixture_dataset()
        self.graph = build_multi_slice_graph(self.dataset, k=4)
        self.model, _ = init_params(self.dataset.n_genes, seed=0, **SMALL)

    def test_zero_features_encode_to_zero(self):
        z = encode(self.model, torch.zeros(12, 8, dtype=DTYPE), self.graph.operator())
        self.assertEqual(tuple(z.shape), (12, 4))
        self.assertEqual(float(z.abs().max()), 0.0)

    def test_zero_embeddings_decode_to_zero(self):
        x = decode(self.model, torch.zeros(12, 4, dtype=DTYPE))
        self.assertEqual(tuple(x.shape), (12, 8))
        self.assertEqual(float(x.abs().max()), 0.0)

    def test_wrong_gene_count(self):
        with self.assertRaises(ShapeError):
            encode(self.model, torch.ones(12, 7, dtype=DTYPE), self.graph.operator())
        with self.assertRaises(ShapeError):
            decode(self.model, torch.ones(12, 3, dtype=DTYPE))

    def test_eval_before_any_training_pass(self):
        with self.assertRaises(StateError):
            encode(self.model, self.dataset.expression, self.graph.operator(), mode="eval")

    def test_permutation_equivariance(self):
        features = as_tensor(self.dataset.expression)
        operator = as_tensor(self.graph.normalized.to_dense())
        perm = torch.as_tensor(np.random.default_rng(0).permutation(12))
        z = encode(self.model, features, operator)
        z_perm = encode(self.model, features[perm], operator[perm][:, perm])
        np.testing.assert_allclose(z_perm.detach().numpy(), z[perm].detach().numpy(), atol=1e-9)

    def test_inference_is_deterministic(self):
        encode(self.model, self.dataset.expression, self.graph.operator())
        a = infer_embeddings(self.model, self.dataset, self.graph)
        b = infer_embeddings(self.model, self.dataset, self.graph)
        self.assertTrue(torch.equal(a, b))
        self.assertFalse(a.requires_grad)

    def _check_every_parameter(self, module, forward, output_shape, n_tensors):
        names = [name for name, _ in module.named_parameters()]
        values = tuple(p.detach().clone().requires_grad_(True) for _, p in module.named_parameters())
        target = torch.randn(*output_shape, dtype=DTYPE, generator=torch.Generator().manual_seed(7))

        def objective(*params):
            return ((forward(dict(zip(names, params))) - target) ** 2).sum()

        self.assertEqual(len(values), n_tensors)
        self.assertTrue(torch.autograd.gradcheck(objective, values, eps=1e-6, atol=1e-5, rtol=1e-4))

    def test_encoder_gradient_matches_finite_differences(self):
        features = as_tensor(self.dataset.expression)
        operator = as_tensor(self.graph.normalized.to_dense())
        encoder = self.model.encoder
        self._check_every_parameter(
            encoder, lambda p: functional_call(encoder, p, (features, operator)), (12, 4), n_tensors=8,
        )

    def test_decoder_gradient_matches_finite_differences(self):
        z = torch.randn(12, 4, dtype=DTYPE, generator=torch.Generator().manual_seed(1))
        decoder = self.model.decoder
        self._check_every_parameter(decoder, lambda p: functional_call(decoder, p, (z,)), (12, 8), n_tensors=6)


class CheckpointTest(SimpleTestCase):

    def _config(self):
        return {
            "seed": 5, "encoder_dims": [6, 4], "decoder_hidden": 5, "final_activation": "none",
            "learning_rate": 0.001, "weight_decay": 0.0001,
        }

    def test_saved_model_restores_identically(self):
        model, optimizer = init_params(8, seed=5, **SMALL)
        with torch.no_grad():
            model.encoder.layers[0].bias.add_(0.25)
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(
                os.path.join(tmp, "checkpoint.pt"), model, optimizer, epoch=3,
                config=self._config(), config_hash="abc", gene_names=[f"g{i}" for i in range(8)],
            )
            document = load_checkpoint(path)
        restored, _ = restore_model(document)
        self.assertEqual(document["epoch"], 3)
        self.assertEqual(document["config_hash"], "abc")
        for (name, a), (_, b) in zip(model.state_dict().items(), restored.state_dict().items()):
            self.assertTrue(torch.equal(a, b), name)

    def test_missing_checkpoint(self):
        with self.assertRaises(ValidationError) as ctx:
            load_checkpoint("/nonexistent/checkpoint.pt")
        self.assertIn("ingestion_error", error_codes(ctx.exception))

    def test_foreign_file_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, "other.pt")
            torch.save({"format": "something-else"}, path)
            with self.assertRaises(ValidationError) as ctx:
                load_checkpoint(path)
        self.assertIn("ingestion_error", error_codes(ctx.exception))
