import math

import numpy as np
import torch
from django.core.exceptions import ValidationError
from django.test import SimpleTestCase

from spotscape.exceptions import DegenerateRowError, ShapeError
from spotscape.losses import (
    LossParts,
    LossWeights,
    PrototypeSet,
    combined_multi_loss,
    combined_single_loss,
    compute_prototypes,
    granularity_sizes,
    prototypical_loss,
    reconstruction_loss,
    similarity_scaling_loss,
    similarity_telescope_loss,
)
from spotscape.numeric import DTYPE, SeededRng, as_tensor
from spotscape.tests.helpers import error_codes

SS_FIXTURE = [
    [0.9, 0.5, 0.7, 0.2],
    [0.5, 0.8, 0.8, 0.1],
    [0.1, 0.6, 0.6, 0.3],
    [0.4, 0.4, 0.2, 0.4],
]


def _random(shape, seed):
    return torch.randn(*shape, dtype=DTYPE, generator=torch.Generator().manual_seed(seed))


def _scalar(value):
    return torch.tensor(value, dtype=DTYPE)


class SimilarityTelescopeTest(SimpleTestCase):

    def test_hand_computed_value(self):
        loss, h = similarity_telescope_loss([[1.0, 0.0], [0.0, 1.0]], [[1.0, 0.0], [0.6, 0.8]])
        np.testing.assert_allclose(h.numpy(), [[1.0, 0.6], [0.0, 0.8]], atol=1e-15)
        self.assertAlmostEqual(float(loss), 0.18, delta=1e-9)

    def test_identical_views_give_zero(self):
        z = _random((6, 3), 0)
        loss, _ = similarity_telescope_loss(z, z)
        self.assertEqual(float(loss), 0.0)

    def test_invariant_to_shared_rotation(self):
        z1, z2 = _random((7, 3), 1), _random((7, 3), 2)
        q, _ = torch.linalg.qr(_random((3, 3), 3))
        base, _ = similarity_telescope_loss(z1, z2)
        rotated, _ = similarity_telescope_loss(z1 @ q, z2 @ q)
        self.assertAlmostEqual(float(base), float(rotated), delta=1e-12)

    def test_zero_row(self):
        with self.assertRaises(DegenerateRowError):
            similarity_telescope_loss([[0.0, 0.0], [1.0, 0.0]], [[1.0, 0.0], [1.0, 0.0]])

    def test_gradient(self):
        z1 = _random((5, 3), 4).requires_grad_(True)
        z2 = _random((5, 3), 5)
        self.assertTrue(torch.autograd.gradcheck(lambda z: similarity_telescope_loss(z, z2)[0], (z1,)))


class ReconstructionTest(SimpleTestCase):

    def test_hand_computed_value(self):
        loss = reconstruction_loss([[1.0, 2.0]], [[1.0, 2.0]], [[0.0, 2.0]])
        self.assertAlmostEqual(float(loss), 0.5, delta=1e-12)

    def test_perfect_reconstruction(self):
        x = _random((4, 3), 0)
        self.assertEqual(float(reconstruction_loss(x, x, x)), 0.0)

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            reconstruction_loss(np.ones((2, 3)), np.ones((2, 3)), np.ones((3, 2)))

    def test_gradient(self):
        x, x_hat2 = _random((5, 3), 0), _random((5, 3), 1)
        x_hat1 = _random((5, 3), 2).requires_grad_(True)
        self.assertTrue(torch.autograd.gradcheck(lambda m: reconstruction_loss(x, m, x_hat2), (x_hat1,)))


class PrototypeTest(SimpleTestCase):

    def _two_clouds(self):
        rng = np.random.default_rng(0)
        left = np.array([1.0, 0.0]) + 0.05 * rng.standard_normal((10, 2))
        right = np.array([0.0, 1.0]) + 0.05 * rng.standard_normal((10, 2))
        return as_tensor(np.vstack([left, right]))

    def test_granularity_sizes(self):
        self.assertEqual(granularity_sizes(3), [3, 5, 6])
        self.assertEqual(granularity_sizes(4), [4, 6, 8])

    def test_separated_clouds_are_recovered(self):
        prototypes = compute_prototypes(self._two_clouds(), 2, granularities=(1.0,), rng=SeededRng(0, "prototypes/0"))
        assigned = prototypes.assignments[0]
        self.assertEqual(len(set(assigned[:10])), 1)
        self.assertEqual(len(set(assigned[10:])), 1)
        self.assertNotEqual(assigned[0], assigned[10])
        np.testing.assert_allclose(torch.linalg.vector_norm(prototypes.centroids[0], dim=1).numpy(), 1.0)

    def test_three_granularities(self):
        prototypes = compute_prototypes(self._two_clouds(), 3, rng=SeededRng(1, "prototypes/0"))
        self.assertEqual(prototypes.sizes, [3, 5, 6])
        self.assertFalse(prototypes.centroids[0].requires_grad)

    def test_same_stream_same_prototypes(self):
        a = compute_prototypes(self._two_clouds(), 2, rng=SeededRng(2, "prototypes/5"))
        b = compute_prototypes(self._two_clouds(), 2, rng=SeededRng(2, "prototypes/5"))
        for ca, cb in zip(a.centroids, b.centroids):
            self.assertTrue(torch.equal(ca, cb))

    def test_too_many_prototypes(self):
        with self.assertRaises(ValidationError) as ctx:
            compute_prototypes(_random((5, 2), 0), 3, rng=SeededRng(0))
        self.assertIn("parameter_error", error_codes(ctx.exception))

    def test_single_prototype_refused(self):
        with self.assertRaises(ValidationError):
            compute_prototypes(_random((5, 2), 0), 1, granularities=(1.0,), rng=SeededRng(0))

    def test_state_round_trip(self):
        prototypes = compute_prototypes(self._two_clouds(), 2, granularities=(1.0,), rng=SeededRng(0))
        restored = PrototypeSet.from_state(prototypes.to_state())
        np.testing.assert_array_equal(restored.assignments[0], prototypes.assignments[0])


class PrototypicalLossTest(SimpleTestCase):

    def _prototypes(self):
        return PrototypeSet(centroids=[as_tensor([[1.0, 0.0], [0.0, 1.0]])], assignments=[np.array([0])])

    def test_hand_computed_value(self):
        loss = prototypical_loss([[1.0, 0.0]], self._prototypes(), tau=1.0)
        self.assertAlmostEqual(float(loss), -math.log(math.e / (math.e + 1.0)), delta=1e-12)
        self.assertAlmostEqual(float(loss), 0.3133, delta=1e-4)

    def test_non_positive_temperature(self):
        for tau in (0.0, -1.0):
            with self.assertRaises(ValidationError):
                prototypical_loss([[1.0, 0.0]], self._prototypes(), tau=tau)

    def test_dimension_mismatch(self):
        with self.assertRaises(ShapeError):
            prototypical_loss([[1.0, 0.0, 0.0]], self._prototypes())

    def test_gradient(self):
        z = _random((6, 3), 7).requires_grad_(True)
        prototypes = compute_prototypes(z.detach(), 2, rng=SeededRng(0))
        self.assertTrue(torch.autograd.gradcheck(lambda x: prototypical_loss(x, prototypes, 0.75), (z,)))


class SimilarityScalingTest(SimpleTestCase):

    def test_hand_computed_value(self):
        loss = similarity_scaling_loss(SS_FIXTURE, [0, 0, 1, 1], k=1)
        self.assertAlmostEqual(float(loss), 0.01, delta=1e-12)

    def test_balanced_rows_give_zero(self):
        h = np.full((4, 4), 0.3)
        self.assertEqual(float(similarity_scaling_loss(h, [0, 0, 1, 1], k=2)), 0.0)

    def test_invariant_to_within_slice_permutation(self):
        h = _random((8, 8), 0)
        membership = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        perm = torch.as_tensor([2, 0, 3, 1, 6, 4, 7, 5])
        base = similarity_scaling_loss(h, membership, k=2)
        permuted = similarity_scaling_loss(h[perm][:, perm], membership[perm.numpy()], k=2)
        self.assertAlmostEqual(float(base), float(permuted), delta=1e-12)

    def test_excluding_self_similarity(self):
        h = np.array([
            [1.0, 0.2, 0.2, 0.1],
            [0.2, 1.0, 0.2, 0.1],
            [0.2, 0.1, 1.0, 0.2],
            [0.2, 0.1, 0.2, 1.0],
        ])
        self.assertEqual(float(similarity_scaling_loss(h, [0, 0, 1, 1], k=1, include_self=False)), 0.0)
        self.assertGreater(float(similarity_scaling_loss(h, [0, 0, 1, 1], k=1, include_self=True)), 0.0)

    def test_single_slice_refused(self):
        with self.assertRaises(ValidationError):
            similarity_scaling_loss(np.eye(3), [0, 0, 0], k=1)

    def test_slice_smaller_than_k(self):
        with self.assertRaises(ValidationError):
            similarity_scaling_loss(np.eye(3), [0, 0, 1], k=2)

    def test_gradient(self):
        h = _random((6, 6), 3).requires_grad_(True)
        membership = [0, 0, 0, 1, 1, 1]
        self.assertTrue(torch.autograd.gradcheck(lambda m: similarity_scaling_loss(m, membership, k=2), (h,)))


class CombinedLossTest(SimpleTestCase):

    def test_single_slice_combination(self):
        parts = LossParts(sc=_scalar(0.18), recon=_scalar(0.5))
        total = combined_single_loss(parts, LossWeights(lambda_sc=1.0, lambda_recon=0.1))
        self.assertAlmostEqual(float(total), 0.23, delta=1e-12)

    def test_prototype_term_gated_by_warmup(self):
        parts = LossParts(sc=_scalar(0.1), recon=_scalar(0.2), pcl=_scalar(0.3), ss=_scalar(0.4))
        weights = LossWeights()
        self.assertAlmostEqual(float(combined_multi_loss(parts, weights, epoch=500)), 0.523, delta=1e-9)
        self.assertAlmostEqual(float(combined_multi_loss(parts, weights, epoch=499)), 0.52, delta=1e-9)

    def test_missing_parts_count_as_zero(self):
        parts = LossParts(sc=_scalar(0.5), recon=_scalar(0.0))
        self.assertEqual(parts.as_floats(), {"sc": 0.5, "recon": 0.0, "pcl": 0.0, "ss": 0.0})

    def test_negative_weight_refused(self):
        with self.assertRaises(ValidationError):
            LossWeights(lambda_ss=-1.0).validate()
