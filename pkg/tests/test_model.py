import numpy as np
import pytest
import scipy.sparse as sp

import gclrec.diffcore as dc
from gclrec.diffcore import SparseOperator, Tape
from gclrec.graphs import build_graph
from gclrec.model import (
    MLPParams,
    NoiseSettings,
    encode,
    generate_noise,
    init_params,
    load_checkpoint,
    predict_scores,
    propagate,
    reconstruct,
    save_checkpoint,
)

from conftest import random_interactions
from oracles import propagate_dense, sym_normalize_dense, adjacency_dense

NO_NOISE = NoiseSettings(mode="none")


def zero_generator(params):
    for arr in params.generator.arrays("gen").values():
        arr[:] = 0.0
    return params


class TestInitParams:
    def test_deterministic_per_seed(self):
        a = init_params(5, 7, 4, 4, seed=3)
        b = init_params(5, 7, 4, 4, seed=3)
        for k, arr in a.param_arrays().items():
            assert np.array_equal(arr, b.param_arrays()[k])

    def test_embedding_bound(self):
        p = init_params(10, 20, 8, 8, seed=0)
        bound = np.sqrt(6.0 / (30 + 8))
        assert np.abs(p.base_embedding).max() <= bound
        assert p.base_embedding.shape == (30, 8)

    def test_mlp_shapes_and_zero_biases(self):
        p = init_params(3, 4, 6, 5, seed=1)
        g = p.generator
        assert g.w1.shape == (6, 5) and g.w2.shape == (5, 5)
        assert g.w3.shape == (5, 12)  # outputs mu and log-variance halves
        r = p.reconstructor
        assert r.w3.shape == (5, 6)
        for b in (g.b1, g.b2, g.b3, r.b1, r.b2, r.b3):
            assert np.all(b == 0.0)

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            init_params(2, 2, 0, 4, seed=0)


class TestGenerateNoise:
    def setup_method(self):
        self.params = init_params(3, 3, 4, 4, seed=0)

    def test_zero_generator_gives_pure_epsilon(self):
        zero_generator(self.params)
        t = Tape()
        leaves = self.params.leaves(t)
        z = t.constant(np.random.default_rng(1).normal(size=(6, 4)))
        block = generate_noise(t, z, leaves, np.random.default_rng(2),
                               NoiseSettings())
        np.testing.assert_array_equal(block.mu.value, 0.0)
        np.testing.assert_array_equal(block.sigma2.value, 1.0)
        np.testing.assert_array_equal(block.sample.value, block.epsilon)

    def test_mode_none_zero_sample(self):
        t = Tape()
        z = t.constant(np.ones((5, 4)))
        block = generate_noise(t, z, {}, np.random.default_rng(0), NO_NOISE)
        np.testing.assert_array_equal(block.sample.value, 0.0)
        assert block.mu is None and block.sigma2 is None

    def test_sigma2_positive(self):
        t = Tape()
        leaves = self.params.leaves(t)
        z = t.constant(np.random.default_rng(3).normal(size=(6, 4)) * 10)
        block = generate_noise(t, z, leaves, np.random.default_rng(4),
                               NoiseSettings())
        assert np.all(block.sigma2.value > 0)

    def test_variance_vs_stddev_scaling(self):
        # push log-variance to a nonzero constant via the output bias
        zero_generator(self.params)
        self.params.generator.b3[0, 4:] = 2.0  # log sigma^2 = 2
        eps = np.random.default_rng(5).normal(size=(6, 4))

        def sample(scale):
            t = Tape()
            leaves = self.params.leaves(t)
            z = t.constant(np.zeros((6, 4)))
            block = generate_noise(t, z, leaves, None,
                                   NoiseSettings(scale=scale), frozen_eps=eps)
            return block.sample.value

        np.testing.assert_allclose(sample("variance"), np.exp(2.0) * eps)
        np.testing.assert_allclose(sample("stddev"), np.exp(1.0) * eps)

    def test_uniform_distribution_applies_gelu(self):
        from scipy.special import erf
        zero_generator(self.params)
        eps = np.random.default_rng(6).normal(size=(6, 4))
        t = Tape()
        leaves = self.params.leaves(t)
        z = t.constant(np.zeros((6, 4)))
        block = generate_noise(t, z, leaves, None,
                               NoiseSettings(distribution="uniform"),
                               frozen_eps=eps)
        gaussian = eps  # zero generator: mu=0, sigma2=1
        expected = 0.5 * gaussian * (1.0 + erf(gaussian / np.sqrt(2.0)))
        np.testing.assert_allclose(block.sample.value, expected, atol=1e-14)

    def test_random_mode_fixed_scale(self):
        eps = np.random.default_rng(7).normal(size=(6, 4))
        t = Tape()
        z = t.constant(np.zeros((6, 4)))
        block = generate_noise(t, z, {}, None,
                               NoiseSettings(mode="random", s_fixed=0.1),
                               frozen_eps=eps)
        np.testing.assert_allclose(block.sample.value, 0.1 * eps)
        np.testing.assert_array_equal(block.mu.value, 0.0)

    def test_nonfinite_generator_output_raises(self):
        self.params.generator.w3[0, 0] = np.inf
        t = Tape()
        leaves = self.params.leaves(t)
        z = t.constant(np.ones((2, 4)))
        with pytest.raises(dc.DiffError, match="non-finite"):
            generate_noise(t, z, leaves, np.random.default_rng(0),
                           NoiseSettings())

    def test_bad_settings_rejected(self):
        with pytest.raises(ValueError):
            NoiseSettings(mode="gaussian")
        with pytest.raises(ValueError):
            NoiseSettings(distribution="laplace")
        with pytest.raises(ValueError):
            NoiseSettings(scale="log")


class TestPropagate:
    def test_single_edge_swaps_embeddings(self):
        # one user, one item, one edge: the normalized adjacency is the
        # antidiagonal, so layer 1 exchanges the two embeddings
        A = SparseOperator(sp.csr_matrix(np.array([[0.0, 1.0], [1.0, 0.0]])))
        t = Tape()
        z0 = t.constant(np.array([[1.0, 2.0], [3.0, 4.0]]))
        z1 = propagate(A, z0, None)
        np.testing.assert_array_equal(z1.value, [[3.0, 4.0], [1.0, 2.0]])

    def test_zero_noise_is_plain_propagation(self):
        rng = np.random.default_rng(8)
        dense = sym_normalize_dense(
            adjacency_dense((rng.random((4, 5)) < 0.5).astype(float)))
        A = SparseOperator(sp.csr_matrix(dense))
        t = Tape()
        z0 = t.constant(rng.normal(size=(9, 3)))
        zero_block = generate_noise(t, z0, {}, None, NO_NOISE)
        with_zero = propagate(A, z0, zero_block)
        without = propagate(A, z0, None)
        np.testing.assert_allclose(with_zero.value, without.value, atol=1e-15)


def build_ops(data, gamma=1.0, complement=True):
    g = build_graph(data, gamma=gamma, complement_enabled=complement)
    comp_op = SparseOperator(g.comp) if g.comp is not None else None
    return SparseOperator(g.ui), comp_op, g


class TestEncode:
    def setup_method(self):
        self.data = random_interactions(6, 8, density=0.3, seed=9)
        self.params = init_params(6, 8, 4, 4, seed=10)

    def run_encode(self, settings, seed=0, layers=3, complement=True):
        ui_op, comp_op, _ = build_ops(self.data, complement=complement)
        t = Tape()
        leaves = self.params.leaves(t)
        out = encode(t, leaves, ui_op, comp_op, 6, 8, layers,
                     np.random.default_rng(seed), settings)
        return out

    def test_reduces_to_plain_propagation_without_noise(self):
        ui_op, comp_op, g = build_ops(self.data)
        out = self.run_encode(NO_NOISE)
        A = g.ui.toarray()
        zeros = [np.zeros((14, 4))] * 3
        expected_avg, expected_layers = propagate_dense(
            A, self.params.base_embedding, zeros, 3)
        for k in range(3):
            np.testing.assert_allclose(out.ui_layers[k].value,
                                       expected_layers[k + 1], atol=1e-12)
        np.testing.assert_allclose(out.z_u.value, expected_avg[:6], atol=1e-12)
        np.testing.assert_allclose(out.z_i.value, expected_avg[6:], atol=1e-12)

    def test_matches_dense_reference_with_noise(self):
        # replay the generated noise through the dense reference
        out = self.run_encode(NoiseSettings(), seed=4)
        ui_op, comp_op, g = build_ops(self.data)
        A = g.ui.toarray()

        def normed(sample):
            norms = np.linalg.norm(sample, axis=1, keepdims=True)
            inv = np.where(norms > 1e-12, 1.0 / np.maximum(norms, 1e-12), 0.0)
            return sample * inv

        noise = [normed(out.noise_blocks[("ui", k)].sample.value)
                 for k in (1, 2, 3)]
        expected_avg, _ = propagate_dense(A, self.params.base_embedding,
                                          noise, 3)
        np.testing.assert_allclose(out.z_u.value, expected_avg[:6], atol=1e-12)

    def test_layer_average_invariant(self):
        out = self.run_encode(NoiseSettings(), seed=1)
        stack = np.stack([z.value for z in out.ui_layers])
        avg = stack.mean(axis=0)
        np.testing.assert_allclose(out.z_u.value, avg[:6], atol=1e-14)
        np.testing.assert_allclose(out.z_i.value, avg[6:], atol=1e-14)
        comp_avg = np.stack([z.value for z in out.comp_layers]).mean(axis=0)
        np.testing.assert_allclose(out.z_c.value, comp_avg, atol=1e-14)

    def test_views_are_first_layer_and_average(self):
        out = self.run_encode(NoiseSettings(), seed=2)
        np.testing.assert_array_equal(out.view_first["user"].value,
                                      out.ui_layers[0].value[:6])
        np.testing.assert_array_equal(out.view_avg["item"].value,
                                      out.z_i.value)
        np.testing.assert_array_equal(out.view_first["comp"].value,
                                      out.comp_layers[0].value)

    def test_deterministic_given_seed(self):
        a = self.run_encode(NoiseSettings(), seed=7)
        b = self.run_encode(NoiseSettings(), seed=7)
        assert np.array_equal(a.z_u.value, b.z_u.value)
        c = self.run_encode(NoiseSettings(), seed=8)
        assert not np.array_equal(a.z_u.value, c.z_u.value)

    def test_noise_rows_unit_after_normalization(self):
        out = self.run_encode(NoiseSettings(), seed=3)
        for block in out.noise_blocks.values():
            normed = block.sample.value / np.maximum(
                np.linalg.norm(block.sample.value, axis=1, keepdims=True), 1e-12)
            norms = np.linalg.norm(normed, axis=1)
            assert np.all((np.abs(norms - 1.0) < 1e-9) | (norms == 0.0))

    def test_complement_channel_off(self):
        out = self.run_encode(NoiseSettings(), complement=False)
        assert out.comp_layers is None and out.z_c is None
        assert "comp" not in out.view_first

    def test_empty_complement_gives_zero_z_c(self):
        import warnings
        from gclrec.graphs import build_complement, build_interaction_matrix
        R = build_interaction_matrix(self.data)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            empty = build_complement(R, gamma=1e9)
        ui_op = SparseOperator(build_graph(self.data, 1.0).ui)
        t = Tape()
        leaves = self.params.leaves(t)
        out = encode(t, leaves, ui_op, SparseOperator(empty), 6, 8, 2,
                     np.random.default_rng(0), NoiseSettings())
        np.testing.assert_array_equal(out.z_c.value, 0.0)

    def test_zero_layers_rejected(self):
        ui_op, comp_op, _ = build_ops(self.data)
        t = Tape()
        leaves = self.params.leaves(t)
        with pytest.raises(ValueError, match="layers"):
            encode(t, leaves, ui_op, comp_op, 6, 8, 0,
                   np.random.default_rng(0), NO_NOISE)


class TestPredictScores:
    def test_dot_product(self):
        z_u = np.array([[1.0, 0.0]])
        z_i = np.array([[0.5, 2.0], [1.0, 1.0]])
        scores = predict_scores(z_u, z_i, [0])
        np.testing.assert_allclose(scores, [[0.5, 1.0]])

    def test_identical_vectors_give_squared_norm(self):
        v = np.array([[1.5, -2.0, 0.5]])
        assert predict_scores(v, v, [0])[0, 0] == pytest.approx(
            float(np.sum(v ** 2)))

    def test_row_order_follows_user_list(self):
        z_u = np.arange(6.0).reshape(3, 2)
        z_i = np.eye(2)
        fwd = predict_scores(z_u, z_i, [0, 2])
        rev = predict_scores(z_u, z_i, [2, 0])
        np.testing.assert_array_equal(fwd, rev[::-1])


class TestReconstruct:
    def test_identity_map_unit_vectors(self):
        t = Tape()
        noise = t.constant(np.array([[1.0, 0.0], [1.0, 0.0]]))
        out = reconstruct(noise, None, [(0, 0)], num_users=1)
        assert out.value[0, 0] == pytest.approx(1.0)

    def test_zero_noise_constant_prediction(self):
        params = init_params(2, 2, 3, 3, seed=11)
        t = Tape()
        leaves = params.leaves(t)
        noise = t.constant(np.zeros((4, 3)))
        out = reconstruct(noise, leaves, [(0, 0), (1, 1)], num_users=2)
        assert out.value[0, 0] == pytest.approx(out.value[1, 0])


class TestCheckpoint:
    def test_bit_exact_roundtrip(self, tmp_path):
        params = init_params(4, 5, 3, 3, seed=12)
        path = tmp_path / "model.npz"
        save_checkpoint(params, path, seed=12)
        loaded, seed = load_checkpoint(path)
        assert seed == 12
        assert (loaded.num_users, loaded.num_items) == (4, 5)
        for k, arr in params.param_arrays().items():
            assert np.array_equal(arr, loaded.param_arrays()[k])

    def test_byte_identical_across_saves(self, tmp_path):
        params = init_params(4, 5, 3, 3, seed=13)
        p1, p2 = tmp_path / "a.npz", tmp_path / "b.npz"
        save_checkpoint(params, p1, seed=13)
        save_checkpoint(params, p2, seed=13)
        assert p1.read_bytes() == p2.read_bytes()

    def test_copy_is_independent(self):
        params = init_params(2, 2, 2, 2, seed=14)
        dup = params.copy()
        dup.base_embedding[0, 0] += 1.0
        assert params.base_embedding[0, 0] != dup.base_embedding[0, 0]
