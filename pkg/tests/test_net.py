"""Layer-level and model-level network tests."""

import math

import numpy as np
import pytest
import torch

from tfkit import net, so3
from tfkit.systems import AtomSystem


def _random_system(seed, n=20, vocab=("C", "H", "O", "N", "S")):
    rng = np.random.default_rng(seed)
    return AtomSystem(
        rng.uniform(0, 10, size=(n, 3)), tuple(rng.choice(vocab, size=n))
    )


def _rotate_map(fm, g):
    data = {}
    for l in fm.orders():
        d = torch.as_tensor(so3.wigner_matrix(l, g).matrix.copy(), dtype=net.DTYPE)
        data[l] = torch.einsum("ij,ncj->nci", d, fm[l])
    return net.FeatureMap(data)


class TestEmbedding:
    def test_carbon_one_hot(self):
        s = AtomSystem([[0.0, 0, 0]], ("C",))
        fm = net.embed_elements(s, ("C", "H", "O", "N", "S"))
        np.testing.assert_array_equal(fm.numpy(0)[0, :, 0], [1, 0, 0, 0, 0])

    def test_sulfur_one_hot(self):
        s = AtomSystem([[0.0, 0, 0]], ("S",))
        fm = net.embed_elements(s, ("C", "H", "O", "N", "S"))
        np.testing.assert_array_equal(fm.numpy(0)[0, :, 0], [0, 0, 0, 0, 1])

    def test_rna_vocabulary_phosphorus(self):
        s = AtomSystem([[0.0, 0, 0]], ("P",))
        fm = net.embed_elements(s, ("C", "H", "O", "N", "P"))
        np.testing.assert_array_equal(fm.numpy(0)[0, :, 0], [0, 0, 0, 0, 1])

    def test_unknown_element_named_in_error(self):
        s = AtomSystem([[0.0, 0, 0]], ("Xx",))
        with pytest.raises(ValueError, match="Xx"):
            net.embed_elements(s, ("C", "H"))


class TestRadialBasis:
    def test_peak_at_center(self):
        values = net.radial_basis(np.array(12.0 / 11.0 * 3), 12, 12.0)
        assert values[3] == pytest.approx(1.0)

    def test_tail_decay(self):
        s = 12.0 / 11.0
        values = net.radial_basis(np.array(12.0 + 5 * s), 12, 12.0)
        assert values.max() < 1e-5

    def test_hand_evaluated(self):
        r = 3.7
        values = net.radial_basis(np.array(r), 12, 12.0)
        s = 12.0 / 11.0
        centers = np.linspace(0.0, 12.0, 12)
        np.testing.assert_allclose(
            values, np.exp(-((r - centers) ** 2) / (2 * s * s)), atol=1e-15
        )

    def test_negative_distance_rejected(self):
        with pytest.raises(ValueError):
            net.radial_basis(np.array(-0.5))


class TestSelfInteraction:
    def test_identity_weights(self):
        rng = np.random.default_rng(0)
        fm = net.FeatureMap({0: rng.normal(size=(4, 3, 1)), 1: rng.normal(size=(4, 3, 3))})
        eye = torch.eye(3, dtype=net.DTYPE)
        out = net.self_interaction(fm, {0: eye, 1: eye})
        for l in (0, 1):
            np.testing.assert_allclose(out.numpy(l), fm.numpy(l))

    def test_zero_weights(self):
        rng = np.random.default_rng(1)
        fm = net.FeatureMap({1: rng.normal(size=(4, 3, 3))})
        out = net.self_interaction(fm, {1: torch.zeros((2, 3), dtype=net.DTYPE)})
        assert np.abs(out.numpy(1)).max() == 0.0

    def test_matches_dense_matmul(self):
        rng = np.random.default_rng(2)
        fm = net.FeatureMap({2: rng.normal(size=(5, 4, 5))})
        w = torch.as_tensor(rng.normal(size=(3, 4)), dtype=net.DTYPE)
        out = net.self_interaction(fm, {2: w})
        for a in range(5):
            for m in range(5):
                np.testing.assert_allclose(
                    out.numpy(2)[a, :, m], w.numpy() @ fm.numpy(2)[a, :, m], atol=1e-12
                )

    def test_bias_only_on_order_zero(self):
        rng = np.random.default_rng(3)
        fm = net.FeatureMap({0: rng.normal(size=(4, 2, 1)), 1: rng.normal(size=(4, 2, 3))})
        eye = torch.eye(2, dtype=net.DTYPE)
        bias = torch.as_tensor([1.0, -2.0], dtype=net.DTYPE)
        out = net.self_interaction(fm, {0: eye, 1: eye}, bias)
        np.testing.assert_allclose(out.numpy(0), fm.numpy(0) + bias.numpy()[None, :, None])
        np.testing.assert_allclose(out.numpy(1), fm.numpy(1))

    def test_shape_mismatch(self):
        fm = net.FeatureMap({0: np.zeros((2, 3, 1))})
        with pytest.raises(ValueError, match="channels"):
            net.self_interaction(fm, {0: torch.zeros((2, 4), dtype=net.DTYPE)})


class TestGatedNonlinearity:
    def test_zero_vector_maps_to_zero(self):
        fm = net.FeatureMap({1: np.zeros((3, 2, 3))})
        out = net.gated_nonlinearity(fm, {1: torch.zeros(2, dtype=net.DTYPE)})
        np.testing.assert_allclose(out.numpy(1), 0.0, atol=1e-12)

    def test_direction_preserved(self):
        rng = np.random.default_rng(4)
        v = rng.normal(size=(6, 3, 3))
        fm = net.FeatureMap({1: v})
        out = net.gated_nonlinearity(fm, {1: torch.as_tensor(rng.normal(size=3))})
        got = out.numpy(1)
        cross = np.cross(got, v)
        assert np.abs(cross).max() < 1e-10

    def test_rotation_commutes(self):
        rng = np.random.default_rng(5)
        fm = net.FeatureMap(
            {l: rng.normal(size=(5, 2, 2 * l + 1)) for l in (0, 1, 2)}
        )
        biases = {l: torch.as_tensor(rng.normal(size=2)) for l in (0, 1, 2)}
        g = so3.random_rotation(6)
        out_then_rot = _rotate_map(net.gated_nonlinearity(fm, biases), g)
        rot_then_out = net.gated_nonlinearity(_rotate_map(fm, g), biases)
        for l in (0, 1, 2):
            np.testing.assert_allclose(
                out_then_rot.numpy(l), rot_then_out.numpy(l), atol=1e-10
            )

    def test_order0_is_shifted_softplus(self):
        x = np.linspace(-3, 3, 13).reshape(13, 1, 1)
        fm = net.FeatureMap({0: x})
        out = net.gated_nonlinearity(fm, {0: torch.zeros(1, dtype=net.DTYPE)})
        want = np.log1p(np.exp(x)) - math.log(2.0)
        np.testing.assert_allclose(out.numpy(0), want, atol=1e-12)


class TestEquivariantNorm:
    def test_single_unit_channel_gets_scale(self):
        v = np.zeros((4, 1, 3))
        v[:, 0, 0] = 1.0
        fm = net.FeatureMap({1: v})
        out = net.equivariant_norm(fm, {1: torch.as_tensor([2.5])})
        np.testing.assert_allclose(
            np.linalg.norm(out.numpy(1), axis=-1), 2.5, atol=1e-6
        )

    def test_directions_untouched(self):
        rng = np.random.default_rng(7)
        v = rng.normal(size=(6, 4, 3))
        fm = net.FeatureMap({1: v})
        out = net.equivariant_norm(fm, {1: torch.as_tensor(rng.uniform(0.5, 2, size=4))})
        assert np.abs(np.cross(out.numpy(1), v)).max() < 1e-9

    def test_matches_bruteforce_statistics(self):
        rng = np.random.default_rng(8)
        v = rng.normal(size=(5, 6, 5))
        scales = rng.uniform(0.5, 2.0, size=6)
        fm = net.FeatureMap({2: v})
        out = net.equivariant_norm(fm, {2: torch.as_tensor(scales)})
        for a in range(5):
            norms_sq = [np.sum(v[a, c] ** 2) for c in range(6)]
            rms = math.sqrt(sum(norms_sq) / 6 + 1e-8)
            for c in range(6):
                np.testing.assert_allclose(
                    out.numpy(2)[a, c], scales[c] * v[a, c] / rms, atol=1e-12
                )

    def test_order0_shift(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(4, 3, 1))
        fm = net.FeatureMap({0: x})
        shift = torch.as_tensor([1.0, 2.0, 3.0])
        base = net.equivariant_norm(fm, {0: torch.ones(3, dtype=net.DTYPE)})
        shifted = net.equivariant_norm(fm, {0: torch.ones(3, dtype=net.DTYPE)}, {0: shift})
        want = np.broadcast_to(shift.numpy()[None, :, None], (4, 3, 1))
        np.testing.assert_allclose(shifted.numpy(0) - base.numpy(0), want, atol=1e-12)


class TestPointConvolution:
    def _weights(self, rng, paths, c, b=12):
        return {p: rng.normal(size=(c, b)) for p in paths}

    def test_no_neighbors_no_output(self):
        rng = np.random.default_rng(10)
        pos = rng.uniform(0, 5, size=(4, 3))
        fm = net.FeatureMap({0: rng.normal(size=(4, 2, 1))})
        neighbors = np.full((4, 2), -1)
        out = net.point_convolution(
            fm, pos, neighbors, self._weights(rng, [(0, 1, 1)], 2), lmax=1
        )
        assert np.abs(out.numpy(1)).max() == 0.0

    def test_two_atoms_on_z_axis_give_axial_vectors(self):
        rng = np.random.default_rng(11)
        pos = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 2.7]])
        fm = net.FeatureMap({0: rng.normal(size=(2, 3, 1))})
        neighbors = np.array([[1], [0]])
        out = net.point_convolution(
            fm, pos, neighbors, self._weights(rng, [(0, 1, 1)], 3), lmax=1
        )
        vecs = out.numpy(1) @ so3._P_CART_TO_SH  # to Cartesian
        assert np.abs(vecs[:, :, :2]).max() < 1e-12  # x and y vanish

    def test_equivariance(self):
        rng = np.random.default_rng(12)
        pos = rng.uniform(0, 8, size=(10, 3))
        from tfkit.geometry import knn_indices

        neighbors = knn_indices(pos, 4)
        paths = net.conv_paths([0, 1, 2], 2)
        fm = net.FeatureMap(
            {l: rng.normal(size=(10, 3, 2 * l + 1)) for l in (0, 1, 2)}
        )
        weights = self._weights(rng, paths, 3)
        out = net.point_convolution(fm, pos, neighbors, weights, lmax=2)
        for trial in range(5):
            g = so3.random_rotation(100 + trial)
            fm_rot = _rotate_map(fm, g)
            out_rot = net.point_convolution(
                fm_rot, pos @ g.matrix.T, neighbors, weights, lmax=2
            )
            expected = _rotate_map(out, g)
            for l in out.orders():
                rel = np.abs(out_rot.numpy(l) - expected.numpy(l)).max() / (
                    np.abs(out.numpy(l)).max() + 1e-12
                )
                assert rel < 1e-9

    def test_selection_rule_paths(self):
        assert net.conv_paths([0], 1) == [(0, 0, 0), (0, 1, 1)]
        assert (1, 1, 2) in net.conv_paths([0, 1], 2)
        assert all(l3 <= 2 and lf <= 2 for _, lf, l3 in net.conv_paths([0, 1, 2], 2))

    def test_weight_shape_validated(self):
        rng = np.random.default_rng(13)
        pos = rng.uniform(0, 5, size=(4, 3))
        fm = net.FeatureMap({0: rng.normal(size=(4, 2, 1))})
        with pytest.raises(ValueError, match="weight rows"):
            net.point_convolution(
                fm, pos, np.array([[1], [0], [0], [0]]), {(0, 0, 0): np.zeros((5, 12))}, 1
            )


class TestBuildModel:
    def test_parameter_count_matches_construction_rules(self):
        for lmax in (0, 1, 2):
            cfg = net.ModelConfig(lmax=lmax, filters=(24, 12, 1), seed=0)
            model = net.build_model(cfg)
            v = len(cfg.vocabulary)
            expect = 0
            in_ch = {0: v}
            for width in cfg.filters:
                for l, c in in_ch.items():  # si_in
                    expect += width * c
                expect += width  # si_in l0 bias
                paths = net.conv_paths(sorted(in_ch), lmax)
                merge = {}
                for l1, lf, l3 in paths:
                    expect += width * cfg.n_radial
                    merge[l3] = merge.get(l3, 0) + width
                for l in in_ch:
                    merge[l] = merge.get(l, 0) + width
                for l, c in merge.items():  # norm scales
                    expect += c
                expect += merge[0]  # norm l0 shift
                for l, c in merge.items():  # gate biases
                    expect += c
                for l, c in merge.items():  # si_out
                    expect += width * c
                expect += width  # si_out l0 bias
                in_ch = {l: width for l in merge}
            assert model.parameter_count == expect

    def test_layer_sequence_shape(self):
        model = net.build_model(net.ModelConfig(lmax=1, seed=0))
        kinds = [layer.kind for layer in model.layers]
        assert kinds[0] == "embedding"
        assert kinds.count("self_interaction") == 6
        assert kinds.count("convolution") == 3
        assert kinds.count("norm") == 3
        assert kinds.count("nonlinearity") == 3
        block = ["self_interaction", "convolution", "norm", "nonlinearity", "self_interaction"]
        assert kinds[1:] == block * 3

    def test_order0_model_has_no_higher_orders(self):
        model = net.build_model(net.ModelConfig(lmax=0, seed=0))
        for name in model.params:
            assert ".l1." not in name and ".l2." not in name

    def test_seed_determinism(self):
        a = net.build_model(net.ModelConfig(lmax=2, seed=5))
        b = net.build_model(net.ModelConfig(lmax=2, seed=5))
        for k in a.params:
            np.testing.assert_array_equal(a.params[k].numpy(), b.params[k].numpy())

    def test_seeds_differ(self):
        a = net.build_model(net.ModelConfig(lmax=1, seed=5))
        b = net.build_model(net.ModelConfig(lmax=1, seed=6))
        assert any(
            not np.array_equal(a.params[k].numpy(), b.params[k].numpy()) for k in a.params
        )

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            net.ModelConfig(lmax=3)
        with pytest.raises(ValueError):
            net.ModelConfig(vocabulary=())
        with pytest.raises(ValueError):
            net.ModelConfig(filters=(24, 12, 2))


class TestForward:
    def test_translation_invariance(self):
        model = net.build_model(net.ModelConfig(lmax=1, seed=1))
        s = _random_system(20, n=30)
        out = net.forward(model, s)
        rng = np.random.default_rng(21)
        for _ in range(5):
            t = rng.uniform(-100, 100, size=3)
            shifted = AtomSystem(s.positions + t, s.elements)
            rel = np.abs(net.forward(model, shifted) - out).max() / (np.abs(out).max() + 1e-12)
            assert rel < 1e-9

    def test_rotation_equivariance(self):
        model = net.build_model(net.ModelConfig(lmax=2, seed=2))
        s = _random_system(22, n=25)
        out = net.forward(model, s)
        norms = np.linalg.norm(out, axis=1) + 1e-12
        for trial in range(10):
            g = so3.random_rotation(300 + trial)
            rotated = AtomSystem(s.positions @ g.matrix.T, s.elements)
            dev = np.linalg.norm(net.forward(model, rotated) - out @ g.matrix.T, axis=1)
            assert (dev / norms).max() < 1e-6

    def test_order0_rotation_invariance(self):
        model = net.build_model(net.ModelConfig(lmax=0, seed=3))
        s = _random_system(23, n=25)
        out = net.forward(model, s)
        for trial in range(10):
            g = so3.random_rotation(400 + trial)
            rotated = AtomSystem(s.positions @ g.matrix.T, s.elements)
            rel = np.abs(net.forward(model, rotated) - out).max() / (np.abs(out).max() + 1e-12)
            assert rel < 1e-9

    def test_permutation_equivariance(self):
        model = net.build_model(net.ModelConfig(lmax=1, seed=4))
        s = _random_system(24, n=30)
        out = net.forward(model, s)
        perm = np.random.default_rng(25).permutation(30)
        permuted = AtomSystem(s.positions[perm], tuple(np.asarray(s.elements)[perm]))
        np.testing.assert_allclose(net.forward(model, permuted), out[perm], atol=1e-12)

    def test_output_scale_applies(self):
        s = _random_system(26, n=10)
        base = net.forward(net.build_model(net.ModelConfig(lmax=1, seed=5)), s)
        scaled = net.forward(
            net.build_model(net.ModelConfig(lmax=1, seed=5, output_scale=7.0)), s
        )
        np.testing.assert_allclose(scaled, 7.0 * base, atol=1e-12)

    def test_single_atom_rejected(self):
        model = net.build_model(net.ModelConfig(lmax=1, seed=6))
        with pytest.raises(ValueError, match="at least 2 atoms"):
            net.forward(model, AtomSystem([[0.0, 0, 0]], ("C",)))

    def test_coincident_atoms_rejected(self):
        model = net.build_model(net.ModelConfig(lmax=1, seed=7))
        s = AtomSystem([[0.0, 0, 0], [0.0, 0, 0]], ("C", "C"))
        with pytest.raises(ValueError, match="coincident"):
            net.forward(model, s)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        model = net.build_model(net.ModelConfig(lmax=2, seed=8, output_scale=3.5))
        path = tmp_path / "model.ckpt"
        net.save_checkpoint(path, model, extras={"opt.t": np.array([4.0])}, meta={"note": "x"})
        loaded, extras, meta = net.load_checkpoint(path)
        assert loaded.config == model.config
        assert meta == {"note": "x"}
        np.testing.assert_array_equal(extras["opt.t"], [4.0])
        for k in model.params:
            np.testing.assert_array_equal(loaded.params[k].numpy(), model.params[k].numpy())
        s = _random_system(27, n=12)
        np.testing.assert_array_equal(net.forward(loaded, s), net.forward(model, s))

    def test_byte_stable(self, tmp_path):
        model = net.build_model(net.ModelConfig(lmax=1, seed=9))
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        net.save_checkpoint(a, model)
        net.save_checkpoint(b, model)
        assert a.read_bytes() == b.read_bytes()

    def test_rejects_junk(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(ValueError, match="not a checkpoint"):
            net.load_checkpoint(path)
