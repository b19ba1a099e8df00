import numpy as np
import pytest

import ropes.nets as N
import ropes.tensor as T
from ropes.rng import stream


class TestSpecValidation:
    def test_unknown_kind(self):
        with pytest.raises(ValueError, match="unknown layer kind"):
            N.LayerSpec("pool")

    def test_dense_on_image_names_layer(self):
        with pytest.raises(N.ShapeChainError, match=r"layer 0 \(dense\)"):
            N.NetworkSpec((N.LayerSpec("dense", features=4),), (8, 8, 1))

    def test_conv_on_flat_input(self):
        with pytest.raises(N.ShapeChainError, match=r"layer 0 \(conv\)"):
            N.NetworkSpec((N.LayerSpec("conv", features=4),), (16,))

    def test_res_block_width_mismatch(self):
        with pytest.raises(N.ShapeChainError, match="res_block features"):
            N.NetworkSpec((N.LayerSpec("res_block", features=8),), (4, 4, 3))

    def test_bad_reshape(self):
        with pytest.raises(N.ShapeChainError, match="cannot reshape"):
            N.NetworkSpec(
                (N.LayerSpec("reshape", shape=(2, 2, 3)),), (16,))

    def test_valid_conv_too_large(self):
        with pytest.raises(N.ShapeChainError, match="too large"):
            N.NetworkSpec(
                (N.LayerSpec("conv", features=4, kernel=5, padding="VALID"),),
                (4, 4, 1))

    def test_output_shapes_of_stock_architectures(self):
        assert N.ae1_encoder_spec().output_shape() == (4, 4, 1)
        assert N.ae1_decoder_spec().output_shape() == (32, 32, 1)
        assert N.ae2_encoder_spec(latent_dim=3).output_shape() == (3,)
        assert N.ae2_decoder_spec(latent_dim=3).output_shape() == (4, 4, 1)
        assert N.ldr_spec().output_shape() == (1,)

    def test_json_round_trip(self):
        for spec in (N.ae1_encoder_spec(), N.ae2_decoder_spec(latent_dim=5),
                     N.ldr_spec()):
            back = N.NetworkSpec.from_json(spec.to_json())
            assert back == spec


class TestParamStore:
    def test_duplicate_rejected(self):
        store = N.ParamStore()
        store.add("w", np.zeros(3))
        with pytest.raises(ValueError, match="duplicate"):
            store.add("w", np.zeros(3))

    def test_content_hash_changes_with_values(self):
        a, b = N.ParamStore(), N.ParamStore()
        a.add("w", np.zeros(3))
        b.add("w", np.ones(3))
        assert a.content_hash() != b.content_hash()
        c = N.ParamStore()
        c.add("w", np.zeros(3))
        assert a.content_hash() == c.content_hash()

    def test_copy_is_deep(self):
        store = N.ParamStore()
        store.add("w", np.zeros(3))
        dup = store.copy()
        dup["w"].data += 1.0
        assert store["w"].data.sum() == 0.0


class TestInit:
    def test_he_uniform_moments(self):
        spec = N.NetworkSpec((N.LayerSpec("dense", features=64),), (256,))
        store = N.init_params(spec, stream(0, "init"))
        w = store["l00_w"].data
        bound = np.sqrt(6.0 / 256)
        assert np.abs(w).max() <= bound
        # uniform(-b, b) has std b/sqrt(3)
        assert w.std() == pytest.approx(bound / np.sqrt(3), rel=0.05)
        assert abs(w.mean()) < 3 * w.std() / np.sqrt(w.size)
        assert store["l00_b"].data.sum() == 0.0

    def test_group_norm_init_is_identity(self):
        spec = N.NetworkSpec((N.LayerSpec("group_norm"),), (4, 4, 8))
        store = N.init_params(spec, stream(1, "init"))
        np.testing.assert_array_equal(store["l00_gn_g"].data, np.ones(8))
        np.testing.assert_array_equal(store["l00_gn_b"].data, np.zeros(8))

    def test_deterministic_given_stream(self):
        spec = N.ae1_encoder_spec()
        a = N.init_params(spec, stream(2, "init")).content_hash()
        b = N.init_params(spec, stream(2, "init")).content_hash()
        assert a == b


class TestAdam:
    def test_zero_grad_no_move(self):
        store = N.ParamStore()
        store.add("w", np.full(3, 2.0))
        N.adam_step(store, {"w": np.zeros(3)}, 0.1, 1)
        np.testing.assert_array_equal(store["w"].data, np.full(3, 2.0))

    def test_first_step_size_is_lr(self):
        # with bias correction the first update has magnitude ~lr regardless
        # of gradient scale
        store = N.ParamStore()
        store.add("w", np.zeros(2))
        N.adam_step(store, {"w": np.array([10.0, -0.001])}, 0.05, 1)
        np.testing.assert_allclose(np.abs(store["w"].data), 0.05, rtol=1e-4)

    def test_matches_reference_implementation(self):
        # independent scalar Adam trace, 20 constant-gradient steps
        lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
        g = 3.0
        x = 1.0
        m = v = 0.0
        store = N.ParamStore()
        store.add("w", np.array([1.0]))
        for t in range(1, 21):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x -= lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)
            N.adam_step(store, {"w": np.array([g])}, lr, t)
        assert store["w"].data[0] == pytest.approx(x, rel=1e-12)

    def test_quadratic_bowl_converges(self):
        store = N.ParamStore()
        store.add("w", np.array([5.0, -3.0]))
        for t in range(1, 801):
            g = 2.0 * store["w"].data
            N.adam_step(store, {"w": g}, 0.05, t)
        assert np.abs(store["w"].data).max() < 1e-3

    def test_missing_grad_skipped(self):
        store = N.ParamStore()
        store.add("w", np.ones(2))
        store.add("frozen", np.ones(2))
        N.adam_step(store, {"w": np.ones(2)}, 0.1, 1)
        np.testing.assert_array_equal(store["frozen"].data, np.ones(2))

    def test_shape_mismatch_raises(self):
        store = N.ParamStore()
        store.add("w", np.ones(2))
        with pytest.raises(T.ShapeError):
            N.adam_step(store, {"w": np.ones(3)}, 0.1, 1)


class TestForward:
    def test_stock_architectures_run(self):
        rng = stream(3, "fw")
        x = rng.uniform(0, 1, (2, 32, 32, 1))
        enc = N.build_network(N.ae1_encoder_spec(), rng, prefix="e_")
        feats = enc(T.Tensor(x))
        assert feats.shape == (2, 4, 4, 1)
        dec = N.build_network(N.ae1_decoder_spec(), rng, prefix="d_")
        out = dec(feats)
        assert out.shape == (2, 32, 32, 1)
        clf = N.build_network(N.ldr_spec(), rng, prefix="c_")
        assert clf(feats).shape == (2, 1)

    def test_res_block_with_zero_convs_is_identity(self):
        spec = N.NetworkSpec((N.LayerSpec("res_block", features=4),), (4, 4, 4))
        store = N.init_params(spec, stream(4, "fw"))
        store["l00_w1"].data[:] = 0.0
        store["l00_w2"].data[:] = 0.0
        net = N.Network(spec, store)
        x = stream(4, "x").normal(size=(2, 4, 4, 4))
        np.testing.assert_allclose(net(T.Tensor(x)).data, x, atol=1e-12)

    @pytest.mark.parametrize("seed", range(4))
    def test_fuzz_random_specs_run_and_backprop(self, seed):
        rng = stream(5, "fuzz", seed)
        widths = [int(rng.integers(2, 9)) for _ in range(2)]
        layers = [N.LayerSpec("conv", features=widths[0]),
                  N.LayerSpec("relu")]
        if rng.uniform() < 0.5:
            layers.append(N.LayerSpec("res_block", features=widths[0]))
        if rng.uniform() < 0.5:
            layers.append(N.LayerSpec("conv", features=widths[1], stride=2))
            layers.append(N.LayerSpec("conv_transpose", features=widths[1],
                                      kernel=4, stride=2))
        layers += [N.LayerSpec("flatten"), N.LayerSpec("dense", features=3)]
        spec = N.NetworkSpec(tuple(layers), (8, 8, 1))
        store = N.ParamStore()
        net = N.Network(spec, N.init_params(spec, rng, store=store))
        x = rng.normal(size=(2, 8, 8, 1))
        loss = T.mse(net(T.Tensor(x)), np.zeros((2, 3)))
        T.backward(loss)
        grads = store.grads()
        assert all(g is not None for g in grads.values())
        assert all(np.isfinite(g).all() for g in grads.values())

    def test_training_decreases_loss(self):
        rng = stream(6, "train")
        spec = N.ldr_spec()
        store = N.ParamStore()
        net = N.Network(spec, N.init_params(spec, rng, store=store))
        x = rng.uniform(0, 1, (32, 4, 4, 1))
        y = (x.mean(axis=(1, 2, 3), keepdims=False) > 0.5).astype(float)[:, None]
        first = None
        for t in range(1, 101):
            store.zero_grads()
            loss = T.reduce_mean(T.bce_with_logits(net(T.Tensor(x)), y))
            T.backward(loss)
            N.adam_step(store, store.grads(), 1e-2, t)
            if first is None:
                first = float(loss.data)
        assert float(loss.data) < 0.5 * first


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = stream(7, "ckpt")
        spec = N.ldr_spec()
        store = N.init_params(spec, rng)
        store.step_count = 17
        d = str(tmp_path / "ck")
        N.save_checkpoint(d, store, {"clf": spec}, extra={"note": 1})
        back, specs, extra = N.load_checkpoint(d)
        assert specs["clf"] == spec
        assert extra == {"note": 1}
        assert back.step_count == 17
        assert back.names() == store.names()
        for n in store.names():
            # float32 round trip quantizes but preserves structure
            np.testing.assert_allclose(back[n].data, store[n].data, atol=1e-6)

    def test_loaded_params_reproduce_forward(self, tmp_path):
        rng = stream(8, "ckpt")
        spec = N.ldr_spec()
        store = N.init_params(spec, rng)
        d = str(tmp_path / "ck")
        N.save_checkpoint(d, store, {"clf": spec})
        back, specs, _ = N.load_checkpoint(d)
        x = rng.uniform(0, 1, (3, 4, 4, 1))
        with T.no_grad():
            a = N.Network(spec, store)(T.Tensor(x)).data
            b = N.Network(specs["clf"], back)(T.Tensor(x)).data
        np.testing.assert_allclose(a, b, atol=1e-5)

    def test_corrupt_blob_detected(self, tmp_path):
        rng = stream(9, "ckpt")
        spec = N.NetworkSpec((N.LayerSpec("dense", features=2),), (3,))
        store = N.init_params(spec, rng)
        d = str(tmp_path / "ck")
        N.save_checkpoint(d, store, {})
        with open(f"{d}/params.f32", "ab") as f:
            f.write(b"\x00" * 4)
        with pytest.raises(IOError, match="does not match"):
            N.load_checkpoint(d)
