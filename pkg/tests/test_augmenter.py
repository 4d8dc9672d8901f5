import numpy as np
import pytest

from bilevel_aug import tensor as T
from bilevel_aug.augmenter import AugmenterNet, NoiseSource, ParamBounds, augment_batch
from bilevel_aug.tensor import Tensor
from bilevel_aug.verify import finite_diff_gradients, max_relative_error


def tiny_net(scenario, seed=0, dtype=np.float64):
    return AugmenterNet(scenario, noise_dim=6, hidden=(5, 4, 3), seed=seed, dtype=dtype)


class TestSampleParams:
    def test_zero_raw_output_is_range_center(self):
        net = AugmenterNet("color+affine", seed=0)
        params = net.sample_params(np.zeros(100, dtype=np.float32))
        # final layer starts at zero, so raw outputs are zero regardless of noise
        assert params.color.cf.item() == pytest.approx(1.0)
        assert params.color.bs.item() == pytest.approx(0.0)
        assert params.color.sf.item() == pytest.approx(0.5)  # range center, not identity
        assert params.color.hs.item() == pytest.approx(0.0)
        assert np.allclose(params.affine.delta.data, 0.0)

    def test_saturated_raw_outputs_pin_range_edges(self):
        net = tiny_net("color")
        # force huge final-layer bias so tanh saturates
        net.params[-1].data[:] = 50.0
        params = net.sample_params(np.zeros(6))
        assert params.color.cf.item() == pytest.approx(2.0)
        assert params.color.bs.item() == pytest.approx(1.0)
        assert params.color.sf.item() == pytest.approx(1.0)
        assert params.color.hs.item() == pytest.approx(np.pi)
        net.params[-1].data[:] = -50.0
        params = net.sample_params(np.zeros(6))
        assert params.color.cf.item() == pytest.approx(0.0)
        assert params.color.bs.item() == pytest.approx(-1.0)
        assert params.color.sf.item() == pytest.approx(0.0)

    def test_same_noise_same_params(self):
        net = AugmenterNet("color+affine", seed=3)
        for p in net.params:
            p.data = p.data + 0.01  # nonzero output layer
        noise = np.random.default_rng(0).standard_normal(100).astype(np.float32)
        a = net.sample_params(noise.copy())
        b = net.sample_params(noise.copy())
        assert np.array_equal(a.color.cf.data, b.color.cf.data)
        assert np.array_equal(a.affine.delta.data, b.affine.delta.data)

    def test_scenario_output_widths(self):
        assert AugmenterNet("color").n_out == 4
        assert AugmenterNet("affine").n_out == 6
        assert AugmenterNet("color+affine").n_out == 10

    def test_unknown_scenario_rejected(self):
        with pytest.raises(ValueError):
            AugmenterNet("sepia")

    def test_params_always_inside_ranges(self):
        # 20 random nets x 500 noise draws = 1e4 draws
        bounds = ParamBounds()
        bvec = bounds.vector(np.float64)
        for seed in range(20):
            net = tiny_net("color+affine", seed=seed)
            rng = np.random.default_rng(100 + seed)
            for p in net.params:
                p.data = rng.standard_normal(p.shape) * 2.0
            noise = rng.standard_normal((500, 6))
            params = net.sample_params(Tensor(noise))
            cf, bs = params.color.cf.data, params.color.bs.data
            sf, hs = params.color.sf.data, params.color.hs.data
            assert cf.min() >= 0 and cf.max() <= 2
            assert bs.min() >= -1 and bs.max() <= 1
            assert sf.min() >= 0 and sf.max() <= 1
            assert hs.min() >= -np.pi and hs.max() <= np.pi
            delta = params.affine.delta.data.reshape(-1, 6)
            assert (np.abs(delta) <= bvec[None, :] + 1e-12).all()


class TestAugmentBatch:
    def test_zero_net_output_is_identity_except_saturation(self):
        rng = np.random.default_rng(1)
        net = AugmenterNet("color+affine", noise_dim=8, hidden=(6, 5, 4), dtype=np.float64)
        imgs = rng.uniform(0.1, 0.9, size=(1, 3, 8, 8))
        out, params = augment_batch(net, Tensor(imgs), NoiseSource(0, dim=8))
        assert params.color.sf.data[0] == pytest.approx(0.5)
        # reference: apply only the sf=0.5 stage
        from bilevel_aug import transforms as TF

        hsv = TF.rgb_to_hsv(Tensor(imgs))
        ref = TF.hsv_to_rgb(TF.apply_saturation(hsv, Tensor(np.array([0.5]))))
        assert np.max(np.abs(out.data - ref.data)) < 1e-6

    def test_per_image_noise_differs(self):
        net = tiny_net("color+affine", seed=2)
        rng = np.random.default_rng(5)
        for p in net.params:
            p.data = rng.standard_normal(p.shape)
        imgs = np.tile(rng.uniform(0.2, 0.8, size=(1, 3, 8, 8)), (2, 1, 1, 1))
        out, params = augment_batch(net, Tensor(imgs), NoiseSource(7, dim=6))
        assert not np.allclose(params.color.cf.data[0], params.color.cf.data[1])
        assert not np.allclose(out.data[0], out.data[1])

    def test_deterministic_given_seed_and_weights(self):
        def run():
            net = tiny_net("color", seed=4)
            rng = np.random.default_rng(9)
            for p in net.params:
                p.data = rng.standard_normal(p.shape)
            imgs = np.random.default_rng(11).uniform(0.1, 0.9, size=(3, 3, 8, 8))
            out, _ = augment_batch(net, Tensor(imgs), NoiseSource(13, dim=6))
            return out.data

        assert np.array_equal(run(), run())

    def test_theta_gradient_matches_fd(self):
        rng = np.random.default_rng(21)
        net = tiny_net("color+affine", seed=6, dtype=np.float64)
        for p in net.params:
            p.data = rng.standard_normal(p.shape) * 0.3
        imgs = rng.uniform(0.25, 0.75, size=(2, 3, 5, 5))
        noise = rng.standard_normal((2, 6))
        probe = rng.standard_normal((2, 3, 5, 5))

        def loss_given(arrays):
            for p, a in zip(net.params, arrays):
                p.data = a
            params = net.sample_params(Tensor(noise))
            from bilevel_aug.transforms import apply_transform

            out = apply_transform(Tensor(imgs), params)
            return float(np.sum(out.data * probe))

        base = [p.data.copy() for p in net.params]
        with T.Tape() as tape:
            for p in net.params:
                tape.watch(p)
            params = net.sample_params(Tensor(noise))
            from bilevel_aug.transforms import apply_transform

            out = apply_transform(Tensor(imgs), params)
            loss = T.tsum(T.mul(out, Tensor(probe)))
            grads = T.grad(loss, net.params)
        fd = finite_diff_gradients(loss_given, [b.copy() for b in base])
        for p, a in zip(net.params, base):
            p.data = a
        err = max(max_relative_error(g.data, f) for g, f in zip(grads, fd))
        assert err < 1e-4, f"rel err {err:.2e}"

    def test_theta_gradient_generically_nonzero(self):
        rng = np.random.default_rng(31)
        net = tiny_net("color", seed=8, dtype=np.float64)
        for p in net.params:
            p.data = rng.standard_normal(p.shape) * 0.5
        imgs = rng.uniform(0.2, 0.8, size=(2, 3, 6, 6))
        with T.Tape() as tape:
            for p in net.params:
                tape.watch(p)
            out, _ = augment_batch(net, Tensor(imgs), NoiseSource(3, dim=6))
            loss = T.tmean(out)
            grads = T.grad(loss, net.params)
        total = sum(float(np.abs(g.data).sum()) for g in grads)
        assert total > 0

    def test_empty_batch_rejected(self):
        net = tiny_net("color")
        with pytest.raises(ValueError):
            augment_batch(net, Tensor(np.zeros((0, 3, 4, 4))), NoiseSource(0, dim=6))


class TestCheckpoint:
    def test_save_load_round_trip(self, tmp_path):
        net = AugmenterNet("color+affine", noise_dim=12, hidden=(7, 6, 5), seed=5)
        rng = np.random.default_rng(17)
        for p in net.params:
            p.data = rng.standard_normal(p.shape).astype(np.float32)
        path = tmp_path / "aug.baug"
        net.save(path)
        loaded = AugmenterNet.load(path)
        assert loaded.scenario == "color+affine"
        for a, b in zip(net.params, loaded.params):
            assert np.array_equal(a.data, b.data)

    def test_noise_source_stream_deterministic(self):
        a = NoiseSource(42).sample(3)
        b = NoiseSource(42).sample(3)
        assert np.array_equal(a, b)
