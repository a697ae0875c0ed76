import numpy as np
import pytest

from degrade_mt import sr_model
from degrade_mt.degrade import bicubic_resize_array
from degrade_mt.img import ImagePlane
from degrade_mt.sr_model import (
    ModelError, OptimState, SRNet, adam_step, batch_loss, checkpoint_bytes, forward,
    init_net, init_optim, load_bundle, load_checkpoint, loss_and_grad,
    loss_and_grad_arrays, param_count, save_bundle, save_checkpoint, upsample_batch,
)


def make_batch(rng, count=2, size=16, scale=2):
    hr = rng.uniform(0, 1, (count, 1, size, size))
    lr = np.clip(bicubic_resize_array(hr, scale, "down"), 0, 1)
    return [(ImagePlane(hr[i]), ImagePlane(lr[i])) for i in range(count)]


def fd_oracle(net, batch, indices, step):
    """Independent central-difference gradient: float64 evaluation at the
    net's quantized parameter values, realized-step denominator."""
    hr = np.stack([p.data for p, _ in batch])
    lr = np.stack([q.data for _, q in batch])
    up = upsample_batch(net, lr)
    base64 = net.params.astype(np.float64)
    out = []
    for idx in indices:
        plus = net.params.copy()
        minus = net.params.copy()
        plus[idx] += net.dtype.type(step)
        minus[idx] -= net.dtype.type(step)
        realized = float(plus[idx]) - float(minus[idx])
        probe = SRNet(net.scale, net.channels, net.hidden, base64.copy(), net.seed)
        probe.params[idx] = float(plus[idx])
        lp = batch_loss(probe, hr, up)
        probe.params[idx] = float(minus[idx])
        lm = batch_loss(probe, hr, up)
        out.append((lp - lm) / realized)
    return np.array(out)


class TestArchitecture:
    def test_param_count_formula(self):
        # conv1 16*1*9+16, conv2 16*16*9+16, conv3 1*16*9+1
        assert param_count(1, 16) == 160 + 2320 + 145
        assert param_count(3, 8) == (8 * 3 * 9 + 8) + (8 * 8 * 9 + 8) + (3 * 8 * 9 + 3)

    def test_wrong_vector_length_rejected(self):
        with pytest.raises(ModelError):
            SRNet(2, 1, 16, np.zeros(10, np.float32), 0)

    def test_init_deterministic(self):
        a = init_net(2, seed=5)
        b = init_net(2, seed=5)
        assert np.array_equal(a.params, b.params)
        assert not np.array_equal(a.params, init_net(2, seed=6).params)

    def test_biases_start_zero(self):
        net = init_net(2, seed=0)
        views = sr_model._param_views(net.params, 1, 16)
        for bias in views[1::2]:
            assert np.all(bias == 0)


class TestForward:
    def test_zero_net_is_bicubic(self, rng):
        net = SRNet(2, 1, 16, np.zeros(param_count(1, 16), np.float32), 0)
        lr_img = ImagePlane(rng.uniform(0, 1, (24, 24)))
        out = forward(net, lr_img)
        expected = np.clip(bicubic_resize_array(lr_img.data, 2, "up"), 0, 1)
        assert np.abs(out.data - expected).max() < 1e-6

    def test_output_shape(self, rng):
        net = init_net(3, seed=0)
        out = forward(net, ImagePlane(rng.uniform(0, 1, (10, 14))))
        assert out.shape == (1, 30, 42)

    def test_deterministic(self, rng):
        net = init_net(2, seed=1)
        lr_img = ImagePlane(rng.uniform(0, 1, (16, 16)))
        assert forward(net, lr_img) == forward(net, lr_img)

    def test_rejects_small_input(self):
        net = init_net(2, seed=0)
        with pytest.raises(ModelError):
            forward(net, ImagePlane.full(6, 16, 0.5))

    def test_rejects_channel_mismatch(self):
        net = init_net(2, channels=1, seed=0)
        with pytest.raises(ModelError):
            forward(net, ImagePlane.full(16, 16, 0.5, channels=3))

    def test_output_clamped(self, rng):
        net = init_net(2, seed=2)  # random net can overshoot before the clamp
        out = forward(net, ImagePlane(rng.uniform(0, 1, (16, 16))))
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0


class TestLossAndGrad:
    def test_perfect_prediction_zero_loss_zero_grad(self, rng):
        net = SRNet(2, 1, 16, np.zeros(param_count(1, 16), np.float32), 0)
        lr = rng.uniform(0.2, 0.8, (2, 1, 8, 8))
        up = upsample_batch(net, lr)
        loss, grad = loss_and_grad_arrays(net, up.astype(np.float64), up)
        assert loss == 0.0
        assert np.all(grad == 0.0)

    def test_gradcheck_float32(self, rng):
        net = init_net(2, seed=3, dtype=np.float32)
        batch = make_batch(rng)
        _, grad = loss_and_grad(net, batch)
        idx = np.random.default_rng(0).choice(net.params.size, 20, replace=False)
        fd = fd_oracle(net, batch, idx, step=1e-3)
        err = np.abs(grad[idx] - fd).max() / max(np.abs(grad).max(), 1e-12)
        assert err < 1e-4

    def test_gradcheck_float64(self, rng):
        net = init_net(2, seed=3, dtype=np.float64)
        batch = make_batch(rng)
        _, grad = loss_and_grad(net, batch)
        idx = np.random.default_rng(0).choice(net.params.size, 20, replace=False)
        fd = fd_oracle(net, batch, idx, step=1e-5)
        err = np.abs(grad[idx] - fd).max() / max(np.abs(grad).max(), 1e-12)
        assert err < 1e-7

    def test_duplication_invariance(self, rng):
        net = init_net(2, seed=4, dtype=np.float64)
        batch = make_batch(rng, count=3)
        loss_a, grad_a = loss_and_grad(net, batch)
        loss_b, grad_b = loss_and_grad(net, batch + batch)
        assert loss_a == loss_b  # fsum of per-sample means: exactly invariant
        assert np.allclose(grad_a, grad_b, rtol=1e-12, atol=1e-18)

    def test_empty_batch(self):
        net = init_net(2, seed=0)
        with pytest.raises(ModelError):
            loss_and_grad(net, [])

    def test_shape_mismatch(self, rng):
        net = init_net(2, seed=0)
        hr = ImagePlane(rng.uniform(0, 1, (16, 16)))
        lr = ImagePlane(rng.uniform(0, 1, (16, 16)))  # not hr/scale
        with pytest.raises(ModelError):
            loss_and_grad(net, [(hr, lr)])

    def test_chunking_independent_loss(self, rng):
        import degrade_mt.sr_model as sm

        net = init_net(2, seed=5)
        batch = make_batch(rng, count=6, size=24)
        hr = np.stack([p.data for p, _ in batch])
        up = upsample_batch(net, np.stack([q.data for _, q in batch]))
        saved = sm._CHUNK_COL_BYTES
        try:
            sm._CHUNK_COL_BYTES = 10  # force chunk size 1
            l1, g1 = loss_and_grad_arrays(net, hr, up)
            sm._CHUNK_COL_BYTES = 1 << 30  # single chunk
            l2, g2 = loss_and_grad_arrays(net, hr, up)
        finally:
            sm._CHUNK_COL_BYTES = saved
        assert l1 == l2
        assert np.allclose(g1, g2, rtol=1e-4, atol=1e-5)


class TestAdam:
    def test_zero_gradient_no_change(self):
        net = init_net(2, seed=0)
        opt = init_optim(net, 1e-3)
        before = net.params.copy()
        adam_step(net, opt, np.zeros(net.params.size))
        assert np.array_equal(net.params, before)

    def test_quadratic_probe_decreases(self):
        # L(p) = sum(p^2) on a fake 'net' vector
        params = np.full(param_count(1, 16), 0.5, dtype=np.float64)
        net = SRNet(2, 1, 16, params, 0)
        opt = init_optim(net, 1e-2)
        loss_before = float(np.sum(net.params**2))
        adam_step(net, opt, 2.0 * net.params)
        assert float(np.sum(net.params**2)) < loss_before

    def test_trajectory_deterministic(self, rng):
        batch = make_batch(rng)
        trajectories = []
        for _ in range(2):
            net = init_net(2, seed=7)
            opt = init_optim(net, 2e-3)
            for _ in range(5):
                _, grad = loss_and_grad(net, batch)
                adam_step(net, opt, grad)
            trajectories.append(net.params.copy())
        assert np.array_equal(trajectories[0], trajectories[1])

    def test_bad_shape(self):
        net = init_net(2, seed=0)
        opt = init_optim(net, 1e-3)
        with pytest.raises(ModelError):
            adam_step(net, opt, np.zeros(3))

    def test_moments_shaped_like_params(self):
        net = init_net(2, seed=0)
        opt = init_optim(net, 1e-3)
        assert opt.m.shape == net.params.shape
        assert opt.v.shape == net.params.shape
        assert isinstance(opt, OptimState)


def test_single_pair_convergence(hr_pool):
    # a natural textured pair: the bicubic residual is learnable, unlike
    # pure-noise HR content whose detail the downsample destroys
    from degrade_mt.train import TrainConfig

    net = init_net(2, seed=0)
    opt = init_optim(net, TrainConfig().learning_rate)
    hr = hr_pool[1].data[None, :, :24, :24]
    lr = np.clip(bicubic_resize_array(hr, 2, "down"), 0, 1)
    up = upsample_batch(net, lr)
    loss0, _ = loss_and_grad_arrays(net, hr, up)
    for _ in range(500):
        _, grad = loss_and_grad_arrays(net, hr, up)
        adam_step(net, opt, grad)
    loss_final, _ = loss_and_grad_arrays(net, hr, up)
    assert loss_final <= 0.1 * loss0


class TestCheckpoints:
    def test_round_trip(self, tmp_path):
        net = init_net(2, seed=9)
        path = tmp_path / "net.ckpt"
        save_checkpoint(path, net)
        back = load_checkpoint(path)
        assert back.scale == 2 and back.channels == 1 and back.hidden == 16
        assert back.seed == 9
        assert np.array_equal(back.params, net.params)

    def test_bytes_deterministic(self):
        net = init_net(2, seed=9)
        assert checkpoint_bytes(net) == checkpoint_bytes(net)

    def test_header_versioned(self, tmp_path):
        raw = checkpoint_bytes(init_net(2, seed=0))
        assert raw.startswith(b"SRNETCKPT 1\n")
        assert b'"format": "srnet-checkpoint"' in raw[:400]
        assert b'"scale": 2' in raw[:400]

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(ModelError):
            load_checkpoint(path)

    def test_truncated_payload(self, tmp_path):
        raw = checkpoint_bytes(init_net(2, seed=0))
        path = tmp_path / "trunc.ckpt"
        path.write_bytes(raw[:-40])
        with pytest.raises(ModelError):
            load_checkpoint(path)

    def test_bundle_round_trip(self, tmp_path):
        nets = {f"task{i}": init_net(2, seed=i) for i in range(3)}
        path = tmp_path / "refs.ckpt"
        save_bundle(path, nets)
        back = load_bundle(path)
        assert list(back) == list(nets)
        for name in nets:
            assert np.array_equal(back[name].params, nets[name].params)

    def test_float64_net_serializes_as_f32(self, tmp_path):
        net = init_net(2, seed=1, dtype=np.float64)
        path = tmp_path / "f64.ckpt"
        save_checkpoint(path, net)
        back = load_checkpoint(path, dtype=np.float64)
        assert np.array_equal(back.params, net.params.astype(np.float32).astype(np.float64))
