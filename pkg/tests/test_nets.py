import numpy as np
import pytest

from scoredrive import backend, nets


def naive_forward(spec, params, x):
    """Independent straightforward re-implementation of the forward pass."""
    dims = spec.dims
    h = np.asarray(x, dtype=np.float64)
    for i, (ws, bs) in enumerate(nets.layer_slices(spec)):
        w = params[ws].reshape(dims[i], dims[i + 1])
        z = h @ w + params[bs]
        if i < len(dims) - 2:
            h = np.tanh(z)
        elif spec.output_activation == "tanh":
            h = spec.output_scale * np.tanh(z)
        else:
            h = z
    return h


def random_spec(rng):
    n_hidden = int(rng.integers(1, 3))
    return nets.NetworkSpec(
        input_dim=int(rng.integers(2, 7)),
        hidden=tuple(int(rng.integers(3, 10)) for _ in range(n_hidden)),
        output_dim=int(rng.integers(1, 5)),
        output_activation=str(rng.choice(["identity", "tanh"])),
        output_scale=float(rng.uniform(0.5, 3.0)),
    )


def fd_grads(spec, params, x, upstream, h=1e-5):
    def scalar(p, xx):
        return float(np.dot(upstream, naive_forward(spec, p, xx)))

    gp = np.zeros_like(params)
    for i in range(len(params)):
        p = params.copy()
        p[i] += h
        f1 = scalar(p, x)
        p[i] -= 2 * h
        f0 = scalar(p, x)
        gp[i] = (f1 - f0) / (2 * h)
    gx = np.zeros_like(x)
    for i in range(len(x)):
        xx = x.copy()
        xx[i] += h
        f1 = scalar(params, xx)
        xx[i] -= 2 * h
        f0 = scalar(params, xx)
        gx[i] = (f1 - f0) / (2 * h)
    return gp, gx


def test_zero_output_layer_gives_zero_map(rng):
    spec = nets.NetworkSpec(input_dim=4, hidden=(8,), output_dim=3)
    params = nets.init_params(spec, rng, zero_output_layer=True)
    for _ in range(5):
        assert np.all(nets.forward(spec, params, rng.normal(size=4)) == 0.0)


def test_identity_linear_layer():
    spec = nets.NetworkSpec(input_dim=3, hidden=(), output_dim=3)
    params = np.zeros(spec.n_params)
    ws, _ = nets.layer_slices(spec)[0]
    params[ws] = np.eye(3).ravel()
    x = np.array([0.3, -1.2, 2.0])
    assert np.allclose(nets.forward(spec, params, x), x)


def test_forward_matches_duplicate_evaluation(rng):
    for _ in range(20):
        spec = random_spec(rng)
        params = nets.init_params(spec, rng)
        x = rng.normal(size=spec.input_dim)
        got = nets.forward(spec, params, x)
        want = naive_forward(spec, params, x)
        assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def test_forward_rejects_bad_input(rng):
    spec = nets.NetworkSpec(input_dim=3, hidden=(4,), output_dim=1)
    params = nets.init_params(spec, rng)
    with pytest.raises(ValueError):
        nets.forward(spec, params, np.zeros(4))
    with pytest.raises(ValueError):
        nets.forward(spec, params, np.array([0.0, np.nan, 1.0]))


def test_linear_layer_gradients(rng):
    # y = Wx + b: grad_input = W^T u, grad_W = u x^T
    spec = nets.NetworkSpec(input_dim=3, hidden=(), output_dim=2)
    params = nets.init_params(spec, rng)
    x = rng.normal(size=3)
    u = rng.normal(size=2)
    ws, bs = nets.layer_slices(spec)[0]
    w = params[ws].reshape(3, 2)
    assert np.allclose(nets.grad_input(spec, params, x, u), w @ u)
    gp = nets.grad_params(spec, params, x, u)
    assert np.allclose(gp[ws].reshape(3, 2), np.outer(x, u))
    assert np.allclose(gp[bs], u)


def test_constant_network_zero_gradients(rng):
    spec = nets.NetworkSpec(input_dim=3, hidden=(5,), output_dim=2)
    params = np.zeros(spec.n_params)
    bs_last = nets.layer_slices(spec)[-1][1]
    params[bs_last] = 1.0
    x = rng.normal(size=3)
    u = rng.normal(size=2)
    assert np.allclose(nets.grad_input(spec, params, x, u), 0.0)
    gp = nets.grad_params(spec, params, x, u)
    ws_first, bs_first = nets.layer_slices(spec)[0]
    assert np.allclose(gp[ws_first], 0.0)
    assert np.allclose(gp[bs_first], 0.0)


def test_gradients_match_finite_differences(rng):
    # the central gradient-check property over random draws
    worst = 0.0
    for _ in range(25):
        spec = random_spec(rng)
        params = nets.init_params(spec, rng)
        x = rng.normal(size=spec.input_dim)
        u = rng.normal(size=spec.output_dim)
        gp = nets.grad_params(spec, params, x, u)
        gx = nets.grad_input(spec, params, x, u)
        fp, fx = fd_grads(spec, params, x, u)
        scale_p = np.maximum(np.abs(fp), 1e-6)
        scale_x = np.maximum(np.abs(fx), 1e-6)
        worst = max(
            worst,
            float(np.max(np.abs(gp - fp) / scale_p)),
            float(np.max(np.abs(gx - fx) / scale_x)),
        )
    assert worst <= 1e-4


def test_forward_and_grads_deterministic(rng):
    spec = random_spec(rng)
    params = nets.init_params(spec, rng)
    x = rng.normal(size=(6, spec.input_dim))
    u = rng.normal(size=(6, spec.output_dim))
    a = nets.value_and_grads_batch(spec, params, x, u)
    b = nets.value_and_grads_batch(spec, params, x, u)
    for lhs, rhs in zip(a, b):
        assert np.array_equal(lhs, rhs)


def test_batched_grads_sum_single_sample_grads(rng):
    spec = random_spec(rng)
    params = nets.init_params(spec, rng)
    x = rng.normal(size=(4, spec.input_dim))
    u = rng.normal(size=(4, spec.output_dim))
    _, grad, grad_x = nets.value_and_grads_batch(spec, params, x, u)
    want = sum(nets.grad_params(spec, params, x[i], u[i]) for i in range(4))
    assert np.allclose(grad, want, rtol=1e-10, atol=1e-12)
    for i in range(4):
        assert np.allclose(grad_x[i], nets.grad_input(spec, params, x[i], u[i]))


def test_init_variance_scaling(rng):
    spec = nets.NetworkSpec(input_dim=100, hidden=(200,), output_dim=50)
    params = nets.init_params(spec, rng)
    (ws0, bs0), (ws1, _) = nets.layer_slices(spec)
    assert np.all(params[bs0] == 0.0)
    assert abs(np.var(params[ws0]) - 1.0 / 100) < 0.002
    assert abs(np.var(params[ws1]) - 1.0 / 200) < 0.001


def test_adam_zero_gradient_no_change(rng):
    p = rng.normal(size=5)
    st = nets.AdamState.for_params(p, 0.1)
    p2 = nets.adam_step(st, p, np.zeros(5))
    assert np.array_equal(p, p2)


def test_adam_minimizes_quadratic():
    p = np.array([0.0])
    st = nets.AdamState.for_params(p, 0.1)
    for _ in range(500):
        p = nets.adam_step(st, p, 2.0 * (p - 3.0))
    assert abs(p[0] - 3.0) < 1e-3


def test_adam_maximize_mirrors_minimize():
    p = np.array([0.0])
    st = nets.AdamState.for_params(p, 0.1)
    for _ in range(500):
        p = nets.adam_step(st, p, -2.0 * (p - 3.0), direction="maximize")
    assert abs(p[0] - 3.0) < 1e-3


def test_adam_skips_nonfinite_gradient():
    p = np.array([1.0, 2.0])
    st = nets.AdamState.for_params(p, 0.1)
    p2 = nets.adam_step(st, p, np.array([np.nan, 0.0]))
    assert np.array_equal(p, p2)
    assert st.skipped == 1
    assert st.step == 0


def test_checkpoint_round_trip_bit_exact(tmp_path, rng):
    spec = random_spec(rng)
    params = nets.init_params(spec, rng)
    opt = nets.AdamState.for_params(params, 3e-4)
    opt.m[:] = rng.normal(size=len(params))
    opt.v[:] = rng.uniform(size=len(params))
    opt.step = 17
    extra = {"role": "test", "numbers": [1, 2, 3]}
    path = tmp_path / "net.ckpt"
    nets.save_checkpoint(path, spec, params, extra=extra, opt_state=opt)
    spec2, params2, extra2, opt2 = nets.load_checkpoint(path)
    assert spec2 == spec
    assert params2.tobytes() == params.tobytes()
    assert extra2 == extra
    assert opt2.step == 17 and opt2.lr == 3e-4
    assert opt2.m.tobytes() == opt.m.tobytes()
    assert opt2.v.tobytes() == opt.v.tobytes()
    # saving again reproduces identical bytes
    path2 = tmp_path / "net2.ckpt"
    nets.save_checkpoint(path2, spec2, params2, extra=extra2, opt_state=opt2)
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_rejects_tampered_magic(tmp_path, rng):
    spec = random_spec(rng)
    path = tmp_path / "net.ckpt"
    nets.save_checkpoint(path, spec, nets.init_params(spec, rng))
    blob = bytearray(path.read_bytes())
    blob[0] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(nets.CheckpointError, match="magic"):
        nets.load_checkpoint(path)


def test_checkpoint_rejects_truncation(tmp_path, rng):
    spec = random_spec(rng)
    path = tmp_path / "net.ckpt"
    nets.save_checkpoint(path, spec, nets.init_params(spec, rng))
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) - 9])
    with pytest.raises(nets.CheckpointError, match="truncated"):
        nets.load_checkpoint(path)


@pytest.mark.skipif(not backend.HAS_NUMBA, reason="numba unavailable")
def test_backend_flavours_agree(rng):
    for _ in range(10):
        spec = random_spec(rng)
        params = nets.init_params(spec, rng)
        x = np.ascontiguousarray(rng.normal(size=(5, spec.input_dim)))
        u = np.ascontiguousarray(rng.normal(size=(5, spec.output_dim)))
        dims = spec.dims
        acts_a = np.empty((5, backend.n_units(dims)))
        acts_b = np.empty((5, backend.n_units(dims)))
        out_a = backend.mlp_forward_acts_np(dims, params, x, spec.out_mode, spec.output_scale, acts_a)
        out_b = backend.mlp_forward_acts_nb(dims, params, x, spec.out_mode, spec.output_scale, acts_b)
        assert np.allclose(out_a, out_b, rtol=1e-12, atol=1e-12)
        ga = backend.mlp_vjp_from_acts_np(dims, params, acts_a, u, spec.out_mode, spec.output_scale)
        gb = backend.mlp_vjp_from_acts_nb(dims, params, acts_b, u, spec.out_mode, spec.output_scale)
        assert np.allclose(ga[0], gb[0], rtol=1e-10, atol=1e-12)
        assert np.allclose(ga[1], gb[1], rtol=1e-10, atol=1e-12)


@pytest.mark.skipif(not backend.HAS_NUMBA, reason="numba unavailable")
def test_bicycle_kernel_flavours_agree(rng):
    for _ in range(10):
        h = int(rng.integers(1, 20))
        accels = rng.uniform(-4, 4, size=h)
        steers = rng.uniform(-0.5, 0.5, size=h)
        args = (0.5, -1.0, 0.3, 8.0, accels, steers, 0.5, 3.0, 15.0)
        a = backend.bicycle_rollout_np(*args)
        b = backend.bicycle_rollout_nb(*args)
        assert np.allclose(a, b, rtol=1e-12, atol=1e-14)
