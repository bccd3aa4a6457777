import numpy as np
import pytest

from diffdens import nn
from diffdens.errors import InvalidArgumentError, SchemaError
from diffdens.rng import make_rng
from diffdens.sde import DiffusionProcess


def randomized_params(dim=3, seed=0, **kw) -> nn.MlpParams:
    """init_params plus a non-zero output layer, so gradients flow."""
    p = nn.init_params(dim, seed, **kw)
    rng = make_rng(seed, "test-out-layer")
    w, b = p.layers[-1]
    w[...] = 0.3 * rng.standard_normal(w.shape)
    b[...] = 0.1 * rng.standard_normal(b.shape)
    return p


class TestForward:
    def test_zero_weights_collapse_to_bias(self):
        p = nn.init_params(4, seed=1)
        for w, b in p.layers:
            w[...] = 0.0
            b[...] = 0.0
        p.layers[-1][1][...] = np.array([1.0, -2.0, 0.5, 0.0])
        out = nn.forward(p, np.array([3.0, 1.0, -1.0, 2.0]), 0.5)
        np.testing.assert_array_equal(out, [1.0, -2.0, 0.5, 0.0])

    def test_fresh_params_output_zero(self):
        p = nn.init_params(2, seed=3)
        np.testing.assert_array_equal(nn.forward(p, np.ones(2), 0.2), np.zeros(2))

    def test_batch_matches_singles(self):
        p = randomized_params(3, seed=5)
        rng = np.random.default_rng(0)
        X = rng.standard_normal((8, 3))
        s = rng.uniform(0.1, 1.0, 8)
        batch, _ = nn.forward_batch(p, X, s)
        for i in range(8):
            single = nn.forward(p, X[i], s[i])
            np.testing.assert_allclose(batch[i], single, rtol=1e-12)

    def test_last_layer_linearity(self):
        p = randomized_params(2, seed=7)
        x, s = np.array([0.4, -1.1]), 0.3
        bias = p.layers[-1][1].copy()
        base = nn.forward(p, x, s)
        p.layers[-1][0][...] *= 2.0
        doubled = nn.forward(p, x, s)
        np.testing.assert_allclose(doubled - bias, 2.0 * (base - bias), rtol=1e-12)

    def test_shape_mismatch(self):
        p = nn.init_params(3, seed=0)
        with pytest.raises(InvalidArgumentError):
            nn.forward(p, np.zeros(4), 0.5)

    def test_bounded_inputs_stay_finite(self):
        p = randomized_params(3, seed=11)
        rng = np.random.default_rng(1)
        X = rng.uniform(-100, 100, size=(64, 3))
        s = rng.uniform(1e-5, 1.0, 64)
        out, _ = nn.forward_batch(p, X, s)
        assert np.all(np.isfinite(out))


class TestGradParams:
    def test_finite_differences(self):
        p = randomized_params(3, seed=2)
        x = np.array([0.3, -1.2, 0.8])
        s, up = 0.37, np.array([0.5, -1.0, 2.0])
        grads = nn.grad_params(p, x, s, up)
        rng = np.random.default_rng(0)
        h = 1e-6
        for _ in range(20):
            li = int(rng.integers(len(p.layers)))
            wi = int(rng.integers(2))
            arr = p.layers[li][wi]
            idx = tuple(int(rng.integers(d)) for d in arr.shape)
            arr[idx] += h
            fp = float(up @ nn.forward(p, x, s))
            arr[idx] -= 2 * h
            fm = float(up @ nn.forward(p, x, s))
            arr[idx] += h
            fd = (fp - fm) / (2 * h)
            an = grads[li][wi][idx]
            assert an == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_zero_upstream(self):
        p = randomized_params(2, seed=4)
        grads = nn.grad_params(p, np.ones(2), 0.5, np.zeros(2))
        for gw, gb in grads:
            assert not np.any(gw)
            assert not np.any(gb)

    def test_batch_gradient_is_sum_of_rows(self):
        p = randomized_params(2, seed=6)
        rng = np.random.default_rng(3)
        X = rng.standard_normal((5, 2))
        s = rng.uniform(0.1, 1.0, 5)
        U = rng.standard_normal((5, 2))
        batch = nn.grad_params(p, X, s, U)
        acc = [[np.zeros_like(w), np.zeros_like(b)] for w, b in p.layers]
        for i in range(5):
            gi = nn.grad_params(p, X[i], s[i], U[i])
            for k in range(len(acc)):
                acc[k][0] += gi[k][0]
                acc[k][1] += gi[k][1]
        for k in range(len(acc)):
            np.testing.assert_allclose(batch[k][0], acc[k][0], rtol=1e-12, atol=1e-14)
            np.testing.assert_allclose(batch[k][1], acc[k][1], rtol=1e-12, atol=1e-14)

    def test_nonfinite_upstream_rejected(self):
        p = randomized_params(2, seed=8)
        with pytest.raises(InvalidArgumentError):
            nn.grad_params(p, np.ones(2), 0.5, np.array([np.nan, 0.0]))


class TestGradInput:
    def test_finite_differences(self):
        p = randomized_params(3, seed=9)
        rng = np.random.default_rng(2)
        for _ in range(10):
            x = rng.standard_normal(3)
            s = rng.uniform(0.1, 1.0)
            eps = rng.standard_normal(3)
            g = nn.grad_input_dot(p, x, s, eps)
            h = 1e-6
            for i in range(3):
                xp, xm = x.copy(), x.copy()
                xp[i] += h
                xm[i] -= h
                fd = (eps @ nn.forward(p, xp, s) - eps @ nn.forward(p, xm, s)) / (2 * h)
                assert g[i] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_zero_eps(self):
        p = randomized_params(2, seed=10)
        np.testing.assert_array_equal(
            nn.grad_input_dot(p, np.ones(2), 0.5, np.zeros(2)), np.zeros(2)
        )

    def test_linearity_in_eps(self):
        p = randomized_params(2, seed=12)
        x, s = np.array([0.2, 0.9]), 0.6
        e1, e2 = np.array([1.0, -0.5]), np.array([0.3, 2.0])
        lhs = nn.grad_input_dot(p, x, s, e1 + e2)
        rhs = nn.grad_input_dot(p, x, s, e1) + nn.grad_input_dot(p, x, s, e2)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12)

    def test_gate_tolerance(self):
        # module gate: step 1e-4, relative tolerance 1e-4
        p = randomized_params(4, seed=13)
        rng = np.random.default_rng(5)
        x = rng.standard_normal(4)
        s = 0.42
        eps = rng.standard_normal(4)
        g = nn.grad_input_dot(p, x, s, eps)
        h = 1e-4
        for i in range(4):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd = (eps @ nn.forward(p, xp, s) - eps @ nn.forward(p, xm, s)) / (2 * h)
            assert g[i] == pytest.approx(fd, rel=1e-4, abs=1e-7)


class TestDivergenceEstimator:
    def test_identity_stub_estimates_dimension(self):
        ident = lambda X, s, dout: dout
        est = nn.batched_eps_divergence(ident, np.zeros(9), 0.5, 1000, "gaussian", seed=1)
        assert abs(est - 9.0) / 9.0 < 0.15

    def test_linear_stub_rademacher(self):
        rng = np.random.default_rng(3)
        A = rng.standard_normal((9, 9)) + 10.0 * np.eye(9)
        lin = lambda X, s, dout: dout @ A
        est = nn.batched_eps_divergence(lin, np.zeros(9), 0.5, 1000, "rademacher", seed=2)
        assert abs(est - np.trace(A)) / abs(np.trace(A)) < 0.02

    def test_single_eps_is_quadratic_form(self):
        rng = np.random.default_rng(4)
        A = rng.standard_normal((4, 4))
        lin = lambda X, s, dout: dout @ A
        est = nn.batched_eps_divergence(lin, np.zeros(4), 0.5, 1, "gaussian", seed=9)
        eps = nn.draw_probes(4, 1, "gaussian", 9)[0]
        assert est == pytest.approx(float(eps @ A.T @ eps), rel=1e-12)

    def test_unbiased_on_linear_field(self):
        rng = np.random.default_rng(5)
        A = rng.standard_normal((6, 6)) + 4.0 * np.eye(6)
        lin = lambda X, s, dout: dout @ A
        ests = np.array([
            nn.batched_eps_divergence(lin, np.zeros(6), 0.5, 100, "gaussian", seed=k)
            for k in range(100)
        ])
        se = ests.std(ddof=1) / 10.0
        assert abs(ests.mean() - np.trace(A)) <= 3 * se

    def test_matches_explicit_jacobian_trace_on_network(self):
        p = randomized_params(4, seed=14)
        x, s = np.array([0.3, -0.2, 1.0, 0.4]), 0.5
        h = 1e-5
        trace = 0.0
        for i in range(4):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            trace += (nn.forward(p, xp, s)[i] - nn.forward(p, xm, s)[i]) / (2 * h)
        ests = [
            nn.batched_eps_divergence(p, x, s, 512, "rademacher", seed=k)
            for k in range(32)
        ]
        se = np.std(ests, ddof=1) / np.sqrt(32)
        assert abs(np.mean(ests) - trace) <= max(3 * se, 1e-6)

    def test_zero_n_eps_rejected(self):
        p = randomized_params(2, seed=15)
        with pytest.raises(InvalidArgumentError):
            nn.batched_eps_divergence(p, np.zeros(2), 0.5, 0, "gaussian", seed=0)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path):
        p = randomized_params(5, seed=16, n_features=8, hidden=(12, 10))
        proc = DiffusionProcess(kind="vp")
        path = tmp_path / "model.bin"
        nn.save_checkpoint(path, p, "em", proc)
        back, kind, proc2 = nn.load_checkpoint(path)
        assert kind == "em"
        assert proc2 == proc
        for a, b in zip(nn._array_order(p), nn._array_order(back)):
            np.testing.assert_array_equal(a, b)
        # identical bytes when saved again
        nn.save_checkpoint(tmp_path / "model2.bin", back, "em", proc2)
        assert (tmp_path / "model.bin").read_bytes() == (tmp_path / "model2.bin").read_bytes()

    def test_magic_checked(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(SchemaError):
            nn.load_checkpoint(path)

    def test_truncation_detected(self, tmp_path):
        p = nn.init_params(2, seed=1, n_features=4, hidden=(6,))
        path = tmp_path / "model.bin"
        nn.save_checkpoint(path, p, "sm", DiffusionProcess(kind="ve"))
        raw = path.read_bytes()
        path.write_bytes(raw[:-16])
        with pytest.raises(SchemaError):
            nn.load_checkpoint(path)
