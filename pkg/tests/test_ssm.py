import dataclasses

import numpy as np
import pytest

from sfkit import ssm
from sfkit.errors import NumericError, ShapeError, StateError


def make_inputs(rng, batch, length, d_inner, state, c_off):
    params = ssm.SsmParams.seeded(d_inner, state, c_off, rng)
    x = rng.normal(size=(batch, length, d_inner))
    f_off = rng.normal(size=(batch, length, c_off))
    return params, x, f_off


def token_terms(params, f_off):
    delta = ssm.softplus(f_off @ params.w_delta + params.b_delta)
    return delta, f_off @ params.w_b, f_off @ params.w_c


# --- discretization -------------------------------------------------------------


def test_zoh_small_delta_approaches_identity():
    a = -np.abs(np.random.default_rng(0).normal(size=(3, 4))) - 0.1
    b = np.random.default_rng(1).normal(size=(1, 2, 4))
    for mode in ssm.ZohMode:
        disc = ssm.zoh_discretize(a, b, np.full((1, 2, 3), 1e-12), mode)
        assert np.allclose(disc.a_bar, 1.0, atol=1e-10)


def test_zoh_scalar_example():
    # a = -1, delta = ln 2  ->  a_bar = exp(-ln 2) = 0.5
    disc = ssm.zoh_discretize(
        np.array([[-1.0]]), np.array([[[1.0]]]), np.array([[[np.log(2.0)]]])
    )
    assert np.allclose(disc.a_bar, 0.5, atol=1e-15)


def test_zoh_exact_matches_closed_form():
    rng = np.random.default_rng(2)
    a = -np.abs(rng.normal(size=(2, 3))) - 0.05
    b = rng.normal(size=(1, 4, 3))
    delta = np.abs(rng.normal(size=(1, 4, 2))) + 0.01
    disc = ssm.zoh_discretize(a, b, delta, ssm.ZohMode.EXACT)
    expect = (np.exp(delta[..., None] * a) - 1.0) / a * b[:, :, None, :]
    assert np.allclose(disc.b_bar, expect, rtol=1e-12)


def test_zoh_zero_decay_uses_series_limit():
    a = np.array([[0.0, -1.0]])
    b = np.array([[[2.0, 2.0]]])
    delta = np.array([[[0.5]]])
    disc = ssm.zoh_discretize(a, b, delta, ssm.ZohMode.EXACT)
    assert np.isclose(disc.b_bar[0, 0, 0, 0], 0.5 * 2.0)  # delta * b at a = 0
    assert np.all(np.isfinite(disc.b_bar))


def test_zoh_gap_shrinks_quadratically():
    # |b_exact - b_simplified| = O(delta^2): halving delta quarters the gap
    rng = np.random.default_rng(3)
    for _ in range(50):
        a = -rng.uniform(0.1, 2.0, size=(1, 1))
        b = rng.normal(size=(1, 1, 1))
        delta = rng.uniform(0.01, 0.1, size=(1, 1, 1))
        gaps = []
        for d in (delta, delta / 2.0):
            exact = ssm.zoh_discretize(a, b, d, ssm.ZohMode.EXACT).b_bar
            simple = ssm.zoh_discretize(a, b, d, ssm.ZohMode.SIMPLIFIED).b_bar
            gaps.append(np.abs(exact - simple).max())
        ratio = gaps[0] / gaps[1]
        assert 4.0 * 0.9 <= ratio <= 4.0 * 1.1


# --- sequential scan -------------------------------------------------------------


def scalar_loop_scan(a_bar, b_bar, c, d, x, h0):
    """Naive per-element recurrence (independent oracle)."""
    batch, length, d_inner, state = a_bar.shape
    y = np.zeros((batch, length, d_inner))
    h = h0.copy()
    for bi in range(batch):
        for t in range(length):
            for di in range(d_inner):
                acc = 0.0
                for si in range(state):
                    h[bi, di, si] = (
                        a_bar[bi, t, di, si] * h[bi, di, si]
                        + b_bar[bi, t, di, si] * x[bi, t, di]
                    )
                    acc += h[bi, di, si] * c[bi, t, si]
                y[bi, t, di] = acc + d[di] * x[bi, t, di]
    return y, h


def test_scan_memoryless_when_abar_zero():
    rng = np.random.default_rng(4)
    batch, length, d_inner, state = 1, 6, 3, 4
    b_bar = rng.normal(size=(batch, length, d_inner, state))
    c = rng.normal(size=(batch, length, state))
    d = rng.normal(size=(d_inner,))
    x = rng.normal(size=(batch, length, d_inner))
    disc = ssm.Discretized(a_bar=np.zeros_like(b_bar), b_bar=b_bar)
    y, _ = ssm.scan_sequential(disc, c, d, x, rng.normal(size=(batch, d_inner, state)))
    expect = np.einsum("blds,bld,bls->bld", b_bar, x, c) + d * x
    assert np.allclose(y, expect, atol=1e-14)


def test_scan_single_step_closed_form():
    rng = np.random.default_rng(5)
    params, x, f_off = make_inputs(rng, 2, 1, 3, 4, 2)
    delta, b_tok, c_tok = token_terms(params, f_off)
    disc = ssm.zoh_discretize(params.a, b_tok, delta, ssm.ZohMode.SIMPLIFIED)
    h0 = np.zeros((2, 3, 4))
    y, h = ssm.scan_sequential(disc, c_tok, params.d, x, h0)
    expect = (
        np.einsum("bds,bs->bd", disc.b_bar[:, 0] * x[:, 0, :, None], c_tok[:, 0])
        + params.d * x[:, 0]
    )
    assert np.allclose(y[:, 0], expect, atol=1e-14)
    assert np.allclose(h, disc.b_bar[:, 0] * x[:, 0, :, None], atol=1e-14)


def test_scan_matches_scalar_loop_oracle():
    rng = np.random.default_rng(6)
    params, x, f_off = make_inputs(rng, 2, 64, 4, 8, 3)
    delta, b_tok, c_tok = token_terms(params, f_off)
    disc = ssm.zoh_discretize(params.a, b_tok, delta, ssm.ZohMode.SIMPLIFIED)
    h0 = rng.normal(size=(2, 4, 8))
    y, h = ssm.scan_sequential(disc, c_tok, params.d, x, h0)
    y_ref, h_ref = scalar_loop_scan(disc.a_bar, disc.b_bar, c_tok, params.d, x, h0)
    assert np.max(np.abs(y - y_ref)) < 1e-12
    assert np.max(np.abs(h - h_ref)) < 1e-12


def test_scan_shape_errors():
    rng = np.random.default_rng(7)
    params, x, f_off = make_inputs(rng, 1, 4, 3, 4, 2)
    delta, b_tok, c_tok = token_terms(params, f_off)
    disc = ssm.zoh_discretize(params.a, b_tok, delta)
    with pytest.raises(ShapeError):
        ssm.scan_sequential(disc, c_tok, params.d, x[:, :, :2], np.zeros((1, 3, 4)))
    with pytest.raises(ShapeError):
        ssm.scan_sequential(disc, c_tok, params.d, x, np.zeros((1, 3, 5)))


def test_scan_numeric_error_names_token():
    rng = np.random.default_rng(8)
    params, x, f_off = make_inputs(rng, 1, 5, 2, 2, 2)
    delta, b_tok, c_tok = token_terms(params, f_off)
    disc = ssm.zoh_discretize(params.a, b_tok, delta)
    x = x.copy()
    x[0, 3, 0] = np.inf
    with pytest.raises(NumericError) as err:
        ssm.scan_sequential(disc, c_tok, params.d, x, np.zeros((1, 2, 2)))
    assert err.value.index == 3


# --- blocked scan ----------------------------------------------------------------


@pytest.mark.parametrize("length", [1, 2, 255, 4096])
def test_blocked_equals_sequential(length):
    rng = np.random.default_rng(length)
    params, x, f_off = make_inputs(rng, 2, length, 4, 8, 3)
    delta, b_tok, c_tok = token_terms(params, f_off)
    disc = ssm.zoh_discretize(params.a, b_tok, delta, ssm.ZohMode.SIMPLIFIED)
    h0 = rng.normal(size=(2, 4, 8))
    y_seq, h_seq = ssm.scan_sequential(disc, c_tok, params.d, x, h0)
    y_blk, h_blk = ssm.scan_blocked(disc, c_tok, params.d, x, h0, block_size=64)
    scale = max(np.abs(y_seq).max(), 1.0)
    assert np.abs(y_seq - y_blk).max() <= 1e-10 * scale
    assert np.abs(h_seq - h_blk).max() <= 1e-10 * max(np.abs(h_seq).max(), 1.0)


def test_blocked_degenerates_to_sequential_exactly():
    rng = np.random.default_rng(9)
    params, x, f_off = make_inputs(rng, 1, 37, 3, 5, 2)
    delta, b_tok, c_tok = token_terms(params, f_off)
    disc = ssm.zoh_discretize(params.a, b_tok, delta)
    h0 = rng.normal(size=(1, 3, 5))
    y_seq, h_seq = ssm.scan_sequential(disc, c_tok, params.d, x, h0)
    y_blk, h_blk = ssm.scan_blocked(disc, c_tok, params.d, x, h0, block_size=64)
    assert np.array_equal(y_seq, y_blk)
    assert np.array_equal(h_seq, h_blk)


def test_blocked_empty_sequence():
    disc = ssm.Discretized(
        a_bar=np.zeros((2, 0, 3, 4)), b_bar=np.zeros((2, 0, 3, 4))
    )
    h0 = np.random.default_rng(10).normal(size=(2, 3, 4))
    y, h = ssm.scan_blocked(disc, np.zeros((2, 0, 4)), np.zeros(3), np.zeros((2, 0, 3)), h0)
    assert y.shape == (2, 0, 3)
    assert np.array_equal(h, h0)


def test_blocked_deterministic_per_block_size():
    rng = np.random.default_rng(11)
    params, x, f_off = make_inputs(rng, 1, 200, 4, 4, 3)
    delta, b_tok, c_tok = token_terms(params, f_off)
    disc = ssm.zoh_discretize(params.a, b_tok, delta)
    h0 = np.zeros((1, 4, 4))
    runs = [
        ssm.scan_blocked(disc, c_tok, params.d, x, h0, block_size=32)[0]
        for _ in range(2)
    ]
    assert np.array_equal(runs[0], runs[1])


# --- flow layer ------------------------------------------------------------------


def test_flow_layer_constant_parameter_reduction():
    # zero offsets + zero delta-bias: every token shares (delta, B, C); the
    # layer must equal a plain scan with those constants
    rng = np.random.default_rng(12)
    d_inner, state, c_off, length = 4, 6, 3, 20
    params = ssm.SsmParams.seeded(d_inner, state, c_off, rng)
    params = dataclasses.replace(params, b_delta=np.zeros(d_inner))
    x = rng.normal(size=(1, length, d_inner))
    f_off = np.zeros((1, length, c_off))

    refined, h = ssm.flow_ssm_layer(x, f_off, params)

    delta = np.full((1, length, d_inner), ssm.softplus(0.0))
    b_tok = np.zeros((1, length, state))
    c_tok = np.zeros((1, length, state))
    disc = ssm.zoh_discretize(params.a, b_tok, delta, ssm.ZohMode.SIMPLIFIED)
    expect, h_expect = ssm.scan_sequential(disc, c_tok, params.d, x, np.zeros((1, d_inner, state)))
    assert np.allclose(refined, expect, atol=1e-12)
    assert np.allclose(h, h_expect, atol=1e-12)


def test_flow_layer_zero_input_zero_output():
    rng = np.random.default_rng(13)
    params = ssm.SsmParams.seeded(3, 4, 2, rng)
    f_off = rng.normal(size=(1, 10, 2))
    refined, _ = ssm.flow_ssm_layer(np.zeros((1, 10, 3)), f_off, params)
    assert np.array_equal(refined, np.zeros((1, 10, 3)))


def test_flow_layer_causality():
    rng = np.random.default_rng(14)
    params, x, f_off = make_inputs(rng, 1, 30, 4, 4, 3)
    base, _ = ssm.flow_ssm_layer(x, f_off, params)
    k = 11
    bumped = f_off.copy()
    bumped[0, k] += 0.5
    out, _ = ssm.flow_ssm_layer(x, bumped, params)
    diff = np.abs(out - base).max(axis=(0, 2))
    assert np.all(diff[:k] == 0.0)
    assert diff[k] > 0.0


def test_flow_layer_shape_errors():
    rng = np.random.default_rng(15)
    params = ssm.SsmParams.seeded(4, 4, 3, rng)
    with pytest.raises(ShapeError):
        ssm.flow_ssm_layer(np.zeros((1, 5, 4)), np.zeros((1, 5, 2)), params)
    with pytest.raises(ShapeError):
        ssm.flow_ssm_layer(np.zeros((1, 5, 3)), np.zeros((1, 5, 3)), params)


def test_flow_layer_linearity_in_x():
    rng = np.random.default_rng(16)
    params = ssm.SsmParams.seeded(4, 5, 3, rng)
    f_off = rng.normal(size=(1, 25, 3))
    x1 = rng.normal(size=(1, 25, 4))
    x2 = rng.normal(size=(1, 25, 4))
    alpha, beta = 0.7, -1.3
    combined, _ = ssm.flow_ssm_layer(alpha * x1 + beta * x2, f_off, params)
    y1, _ = ssm.flow_ssm_layer(x1, f_off, params)
    y2, _ = ssm.flow_ssm_layer(x2, f_off, params)
    scale = max(np.abs(combined).max(), 1.0)
    assert np.abs(combined - (alpha * y1 + beta * y2)).max() <= 1e-10 * scale


def test_hidden_state_stability_bound():
    rng = np.random.default_rng(17)
    params, x, f_off = make_inputs(rng, 1, 200, 4, 4, 3)
    run = ssm.flow_ssm_forward(x, f_off, params, keep_intermediates=True)
    delta, b_tok, _ = token_terms(params, f_off)
    disc = ssm.zoh_discretize(params.a, b_tok, delta, ssm.ZohMode.SIMPLIFIED)
    drive = np.abs(disc.b_bar * x[..., None]).max()
    a_max = disc.a_bar.max()
    bound = 0.0 + drive / (1.0 - a_max)  # h0 = 0
    assert np.abs(run.h_states).max() <= bound + 1e-9


# --- adjoint ---------------------------------------------------------------------


def test_backward_zero_upstream_gives_zero_grads():
    rng = np.random.default_rng(18)
    params, x, f_off = make_inputs(rng, 1, 8, 3, 4, 2)
    run = ssm.flow_ssm_forward(x, f_off, params, keep_intermediates=True)
    grads = ssm.ssm_backward(run, np.zeros_like(run.refined))
    for name in ("x", "f_offset", "a_log", "d", "w_delta", "b_delta", "w_b", "w_c"):
        assert np.array_equal(getattr(grads, name), np.zeros_like(getattr(grads, name)))


def test_backward_requires_recorded_run():
    rng = np.random.default_rng(19)
    params, x, f_off = make_inputs(rng, 1, 4, 2, 2, 2)
    run = ssm.flow_ssm_forward(x, f_off, params)
    with pytest.raises(StateError):
        ssm.ssm_backward(run, np.zeros_like(run.refined))


def test_backward_scalar_case_matches_symbolic_derivation():
    sympy = pytest.importorskip("sympy")
    # L = 2, D = S = 1, one offset channel: differentiate the closed form
    # symbolically and compare against the adjoint.
    wd, bd, wb, wc, al, dskip = sympy.symbols("wd bd wb wc al dskip", real=True)
    o1, o2, x1, x2, g1, g2 = sympy.symbols("o1 o2 x1 x2 g1 g2", real=True)

    def sp(z):
        return sympy.log(1 + sympy.exp(z))

    a = -sympy.exp(al)
    d1, d2 = sp(wd * o1 + bd), sp(wd * o2 + bd)
    b1, b2 = wb * o1, wb * o2
    c1, c2 = wc * o1, wc * o2
    h1 = sympy.exp(d1 * a) * 0 + d1 * b1 * x1
    h2 = sympy.exp(d2 * a) * h1 + d2 * b2 * x2
    y1 = c1 * h1 + dskip * x1
    y2 = c2 * h2 + dskip * x2
    loss = g1 * y1 + g2 * y2

    values = {
        wd: 0.37, bd: -0.21, wb: 0.83, wc: -0.55, al: 0.11, dskip: 0.29,
        o1: 0.61, o2: -0.47, x1: 1.3, x2: -0.9, g1: 0.7, g2: -1.1,
    }
    params = ssm.SsmParams(
        a_log=np.array([[values[al]]]),
        d=np.array([values[dskip]]),
        w_delta=np.array([[values[wd]]]),
        b_delta=np.array([values[bd]]),
        w_b=np.array([[values[wb]]]),
        w_c=np.array([[values[wc]]]),
    )
    x = np.array([[[values[x1]], [values[x2]]]])
    f_off = np.array([[[values[o1]], [values[o2]]]])
    gy = np.array([[[values[g1]], [values[g2]]]])

    run = ssm.flow_ssm_forward(x, f_off, params, keep_intermediates=True)
    grads = ssm.ssm_backward(run, gy)

    checks = {
        "w_delta": wd, "b_delta": bd, "w_b": wb, "w_c": wc, "a_log": al, "d": dskip,
    }
    for name, symbol in checks.items():
        expect = float(sympy.diff(loss, symbol).subs(values))
        got = float(np.asarray(getattr(grads, name)).ravel()[0])
        assert got == pytest.approx(expect, rel=1e-10, abs=1e-12), name
    for name, symbol, got in (
        ("x1", x1, grads.x[0, 0, 0]),
        ("x2", x2, grads.x[0, 1, 0]),
        ("o1", o1, grads.f_offset[0, 0, 0]),
        ("o2", o2, grads.f_offset[0, 1, 0]),
    ):
        expect = float(sympy.diff(loss, symbol).subs(values))
        assert got == pytest.approx(expect, rel=1e-10, abs=1e-12), name


def central_difference(loss_fn, arr, h=1e-6):
    grad = np.zeros_like(arr)
    for i in range(arr.size):
        plus, minus = arr.copy(), arr.copy()
        plus.flat[i] += h
        minus.flat[i] -= h
        grad.flat[i] = (loss_fn(plus) - loss_fn(minus)) / (2.0 * h)
    return grad


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(20)
    params, x, f_off = make_inputs(rng, 1, 16, 4, 5, 3)
    gy = rng.normal(size=x.shape)
    run = ssm.flow_ssm_forward(x, f_off, params, keep_intermediates=True)
    grads = ssm.ssm_backward(run, gy)

    def rel_err(analytic, numeric):
        return np.abs(analytic - numeric).max() / max(np.abs(numeric).max(), 1e-10)

    for name in ("a_log", "d", "w_delta", "b_delta", "w_b", "w_c"):
        def loss_fn(arr, name=name):
            p = dataclasses.replace(params, **{name: arr})
            refined, _ = ssm.flow_ssm_layer(x, f_off, p)
            return float((gy * refined).sum())

        fd = central_difference(loss_fn, getattr(params, name))
        assert rel_err(getattr(grads, name), fd) < 1e-5, name

    fd_x = central_difference(
        lambda arr: float((gy * ssm.flow_ssm_layer(arr, f_off, params)[0]).sum()), x
    )
    assert rel_err(grads.x, fd_x) < 1e-5
    fd_off = central_difference(
        lambda arr: float((gy * ssm.flow_ssm_layer(x, arr, params)[0]).sum()), f_off
    )
    assert rel_err(grads.f_offset, fd_off) < 1e-5
