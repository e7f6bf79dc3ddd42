import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from msmunet import ssm
from msmunet.gradcheck import check_gradients
from msmunet.tensor import Tensor, no_grad


def test_zoh_scalar_closed_form():
    a_bar, b_bar = ssm.zoh_discretize(np.array(-1.0), np.array(1.0), np.array(1.0))
    assert abs(float(a_bar) - math.exp(-1)) <= 1e-12
    assert abs(float(b_bar) - (1 - math.exp(-1))) <= 1e-12


def test_zoh_small_step_series_branch():
    # |ΔA| below the series cutoff: B̄ → ΔB(1 + ΔA/2)
    a_bar, b_bar = ssm.zoh_discretize(np.array(-2.0), np.array(3.0), np.array(1e-8))
    assert float(b_bar) == pytest.approx(3e-8 * (1 - 1e-8), rel=1e-14)
    assert float(a_bar) == pytest.approx(math.exp(-2e-8), rel=1e-15)


def test_zoh_second_order_convergence():
    from msmunet.verify import zoh_order_slope

    assert zoh_order_slope() >= 1.9


def test_zoh_rejects_nonpositive_step():
    with pytest.raises(ValueError):
        ssm.zoh_discretize(np.array(-1.0), np.array(1.0), np.array(0.0))


@pytest.mark.parametrize("length", [8, 64, 256])
def test_scan_equals_kernel(rng, length):
    params = ssm.SsmParams.random(rng, 3, 16)
    x = rng.normal(size=(2, length, 3))
    with no_grad():
        y = ssm.scan_recurrence(x, params).data
    ref = ssm.ssm_convolve(x, ssm.ssm_kernel(params, length))
    assert np.max(np.abs(y - ref)) <= 1e-8


def test_kernel_first_entry_is_c_dot_bbar(rng):
    params = ssm.SsmParams.random(rng, 2, 4)
    _, b_bar = ssm.zoh_discretize(params.A, params.B, params.delta[:, None])
    k = ssm.ssm_kernel(params, 3)
    np.testing.assert_allclose(k[0], (params.C * b_bar).sum(axis=1), rtol=1e-14)


def test_kernel_rejects_time_varying(rng):
    p = ssm.SsmParams.random(rng, 2, 4)
    tv = ssm.SsmParams(p.log_neg_A, rng.normal(size=(1, 5, 4)), rng.normal(size=(1, 5, 4)), np.full((1, 5, 2), 0.1))
    with pytest.raises(ValueError, match="time-invariant"):
        ssm.ssm_kernel(tv, 5)


def test_scan_rejects_empty_sequence(rng):
    with pytest.raises(ValueError):
        ssm.scan_recurrence(np.zeros((1, 0, 2)), ssm.SsmParams.random(rng, 2, 2))


def test_impulse_response_is_kernel(rng):
    params = ssm.SsmParams.random(rng, 2, 5)
    x = np.zeros((1, 6, 2))
    x[0, 0] = 1.0
    with no_grad():
        y = ssm.scan_recurrence(x, params).data[0]
    np.testing.assert_allclose(y, ssm.ssm_kernel(params, 6), atol=1e-14)


def test_selective_scan_gradients(rng):
    u = Tensor(rng.normal(size=(1, 4, 2)), requires_grad=True)
    delta = Tensor(rng.uniform(0.05, 0.5, size=(1, 4, 2)), requires_grad=True)
    A = Tensor(-rng.uniform(0.5, 2.0, size=(2, 3)), requires_grad=True)
    B = Tensor(rng.normal(size=(1, 4, 3)), requires_grad=True)
    C = Tensor(rng.normal(size=(1, 4, 3)), requires_grad=True)
    w = Tensor(rng.normal(size=(1, 4, 2)))
    err = check_gradients(lambda: (ssm.selective_scan(u, delta, A, B, C) * w).sum(), [u, delta, A, B, C],
                          max_entries=None)
    assert err < 1e-6


@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 3))
def test_sequence_round_trip(h, w, c):
    x = Tensor(np.arange(2 * c * h * w, dtype=float).reshape(2, c, h, w))
    view = ssm.image_to_sequence(x)
    assert view.tokens.shape == (2, h * w, c)
    # raster order: token k is pixel (k // w, k % w)
    np.testing.assert_array_equal(view.tokens.data[0, w if h > 1 else 0], x.data[0, :, 1 if h > 1 else 0, 0])
    np.testing.assert_array_equal(ssm.sequence_to_image(view).data, x.data)


def test_sequence_to_image_checks_origin():
    view = ssm.image_to_sequence(Tensor(np.zeros((1, 2, 3, 4))))
    with pytest.raises(ValueError):
        ssm.sequence_to_image(view, (4, 3))
    with pytest.raises(ValueError):
        ssm.sequence_to_image(view.tokens, (5, 5))


def test_mamba_block_is_causal(rng):
    blk = ssm.MambaBlock(rng, 4, state_size=3)
    x = rng.normal(size=(1, 10, 4))
    x2 = x.copy()
    x2[0, 6:] += rng.normal(size=(4, 4))
    with no_grad():
        y1, y2 = blk(Tensor(x)).data, blk(Tensor(x2)).data
    np.testing.assert_allclose(y1[0, :6], y2[0, :6], atol=1e-14)
    assert not np.allclose(y1[0, 6:], y2[0, 6:])


def test_mamba_block_carries_state_forward(rng):
    blk = ssm.MambaBlock(rng, 4, state_size=3)
    x = rng.normal(size=(1, 10, 4))
    x2 = x.copy()
    x2[0, 0] += rng.normal(size=4)
    with no_grad():
        diff = np.abs(blk(Tensor(x)).data - blk(Tensor(x2)).data)[0].max(axis=1)
    assert diff[9] > 1e-8  # beyond the width-4 causal conv, so through the scan state


def test_mamba_block_init_contract(rng):
    blk = ssm.MambaBlock(rng, 20, state_size=4)
    assert blk.dt_rank == 2 and blk.d_inner == 40
    np.testing.assert_allclose(np.exp(blk.A_log.data[0]), [1, 2, 3, 4])
    dt = np.logaddexp(0, blk.dt_proj.bias.data)
    assert dt.min() >= 1e-3 - 1e-12 and dt.max() <= 1e-1 + 1e-12


def test_bidirectional_branch_sees_future(rng):
    x = rng.normal(size=(1, 4, 2, 3))
    x2 = x.copy()
    x2[0, :, 1, 2] += rng.normal(size=4)  # last raster pixel; not a uniform shift, which LN removes
    first_pixel_change = {}
    for mode in ("forward", "bidirectional"):
        br = ssm.MambaBranch(np.random.default_rng(0), 4, 1, 3, scan=mode)
        with no_grad():
            y1, y2 = br(Tensor(x)).data, br(Tensor(x2)).data
        first_pixel_change[mode] = np.abs(y1[0, :, 0, 0] - y2[0, :, 0, 0]).max()
    assert first_pixel_change["forward"] == 0.0
    assert first_pixel_change["bidirectional"] > 1e-9
    with pytest.raises(ValueError):
        ssm.MambaBranch(rng, 4, 1, 3, scan="zigzag")


def test_bench_rows_agree(rng):
    rows = ssm.bench_scan_vs_kernel((8, 32), d=2, n=4, repeats=1)
    assert [r["length"] for r in rows] == [8, 32]
    assert all(r["max_abs_diff"] < 1e-10 for r in rows)
