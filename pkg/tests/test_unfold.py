import numpy as np
import pytest

from oracles import dense_fidelity, generic_point, reflect_formula
from snapunfold.gradcheck import grad_check
from snapunfold.net import SpaDunConfig, build_spadun
from snapunfold.sampling import MaskStack, Measurement, dense_phi, gen_mask_dmd, normalize_measurement, sample_forward
from snapunfold.tensor import DimensionError, Tensor
from snapunfold.train import loss
from snapunfold.unfold import (FixedGamma, GammaParam, IdentityPrior, StageState, build_prior_inputs, fidelity_update,
                               init_state, make_plan, mask_prior_input, multiplier_update, pad_indices,
                               reflective_pad, run_dun, unpad_merge)


def state_from(x, b):
    x, b = Tensor(x), Tensor(b)
    return StageState(x=x, v=x, b=b)


def test_init_zero_measurement():
    st = init_state(np.zeros((4, 4)), gen_mask_dmd(3, 4, 4))
    assert np.all(st.x.data == 0) and np.all(st.b.data == 0)


def test_init_is_masked_replication_and_dense_adjoint(rng):
    m = gen_mask_dmd(2, 4, 4, seed=3)
    y = rng.random((4, 4))
    x = init_state(y, m).x.data[0]
    np.testing.assert_array_equal(x, m.values * y)
    np.testing.assert_array_equal(x.reshape(-1), dense_phi(m).T @ y.reshape(-1))


def test_init_shape_mismatch():
    with pytest.raises(DimensionError):
        init_state(np.zeros((5, 4)), gen_mask_dmd(2, 4, 4))


def test_fidelity_consistent_state_is_fixed_point(rng):
    m = gen_mask_dmd(3, 6, 6, seed=0)
    x, b = rng.random((1, 3, 6, 6)), rng.random((1, 3, 6, 6)) * 0.1
    y = ((x + b) * m.values).sum(axis=1)
    v = fidelity_update(state_from(x, b), y, m, FixedGamma(1.0))
    np.testing.assert_allclose(v.data, x + b, rtol=0, atol=1e-14)


def test_fidelity_large_gamma_vanishes(rng):
    m = gen_mask_dmd(4, 6, 6, seed=1)
    x, b, y = rng.random((1, 4, 6, 6)), rng.random((1, 4, 6, 6)), rng.random((1, 6, 6)) * 4
    v = fidelity_update(state_from(x, b), y, m, FixedGamma(1e6))
    assert np.max(np.abs(v.data - (x + b))) < 1e-4 * np.max(np.abs(y))


def test_fidelity_matches_dense_solve(rng):
    for trial in range(20):
        c = (2, 4)[trial % 2]
        gamma = (0.1, 1.0, 10.0)[trial % 3]
        m = MaskStack(rng.random((c, 4, 4))) if trial % 4 == 0 else gen_mask_dmd(c, 4, 4, seed=trial)
        x, b, y = rng.standard_normal((1, c, 4, 4)), rng.standard_normal((1, c, 4, 4)), rng.standard_normal((1, 4, 4))
        v = fidelity_update(state_from(x, b), y, m, FixedGamma(gamma)).data[0]
        ref = dense_fidelity(m.values, y[0], (x + b)[0], gamma)
        assert np.max(np.abs(v - ref)) / np.max(np.abs(ref)) < 1e-10


def test_multiplier_update(rng):
    x = rng.random((1, 2, 3, 3))
    b = rng.random((1, 2, 3, 3))
    st = StageState(x=Tensor(x), v=Tensor(x), b=Tensor(b))
    np.testing.assert_array_equal(multiplier_update(st, Tensor(x)).data, b)
    d = rng.random(x.shape)
    st = StageState(x=Tensor(x), v=Tensor(x + d), b=Tensor(np.zeros_like(x)))
    np.testing.assert_allclose(multiplier_update(st, Tensor(x)).data, -d, rtol=1e-15)
    v = rng.random(x.shape)
    st = StageState(x=Tensor(x), v=Tensor(v), b=Tensor(b))
    xn = rng.random(x.shape)
    np.testing.assert_array_equal(multiplier_update(st, Tensor(xn)).data, b - (v - xn))


def test_gamma_param_positive_and_near_one():
    g = GammaParam()
    assert abs(g.value().data[0] - 1.0) < 1e-12
    g.raw.data[:] = -50
    assert g.value().data[0] > 0
    with pytest.raises(ValueError):
        FixedGamma(0.0)


def test_pad_examples():
    assert pad_indices(4, 4).tolist() == [[0, 1, 2, 3]]
    assert pad_indices(3, 4).tolist() == [[0, 1, 2, 2]]
    assert pad_indices(7, 3).tolist() == [[0, 1, 2], [3, 4, 5], [4, 5, 6]]
    assert pad_indices(3, 7, "repetitive").tolist() == [[0, 1, 2, 0, 1, 2, 0]]


@pytest.mark.parametrize("c,L", [(1, 5), (2, 7), (3, 4), (5, 24), (8, 24), (13, 24)])
def test_pad_short_matches_formula_and_is_smooth(c, L):
    idx = pad_indices(c, L)[0]
    assert idx.tolist() == reflect_formula(c, L)
    assert idx.min() >= 0 and idx.max() < c
    assert np.all(np.abs(np.diff(idx)) <= 1)


def test_pad_chunk_identity_b_unchanged(rng):
    x = rng.random((2, 4, 3, 3))
    out, plan = reflective_pad(Tensor(x), 4)
    assert plan.chunks == 1
    np.testing.assert_array_equal(out.data, x)


def test_pad_rejects_unknown_mode():
    with pytest.raises(ValueError):
        pad_indices(3, 4, "wrap")


@pytest.mark.parametrize("c", [1, 3, 4, 9])
def test_pad_round_trip(rng, c):
    x = rng.random((2, c, 3, 3))
    padded, plan = reflective_pad(Tensor(x), 4)
    np.testing.assert_array_equal(unpad_merge(padded, plan).data, x)


def test_unpad_ownership():
    plan = make_plan(1, 7, 3)
    # frames are numbered 1..7 here; slot = chunk * L + position
    owner = plan.scatter // 3
    assert owner[6] == 2 and owner[4] == 1 and owner[5] == 1


def test_unpad_batches_independent(rng):
    x = rng.random((2, 7, 2, 2))
    padded, plan = reflective_pad(Tensor(x), 3)
    assert padded.shape == (6, 3, 2, 2)
    got = unpad_merge(padded, plan).data
    np.testing.assert_array_equal(got[1], x[1])
    with pytest.raises(DimensionError):
        unpad_merge(Tensor(np.zeros((5, 3, 2, 2))), plan)


def test_prior_inputs_channels(rng):
    m = gen_mask_dmd(3, 4, 4, seed=0)
    y = rng.random((2, 4, 4))
    st = init_state(y, m)
    vbar, mbar, plan = build_prior_inputs(st, y, m, 3, 5)
    assert vbar.shape == (2, 6, 4, 4) and mbar.shape == (2, 6, 4, 4)
    np.testing.assert_array_equal(vbar.data[:, 5], normalize_measurement(y, m))
    np.testing.assert_array_equal(mbar.data[0, :5], m.values[reflect_formula(3, 5)])
    np.testing.assert_allclose(mbar.data[:, 5], 3 / 5)


def test_prior_inputs_chunked_ybar(rng):
    m = gen_mask_dmd(7, 4, 4, seed=0)
    y = rng.random((1, 4, 4))
    vbar, mbar, plan = build_prior_inputs(init_state(y, m), y, m, 7, 3)
    assert vbar.shape[0] == 3
    for k in range(3):
        np.testing.assert_array_equal(vbar.data[k, 3], normalize_measurement(y, m)[0])
        np.testing.assert_allclose(mbar.data[k, 3], 7 / 3)


def test_mask_prior_ratio_channel():
    m = gen_mask_dmd(8, 4, 4, seed=0)
    assert np.all(mask_prior_input(m, 1, 8, 8, "reflective", np.float64)[:, -1] == 1.0)
    mb = mask_prior_input(m, 1, 8, 24, "reflective", np.float64)
    np.testing.assert_allclose(mb[0, -1], 1 / 3, rtol=1e-15)
    np.testing.assert_array_equal(mb[0, :24], m.values[reflect_formula(8, 24)])


def test_identity_prior_one_stage_returns_init(rng):
    m = gen_mask_dmd(3, 6, 6, seed=2)
    y = sample_forward(rng.random((3, 6, 6)), m)
    out = run_dun(y, m, IdentityPrior(stages=1, pad_length=4))
    x0 = init_state(y.values, m).x.data[0]
    assert len(out) == 1 and out[0].shape == (3, 6, 6)
    # fidelity residual at x0 is y - psi*y, so v differs from x0 unless psi == 1
    m1 = MaskStack(np.eye(3)[:, :, None].repeat(6, axis=2).reshape(3, 3, 6)[:, :, :6].repeat(2, axis=1))
    y1 = sample_forward(rng.random((3, 6, 6)), m1)
    out1 = run_dun(y1, m1, IdentityPrior(stages=1, pad_length=4))
    np.testing.assert_allclose(out1[0].data, init_state(y1.values, m1).x.data[0], rtol=0, atol=1e-15)


def test_run_dun_ratio_mismatch():
    with pytest.raises(DimensionError):
        run_dun(Measurement(np.zeros((4, 4)), 2), gen_mask_dmd(3, 4, 4), IdentityPrior())


def tiny_model(**kw):
    cfg = SpaDunConfig(stages=2, width=4, blocks=(1, 1, 1), pad_length=4, dtype="float64", **kw)
    return build_spadun(cfg, seed=0)


def test_learned_run_is_differentiable(rng):
    model = generic_point(tiny_model(), rng)
    m = gen_mask_dmd(2, 8, 8, seed=0)
    gt = rng.random((2, 8, 8))
    y = sample_forward(gt, m)
    assert grad_check(lambda *_: loss(run_dun(y, m, model), gt), model.parameters(), max_entries=2) < 1e-5


def test_run_dun_deterministic(rng):
    model = tiny_model()
    m = gen_mask_dmd(2, 8, 8)
    y = sample_forward(rng.random((2, 8, 8)), m)
    a = run_dun(y, m, model)[-1].data
    b = run_dun(y, m, model)[-1].data
    assert a.tobytes() == b.tobytes()


def test_trace_logs_every_stage(rng):
    m = gen_mask_dmd(3, 8, 8)
    trace = []
    run_dun(sample_forward(rng.random((3, 8, 8)), m), m, IdentityPrior(stages=3), trace=trace)
    assert [t["stage"] for t in trace] == [1, 2, 3]
    assert all(np.isfinite(t["residual"]) for t in trace)
