import dataclasses

import numpy as np
import pytest

from oracles import generic_point
from snapunfold import functional as F
from snapunfold.gradcheck import grad_check
from snapunfold.net import (ConvBlockParams, block_forward, ParameterMismatchError, SpaDunConfig, _Init, build_spadun,
                            conv_block_forward, count_flops, count_params, init_block, init_mgm, init_unet,
                            mgm_forward, named_parameters, unet_forward)
from snapunfold.sampling import gen_mask_cacti, gen_mask_dmd, sample_forward
from snapunfold.tensor import DimensionError, Tensor
from snapunfold.train import loss
from snapunfold.unfold import mask_prior_input, run_dun

CFG = SpaDunConfig(stages=2, width=4, blocks=(1, 1, 1), pad_length=4, dtype="float64")


def init(seed=0):
    return _Init(np.random.default_rng(seed), np.float64)


def T(a):
    return Tensor(np.asarray(a, dtype=np.float64))


def zero_all(obj):
    for _, p in named_parameters(obj):
        p.data[...] = 0


def test_block_zero_scales_is_identity(rng):
    p = init_block(init(), CFG, 6)
    p.s1.data[:] = 0
    p.s2.data[:] = 0
    x = rng.standard_normal((2, 6, 5, 5))
    np.testing.assert_array_equal(conv_block_forward(T(x), p).data, x)


def test_block_unit_attention_matches_plain(rng):
    p = init_block(init(), CFG, 6)
    x = T(rng.standard_normal((2, 6, 5, 5)))
    ones = T(np.ones(x.shape))
    for site in ("dw_output", "block_input"):
        np.testing.assert_allclose(conv_block_forward(x, p, ones, site).data, conv_block_forward(x, p).data,
                                   rtol=0, atol=1e-15)


def test_block_attention_shape_error(rng):
    p = init_block(init(), CFG, 6)
    with pytest.raises(DimensionError):
        conv_block_forward(T(np.zeros((1, 6, 4, 4))), p, T(np.ones((1, 6, 2, 2))))


def test_block_grad_check(rng):
    p = init_block(init(), CFG, 4)
    p.s1.data[:] = 0.7
    p.s2.data[:] = 0.5
    x = T(rng.standard_normal((2, 4, 6, 6)))
    attn = T(rng.random((2, 4, 6, 6)))
    u = T(rng.standard_normal((2, 4, 6, 6)))
    params = [q for _, q in named_parameters(p)]
    assert grad_check(lambda *_: (conv_block_forward(x, p, attn) * u).sum(), params + [x, attn]) < 1e-6


@pytest.mark.parametrize("block_type", ["resnet", "resnext"])
def test_baseline_blocks_grad_check(rng, block_type):
    cfg = dataclasses.replace(CFG, block_type=block_type)
    p = generic_point(init_block(init(), cfg, 4), rng)
    x = T(rng.standard_normal((1, 4, 6, 6)) + 0.1)
    u = T(rng.standard_normal((1, 4, 6, 6)))
    params = [q for _, q in named_parameters(p)]
    assert grad_check(lambda *_: (block_forward(x, p, None, "dw_output") * u).sum(), params, max_entries=20) < 1e-6


def test_mgm_range_and_shapes(rng):
    cfg = SpaDunConfig(width=48, pad_length=24, dtype="float64")
    p = init_mgm(init(), cfg)
    mbar = mask_prior_input(gen_mask_dmd(8, 64, 64), 1, 8, 24, "reflective", np.float64)
    maps = mgm_forward(T(mbar), p)
    assert [m.shape for m in maps] == [(1, 48, 64, 64), (1, 96, 32, 32), (1, 192, 16, 16)]
    for m in maps:
        assert m.data.min() > 0 and m.data.max() < 1


def test_mgm_pattern_dependence():
    p = init_mgm(init(), CFG)
    dmd = mask_prior_input(gen_mask_dmd(4, 16, 16, seed=0), 1, 4, 4, "reflective", np.float64)
    cacti = mask_prior_input(gen_mask_cacti(4, 16, 16, seed=0), 1, 4, 4, "reflective", np.float64)
    assert np.max(np.abs(mgm_forward(T(dmd), p)[0].data - mgm_forward(T(cacti), p)[0].data)) > 0


def test_mgm_locality():
    p = init_mgm(init(), CFG)
    mbar = mask_prior_input(gen_mask_dmd(4, 24, 24, seed=0), 1, 4, 4, "reflective", np.float64)
    poked = mbar.copy()
    poked[0, 0, 12, 12] = 1 - poked[0, 0, 12, 12]
    a = mgm_forward(T(mbar), p)[0].data
    b = mgm_forward(T(poked), p)[0].data
    changed = np.argwhere(np.any(a != b, axis=(0, 1)))
    assert changed.size > 0
    assert np.max(np.abs(changed - 12)) <= 2


def test_unet_output_shape_and_zero_params(rng):
    p = init_unet(init(), CFG)
    vbar = T(rng.random((3, 5, 8, 12)))
    mbar = T(rng.random((3, 5, 8, 12)))
    assert unet_forward(vbar, mbar, p).shape == (3, 4, 8, 12)
    zero_all(p)
    assert np.all(unet_forward(vbar, mbar, p).data == 0)


def test_unet_identity_configuration(rng):
    p = init_unet(init(), dataclasses.replace(CFG, zero_head=True))
    p.head.bias.data[:] = 0
    out = unet_forward(T(rng.random((1, 5, 8, 8))), T(rng.random((1, 5, 8, 8))), p)
    assert np.all(out.data == 0)


def test_unet_rejects_bad_spatial_size(rng):
    p = init_unet(init(), CFG)
    with pytest.raises(DimensionError, match="pad the input"):
        unet_forward(T(np.zeros((1, 5, 6, 8))), None, p)


def test_unet_grad_check(rng):
    p = generic_point(init_unet(init(), CFG), rng)
    vbar, mbar = T(rng.random((1, 5, 8, 8))), T(rng.random((1, 5, 8, 8)))
    u = T(rng.standard_normal((1, 4, 8, 8)))
    params = [q for _, q in named_parameters(p)]
    assert grad_check(lambda *_: (unet_forward(vbar, mbar, p) * u).sum(), params, max_entries=6) < 1e-5


def test_count_params_single_conv():
    conv = init().conv(3, 5, 1)
    assert count_params(conv) == 3 * 5 + 5


def test_count_params_width_scaling():
    a = init_block(init(), CFG, 8)
    b = init_block(init(), CFG, 16)
    pw = lambda blk: blk.pw1.weight.size + blk.pw2.weight.size
    assert pw(b) == 4 * pw(a)


def test_count_params_share_weights():
    own = build_spadun(CFG)
    shared = build_spadun(dataclasses.replace(CFG, share_weights=True))
    per_stage = count_params(own.stages[0])
    assert count_params(own) == 2 * per_stage + 2
    assert count_params(shared) == per_stage + 2
    assert shared.stages[0] is shared.stages[1]


def test_default_model_size_order_of_magnitude():
    n = count_params(build_spadun(SpaDunConfig(stages=1)))
    full = 10 * n + 10
    assert 1e6 < full < 1e8


def test_count_flops_matches_traced_macs(rng):
    model = build_spadun(CFG)
    m = gen_mask_dmd(6, 8, 8)
    y = sample_forward(rng.random((6, 8, 8)), m)
    with F.count_macs() as log:
        run_dun(y, m, model)
    assert log[0] == count_flops(model, 8, 8, 6)


def test_no_dead_parameters(rng):
    model = build_spadun(CFG, seed=3)
    m = gen_mask_dmd(3, 8, 8, seed=1)
    gt = rng.random((3, 8, 8))
    loss(run_dun(sample_forward(gt, m), m, model), gt).backward()
    dead = [name for name, p in model.named_parameters() if p.grad is None or not np.any(p.grad != 0)]
    assert dead == []


def test_state_dict_round_trip_and_mismatch():
    a, b = build_spadun(CFG, seed=0), build_spadun(CFG, seed=1)
    b.load_state_dict(a.state_dict())
    for (n1, p1), (n2, p2) in zip(a.named_parameters(), b.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    wide = build_spadun(dataclasses.replace(CFG, width=6))
    with pytest.raises(ParameterMismatchError) as exc:
        wide.load_state_dict(a.state_dict())
    assert exc.value.name in dict(wide.named_parameters())
    state = a.state_dict()
    state.pop("gammas.1")
    with pytest.raises(ParameterMismatchError, match="gammas.1"):
        b.load_state_dict(state)


def test_config_dict_and_fingerprint():
    d = CFG.to_dict()
    assert SpaDunConfig.from_dict(d) == CFG
    assert CFG.fingerprint() == dataclasses.replace(CFG, dtype="float32").fingerprint()
    assert CFG.fingerprint() != dataclasses.replace(CFG, width=8).fingerprint()
    with pytest.raises(ValueError, match="unknown"):
        SpaDunConfig.from_dict({**d, "depth": 3})
    with pytest.raises(ValueError):
        SpaDunConfig(block_type="transformer")


def test_parameter_names_are_unique():
    names = [n for n, _ in build_spadun(CFG).named_parameters()]
    assert len(names) == len(set(names))
    assert isinstance(build_spadun(CFG).stages[0].enc0[0], ConvBlockParams)
