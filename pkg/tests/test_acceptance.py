"""End-to-end acceptance checks, one test per criterion.

Each criterion records a PASS/FAIL line that is printed in the pytest
terminal summary (and when this file is run as a script).
"""

import functools
import time
from dataclasses import replace

import numpy as np
import pytest

from oracles import dense_fidelity, generic_point, reflect_formula
from snapunfold import functional as F
from snapunfold.ablation import toy_base
from snapunfold.classic import TvConfig, pnp_reconstruct
from snapunfold.gradcheck import grad_check
from snapunfold.metrics import K1, psnr, ssim
from snapunfold.net import SpaDunConfig, build_spadun
from snapunfold.npyio import load_tensor, save_tensor
from snapunfold.sampling import MaskStack, adjoint_op, dense_phi, forward_op, gen_mask, gen_mask_dmd, psi, sample_forward
from snapunfold.synth import phantom, synth_dataset
from snapunfold.tensor import Tensor, concat, exp, reshape, slice_axis, sqrt, take, tsum
from snapunfold.train import checkpoint_bytes, evaluate, fixed_crop, loss, parse_checkpoint, rmse, train_loop
from snapunfold.unfold import FixedGamma, IdentityPrior, StageState, fidelity_update, init_state, pad_indices, \
    reflective_pad, run_dun, unpad_merge

RESULTS: dict[int, tuple[str, str, str]] = {}


def criterion(number, title):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                detail = fn(*args, **kwargs) or ""
            except BaseException as exc:
                RESULTS[number] = ("FAIL", title, str(exc).splitlines()[0] if str(exc) else type(exc).__name__)
                raise
            RESULTS[number] = ("PASS", title, detail)
        return run
    return wrap


def summary_lines():
    return [f"criterion {n}: {status} {title}" + (f" ({detail})" if detail else "")
            for n, (status, title, detail) in sorted(RESULTS.items())]


# 1 ---------------------------------------------------------------------------

@criterion(1, "fidelity update matches dense solve")
def test_c1_fidelity_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for trial in range(20):
        c = (2, 4)[trial % 2]
        gamma = (0.1, 1.0, 10.0)[trial % 3]
        mask = gen_mask_dmd(c, 4, 4, seed=trial)
        x, b = rng.standard_normal((1, c, 4, 4)), rng.standard_normal((1, c, 4, 4))
        y = rng.standard_normal((1, 4, 4))
        st = StageState(x=Tensor(x), v=Tensor(x), b=Tensor(b))
        v = fidelity_update(st, y, mask, FixedGamma(gamma)).data[0]
        ref = dense_fidelity(mask.values, y[0], (x + b)[0], gamma)
        worst = max(worst, np.max(np.abs(v - ref)) / np.max(np.abs(ref)))
    elapsed = time.perf_counter() - t0
    assert worst < 1e-10, worst
    assert elapsed < 5
    return f"max rel err {worst:.1e}, {elapsed:.2f}s"


# 2 ---------------------------------------------------------------------------

@criterion(2, "forward/adjoint operator pair")
def test_c2_adjointness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for trial in range(50):
        c, h, w = int(rng.integers(1, 9)), int(rng.integers(2, 17)), int(rng.integers(2, 17))
        kind = ("dmd", "cacti", "external")[trial % 3]
        m = MaskStack(rng.random((c, h, w))) if kind == "external" else gen_mask(kind, c, h, w, seed=trial)
        x, u = rng.standard_normal((c, h, w)), rng.standard_normal((h, w))
        lhs = np.sum(forward_op(x, m.values) * u)
        rhs = np.sum(x * adjoint_op(u, m.values))
        worst = max(worst, abs(lhs - rhs) / abs(lhs))
    elapsed = time.perf_counter() - t0
    assert worst < 1e-12, worst
    assert elapsed < 5
    return f"max rel err {worst:.1e}"


# 3 ---------------------------------------------------------------------------

@criterion(3, "Phi Phi^T is diagonal with diagonal psi")
def test_c3_diagonality():
    m = gen_mask_dmd(2, 4, 4, seed=3)
    gram = dense_phi(m) @ dense_phi(m).T
    assert np.array_equal(np.diag(gram), psi(m).reshape(-1))
    assert np.count_nonzero(gram - np.diag(np.diag(gram))) == 0


# 4 ---------------------------------------------------------------------------

def _sq(t):
    return t * t


def _primitive_cases(rng):
    r = lambda *s: Tensor(rng.standard_normal(s))
    u4 = lambda shape: Tensor(rng.standard_normal(shape))
    up, us, ud, uu = u4((2, 3, 8, 8)), u4((1, 2, 4, 4)), u4((1, 2, 2, 3)), u4((1, 2, 4, 6))
    return {
        "add": (lambda a, b: (a + b * 2.0).sum(), [r(3, 4), r(3, 4)]),
        "sub_broadcast": (lambda a, b: ((a - b) * (a - b)).sum(), [r(2, 3, 4), r(3, 1)]),
        "mul_scale": (lambda s, x: (s * x * x).sum(), [r(1), r(2, 3, 4, 4)]),
        "div": (lambda a, b: (a / (b * b + 1.0)).sum(), [r(4, 5), r(4, 5)]),
        "exp_sqrt": (lambda a: sqrt(exp(a) + 1.0).mean(), [r(3, 4)]),
        "sum_axis": (lambda a: (tsum(a, axis=1) * tsum(a, axis=1)).sum(), [r(3, 4, 2)]),
        "reshape": (lambda a: (reshape(a, (6, 4)) * Tensor(np.arange(24.0).reshape(6, 4))).sum(), [r(2, 3, 4)]),
        "concat_slice": (lambda a, b: _sq(slice_axis(concat([a, b], 1), 1, 1, 4)).sum(), [r(2, 3), r(2, 2)]),
        "take": (lambda a: _sq(take(a, [0, 2, 2], axis=1)).sum(), [r(2, 3)]),
        "conv2d": (lambda x, w, b: (F.conv2d(x, w, b, 1, 1) * up).sum(), [r(2, 4, 8, 8), r(3, 4, 3, 3), r(3)]),
        "conv2d_stride": (lambda x, w: (F.conv2d(x, w, None, 2, 1) * us).sum(),
                          [r(1, 3, 8, 8), r(2, 3, 3, 3)]),
        "dwconv2d": (lambda x, w, b: (F.dwconv2d(x, w, b, 1, 2) * up).sum(), [r(2, 3, 8, 8), r(3, 1, 5, 5), r(3)]),
        "layer_norm": (lambda x, g, s: (F.layer_norm(x, g, s) * up).sum(), [r(2, 3, 8, 8), r(3), r(3)]),
        "gelu": (lambda a: F.gelu(a).sum(), [r(4, 5)]),
        "sigmoid": (lambda a: F.sigmoid(a).sum(), [r(4, 5)]),
        "softplus": (lambda a: F.softplus(a).sum(), [r(4, 5)]),
        "avgpool2": (lambda a: (F.resample(a, "avgpool2") * ud).sum(), [r(1, 2, 4, 6)]),
        "nearest_up2": (lambda a: (F.resample(a, "nearest_up2") * uu).sum(), [r(1, 2, 2, 3)]),
        "rmse": (lambda a: rmse(a, np.zeros((3, 4))), [r(3, 4)]),
    }


@criterion(4, "analytic gradients match finite differences")
def test_c4_gradient_integrity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    worst_prim = {}
    for name, (fn, inputs) in _primitive_cases(rng).items():
        worst_prim[name] = grad_check(fn, inputs, step=1e-5)
    bad = {k: v for k, v in worst_prim.items() if not v < 1e-6}
    assert not bad, bad

    cfg = SpaDunConfig(stages=2, width=4, blocks=(1, 1, 1), pad_length=4, dtype="float64")
    model = generic_point(build_spadun(cfg, seed=0), rng)
    mask = gen_mask_dmd(2, 8, 8, seed=0)
    gt = rng.random((2, 8, 8))
    y = sample_forward(gt, mask)
    full = grad_check(lambda *_: loss(run_dun(y, mask, model), gt), model.parameters(), step=1e-5, max_entries=4)
    elapsed = time.perf_counter() - t0
    assert full < 1e-5, full
    assert elapsed < 120
    return f"primitives max {max(worst_prim.values()):.1e}, full model {full:.1e}, {elapsed:.0f}s"


# 5 ---------------------------------------------------------------------------

@criterion(5, "reflective padding contract")
def test_c5_padding():
    assert pad_indices(3, 4).tolist() == [[0, 1, 2, 2]]
    assert pad_indices(4, 4).tolist() == [[0, 1, 2, 3]]
    assert pad_indices(7, 3).tolist() == [[0, 1, 2], [3, 4, 5], [4, 5, 6]]
    for c in range(1, 9):
        for L in range(c + 1, 25):
            assert pad_indices(c, L)[0].tolist() == reflect_formula(c, L)
    for c in range(3, 30):
        idx = pad_indices(c, 3)
        assert idx.shape[0] == -(-c // 3)
        assert idx[-1].tolist() == list(range(c - 3, c))
    L = 4
    rng = np.random.default_rng(5)
    prior = IdentityPrior(pad_length=L)
    for c in (1, 3, L, 2 * L + 1):
        x = rng.random((2, c, 4, 4))
        padded, plan = reflective_pad(Tensor(x), L)
        out = unpad_merge(prior.forward(0, concat([padded, Tensor(np.zeros((padded.shape[0], 1, 4, 4)))], 1), None),
                          plan)
        assert out.data.tobytes() == x.tobytes()


# 6 and 7: toy training ---------------------------------------------------------

TOY_SEEDS = (0, 1, 2, 3)


@functools.lru_cache(maxsize=None)
def toy_run(seed, full=True):
    data = synth_dataset("moving_squares", clips=16, frames=8, h=32, w=32, seed=seed)
    val = synth_dataset("moving_squares", clips=4, frames=8, h=32, w=32, seed=1000 + seed)
    master = gen_mask_dmd(4, 32, 32, seed=seed)
    cfg = toy_base(steps=200, seed=seed, use_mgm=full, use_ybar=full)
    res = train_loop(data, master, cfg)
    seen = evaluate(res.model, val, fixed_crop(master, 4, 32, 32))
    unseen = evaluate(res.model, val, fixed_crop(master, 3, 32, 32))
    return {"first": res.log[0]["loss"], "last": res.log[-1]["loss"], "seen": seen, "unseen": unseen}


@criterion(6, "toy training trend")
def test_c6_toy_training():
    t0 = time.perf_counter()
    r = toy_run(0)
    ratio = r["last"] / r["first"]
    gain_seen = r["seen"]["psnr"] - r["seen"]["init_psnr"]
    gain_unseen = r["unseen"]["psnr"] - r["unseen"]["init_psnr"]
    assert ratio < 0.5, ratio
    assert gain_seen >= 5, gain_seen
    assert gain_unseen >= 2, gain_unseen
    return (f"loss ratio {ratio:.2f}, seen c=4 +{gain_seen:.1f} dB, unseen c=3 +{gain_unseen:.1f} dB, "
            f"{time.perf_counter() - t0:.0f}s")


@criterion(7, "mask-guided prior does not hurt unseen ratio")
def test_c7_ablation_direction():
    full = np.mean([toy_run(s)["unseen"]["psnr"] for s in TOY_SEEDS])
    off = np.mean([toy_run(s, full=False)["unseen"]["psnr"] for s in TOY_SEEDS])
    assert off <= full + 0.1, (off, full)
    return f"unseen c=3 mean PSNR: full {full:.2f} dB, without MGM/ybar {off:.2f} dB"


# 8 ---------------------------------------------------------------------------

@criterion(8, "TV plug-and-play baseline")
def test_c8_pnp_baseline():
    gt = phantom(8, 32, 32, seed=0)
    mask = gen_mask_dmd(8, 32, 32, seed=0)
    y = sample_forward(gt, mask)
    trace = []
    rec = pnp_reconstruct(y, mask, TvConfig(), trace=trace)
    gain = psnr(gt.frames, rec.frames) - psnr(gt.frames, init_state(y, mask).x.data[0])
    res = [t["residual"] for t in trace]
    assert gain >= 3, gain
    assert all(np.isfinite(res)) and all(b <= a for a, b in zip(res, res[1:])), res
    return f"gain {gain:.1f} dB"


# 9 ---------------------------------------------------------------------------

@criterion(9, "metrics and file round-trips")
def test_c9_metrics_and_roundtrips(tmp_path):
    rng = np.random.default_rng(9)
    x = rng.random((16, 16))
    assert psnr(x, x) == 100.0
    assert abs(psnr(np.zeros((4, 4)), np.ones((4, 4)))) < 1e-9
    assert abs(psnr(x, x + 0.1) - 20.0) < 1e-9
    assert abs(ssim(x, x) - 1.0) < 1e-9
    board = (np.indices((32, 32)).sum(axis=0) % 2).astype(float)
    assert ssim(board, 1 - board) < 0
    a, b = 0.3, 0.8
    assert abs(ssim(np.full((16, 16), a), np.full((16, 16), b)) - (2 * a * b + K1 ** 2) / (a * a + b * b + K1 ** 2)) < 1e-9

    for dtype in (np.float32, np.float64, np.uint8):
        arr = (rng.random((3, 5, 7)) * 255).astype(dtype)
        save_tensor(tmp_path / "t.npy", arr)
        assert load_tensor(tmp_path / "t.npy", raw=True).tobytes() == arr.tobytes()

    data = synth_dataset(clips=2, frames=4, h=16, w=16, seed=0)
    cfg = replace(toy_base(steps=2), sampling=replace(toy_base().sampling, patch_h=16, patch_w=16), batch_size=2)
    ck = train_loop(data, gen_mask_dmd(4, 16, 16), cfg).checkpoint
    raw = checkpoint_bytes(ck)
    again = checkpoint_bytes(parse_checkpoint(raw))
    assert again == raw


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q"]))
