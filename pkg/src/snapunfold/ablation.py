"""Toy-scale ablation harness: component schemes and block-type comparison."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from .metrics import psnr, ssim
from .net import SpaDunConfig, count_flops, count_params
from .sampling import MaskStack, SamplingConfig, VideoCube, gen_mask, sample_forward
from .tensor import no_grad
from .train import TrainConfig, evaluate, fixed_crop, train_loop
from .unfold import run_dun


@dataclass(frozen=True)
class Scheme:
    """One row of the component ablation."""

    index: int
    augment: bool  # sample c' from the ratio set, else train at its largest ratio only
    padding: str
    use_ybar: bool
    use_mgm: bool


SCHEMES = {
    1: Scheme(1, False, "repetitive", False, False),
    2: Scheme(2, True, "repetitive", False, False),
    3: Scheme(3, True, "reflective", False, False),
    4: Scheme(4, True, "reflective", True, False),
    5: Scheme(5, True, "reflective", True, True),
}


def scheme_config(index: int, base: TrainConfig) -> TrainConfig:
    s = SCHEMES[index]
    model = replace(base.model, padding=s.padding, use_ybar=s.use_ybar, use_mgm=s.use_mgm)
    sampling = base.sampling
    if not s.augment:
        sampling = replace(sampling, ratio_set=(max(sampling.ratio_set),))
    return replace(base, model=model, sampling=sampling)


def _mean_psnr(model, val_set, mask):
    return evaluate(model, val_set, mask)["psnr"]


def run_schemes(dataset: list[VideoCube], master: MaskStack, base: TrainConfig, val_set: list[VideoCube],
                seen: int, unseen: list[int], schemes=(1, 2, 3, 4, 5), seeds=(0,)) -> list[dict]:
    """Train every scheme under the same budget and seeds; PSNR averaged over seeds.

    Columns: the seen ratio, each unseen ratio, and the seen ratio with the
    other mask pattern (unseen pattern).
    """
    swap = "cacti" if master.pattern == "dmd" else "dmd"
    rows = []
    for k in schemes:
        res = {"seen": [], "unseen_pattern": [], **{f"unseen_c{c}": [] for c in unseen}}
        params = None
        for seed in seeds:
            cfg = replace(scheme_config(k, base), seed=seed)
            model = train_loop(dataset, master, cfg).model
            params = count_params(model)
            h, w = cfg.sampling.patch_h, cfg.sampling.patch_w
            res["seen"].append(_mean_psnr(model, val_set, fixed_crop(master, seen, h, w)))
            for c in unseen:
                res[f"unseen_c{c}"].append(_mean_psnr(model, val_set, fixed_crop(master, c, h, w)))
            other = gen_mask(swap, seen, h, w, seed=master.seed)
            res["unseen_pattern"].append(_mean_psnr(model, val_set, other))
        row = {"scheme": k, "params": params, **{key: float(np.mean(v)) for key, v in res.items()}}
        rows.append(row)
    return rows


def block_comparison(dataset: list[VideoCube], master: MaskStack, base: TrainConfig, val_set: list[VideoCube],
                     blocks=(2, 2, 2), block_types=("resnet", "resnext", "mixer")) -> list[dict]:
    """Single U-net, no unfolding, one row per block type.

    The mixer block has two residual branches, so it gets half the blocks
    of the other types.
    """
    rows = []
    c = max(base.sampling.ratio_set)
    h, w = base.sampling.patch_h, base.sampling.patch_w
    mask = fixed_crop(master, c, h, w)
    for bt in block_types:
        nb = tuple(max(1, b // 2) for b in blocks) if bt == "mixer" else tuple(blocks)
        model_cfg = replace(base.model, stages=1, block_type=bt, blocks=nb, fidelity=False)
        t0 = time.perf_counter()
        model = train_loop(dataset, master, replace(base, model=model_cfg)).model
        elapsed = time.perf_counter() - t0
        ps, ss = [], []
        with no_grad():
            for k, clip in enumerate(val_set):
                gt = clip.frames[:c, :h, :w]
                out = run_dun(sample_forward(gt, mask, seed=k), mask, model)[-1].data
                ps.append(psnr(gt, out))
                ss.append(ssim(gt, out))
        rows.append({"block_type": bt, "blocks": list(nb), "width": model_cfg.width,
                     "params": count_params(model), "flops": count_flops(model, h, w, c),
                     "psnr": float(np.mean(ps)), "ssim": float(np.mean(ss)), "train_s": elapsed})
    return rows


def toy_base(steps: int = 200, seed: int = 0, **model_kw) -> TrainConfig:
    """The desk-scale setting: N=2, width 8, blocks [1,1,1], L=4, S={2,4}, 32x32 patches."""
    kw = dict(stages=2, width=8, blocks=(1, 1, 1), pad_length=4)
    kw.update(model_kw)
    return TrainConfig(model=SpaDunConfig(**kw), sampling=SamplingConfig((2, 4), 32, 32), batch_size=4,
                       epochs=10**6, max_steps=steps, seed=seed, val_every=10**6)
