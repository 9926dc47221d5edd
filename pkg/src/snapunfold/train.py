"""Loss, AdamW, learning-rate schedule, the training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .metrics import psnr
from .net import SpaDunConfig, SpaDunParams, ParameterMismatchError, build_spadun
from .sampling import MaskStack, SamplingConfig, VideoCube, sample_augment, sample_forward
from .tensor import Tensor, make_node, no_grad
from .unfold import init_state, run_dun

log = logging.getLogger(__name__)


# loss -----------------------------------------------------------------------

@dataclass(frozen=True)
class LossConfig:
    """Weights for the last, second-to-last and third-to-last stage outputs."""

    stage_weights: tuple[float, ...] = (1.0, 0.5, 0.5)

    def __post_init__(self):
        w = tuple(float(v) for v in self.stage_weights)
        if not w or min(w) <= 0:
            raise ValueError("stage_weights must be non-empty and positive")
        object.__setattr__(self, "stage_weights", w)


def rmse(x: Tensor, gt: np.ndarray) -> Tensor:
    """``sqrt(mean((x - gt)**2))``; the gradient at an exact match is taken as 0."""
    gt = np.asarray(gt, dtype=x.dtype)
    if gt.shape != x.shape:
        raise ValueError(f"rmse: output {x.shape} vs ground truth {gt.shape}")
    d = x.data - gt
    r = np.sqrt(np.mean(d * d))

    def bw(g):
        if r == 0:
            return (np.zeros_like(d),)
        return (g * d / (d.size * r),)

    return make_node(np.asarray(r, dtype=x.dtype), (x,), bw, "rmse")


def loss(stage_outputs: list[Tensor], gt, cfg: LossConfig = LossConfig(), stages: int | None = None) -> Tensor:
    """Weighted RMSE of the final stage outputs against ``gt``.

    ``stages`` is the configured stage count. When it is at least the number
    of weights, that many outputs are required; shorter models use all of
    their outputs with the leading weights.
    """
    gt = gt.frames if isinstance(gt, VideoCube) else np.asarray(gt)
    n = len(stage_outputs)
    k = len(cfg.stage_weights)
    configured = n if stages is None else stages
    if configured >= k and n < k:
        raise ValueError(f"loss needs the last {k} stage outputs, got {n}")
    total = None
    for i in range(min(n, k)):
        term = rmse(stage_outputs[n - 1 - i], gt) * cfg.stage_weights[i]
        total = term if total is None else total + term
    return total


# optimizer ------------------------------------------------------------------

class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name: str):
        super().__init__(f"non-finite gradient in parameter {name!r}")
        self.name = name


@dataclass
class OptimState:
    """AdamW moments keyed by parameter name."""

    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 1e-4
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def scalars(self) -> dict:
        return {"lr": self.lr, "betas": list(self.betas), "eps": self.eps,
                "weight_decay": self.weight_decay, "step": self.step}


def optimizer_step(params, grads: dict[str, np.ndarray] | None, state: OptimState) -> OptimState:
    """One bias-corrected AdamW update, in place.

    ``params`` is a sequence of ``(name, Parameter)``. Gradients come from
    ``grads`` when given, otherwise from each parameter's ``.grad`` (missing
    gradients count as zero). Weight decay scales the weights directly.
    """
    named = list(params)
    gs = {}
    for name, p in named:
        g = grads.get(name) if grads is not None else p.grad
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
        gs[name] = g
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in named:
        g = gs[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        if g is None:
            g = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        data = p.data
        if state.weight_decay:
            data = data * (1.0 - state.lr * state.weight_decay)
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (data - update).astype(p.dtype, copy=False)
    return state


@dataclass(frozen=True)
class Schedule:
    """Linear warm-up to ``warm_lr``, then step decay by ``decay_factor``."""

    warm_lr: float = 1e-3
    warm_epochs: int = 0
    decay_factor: float = 0.1
    decay_every: int = 300

    def __post_init__(self):
        if self.warm_lr < 0 or self.warm_epochs < 0:
            raise ValueError("warm_lr and warm_epochs must be >= 0")
        if not 0 < self.decay_factor <= 1 or self.decay_every < 1:
            raise ValueError("decay_factor must be in (0, 1] and decay_every >= 1")

    def lr(self, epoch: int) -> float:
        if epoch < self.warm_epochs:
            return self.warm_lr * (epoch + 1) / self.warm_epochs
        return self.warm_lr * self.decay_factor ** ((epoch - self.warm_epochs) // self.decay_every)


# checkpoints ----------------------------------------------------------------

MAGIC = b"SNAPCKPT"
FORMAT_VERSION = 1
_ALIGN = 16


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    """Everything needed to rebuild a model and resume its training."""

    config: dict
    fingerprint: str
    params: dict[str, np.ndarray]
    optim: dict | None = None  # OptimState scalars plus "m" / "v" dicts
    meta: dict = field(default_factory=dict)
    partial: bool = False

    def model_config(self) -> SpaDunConfig:
        return SpaDunConfig.from_dict(self.config)


def _pad(n: int) -> int:
    return (-n) % _ALIGN


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    groups = [("param", ck.params)]
    if ck.optim is not None:
        groups += [("m", ck.optim["m"]), ("v", ck.optim["v"])]
    entries, chunks, offset = [], [], 0
    for group, tensors in groups:
        for name, arr in tensors.items():
            a = np.ascontiguousarray(arr)
            a = a.astype(a.dtype.newbyteorder("<"), copy=False)
            raw = a.tobytes()
            entries.append({"group": group, "name": name, "shape": list(a.shape),
                            "dtype": a.dtype.str, "offset": offset, "nbytes": len(raw)})
            chunks.append(raw + b"\0" * _pad(len(raw)))
            offset += len(raw) + _pad(len(raw))
    payload = b"".join(chunks)
    optim = None
    if ck.optim is not None:
        optim = {k: v for k, v in ck.optim.items() if k not in ("m", "v")}
    manifest = {
        "format_version": FORMAT_VERSION, "fingerprint": ck.fingerprint, "config": ck.config,
        "meta": ck.meta, "optim": optim, "partial": ck.partial, "tensors": entries,
        "payload_bytes": len(payload), "payload_crc32": zlib.crc32(payload),
    }
    body = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(body)) + body
    return head + b"\0" * _pad(len(head)) + payload


def save_checkpoint(path, ck: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ck))


def parse_checkpoint(data: bytes, weights_only: bool = False) -> Checkpoint:
    if len(data) < len(MAGIC) + 12 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError("not a checkpoint file (bad magic)")
    version, mlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    start = len(MAGIC) + 12
    try:
        manifest = json.loads(data[start:start + mlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointCorruptError(f"unreadable manifest: {exc}") from exc
    head = start + mlen
    base = head + _pad(head)
    payload = data[base:]
    if len(payload) != manifest.get("payload_bytes") or zlib.crc32(payload) != manifest.get("payload_crc32"):
        raise CheckpointCorruptError("payload truncated or corrupted (size or checksum mismatch)")
    out = {"param": {}, "m": {}, "v": {}}
    for e in manifest["tensors"]:
        if weights_only and e["group"] != "param":
            continue
        arr = np.frombuffer(payload, dtype=np.dtype(e["dtype"]), offset=e["offset"],
                            count=int(np.prod(e["shape"], dtype=np.int64)))
        out[e["group"]][e["name"]] = arr.reshape(e["shape"]).copy()
    optim = None
    if manifest["optim"] is not None and not weights_only:
        optim = dict(manifest["optim"], m=out["m"], v=out["v"])
    return Checkpoint(manifest["config"], manifest["fingerprint"], out["param"], optim,
                      manifest["meta"], manifest["partial"] or (weights_only and manifest["optim"] is not None))


def load_checkpoint(path, weights_only: bool = False) -> Checkpoint:
    """Read a checkpoint; ``weights_only`` drops optimizer state and sets ``partial``."""
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read(), weights_only)


def model_from_checkpoint(ck: Checkpoint, cfg: SpaDunConfig | None = None) -> SpaDunParams:
    """Build the checkpoint's model, or load its weights into ``cfg``'s architecture."""
    cfg = cfg or ck.model_config()
    model = build_spadun(cfg)
    model.load_state_dict(ck.params)
    if cfg.fingerprint() != ck.fingerprint:
        theirs = ck.model_config()
        diff = [f for f, v in cfg.to_dict().items() if f != "dtype" and theirs.to_dict()[f] != v]
        raise ParameterMismatchError("<config>", f"architecture differs from checkpoint in {diff}")
    return model


def optim_from_checkpoint(ck: Checkpoint, defaults: OptimState | None = None) -> OptimState:
    """Restore optimizer state; a partial checkpoint yields a fresh state."""
    if ck.optim is None:
        d = defaults or OptimState()
        return OptimState(d.lr, d.betas, d.eps, d.weight_decay)
    o = ck.optim
    return OptimState(o["lr"], tuple(o["betas"]), o["eps"], o["weight_decay"], o["step"],
                      {k: v.copy() for k, v in o["m"].items()}, {k: v.copy() for k, v in o["v"].items()})


def make_checkpoint(model: SpaDunParams, opt: OptimState | None, meta: dict) -> Checkpoint:
    optim = None
    if opt is not None:
        optim = dict(opt.scalars(), m={k: v.copy() for k, v in opt.m.items()},
                     v={k: v.copy() for k, v in opt.v.items()})
    return Checkpoint(model.config.to_dict(), model.config.fingerprint(),
                      {k: v.copy() for k, v in model.state_dict().items()}, optim, meta)


# training loop --------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    model: SpaDunConfig = SpaDunConfig()
    sampling: SamplingConfig = SamplingConfig()
    loss: LossConfig = LossConfig()
    schedule: Schedule = Schedule()
    batch_size: int = 6
    epochs: int = 1
    max_steps: int | None = None
    weight_decay: float = 1e-4
    seed: int = 0
    val_every: int = 1
    unseen_ratio: int | None = None

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0 or self.val_every < 1:
            raise ValueError("batch_size and val_every must be >= 1, epochs >= 0")
        if self.max_steps is not None and self.max_steps < 0:
            raise ValueError("max_steps must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


@dataclass
class TrainResult:
    model: SpaDunParams
    optim: OptimState
    checkpoint: Checkpoint
    log: list[dict]
    step_losses: list[float]


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, 0, step])


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, 1, epoch]).permutation(n)


def default_unseen_ratio(ratio_set) -> int | None:
    """Smallest ratio strictly between the extremes of ``ratio_set`` that is not in it."""
    rs = sorted(ratio_set)
    for c in range(rs[0] + 1, rs[-1]):
        if c not in rs:
            return c
    return None


def fixed_crop(master: MaskStack, c: int, h: int, w: int) -> MaskStack:
    return MaskStack(master.values[:c, :h, :w].copy(), master.pattern, master.seed)


def evaluate(model, clips: list[VideoCube], mask: MaskStack, noise_sigma: float = 0.0,
             seed: int = 0) -> dict:
    """Mean PSNR of final reconstructions and of ``x0 = Phi^T y`` over ``clips``."""
    c, h, w = mask.shape
    recon, init = [], []
    with no_grad():
        for k, clip in enumerate(clips):
            gt = clip.frames[:c, :h, :w]
            meas = sample_forward(gt, mask, noise_sigma, seed=seed + k)
            out = run_dun(meas, mask, model)[-1].data
            x0 = init_state(meas, mask).x.data[0]
            recon.append(psnr(gt, out))
            init.append(psnr(gt, x0))
    return {"psnr": float(np.mean(recon)), "init_psnr": float(np.mean(init)), "cs_ratio": c}


def _draw_batch(dataset, order, rng, c, ph, pw, dtype):
    frames = []
    for idx in order:
        clip = dataset[idx].frames
        t, h, w = clip.shape
        if t < c or h < ph or w < pw:
            log.warning("skipping clip %d: shape %s too small for c'=%d and %dx%d patches", idx, clip.shape, c, ph, pw)
            continue
        t0 = int(rng.integers(t - c + 1))
        i0 = int(rng.integers(h - ph + 1))
        j0 = int(rng.integers(w - pw + 1))
        frames.append(clip[t0:t0 + c, i0:i0 + ph, j0:j0 + pw])
    if not frames:
        return None
    return np.stack(frames).astype(dtype)


def train_loop(dataset: list[VideoCube], master_mask: MaskStack, cfg: TrainConfig,
               model: SpaDunParams | None = None, resume: Checkpoint | None = None,
               val_set: list[VideoCube] | None = None, log_sink=None) -> TrainResult:
    """Train with sampling augmentation; deterministic given ``cfg.seed``.

    Each step draws a mask sub-block and matching video patches from a
    generator seeded by ``(seed, step)`` and clip order from ``(seed, epoch)``,
    so a run resumed from a checkpoint continues exactly where it stopped.
    ``log_sink`` is called with every epoch record.
    """
    if not dataset:
        raise ValueError("empty dataset")
    sc = cfg.sampling
    if resume is not None:
        model = model or model_from_checkpoint(resume, cfg.model)
        if resume.meta.get("seed") != cfg.seed:
            raise ValueError(f"checkpoint seed {resume.meta.get('seed')} != config seed {cfg.seed}")
        opt = optim_from_checkpoint(resume, OptimState(weight_decay=cfg.weight_decay))
        step = int(resume.meta.get("step", 0)) if not resume.partial else 0
    else:
        model = model or build_spadun(cfg.model, cfg.seed)
        opt = OptimState(lr=cfg.schedule.lr(0), weight_decay=cfg.weight_decay)
        step = 0
    params = model.named_parameters()
    dtype = model.dtype
    per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = cfg.epochs * per_epoch
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)
    unseen = cfg.unseen_ratio if cfg.unseen_ratio is not None else default_unseen_ratio(sc.ratio_set)
    records, step_losses, epoch_losses = [], [], []

    while step < total:
        epoch, pos = divmod(step, per_epoch)
        opt.lr = cfg.schedule.lr(epoch)
        order = epoch_order(cfg.seed, epoch, len(dataset))[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        rng = step_rng(cfg.seed, step)
        mask, _ = sample_augment(master_mask, sc, rng)
        gt = _draw_batch(dataset, order, rng, mask.cs_ratio, sc.patch_h, sc.patch_w, dtype)
        step += 1
        if gt is not None:
            meas = sample_forward(gt, mask, sc.noise_sigma, seed=int(rng.integers(2**32)))
            outputs = run_dun(meas, mask, model)
            value = loss(outputs, gt, cfg.loss, model.num_stages)
            model.zero_grad()
            value.backward()
            optimizer_step(params, None, opt)
            step_losses.append(float(value.data))
            epoch_losses.append(step_losses[-1])
        if step % per_epoch == 0 or step == total:
            rec = {"epoch": epoch, "step": step, "lr": opt.lr,
                   "loss": float(np.mean(epoch_losses)) if epoch_losses else float("nan")}
            if val_set and ((epoch + 1) % cfg.val_every == 0 or step == total):
                h, w = sc.patch_h, sc.patch_w
                seen = evaluate(model, val_set, fixed_crop(master_mask, sc.ratio_set[-1], h, w))
                rec["val_psnr_seen"] = seen["psnr"]
                if unseen is not None:
                    rec["val_psnr_unseen"] = evaluate(model, val_set, fixed_crop(master_mask, unseen, h, w))["psnr"]
            records.append(rec)
            epoch_losses = []
            if log_sink is not None:
                log_sink(rec)

    meta = {"seed": cfg.seed, "step": step, "epoch": step // per_epoch, "schedule": asdict(cfg.schedule),
            "pattern": master_mask.pattern, "mask_seed": master_mask.seed,
            "mask_shape": list(master_mask.shape), "ratio_set": list(sc.ratio_set), "batch_size": cfg.batch_size,
            "patch": [sc.patch_h, sc.patch_w]}
    return TrainResult(model, opt, make_checkpoint(model, opt, meta), records, step_losses)


def num_zero_grad(model: SpaDunParams) -> tuple[int, int]:
    """(parameters whose gradient is missing or all zero, total parameters)."""
    ps = model.parameters()
    return sum(1 for p in ps if p.grad is None or not np.any(p.grad)), len(ps)

