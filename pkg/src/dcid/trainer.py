"""Training loop, data pipeline and checkpoint format.

Data order is a pure function of the seed: the permutation of epoch ``e``
comes from ``PCG64([seed, e])`` and the crops of global step ``t`` from
``PCG64([seed, e, t])``. Runs with equal seeds therefore see identical
batches, and resuming from a checkpoint at any step continues the exact
sequence.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .align import KmaConfig, align_or_fallback
from .imagery import Homography, warp_projective
from .losses import LossConfig, multiscale_loss
from .model import DualCameraNet, ModelConfig
from .synth import ConfigError, list_samples, read_sample

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "kma_only", "kma_kpa")
LOG_COLUMNS = ["step", "lr", "l1_1", "l1_2", "l1_3", "perc_1", "perc_2", "perc_3", "total"]


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(IOError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclass
class TrainConfig:
    batch_size: int = 4
    crop_size: int = 128
    lr_init: float = 2e-4
    betas: tuple[float, float] = (0.9, 0.999)
    epochs: int = 20
    # cosine cycle length in epochs; None = one cycle over the whole run
    cycle_epochs: int | None = None
    # stop after this many steps (the schedule then spans max_steps)
    max_steps: int | None = None
    seed: int = 0
    lambda_p: float = 2.0
    grad_clip: float = 1.0
    variant: str = "kma_kpa"
    # UW/W zoom prior for KMA; None reads meta["uw_zoom"] per sample
    uw_zoom: float | None = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        self.betas = tuple(float(b) for b in self.betas)
        if self.crop_size % 8:
            raise ConfigError(f"crop_size must be divisible by 8, got {self.crop_size}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if not (self.lr_init > 0 and self.grad_clip > 0):
            raise ConfigError("lr_init and grad_clip must be positive")
        if self.cycle_epochs is not None and self.cycle_epochs < 1:
            raise ConfigError("cycle_epochs must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if self.variant not in VARIANTS:
            raise ConfigError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lambda_p < 0:
            raise ConfigError("lambda_p must be >= 0")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def model_config(self) -> ModelConfig:
        return dataclasses.replace(self.model, kpa_identity=self.variant == "kma_only")


def steps_per_epoch(n_samples: int, batch_size: int) -> int:
    return max(1, n_samples // batch_size)


def total_steps(cfg: TrainConfig, n_samples: int) -> int:
    if cfg.max_steps is not None:
        return cfg.max_steps
    return cfg.epochs * steps_per_epoch(n_samples, cfg.batch_size)


def lr_at(step: int, cfg: TrainConfig, n_samples: int) -> float:
    """Cosine annealing restarted every cycle; ``step`` counts from 0."""
    if cfg.cycle_epochs is not None:
        cycle = cfg.cycle_epochs * steps_per_epoch(n_samples, cfg.batch_size)
    else:
        cycle = total_steps(cfg, n_samples)
    t = step % cycle
    return cfg.lr_init * 0.5 * (1.0 + math.cos(math.pi * t / cycle))


# --------------------------------------------------------------------------
# data
# --------------------------------------------------------------------------

@dataclass
class TrainSample:
    sid: str
    w: np.ndarray        # uint8 H x W x 3
    uw: np.ndarray       # uint8, KMA-aligned to w
    valid: np.ndarray    # bool H x W
    gt: np.ndarray       # uint8
    kma_ok: bool


def _u8(img) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def align_sample(sample, uw_zoom: float | None = None, cached: dict | None = None):
    """KMA-align a sample's UW onto its W frame, reusing a cached homography."""
    zoom = uw_zoom if uw_zoom is not None else float(sample.meta.get("uw_zoom", 1.0))
    size = sample.w_moire.shape[:2]
    if cached is not None:
        H = Homography.from_list(cached["h"])
        out, valid = warp_projective(sample.uw, H, size)
        return out, valid, H, bool(cached["ok"])
    return align_or_fallback(sample.w_moire, sample.uw, KmaConfig(uw_zoom=zoom))


def load_training_set(root, uw_zoom: float | None = None, cache_path=None) -> list[TrainSample]:
    """Read every sample under ``root`` and run KMA once per sample.

    Homographies are cached in ``cache_path`` (JSON keyed by sample name) so
    repeated runs over the same data skip alignment.
    """
    dirs = list_samples(root)
    if not dirs:
        raise ConfigError(f"no samples under {root}")
    cache = {}
    if cache_path is not None and Path(cache_path).exists():
        cache = json.loads(Path(cache_path).read_text())
    out, dirty = [], False
    for d in dirs:
        s = read_sample(d)
        aligned, valid, H, ok = align_sample(s, uw_zoom, cache.get(d.name))
        if d.name not in cache:
            cache[d.name] = {"h": H.tolist(), "ok": ok}
            dirty = True
        if not ok:
            log.info("KMA failed on %s, using centre crop-resize", d.name)
        out.append(TrainSample(d.name, _u8(s.w_moire), _u8(aligned), valid, _u8(s.gt), ok))
    if cache_path is not None and dirty:
        Path(cache_path).parent.mkdir(parents=True, exist_ok=True)
        Path(cache_path).write_text(json.dumps(cache))
    return out


def crop_window(rng: np.random.Generator, shape, size: int) -> tuple[int, int]:
    h, w = shape[:2]
    if h < size or w < size:
        raise ConfigError(f"crop {size} larger than sample {h}x{w}")
    return int(rng.integers(0, h - size + 1)), int(rng.integers(0, w - size + 1))


def crop_triplet(s: TrainSample, y: int, x: int, size: int):
    """The same window cut from W, aligned UW, validity mask and GT."""
    sl = (slice(y, y + size), slice(x, x + size))
    return s.w[sl], s.uw[sl], s.valid[sl], s.gt[sl]


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.Generator(np.random.PCG64([seed, epoch])).permutation(n)


def make_batch(data: list[TrainSample], cfg: TrainConfig, step: int):
    """Batch for global ``step``: tensors (w, uw, valid, gt) in [0, 1]."""
    n = len(data)
    spe = steps_per_epoch(n, cfg.batch_size)
    epoch, k = divmod(step, spe)
    order = epoch_order(cfg.seed, epoch, n)
    bs = min(cfg.batch_size, n)
    idx = order[k * bs:(k + 1) * bs]
    rng = np.random.Generator(np.random.PCG64([cfg.seed, epoch, step]))
    parts = [[], [], [], []]
    for i in idx:
        y, x = crop_window(rng, data[i].w.shape, cfg.crop_size)
        for lst, arr in zip(parts, crop_triplet(data[i], y, x, cfg.crop_size)):
            lst.append(arr)
    w, uw, valid, gt = (np.stack(p) for p in parts)

    def img(a):
        return torch.from_numpy(a).permute(0, 3, 1, 2).float().div_(255.0)

    return img(w), img(uw), torch.from_numpy(valid).float().unsqueeze(1), img(gt)


# --------------------------------------------------------------------------
# model set-up per ablation variant
# --------------------------------------------------------------------------

def build_model(cfg: TrainConfig) -> DualCameraNet:
    torch.manual_seed(cfg.seed)
    model = DualCameraNet(cfg.model_config())
    apply_variant(model, cfg.variant)
    return model


def apply_variant(model: DualCameraNet, variant: str) -> None:
    """Freeze parameters so that each ablation row trains only what it owns.

    ``baseline``: alpha stays 0 and the whole UW path is frozen, which makes
    the network a single-image model. ``kma_only``: the kernel bank and its
    predictor are frozen; the model config already forces identity kernels.
    """
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    if variant == "baseline":
        with torch.no_grad():
            for a in model.alpha:
                a.zero_()
        for p in model.uw_parameters():
            p.requires_grad_(False)
    elif variant == "kma_only":
        for kpa in model.kpa:
            kpa.reset_identity()
            kpa.requires_grad_(False)


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

MAGIC = b"DCID"
VERSION = 1
SECTIONS = (b"HEAD", b"PARM", b"OPTM", b"RNGS")


def _pack_tensors(tensors) -> bytes:
    return b"".join(t.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes() for t in tensors)


def _unpack_tensors(buf: bytes, shapes, section: str):
    out, off = [], 0
    for shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        nbytes = 4 * n
        if off + nbytes > len(buf):
            raise CheckpointError(f"truncated section {section}")
        out.append(torch.from_numpy(np.frombuffer(buf, "<f4", n, off).astype(np.float32).reshape(shape)))
        off += nbytes
    if off != len(buf):
        raise CheckpointError(f"section {section} has {len(buf) - off} unexpected trailing bytes")
    return out


@dataclass
class Checkpoint:
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    params: dict[str, torch.Tensor]
    optim: dict[str, tuple[torch.Tensor, torch.Tensor]]
    optim_step: dict[str, float]
    step: int
    epoch: int
    torch_rng: torch.Tensor
    numpy_rng: dict


def save_checkpoint(path, ck: Checkpoint) -> None:
    names = list(ck.params)
    onames = list(ck.optim)
    head = {
        "model": ck.model_cfg.to_dict(),
        "train": ck.train_cfg.to_dict(),
        "step": ck.step,
        "epoch": ck.epoch,
        "params": [[n, list(ck.params[n].shape)] for n in names],
        "optim": [[n, list(ck.optim[n][0].shape), ck.optim_step[n]] for n in onames],
    }
    rng = {"torch": ck.torch_rng.numpy().tolist(), "numpy": ck.numpy_rng}
    payloads = [
        json.dumps(head).encode(),
        _pack_tensors(ck.params[n] for n in names),
        _pack_tensors(t for n in onames for t in ck.optim[n]),
        json.dumps(rng).encode(),
    ]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    for tag, p in zip(SECTIONS, payloads):
        buf.write(tag)
        buf.write(struct.pack("<Q", len(p)))
        buf.write(p)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 8 or data[:4] != MAGIC:
        raise CheckpointError("bad magic")
    (version,) = struct.unpack("<I", data[4:8])
    if version != VERSION:
        raise CheckpointError(f"unknown version {version}")
    off = 8
    raw = {}
    for tag in SECTIONS:
        name = tag.decode()
        if off + 12 > len(data):
            raise CheckpointError(f"truncated section {name}")
        if data[off:off + 4] != tag:
            raise CheckpointError(f"expected section {name}, found {data[off:off + 4]!r}")
        (n,) = struct.unpack("<Q", data[off + 4:off + 12])
        off += 12
        if off + n > len(data):
            raise CheckpointError(f"truncated section {name}")
        raw[name] = data[off:off + n]
        off += n
    try:
        head = json.loads(raw["HEAD"])
        rng = json.loads(raw["RNGS"])
    except ValueError as exc:
        raise CheckpointError(f"corrupt section HEAD/RNGS: {exc}") from exc
    pnames = [n for n, _ in head["params"]]
    ptensors = _unpack_tensors(raw["PARM"], [tuple(s) for _, s in head["params"]], "PARM")
    oshapes = []
    for _, s, _ in head["optim"]:
        oshapes += [tuple(s), tuple(s)]
    otensors = _unpack_tensors(raw["OPTM"], oshapes, "OPTM")
    optim = {n: (otensors[2 * i], otensors[2 * i + 1]) for i, (n, _, _) in enumerate(head["optim"])}
    return Checkpoint(
        model_cfg=ModelConfig.from_dict(head["model"]),
        train_cfg=TrainConfig.from_dict(head["train"]),
        params=dict(zip(pnames, ptensors)),
        optim=optim,
        optim_step={n: st for n, _, st in head["optim"]},
        step=head["step"],
        epoch=head["epoch"],
        torch_rng=torch.tensor(rng["torch"], dtype=torch.uint8),
        numpy_rng=rng["numpy"],
    )


def load_model(path) -> tuple[DualCameraNet, TrainConfig]:
    ck = load_checkpoint(path)
    model = DualCameraNet(ck.model_cfg)
    missing = set(model.state_dict()) ^ set(ck.params)
    if missing:
        raise CheckpointError(f"checkpoint does not match the model config: {sorted(missing)[:5]}")
    try:
        model.load_state_dict(ck.params)
    except RuntimeError as exc:
        raise CheckpointError(f"checkpoint does not match the model config: {exc}") from exc
    model.eval()
    return model, ck.train_cfg


# --------------------------------------------------------------------------
# the loop
# --------------------------------------------------------------------------

class Trainer:
    def __init__(self, cfg: TrainConfig, data: list[TrainSample], out_dir=None):
        if not data:
            raise ConfigError("empty dataset")
        self.cfg = cfg
        self.data = data
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = build_model(cfg)
        self.loss_cfg = LossConfig(lambda_p=cfg.lambda_p)
        self.trainable = [(n, p) for n, p in self.model.named_parameters() if p.requires_grad]
        self.opt = torch.optim.Adam([p for _, p in self.trainable], lr=cfg.lr_init, betas=cfg.betas)
        self.step = 0
        self.history: list[dict] = []

    @property
    def n_steps(self) -> int:
        return total_steps(self.cfg, len(self.data))

    @property
    def epoch(self) -> int:
        return self.step // steps_per_epoch(len(self.data), self.cfg.batch_size)

    # ---------------------------------------------------------------- state
    def checkpoint(self) -> Checkpoint:
        optim, ostep = {}, {}
        for n, p in self.trainable:
            st = self.opt.state.get(p)
            if st:
                optim[n] = (st["exp_avg"].clone(), st["exp_avg_sq"].clone())
                ostep[n] = float(st["step"])
        seq = np.random.PCG64([self.cfg.seed, self.epoch])
        return Checkpoint(self.model.cfg, self.cfg,
                          {k: v.detach().clone() for k, v in self.model.state_dict().items()},
                          optim, ostep, self.step, self.epoch, torch.get_rng_state(), seq.state)

    def save(self, path) -> None:
        save_checkpoint(path, self.checkpoint())

    @classmethod
    def resume(cls, path, data, out_dir=None) -> "Trainer":
        ck = load_checkpoint(path)
        t = cls(ck.train_cfg, data, out_dir)
        t.model.load_state_dict(ck.params)
        for n, p in t.trainable:
            if n in ck.optim:
                m, v = ck.optim[n]
                t.opt.state[p] = {"step": torch.tensor(ck.optim_step[n]), "exp_avg": m.clone(),
                                  "exp_avg_sq": v.clone()}
        t.step = ck.step
        torch.set_rng_state(ck.torch_rng)
        return t

    # ---------------------------------------------------------------- steps
    def train_step(self) -> dict:
        cfg = self.cfg
        lr = lr_at(self.step, cfg, len(self.data))
        for g in self.opt.param_groups:
            g["lr"] = lr
        w, uw, valid, gt = make_batch(self.data, cfg, self.step)
        self.model.train()
        outs = self.model(w, uw, valid)
        total, comps = multiscale_loss(outs, gt, self.loss_cfg)
        if not torch.isfinite(total):
            if self.out_dir is not None:
                self.save(self.out_dir / "last_good.ckpt")
            raise TrainingDiverged(f"non-finite loss at step {self.step}")
        self.opt.zero_grad(set_to_none=True)
        total.backward()
        torch.nn.utils.clip_grad_norm_([p for _, p in self.trainable], cfg.grad_clip)
        self.opt.step()
        row = {"step": self.step, "lr": lr, **{k: v.item() for k, v in comps.items()}, "total": total.item()}
        self.history.append(row)
        self.step += 1
        return row

    def run(self, until: int | None = None, log_every: int = 50, save_every_epoch: bool = True) -> list[dict]:
        """Train up to global step ``until`` (default: the configured budget)."""
        end = min(self.n_steps, until if until is not None else self.n_steps)
        spe = steps_per_epoch(len(self.data), self.cfg.batch_size)
        logf = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            path = self.out_dir / "metrics.csv"
            new = not path.exists() or self.step == 0
            logf = open(path, "w" if new else "a", newline="")
            writer = csv.DictWriter(logf, LOG_COLUMNS)
            if new:
                writer.writeheader()
        t0 = time.time()
        try:
            while self.step < end:
                row = self.train_step()
                if logf is not None:
                    writer.writerow(row)
                if log_every and row["step"] % log_every == 0:
                    log.info("step %d lr %.2e loss %.4f (%.2fs/step)", row["step"], row["lr"], row["total"],
                             (time.time() - t0) / (len(self.history) or 1))
                if self.out_dir is not None and save_every_epoch and self.step % spe == 0:
                    self.save(self.out_dir / "checkpoint.ckpt")
        finally:
            if logf is not None:
                logf.close()
        if self.out_dir is not None:
            self.save(self.out_dir / "checkpoint.ckpt")
        return self.history


def train(cfg: TrainConfig, data_dir, out_dir=None, resume=None, cache_path=None) -> Trainer:
    """Load data, build or resume a trainer, and run the configured budget."""
    if cache_path is None and out_dir is not None:
        cache_path = Path(out_dir) / "kma_cache.json"
    data = load_training_set(data_dir, cfg.uw_zoom, cache_path)
    t = Trainer.resume(resume, data, out_dir) if resume else Trainer(cfg, data, out_dir)
    t.run()
    return t
