"""Optimisation loop, Adam, ray batching and the dark/bright gradient probe."""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch import Tensor

from .data import Dataset, pixel_directions
from .fields import (
    FieldConfig,
    OccSDFField,
    backward,
    load_checkpoint,
    save_checkpoint,
    sdf_spatial_gradient,
)
from .losses import LossBreakdown, LossWeights, depth_loss, eikonal, normal_loss, rgb_l1, total_loss
from .renderer import SamplingConfig, render_rays
from .scenes import ray_box_interval

log = logging.getLogger(__name__)

MODES = {
    # mode: (feature-rendered colour loss, occupancy-branch losses)
    "sdf_only": (False, False),
    "feature": (True, False),
    "hybrid": (False, True),
    "full": (True, True),
}


class NumericalAbort(RuntimeError):
    def __init__(self, term: str, step: int):
        self.term = term
        self.step = step
        super().__init__(f"non-finite loss term {term!r} at step {step}")


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_rays: int = 512
    iterations: int = 2000
    mode: str = "full"
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    field: FieldConfig = field(default_factory=FieldConfig)
    eikonal_points: Optional[int] = None  # per half; defaults to batch_rays
    cosine_decay: bool = False
    log_every: int = 50
    checkpoint_every: int = 0
    probe_every: int = 0
    probe_rays: int = 64
    dtype: str = "float32"

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {sorted(MODES)}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.sampling, dict):
            self.sampling = SamplingConfig(**self.sampling)
        if isinstance(self.field, dict):
            self.field = FieldConfig(**self.field)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **hparams) -> "AdamState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], 0, **hparams)


@torch.no_grad()
def adam_step(params, grads, state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / c1)


# ---------------------------------------------------------------- ray batches


@dataclass
class RayBatch:
    origins: Tensor
    dirs: Tensor
    near: Tensor
    far: Tensor
    rgb: Tensor
    depth: Tensor
    normal: Tensor
    index: np.ndarray

    @property
    def valid(self) -> Tensor:
        return torch.isfinite(self.depth)


class RayTable:
    """Every pixel of every frame flattened into per-ray arrays.

    Rays that never enter the scene bounds get a degenerate ``[0, 1e-4]``
    interval; they render black with zero depth, which is also their target.
    """

    def __init__(self, dataset: Dataset):
        origins, dirs, rgb, depth, normal, frame_ids = [], [], [], [], [], []
        for i, frame in enumerate(dataset.frames):
            cam = frame.camera
            vv, uu = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
            d = pixel_directions(cam, uu, vv).reshape(-1, 3)
            dirs.append(d)
            origins.append(np.broadcast_to(cam.origin, d.shape))
            rgb.append(frame.rgb.reshape(-1, 3))
            depth.append(frame.depth.reshape(-1))
            normal.append(frame.normal.reshape(-1, 3))
            frame_ids.append(np.full(len(d), i))
        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.rgb = np.concatenate(rgb)
        self.depth = np.concatenate(depth)
        self.normal = np.concatenate(normal)
        self.frame_ids = np.concatenate(frame_ids)
        near, far, hit = ray_box_interval(self.origins, self.dirs, dataset.bounds)
        self.near = np.where(hit, near, 0.0)
        self.far = np.where(hit, far, 1e-4)
        self.frame_offsets = np.cumsum([0] + [f.depth.size for f in dataset.frames])

    def __len__(self):
        return len(self.depth)

    def batch(self, index: np.ndarray, dtype=torch.float32) -> RayBatch:
        t = lambda a: torch.as_tensor(np.ascontiguousarray(a[index]), dtype=dtype)
        return RayBatch(t(self.origins), t(self.dirs), t(self.near), t(self.far), t(self.rgb),
                        t(self.depth), t(self.normal), np.asarray(index))


def sample_ray_batch(table: RayTable, rng: np.random.Generator, batch_rays: int, dtype=torch.float32) -> RayBatch:
    """Uniform draw (with replacement) over all pixels of all frames."""
    if len(table) == 0:
        raise ValueError("empty dataset")
    return table.batch(rng.integers(0, len(table), size=batch_rays), dtype)


# ---------------------------------------------------------------- losses on a batch


def compute_losses(render_field: OccSDFField, batch: RayBatch, cfg: TrainConfig, bounds: np.ndarray,
                   generator: Optional[torch.Generator] = None, rng: Optional[np.random.Generator] = None):
    use_feature, use_occ = MODES[cfg.mode]
    out = render_rays(render_field, batch.origins, batch.dirs, batch.near, batch.far, cfg.sampling, generator,
                      create_graph=True, occupancy=use_occ, features=use_feature)
    zero = out.color.sum() * 0.0
    mask = batch.valid
    rgb_sdf = rgb_l1(out.color, batch.rgb)
    rgb_feat = rgb_l1(out.decoded_color, batch.rgb) if use_feature else zero

    # eikonal: half uniform in bounds, half drawn from the current ray samples
    n_eik = cfg.eikonal_points or cfg.batch_rays
    rng = rng or np.random.default_rng(0)
    lo = torch.as_tensor(bounds[0], dtype=out.color.dtype)
    hi = torch.as_tensor(bounds[1], dtype=out.color.dtype)
    uni = lo + (hi - lo) * torch.as_tensor(rng.random((n_eik, 3)), dtype=out.color.dtype)
    g_uni = sdf_spatial_gradient(render_field, uni, create_graph=True)[0]
    ray_grads = out.sdf_gradient.reshape(-1, 3)
    pick = torch.as_tensor(rng.integers(0, ray_grads.shape[0], size=n_eik))
    eik = eikonal(torch.cat([g_uni, ray_grads[pick]]).norm(dim=-1))

    depth_sdf = depth_loss(out.depth, batch.depth, mask)
    normal_sdf = normal_loss(out.normal, batch.normal, mask)
    if use_occ:
        depth_occ = depth_loss(out.occ_depth, batch.depth, mask)
        normal_occ = normal_loss(out.occ_normal, batch.normal, mask)
    else:
        depth_occ = normal_occ = zero
    breakdown = total_loss(rgb_sdf, rgb_feat, eik, depth_occ, depth_sdf, normal_occ, normal_sdf, cfg.weights)
    return breakdown, out


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    field: OccSDFField
    log: list
    probe: Optional["GradientProbe"] = None
    state: Optional[AdamState] = None


@contextlib.contextmanager
def _flush_denormals():
    # exp(-|s|/beta) underflows into denormals deep inside solids; flushing them is ~2x faster on CPU
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def _learning_rate(cfg: TrainConfig, step: int) -> float:
    if not cfg.cosine_decay:
        return cfg.learning_rate
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / cfg.iterations))


def _step_generators(seed: int, step: int):
    rng = np.random.default_rng([seed, step])
    gen = torch.Generator().manual_seed(int(rng.integers(0, 2**62)))
    return rng, gen


def train(
    cfg: TrainConfig,
    dataset: Dataset,
    bounds: Optional[np.ndarray] = None,
    out_dir=None,
    resume_from=None,
    probe_regions: Optional[dict] = None,
    callback: Optional[Callable] = None,
) -> TrainResult:
    """Run ``cfg.iterations`` Adam steps on the mode's loss.

    Every random draw at step ``k`` derives from ``(seed, k)``, so a run
    resumed from a checkpoint at step ``k`` continues bit-identically.
    Writes ``train_log.jsonl`` and checkpoints into ``out_dir`` when given.
    """
    bounds = dataset.bounds if bounds is None else np.asarray(bounds, dtype=np.float64)
    table = RayTable(dataset)
    dtype = cfg.torch_dtype
    start = 0
    if resume_from is not None:
        fld, header, opt = load_checkpoint(resume_from)
        fld = fld.to(dtype)
        params = list(fld.parameters())
        state = AdamState.zeros_like(params)
        if opt is not None:
            from .fields import _unflatten_into
            _unflatten_into(state.m, opt[0])
            _unflatten_into(state.v, opt[1])
            state.step = header["optimizer_step"]
        start = header["step"]
    else:
        fld = OccSDFField(cfg.field, seed=cfg.seed).to(dtype)
        params = list(fld.parameters())
        state = AdamState.zeros_like(params)
    names = [n for n, _ in fld.named_parameters()]

    out_path = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_path / "train_log.jsonl", "a" if resume_from else "w")
    records = []
    probe = None
    if probe_regions is not None:
        probe = GradientProbe({k: np.asarray(v) for k, v in probe_regions.items()}, cfg.mode)
    try:
        with _flush_denormals():
            if probe is not None and start == 0:
                probe.measure(fld, table, cfg, epoch=0)
            for step in range(start, cfg.iterations):
                rng, gen = _step_generators(cfg.seed, step)
                batch = sample_ray_batch(table, rng, cfg.batch_rays, dtype)
                breakdown, _ = compute_losses(fld, batch, cfg, bounds, gen, rng)
                bad = breakdown.first_nonfinite()
                if bad is not None:
                    raise NumericalAbort(bad, step)
                grads = backward(fld, breakdown.total)
                adam_step(params, [grads[n] for n in names], state, _learning_rate(cfg, step))
                done = step + 1
                if done % cfg.log_every == 0 or done == cfg.iterations or step == start:
                    line = breakdown.to_json_line(done)
                    records.append(json.loads(line))
                    if log_fh is not None:
                        log_fh.write(line + "\n")
                        log_fh.flush()
                    log.info(line)
                if probe is not None and cfg.probe_every and done % cfg.probe_every == 0:
                    probe.measure(fld, table, cfg, epoch=done // cfg.probe_every)
                if out_path is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
                    save_checkpoint(out_path / "checkpoint_last.bin", fld, done, state)
                if callback is not None:
                    callback(done, fld, breakdown)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_path is not None:
        save_checkpoint(out_path / "checkpoint_final.bin", fld, cfg.iterations, state)
    return TrainResult(fld, records, probe, state)


# ---------------------------------------------------------------- gradient probe


def regions_by_intensity(dataset: Dataset, dark_max: float = 0.05, bright_min: float = 0.5) -> dict:
    """Pixel indices (into the flattened ray table) of dark and bright surface hits."""
    dark, bright = [], []
    offset = 0
    for frame in dataset.frames:
        valid = frame.valid.reshape(-1)
        rgb = frame.rgb.reshape(-1, 3)
        dark.append(offset + np.flatnonzero(valid & (rgb.max(axis=-1) < dark_max)))
        bright.append(offset + np.flatnonzero(valid & (rgb.mean(axis=-1) > bright_min)))
        offset += valid.size
    return {"dark": np.concatenate(dark), "bright": np.concatenate(bright)}


def regions_from_blocks(dataset: Dataset, spec: dict) -> dict:
    """Regions from ``{"regions": {name: [{"frame": i, "box": [u0, v0, u1, v1]}, ...]}}``.

    Boxes are half-open pixel rectangles. Raises ``ValueError`` on malformed
    entries or overlapping regions.
    """
    if not isinstance(spec, dict) or not isinstance(spec.get("regions"), dict):
        raise ValueError("regions file needs a top-level 'regions' object")
    offsets = np.cumsum([0] + [f.depth.size for f in dataset.frames])
    out = {}
    for name, blocks in spec["regions"].items():
        idx = []
        if not isinstance(blocks, list) or not blocks:
            raise ValueError(f"regions.{name}: expected a non-empty list of blocks")
        for j, blk in enumerate(blocks):
            try:
                frame = int(blk["frame"])
                u0, v0, u1, v1 = (int(x) for x in blk["box"])
            except (KeyError, TypeError, ValueError):
                raise ValueError(f"regions.{name}[{j}]: needs 'frame' and 'box': [u0, v0, u1, v1]") from None
            if not 0 <= frame < len(dataset.frames):
                raise ValueError(f"regions.{name}[{j}].frame: {frame} out of range")
            cam = dataset.frames[frame].camera
            if not (0 <= u0 < u1 <= cam.width and 0 <= v0 < v1 <= cam.height):
                raise ValueError(f"regions.{name}[{j}].box: outside the {cam.width}x{cam.height} image")
            vv, uu = np.meshgrid(np.arange(v0, v1), np.arange(u0, u1), indexing="ij")
            idx.append(offsets[frame] + (vv * cam.width + uu).ravel())
        out[name] = np.unique(np.concatenate(idx))
    names = list(out)
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            if np.intersect1d(out[names[a]], out[names[b]]).size:
                raise ValueError(f"regions {names[a]!r} and {names[b]!r} overlap")
    return out


def check_probe_regions(table: RayTable, regions: dict, dark_max: float = 0.05, bright_min: float = 0.5):
    if "dark" not in regions or "bright" not in regions:
        raise ValueError("probe regions need 'dark' and 'bright' entries")
    dark_mean = table.rgb[regions["dark"]].mean()
    bright_mean = table.rgb[regions["bright"]].mean()
    if not dark_mean < dark_max:
        raise ValueError(f"dark region mean intensity {dark_mean:.3f} is not below {dark_max}")
    if not bright_mean > bright_min:
        raise ValueError(f"bright region mean intensity {bright_mean:.3f} is not above {bright_min}")


class GradientProbe:
    """Mean per-ray norm of d(colour loss)/d(per-sample SDF) for each pixel region.

    ``sdf_only`` and ``hybrid`` probe the directly rendered colour loss;
    ``feature`` and ``full`` probe the feature-decoded colour loss.
    """

    def __init__(self, regions: dict, mode: str, max_rays: int = 64, seed: int = 0):
        self.regions = regions
        self.mode = mode
        self.series = {name: [] for name in regions}
        self.epochs = []
        self._chosen = {}
        self._seed = seed
        self._max_rays = max_rays

    def _rays(self, name: str, n: int) -> np.ndarray:
        if name not in self._chosen:
            idx = self.regions[name]
            rng = np.random.default_rng([self._seed, len(self._chosen)])
            self._chosen[name] = np.sort(rng.choice(idx, size=min(n, len(idx)), replace=False))
        return self._chosen[name]

    def measure(self, fld: OccSDFField, table: RayTable, cfg: TrainConfig, epoch: int) -> dict:
        use_feature = MODES[self.mode][0]
        sampling = SamplingConfig(cfg.sampling.count, cfg.sampling.importance_count, deterministic=True,
                                  last_delta=cfg.sampling.last_delta)
        values = {}
        for name in self.regions:
            batch = table.batch(self._rays(name, cfg.probe_rays or self._max_rays), cfg.torch_dtype)
            out = render_rays(fld, batch.origins, batch.dirs, batch.near, batch.far, sampling,
                              create_graph=False, occupancy=False, features=use_feature, probe_sdf=True)
            pred = out.decoded_color if use_feature else out.color
            per_ray = (pred - batch.rgb).abs().sum(dim=-1)
            (g,) = torch.autograd.grad(per_ray.sum(), out.extras["sdf_leaf"])
            values[name] = float(g.norm(dim=-1).mean())
            self.series[name].append(values[name])
        self.epochs.append(epoch)
        return values

    def ratio(self, epoch_index: int = -1) -> float:
        return self.series["dark"][epoch_index] / self.series["bright"][epoch_index]

    def rows(self, tag: Optional[str] = None):
        for k, epoch in enumerate(self.epochs):
            for name in self.regions:
                row = [epoch, name, self.series[name][k]]
                yield ([tag] + row) if tag is not None else row


def write_probe_csv(path, probes: dict) -> None:
    """``probes`` maps a mode tag to a :class:`GradientProbe`."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "epoch", "region", "mean_grad_norm"])
        for tag, probe in probes.items():
            for row in probe.rows(tag):
                w.writerow([row[0], row[1], row[2], repr(row[3])])


def gradient_probe(cfg: TrainConfig, dataset: Dataset, regions: Optional[dict] = None,
                   out_dir=None) -> "GradientProbe":
    """Train in ``cfg.mode`` and record the region gradient series every ``probe_every`` steps."""
    table = RayTable(dataset)
    regions = regions_by_intensity(dataset) if regions is None else regions
    check_probe_regions(table, regions)
    if not cfg.probe_every:
        cfg = TrainConfig(**{**cfg.__dict__, "probe_every": max(1, cfg.iterations // 10)})
    return train(cfg, dataset, out_dir=out_dir, probe_regions=regions).probe
