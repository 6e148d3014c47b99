"""Trainable Occ-SDF fields.

One geometry MLP with three heads (SDF, occupancy logit, geometry feature),
one appearance MLP with two heads (direct colour, hidden feature) and a
small decoder that maps a composited feature back to colour. Gradients come
from ``torch.autograd``; the spatial SDF gradient is built with
``create_graph=True`` so losses on it (eikonal, normals) differentiate
through to the weights.
"""
from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

CHECKPOINT_MAGIC = b"OCCSDFCK"
CHECKPOINT_VERSION = 1


class UsageError(RuntimeError):
    """Raised for calls made out of order, e.g. a backward pass with no recorded forward."""


class CheckpointError(ValueError):
    pass


@dataclass
class FieldConfig:
    pos_frequencies: int = 6
    dir_frequencies: int = 4
    geo_hidden: int = 128
    geo_layers: int = 4
    softplus_beta: float = 100.0
    geo_feature_dim: int = 64
    app_hidden: int = 128
    app_layers: int = 2
    feature_dim: int = 256
    decoder_hidden: int = 256
    decoder_output: str = "sigmoid"  # or "linear"
    init_radius: float = 0.5
    init_beta: float = 0.1
    init_alpha: Optional[float] = None  # defaults to 1 / init_beta
    scale_floor: float = 1e-4
    occ_init_sharpness: float = 10.0
    # optional regression of the initialised trunk onto the exact sphere SDF
    init_fit_steps: int = 0
    init_fit_extent: float = 1.0

    def architecture_hash(self) -> str:
        keys = ("pos_frequencies", "dir_frequencies", "geo_hidden", "geo_layers", "geo_feature_dim",
                "app_hidden", "app_layers", "feature_dim", "decoder_hidden")
        arch = {k: getattr(self, k) for k in keys}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()[:16]


class PositionalEncoding(nn.Module):
    """``[x, sin(2^0 x), cos(2^0 x), ..., sin(2^{L-1} x), cos(2^{L-1} x)]``."""

    def __init__(self, num_frequencies: int, include_input: bool = True):
        super().__init__()
        if num_frequencies < 0:
            raise ValueError("num_frequencies must be >= 0")
        self.num_frequencies = num_frequencies
        self.include_input = include_input

    def output_dim(self, input_dim: int = 3) -> int:
        return input_dim * (2 * self.num_frequencies + int(self.include_input))

    def forward(self, x: Tensor) -> Tensor:
        parts = [x] if self.include_input else []
        for k in range(self.num_frequencies):
            scaled = (2.0**k) * x
            parts += [torch.sin(scaled), torch.cos(scaled)]
        if not parts:
            return x[..., :0]
        return torch.cat(parts, dim=-1)


def encode(pe: PositionalEncoding, x: Tensor) -> Tensor:
    return pe(x)


class GeometryField(nn.Module):
    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.encoding = PositionalEncoding(cfg.pos_frequencies)
        in_dim = self.encoding.output_dim(3)
        dims = [in_dim] + [cfg.geo_hidden] * cfg.geo_layers
        self.trunk = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.act = nn.Softplus(beta=cfg.softplus_beta)
        self.sdf_head = nn.Linear(cfg.geo_hidden, 1)
        self.occ_head = nn.Linear(cfg.geo_hidden, 1)
        self.feature_head = nn.Linear(cfg.geo_hidden, cfg.geo_feature_dim)
        self._geometric_init(cfg)
        if cfg.init_fit_steps > 0:
            with torch.enable_grad():
                self._fit_sphere(cfg)

    @torch.no_grad()
    def _geometric_init(self, cfg: FieldConfig):
        # sphere initialisation: the untrained SDF is roughly ||x|| - init_radius
        for i, layer in enumerate(self.trunk):
            out_dim = layer.weight.shape[0]
            nn.init.normal_(layer.weight, 0.0, math.sqrt(2.0) / math.sqrt(out_dim))
            nn.init.zeros_(layer.bias)
            if i == 0:
                layer.weight[:, 3:] = 0.0
        nn.init.normal_(self.sdf_head.weight, math.sqrt(math.pi) / math.sqrt(cfg.geo_hidden), 1e-4)
        nn.init.constant_(self.sdf_head.bias, -cfg.init_radius)
        # occupancy logit starts as -k * sdf so both heads agree on the initial surface
        self.occ_head.weight.copy_(-cfg.occ_init_sharpness * self.sdf_head.weight)
        self.occ_head.bias.copy_(-cfg.occ_init_sharpness * self.sdf_head.bias)

    def _fit_sphere(self, cfg: FieldConfig, points: int = 1024, lr: float = 1e-3):
        # A narrow trunk only matches ||x|| - r up to O(1/sqrt(width)) noise; a short
        # regression on value and gradient removes most of it. Draws from the global RNG,
        # which the field constructor seeds.
        params = list(self.trunk.parameters()) + list(self.sdf_head.parameters())
        opt = torch.optim.Adam(params, lr=lr)
        for _ in range(cfg.init_fit_steps):
            p = (torch.rand(points, 3) * 2.0 - 1.0) * cfg.init_fit_extent
            p.requires_grad_(True)
            sdf = self.forward(p)[0]
            (grad,) = torch.autograd.grad(sdf.sum(), p, create_graph=True)
            radius = p.norm(dim=-1).clamp_min(1e-6)
            target_grad = p / radius[:, None]
            loss = (sdf - (radius - cfg.init_radius)).abs().mean() + (grad - target_grad).norm(dim=-1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            self.occ_head.weight.copy_(-cfg.occ_init_sharpness * self.sdf_head.weight)
            self.occ_head.bias.copy_(-cfg.occ_init_sharpness * self.sdf_head.bias)
        self.zero_grad(set_to_none=True)

    def forward(self, p: Tensor):
        h = self.encoding(p)
        for layer in self.trunk:
            h = self.act(layer(h))
        sdf = self.sdf_head(h)[..., 0]
        occ = torch.sigmoid(self.occ_head(h)[..., 0])
        return sdf, occ, self.feature_head(h)


class AppearanceField(nn.Module):
    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.dir_encoding = PositionalEncoding(cfg.dir_frequencies)
        in_dim = self.dir_encoding.output_dim(3) + 3 + 3 + cfg.geo_feature_dim
        dims = [in_dim] + [cfg.app_hidden] * cfg.app_layers
        self.trunk = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.color_head = nn.Linear(cfg.app_hidden, 3)
        self.feature_head = nn.Linear(cfg.app_hidden, cfg.feature_dim)

    def forward(self, p: Tensor, view_dir: Tensor, gradient: Tensor, geo_feature: Tensor, with_feature: bool = True):
        h = torch.cat([self.dir_encoding(view_dir), p, gradient, geo_feature], dim=-1)
        for layer in self.trunk:
            h = F.relu(layer(h))
        return torch.sigmoid(self.color_head(h)), (self.feature_head(h) if with_feature else None)


class FeatureDecoder(nn.Module):
    """One hidden layer of 256 units and a sigmoid or linear colour output.

    The sigmoid keeps colours in (0, 1) but its slope ``c (1 - c)`` shrinks
    with the target colour, which brings back the dark-pixel attenuation that
    feature rendering is meant to remove. The linear output is the sigmoid's
    tangent at the origin, ``0.5 + z / 4``: same value and slope at ``z = 0``,
    no colour-dependent factor.
    """

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        if cfg.decoder_output not in ("sigmoid", "linear"):
            raise ValueError(f"decoder_output must be 'sigmoid' or 'linear', got {cfg.decoder_output!r}")
        self.hidden = nn.Linear(cfg.feature_dim, cfg.decoder_hidden)
        self.out = nn.Linear(cfg.decoder_hidden, 3)
        self.linear_output = cfg.decoder_output == "linear"

    def forward(self, feature: Tensor) -> Tensor:
        z = self.out(F.relu(self.hidden(feature)))
        return 0.5 + 0.25 * z if self.linear_output else torch.sigmoid(z)


def _inv_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class DensityScales(nn.Module):
    """Positive density scale and spread, each ``softplus(raw) + floor``."""

    def __init__(self, cfg: FieldConfig):
        super().__init__()
        self.floor = cfg.scale_floor
        alpha = cfg.init_alpha if cfg.init_alpha is not None else 1.0 / cfg.init_beta
        self.raw_alpha = nn.Parameter(torch.tensor(_inv_softplus(alpha - self.floor)))
        self.raw_beta = nn.Parameter(torch.tensor(_inv_softplus(cfg.init_beta - self.floor)))

    @property
    def alpha(self) -> Tensor:
        return F.softplus(self.raw_alpha) + self.floor

    @property
    def beta(self) -> Tensor:
        return F.softplus(self.raw_beta) + self.floor


class OccSDFField(nn.Module):
    """All trainable parameters: geometry, appearance, decoder and density scales."""

    def __init__(self, cfg: Optional[FieldConfig] = None, seed: Optional[int] = None):
        super().__init__()
        self.cfg = cfg or FieldConfig()
        gen_state = None
        if seed is not None:
            gen_state = torch.random.get_rng_state()
            torch.manual_seed(seed)
        try:
            self.geometry = GeometryField(self.cfg)
            self.appearance = AppearanceField(self.cfg)
            self.decoder = FeatureDecoder(self.cfg)
            self.scales = DensityScales(self.cfg)
        finally:
            if gen_state is not None:
                torch.random.set_rng_state(gen_state)

    @property
    def dtype(self):
        return self.scales.raw_alpha.dtype

    def sdf(self, p: Tensor) -> Tensor:
        return self.geometry(p)[0]

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def geometry_forward(field: OccSDFField, p: Tensor):
    """Returns ``(sdf, occupancy, geo_feature)``; occupancy is a sigmoid so lies in (0, 1)."""
    return field.geometry(p)


def sdf_spatial_gradient(field: OccSDFField, p: Tensor, create_graph: bool = True):
    """Exact ``d sdf / d p`` via reverse mode; returns ``(gradient, sdf, occ, geo_feature)``.

    With ``create_graph`` the gradient stays differentiable w.r.t. parameters,
    which the eikonal and normal losses need.
    """
    with torch.enable_grad():
        if not p.requires_grad:
            p = p.detach().requires_grad_(True)
        sdf, occ, feat = field.geometry(p)
        (grad,) = torch.autograd.grad(sdf, p, torch.ones_like(sdf), create_graph=create_graph)
    return grad, sdf, occ, feat


def normalize_gradient(grad: Tensor, eps: float = 1e-12) -> Tensor:
    """Unit normals from SDF gradients; falls back to +z where the gradient vanishes."""
    norm = grad.norm(dim=-1, keepdim=True)
    fallback = torch.zeros_like(grad)
    fallback[..., 2] = 1.0
    return torch.where(norm > eps, grad / norm.clamp_min(eps), fallback)


def appearance_forward(field: OccSDFField, p: Tensor, view_dir: Tensor, gradient: Tensor, geo_feature: Tensor):
    """Returns ``(direct_color, hidden_feature)``."""
    return field.appearance(p, view_dir, gradient, geo_feature)


def decode_feature(decoder: FeatureDecoder, feature: Tensor) -> Tensor:
    return decoder(feature)


def backward(field: nn.Module, outputs, adjoints=None) -> dict:
    """Vector-Jacobian product of recorded outputs w.r.t. every parameter.

    Returns a ``{name: gradient}`` dict shaped like ``field.named_parameters()``;
    parameters that the outputs do not depend on receive zeros.
    """
    if isinstance(outputs, Tensor):
        outputs = [outputs]
        adjoints = None if adjoints is None else [adjoints]
    outputs = list(outputs)
    if any(o.grad_fn is None and not o.requires_grad for o in outputs):
        raise UsageError("backward called on a tensor with no recorded forward pass")
    if adjoints is None:
        adjoints = [torch.ones_like(o) for o in outputs]
    names, params = zip(*[(n, p) for n, p in field.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(outputs, params, list(adjoints), retain_graph=True, allow_unused=True)
    return {n: (torch.zeros_like(p) if g is None else g) for n, p, g in zip(names, params, grads)}


# ---------------------------------------------------------------- checkpoints


def flatten_tensors(tensors) -> np.ndarray:
    return np.concatenate([t.detach().cpu().numpy().ravel() for t in tensors]) if tensors else np.zeros(0)


def save_checkpoint(path, field: OccSDFField, step: int = 0, optimizer_state=None, extra: Optional[dict] = None):
    """Write ``magic | u32 header length | JSON header | flat little-endian arrays``.

    The payload holds the parameters in ``named_parameters`` order, followed
    by the Adam first and second moments when ``optimizer_state`` is given.
    """
    params = [p for _, p in field.named_parameters()]
    dtype = np.dtype(str(params[0].dtype).replace("torch.", "")).newbyteorder("<")
    arrays = [flatten_tensors(params)]
    header = {
        "version": CHECKPOINT_VERSION,
        "architecture_hash": field.cfg.architecture_hash(),
        "field_config": asdict(field.cfg),
        "parameter_names": [n for n, _ in field.named_parameters()],
        "parameter_shapes": [list(p.shape) for p in params],
        "parameter_count": int(sum(p.numel() for p in params)),
        "dtype": dtype.str,
        "step": int(step),
        "has_optimizer": optimizer_state is not None,
        "extra": extra or {},
    }
    if optimizer_state is not None:
        header["optimizer_step"] = int(optimizer_state.step)
        header["optimizer_hparams"] = [optimizer_state.beta1, optimizer_state.beta2, optimizer_state.eps]
        arrays.append(flatten_tensors(optimizer_state.m))
        arrays.append(flatten_tensors(optimizer_state.v))
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=dtype).tobytes())


def read_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", data[8:12])
    try:
        header = json.loads(data[12:12 + n])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc.msg})") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    dtype = np.dtype(header["dtype"])
    flat = np.frombuffer(data[12 + n:], dtype=dtype)
    count = header["parameter_count"]
    expected = count * (3 if header["has_optimizer"] else 1)
    if flat.size != expected:
        raise CheckpointError(f"{path}: payload has {flat.size} values, header promises {expected}")
    return header, flat


def load_checkpoint(path, field: Optional[OccSDFField] = None):
    """Load parameters (and optimizer moments if stored).

    Returns ``(field, header, optimizer_arrays)`` where ``optimizer_arrays`` is
    ``None`` or ``(m_flat, v_flat)``. Passing a ``field`` whose architecture
    differs from the stored one raises :class:`CheckpointError`.
    """
    header, flat = read_checkpoint(path)
    cfg = FieldConfig(**header["field_config"])
    if field is None:
        field = OccSDFField(cfg)
        torch_dtype = getattr(torch, np.dtype(header["dtype"]).name)
        field = field.to(torch_dtype)
    elif field.cfg.architecture_hash() != header["architecture_hash"]:
        raise CheckpointError(
            f"{path}: architecture {header['architecture_hash']} does not match field "
            f"{field.cfg.architecture_hash()}"
        )
    names = [n for n, _ in field.named_parameters()]
    if names != header["parameter_names"]:
        raise CheckpointError(f"{path}: parameter layout mismatch")
    count = header["parameter_count"]
    _unflatten_into([p for _, p in field.named_parameters()], flat[:count])
    opt = None
    if header["has_optimizer"]:
        opt = (flat[count:2 * count], flat[2 * count:])
    return field, header, opt


def _unflatten_into(tensors, flat: np.ndarray):
    offset = 0
    with torch.no_grad():
        for t in tensors:
            k = t.numel()
            t.copy_(torch.from_numpy(flat[offset:offset + k].copy()).reshape(t.shape).to(t.dtype))
            offset += k


def parameter_checksum(field: nn.Module) -> str:
    h = hashlib.sha256()
    for _, p in field.named_parameters():
        h.update(p.detach().cpu().numpy().tobytes())
    return h.hexdigest()
