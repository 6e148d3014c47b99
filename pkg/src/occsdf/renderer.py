"""Volume rendering over SDF densities and occupancy indicators.

Weights follow the usual front-to-back compositing ``w_i = T_i * a_i`` with
``T_i = prod_{j<i} (1 - a_j)``. For the SDF branch the opacity comes from a
Laplace-CDF density; for the occupancy branch the occupancy probability is
used as the opacity directly.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from torch import Tensor

from .fields import OccSDFField, decode_feature, normalize_gradient, sdf_spatial_gradient


@dataclass
class SamplingConfig:
    count: int = 64
    importance_count: int = 32
    deterministic: bool = False
    last_delta: Optional[float] = None  # defaults to (far - near) / count


@dataclass
class CompositeWeights:
    alphas: Tensor
    transmittances: Tensor  # T_1..T_N
    weights: Tensor
    residual: Tensor  # T_{N+1}


@dataclass
class RenderOutput:
    color: Tensor
    decoded_color: Tensor
    feature: Tensor
    depth: Tensor
    normal: Tensor
    weight_sum: Tensor
    occ_color: Optional[Tensor] = None
    occ_depth: Optional[Tensor] = None
    occ_normal: Optional[Tensor] = None
    occ_weight_sum: Optional[Tensor] = None
    ts: Optional[Tensor] = None
    deltas: Optional[Tensor] = None
    sdf: Optional[Tensor] = None
    sdf_gradient: Optional[Tensor] = None
    extras: dict = field(default_factory=dict)


def laplace_cdf(s, beta):
    """CDF of a zero-mean Laplace distribution with scale ``beta``."""
    s = torch.as_tensor(s)
    beta = torch.as_tensor(beta, dtype=s.dtype)
    # 0.5 + 0.5 sign(s) (1 - exp(-|s|/beta)) is the branch-free form of the two cases
    return 0.5 - 0.5 * torch.sign(s) * torch.expm1(-s.abs() / beta)


def sdf_to_density(sdf, alpha, beta):
    return alpha * laplace_cdf(-torch.as_tensor(sdf), beta)


def _exclusive_cumprod(x: Tensor) -> Tensor:
    ones = torch.ones_like(x[..., :1])
    return torch.cumprod(torch.cat([ones, x], dim=-1), dim=-1)


def weights_from_alphas(alphas: Tensor) -> CompositeWeights:
    trans_all = _exclusive_cumprod(1.0 - alphas)
    trans = trans_all[..., :-1]
    return CompositeWeights(alphas, trans, trans * alphas, trans_all[..., -1])


def compute_weights_sdf(sigmas: Tensor, deltas: Tensor) -> CompositeWeights:
    if sigmas.shape != deltas.shape:
        raise ValueError(f"sigmas {tuple(sigmas.shape)} and deltas {tuple(deltas.shape)} differ")
    alphas = -torch.expm1(-sigmas * deltas)
    return weights_from_alphas(alphas)


def compute_weights_occ(occs: Tensor) -> CompositeWeights:
    return weights_from_alphas(occs)


def composite(weights: Tensor, values: Tensor) -> Tensor:
    """Weighted sum over the sample axis; ``values`` may carry a trailing channel axis."""
    if values.shape[: weights.dim()] != weights.shape:
        raise ValueError(f"weights {tuple(weights.shape)} do not match values {tuple(values.shape)}")
    if values.dim() == weights.dim():
        return (weights * values).sum(dim=-1)
    return (weights[..., None] * values).sum(dim=-2)


# ---------------------------------------------------------------- sampling


def stratified_samples(near: Tensor, far: Tensor, count: int, deterministic: bool = False,
                       generator: Optional[torch.Generator] = None) -> Tensor:
    if count < 2:
        raise ValueError("count must be >= 2")
    if torch.any(near >= far):
        raise ValueError("near must be < far for every ray")
    if deterministic:
        u = torch.full(near.shape + (count,), 0.5, dtype=near.dtype)
    else:
        u = torch.rand(near.shape + (count,), generator=generator, dtype=near.dtype)
    i = torch.arange(count, dtype=near.dtype)
    return near[..., None] + (i + u) * ((far - near) / count)[..., None]


def deltas_from_ts(ts: Tensor, cap) -> Tensor:
    cap = torch.as_tensor(cap, dtype=ts.dtype)
    last = cap.expand(ts.shape[:-1])[..., None] if cap.dim() else torch.full_like(ts[..., :1], float(cap))
    return torch.cat([ts[..., 1:] - ts[..., :-1], last], dim=-1)


def importance_samples(ts: Tensor, deltas: Tensor, weights: Tensor, count: int, deterministic: bool = False,
                       generator: Optional[torch.Generator] = None) -> Tensor:
    """Inverse-CDF draws from the piecewise-constant pdf ``w_i`` on ``[t_i, t_i + delta_i]``."""
    w = weights.detach() + 1e-5
    pdf = w / w.sum(dim=-1, keepdim=True)
    cdf = torch.cat([torch.zeros_like(pdf[..., :1]), torch.cumsum(pdf, dim=-1)], dim=-1)
    cdf[..., -1] = 1.0
    if deterministic:
        u = ((torch.arange(count, dtype=ts.dtype) + 0.5) / count).expand(ts.shape[:-1] + (count,)).contiguous()
    else:
        u = torch.rand(ts.shape[:-1] + (count,), generator=generator, dtype=ts.dtype)
    idx = torch.searchsorted(cdf, u, right=True).clamp(1, ts.shape[-1]) - 1
    c0 = torch.gather(cdf, -1, idx)
    p = torch.gather(pdf, -1, idx)
    frac = ((u - c0) / p).clamp(0.0, 1.0)
    return torch.gather(ts, -1, idx) + frac * torch.gather(deltas, -1, idx)


def sample_ray(ray, count: int = 64, deterministic: bool = True, importance_weights=None,
               importance_count: Optional[int] = None, generator: Optional[torch.Generator] = None):
    """Samples along a single :class:`~occsdf.scenes.Ray`; returns ``(ts, deltas)``.

    ``importance_weights`` (from a first pass over the stratified samples)
    triggers one resampling round of ``importance_count`` (default
    ``count // 2``) additional samples.
    """
    near = torch.tensor([ray.near], dtype=torch.float64)
    far = torch.tensor([ray.far], dtype=torch.float64)
    ts = stratified_samples(near, far, count, deterministic, generator)
    cap = (ray.far - ray.near) / count
    deltas = deltas_from_ts(ts, cap)
    if importance_weights is not None:
        extra = importance_samples(ts, deltas, torch.as_tensor(importance_weights, dtype=ts.dtype).reshape(1, -1),
                                   importance_count or count // 2, deterministic, generator)
        ts, _ = torch.sort(torch.cat([ts, extra], dim=-1), dim=-1)
        ts = ts.clamp(ray.near, ray.far)
        deltas = deltas_from_ts(ts, cap)
    return ts[0], deltas[0]


# ---------------------------------------------------------------- field rendering


def _sample_field_ts(field: OccSDFField, origins, dirs, near, far, cfg: SamplingConfig, generator):
    ts = stratified_samples(near, far, cfg.count, cfg.deterministic, generator)
    cap = cfg.last_delta if cfg.last_delta is not None else (far - near) / cfg.count
    deltas = deltas_from_ts(ts, cap)
    if cfg.importance_count > 0:
        with torch.no_grad():
            pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
            sdf = field.sdf(pts)
            sigma = sdf_to_density(sdf, field.scales.alpha, field.scales.beta)
            w = compute_weights_sdf(sigma, deltas).weights
            extra = importance_samples(ts, deltas, w, cfg.importance_count, cfg.deterministic, generator)
        ts, _ = torch.sort(torch.cat([ts, extra], dim=-1), dim=-1)
        ts = torch.minimum(torch.maximum(ts, near[:, None]), far[:, None])
        deltas = deltas_from_ts(ts, cap)
    return ts, deltas


def render_rays(
    field: OccSDFField,
    origins: Tensor,
    dirs: Tensor,
    near: Tensor,
    far: Tensor,
    cfg: Optional[SamplingConfig] = None,
    generator: Optional[torch.Generator] = None,
    create_graph: bool = True,
    occupancy: bool = True,
    features: bool = True,
    sdf_override=None,
    probe_sdf: bool = False,
) -> RenderOutput:
    """Render a batch of rays through both the SDF and occupancy branches.

    ``sdf_override`` replaces the field's SDF values (shape ``(R, S)``) in the
    density computation only; ``probe_sdf`` detaches the SDF into a leaf
    tensor (returned as ``extras['sdf_leaf']``) so callers can take loss
    gradients with respect to per-sample SDF values.
    """
    cfg = cfg or SamplingConfig()
    ts, deltas = _sample_field_ts(field, origins, dirs, near, far, cfg, generator)
    pts = origins[:, None, :] + ts[..., None] * dirs[:, None, :]
    grad, sdf, occ, geo_feat = sdf_spatial_gradient(field, pts, create_graph=create_graph)
    view = dirs[:, None, :].expand_as(pts)
    color, feature = field.appearance(pts, view, grad, geo_feat, with_feature=features)
    normals = normalize_gradient(grad)

    extras = {}
    sdf_used = sdf if sdf_override is None else sdf_override
    if probe_sdf:
        sdf_used = sdf_used.detach().requires_grad_(True)
        extras["sdf_leaf"] = sdf_used
    sigma = sdf_to_density(sdf_used, field.scales.alpha, field.scales.beta)
    wts = compute_weights_sdf(sigma, deltas)
    w = wts.weights
    feat_r = composite(w, feature) if features else None
    out = RenderOutput(
        color=composite(w, color),
        decoded_color=decode_feature(field.decoder, feat_r) if features else None,
        feature=feat_r,
        depth=composite(w, ts),
        normal=composite(w, normals),
        weight_sum=w.sum(dim=-1),
        ts=ts,
        deltas=deltas,
        sdf=sdf,
        sdf_gradient=grad,
        extras=extras,
    )
    extras["sdf_weights"] = wts
    if occupancy:
        ow = compute_weights_occ(occ).weights
        out.occ_color = composite(ow, color)
        out.occ_depth = composite(ow, ts)
        out.occ_normal = composite(ow, normals)
        out.occ_weight_sum = ow.sum(dim=-1)
    return out


def render_ray_sdf(field: OccSDFField, ray, cfg: Optional[SamplingConfig] = None, generator=None) -> RenderOutput:
    t = lambda v: torch.as_tensor(np.asarray(v)[None], dtype=field.dtype)
    return render_rays(field, t(ray.origin), t(ray.direction), t(ray.near), t(ray.far), cfg, generator,
                       create_graph=False, occupancy=False)


def render_ray_occ(occupancy_fn, ray, ts, cap=None):
    """Composite depth with occupancy weights, for any callable ``points -> occupancy``.

    ``occupancy_fn`` may be a trained field's occupancy head or an analytic
    indicator. Returns ``(depth, weight_sum, CompositeWeights)``.
    """
    ts = torch.as_tensor(ts, dtype=torch.float64)
    pts = ray.at(ts.numpy())
    occ = torch.as_tensor(np.asarray(occupancy_fn(pts), dtype=np.float64))
    wts = compute_weights_occ(occ)
    return composite(wts.weights, ts), wts.weights.sum(), wts


# ---------------------------------------------------------------- analysis


def rgb_loss_alpha_gradient(colors, alphas, gt_color, i: int) -> np.ndarray:
    """Closed-form per-channel derivative of ``|C - gt|_1`` w.r.t. ``alpha_i``.

    ``colors`` is ``(N, 3)``; the sign factor is taken as 0 where the
    rendered colour equals the target (L1 subgradient convention).
    """
    c = np.asarray(colors, dtype=np.float64)
    a = np.asarray(alphas, dtype=np.float64)
    n = len(a)
    if not 0 <= i < n:
        raise IndexError(f"sample index {i} out of range for {n} samples")
    one_minus = 1.0 - a
    trans = np.concatenate([[1.0], np.cumprod(one_minus)[:-1]])
    rendered = (trans * a) @ c
    sign = np.sign(rendered - np.asarray(gt_color, dtype=np.float64))
    term = np.prod(one_minus[:i]) * c[i]
    behind = np.zeros(3)
    for k in range(i + 1, n):
        mask = np.ones(k, dtype=bool)
        mask[i] = False
        behind += c[k] * a[k] * np.prod(one_minus[:k][mask])
    return sign * (term - behind)


@dataclass
class ToyRayReport:
    ts: np.ndarray
    sdf: np.ndarray
    sigma: np.ndarray
    weights: np.ndarray
    rendered_depth: float
    true_depth: Optional[float]
    occ_rendered_depth: float
    spacing: float
    num_weight_modes: int

    def rows(self):
        return list(zip(self.ts.tolist(), self.sdf.tolist(), self.sigma.tolist(), self.weights.tolist()))

    def summary(self) -> dict:
        return {
            "rendered_depth": self.rendered_depth,
            "true_depth": self.true_depth,
            "occ_rendered_depth": self.occ_rendered_depth,
            "sample_spacing": self.spacing,
            "num_weight_modes": self.num_weight_modes,
            "sample_count": int(len(self.ts)),
        }

    def write(self, csv_path, json_path):
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t", "sdf", "sigma", "weight"])
            writer.writerows(self.rows())
        Path(json_path).write_text(json.dumps(self.summary(), indent=2, sort_keys=True) + "\n")


def count_modes(values: np.ndarray, rel_floor: float = 1e-3) -> int:
    """Number of strict local maxima (plateau-aware) above ``rel_floor * max``."""
    v = np.asarray(values, dtype=np.float64)
    floor = rel_floor * v.max() if v.size else 0.0
    modes = 0
    i = 0
    n = len(v)
    while i < n:
        j = i
        while j + 1 < n and v[j + 1] == v[i]:
            j += 1
        left = v[i - 1] if i > 0 else -np.inf
        right = v[j + 1] if j + 1 < n else -np.inf
        if v[i] > left and v[i] > right and v[i] > floor:
            modes += 1
        i = j + 1
    return modes


def toy_ray_analysis(scene, ray, alpha: float, beta: float, sample_count: int = 128) -> ToyRayReport:
    """Render the ground-truth SDF along one ray with Laplace densities.

    Deterministic stratum midpoints are used, so ``spacing`` is exactly
    ``(far - near) / sample_count``. The occupancy comparison composites the
    analytic indicator over the same samples.
    """
    from .scenes import occupancy_query, ray_first_hit, sdf_query

    ts, deltas = sample_ray(ray, sample_count, deterministic=True)
    pts = ray.at(ts.numpy())
    sdf = torch.as_tensor(sdf_query(scene, pts))
    sigma = sdf_to_density(sdf, torch.tensor(alpha, dtype=torch.float64), torch.tensor(beta, dtype=torch.float64))
    wts = compute_weights_sdf(sigma, deltas)
    depth = float(composite(wts.weights, ts))
    occ_depth, _, _ = render_ray_occ(lambda p: occupancy_query(scene, p), ray, ts)
    return ToyRayReport(
        ts=ts.numpy(),
        sdf=sdf.numpy(),
        sigma=sigma.numpy(),
        weights=wts.weights.numpy(),
        rendered_depth=depth,
        true_depth=ray_first_hit(scene, ray),
        occ_rendered_depth=float(occ_depth),
        spacing=(ray.far - ray.near) / sample_count,
        num_weight_modes=count_modes(wts.weights.numpy()),
    )
