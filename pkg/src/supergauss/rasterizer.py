"""Depth-sorted alpha compositing of projected Gaussians, with an analytic backward pass.

All Gaussians of a view are evaluated against all pixels as dense (M, P) arrays;
footprint, skip and early-termination rules are applied as masks so the result is
identical to per-pixel sequential compositing.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .scene import COV2D_FLOOR, NEAR_PLANE, Camera, GaussianSet, project_gaussians, projection_vjp


@dataclass(frozen=True)
class RenderSettings:
    alpha_max: float = 0.99
    skip_threshold: float = 1.0 / 255.0
    early_stop: float = 1e-4
    footprint: bool = True
    footprint_sigma: float = 3.0
    depth_eps: float = 1e-8
    near: float = NEAR_PLANE
    cov_floor: float = COV2D_FLOOR
    tile_size: int = 16     # pixels per tile side when footprint culling is on

    def exact(self) -> "RenderSettings":
        """Footprint culling, skip threshold and early termination all disabled."""
        return replace(self, footprint=False, skip_threshold=0.0, early_stop=0.0)


@dataclass
class RenderOutput:
    color: np.ndarray   # (H, W, 3)
    depth: np.ndarray   # (H, W)
    alpha: np.ndarray   # (H, W)
    transmittance: np.ndarray  # (H, W) residual after the last contributor
    order: np.ndarray   # (M,) Gaussian indices front to back
    _weights: object = field(default=None, repr=False)

    @property
    def weights(self) -> np.ndarray:
        """(M, P) compositing weights w_i per pixel, assembled on first access."""
        if callable(self._weights):
            self._weights = self._weights()
        return self._weights

    def contributions(self, u: int, v: int) -> list[tuple[int, float]]:
        p = v * self.color.shape[1] + u
        w = self.weights[:, p]
        return [(int(self.order[i]), float(w[i])) for i in np.nonzero(w)[0]]


def evaluate_alpha(mean2d, cov2d, opacity: float, pixel, settings: RenderSettings = RenderSettings()) -> float:
    """Opacity-scaled 2D Gaussian at ``pixel`` with clamp and skip rules; 0 when skipped."""
    cov2d = np.asarray(cov2d, dtype=float)
    if np.linalg.det(cov2d) <= 0 or cov2d[0, 0] <= 0:
        raise RuntimeError("cov2d is not positive definite")
    d = np.asarray(pixel, float) - np.asarray(mean2d, float)
    a = opacity * np.exp(-0.5 * d @ np.linalg.solve(cov2d, d))
    a = min(a, settings.alpha_max)
    return 0.0 if a < settings.skip_threshold else float(a)


def composite(contributions, background=(0.0, 0.0, 0.0), settings: RenderSettings = RenderSettings()):
    """Front-to-back compositing of ``(alpha, color, depth)`` triples already sorted by depth.

    Returns ``(color, depth, alpha, weights)``.
    """
    color = np.zeros(3)
    t = 1.0
    weights = []
    depth_sum = 0.0
    for alpha, c, z in contributions:
        if t < settings.early_stop:
            break
        w = alpha * t
        weights.append(w)
        color += w * np.asarray(c, float)
        depth_sum += w * z
        t *= 1.0 - alpha
    acc = float(np.sum(weights)) if weights else 0.0
    color += t * np.asarray(background, float)
    return color, depth_sum / max(acc, settings.depth_eps), acc, weights


def pixel_centers(cam: Camera) -> np.ndarray:
    vs, us = np.mgrid[0:cam.height, 0:cam.width]
    return np.stack([us.ravel() + 0.5, vs.ravel() + 0.5], axis=1)


class _Block:
    """Dense evaluation of a depth-ordered Gaussian subset against a pixel subset."""

    def __init__(self, fwd, rows, pix):
        s = fwd.settings
        self.rows, self.pix = rows, pix
        px = fwd.pixels[pix]
        mean, conic = fwd.mean[rows], fwd.conic[rows]
        self.conic = conic
        dx = px[None, :, 0] - mean[:, 0, None]
        dy = px[None, :, 1] - mean[:, 1, None]
        self.dx, self.dy = dx, dy
        power = -0.5 * (conic[:, 0, 0, None] * dx * dx + (conic[:, 0, 1, None] + conic[:, 1, 0, None]) * dx * dy
                        + conic[:, 1, 1, None] * dy * dy)
        self.gauss = np.exp(power)
        raw = fwd.opac[rows][:, None] * self.gauss
        self.raw = raw
        live = np.ones(raw.shape, dtype=bool)
        if s.footprint:
            live &= (np.abs(dx) <= fwd.rx[rows, None]) & (np.abs(dy) <= fwd.ry[rows, None])
        clamped = raw > s.alpha_max
        alpha = np.where(clamped, s.alpha_max, raw)
        if s.skip_threshold > 0:
            live &= alpha >= s.skip_threshold
        alpha = np.where(live, alpha, 0.0)
        trans = _transmittance(alpha)
        if s.early_stop > 0:
            included = trans >= s.early_stop
            live &= included
            alpha = np.where(included, alpha, 0.0)
            trans = _transmittance(alpha)
        self.alpha, self.trans = alpha, trans
        self.grad_mask = live & ~clamped
        self.weights = alpha * trans
        self.t_final = trans[-1] * (1.0 - alpha[-1]) if len(rows) else np.ones(len(pix))


def _transmittance(alpha):
    if len(alpha) == 0:
        return alpha
    t = np.cumprod(1.0 - alpha, axis=0)
    return np.concatenate([np.ones((1, alpha.shape[1])), t[:-1]], axis=0)


class _Forward:
    """Forward state kept for the backward pass.

    With footprint culling on, pixels are processed in square tiles holding only the
    Gaussians whose footprint box reaches a pixel center of the tile; the dropped
    Gaussians would contribute alpha = 0 there, so results are unchanged.
    """

    def __init__(self, positions, rotations, log_scales, colors, opacities, cam, background, settings):
        s = settings
        self.cam, self.settings = cam, s
        self.rotations, self.log_scales = rotations, log_scales
        self.background = np.asarray(background, float)
        proj = project_gaussians(positions, rotations, log_scales, cam, s.near, s.cov_floor)
        self.proj = proj
        vis = np.nonzero(proj.visible)[0]
        order = vis[np.lexsort((vis, proj.depth[vis]))]
        self.order = order
        self.pixels = pixel_centers(cam)
        self.n_pix = len(self.pixels)
        self.mean = proj.mean2d[order]
        cov = proj.cov2d[order]
        self.cov = cov
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
        self.conic = np.stack([np.stack([cov[:, 1, 1], -cov[:, 0, 1]], -1),
                               np.stack([-cov[:, 1, 0], cov[:, 0, 0]], -1)], 1) / det[:, None, None]
        self.rx = s.footprint_sigma * np.sqrt(cov[:, 0, 0])
        self.ry = s.footprint_sigma * np.sqrt(cov[:, 1, 1])
        self.opac = np.asarray(opacities, float)[order]
        self.colors = np.asarray(colors, float)[order]
        self.depths = proj.depth[order]
        self.blocks = [_Block(self, rows, pix) for rows, pix in self._tiles()]
        self.acc = np.zeros(self.n_pix)
        self.depth_num = np.zeros(self.n_pix)
        self.color = np.zeros((self.n_pix, 3))
        self.t_final = np.ones(self.n_pix)
        for b in self.blocks:
            self.acc[b.pix] = b.weights.sum(axis=0)
            self.depth_num[b.pix] = self.depths[b.rows] @ b.weights
            self.color[b.pix] = b.weights.T @ self.colors[b.rows]
            self.t_final[b.pix] = b.t_final
        self.color += self.t_final[:, None] * self.background[None]
        self.acc_safe = np.maximum(self.acc, s.depth_eps)

    def _tiles(self):
        m = len(self.order)
        all_rows = np.arange(m)
        w, h = self.cam.width, self.cam.height
        size = self.settings.tile_size
        if not self.settings.footprint or size <= 0 or (size >= w and size >= h):
            yield all_rows, np.arange(self.n_pix)
            return
        grid = np.arange(self.n_pix).reshape(h, w)
        for v0 in range(0, h, size):
            v1 = min(v0 + size, h)
            for u0 in range(0, w, size):
                u1 = min(u0 + size, w)
                hit = ((self.mean[:, 0] + self.rx >= u0 + 0.5) & (self.mean[:, 0] - self.rx <= u1 - 0.5)
                       & (self.mean[:, 1] + self.ry >= v0 + 0.5) & (self.mean[:, 1] - self.ry <= v1 - 0.5))
                yield all_rows[hit], grid[v0:v1, u0:u1].ravel()

    def dense_weights(self) -> np.ndarray:
        weights = np.zeros((len(self.order), self.n_pix))
        for b in self.blocks:
            weights[np.ix_(b.rows, b.pix)] = b.weights
        return weights

    def output(self) -> RenderOutput:
        h, w = self.cam.height, self.cam.width
        depth = self.depth_num / self.acc_safe
        return RenderOutput(self.color.reshape(h, w, 3), depth.reshape(h, w), self.acc.reshape(h, w),
                            self.t_final.reshape(h, w), self.order, self.dense_weights)

    def backward(self, grad_color, grad_depth, grad_alpha):
        """Gradients w.r.t. (positions, rotations, log_scales, colors, opacities) of all N Gaussians."""
        n = len(self.proj.depth)
        gc_all = np.asarray(grad_color, float).reshape(-1, 3)
        gd_all = np.asarray(grad_depth, float).reshape(-1)
        ga_all = np.asarray(grad_alpha, float).reshape(-1)
        grads_full = [np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros((n, 3)), np.zeros(n)]
        m = len(self.order)
        if m == 0:
            return grads_full
        g_mean, g_conic = np.zeros((m, 2)), np.zeros((m, 2, 2))
        g_color, g_depth, g_opac = np.zeros((m, 3)), np.zeros(m), np.zeros(m)
        gd_eff_all = gd_all / self.acc_safe
        corr_all = np.where(self.acc > self.settings.depth_eps, self.depth_num / self.acc_safe, 0.0)
        g_tfinal_all = gc_all @ self.background
        for b in self.blocks:
            if len(b.rows) == 0:
                continue
            rows, pix = b.rows, b.pix
            gc, ga, gd_eff = gc_all[pix], ga_all[pix], gd_eff_all[pix]
            depths = self.depths[rows]
            w, alpha, trans = b.weights, b.alpha, b.trans
            # dL/dw_i per pixel, holding the residual transmittance separate
            gw = self.colors[rows] @ gc.T + ga[None, :] + gd_eff[None, :] * (depths[:, None] - corr_all[pix][None, :])
            wg = w * gw
            suffix = np.cumsum(wg[::-1], axis=0)[::-1]
            after = (np.concatenate([suffix[1:], np.zeros((1, wg.shape[1]))], axis=0)
                     + (b.t_final * g_tfinal_all[pix])[None])
            g_alpha = trans * gw - after / (1.0 - alpha)
            g_raw = np.where(b.grad_mask, g_alpha, 0.0)
            g_opac[rows] += np.sum(g_raw * b.gauss, axis=1)
            g_power = g_raw * b.raw
            c = b.conic
            dx, dy = b.dx, b.dy
            g_mean[rows, 0] += np.sum(g_power * (c[:, 0, 0, None] * dx + c[:, 0, 1, None] * dy), axis=1)
            g_mean[rows, 1] += np.sum(g_power * (c[:, 1, 0, None] * dx + c[:, 1, 1, None] * dy), axis=1)
            gxy = -0.5 * np.sum(g_power * dx * dy, axis=1)
            g_conic[rows, 0, 0] += -0.5 * np.sum(g_power * dx * dx, axis=1)
            g_conic[rows, 0, 1] += gxy
            g_conic[rows, 1, 0] += gxy
            g_conic[rows, 1, 1] += -0.5 * np.sum(g_power * dy * dy, axis=1)
            g_color[rows] += w @ gc
            g_depth[rows] += w @ gd_eff
        c = self.conic
        g_cov = -c @ g_conic @ c
        o = self.order
        gm, gcov, gz = np.zeros((n, 2)), np.zeros((n, 2, 2)), np.zeros(n)
        gm[o], gcov[o], gz[o] = g_mean, g_cov, g_depth
        gpos, gq, gls = projection_vjp(self.proj, self.log_scales, self.rotations, self.cam, gm, gcov, gz)
        grads_full[0], grads_full[1], grads_full[2] = gpos, gq, gls
        grads_full[3][o] = g_color
        grads_full[4][o] = g_opac
        return grads_full


def render(positions, rotations, log_scales, colors, opacities, cam: Camera, background=(0.0, 0.0, 0.0),
           settings: RenderSettings = RenderSettings()) -> RenderOutput:
    """Render effective (activated) attributes: opacities in (0, 1), colors in [0, 1]."""
    return _Forward(positions, rotations, log_scales, colors, opacities, cam, background, settings).output()


def render_scene(scene: GaussianSet, cam: Camera, settings: RenderSettings = RenderSettings()) -> RenderOutput:
    return render(scene.positions, scene.rotations, scene.log_scales, scene.colors, scene.opacities, cam,
                  scene.background, settings)


def render_backward(positions, rotations, log_scales, colors, opacities, cam, grad_color, grad_depth=None,
                    grad_alpha=None, background=(0.0, 0.0, 0.0), settings: RenderSettings = RenderSettings()):
    """Gradients of sum(grad_color * C + grad_depth * D + grad_alpha * A) w.r.t. every attribute."""
    fwd = _Forward(positions, rotations, log_scales, colors, opacities, cam, background, settings)
    h, w = cam.height, cam.width
    grad_depth = np.zeros((h, w)) if grad_depth is None else grad_depth
    grad_alpha = np.zeros((h, w)) if grad_alpha is None else grad_alpha
    return fwd.backward(grad_color, grad_depth, grad_alpha)


def render_tensor(positions, rotations, log_scales, colors, opacities, cam: Camera, background=(0.0, 0.0, 0.0),
                  settings: RenderSettings = RenderSettings()) -> ag.Tensor:
    """Differentiable render; returns an (H, W, 5) tensor of [r, g, b, depth, alpha]."""
    inputs = [ag.as_tensor(t) for t in (positions, rotations, log_scales, colors, opacities)]
    fwd = _Forward(*(t.value for t in inputs), cam, background, settings)
    out = fwd.output()
    value = np.concatenate([out.color, out.depth[..., None], out.alpha[..., None]], axis=-1)

    def vjp(g):
        return fwd.backward(g[..., :3], g[..., 3], g[..., 4])

    t = ag.custom("render", inputs, value, vjp)
    t.aux = out
    return t
