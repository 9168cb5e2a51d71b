"""Training losses (photometric, mask, intra-group position regularizers) and evaluation metrics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from . import autograd as ag
from .scene import InvalidParameterError

SSIM_KERNEL = ag.gaussian_kernel(11, 1.5)
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PSNR_CAP = 100.0


@dataclass
class LossWeights:
    ssim_blend: float = 0.8      # weight of L1; (1 - blend) goes to the SSIM term
    pos: float = 0.2
    mask: float = 0.1
    avg: float = 1.0
    ctr: float = 1.0
    eps: float = 1e-8

    def __post_init__(self):
        if not 0.0 <= self.ssim_blend <= 1.0:
            raise InvalidParameterError("ssim_blend must lie in [0, 1]")
        if min(self.pos, self.mask, self.avg, self.ctr) < 0 or self.eps <= 0:
            raise InvalidParameterError("loss weights must be non-negative and eps positive")


def l1_loss(rendered, target, mask=None):
    diff = ag.abs(ag.sub(rendered, np.asarray(target, float)))
    if mask is None:
        return ag.mean(diff)
    m = np.asarray(mask, float)
    m = np.broadcast_to(m[..., None] if m.ndim == diff.ndim - 1 else m, diff.shape)
    return ag.mul(ag.sum(ag.mul(diff, m)), 1.0 / max(m.sum(), 1.0))


def ssim_tensor(a, b, kernel=SSIM_KERNEL):
    """Mean SSIM over an (H, W[, C]) image pair, differentiable in both arguments."""
    a, b = ag.as_tensor(a), ag.as_tensor(b)
    mu_a = ag.gaussian_filter(a, kernel)
    mu_b = ag.gaussian_filter(b, kernel)
    var_a = ag.gaussian_filter(a * a, kernel) - mu_a * mu_a
    var_b = ag.gaussian_filter(b * b, kernel) - mu_b * mu_b
    cov = ag.gaussian_filter(a * b, kernel) - mu_a * mu_b
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return ag.mean(num / den)


def ssim(a, b) -> float:
    return float(ssim_tensor(np.asarray(a, float), np.asarray(b, float)).value)


def mask_loss(alpha, mask):
    """Mean squared difference between accumulated alpha and a binary mask."""
    alpha = ag.as_tensor(alpha)
    mask = np.asarray(mask, float)
    if alpha.shape != mask.shape:
        raise InvalidParameterError(f"mask_loss: alpha {alpha.shape} vs mask {mask.shape}")
    return ag.mean(ag.square(ag.sub(alpha, mask)))


def intra_group_edges(edges, assignment) -> np.ndarray:
    edges = np.asarray(edges).reshape(-1, 2)
    return edges[assignment[edges[:, 0]] == assignment[edges[:, 1]]]


def d_avg(positions, edges, eps: float = 1e-8):
    """Mean over Gaussians of the degree-normalized distance to their graph neighbors.

    ``edges`` are unordered pairs; both orientations contribute.
    """
    x = ag.as_tensor(positions)
    n = x.shape[0]
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    directed = np.concatenate([edges, edges[:, ::-1]])
    deg = np.bincount(directed[:, 0], minlength=n).astype(float)
    w = 1.0 / (deg[directed[:, 0]] + eps)
    dist = ag.l2_norm(ag.gather_rows(x, directed[:, 0]) - ag.gather_rows(x, directed[:, 1]), axis=1)
    return ag.mul(ag.sum(ag.mul(dist, w)), 1.0 / n)


def d_ctr(positions, assignment, eps: float = 1e-8):
    """Mean squared distance of each Gaussian to its (epsilon-damped) group centroid."""
    x = ag.as_tensor(positions)
    assignment = np.asarray(assignment, dtype=np.int64)
    g = int(assignment.max()) + 1
    counts = np.bincount(assignment, minlength=g).astype(float)
    centroid = ag.mul(ag.segment_sum(x, assignment, g), (1.0 / (counts + eps))[:, None])
    diff = x - ag.gather_rows(centroid, assignment)
    return ag.mul(ag.sum(ag.square(diff)), 1.0 / x.shape[0])


def l_pos(avg, ctr, w: LossWeights = LossWeights()):
    return w.avg * avg + w.ctr * ctr


def l_total(l1, ssim_loss, pos, mask, w: LossWeights = LossWeights()):
    return w.ssim_blend * l1 + (1.0 - w.ssim_blend) * ssim_loss + w.pos * pos + w.mask * mask


# -- metrics ----------------------------------------------------------------

def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    return PSNR_CAP if mse < 1e-10 else min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _valid(d, ref, valid):
    d, ref = np.asarray(d, float).ravel(), np.asarray(ref, float).ravel()
    valid = np.ones(d.shape, bool) if valid is None else np.asarray(valid, bool).ravel()
    if not valid.any():
        raise InvalidParameterError("empty valid mask")
    return d[valid], ref[valid]


def depth_mae(d, d_ref, valid=None) -> float:
    d, ref = _valid(d, d_ref, valid)
    return float(np.mean(np.abs(d - ref)))


def srocc(d, d_ref, valid=None) -> float:
    """Spearman correlation: Pearson correlation of average-tie ranks."""
    d, ref = _valid(d, d_ref, valid)
    ra, rb = rankdata(d), rankdata(ref)
    ra, rb = ra - ra.mean(), rb - rb.mean()
    den = np.sqrt(np.sum(ra * ra) * np.sum(rb * rb))
    return float(np.sum(ra * rb) / den) if den > 0 else 0.0
