"""Attribute prior network: group pooling, global group attention, sparse local attention, residual heads."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .scene import InvalidParameterError

ATTRIBUTES = {"position": 3, "rotation": 4, "scale": 3, "color": 3, "opacity": 1}


@dataclass
class NetConfig:
    d_model: int = 64
    heads: int = 4
    group_freqs: int = 6
    local_freqs: int = 4
    latent_dim: int = 16
    local_k: int = 10
    use_global: bool = True
    use_local: bool = True
    position_bound: float = 0.05   # fraction of scene extent
    min_scale: float = 1e-4        # fractions of scene extent
    max_scale: float = 1.0

    def __post_init__(self):
        if self.d_model % self.heads:
            raise InvalidParameterError(f"d_model={self.d_model} is not divisible by heads={self.heads}")


@dataclass
class PriorInputs:
    """Per-scene constants for the network, fixed between (re)groupings."""

    group_ids: np.ndarray      # (N,)
    n_groups: int
    knn: np.ndarray            # (N, k) nearest first
    shape: np.ndarray          # (N, 4) linearity, scattering, verticality, planarity
    feat_mean: np.ndarray      # (13,) standardizer of the grouping features
    feat_scale: np.ndarray
    center: np.ndarray         # (3,) position normalization
    half_extent: float
    extent: float


@dataclass
class GroupTokens:
    pooled: ag.Tensor    # (G, 13): centroid followed by max-pooled remaining features
    centers: ag.Tensor   # (G, 3)
    rest: ag.Tensor      # (G, 10)


def positional_encoding(x, n_freqs: int, passthrough: bool = True):
    """Per coordinate: sin(2^k pi x), cos(2^k pi x) for k < n_freqs, coordinate-major.

    With ``passthrough`` the raw coordinates are prepended.
    """
    if n_freqs < 1:
        raise InvalidParameterError("positional encoding needs at least one frequency")
    x = ag.as_tensor(x)
    n, d = x.shape
    freqs = (2.0 ** np.arange(n_freqs)) * np.pi
    angles = ag.mul(ag.reshape(x, (n, d, 1)), freqs)                     # (N, d, L)
    pairs = ag.concat([ag.reshape(ag.sin(angles), (n, d, n_freqs, 1)),
                       ag.reshape(ag.cos(angles), (n, d, n_freqs, 1))], axis=-1)
    enc = ag.reshape(pairs, (n, 2 * d * n_freqs))
    return ag.concat([x, enc], axis=1) if passthrough else enc


def group_pool(positions, rest, group_ids, n_groups: int) -> GroupTokens:
    """Centroid of member positions plus componentwise max over the remaining features."""
    centers = ag.segment_mean(positions, group_ids, n_groups)
    pooled_rest = ag.segment_max(rest, group_ids, n_groups)
    return GroupTokens(ag.concat([centers, pooled_rest], axis=1), centers, pooled_rest)


def _split_heads(x, heads):
    n, d = x.shape[0], x.shape[-1]
    return ag.reshape(x, (n, heads, d // heads))


def attention_block(u, store, prefix, heads, neighbors=None, mask=None):
    """Multi-head attention with residual: u + W_o(GELU(concat_h softmax(q k^T / sqrt(d_h)) v)).

    ``neighbors`` (T, K) restricts each query to the listed key rows; ``None`` is dense.
    Returns the output tensor and the attention weights.
    """
    q = u @ store[prefix + "Wq"]
    k = u @ store[prefix + "Wk"]
    v = u @ store[prefix + "Wv"]
    t, d = u.shape
    dh = d // heads
    qh = _split_heads(q, heads)                                     # (T, H, dh)
    if neighbors is None:
        qh = ag.swapaxes(qh, 0, 1)                                   # (H, T, dh)
        kh = ag.swapaxes(_split_heads(k, heads), 0, 1)
        vh = ag.swapaxes(_split_heads(v, heads), 0, 1)
        scores = ag.mul(qh @ ag.swapaxes(kh, -1, -2), 1.0 / np.sqrt(dh))   # (H, T, T)
        weights = ag.softmax_rows(scores, axis=-1, mask=mask)
        heads_out = ag.swapaxes(weights @ vh, 0, 1)                  # (T, H, dh)
    else:
        kk = ag.reshape(ag.gather_rows(k, neighbors), neighbors.shape + (heads, dh))   # (T, K, H, dh)
        vv = ag.reshape(ag.gather_rows(v, neighbors), neighbors.shape + (heads, dh))
        scores = ag.mul(ag.sum(ag.reshape(qh, (t, 1, heads, dh)) * kk, axis=-1), 1.0 / np.sqrt(dh))  # (T, K, H)
        weights = ag.softmax_rows(scores, axis=1, mask=None if mask is None else mask[:, :, None])
        heads_out = ag.sum(ag.reshape(weights, weights.shape + (1,)) * vv, axis=1)     # (T, H, dh)
    mixed = ag.gelu(ag.reshape(heads_out, (t, d)))
    return u + (mixed @ store[prefix + "Wo"] + store[prefix + "bo"]), weights


def local_neighbors(knn: np.ndarray, k: int):
    """Key index sets {i} + first k neighbors, padded with i and masked when fewer exist."""
    n = len(knn)
    k_avail = min(k, knn.shape[1] if knn.ndim == 2 else 0)
    idx = np.empty((n, k + 1), dtype=np.int64)
    idx[:, 0] = np.arange(n)
    idx[:, 1:] = np.arange(n)[:, None]
    mask = np.zeros((n, k + 1), dtype=bool)
    mask[:, 0] = True
    if k_avail:
        idx[:, 1:1 + k_avail] = knn[:, :k_avail]
        mask[:, 1:1 + k_avail] = True
    return idx, mask


def _xavier(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / (fan_in + fan_out)), size=(fan_in, fan_out))


class PriorNet:
    """Parameters live in a shared ParamStore under the ``net.`` prefix."""

    def __init__(self, config: NetConfig = None):
        self.config = config or NetConfig()

    @property
    def global_in(self) -> int:
        return 3 + 6 * self.config.group_freqs + 10

    @property
    def local_in(self) -> int:
        return 3 + 6 * self.config.local_freqs + 10 + self.config.latent_dim

    @property
    def head_in(self) -> int:
        return 3 + 2 * self.config.d_model

    def init_params(self, store: ag.ParamStore, rng: np.random.Generator, zero_heads: bool = True) -> None:
        c = self.config
        d = c.d_model
        store.remove("net.")
        for prefix, fan_in in (("net.global.", self.global_in), ("net.local.", self.local_in)):
            store.add(prefix + "W_in", _xavier(rng, fan_in, d), "xavier")
            store.add(prefix + "b_in", np.zeros(d), "zeros")
            for name in ("Wq", "Wk", "Wv", "Wo"):
                store.add(prefix + name, _xavier(rng, d, d), "xavier")
            store.add(prefix + "bo", np.zeros(d), "zeros")
        for attr, out in ATTRIBUTES.items():
            p = f"net.head.{attr}."
            store.add(p + "W_a", _xavier(rng, self.head_in, d), "xavier")
            store.add(p + "b_a", np.zeros(d), "zeros")
            for layer in ("1", "2"):
                store.add(p + "W" + layer, _xavier(rng, d, d), "xavier")
                store.add(p + "b" + layer, np.zeros(d), "zeros")
            w_out = np.zeros((d, out)) if zero_heads else _xavier(rng, d, out) * 0.1
            store.add(p + "W_out", w_out, "zeros" if zero_heads else "xavier")
            store.add(p + "b_out", np.zeros(out), "zeros")

    def rest_features(self, colors, scales, inputs: PriorInputs):
        """Standardized [color, scale, shape] block of the grouping features (N, 10)."""
        mean, scale = inputs.feat_mean, inputs.feat_scale
        c = ag.mul(ag.sub(colors, mean[3:6]), 1.0 / scale[3:6])
        s = ag.mul(ag.sub(scales, mean[6:9]), 1.0 / scale[6:9])
        shape = (inputs.shape - mean[9:13]) / scale[9:13]
        return ag.concat([c, s, shape], axis=1)

    def forward(self, store, positions, colors, scales, latents, inputs: PriorInputs, trace: dict | None = None):
        """Per-attribute raw head outputs (N, dim) keyed by attribute name."""
        c = self.config
        xn = ag.mul(ag.sub(positions, inputs.center), 1.0 / inputs.half_extent)
        rest = self.rest_features(colors, scales, inputs)
        n = xn.shape[0]
        parts = []
        if c.use_global:
            tokens = group_pool(xn, rest, inputs.group_ids, inputs.n_groups)
            g_in = ag.concat([positional_encoding(tokens.centers, c.group_freqs), tokens.rest], axis=1)
            u = ag.layer_norm(g_in) @ store["net.global.W_in"] + store["net.global.b_in"]
            e, w_global = attention_block(u, store, "net.global.", c.heads)
            parts.append(ag.gather_rows(e, inputs.group_ids))
            if trace is not None:
                trace.update(tokens=tokens, group_input=u, group_embed=e, global_weights=w_global)
        else:
            parts.append(ag.as_tensor(np.zeros((n, c.d_model))))
        if c.use_local:
            l_in = ag.concat([positional_encoding(xn, c.local_freqs), rest, latents], axis=1)
            t = ag.layer_norm(l_in) @ store["net.local.W_in"] + store["net.local.b_in"]
            idx, mask = local_neighbors(inputs.knn, c.local_k)
            local, w_local = attention_block(t, store, "net.local.", c.heads, neighbors=idx,
                                             mask=None if mask.all() else mask)
            parts.append(local)
            if trace is not None:
                trace.update(local_input=t, local_embed=local, local_weights=w_local, local_index=idx)
        else:
            parts.append(ag.as_tensor(np.zeros((n, c.d_model))))
        unified = ag.concat(parts, axis=1)
        h_in = ag.concat([xn, unified], axis=1)
        out = {}
        for attr in ATTRIBUTES:
            p = f"net.head.{attr}."
            h = h_in @ store[p + "W_a"] + store[p + "b_a"]
            h = h + ag.gelu(h @ store[p + "W1"] + store[p + "b1"])
            h = h + ag.gelu(h @ store[p + "W2"] + store[p + "b2"])
            out[attr] = h @ store[p + "W_out"] + store[p + "b_out"]
        if trace is not None:
            trace["unified"] = unified
        return out


@dataclass
class EffectiveAttributes:
    positions: ag.Tensor
    rotations: ag.Tensor
    log_scales: ag.Tensor
    colors: ag.Tensor
    opacities: ag.Tensor
    extras: dict = field(default_factory=dict)


def predict_attributes(base: dict, deltas: dict | None, extent: float, config: NetConfig = NetConfig()):
    """Combine base parameters with head outputs (zeros when ``deltas`` is None)."""
    n = base["positions"].shape[0]
    if deltas is None:
        deltas = {attr: np.zeros((n, dim)) for attr, dim in ATTRIBUTES.items()}
    tau = config.position_bound * extent
    x = base["positions"] + ag.mul(ag.tanh(deltas["position"]), tau)
    q = base["rotations"] + deltas["rotation"]
    q = ag.div(q, ag.l2_norm(q, axis=1, keepdims=True))
    lo, hi = np.log(config.min_scale * extent), np.log(config.max_scale * extent)
    s = ag.clip(base["log_scales"] + deltas["scale"], lo, hi)
    col = ag.sigmoid(base["color_logits"] + deltas["color"])
    op = ag.sigmoid(ag.reshape(base["opacity_logits"], (n, 1)) + deltas["opacity"])
    return EffectiveAttributes(x, q, s, col, ag.reshape(op, (n,)))
