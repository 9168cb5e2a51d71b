"""Optimization loop: grouping switch, adaptive updates, densification with group inheritance, checkpoints."""
from __future__ import annotations

import json
import logging
import os
import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from . import objective as ob
from .config import RunConfig
from .data import Dataset, View, generate_synthetic, initial_scene, load_dataset
from .neighborhood import NeighborGraph, Standardizer, build_knn, descriptors, grouping_features
from .partition import SupergaussianPartition, energy, group_stats, tune_mu
from .priornet import PriorInputs, PriorNet, predict_attributes
from .rasterizer import RenderSettings, render_tensor
from .report import validate_report
from .scene import UNASSIGNED, GaussianSet, load_ply, quaternion_to_rotation, save_ply

log = logging.getLogger(__name__)

REPORT_SCHEMA_VERSION = 1
CHECKPOINT_VERSION = 1
GAUSS_BLOCKS = ("positions", "rotations", "log_scales", "color_logits", "opacity_logits", "latents")
_LR_FIELDS = {"positions": "lr_positions", "rotations": "lr_rotations", "log_scales": "lr_scales",
              "color_logits": "lr_colors", "opacity_logits": "lr_opacities", "latents": "lr_latents"}


class TrainingDivergedError(RuntimeError):
    """Raised on a non-finite loss; the message is a diagnostic dump."""


class CheckpointError(RuntimeError):
    pass


def _logit(p):
    p = np.clip(p, 1e-6, 1 - 1e-6)
    return np.log(p) - np.log1p(-p)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class Adam:
    """Adaptive moment updates with a step counter per parameter block."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, multipliers=None):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.multipliers = multipliers or (lambda name: 1.0)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, store: ag.ParamStore, skip=lambda name: False) -> None:
        for name, p in store.items():
            if skip(name) or p.grad is None:
                continue
            lr = self.lr * self.multipliers(name)
            m = self.m.setdefault(name, np.zeros_like(p.value))
            v = self.v.setdefault(name, np.zeros_like(p.value))
            t = self.t[name] = self.t.get(name, 0) + 1
            g = p.grad
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            if lr == 0:
                continue
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            p.value -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def reset(self, prefix: str) -> None:
        for d in (self.m, self.v, self.t):
            for name in [n for n in d if n.startswith(prefix)]:
                del d[name]

    def remap_rows(self, name: str, source: np.ndarray) -> None:
        """Reindex per-Gaussian moments; ``source`` holds the old row per new row, -1 for fresh rows."""
        for d in (self.m, self.v):
            if name in d:
                old = d[name]
                new = np.zeros((len(source),) + old.shape[1:])
                keep = source >= 0
                new[keep] = old[source[keep]]
                d[name] = new


@dataclass
class TrainState:
    config: RunConfig
    store: ag.ParamStore
    optimizer: Adam
    rng: np.random.Generator
    bounds: tuple
    background: np.ndarray
    net: PriorNet
    iteration: int = 0
    partition: SupergaussianPartition | None = None
    graph: NeighborGraph | None = None
    standardizer: Standardizer | None = None
    inputs: PriorInputs | None = None
    history: list = field(default_factory=list)
    events: list = field(default_factory=list)
    view_queue: list = field(default_factory=list)
    grad_accum: np.ndarray | None = None       # (N,) summed positional-gradient norms
    grad_dir: np.ndarray | None = None         # (N, 3) summed positional gradients
    grad_count: int = 0

    @property
    def extent(self) -> float:
        lo, hi = self.bounds
        return float(np.linalg.norm(np.asarray(hi) - np.asarray(lo)))

    @property
    def n_gaussians(self) -> int:
        return self.store["gauss.positions"].shape[0]

    @property
    def grouped(self) -> bool:
        return self.partition is not None

    @property
    def group_ids(self) -> np.ndarray:
        if self.partition is None:
            return np.full(self.n_gaussians, UNASSIGNED, dtype=np.int64)
        return self.partition.assignment

    def scene(self) -> GaussianSet:
        """Base attributes as a GaussianSet (colors activated)."""
        v = {b: self.store["gauss." + b].value for b in GAUSS_BLOCKS}
        return GaussianSet(v["positions"].copy(), v["rotations"].copy(), v["log_scales"].copy(),
                           _sigmoid(v["color_logits"]), v["opacity_logits"].copy(), v["latents"].copy(),
                           self.group_ids.copy(), self.background.copy())


def init_state(config: RunConfig, dataset: Dataset, scene: GaussianSet) -> TrainState:
    cfg = config.train
    store = ag.ParamStore()
    values = {"positions": scene.positions, "rotations": scene.rotations, "log_scales": scene.log_scales,
              "color_logits": _logit(scene.colors), "opacity_logits": scene.opacity_logits}
    latents = scene.latents
    if latents.shape[1] != config.net.latent_dim:
        latents = np.zeros((len(scene), config.net.latent_dim))
    values["latents"] = latents
    for b in GAUSS_BLOCKS:
        store.add("gauss." + b, values[b], "scene")

    def multiplier(name):
        if name.startswith("gauss."):
            return getattr(cfg, _LR_FIELDS[name[len("gauss."):]])
        return cfg.lr_network

    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps, multiplier)
    n = len(scene)
    return TrainState(config, store, opt, np.random.default_rng(config.seed), dataset.bounds,
                      np.asarray(dataset.background, float).copy(), PriorNet(config.net),
                      grad_accum=np.zeros(n), grad_dir=np.zeros((n, 3)))


# -- forward ---------------------------------------------------------------

def _base_tensors(state: TrainState) -> dict:
    s = state.store
    return {"positions": s["gauss.positions"], "rotations": s["gauss.rotations"],
            "log_scales": s["gauss.log_scales"], "color_logits": s["gauss.color_logits"],
            "opacity_logits": s["gauss.opacity_logits"]}


def _network_active(state: TrainState) -> bool:
    return state.inputs is not None and state.config.train.use_priornet and "net.head.position.W_out" in state.store


def effective_attributes(state: TrainState):
    base = _base_tensors(state)
    deltas = None
    if _network_active(state):
        deltas = state.net.forward(state.store, base["positions"], ag.sigmoid(base["color_logits"]),
                                   ag.exp(base["log_scales"]), state.store["gauss.latents"], state.inputs)
    return predict_attributes(base, deltas, state.extent, state.config.net)


def render_view(state: TrainState, camera, settings: RenderSettings = RenderSettings()):
    """(H, W, 5) tensor [r, g, b, depth, alpha] of the current effective scene."""
    eff = effective_attributes(state)
    return render_tensor(eff.positions, eff.rotations, eff.log_scales, eff.colors, eff.opacities, camera,
                         state.background, settings), eff


def compute_loss(state: TrainState, view: View):
    out, eff = render_view(state, view.camera)
    w = state.config.loss
    rgb = out[..., :3]
    mask = view.mask if state.config.train.masked_l1 else None
    l1 = ob.l1_loss(rgb, view.image, mask)
    ssim_loss = 1.0 - ob.ssim_tensor(rgb, view.image)
    zero = ag.as_tensor(0.0)
    pos = zero
    if state.grouped and w.pos > 0:
        edges = state.graph.edges
        if state.config.train.intra_group_edges:
            edges = ob.intra_group_edges(edges, state.partition.assignment)
        pos = ob.l_pos(ob.d_avg(eff.positions, edges, w.eps), ob.d_ctr(eff.positions, state.partition.assignment,
                                                                     w.eps), w)
    mask_l = ob.mask_loss(out[..., 4], view.mask) if view.mask is not None else zero
    total = ob.l_total(l1, ssim_loss, pos, mask_l, w)
    terms = {"loss": total, "l1": l1, "ssim": ssim_loss, "pos": pos, "mask": mask_l}
    return total, terms, out


def _diagnostic(state: TrainState, view: View, terms: dict) -> str:
    lines = [f"non-finite loss at iteration {state.iteration}, view {view.split}/{view.name}",
             "terms: " + ", ".join(f"{k}={float(t.value):.6g}" for k, t in terms.items()),
             f"{'parameter':40s} {'norm':>14s} {'grad norm':>14s} finite"]
    for name, p in state.store.items():
        g = p.grad if p.grad is not None else np.zeros(1)
        lines.append(f"{name:40s} {np.linalg.norm(p.value):14.6g} {np.linalg.norm(g):14.6g} "
                     f"{bool(np.all(np.isfinite(p.value)))}")
    return "\n".join(lines)


# -- schedule ----------------------------------------------------------------

def _next_view(state: TrainState, views: list[View]) -> int:
    if not state.view_queue:
        state.view_queue = [int(i) for i in state.rng.permutation(len(views))]
    return state.view_queue.pop(0)


def train_step(state: TrainState, views: list[View]) -> TrainState:
    """One optimization step on one training view; grouping and densification happen on schedule."""
    if not views:
        raise ValueError("train_step needs at least one training view")
    cfg = state.config.train
    it = state.iteration
    if not state.grouped and it >= cfg.grouping_iter:
        run_grouping(state)
    elif state.grouped and it > cfg.grouping_iter:
        since = it - cfg.grouping_iter
        if cfg.regroup_every and since % cfg.regroup_every == 0:
            run_grouping(state, reinit_network=False)
        elif cfg.descriptor_every and since % cfg.descriptor_every == 0:
            refresh_neighborhoods(state)
    vi = _next_view(state, views)
    view = views[vi]
    store = state.store
    store.zero_grad()
    total, terms, _ = compute_loss(state, view)
    if not np.isfinite(total.value):
        raise TrainingDivergedError(_diagnostic(state, view, terms))
    ag.backward(total)
    gpos = store["gauss.positions"].grad
    state.grad_accum += np.linalg.norm(gpos, axis=1)
    state.grad_dir += gpos
    state.grad_count += 1
    freeze_base = state.grouped and _network_active(state) and not cfg.train_base_after_grouping
    state.optimizer.step(store, skip=lambda name: freeze_base and name.startswith("gauss."))
    q = store["gauss.rotations"].value
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    state.history.append({"iteration": it, "view": vi, **{k: float(t.value) for k, t in terms.items()}})
    state.iteration += 1
    if (cfg.densify and state.iteration % cfg.densify_interval == 0 and state.iteration <= cfg.densify_until):
        densify(state)
    return state


def _prior_inputs(state: TrainState) -> PriorInputs:
    lo, hi = (np.asarray(b, float) for b in state.bounds)
    std = state.standardizer
    p = state.partition
    return PriorInputs(p.assignment, p.n_groups, state.graph.knn, state.graph.shape_descriptors,
                       std.mean, std.scale, 0.5 * (lo + hi), float(np.max(hi - lo) / 2), state.extent)


def _graph(positions, k):
    k = min(k, len(positions) - 1)
    return descriptors(positions, build_knn(positions, k))


def run_grouping(state: TrainState, reinit_network: bool = True) -> TrainState:
    """Partition the current Gaussians into supergaussians and switch the prior network on."""
    cfg = state.config.train
    scene = state.scene()
    state.graph = _graph(scene.positions, cfg.knn_k)
    z, state.standardizer = grouping_features(scene, state.graph)
    g_max = min(cfg.group_max, len(scene))
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        search = tune_mu(z, state.graph.edges, (min(cfg.group_min, g_max), g_max), cfg.min_group_size)
    for w in caught:
        log.warning("%s", w.message)
    state.partition = group_stats(search.partition, scene)
    state.inputs = _prior_inputs(state)
    if cfg.use_priornet and (reinit_network or "net.head.position.W_out" not in state.store):
        state.net.init_params(state.store, state.rng, zero_heads=True)
        state.optimizer.reset("net.")
    state.events.append({"iteration": state.iteration, "event": "grouping", "G": state.partition.n_groups,
                         "mu": float(search.mu), "in_range": bool(search.in_range),
                         "energy": float(state.partition.energy)})
    return state


def refresh_neighborhoods(state: TrainState) -> None:
    """Recompute k-NN lists and descriptors on current positions; grouping stays fixed."""
    state.graph = _graph(state.store["gauss.positions"].value, state.config.train.knn_k)
    if state.partition is not None:
        state.inputs = _prior_inputs(state)


def _relabel(assignment: np.ndarray) -> np.ndarray:
    _, compact = np.unique(assignment, return_inverse=True)
    return compact.astype(np.int64)


def densify(state: TrainState, force_prune: np.ndarray | None = None) -> dict:
    """Split/clone high-gradient Gaussians and prune transparent ones; children inherit group ids."""
    cfg = state.config.train
    store = state.store
    n = state.n_gaussians
    avg = state.grad_accum / max(state.grad_count, 1)
    selected = avg > cfg.densify_grad_threshold
    log_s = store["gauss.log_scales"].value
    scales = np.exp(log_s)
    large = scales.max(axis=1) > cfg.densify_scale_fraction * state.extent
    split = np.nonzero(selected & large)[0]
    clone = np.nonzero(selected & ~large)[0]
    if n + len(split) + len(clone) > cfg.max_gaussians:
        warnings.warn(f"densification skipped: {n + len(split) + len(clone)} Gaussians would exceed "
                      f"max_gaussians={cfg.max_gaussians}")
        log.warning("densification skipped at iteration %d (max_gaussians)", state.iteration)
        split = clone = np.zeros(0, dtype=np.int64)
    values = {b: store["gauss." + b].value.copy() for b in GAUSS_BLOCKS}
    source = np.arange(n)                      # old row feeding each new row (-1 = fresh moments)
    parent = np.arange(n)                      # origin Gaussian for group inheritance
    if len(split):
        rot = quaternion_to_rotation(values["rotations"][split])
        major = np.argmax(scales[split], axis=1)
        axis = rot[np.arange(len(split)), :, major]
        offset = 0.5 * scales[split, major][:, None] * axis
        child = {b: values[b][split].copy() for b in GAUSS_BLOCKS}
        values["positions"][split] += offset
        child["positions"] -= offset
        values["log_scales"][split] -= np.log(1.6)
        child["log_scales"] -= np.log(1.6)
        for b in GAUSS_BLOCKS:
            values[b] = np.concatenate([values[b], child[b]])
        source[split] = -1
        source = np.concatenate([source, np.full(len(split), -1)])
        parent = np.concatenate([parent, split])
    if len(clone):
        child = {b: values[b][clone].copy() for b in GAUSS_BLOCKS}
        g = state.grad_dir[clone]
        norm = np.linalg.norm(g, axis=1, keepdims=True)
        direction = np.where(norm > 0, -g / np.maximum(norm, 1e-300), 0.0)
        child["positions"] += direction * scales[clone].max(axis=1, keepdims=True)
        for b in GAUSS_BLOCKS:
            values[b] = np.concatenate([values[b], child[b]])
        source = np.concatenate([source, np.full(len(clone), -1)])
        parent = np.concatenate([parent, clone])
    # prune on effective opacity, children included
    opac = _sigmoid(values["opacity_logits"])
    if _network_active(state):
        eff = effective_attributes(state).opacities.value
        opac = np.concatenate([eff, eff[parent[n:]]])
    prune = opac < cfg.prune_opacity
    if force_prune is not None:
        prune[:n] |= np.asarray(force_prune, bool)
    if prune.all():
        prune[np.argmax(opac)] = False
    keep = np.nonzero(~prune)[0]
    for b in GAUSS_BLOCKS:
        store.set("gauss." + b, values[b][keep])
        state.optimizer.remap_rows("gauss." + b, source[keep])
    n_new = len(keep)
    state.grad_accum = np.zeros(n_new)
    state.grad_dir = np.zeros((n_new, 3))
    state.grad_count = 0
    if state.partition is not None:
        assignment = _relabel(state.partition.assignment[parent[keep]])
        p = state.partition
        g = int(assignment.max()) + 1
        # swap in the inherited labels first so the scene snapshot has matching length
        state.partition = SupergaussianPartition(assignment, p.values[:0], p.mu, p.energy, p.history, p.truncated)
        scene = state.scene()
        state.graph = _graph(scene.positions, cfg.knn_k)
        z = state.standardizer(np.concatenate([scene.positions, scene.colors, scene.scales,
                                               state.graph.shape_descriptors], axis=1))
        counts = np.bincount(assignment, minlength=g).astype(float)
        sums = np.zeros((g, z.shape[1]))
        np.add.at(sums, assignment, z)
        data, boundary = energy(z, assignment, state.graph.edges, p.mu)
        state.partition = group_stats(SupergaussianPartition(assignment, sums / counts[:, None], p.mu,
                                                             data + boundary, p.history, p.truncated), scene)
        state.inputs = _prior_inputs(state)
    summary = {"iteration": state.iteration, "event": "densify", "split": int(len(split)),
               "clone": int(len(clone)), "pruned": int(prune.sum()), "N": int(n_new)}
    state.events.append(summary)
    return summary


# -- evaluation ----------------------------------------------------------------

def evaluate(state: TrainState, views: list[View]) -> dict:
    """Per-view and mean PSNR/SSIM, plus depth MAE/SROCC where reference depth exists."""
    if not views:
        raise ValueError("evaluate needs at least one view")
    per_view = []
    for view in views:
        out, _ = render_view(state, view.camera)
        val = out.value
        rec = {"view": f"{view.split}/{view.name}", "psnr": ob.psnr(val[..., :3], view.image),
               "ssim": ob.ssim(val[..., :3], view.image)}
        if view.depth is not None:
            valid = val[..., 4] > 0.5
            if view.mask is not None:
                valid &= view.mask
            if valid.any():
                rec["depth_mae"] = ob.depth_mae(val[..., 3], view.depth, valid)
                rec["srocc"] = ob.srocc(val[..., 3], view.depth, valid)
            else:
                rec["depth_mae"], rec["srocc"] = None, None
        per_view.append(rec)
    report = {"per_view": per_view}
    for key in ("psnr", "ssim", "depth_mae", "srocc"):
        vals = [r[key] for r in per_view if r.get(key) is not None]
        report[key] = float(np.mean(vals)) if vals else None
    return report


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(state: TrainState, path) -> None:
    os.makedirs(path, exist_ok=True)
    save_ply(os.path.join(path, "scene.ply"), state.scene())
    state.store.save(os.path.join(path, "params.bin"))
    arrays = {"grad_accum": state.grad_accum, "grad_dir": state.grad_dir,
              "bounds_lo": np.asarray(state.bounds[0], float), "bounds_hi": np.asarray(state.bounds[1], float),
              "background": state.background}
    for name in state.optimizer.m:
        arrays["m/" + name] = state.optimizer.m[name]
        arrays["v/" + name] = state.optimizer.v[name]
    p = state.partition
    if p is not None:
        arrays.update({"part/assignment": p.assignment, "part/values": p.values})
        arrays.update({"graph/knn": state.graph.knn, "graph/edges": state.graph.edges,
                       "graph/shape": state.graph.shape_descriptors})
    np.savez(os.path.join(path, "aux.npz"), **arrays)
    meta = {"version": CHECKPOINT_VERSION, "iteration": state.iteration, "config": state.config.to_dict(),
            "rng": state.rng.bit_generator.state, "view_queue": state.view_queue, "grad_count": state.grad_count,
            "optimizer_steps": state.optimizer.t, "history": state.history, "events": state.events,
            "partition": None if p is None else {"mu": p.mu, "energy": p.energy, "truncated": p.truncated,
                                                  "history": [list(h) for h in p.history]},
            "graph_k": None if state.graph is None else state.graph.k,
            "standardizer": None if state.standardizer is None else state.standardizer.to_dict()}
    with open(os.path.join(path, "state.json"), "w") as fh:
        json.dump(meta, fh, default=_json_default)


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def load_checkpoint(path) -> TrainState:
    try:
        with open(os.path.join(path, "state.json")) as fh:
            meta = json.load(fh)
    except OSError as err:
        raise CheckpointError(f"{path}: cannot read checkpoint ({err})") from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ag.CheckpointVersionError(f"{path}: checkpoint version {meta.get('version')}, "
                                        f"expected {CHECKPOINT_VERSION}")
    config = RunConfig.from_dict(meta["config"])
    store = ag.ParamStore.load(os.path.join(path, "params.bin"))
    with np.load(os.path.join(path, "aux.npz")) as z:
        arrays = {k: z[k] for k in z.files}
    scene = load_ply(os.path.join(path, "scene.ply"))
    state = TrainState(config, store, None, np.random.default_rng(), (arrays["bounds_lo"], arrays["bounds_hi"]),
                       arrays["background"], PriorNet(config.net), grad_accum=arrays["grad_accum"],
                       grad_dir=arrays["grad_dir"])
    cfg = config.train
    state.optimizer = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps,
                           lambda name: getattr(cfg, _LR_FIELDS[name[6:]]) if name.startswith("gauss.")
                           else cfg.lr_network)
    state.optimizer.t = {k: int(v) for k, v in meta["optimizer_steps"].items()}
    for k, v in arrays.items():
        if k.startswith("m/"):
            state.optimizer.m[k[2:]] = v.copy()
        elif k.startswith("v/"):
            state.optimizer.v[k[2:]] = v.copy()
    state.rng.bit_generator.state = meta["rng"]
    state.iteration = meta["iteration"]
    state.view_queue = list(meta["view_queue"])
    state.grad_count = meta["grad_count"]
    state.history, state.events = meta["history"], meta["events"]
    if meta["partition"] is not None:
        pm = meta["partition"]
        part = SupergaussianPartition(arrays["part/assignment"].astype(np.int64), arrays["part/values"], pm["mu"],
                                      pm["energy"], [tuple(h) for h in pm["history"]], pm["truncated"])
        state.partition = group_stats(part, scene)
        shape = arrays["graph/shape"]
        state.graph = NeighborGraph(meta["graph_k"], arrays["graph/knn"], arrays["graph/edges"],
                                    shape[:, 0], shape[:, 3], shape[:, 1], shape[:, 2],
                                    np.zeros(len(shape), bool))
        state.standardizer = Standardizer.from_dict(meta["standardizer"])
        state.inputs = _prior_inputs(state)
    return state


# -- full runs -----------------------------------------------------------------

def prepare(config: RunConfig):
    """Dataset, initial scene and (for synthetic data) the ground-truth scene for a config."""
    spec = config.synthetic
    rng = np.random.default_rng(config.seed)
    if config.data is None:
        dataset, gt = generate_synthetic(spec)
    else:
        dataset = load_dataset(config.data)
        gt_path = os.path.join(config.data, "gt_scene.ply")
        gt = load_ply(gt_path) if os.path.exists(gt_path) else None
    init = initial_scene(dataset, spec.clusters * spec.per_cluster, rng, gt, spec.init_noise, spec.floaters,
                         config.net.latent_dim)
    return dataset, init, gt


def build_report(state: TrainState, initial: dict, final: dict, timing: dict) -> dict:
    final_train = final.get("train", {})
    return {
        "schema_version": REPORT_SCHEMA_VERSION,
        "config": state.config.to_dict(),
        "losses": state.history,
        "events": state.events,
        "initial_metrics": initial,
        "final_metrics": {"psnr": final["eval"]["psnr"], "ssim": final["eval"]["ssim"],
                          "depth_mae": final["eval"]["depth_mae"], "srocc": final["eval"]["srocc"],
                          "train_psnr": final_train.get("psnr"), "train_ssim": final_train.get("ssim"),
                          "eval": final["eval"], "train": final_train},
        "partition": None if state.partition is None else
        {"G": int(state.partition.n_groups), "sizes": state.partition.sizes.tolist(),
         "energy": float(state.partition.energy), "mu": float(state.partition.mu)},
        "n_gaussians": state.n_gaussians,
        "timing": timing,
    }


def train(config: RunConfig, dataset: Dataset | None = None, init: GaussianSet | None = None,
          out_dir: str | None = None, progress=None, checkpoint_every: int = 0) -> tuple[TrainState, dict]:
    """Run the full schedule and return the final state and run report."""
    config.validate(check_paths=dataset is None)
    if dataset is None or init is None:
        dataset, init, _ = prepare(config)
    state = init_state(config, dataset, init)
    return resume(state, dataset, out_dir, progress, checkpoint_every)


def resume(state: TrainState, dataset: Dataset, out_dir: str | None = None, progress=None,
           checkpoint_every: int = 0) -> tuple[TrainState, dict]:
    cfg = state.config.train
    t0 = time.perf_counter()
    initial = {"eval": evaluate(state, dataset.eval), "train": evaluate(state, dataset.train)}
    while state.iteration < cfg.iterations:
        train_step(state, dataset.train)
        if cfg.eval_every and state.iteration % cfg.eval_every == 0:
            m = evaluate(state, dataset.eval)
            state.events.append({"iteration": state.iteration, "event": "eval", "psnr": m["psnr"],
                                 "ssim": m["ssim"]})
        if progress is not None:
            progress(state)
        if out_dir and checkpoint_every and state.iteration % checkpoint_every == 0:
            save_checkpoint(state, os.path.join(out_dir, "checkpoint"))
    final = {"eval": evaluate(state, dataset.eval), "train": evaluate(state, dataset.train)}
    wall = time.perf_counter() - t0
    timing = {"deterministic": state.config.deterministic,
              "wall_seconds": None if state.config.deterministic else wall,
              "iterations": state.iteration}
    report = build_report(state, initial, final, timing)
    validate_report(json.loads(json.dumps(report, default=_json_default)))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        save_checkpoint(state, os.path.join(out_dir, "checkpoint"))
        with open(os.path.join(out_dir, "report.json"), "w") as fh:
            json.dump(report, fh, indent=1, default=_json_default)
        with open(os.path.join(out_dir, "timing.json"), "w") as fh:
            json.dump({"wall_seconds": wall, "iterations": state.iteration}, fh)
    return state, report
