"""Run-report schema, Markdown/CSV tables and loss-curve plots."""
from __future__ import annotations

import csv
import json
import os

import jsonschema

_NUM = {"type": ["number", "null"]}
_METRICS = {"type": "object", "required": ["psnr", "ssim", "depth_mae", "srocc"],
            "properties": {k: _NUM for k in ("psnr", "ssim", "depth_mae", "srocc")}}

REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "supergauss run report",
    "type": "object",
    "required": ["schema_version", "config", "losses", "final_metrics", "partition", "timing"],
    "properties": {
        "schema_version": {"const": 1},
        "config": {"type": "object", "required": ["train", "loss", "net", "seed"]},
        "losses": {"type": "array", "items": {
            "type": "object", "required": ["iteration", "view", "loss", "l1", "ssim", "pos", "mask"],
            "properties": {"iteration": {"type": "integer"}, "view": {"type": "integer"},
                           **{k: {"type": "number"} for k in ("loss", "l1", "ssim", "pos", "mask")}}}},
        "events": {"type": "array", "items": {"type": "object", "required": ["iteration", "event"]}},
        "initial_metrics": {"type": "object"},
        "final_metrics": _METRICS,
        "partition": {"oneOf": [{"type": "null"}, {
            "type": "object", "required": ["G", "sizes", "energy"],
            "properties": {"G": {"type": "integer", "minimum": 1},
                           "sizes": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                           "energy": {"type": "number"}, "mu": {"type": "number"}}}]},
        "n_gaussians": {"type": "integer"},
        "timing": {"type": "object", "required": ["deterministic", "wall_seconds"]},
    },
}

_LOSS_KEYS = ("loss", "l1", "ssim", "pos", "mask")


def validate_report(report: dict) -> None:
    """Raise ``jsonschema.ValidationError`` when the report does not match the schema."""
    jsonschema.validate(report, REPORT_SCHEMA)


def load_report(path) -> dict:
    with open(path) as fh:
        report = json.load(fh)
    validate_report(report)
    return report


def _fmt(v, digits=4):
    if v is None:
        return "n/a"
    if isinstance(v, float):
        return f"{v:.{digits}f}"
    return str(v)


def metrics_table(report: dict) -> str:
    final = report["final_metrics"]
    initial = (report.get("initial_metrics") or {}).get("eval", {})
    rows = ["| metric | iteration 0 | final |", "|---|---|---|"]
    for key in ("psnr", "ssim", "depth_mae", "srocc"):
        rows.append(f"| {key} | {_fmt(initial.get(key))} | {_fmt(final.get(key))} |")
    if final.get("train_psnr") is not None:
        rows.append(f"| train psnr | {_fmt((report['initial_metrics'] or {}).get('train', {}).get('psnr'))} "
                    f"| {_fmt(final['train_psnr'])} |")
    return "\n".join(rows)


def per_view_table(report: dict) -> str:
    views = report["final_metrics"].get("eval", {}).get("per_view", [])
    rows = ["| view | PSNR | SSIM | depth MAE | SROCC |", "|---|---|---|---|---|"]
    for v in views:
        rows.append(f"| {v['view']} | {_fmt(v['psnr'], 2)} | {_fmt(v['ssim'], 3)} | "
                    f"{_fmt(v.get('depth_mae'))} | {_fmt(v.get('srocc'), 3)} |")
    return "\n".join(rows)


def to_markdown(report: dict) -> str:
    cfg = report["config"]
    parts = ["# Run report", "",
             f"seed {cfg['seed']}, {cfg['train']['iterations']} iterations, "
             f"{report.get('n_gaussians', 'n/a')} Gaussians at the end", "",
             "## Metrics (eval views)", "", metrics_table(report), "", "## Per view", "", per_view_table(report), ""]
    p = report.get("partition")
    if p:
        sizes = p["sizes"]
        parts += ["## Supergaussians", "",
                  f"G = {p['G']}, energy = {p['energy']:.4f}, mu = {p.get('mu', float('nan')):.4g}, "
                  f"group size min/median/max = {min(sizes)}/{sorted(sizes)[len(sizes) // 2]}/{max(sizes)}", ""]
    wall = report["timing"].get("wall_seconds")
    parts += ["## Timing", "", f"wall clock: {_fmt(wall, 1)} s" if wall is not None
              else "wall clock omitted (deterministic mode; see timing.json)", ""]
    return "\n".join(parts)


def write_loss_csv(report: dict, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "view", *_LOSS_KEYS])
        for row in report["losses"]:
            writer.writerow([row["iteration"], row["view"], *(repr(row[k]) for k in _LOSS_KEYS)])


def write_metrics_csv(report: dict, path) -> None:
    views = report["final_metrics"].get("eval", {}).get("per_view", [])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["view", "psnr", "ssim", "depth_mae", "srocc"])
        for v in views:
            writer.writerow([v["view"], v["psnr"], v["ssim"], v.get("depth_mae"), v.get("srocc")])
        final = report["final_metrics"]
        writer.writerow(["mean", final["psnr"], final["ssim"], final["depth_mae"], final["srocc"]])


def plot_losses(report: dict, path, smooth: int = 25) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    import numpy as np

    losses = report["losses"]
    it = np.array([r["iteration"] for r in losses])
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for key in _LOSS_KEYS:
        y = np.array([r[key] for r in losses])
        if smooth > 1 and len(y) >= smooth:
            y = np.convolve(y, np.ones(smooth) / smooth, mode="valid")
            x = it[smooth - 1:]
        else:
            x = it
        if np.any(y > 0):
            ax.plot(x, y, label=key, lw=1.2)
    grouping = [e["iteration"] for e in report.get("events", []) if e["event"] == "grouping"]
    for g in grouping:
        ax.axvline(g, color="gray", ls=":", lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss (moving average)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_outputs(report: dict, out_dir, plot: bool = True) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    md = os.path.join(out_dir, "report.md")
    with open(md, "w") as fh:
        fh.write(to_markdown(report))
    written.append(md)
    for name, fn in (("losses.csv", write_loss_csv), ("metrics.csv", write_metrics_csv)):
        write_path = os.path.join(out_dir, name)
        fn(report, write_path)
        written.append(write_path)
    if plot and report["losses"]:
        png = os.path.join(out_dir, "losses.png")
        plot_losses(report, png)
        written.append(png)
    return written
