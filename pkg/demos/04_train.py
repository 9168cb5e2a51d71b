"""A short training run on a reduced synthetic scene, then evaluation on held-out views.

The full default schedule (1,500 iterations at 64x64) is ``supergauss train``; this one
finishes in well under a minute.
"""
from supergauss.config import RunConfig, apply_overrides
from supergauss.trainer import train

config = apply_overrides(RunConfig(), [
    "synthetic.per_cluster=30", "synthetic.image_size=32", "train.iterations=300", "train.grouping_iter=50",
    "train.group_min=4", "train.group_max=12", "net.d_model=32",
])


def progress(state):
    if state.iteration % 50 == 0:
        h = state.history[-1]
        print(f"iter {state.iteration:4d}  loss {h['loss']:.4f}  l1 {h['l1']:.4f}  pos {h['pos']:.4f}")


state, report = train(config, progress=progress)
first, last = report["initial_metrics"]["eval"], report["final_metrics"]
print(f"eval PSNR {first['psnr']:.2f} -> {last['psnr']:.2f} dB, SSIM {last['ssim']:.3f}, depth SROCC {last['srocc']:.3f}")
print("supergaussians:", report["partition"]["G"], "events:", [e["event"] for e in report["events"]])
