"""Render a handful of Gaussians, inspect one pixel's compositing stack, and check gradients.

Run with ``python3 demos/01_splatting.py``; it writes ``splat.png`` next to the current directory.
"""
import numpy as np

from supergauss import autograd as ag
from supergauss.data import write_image
from supergauss.rasterizer import RenderSettings, render, render_tensor
from supergauss.scene import Camera

rng = np.random.default_rng(7)

# %% a camera at the origin looking down +z and 12 random Gaussians about 3 units away
cam = Camera.look_at(eye=[0, 0, 0], target=[0, 0, 1], up=[0, -1, 0], fov_x=np.radians(50), width=48, height=40)
n = 12
positions = rng.normal(0, 0.5, (n, 3)) + [0, 0, 3]
rotations = rng.normal(size=(n, 4))
rotations /= np.linalg.norm(rotations, axis=1, keepdims=True)
log_scales = np.log(rng.uniform(0.1, 0.35, (n, 3)))
colors = rng.uniform(0.1, 0.9, (n, 3))
opacities = rng.uniform(0.4, 0.9, n)

out = render(positions, rotations, log_scales, colors, opacities, cam, background=(1, 1, 1))
print("image", out.color.shape, "coverage", round(float(out.alpha.mean()), 3))
write_image("splat.png", out.color)

# %% every pixel satisfies sum of weights + leftover transmittance = 1
print("max |alpha + T - 1| =", float(np.abs(out.alpha + out.transmittance - 1).max()))

# %% which Gaussians paint the center pixel, front to back
for idx, w in out.contributions(24, 20):
    print(f"  gaussian {idx:2d} weight {w:.4f}")

# %% the exact renderer (no footprint culling, skip threshold or early stop) against finite differences
store = ag.ParamStore()
store.add("positions", positions)
store.add("colors", colors)
probe = rng.normal(size=(cam.height, cam.width, 5))


def loss():
    img = render_tensor(store["positions"], rotations, log_scales, store["colors"], opacities, cam,
                        settings=RenderSettings().exact())
    return ag.sum(img * probe)


print(ag.grad_check(loss, store, max_entries=12))
