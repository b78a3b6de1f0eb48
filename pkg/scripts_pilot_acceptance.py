"""Pilot run of the heavy acceptance fixtures; prints every measured number."""
import time

import numpy as np

from dynct import (
    AnalyticConeBeamDataset,
    Box,
    CircleTrajectory,
    RadialPulseDeformation,
    ReconstructionParams,
    Scene,
    TwoCirclesTrajectory,
    VoxelGrid,
    GaussianBlob,
    ball,
    error_metrics,
    gradient_energy,
    laplacian_filter,
    reconstruct_points,
    reconstruct_volume,
    risk_volume,
    xstarx_volume,
)

t_all = time.time()

# --- chain: static two circles, Gaussian width 0.5, 16^3 over [-1,1]^3 ---
scene2 = Scene(TwoCirclesTrajectory(3.0), u_box=Box.cube(1.0))
gauss = GaussianBlob((0.0, 0.0, 0.0), amplitude=1.0, width=0.5)
data2 = AnalyticConeBeamDataset(scene2, gauss)
grid2 = VoxelGrid(Box.cube(1.0), (16, 16, 16))
params2 = ReconstructionParams(sphere_order=29, n_workers=1)
t0 = time.time()
vol2 = reconstruct_volume(scene2, data2, grid2, params=params2)
dt2 = time.time() - t0
truth2 = grid2.reshape(gauss.eval_f(grid2.points()))
met2 = error_metrics(vol2, truth2)
origin = reconstruct_points(scene2, data2, np.zeros((1, 3)), params=params2)[0]
print(f"[chain] rel_l2 {met2['rel_l2']:.5f}  origin {origin:.6f} "
      f"(err {abs(origin-1):.4%})  {dt2/60:.1f} min", flush=True)

# --- ball on the same fixture ---
b3 = ball((0.0, 0.0, 0.0), 0.5, 1.0)
data3 = AnalyticConeBeamDataset(scene2, b3)
t0 = time.time()
vol3 = reconstruct_volume(scene2, data3, grid2, params=params2)
dt3 = time.time() - t0
h = float(grid2.spacing[0])
dirs26 = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1)
                   for k in (-1, 0, 1) if (i, j, k) != (0, 0, 0)], dtype=float)
dirs26 /= np.linalg.norm(dirs26, axis=1, keepdims=True)
worst_dev = 0.0
for d in dirs26:
    rr = np.arange(0.2, 0.8 + 1e-9, h / 2.0)
    pts = rr[:, None] * d[None, :]
    prof = reconstruct_points(scene2, data3, pts, params=params2)
    g = np.abs(np.gradient(prof, rr))
    r_peak = rr[int(np.argmax(g))]
    worst_dev = max(worst_dev, abs(r_peak - 0.5))
r = np.linalg.norm(grid2.points(), axis=1).reshape(grid2.dims)
shell = np.abs(r - 0.5) <= 1.5 * h
far = np.abs(r - 0.5) > 3.0 * h
e_shell = gradient_energy(vol3, grid2.spacing, mask=shell)
e_far = gradient_energy(vol3, grid2.spacing, mask=far)
print(f"[ball] worst boundary dev {worst_dev:.4f} (1 voxel = {h:.4f})  "
      f"far/shell energy {e_far/e_shell:.4f}  {dt3/60:.1f} min", flush=True)

# --- artifact comparison: deformed single circle, ball ---
scene7 = Scene(CircleTrajectory(3.0),
               RadialPulseDeformation(0.12, radius=1.9, freq=1.0),
               u_box=Box.cube(1.0))
data7 = AnalyticConeBeamDataset(scene7, b3, rel_tol=1e-6)
grid7 = VoxelGrid(Box.cube(0.75), (10, 10, 10))
params7 = ReconstructionParams(sphere_order=11, n_circle=96, data_rel_tol=1e-6,
                               n_workers=1)
t0 = time.time()
vol7 = reconstruct_volume(scene7, data7, grid7, params=params7)
dt7a = time.time() - t0
t0 = time.time()
naive7 = xstarx_volume(scene7, b3, grid7, n_s=192, n_t=96)
dt7b = time.time() - t0
t0 = time.time()
risk7 = risk_volume(scene7, grid7, sphere_order=29)
dt7c = time.time() - t0
h7 = float(grid7.spacing[0])
r7 = np.linalg.norm(grid7.points(), axis=1).reshape(grid7.dims)
shell7 = np.abs(r7 - 0.5) <= 1.5 * h7
region7 = (risk7 > 0.5 * float(np.max(risk7))) & (np.abs(r7 - 0.5) > 3.0 * h7)
cmp7 = laplacian_filter(naive7, grid7.spacing)
e_inv = gradient_energy(vol7, grid7.spacing, mask=region7)
s_inv = gradient_energy(vol7, grid7.spacing, mask=shell7)
e_cmp = gradient_energy(cmp7, grid7.spacing, mask=region7)
s_cmp = gradient_energy(cmp7, grid7.spacing, mask=shell7)
print(f"[artifact] region voxels {int(np.sum(region7))}  shell voxels {int(np.sum(shell7))}")
print(f"[artifact] inv {e_inv:.4e}/{s_inv:.4e} = {e_inv/s_inv:.5f}   "
      f"cmp {e_cmp:.4e}/{s_cmp:.4e} = {e_cmp/s_cmp:.5f}   "
      f"ratio {(e_inv/s_inv)/(e_cmp/s_cmp):.4f}", flush=True)
print(f"[artifact] risk max {np.max(risk7):.4f}  times {dt7a/60:.1f}+{dt7b/60:.1f}+{dt7c/60:.1f} min")
print(f"total {(time.time()-t_all)/60:.1f} min")
