"""
Seamless cloning with conjugate gradients
=========================================

A bright textured square is pasted into a darker background. A naive paste
leaves a hard seam; the Poisson blend keeps the square's texture but lets
its overall level follow the surrounding pixels.
"""

import numpy as np

from rarespot.poisson import default_mask, laplacian, poisson_blend, poisson_solve

rng = np.random.default_rng(0)
yy, xx = np.mgrid[0:64, 0:64]
background = np.clip(60 + 0.5 * xx + rng.normal(0, 3, (64, 64)), 0, 255).astype(np.uint8)
patch = np.clip(190 + 20 * np.sin(np.arange(24) / 2.0)[None, :] + rng.normal(0, 3, (24, 24)), 0, 255)
patch = patch.astype(np.uint8)

top, left = 20, 20
naive = background.copy()
naive[top:top + 24, left:left + 24] = patch
blended = poisson_blend(background, patch, (top, left))

# jump across the left edge of the pasted region
row = top + 12
print("seam jump, naive:  ", int(naive[row, left]) - int(naive[row, left - 1]))
print("seam jump, blended:", int(blended[row, left + 1]) - int(blended[row, left - 1]))

# the solver reproduces the patch Laplacian inside the mask
vals, infos = poisson_solve(background, patch, (top, left))
mask = default_mask(patch.shape)
full = background.astype(np.float64)
full[top:top + 24, left:left + 24] = vals[..., 0]
resid = np.abs(laplacian(full)[top:top + 24, left:left + 24]
               - laplacian(np.pad(patch.astype(np.float64), 1, mode="edge"))[1:-1, 1:-1])[mask]
print(f"CG iterations {infos[0].iterations}, max Laplacian residual {resid.max():.1e}")

# outside the mask nothing moves
changed = np.argwhere(blended != background)
print("changed pixels lie inside the mask:", bool(np.all((changed >= top + 1) & (changed < top + 23))))
