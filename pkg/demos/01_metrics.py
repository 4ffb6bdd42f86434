# %% [markdown]
# # Outlier-rate evaluation
#
# A pixel is an outlier for a component when its error exceeds 3 px and 5 %
# of the ground-truth magnitude. Scene flow (SF) counts a pixel as an outlier
# if any of D1 (disparity now), D2 (disparity next frame) or OF (optical flow)
# does. Rates are reported over all, non-occluded and occluded valid pixels.

# %%
import numpy as np

from dtf import SceneFlowField, evaluate
from dtf.metrics import measure_noc_ratio, reconstruct_occ_rate

rng = np.random.default_rng(0)
gt = SceneFlowField(rng.uniform(1, 40, (20, 30, 4)))
noise = rng.normal(0, 2, gt.data.shape)
noc = rng.random(gt.shape) > 0.2
noise[~noc] *= 6  # occluded pixels are much harder to estimate
est = SceneFlowField(gt.data + noise)

report = evaluate(est, gt, np.ones(gt.shape, bool), noc)
print(report.table())

# %% [markdown]
# Public leaderboards often list only the `all` and `noc` columns. With the
# share of non-occluded pixels known (0.843 on KITTI), the occluded rate
# follows from the mixture. Here the share is measured from the masks.

# %%
ratio = measure_noc_ratio([(np.ones(gt.shape, bool), noc)])
print(f"noc share {ratio.ratio:.3f}")
print("occ from all/noc:", round(reconstruct_occ_rate(report.rate("SF"), report.rate("SF", "noc"), ratio), 2))
print("all 8.21 / noc 6.69 ->", round(reconstruct_occ_rate(8.21, 6.69, 0.843), 2))
