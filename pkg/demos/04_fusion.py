# %% [markdown]
# # Learning to fuse forward and inverted backward estimates
#
# A noisy-oracle estimator mimics a two-frame method: mild correlated noise
# everywhere and gross errors where the forward motion is occluded. Fusion
# weights are learned without any occlusion labels; where the forward
# estimate fails, the weight on the backward branch rises on its own.

# %%
import numpy as np

from dtf import synth
from dtf.core import BACKWARD, FORWARD, SceneFlowField
from dtf.estimator import EstimatorConfig
from dtf.training import TrainSchedule, evaluate_pipeline, prepare_samples, run_pipeline, train_inverter, train_pipeline

H, W = 24, 48
train = synth.generate_dataset(40, 0, "driving", H, W)
val = synth.generate_dataset(12, 7000, "driving", H, W)
est = EstimatorConfig()

inv = train_inverter(train, TrainSchedule(8, 4, ((0, 1e-3),)))
inv, fus = train_pipeline(train, est, "basic", TrainSchedule(4, 1, ((0, 1e-4),)), inverter=inv)

# %%
prepared = prepare_samples(val, est)
reports = evaluate_pipeline(inv, fus, prepared)
for name, rep in reports.items():
    print(f"{name:6s} SF all {rep.rate('SF'):6.2f}  occ {rep.rate('SF', 'occ'):6.2f}")

# %% [markdown]
# The backward weight doubles as a soft occlusion map.

# %%
occ, noc = [], []
for p in prepared:
    _, _, w_bw, _ = run_pipeline(inv, fus, SceneFlowField(p.fw, FORWARD), SceneFlowField(p.bw, BACKWARD))
    occ.append(w_bw[..., 0][p.valid & ~p.noc])
    noc.append(w_bw[..., 0][p.valid & p.noc])
print("mean backward weight: occluded", np.concatenate(occ).mean().round(3), "visible", np.concatenate(noc).mean().round(3))
