# %% [markdown]
# # 16-bit PNG storage and visual summaries
#
# Flow is stored as `round(64 f + 2^15)` with a validity channel and disparity
# as `round(256 d)` with 0 meaning invalid, so round trips lose at most half a
# quantization step. Error maps paint inliers green and outliers magenta.

# %%
import tempfile
from pathlib import Path

import numpy as np

from dtf import synth
from dtf.core import FORWARD
from dtf.data_io import load_manifest, iterate_samples, save_dataset, write_image_png
from dtf.estimator import EstimatorConfig, estimate
from dtf.viz import error_map, flow_to_rgb, occlusion_image

root = Path(tempfile.mkdtemp())
samples = synth.generate_dataset(3, 0, "driving")
manifest = save_dataset(root / "data", samples)
loaded = list(iterate_samples(load_manifest(manifest)))
diff = max(np.abs(a.gt_forward.data - b.gt_forward.data)[a.valid_fw].max() for a, b in zip(samples, loaded))
print("largest round-trip error:", diff)

# %%
s = loaded[0]
fw = estimate(s, FORWARD, EstimatorConfig())
rgb, max_mag = flow_to_rgb(s.gt_forward.data[..., :2], s.valid_fw)
write_image_png(root / f"flow_max{max_mag:.1f}.png", rgb)
write_image_png(root / "errors.png", error_map(fw, s.gt_forward, s.valid_fw))
occ = occlusion_image((s.valid_fw & ~s.noc_fw).astype(float))
write_image_png(root / "occluded.png", np.repeat(occ[..., None], 3, axis=-1))
print("images written to", root)
