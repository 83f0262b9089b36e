# %% [markdown]
# # Recursive clips versus a sliding window
#
# Recursive inference visits each frame once per clip; a sliding window of
# width N re-extracts every frame N times to emit one centre prediction.

# %%
import numpy as np
import torch

from bird.config import RunConfig
from bird.evaluation import benchmark
from bird.model import BIRDDetector

torch.manual_seed(0)
model = BIRDDetector(RunConfig().model_config())
frames = np.random.default_rng(0).random((40, 64, 64))

for mode in ("recursive", "sliding"):
    r = benchmark(model, frames, mode, n=5)
    print(f"{mode:9s}  backbone forwards {r.backbone_forwards:3d}  ltmf {r.ltmf_calls:3d}  {r.fps:6.1f} fps")
