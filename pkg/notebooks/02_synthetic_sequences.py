# %% [markdown]
# # Synthetic infrared sequences with dim events
#
# Targets are Gaussian blobs moving on a smoothed-noise background. A dim
# event sets a target's contrast to zero for a few frames while its box stays
# annotated, so it can only be found from neighbouring frames.

# %%
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from bird.synthdata import generate_sequence, random_scene

spec = random_scene(seed=4, length=12, dim_span=3, dim_every=8, dim_offset=4)
seq = generate_sequence(spec)
print("frames", seq.frames.shape, "dim events", spec.dim_events)

# %%
fig, axes = plt.subplots(2, 6, figsize=(12, 4.4))
for t, ax in enumerate(axes.flat):
    ax.imshow(seq.frames[t], cmap="gray", vmin=0, vmax=1)
    for x1, y1, x2, y2 in seq.boxes(t):
        ax.add_patch(plt.Rectangle((x1 - 0.5, y1 - 0.5), x2 - x1, y2 - y1, fill=False, color="lime", lw=0.8))
    dimmed = any(e.covers(0, t) for e in spec.dim_events)
    ax.set_title(f"t={t}" + (" (dim)" if dimmed else ""), fontsize=8)
    ax.axis("off")
fig.tight_layout()
fig.savefig("synthetic_sequence.png", dpi=90)
print("wrote synthetic_sequence.png")
