# %% [markdown]
# # Modulated deformable convolution
#
# Every output position samples its 3x3 neighbourhood at learned fractional
# offsets and scales each sample by a mask in (0, 1). With zero offsets and
# unit masks it is an ordinary convolution.

# %%
import torch
import torch.nn.functional as F

from bird.blocks import bilinear_sample, modulated_deform_conv

torch.manual_seed(0)
x = torch.randn(1, 4, 6, 6)
w = torch.randn(3, 4, 3, 3)
groups, kk = 2, 9

offsets = torch.zeros(1, groups * 2 * kk, 6, 6)
masks = torch.ones(1, groups * kk, 6, 6)
plain = modulated_deform_conv(x, w, offsets, masks, groups=groups)
print("max |deform - conv| at zero offsets:", (plain - F.conv2d(x, w, padding=1)).abs().max().item())

# %% [markdown]
# Shifting every sampling point by one column to the right is the same as
# convolving the input shifted one column to the left. The first output column
# differs: its leftmost tap now lands on real pixels instead of padding.

# %%
offsets[:, 1::2] = 1.0  # layout is [group][kernel point][dy, dx]
shifted = modulated_deform_conv(x, w, offsets, masks, groups=groups)
x_left = F.pad(x[..., 1:], (0, 1))
print("matches shifted input:", torch.allclose(shifted[..., 1:], F.conv2d(x_left, w, padding=1)[..., 1:], atol=1e-5))

# %% [markdown]
# Fractional offsets interpolate bilinearly between the four nearest pixels.

# %%
grid = torch.tensor([[[0.0, 1.0], [2.0, 3.0]]])
for xy in [(0.0, 0.0), (0.5, 0.5), (0.25, 0.0), (-5.0, -5.0)]:
    print(xy, "->", bilinear_sample(grid, *xy).item())
