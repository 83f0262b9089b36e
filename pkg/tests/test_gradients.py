"""Autograd gradients of every block against central finite differences."""
import numpy as np
import pytest
import torch

from bird.blocks import AGRD, RDB, RDCA, ChannelAttention, SpatialAttention, bilinear_sample, modulated_deform_conv

from fd import STEP, TOL, max_relative_error

INSTANCES = range(5)
PARAM_LIMIT = 40  # random coordinates checked per parameter tensor


def off_lattice(rng, shape, lo, hi):
    """Uniform values whose fractional part stays clear of the bilinear kinks."""
    v = rng.uniform(lo, hi, shape)
    frac = v - np.floor(v)
    return np.floor(v) + 0.05 + 0.9 * frac


def leaf(a):
    return torch.tensor(a, dtype=torch.float64, requires_grad=True)


def check(errors):
    worst = max(errors.values())
    assert worst < TOL, errors


@pytest.mark.parametrize("seed", INSTANCES)
def test_bilinear_sample_gradients(seed):
    rng = np.random.default_rng(seed)
    feat = leaf(rng.standard_normal((3, 5, 6)))
    x = leaf(off_lattice(rng, (), -0.9, 5.9))
    y = leaf(off_lattice(rng, (), -0.9, 4.9))
    check(max_relative_error(lambda: bilinear_sample(feat, x, y), {"feature": feat, "x": x, "y": y}, STEP))


@pytest.mark.parametrize("seed", INSTANCES)
def test_modulated_deform_conv_gradients(seed):
    rng = np.random.default_rng(10 + seed)
    c, h, w, groups, k = 4, 5, 6, 2, 3
    x = leaf(rng.standard_normal((1, c, h, w)))
    weight = leaf(rng.standard_normal((3, c, k, k)))
    bias = leaf(rng.standard_normal(3))
    off = leaf(off_lattice(rng, (1, groups * 2 * k * k, h, w), -1.5, 1.5))
    mask = leaf(rng.uniform(0.05, 0.95, (1, groups * k * k, h, w)))
    tensors = {"input": x, "weight": weight, "bias": bias, "offsets": off, "masks": mask}
    check(max_relative_error(lambda: modulated_deform_conv(x, weight, off, mask, bias, groups), tensors, STEP))


def _module_check(module, x, seed):
    module = module.double()
    torch.manual_seed(seed)
    for p in module.parameters():
        with torch.no_grad():
            p.add_(0.1 * torch.randn_like(p))
    tensors = {"input": x, **dict(module.named_parameters())}
    return max_relative_error(lambda: module(x), tensors, STEP, limit=PARAM_LIMIT, seed=seed)


def _input(seed, c, h=6, w=6):
    return leaf(np.random.default_rng(seed).standard_normal((1, c, h, w)))


@pytest.mark.parametrize("seed", INSTANCES)
def test_channel_attention_gradients(seed):
    torch.manual_seed(seed)
    check(_module_check(ChannelAttention(8), _input(seed, 8), seed))


@pytest.mark.parametrize("seed", INSTANCES)
def test_spatial_attention_gradients(seed):
    torch.manual_seed(seed)
    check(_module_check(SpatialAttention(), _input(seed, 4), seed))


@pytest.mark.parametrize("seed", INSTANCES)
def test_rdb_gradients(seed):
    torch.manual_seed(seed)
    check(_module_check(RDB(4, growth=4), _input(seed, 4, 5, 5), seed))


@pytest.mark.parametrize("seed", INSTANCES)
def test_rdca_gradients(seed):
    torch.manual_seed(seed)
    errors = _module_check(RDCA(4, growth=4), _input(seed, 4, 5, 5), seed)
    assert "alpha" in errors and "beta" in errors
    check(errors)


@pytest.mark.parametrize("seed", INSTANCES)
def test_agrd_gradients(seed):
    torch.manual_seed(seed)
    check(_module_check(AGRD(8, growth=4, n_rdb=2), _input(seed, 8, 6, 6), seed))
