import pytest
import torch

from bird.backbone import DOWNSAMPLE, FeatureExtractor, InputShapeError, standardize

pytestmark = pytest.mark.usefixtures("float64")


def test_desk_and_full_scale_shapes():
    fe = FeatureExtractor()
    assert fe(torch.rand(1, 1, 64, 64)).shape == (1, 64, 8, 8)
    assert fe(torch.rand(1, 1, 544, 544)).shape == (1, 64, 68, 68)


def test_layer_widths():
    fe = FeatureExtractor()
    assert [c.out_channels for c in fe.convs] == [48] * 5 + [64]
    assert [c.stride[0] for c in fe.convs] == [1, 2] * 3
    assert all(c.kernel_size == (3, 3) for c in fe.convs)


def test_zero_frame_zero_biases():
    fe = FeatureExtractor()
    for c in fe.convs:
        torch.nn.init.zeros_(c.bias)
    assert torch.all(fe(torch.zeros(1, 1, 16, 16)) == 0)


@pytest.mark.parametrize("shape", [(1, 1, 60, 64), (1, 1, 64, 20), (1, 1, 7, 7)])
def test_non_divisible_rejected(shape):
    with pytest.raises(InputShapeError, match=f"divisible by {DOWNSAMPLE}"):
        FeatureExtractor()(torch.rand(*shape))


def test_wrong_channel_count_rejected():
    with pytest.raises(InputShapeError):
        FeatureExtractor()(torch.rand(1, 3, 16, 16))


def test_per_frame_independence():
    torch.manual_seed(0)
    fe = FeatureExtractor()
    clip = torch.rand(5, 1, 32, 24)
    together = fe(clip)
    for i in range(5):
        assert torch.allclose(fe(clip[i : i + 1])[0], together[i], atol=1e-12, rtol=0)


def test_standardize_unit_statistics():
    x = torch.rand(3, 1, 16, 16) * 5 + 2
    s = standardize(x)
    assert torch.allclose(s.mean(dim=(-2, -1)), torch.zeros(3, 1), atol=1e-12)
    assert torch.allclose(s.std(dim=(-2, -1)), torch.ones(3, 1), atol=1e-5)
