import pytest
import torch

from dpmkit.backbone import TokenSequence
from dpmkit.errors import ConfigError, ShapeError
from dpmkit.mask_generator import (HierarchicalMaskGenerator, HMGConfig, default_gate, flatten_grid,
                                   generate_mask, reshape_layer)


def _seq(B=2, L=4, h=2, w=3, c=5, seed=0):
    g = torch.Generator().manual_seed(seed)
    layers = [torch.randn(B, 1 + h * w, c, generator=g, dtype=torch.float64) for _ in range(L + 1)]
    return TokenSequence(layers, layers[-1][:, 0], layers[-1][:, 0])


def test_reshape_is_row_major():
    t = torch.arange(6.0).reshape(1, 6, 1)
    grid = reshape_layer(t, (2, 3))
    assert grid[0, :, :, 0].tolist() == [[0, 1, 2], [3, 4, 5]]
    assert torch.equal(flatten_grid(grid), t)


def test_reshape_bad_grid():
    with pytest.raises(ShapeError):
        reshape_layer(torch.zeros(1, 5, 2), (2, 3))


def test_default_gate():
    assert default_gate(4) == [0, 1, 0, 1]
    assert default_gate(12)[5] == 1 and default_gate(12)[11] == 1 and sum(default_gate(12)) == 2
    assert default_gate(1) == [1]


def test_empty_gate():
    with pytest.raises(ConfigError):
        HMGConfig(layer_gate=[0, 0, 0])


def test_gate_beyond_depth():
    gen = HierarchicalMaskGenerator(HMGConfig([0, 0, 0, 0, 1], output_dim=3), 5, (2, 3)).double()
    with pytest.raises(ShapeError):
        gen(_seq(L=4))


def test_fuse_order_and_layout():
    seq = _seq()
    gen = HierarchicalMaskGenerator(HMGConfig([1, 0, 1, 0], output_dim=3), 5, (2, 3)).double()
    fused = gen.fuse(seq)
    assert fused.shape == (2, 10, 2, 3)
    # channel block 0 is block 1, row-major over the patch grid
    assert torch.equal(fused[1, :5, 1, 2], seq.tokens_per_layer[1][1, 1 + 5])
    assert torch.equal(fused[0, 5:, 0, 1], seq.tokens_per_layer[3][0, 1 + 1])


def test_zero_fc_gives_half():
    gen = HierarchicalMaskGenerator(HMGConfig([0, 1, 0, 1], output_dim=7), 5, (2, 3)).double()
    torch.nn.init.zeros_(gen.fc.weight)
    torch.nn.init.zeros_(gen.fc.bias)
    out = generate_mask(_seq(), gen)
    assert out.shape == (2, 7)
    assert torch.equal(out, torch.full_like(out, 0.5))


def test_pooled_is_spatial_mean():
    seq = _seq(seed=4)
    gen = HierarchicalMaskGenerator(HMGConfig([0, 1, 0, 1], output_dim=3), 5, (2, 3)).double()
    fmap = gen.convs(gen.fuse(seq))
    oracle = sum(fmap[:, :, i, j] for i in range(2) for j in range(3)) / 6
    torch.testing.assert_close(gen.pooled(seq), oracle)


def test_output_range_and_input_dependence():
    torch.manual_seed(0)
    gen = HierarchicalMaskGenerator(HMGConfig([0, 1, 0, 1], output_dim=4), 5, (2, 3)).double()
    a, b = gen(_seq(seed=1)), gen(_seq(seed=2))
    assert ((a > 0) & (a < 1)).all()
    assert not torch.allclose(a, b)


def test_ungated_layer_is_ignored():
    torch.manual_seed(0)
    gen = HierarchicalMaskGenerator(HMGConfig([0, 1, 0, 1], output_dim=4), 5, (2, 3)).double()
    seq = _seq(seed=1)
    base = gen(seq)
    seq.tokens_per_layer[1] = seq.tokens_per_layer[1] + 100
    assert torch.equal(gen(seq), base)
    seq.tokens_per_layer[2] = seq.tokens_per_layer[2] + 1
    assert not torch.equal(gen(seq), base)
