import numpy as np
import pytest

from speechchain import autodiff as ad
from speechchain.autodiff import Tensor
from speechchain.errors import ContractError, ShapeError
from speechchain.nn import (
    BlockConfig,
    DecoderBlock,
    EncoderBlock,
    MultiHeadAttention,
    attention_mask,
    clamp_durations,
    length_regulate,
    length_regulator,
    lengths_to_mask,
    positional_encoding,
)

CFG = BlockConfig(model_dim=8, head_count=2, ff_dim=16, layer_count=1)


def test_block_config_rejects_indivisible_heads():
    with pytest.raises(ContractError):
        BlockConfig(model_dim=6, head_count=4)


def test_positional_encoding_rows():
    pe = positional_encoding(3, 4)
    assert np.array_equal(pe[0], [0.0, 1.0, 0.0, 1.0])
    expected = np.array([[np.sin(t / 10000 ** (2 * (j // 2) / 4)) if j % 2 == 0 else np.cos(t / 10000 ** (2 * (j // 2) / 4)) for j in range(4)] for t in range(3)])
    assert np.allclose(pe, expected, atol=1e-15)
    assert np.all(np.abs(positional_encoding(200, 16)) <= 1.0)
    with pytest.raises(ContractError):
        positional_encoding(3, 5)


def _attn(seed=0):
    return MultiHeadAttention(CFG, np.random.default_rng(seed))


def test_equal_scores_give_uniform_weights_over_unmasked_keys():
    attn = _attn()
    x = Tensor(np.ones((1, 5, 8)))
    mask = attention_mask(np.array([[True, True, True, False, False]]), 5)
    attn(x, x, x, mask)
    w = attn._last_weights
    assert np.allclose(w[..., :3], 1 / 3, atol=1e-12)
    assert np.all(w[..., 3:] == 0.0)


def test_weights_form_distributions():
    rng = np.random.default_rng(1)
    attn = _attn()
    x = Tensor(rng.normal(size=(3, 6, 8)))
    mask = attention_mask(lengths_to_mask([6, 4, 1]), 6)
    attn(x, x, x, mask)
    w = attn._last_weights
    assert np.all(w >= 0)
    assert np.all(np.abs(w.sum(-1) - 1) <= 1e-12)


def test_single_unmasked_key_returns_its_projected_value():
    rng = np.random.default_rng(2)
    attn = _attn()
    q = Tensor(rng.normal(size=(1, 2, 8)))
    kv = Tensor(rng.normal(size=(1, 4, 8)))
    mask = attention_mask(np.array([[False, False, True, False]]), 2)
    out = attn(q, kv, kv, mask).data
    expected = attn.out(attn.value(kv[:, 2:3])).data
    assert np.allclose(out, np.broadcast_to(expected, out.shape), atol=1e-12)


def test_mask_shape_mismatch():
    attn = _attn()
    x = Tensor(np.zeros((1, 3, 8)))
    with pytest.raises(ContractError):
        attn(x, x, x, np.ones((1, 1, 3, 4), dtype=bool))
    with pytest.raises(ShapeError):
        attn(x, Tensor(np.zeros((1, 3, 6))), Tensor(np.zeros((1, 3, 6))), None)


def test_causal_self_attention_ignores_the_future():
    rng = np.random.default_rng(3)
    block = DecoderBlock(CFG, rng)
    x = rng.normal(size=(1, 5, 8))
    mem = Tensor(rng.normal(size=(1, 4, 8)))
    causal = attention_mask(np.ones((1, 5), dtype=bool), 5, causal=True)
    base = block(Tensor(x), mem, causal, None).data
    for t in range(4):
        bumped = x.copy()
        bumped[0, t + 1 :] += rng.normal(size=(4 - t, 8))
        out = block(Tensor(bumped), mem, causal, None).data
        assert np.array_equal(out[0, : t + 1], base[0, : t + 1])


def test_causal_gradient_probe():
    rng = np.random.default_rng(4)
    block = DecoderBlock(CFG, rng)
    mem = Tensor(rng.normal(size=(1, 3, 8)))
    causal = attention_mask(np.ones((1, 4), dtype=bool), 4, causal=True)
    x = Tensor(rng.normal(size=(1, 4, 8)), requires_grad=True)
    block(x, mem, causal, None)[:, 1].sum().backward()
    assert np.all(x.grad[0, 2:] == 0.0)
    assert np.any(x.grad[0, :2] != 0.0)


def test_decoder_output_depends_on_memory():
    rng = np.random.default_rng(5)
    block = DecoderBlock(CFG, rng)
    x = Tensor(rng.normal(size=(1, 3, 8)))
    mem = rng.normal(size=(1, 4, 8))
    a = block(x, Tensor(mem), None, None).data
    mem[0, 1] += 1.0
    b = block(x, Tensor(mem), None, None).data
    assert not np.allclose(a, b)


def test_residual_path_preserves_input_when_sublayers_vanish():
    rng = np.random.default_rng(6)
    block = EncoderBlock(CFG, rng)
    for lin in (block.attn.out, block.ff.outer):
        lin.weight.data[:] = 0.0
        lin.bias.data[:] = 0.0
    x = rng.normal(size=(2, 5, 8))
    out = block(Tensor(x), None)
    assert out.shape == x.shape
    assert np.array_equal(out.data, x)


def test_incremental_step_matches_full_decoder():
    rng = np.random.default_rng(7)
    block = DecoderBlock(CFG, rng)
    x = rng.normal(size=(2, 4, 8))
    mem = Tensor(rng.normal(size=(2, 3, 8)))
    mem_mask = lengths_to_mask([3, 2])
    full = block(Tensor(x), mem, attention_mask(np.ones((2, 4), dtype=bool), 4, causal=True), attention_mask(mem_mask, 4)).data
    kv = block.cross_attn.project_kv(mem, mem)
    cache: dict = {}
    with ad.no_grad():
        steps = [block.step(Tensor(x[:, t : t + 1]), cache, kv, mem_mask[:, None, None, :]).data for t in range(4)]
    assert np.allclose(np.concatenate(steps, axis=1), full, atol=1e-12)


def test_length_regulator_examples():
    a, b = [1.0, 2.0], [3.0, 4.0]
    out = length_regulator(Tensor(np.array([a, b])), [2, 3]).data
    assert np.array_equal(out, [a, a, b, b, b])
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(length_regulator(Tensor(x), [1, 1, 1, 1]).data, x)
    with pytest.raises(ContractError):
        length_regulator(Tensor(np.zeros((0, 3))), [])
    with pytest.raises(ContractError):
        length_regulator(Tensor(x), [1, 0, 1, 1])


def test_length_regulator_preserves_rows_and_counts():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n = int(rng.integers(1, 7))
        x = rng.normal(size=(n, 3))
        d = rng.integers(1, 5, size=n)
        out = length_regulator(Tensor(x), d).data
        assert out.shape[0] == d.sum()
        assert np.array_equal(out, np.repeat(x, d, axis=0))


def test_batched_regulator_zeroes_padding():
    states = Tensor(np.arange(12.0).reshape(2, 3, 2))
    out, frames = length_regulate(states, np.array([[1, 2, 1], [3, 9, 9]]), np.array([3, 1]))
    assert frames.tolist() == [4, 3]
    assert np.all(out.data[1, 3:] == 0.0)


def test_clamp_durations():
    assert clamp_durations(np.array([-2.0, 0.4, 0.6, 2.5, 3.5])).tolist() == [1, 1, 1, 2, 4]
