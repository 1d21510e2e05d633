import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import TOY_SHAPES
from deltaforge.delta import TaskVector, extract
from deltaforge.errors import EmptyMatrix, UnclassifiedTensor, UnknownFamily, UnknownTask
from deltaforge.onebit import (
    ModulePattern,
    Position,
    QuantizedTaskVector,
    default_pattern,
    dequantize,
    load_quantized,
    pack_signs,
    quantize,
    quantize_matrix,
    reconstruct,
    save_quantized,
    scale_factor,
    unpack_signs,
)
from deltaforge.tensor_store import load_checkpoint


def test_scale_factor_by_hand():
    assert scale_factor(np.array([[1, -2], [3, -4]], dtype=np.float32)) == 2.5
    assert scale_factor(np.zeros((3, 2), dtype=np.float32)) == 0
    assert scale_factor(np.array([[-7.25]], dtype=np.float32)) == 7.25
    with pytest.raises(EmptyMatrix):
        scale_factor(np.zeros((0, 3), dtype=np.float32))


def test_quantize_matrix_by_hand():
    signs, alpha = quantize_matrix(np.array([[1, -2], [3, -4]], dtype=np.float32))
    np.testing.assert_array_equal(signs, [[True, False], [True, False]])
    assert alpha == 2.5
    np.testing.assert_array_equal(reconstruct(signs, alpha), [[2.5, -2.5], [2.5, -2.5]])


def test_zero_matrix_gives_positive_signs():
    signs, alpha = quantize_matrix(np.zeros((2, 3), dtype=np.float32))
    assert signs.all() and alpha == 0
    assert not reconstruct(signs, alpha).any()


def test_pack_layout():
    # bit j of byte k is element 8k+j, 1 means +1
    row = np.array([[True, False, False, False, False, False, False, True, True]])
    packed = pack_signs(row)
    assert packed.shape == (1, 2)
    assert packed[0, 0] == 0b10000001 and packed[0, 1] == 0b1


@pytest.mark.parametrize("n", range(1, 18))
def test_pack_unpack_exact(n):
    rng = np.random.default_rng(n)
    signs = rng.random((5, n)) < 0.5
    packed = pack_signs(signs)
    assert packed.shape == (5, math.ceil(n / 8))
    np.testing.assert_array_equal(unpack_signs(packed, n), signs)


def tiny_tv(seed=0):
    rng = np.random.default_rng(seed)
    deltas = {k: rng.standard_normal(s).astype(np.float32) for k, s in TOY_SHAPES.items()}
    return TaskVector(deltas, "h" * 64, "code")


@pytest.mark.parametrize(
    "position,expected",
    [
        ("attention", {"q_proj", "k_proj", "v_proj", "o_proj"}),
        ("mlp", {"gate_proj", "up_proj", "down_proj"}),
        ("linear", {"q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj"}),
        ("none", set()),
    ],
)
def test_selection_by_position(position, expected):
    tv = tiny_tv()
    q = quantize(tv, ModulePattern(position))
    assert {n.split(".")[-2] for n in q.signs} == expected
    assert len(q.signs) + len(q.passthrough) == len(tv.deltas)
    # embeddings, head and norms always pass through
    for name in ("model.embed_tokens.weight", "lm_head.weight", "model.norm.weight"):
        assert name in q.passthrough


def test_none_pattern_is_identity():
    tv = tiny_tv()
    assert dequantize(quantize(tv, ModulePattern(Position.NONE))) == tv


def test_unclassified_2d_tensor():
    tv = TaskVector({"mystery.weight": np.ones((2, 2), np.float32)}, "h", "chat")
    with pytest.raises(UnclassifiedTensor):
        quantize(tv, ModulePattern("linear"))
    custom = ModulePattern("linear", (("mystery*", "other-linear"),))
    assert list(quantize(tv, custom).signs) == ["mystery.weight"]


def test_default_pattern_table():
    assert default_pattern("llama2-7b", "chat").position is Position.MLP
    assert default_pattern("llama2-7b", "math").position is Position.ATTENTION
    assert default_pattern("llama2-7b", "code").position is Position.ATTENTION
    assert default_pattern("mistral-7b", "chat").position is Position.LINEAR
    assert default_pattern("mistral-7b", "math").position is Position.ATTENTION
    assert default_pattern("llama2-13b", "code").position is Position.ATTENTION
    assert default_pattern("llama2-13b", "chat").position is Position.ATTENTION
    assert default_pattern("mistral-7b", "chat", "mlp").position is Position.MLP
    with pytest.raises(UnknownFamily):
        default_pattern("gpt2", "chat")
    with pytest.raises(UnknownFamily):
        default_pattern("custom", "chat")
    with pytest.raises(UnknownTask):
        default_pattern("llama2-7b", "poetry")


def test_file_layout(tmp_path):
    tv = tiny_tv()
    q = quantize(tv, ModulePattern("mlp"))
    save_quantized(q, tmp_path / "q.safetensors")
    ckpt = load_checkpoint(tmp_path / "q.safetensors")
    assert ckpt.metadata["format"] == "onebit-delta/v1"
    assert ckpt.metadata["position"] == "mlp"
    assert ckpt.metadata["base_hash"] == tv.base_hash
    sign = ckpt["model.layers.0.mlp.down_proj.weight.sign"]
    assert sign.dtype == "u8" and sign.shape == (4, 1)
    scale = ckpt["model.layers.0.mlp.down_proj.weight.scale"]
    assert scale.dtype == "fp16" and scale.shape == (1,)
    assert ckpt["lm_head.weight"].dtype == "fp16"
    back = load_quantized(tmp_path / "q.safetensors")
    assert back.shapes == q.shapes
    for name in q.signs:
        np.testing.assert_array_equal(back.unpacked_signs(name), q.unpacked_signs(name))
    # second save of the loaded vector is byte-identical
    save_quantized(back, tmp_path / "q2.safetensors")
    assert (tmp_path / "q.safetensors").read_bytes() == (tmp_path / "q2.safetensors").read_bytes()


def test_report_bytes():
    q = quantize(tiny_tv(), ModulePattern("attention"))
    # four 4x4 attention matrices: 4 rows * 1 byte + 2 byte scale each
    quantized = [r for r in q.report.rows if r.alpha is not None]
    assert len(quantized) == 4
    assert all(r.quantized_bytes == 4 * 1 + 2 for r in quantized)
    assert "total" in q.report.format()


def test_toy_attention_selection_from_checkpoints(pre, experts):
    tv = extract(experts["math"], pre, "math")
    q = quantize(tv, default_pattern("llama2-7b", "math"))
    assert len(q.signs) == 4
    assert isinstance(q, QuantizedTaskVector)


# --- properties --------------------------------------------------------------

matrices = st.tuples(st.integers(1, 64), st.integers(1, 64)).flatmap(
    lambda s: arrays(np.float32, s, elements=st.floats(-1e3, 1e3, width=32))
)


@settings(max_examples=200, deadline=None)
@given(matrices)
def test_l1_preserved(w):
    signs, alpha = quantize_matrix(w)
    l1 = np.abs(w, dtype=np.float64).sum()
    l1_q = np.abs(reconstruct(signs, alpha), dtype=np.float64).sum()
    assert abs(l1_q - l1) <= 1e-6 * l1 + 1e-30


@settings(max_examples=200, deadline=None)
@given(matrices, st.floats(1e-3, 10), st.booleans())
def test_alpha_is_optimal(w, rel, up):
    signs, alpha = quantize_matrix(w)
    alt = np.float64(alpha) * (1 + rel if up else max(0.0, 1 - rel))
    pm = np.where(signs, 1.0, -1.0)
    w64 = w.astype(np.float64)
    assert np.linalg.norm(w64 - alt * pm) >= np.linalg.norm(w64 - np.float64(alpha) * pm) - 1e-9


@settings(max_examples=100, deadline=None)
@given(matrices, st.floats(-100, 100).filter(lambda c: abs(c) > 1e-2))
def test_scale_equivariance(w, c):
    signs, alpha = quantize_matrix(w)
    cw = (w.astype(np.float64) * c).astype(np.float32)
    csigns, calpha = quantize_matrix(cw)
    nonzero = cw != 0
    np.testing.assert_array_equal(csigns[nonzero], (signs if c > 0 else ~signs)[nonzero])
    assert calpha == pytest.approx(abs(c) * alpha, rel=1e-5, abs=1e-30)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["attention", "mlp", "linear", "none"]))
def test_requantize_idempotent(seed, position):
    q = quantize(tiny_tv(seed), ModulePattern(position))
    again = quantize(dequantize(q), ModulePattern(position))
    assert again == q


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["attention", "mlp", "linear", "none"]))
def test_partition(seed, position):
    tv = tiny_tv(seed)
    q = quantize(tv, ModulePattern(position))
    assert set(q.signs) | set(q.passthrough) == set(tv.deltas)
    assert not set(q.signs) & set(q.passthrough)
