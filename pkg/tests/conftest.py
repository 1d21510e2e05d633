import numpy as np
import pytest

from deltaforge.tensor_store import ModelCheckpoint, Tensor, from_arrays

TOY_SHAPES = {
    "model.embed_tokens.weight": (6, 4),
    "model.layers.0.input_layernorm.weight": (4,),
    "model.layers.0.self_attn.q_proj.weight": (4, 4),
    "model.layers.0.self_attn.k_proj.weight": (4, 4),
    "model.layers.0.self_attn.v_proj.weight": (4, 4),
    "model.layers.0.self_attn.o_proj.weight": (4, 4),
    "model.layers.0.post_attention_layernorm.weight": (4,),
    "model.layers.0.mlp.gate_proj.weight": (5, 4),
    "model.layers.0.mlp.up_proj.weight": (5, 4),
    "model.layers.0.mlp.down_proj.weight": (4, 5),
    "model.norm.weight": (4,),
    "lm_head.weight": (6, 4),
}


def toy_checkpoint(seed=0, dtype="fp32", scale=1.0, metadata=None) -> ModelCheckpoint:
    rng = np.random.default_rng(seed)
    arrays = {k: (rng.standard_normal(s) * scale).astype(np.float32) for k, s in TOY_SHAPES.items()}
    return from_arrays(arrays, dtype=dtype, metadata=metadata)


def perturbed(ckpt: ModelCheckpoint, seed: int, scale=0.1) -> ModelCheckpoint:
    rng = np.random.default_rng(seed)
    out = {}
    for name, t in ckpt.tensors.items():
        x = t.to_float32() + rng.standard_normal(t.shape).astype(np.float32) * np.float32(scale)
        out[name] = Tensor.from_array(x, t.dtype)
    return ModelCheckpoint(out, dict(ckpt.metadata))


@pytest.fixture
def pre():
    return toy_checkpoint(0)


@pytest.fixture
def experts(pre):
    return {t: perturbed(pre, i + 1) for i, t in enumerate(("chat", "code", "math"))}


# acceptance summary: one line per criterion after the run
ACCEPTANCE: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"criterion {key}: {'PASS' if ok else 'FAIL'}  {detail}")
