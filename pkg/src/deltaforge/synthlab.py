"""Desk-scale stand-in for the chat/math/code experiments.

Three classification tasks share one input space but draw their inputs from
different regions and label them with unrelated teachers. A small residual
network (gated "attention" block + SwiGLU "MLP" block per layer, named like a
LLaMA checkpoint) is randomly initialised as the shared base, then fine-tuned
once per task to produce the experts.
"""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptySplit, LabBoundsError, ShapeMismatch
from .tensor_store import ModelCheckpoint, from_arrays, load_checkpoint, save_checkpoint

TASKS = ("chat", "code", "math")
# positions used by the lab's quantized experts; MLP keeps >= 95% own-task
# accuracy for every task here, attention does not
LAB_POSITIONS = {"chat": "mlp", "code": "mlp", "math": "mlp"}
# regression seed: its first data seed already meets the construction bounds
SHIPPED_SEED = 1


@dataclass
class LabConfig:
    seed: int = SHIPPED_SEED
    input_dim: int = 16
    hidden: int = 48
    intermediate: int = 96
    layers: int = 2
    classes: int = 4
    n_train: int = 2400
    n_test: int = 600
    region_scale: float = 4.0
    finetune_steps: int = 400
    finetune_lr: float = 5e-3
    tasks: tuple[str, ...] = TASKS


@dataclass
class SyntheticTaskSuite:
    config: LabConfig
    data_seed: int
    positions: dict[str, str] = field(default_factory=lambda: dict(LAB_POSITIONS))
    expert_accuracy: dict[str, dict[str, float]] = field(default_factory=dict)
    pre_accuracy: dict[str, float] = field(default_factory=dict)

    def to_json(self) -> str:
        d = asdict(self)
        d["config"]["tasks"] = list(self.config.tasks)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticTaskSuite":
        d = json.loads(text)
        cfg = dict(d["config"])
        cfg["tasks"] = tuple(cfg["tasks"])
        return cls(LabConfig(**cfg), d["data_seed"], d.get("positions", {}),
                   d.get("expert_accuracy", {}), d.get("pre_accuracy", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SyntheticTaskSuite":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def split(self, task: str, which: str) -> tuple[np.ndarray, np.ndarray]:
        return task_data(self.config, self.data_seed, task, which)


def task_data(cfg: LabConfig, data_seed: int, task: str, which: str):
    """Inputs and labels for one task split; a pure function of its arguments."""
    t = cfg.tasks.index(task)
    rng = np.random.default_rng([data_seed, t])
    center = rng.standard_normal(cfg.input_dim)
    center *= cfg.region_scale / np.linalg.norm(center)
    teacher = rng.standard_normal((cfg.input_dim, cfg.classes))
    n = cfg.n_train if which == "train" else cfg.n_test
    offset = 0 if which == "train" else 1
    x_rng = np.random.default_rng([data_seed, t, 7 + offset])
    local = x_rng.standard_normal((n, cfg.input_dim))
    x = (center + local).astype(np.float32)
    y = np.argmax(local @ teacher, axis=1)
    return x, y


# --- toy model -------------------------------------------------------------------


def tensor_shapes(cfg: LabConfig) -> dict[str, tuple[int, ...]]:
    h, i = cfg.hidden, cfg.intermediate
    shapes = {"model.embed_tokens.weight": (cfg.input_dim, h)}
    for layer in range(cfg.layers):
        p = f"model.layers.{layer}"
        shapes[f"{p}.input_layernorm.weight"] = (h,)
        for proj in ("q_proj", "k_proj", "v_proj", "o_proj"):
            shapes[f"{p}.self_attn.{proj}.weight"] = (h, h)
        shapes[f"{p}.post_attention_layernorm.weight"] = (h,)
        shapes[f"{p}.mlp.gate_proj.weight"] = (i, h)
        shapes[f"{p}.mlp.up_proj.weight"] = (i, h)
        shapes[f"{p}.mlp.down_proj.weight"] = (h, i)
    shapes["model.norm.weight"] = (h,)
    shapes["lm_head.weight"] = (cfg.classes, h)
    return shapes


def init_params(cfg: LabConfig, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng([seed, 99])
    params = {}
    for name, shape in tensor_shapes(cfg).items():
        if len(shape) == 1:
            params[name] = np.ones(shape, dtype=np.float32)
        else:
            fan_in = shape[0] if name.endswith("embed_tokens.weight") else shape[1]
            params[name] = (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32)
    return params


def _rms(h, w, xp):
    return h / xp.sqrt((h * h).mean(axis=-1, keepdims=True) + 1e-6) * w


def logits(params, x, cfg: LabConfig, xp=np):
    """Forward pass, written against an array namespace so numpy and torch share it."""
    sig = (lambda z: 1 / (1 + xp.exp(-z)))
    h = x @ params["model.embed_tokens.weight"]
    for layer in range(cfg.layers):
        p = f"model.layers.{layer}"
        n = _rms(h, params[f"{p}.input_layernorm.weight"], xp)
        q = n @ params[f"{p}.self_attn.q_proj.weight"].T
        k = n @ params[f"{p}.self_attn.k_proj.weight"].T
        v = n @ params[f"{p}.self_attn.v_proj.weight"].T
        h = h + (sig(q * k) * v) @ params[f"{p}.self_attn.o_proj.weight"].T
        n = _rms(h, params[f"{p}.post_attention_layernorm.weight"], xp)
        g = n @ params[f"{p}.mlp.gate_proj.weight"].T
        u = n @ params[f"{p}.mlp.up_proj.weight"].T
        h = h + (g * sig(g) * u) @ params[f"{p}.mlp.down_proj.weight"].T
    h = _rms(h, params["model.norm.weight"], xp)
    return h @ params["lm_head.weight"].T


def _finetune(params: dict[str, np.ndarray], x, y, cfg: LabConfig, seed: int) -> dict[str, np.ndarray]:
    import torch

    torch.set_num_threads(1)
    torch.manual_seed(seed)
    tp = {k: torch.tensor(v, requires_grad=True) for k, v in params.items()}
    opt = torch.optim.Adam(tp.values(), lr=cfg.finetune_lr)
    xt, yt = torch.tensor(x), torch.tensor(y)
    for _ in range(cfg.finetune_steps):
        opt.zero_grad()
        loss = torch.nn.functional.cross_entropy(logits(tp, xt, cfg, torch), yt)
        loss.backward()
        opt.step()
    return {k: v.detach().numpy().astype(np.float32) for k, v in tp.items()}


def to_params(ckpt: ModelCheckpoint, cfg: LabConfig) -> dict[str, np.ndarray]:
    expected = tensor_shapes(cfg)
    if set(ckpt.tensors) != set(expected):
        raise ShapeMismatch("checkpoint tensor names do not match the toy model")
    out = {}
    for name, shape in expected.items():
        t = ckpt[name]
        if t.shape != shape:
            raise ShapeMismatch(f"{name!r}: {list(t.shape)} vs toy model {list(shape)}")
        out[name] = t.to_float32()
    return out


def evaluate(ckpt: ModelCheckpoint, suite: SyntheticTaskSuite) -> dict[str, float]:
    """Held-out accuracy on every task."""
    params = to_params(ckpt, suite.config)
    acc = {}
    for task in suite.config.tasks:
        x, y = suite.split(task, "test")
        if len(y) == 0:
            raise EmptySplit(f"test split of {task!r} is empty")
        pred = np.argmax(logits(params, x, suite.config), axis=1)
        acc[task] = float(np.mean(pred == y))
    return acc


def _satisfies_bounds(suite: SyntheticTaskSuite) -> bool:
    tasks = suite.config.tasks
    if any(suite.pre_accuracy[t] > 0.60 for t in tasks):
        return False
    for expert in tasks:
        for task in tasks:
            acc = suite.expert_accuracy[expert][task]
            if (task == expert and acc < 0.90) or (task != expert and acc > 0.60):
                return False
    return True


def make_experts(seed: int = SHIPPED_SEED, cfg: LabConfig | None = None, attempts: int = 5):
    """Build the shared base, one expert per task, and the suite describing them.

    If a generated suite misses its construction bounds the data seed is
    advanced and generation repeated, up to ``attempts`` times.
    """
    cfg = cfg or LabConfig(seed=seed)
    cfg.seed = seed
    for attempt in range(attempts):
        data_seed = seed + 1000 * attempt
        pre_params = init_params(cfg, data_seed)
        pre = from_arrays(pre_params, metadata={"lab": "pre", "seed": str(data_seed)})
        suite = SyntheticTaskSuite(cfg, data_seed)
        suite.pre_accuracy = evaluate(pre, suite)
        experts = {}
        for i, task in enumerate(cfg.tasks):
            x, y = suite.split(task, "train")
            tuned = _finetune(pre_params, x, y, cfg, data_seed * 31 + i)
            experts[task] = from_arrays(tuned, metadata={"lab": f"expert:{task}", "seed": str(data_seed)})
            suite.expert_accuracy[task] = evaluate(experts[task], suite)
        if _satisfies_bounds(suite):
            return pre, experts, suite
    raise LabBoundsError(f"no suite within construction bounds after {attempts} attempts from seed {seed}")


def write_lab(out_dir, seed: int = SHIPPED_SEED) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    pre, experts, suite = make_experts(seed)
    save_checkpoint(pre, out / "pre.safetensors")
    paths = {"pre": str(out / "pre.safetensors"), "suite": str(out / "suite.json")}
    for task, ckpt in experts.items():
        save_checkpoint(ckpt, out / f"expert_{task}.safetensors")
        paths[task] = str(out / f"expert_{task}.safetensors")
    suite.save(out / "suite.json")
    return {"paths": paths, "seconds": time.perf_counter() - t0, "suite": suite}


def load_lab(out_dir):
    out = Path(out_dir)
    suite = SyntheticTaskSuite.load(out / "suite.json")
    pre = load_checkpoint(out / "pre.safetensors")
    experts = {t: load_checkpoint(out / f"expert_{t}.safetensors") for t in suite.config.tasks}
    return pre, experts, suite
