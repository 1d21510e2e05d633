"""Storage accounting for deployment strategies.

A quantized m x n matrix costs ``m * ceil(n/8)`` bytes of signs plus a
2-byte fp16 scale; every other delta entry costs 2 bytes (fp16). The routing
baseline keeps every task vector at fp16.
"""

from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import MissingInput, UnknownFamily
from .merge_engine import MergeRecipe
from .onebit import FORMAT as ONEBIT_FORMAT
from .onebit import FAMILY_POSITIONS, ModulePattern, Position, default_pattern
from .tensor_store import load_checkpoint

FP16_BYTES = 2
SCALE_BYTES = 2


@dataclass(frozen=True)
class ArchSpec:
    name: str
    layers: int
    hidden: int
    intermediate: int
    heads: int
    kv_heads: int
    vocab: int
    nominal_params: float
    head_dim: int | None = None

    @property
    def hd(self) -> int:
        return self.head_dim or self.hidden // self.heads

    def tensor_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        """HF-style (name, shape) list; linear weights are (out, in)."""
        h, hd = self.hidden, self.hd
        q, kv = self.heads * hd, self.kv_heads * hd
        out = [("model.embed_tokens.weight", (self.vocab, h))]
        for i in range(self.layers):
            p = f"model.layers.{i}"
            out += [
                (f"{p}.self_attn.q_proj.weight", (q, h)),
                (f"{p}.self_attn.k_proj.weight", (kv, h)),
                (f"{p}.self_attn.v_proj.weight", (kv, h)),
                (f"{p}.self_attn.o_proj.weight", (h, q)),
                (f"{p}.mlp.gate_proj.weight", (self.intermediate, h)),
                (f"{p}.mlp.up_proj.weight", (self.intermediate, h)),
                (f"{p}.mlp.down_proj.weight", (h, self.intermediate)),
                (f"{p}.input_layernorm.weight", (h,)),
                (f"{p}.post_attention_layernorm.weight", (h,)),
            ]
        out += [("model.norm.weight", (h,)), ("lm_head.weight", (self.vocab, h))]
        return out

    @property
    def param_count(self) -> int:
        return sum(math.prod(s) for _, s in self.tensor_shapes())


# nominal_params are the published totals for each release
ARCHS = {
    "llama2-7b": ArchSpec("llama2-7b", 32, 4096, 11008, 32, 32, 32000, 6.74e9),
    "mistral-7b": ArchSpec("mistral-7b", 32, 4096, 14336, 32, 8, 32000, 7.24e9),
    "llama2-13b": ArchSpec("llama2-13b", 40, 5120, 13824, 40, 40, 32000, 13.02e9),
}


def get_arch(name: str) -> ArchSpec:
    try:
        return ARCHS[name.lower()]
    except KeyError:
        raise UnknownFamily(f"no architecture spec for {name!r} (known: {', '.join(ARCHS)})") from None


def quantized_matrix_bytes(m: int, n: int) -> int:
    return m * math.ceil(n / 8) + SCALE_BYTES


@dataclass
class TaskStorage:
    task_id: str
    position: str
    quantized_bytes: int = 0
    passthrough_bytes: int = 0
    quantized_params: int = 0
    passthrough_params: int = 0

    @property
    def total(self) -> int:
        return self.quantized_bytes + self.passthrough_bytes

    @property
    def full_fp16_bytes(self) -> int:
        return FP16_BYTES * (self.quantized_params + self.passthrough_params)


@dataclass
class StorageReport:
    strategy: str
    base_bytes: int
    tasks: list[TaskStorage] = field(default_factory=list)
    mode: str = "analytic"

    @property
    def delta_bytes(self) -> int:
        return sum(t.total for t in self.tasks)

    @property
    def total_bytes(self) -> int:
        return self.base_bytes + self.delta_bytes

    @property
    def routing_bytes(self) -> int:
        """Baseline: the base plus every task vector at fp16."""
        return self.base_bytes + self.routing_delta_bytes

    @property
    def routing_delta_bytes(self) -> int:
        return sum(t.full_fp16_bytes for t in self.tasks)

    @property
    def ratio(self) -> float:
        return self.total_bytes / self.routing_bytes

    @property
    def delta_only_ratio(self) -> float:
        """Same comparison with the shared base left out of both sides."""
        return self.delta_bytes / self.routing_delta_bytes

    def rows(self) -> list[dict]:
        rows = [{"component": "base", "position": "", "quantized_bytes": 0,
                 "passthrough_bytes": self.base_bytes, "total_bytes": self.base_bytes,
                 "fp16_bytes": self.base_bytes}]
        for t in self.tasks:
            rows.append({"component": f"delta:{t.task_id}", "position": t.position,
                         "quantized_bytes": t.quantized_bytes, "passthrough_bytes": t.passthrough_bytes,
                         "total_bytes": t.total, "fp16_bytes": t.full_fp16_bytes})
        return rows

    def format(self) -> str:
        lines = [f"strategy: {self.strategy} ({self.mode})",
                 f"{'component':20s} {'position':>10s} {'bytes':>16s} {'fp16 bytes':>16s}"]
        for r in self.rows():
            lines.append(f"{r['component']:20s} {r['position']:>10s} {r['total_bytes']:16d} {r['fp16_bytes']:16d}")
        lines.append(f"{'total':20s} {'':>10s} {self.total_bytes:16d} {self.routing_bytes:16d}")
        lines.append(f"ratio vs routing (base + deltas): {100 * self.ratio:.2f}%")
        lines.append(f"ratio vs routing (deltas only):   {100 * self.delta_only_ratio:.2f}%")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["strategy", "component", "position", "quantized_bytes", "passthrough_bytes",
                  "total_bytes", "fp16_bytes"]
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for r in self.rows():
            w.writerow({"strategy": self.strategy, **r})
        w.writerow({"strategy": self.strategy, "component": "ratio_with_base",
                    "total_bytes": f"{100 * self.ratio:.2f}"})
        w.writerow({"strategy": self.strategy, "component": "ratio_deltas_only",
                    "total_bytes": f"{100 * self.delta_only_ratio:.2f}"})
        return buf.getvalue()


def account_task(task_id: str, shapes: Iterable[tuple[str, tuple[int, ...]]],
                 pattern: ModulePattern) -> TaskStorage:
    ts = TaskStorage(task_id, pattern.position.value)
    for name, shape in shapes:
        size = math.prod(shape)
        if pattern.selects(name, shape):
            ts.quantized_bytes += quantized_matrix_bytes(*shape)
            ts.quantized_params += size
        else:
            ts.passthrough_bytes += FP16_BYTES * size
            ts.passthrough_params += size
    return ts


def measure_shapes(shapes: list[tuple[str, tuple[int, ...]]], patterns: Mapping[str, ModulePattern],
                   strategy: str = "1bit-merging") -> StorageReport:
    base = FP16_BYTES * sum(math.prod(s) for _, s in shapes)
    tasks = [account_task(t, shapes, patterns[t]) for t in sorted(patterns)]
    return StorageReport(strategy, base, tasks)


def recipe_patterns(recipe: MergeRecipe, tasks: Iterable[str] | None = None) -> dict[str, ModulePattern]:
    if tasks is None:
        tasks = set(recipe.positions) | set(recipe.sources)
    out = {}
    for t in tasks:
        out[t] = default_pattern(recipe.family, t, recipe.positions.get(t))
    return out


def measure(recipe: MergeRecipe, arch: ArchSpec | str | None = None) -> StorageReport:
    """Analytic accounting when ``arch`` is given, else byte counts of the recipe's files."""
    if arch is not None:
        if isinstance(arch, str):
            arch = get_arch(arch)
        tasks = set(recipe.positions) | set(recipe.sources)
        if recipe.family.lower() in FAMILY_POSITIONS:
            tasks |= set(FAMILY_POSITIONS[recipe.family.lower()])
        if not tasks:
            raise MissingInput("recipe names no tasks (positions.<task> or sources.<task>)")
        label = ", ".join(f"{t}->{p.position.value}" for t, p in sorted(recipe_patterns(recipe, tasks).items()))
        return measure_shapes(arch.tensor_shapes(), recipe_patterns(recipe, tasks), f"1bit-merging [{label}]")
    return measure_files(recipe)


def measure_files(recipe: MergeRecipe) -> StorageReport:
    """Byte-count mode: actual sizes of the base file and each task's delta file.

    Sources that are onebit-delta files are counted as stored; any other source
    counts as an fp16 task vector.
    """
    if not recipe.base or not recipe.sources:
        raise MissingInput("byte-count mode needs base and sources.<task> files (or pass --arch)")
    for p in [recipe.base, *recipe.sources.values()]:
        if not os.path.exists(p):
            raise MissingInput(f"no such file: {p}")
    base_bytes = os.path.getsize(recipe.base)
    report = StorageReport("1bit-merging", base_bytes, mode="files")
    for task in sorted(recipe.sources):
        path = recipe.sources[task]
        ckpt = load_checkpoint(path)
        size = os.path.getsize(path)
        if ckpt.metadata.get("format") == ONEBIT_FORMAT:
            ts = TaskStorage(task, ckpt.metadata.get("position", "none"))
            for name, t in ckpt.tensors.items():
                if name.endswith(".sign"):
                    cols = int(ckpt.metadata.get(f"cols.{name[:-5]}", t.shape[1] * 8))
                    ts.quantized_params += t.shape[0] * cols
                elif name.endswith(".scale") and name[:-6] + ".sign" in ckpt.tensors:
                    continue
                else:
                    ts.passthrough_params += math.prod(t.shape)
            # header overhead is attributed to the passthrough share
            ts.quantized_bytes = sum(t.nbytes for n, t in ckpt.tensors.items()
                                     if n.endswith(".sign") or (n.endswith(".scale") and n[:-6] + ".sign" in ckpt.tensors))
            ts.passthrough_bytes = size - ts.quantized_bytes
        else:
            params = sum(math.prod(t.shape) for t in ckpt.tensors.values())
            ts = TaskStorage(task, Position.NONE.value, 0, FP16_BYTES * params, 0, params)
        report.tasks.append(ts)
    return report
