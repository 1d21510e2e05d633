"""Module-selective 1-bit quantization of task vectors.

A selected matrix ``W`` (m x n) is replaced by ``alpha * sign(W)`` with
``alpha = sum|W| / (m*n)``. Signs are packed eight per byte along each row;
``alpha`` is stored as fp16.
"""

from __future__ import annotations

import enum
import fnmatch
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .delta import TaskVector
from .errors import EmptyMatrix, MalformedHeader, UnclassifiedTensor, UnknownFamily, UnknownTask
from .tensor_store import (
    ModelCheckpoint,
    Tensor,
    load_checkpoint,
    save_checkpoint,
)

FORMAT = "onebit-delta/v1"


class Position(str, enum.Enum):
    ATTENTION = "attention"
    MLP = "mlp"
    LINEAR = "linear"
    NONE = "none"

    @classmethod
    def parse(cls, value) -> "Position":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            choices = ", ".join(p.value for p in cls)
            raise ValueError(f"unknown position {value!r} (expected one of {choices})") from None


# module classes a 2D tensor can fall into
ATTENTION, MLP, OTHER_LINEAR, NON_LINEAR = "attention", "mlp", "other-linear", "non-linear"

DEFAULT_NAME_RULES: tuple[tuple[str, str], ...] = (
    ("*q_proj*", ATTENTION),
    ("*k_proj*", ATTENTION),
    ("*v_proj*", ATTENTION),
    ("*o_proj*", ATTENTION),
    ("*gate_proj*", MLP),
    ("*up_proj*", MLP),
    ("*down_proj*", MLP),
    ("*embed_tokens*", NON_LINEAR),
    ("*lm_head*", NON_LINEAR),
    ("*norm*", NON_LINEAR),
)

_SELECTS = {
    Position.ATTENTION: {ATTENTION},
    Position.MLP: {MLP},
    Position.LINEAR: {ATTENTION, MLP, OTHER_LINEAR},
    Position.NONE: set(),
}


@dataclass(frozen=True)
class ModulePattern:
    position: Position = Position.NONE
    name_rules: tuple[tuple[str, str], ...] = DEFAULT_NAME_RULES

    def __post_init__(self):
        object.__setattr__(self, "position", Position.parse(self.position))
        object.__setattr__(self, "name_rules", tuple(tuple(r) for r in self.name_rules))

    def classify(self, name: str) -> str | None:
        """First matching rule wins; None if no rule matches."""
        for glob, module_class in self.name_rules:
            if fnmatch.fnmatchcase(name, glob):
                return module_class
        return None

    def selects(self, name: str, shape: Sequence[int]) -> bool:
        if len(shape) != 2:
            return False
        module_class = self.classify(name)
        if module_class is None:
            raise UnclassifiedTensor(f"no name rule classifies 2D tensor {name!r}")
        return module_class in _SELECTS[self.position]


# Highlighted cells of the per-family position ablations.
FAMILY_POSITIONS = {
    "llama2-7b": {"chat": Position.MLP, "math": Position.ATTENTION, "code": Position.ATTENTION},
    "mistral-7b": {"chat": Position.LINEAR, "math": Position.ATTENTION, "code": Position.ATTENTION},
    "llama2-13b": {"chat": Position.ATTENTION, "math": Position.ATTENTION, "code": Position.ATTENTION},
}


def default_pattern(family: str, task_id: str, position=None) -> ModulePattern:
    """Quantization position that worked best for ``task_id`` experts of ``family``.

    ``family="custom"`` has no table and needs ``position``; for table-backed
    families an explicit ``position`` overrides the table.
    """
    family = family.lower()
    if family == "custom":
        if position is None:
            raise UnknownFamily("family 'custom' requires an explicit position")
        return ModulePattern(Position.parse(position))
    if family not in FAMILY_POSITIONS:
        raise UnknownFamily(
            f"unknown family {family!r} (known: {', '.join(sorted(FAMILY_POSITIONS))}, custom)"
        )
    if position is not None:
        return ModulePattern(Position.parse(position))
    table = FAMILY_POSITIONS[family]
    if task_id not in table:
        raise UnknownTask(f"no default position for task {task_id!r} in family {family}")
    return ModulePattern(table[task_id])


# --- per-matrix kernels ------------------------------------------------------


def scale_factor(w: np.ndarray) -> np.float32:
    """Mean absolute value of a matrix, rounded to fp32."""
    w = np.asarray(w, dtype=np.float32)
    if w.size == 0:
        raise EmptyMatrix("scale factor of an empty matrix")
    return np.float32(np.abs(w, dtype=np.float64).sum() / w.size)


def signs_of(w: np.ndarray) -> np.ndarray:
    """Boolean sign matrix, True for +1. Zero maps to +1."""
    return ~(np.asarray(w) < 0)


def quantize_matrix(w: np.ndarray) -> tuple[np.ndarray, np.float32]:
    w = np.asarray(w, dtype=np.float32)
    return signs_of(w), scale_factor(w)


def reconstruct(signs: np.ndarray, alpha) -> np.ndarray:
    alpha = np.float32(alpha)
    return np.where(signs, alpha, -alpha).astype(np.float32)


def pack_signs(signs: np.ndarray) -> np.ndarray:
    """(m, n) bool -> (m, ceil(n/8)) uint8; bit j of byte k is element 8k+j."""
    signs = np.asarray(signs, dtype=bool)
    if signs.ndim != 2:
        raise ValueError("sign matrices are 2D")
    return np.packbits(signs, axis=1, bitorder="little")


def unpack_signs(packed: np.ndarray, n: int) -> np.ndarray:
    packed = np.asarray(packed, dtype=np.uint8)
    if packed.shape[1] != math.ceil(n / 8):
        raise MalformedHeader(f"packed width {packed.shape[1]} does not fit {n} columns")
    return np.unpackbits(packed, axis=1, count=n, bitorder="little").astype(bool)


def _fp16_scale(alpha) -> np.float16:
    return np.float16(min(float(alpha), float(np.finfo(np.float16).max)))


# --- task-vector level ---------------------------------------------------------


@dataclass
class TensorStats:
    name: str
    original_bytes: int
    quantized_bytes: int
    alpha: float | None
    l1_norm: float
    l2_error: float


@dataclass
class QuantizationReport:
    rows: list[TensorStats] = field(default_factory=list)

    @property
    def original_bytes(self) -> int:
        return sum(r.original_bytes for r in self.rows)

    @property
    def quantized_bytes(self) -> int:
        return sum(r.quantized_bytes for r in self.rows)

    @property
    def l2_error(self) -> float:
        return math.sqrt(sum(r.l2_error**2 for r in self.rows))

    def format(self) -> str:
        lines = [f"{'tensor':48s} {'orig':>10s} {'quant':>10s} {'alpha':>10s} {'l2 err':>10s}"]
        for r in self.rows:
            a = "-" if r.alpha is None else f"{r.alpha:.4g}"
            lines.append(
                f"{r.name:48s} {r.original_bytes:10d} {r.quantized_bytes:10d} {a:>10s} {r.l2_error:10.4g}"
            )
        lines.append(
            f"{'total':48s} {self.original_bytes:10d} {self.quantized_bytes:10d} {'':>10s} {self.l2_error:10.4g}"
        )
        return "\n".join(lines)


@dataclass(eq=False)
class QuantizedTaskVector:
    signs: dict[str, np.ndarray]  # packed uint8, (m, ceil(n/8))
    shapes: dict[str, tuple[int, int]]
    scales: dict[str, np.float16]
    passthrough: dict[str, np.ndarray]
    position: ModulePattern
    base_hash: str
    task_id: str
    order: list[str] = field(default_factory=list)
    report: QuantizationReport | None = None

    def __post_init__(self):
        if not self.order:
            self.order = list(self.signs) + list(self.passthrough)

    def __eq__(self, other) -> bool:
        if not isinstance(other, QuantizedTaskVector):
            return NotImplemented
        return (
            self.base_hash == other.base_hash
            and self.task_id == other.task_id
            and self.position.position == other.position.position
            and self.order == other.order
            and self.shapes == other.shapes
            and all(np.array_equal(self.signs[k], other.signs[k]) for k in self.signs)
            and set(self.signs) == set(other.signs)
            and {k: float(v) for k, v in self.scales.items()}
            == {k: float(v) for k, v in other.scales.items()}
            and set(self.passthrough) == set(other.passthrough)
            and all(
                self.passthrough[k].tobytes() == other.passthrough[k].tobytes()
                for k in self.passthrough
            )
        )

    def unpacked_signs(self, name: str) -> np.ndarray:
        return unpack_signs(self.signs[name], self.shapes[name][1])

    def mean_scale(self) -> float:
        if not self.scales:
            return 0.0
        return float(np.mean([np.float32(s) for s in self.scales.values()]))

    def to_checkpoint(self) -> ModelCheckpoint:
        tensors = {}
        for name in self.order:
            if name in self.signs:
                tensors[f"{name}.sign"] = Tensor("u8", self.signs[name])
                tensors[f"{name}.scale"] = Tensor("fp16", np.array([self.scales[name]], dtype="<f2"))
            else:
                tensors[name] = Tensor.from_array(self.passthrough[name], "fp16")
        meta = {
            "format": FORMAT,
            "position": self.position.position.value,
            "base_hash": self.base_hash,
            "task_id": self.task_id,
        }
        for name, (_, n) in self.shapes.items():
            if n % 8:
                meta[f"cols.{name}"] = str(n)
        return ModelCheckpoint(tensors, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint, name_rules=DEFAULT_NAME_RULES) -> "QuantizedTaskVector":
        meta = ckpt.metadata
        if meta.get("format") != FORMAT:
            raise MalformedHeader(f"not a {FORMAT} file (format={meta.get('format')!r})")
        signs, shapes, scales, passthrough, order = {}, {}, {}, {}, []
        for key, t in ckpt.tensors.items():
            if key.endswith(".sign"):
                name = key[: -len(".sign")]
                scale_t = ckpt.tensors.get(f"{name}.scale")
                if t.dtype != "u8" or t.ndim != 2 or scale_t is None:
                    raise MalformedHeader(f"{key!r} lacks a u8 2D payload or matching .scale")
                # column count is not recoverable from packed bytes alone
                n = int(meta.get(f"cols.{name}", t.shape[1] * 8))
                signs[name] = t.data
                shapes[name] = (t.shape[0], n)
                scales[name] = np.float16(scale_t.data.reshape(-1)[0])
                order.append(name)
            elif key.endswith(".scale") and key[: -len(".scale")] + ".sign" in ckpt.tensors:
                continue
            else:
                passthrough[key] = t.to_float32()
                order.append(key)
        return cls(
            signs, shapes, scales, passthrough,
            ModulePattern(Position.parse(meta.get("position", "none")), name_rules),
            meta.get("base_hash", ""), meta.get("task_id", ""), order,
        )


def quantize(tv: TaskVector, pattern: ModulePattern) -> QuantizedTaskVector:
    """Quantize the matrices ``pattern`` selects; everything else passes through."""
    signs, shapes, scales, passthrough = {}, {}, {}, {}
    report = QuantizationReport()
    for name, d in tv.deltas.items():
        l1 = float(np.abs(d, dtype=np.float64).sum())
        if pattern.selects(name, d.shape):
            s, alpha = quantize_matrix(d)
            scale = _fp16_scale(alpha)
            signs[name] = pack_signs(s)
            shapes[name] = tuple(d.shape)
            scales[name] = scale
            err = float(np.linalg.norm((reconstruct(s, np.float32(scale)) - d).ravel()))
            report.rows.append(
                TensorStats(name, d.size * 2, signs[name].nbytes + 2, float(scale), l1, err)
            )
        else:
            passthrough[name] = d.copy()
            report.rows.append(TensorStats(name, d.size * 2, d.size * 2, None, l1, 0.0))
    return QuantizedTaskVector(
        signs, shapes, scales, passthrough, pattern, tv.base_hash, tv.task_id,
        list(tv.deltas), report,
    )


def dequantize(qtv: QuantizedTaskVector) -> TaskVector:
    deltas = {}
    for name in qtv.order:
        if name in qtv.signs:
            deltas[name] = reconstruct(qtv.unpacked_signs(name), np.float32(qtv.scales[name]))
        else:
            deltas[name] = qtv.passthrough[name].copy()
    return TaskVector(deltas, qtv.base_hash, qtv.task_id)


def save_quantized(qtv: QuantizedTaskVector, path) -> None:
    save_checkpoint(qtv.to_checkpoint(), path)


def load_quantized(path, name_rules=DEFAULT_NAME_RULES) -> QuantizedTaskVector:
    return QuantizedTaskVector.from_checkpoint(load_checkpoint(path), name_rules)
