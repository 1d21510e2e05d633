"""Task vectors: fine-tuned minus pre-trained parameters, kept in fp32."""

from __future__ import annotations

import fnmatch
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import BaseMismatch, EmptyInput, MalformedHeader, NameSetMismatch, ShapeMismatch
from .tensor_store import (
    FLOAT_DTYPES,
    ModelCheckpoint,
    Tensor,
    checkpoint_digest,
    load_checkpoint,
    save_checkpoint,
)

FORMAT = "delta/v1"

# Tensors dropped by ``extract(..., exclude_embeddings=True)``.
EMBEDDING_GLOBS = ("*embed_tokens*", "*lm_head*", "*wte*", "*word_embeddings*")


@dataclass(eq=False)
class TaskVector:
    deltas: dict[str, np.ndarray]
    base_hash: str
    task_id: str
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        self.deltas = {
            k: np.ascontiguousarray(v, dtype=np.float32) for k, v in self.deltas.items()
        }

    def __len__(self) -> int:
        return len(self.deltas)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TaskVector):
            return NotImplemented
        return (
            self.base_hash == other.base_hash
            and self.task_id == other.task_id
            and list(self.deltas) == list(other.deltas)
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in zip(self.deltas.values(), other.deltas.values())
            )
        )

    def names(self) -> list[str]:
        return list(self.deltas)

    def to_checkpoint(self) -> ModelCheckpoint:
        meta = dict(self.metadata)
        meta.update(format=FORMAT, task_id=self.task_id, base_hash=self.base_hash)
        return ModelCheckpoint(
            {k: Tensor("fp32", v) for k, v in self.deltas.items()}, meta
        )

    @classmethod
    def from_checkpoint(cls, ckpt: ModelCheckpoint) -> "TaskVector":
        meta = dict(ckpt.metadata)
        if meta.get("format") != FORMAT:
            raise MalformedHeader(f"not a {FORMAT} file (format={meta.get('format')!r})")
        task_id = meta.pop("task_id", "")
        base_hash = meta.pop("base_hash", "")
        meta.pop("format")
        return cls({k: t.to_float32() for k, t in ckpt.tensors.items()}, base_hash, task_id, meta)


def save_task_vector(tv: TaskVector, path) -> None:
    save_checkpoint(tv.to_checkpoint(), path)


def load_task_vector(path) -> TaskVector:
    return TaskVector.from_checkpoint(load_checkpoint(path))


def _check_names(sft: Iterable[str], pre: Iterable[str]) -> None:
    sft, pre = set(sft), set(pre)
    if sft != pre:
        raise NameSetMismatch(sft - pre, pre - sft)


def extract(
    sft: ModelCheckpoint,
    pre: ModelCheckpoint,
    task_id: str,
    exclude_embeddings: bool = False,
) -> TaskVector:
    """deltas[name] = fp32(sft[name]) - fp32(pre[name]), in ``pre``'s tensor order."""
    _check_names(sft.tensors, pre.tensors)
    deltas = {}
    for name, base in pre.tensors.items():
        if exclude_embeddings and any(fnmatch.fnmatchcase(name, g) for g in EMBEDDING_GLOBS):
            continue
        tuned = sft.tensors[name]
        if tuned.shape != base.shape:
            raise ShapeMismatch(f"{name!r}: fine-tuned {list(tuned.shape)} vs base {list(base.shape)}")
        if base.dtype not in FLOAT_DTYPES or tuned.dtype not in FLOAT_DTYPES:
            continue
        deltas[name] = tuned.to_float32() - base.to_float32()
    return TaskVector(deltas, checkpoint_digest(pre), task_id)


def apply(
    base: ModelCheckpoint,
    tv: TaskVector,
    scale: float = 1.0,
    force_base: bool = False,
) -> ModelCheckpoint:
    """Return ``base + scale * tv`` computed in fp32 and cast back to each tensor's dtype.

    ``force_base`` allows applying onto a checkpoint other than the one the
    vector was extracted from (e.g. a task-specific base built from another vector).
    """
    if not force_base:
        found = checkpoint_digest(base)
        if tv.base_hash != found:
            raise BaseMismatch(found, tv.base_hash)
    for name, d in tv.deltas.items():
        if name not in base.tensors:
            raise NameSetMismatch({name}, ())
        if base.tensors[name].shape != d.shape:
            raise ShapeMismatch(
                f"{name!r}: delta {list(d.shape)} vs base {list(base.tensors[name].shape)}"
            )
    out = {}
    lam = np.float32(scale)
    for name, t in base.tensors.items():
        d = tv.deltas.get(name)
        if d is None or scale == 0:
            out[name] = Tensor(t.dtype, t.data.copy())
            continue
        # one rounding for base + lam * d
        merged = (t.to_float32().astype(np.float64) + float(lam) * d.astype(np.float64)).astype(np.float32)
        out[name] = Tensor.from_array(merged, t.dtype)
    return ModelCheckpoint(out, dict(base.metadata))


def negate(tv: TaskVector) -> TaskVector:
    return TaskVector({k: -v for k, v in tv.deltas.items()}, tv.base_hash, f"-{tv.task_id}")


def weighted_sum(tvs: Sequence[TaskVector], weights: Sequence[float] | None = None) -> TaskVector:
    """Elementwise ``sum_k w_k * tv_k``.

    Terms are accumulated in fp32 in canonical order (sorted by task_id), so the
    result does not depend on the order the caller passes them in.
    """
    if not tvs:
        raise EmptyInput("weighted_sum needs at least one task vector")
    if weights is None:
        weights = [1.0] * len(tvs)
    if len(weights) != len(tvs):
        raise ValueError(f"{len(tvs)} task vectors but {len(weights)} weights")
    base_hash = tvs[0].base_hash
    for tv in tvs[1:]:
        if tv.base_hash != base_hash:
            raise BaseMismatch(base_hash, tv.base_hash)
        _check_names(tv.deltas, tvs[0].deltas)

    order = sorted(range(len(tvs)), key=lambda i: (tvs[i].task_id, float(weights[i]), i))
    deltas = {}
    for name, first in tvs[0].deltas.items():
        acc = None
        for i in order:
            d = tvs[i].deltas[name]
            if d.shape != first.shape:
                raise ShapeMismatch(f"{name!r}: {list(d.shape)} vs {list(first.shape)}")
            term = np.float32(weights[i]) * d
            acc = term if acc is None else acc + term
        deltas[name] = acc
    ids = ",".join(tvs[i].task_id for i in order)
    return TaskVector(deltas, base_hash, f"merged({ids})")
