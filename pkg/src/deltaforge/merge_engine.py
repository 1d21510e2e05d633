"""Static merges (Task Arithmetic, TIES, DARE) and the routed 1-bit merge."""

from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .delta import TaskVector, apply, weighted_sum
from .errors import BaseMismatch, EmptyInput, InvalidRate, RecipeError, ShapeMismatch, UnknownTask
from .onebit import QuantizedTaskVector, dequantize
from .tensor_store import ModelCheckpoint, checkpoint_digest

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib


class Method(str, enum.Enum):
    TASK_ARITHMETIC = "task_arithmetic"
    TIES = "ties"
    DARE = "dare"
    ONEBIT = "onebit"

    @classmethod
    def parse(cls, value) -> "Method":
        if isinstance(value, cls):
            return value
        aliases = {"ta": "task_arithmetic", "onebit_merging": "onebit", "1bit": "onebit"}
        key = str(value).lower().replace("-", "_")
        try:
            return cls(aliases.get(key, key))
        except ValueError:
            raise RecipeError(
                f"unknown merge method {value!r} (expected one of {', '.join(m.value for m in cls)})"
            ) from None


# (lambda, drop_rate, mask_ratio) per method
DEFAULTS = {
    Method.TASK_ARITHMETIC: (1.0, 0.0, 0.0),
    Method.DARE: (0.5, 0.5, 0.0),
    Method.TIES: (1.0, 0.0, 0.7),
    Method.ONEBIT: (1.0, 0.0, 0.7),
}

RECIPE_KEYS = ("method", "lambda", "drop_rate", "mask_ratio", "seed", "family", "base")
RECIPE_MAPS = ("positions", "sources")


@dataclass
class MergeRecipe:
    method: Method = Method.ONEBIT
    lam: float | None = None
    drop_rate: float | None = None
    mask_ratio: float | None = None
    seed: int = 0
    family: str = "custom"
    positions: dict[str, str] = field(default_factory=dict)
    sources: dict[str, str] = field(default_factory=dict)
    base: str | None = None

    def __post_init__(self):
        self.method = Method.parse(self.method)

    def effective(self) -> "MergeRecipe":
        """Copy with unset coefficients replaced by the method defaults."""
        lam, r, mask = DEFAULTS[self.method]
        return replace(
            self,
            lam=lam if self.lam is None else float(self.lam),
            drop_rate=r if self.drop_rate is None else float(self.drop_rate),
            mask_ratio=mask if self.mask_ratio is None else float(self.mask_ratio),
            positions=dict(self.positions),
            sources=dict(self.sources),
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.method.value
        d["lambda"] = d.pop("lam")
        return d

    def dumps(self) -> str:
        """Flat key/value form, one ``key = value`` per line."""
        lines = []
        d = self.to_dict()
        for key in RECIPE_KEYS:
            if d[key] is not None:
                lines.append(f"{key} = {_toml_value(d[key])}")
        for group in RECIPE_MAPS:
            for task in sorted(d[group]):
                lines.append(f"{group}.{task} = {_toml_value(d[group][task])}")
        return "\n".join(lines) + "\n"


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    return json.dumps(str(v))


def parse_recipe(text: str, root: Path | None = None) -> MergeRecipe:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise RecipeError(f"recipe is not valid TOML: {exc}") from None
    unknown = set(raw) - set(RECIPE_KEYS) - set(RECIPE_MAPS)
    if unknown:
        raise RecipeError(f"unknown recipe keys: {', '.join(sorted(unknown))}")
    for group in RECIPE_MAPS:
        if group in raw and not isinstance(raw[group], dict):
            raise RecipeError(f"{group} must be written as {group}.<task> = ...")

    def resolve(p):
        p = Path(str(p))
        return str(p if p.is_absolute() or root is None else root / p)

    try:
        return MergeRecipe(
            method=raw.get("method", "onebit"),
            lam=raw.get("lambda"),
            drop_rate=raw.get("drop_rate"),
            mask_ratio=raw.get("mask_ratio"),
            seed=int(raw.get("seed", 0)),
            family=str(raw.get("family", "custom")),
            positions={k: str(v) for k, v in raw.get("positions", {}).items()},
            sources={k: resolve(v) for k, v in raw.get("sources", {}).items()},
            base=resolve(raw["base"]) if "base" in raw else None,
        )
    except (TypeError, ValueError) as exc:
        raise RecipeError(f"bad recipe value: {exc}") from None


def load_recipe(path) -> MergeRecipe:
    path = Path(path)
    return parse_recipe(path.read_text(encoding="utf-8"), path.parent)


@dataclass(eq=False)
class MergedModel:
    checkpoint: ModelCheckpoint
    provenance: dict

    def stamped(self) -> ModelCheckpoint:
        """Checkpoint with provenance recorded in its metadata."""
        meta = dict(self.checkpoint.metadata)
        meta["provenance"] = json.dumps(self.provenance, sort_keys=True)
        return ModelCheckpoint(self.checkpoint.tensors, meta)


def _canonical(tvs):
    return sorted(tvs, key=lambda tv: tv.task_id)


def _check_shared_base(tvs: Sequence, base: ModelCheckpoint | None, force_base: bool) -> str:
    if not tvs:
        raise EmptyInput("no task vectors to merge")
    ref = tvs[0].base_hash
    for tv in tvs[1:]:
        if tv.base_hash != ref:
            raise BaseMismatch(ref, tv.base_hash)
    if base is not None and not force_base:
        found = checkpoint_digest(base)
        if found != ref:
            raise BaseMismatch(found, ref)
    return ref


def _provenance(method: Method, base: ModelCheckpoint, tvs, **params) -> dict:
    prov = {
        "method": method.value,
        "base_hash": checkpoint_digest(base),
        "inputs": {tv.task_id: tv.base_hash for tv in _canonical(tvs)},
    }
    prov.update(params)
    return prov


# --- Task Arithmetic -----------------------------------------------------------


def task_arithmetic(pre: ModelCheckpoint, tvs: Sequence[TaskVector], lam: float = 1.0,
                    force_base: bool = False) -> MergedModel:
    _check_shared_base(tvs, pre, force_base)
    merged = weighted_sum(list(tvs))
    ckpt = apply(pre, merged, lam, force_base=True)
    return MergedModel(ckpt, _provenance(Method.TASK_ARITHMETIC, pre, tvs, **{"lambda": lam}))


# --- DARE ----------------------------------------------------------------------


def _philox_uniforms(seed: int, name: str, n: int, stream: str = "") -> np.ndarray:
    """Uniforms in [0, 1) where element ``i`` depends only on (seed, stream, name, i)."""
    digest = hashlib.sha256(f"{int(seed)}\0{stream}\0{name}".encode("utf-8")).digest()
    key = int.from_bytes(digest[:16], "little")
    gen = np.random.Generator(np.random.Philox(key=key))
    return gen.random(n, dtype=np.float64)


def dare_sparsify(tv: TaskVector, r: float, seed: int, stream: str = "") -> TaskVector:
    """Drop each entry with probability ``r``; rescale survivors by 1/(1-r)."""
    if not (0.0 <= r < 1.0) or math.isnan(r):
        raise InvalidRate(f"drop rate must lie in [0, 1), got {r}")
    if r == 0.0:
        return TaskVector({k: v.copy() for k, v in tv.deltas.items()}, tv.base_hash, tv.task_id)
    keep_scale = np.float32(1.0 - r)
    out = {}
    for name, d in tv.deltas.items():
        u = _philox_uniforms(seed, name, d.size, stream).reshape(d.shape)
        out[name] = np.where(u >= r, d / keep_scale, np.float32(0)).astype(np.float32)
    return TaskVector(out, tv.base_hash, tv.task_id)


def dare_merge(pre: ModelCheckpoint, tvs: Sequence[TaskVector], r: float = 0.5,
               lam: float = 0.5, seed: int = 0, force_base: bool = False) -> MergedModel:
    _check_shared_base(tvs, pre, force_base)
    # each task gets its own stream so equal seeds do not share drop masks
    sparse = [dare_sparsify(tv, r, seed, stream=tv.task_id) for tv in tvs]
    ckpt = apply(pre, weighted_sum(sparse), lam, force_base=True)
    return MergedModel(
        ckpt, _provenance(Method.DARE, pre, tvs, **{"lambda": lam, "drop_rate": r, "seed": seed})
    )


# --- TIES ----------------------------------------------------------------------


def trim(d: np.ndarray, mask_ratio: float) -> np.ndarray:
    """Zero the ``mask_ratio`` fraction of smallest-magnitude entries.

    Equal magnitudes at the threshold keep the lower flat index.
    """
    flat = d.reshape(-1)
    n = flat.size
    drop = min(n, int(math.floor(mask_ratio * n + 1e-9)))
    if drop == 0:
        return d.copy()
    keep = np.argsort(-np.abs(flat), kind="stable")[: n - drop]
    out = np.zeros_like(flat)
    out[keep] = flat[keep]
    return out.reshape(d.shape)


def ties_delta(deltas: Sequence[np.ndarray], mask_ratio: float) -> np.ndarray:
    """Trim, elect sign, disjoint mean for one tensor across task vectors.

    Sums run in float64 (exact for a handful of fp32 terms), so the elected sign
    is the sign of the true sum and the mean is correctly rounded.
    """
    trimmed = [trim(d, mask_ratio).astype(np.float64) for d in deltas]
    total = np.zeros(trimmed[0].shape)
    for t in trimmed:
        total += t
    elected = np.sign(total)
    acc = np.zeros_like(total)
    count = np.zeros(total.shape)
    for t in trimmed:
        agree = (t != 0) & (np.sign(t) == elected)
        acc += np.where(agree, t, 0.0)
        count += agree
    return np.where(count > 0, acc / np.maximum(count, 1.0), 0.0).astype(np.float32)


def ties_merge(base: ModelCheckpoint, tvs: Sequence[TaskVector], mask_ratio: float = 0.7,
               lam: float = 1.0, force_base: bool = False) -> MergedModel:
    if not (0.0 <= mask_ratio < 1.0):
        raise InvalidRate(f"mask ratio must lie in [0, 1), got {mask_ratio}")
    ref = _check_shared_base(tvs, base, force_base)
    ordered = _canonical(tvs)
    names = list(ordered[0].deltas)
    merged = {}
    for name in names:
        parts = []
        for tv in ordered:
            if name not in tv.deltas:
                raise ShapeMismatch(f"{tv.task_id} lacks tensor {name!r}")
            parts.append(tv.deltas[name])
        if len({p.shape for p in parts}) != 1:
            raise ShapeMismatch(f"{name!r} has differing shapes across task vectors")
        merged[name] = ties_delta(parts, mask_ratio)
    ckpt = apply(base, TaskVector(merged, ref, "ties"), lam, force_base=True)
    return MergedModel(
        ckpt, _provenance(Method.TIES, base, tvs, **{"lambda": lam, "mask_ratio": mask_ratio})
    )


# --- 1bit-Merging ----------------------------------------------------------------


def onebit_merge(
    pre: ModelCheckpoint,
    qtvs: Sequence[QuantizedTaskVector],
    selected: str,
    mask_ratio: float = 0.7,
    lam: float = 1.0,
    uncompressed_rest: Mapping[str, TaskVector] | None = None,
    force_base: bool = False,
) -> MergedModel:
    """Routed merge: ``pre`` plus the selected compressed vector, then TIES the rest in.

    The remaining vectors are the compressed ones unless ``uncompressed_rest``
    supplies full-precision vectors keyed by task id.
    """
    by_id = {q.task_id: q for q in qtvs}
    if len(by_id) != len(qtvs):
        raise ValueError("duplicate task ids among quantized task vectors")
    if selected not in by_id:
        raise UnknownTask(f"selected task {selected!r} not among {sorted(by_id)}")
    _check_shared_base(list(qtvs), pre, force_base)

    task_base = apply(pre, dequantize(by_id[selected]), 1.0, force_base=True)
    others = sorted(k for k in by_id if k != selected)
    if uncompressed_rest is not None:
        missing = [k for k in others if k not in uncompressed_rest]
        if missing:
            raise UnknownTask(f"no uncompressed vector for {', '.join(missing)}")
        rest = [uncompressed_rest[k] for k in others]
    else:
        rest = [dequantize(by_id[k]) for k in others]

    if rest:
        ckpt = ties_merge(task_base, rest, mask_ratio, lam, force_base=True).checkpoint
    else:
        ckpt = task_base
    prov = _provenance(
        Method.ONEBIT, pre, list(qtvs),
        **{
            "selected": selected,
            "lambda": lam,
            "mask_ratio": mask_ratio,
            "positions": {q.task_id: q.position.position.value for q in qtvs},
            "uncompressed_rest": uncompressed_rest is not None,
        },
    )
    return MergedModel(ckpt, prov)
