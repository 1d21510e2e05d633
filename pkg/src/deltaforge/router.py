"""Input -> task router: hashed n-gram features and a three-layer classifier.

Architecture: Linear -> BatchNorm -> LeakyReLU -> Linear -> BatchNorm ->
LeakyReLU -> Linear -> softmax. Gradients are written out by hand so the
whole thing stays in numpy and is checkable against finite differences.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateDataset, DimMismatch, MalformedHeader
from .tensor_store import ModelCheckpoint, Tensor, load_checkpoint, save_checkpoint

FORMAT = "router/v1"
_TOKEN = re.compile(r"\w+|[^\w\s]", re.UNICODE)


@dataclass(frozen=True)
class FeatureExtractorConfig:
    dim: int = 1024
    ngrams: tuple[int, ...] = (1, 2)

    @property
    def scheme(self) -> str:
        return f"hashed-ngrams:n={','.join(map(str, self.ngrams))}:dim={self.dim}:blake2b:l2"

    @classmethod
    def from_scheme(cls, scheme: str) -> "FeatureExtractorConfig":
        fields = dict(part.split("=", 1) for part in scheme.split(":") if "=" in part)
        try:
            return cls(int(fields["dim"]), tuple(int(n) for n in fields["n"].split(",")))
        except (KeyError, ValueError):
            raise MalformedHeader(f"unrecognised feature scheme {scheme!r}") from None


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


def _bucket(gram: str, dim: int) -> int:
    h = hashlib.blake2b(gram.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(h, "little") % dim


def extract_features(text: str, cfg: FeatureExtractorConfig = FeatureExtractorConfig()) -> np.ndarray:
    """L2-normalised hashed counts of word n-grams; all zeros for empty text."""
    tokens = tokenize(text)
    v = np.zeros(cfg.dim, dtype=np.float64)
    for n in cfg.ngrams:
        for i in range(len(tokens) - n + 1):
            v[_bucket(" ".join(tokens[i : i + n]), cfg.dim)] += 1.0
    norm = np.linalg.norm(v)
    if norm > 0:
        v /= norm
    return v.astype(np.float32)


def featurize(texts: Sequence[str], cfg: FeatureExtractorConfig = FeatureExtractorConfig()) -> np.ndarray:
    if not texts:
        return np.zeros((0, cfg.dim), dtype=np.float32)
    return np.stack([extract_features(t, cfg) for t in texts])


# --- model ---------------------------------------------------------------------


@dataclass
class BatchNorm:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def fresh(cls, width: int, dtype=np.float32) -> "BatchNorm":
        return cls(
            np.ones(width, dtype), np.zeros(width, dtype), np.zeros(width, dtype), np.ones(width, dtype)
        )


@dataclass
class RouterModel:
    weights: list[np.ndarray]  # (in, out) per layer
    biases: list[np.ndarray]
    norms: list[BatchNorm]
    class_labels: list[str]
    leaky_slope: float = 0.01
    feature: FeatureExtractorConfig = field(default_factory=FeatureExtractorConfig)
    train_accuracy: float | None = None
    hyper: dict = field(default_factory=dict)

    @property
    def dims(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def parameters(self) -> list[np.ndarray]:
        params = []
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params += [w, b]
            if i < len(self.norms):
                params += [self.norms[i].gamma, self.norms[i].beta]
        return params

    def __eq__(self, other) -> bool:
        if not isinstance(other, RouterModel):
            return NotImplemented
        mine = self.parameters() + [a for n in self.norms for a in (n.running_mean, n.running_var)]
        theirs = other.parameters() + [a for n in other.norms for a in (n.running_mean, n.running_var)]
        return (
            self.class_labels == other.class_labels
            and self.leaky_slope == other.leaky_slope
            and self.feature == other.feature
            and len(mine) == len(theirs)
            and all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                    for a, b in zip(mine, theirs))
        )


def init_router(dims: Sequence[int], class_labels: Sequence[str], seed: int = 0,
                leaky_slope: float = 0.01, dtype=np.float32,
                feature: FeatureExtractorConfig | None = None) -> RouterModel:
    """He-initialised weights, zero biases, identity batch norms."""
    if len(dims) != 4:
        raise ValueError("router dims are [input, hidden1, hidden2, classes]")
    if dims[-1] != len(class_labels):
        raise DimMismatch(f"{dims[-1]} outputs for {len(class_labels)} labels")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        std = np.sqrt(2.0 / (1.0 + leaky_slope**2) / fan_in)
        weights.append((rng.standard_normal((fan_in, fan_out)) * std).astype(dtype))
        biases.append(np.zeros(fan_out, dtype))
    norms = [BatchNorm.fresh(d, dtype) for d in dims[1:-1]]
    if feature is None:
        feature = FeatureExtractorConfig(dim=dims[0])
    return RouterModel(weights, biases, norms, list(class_labels), leaky_slope, feature)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(router: RouterModel, x: np.ndarray, train: bool):
    """Returns logits and the cache needed for backprop. Never mutates ``router``."""
    h = x
    cache = []
    for i, (w, b) in enumerate(zip(router.weights, router.biases)):
        z = h @ w + b
        if i == len(router.weights) - 1:
            cache.append((h, None))
            return z, cache
        bn = router.norms[i]
        if train:
            mu = z.mean(axis=0)
            var = z.var(axis=0)
        else:
            mu, var = bn.running_mean, bn.running_var
        inv = 1.0 / np.sqrt(var + bn.eps)
        zhat = (z - mu) * inv
        y = bn.gamma * zhat + bn.beta
        a = np.where(y > 0, y, router.leaky_slope * y)
        cache.append((h, (zhat, inv, y, mu, var)))
        h = a
    raise AssertionError("unreachable")


def forward(router: RouterModel, x: np.ndarray, mode: str = "eval") -> np.ndarray:
    """Class probabilities for one feature vector or a batch of them."""
    if mode not in ("train", "eval"):
        raise ValueError("mode is 'train' or 'eval'")
    x = np.asarray(x, dtype=router.weights[0].dtype)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != router.dims[0]:
        raise DimMismatch(f"router expects {router.dims[0]} features, got {x.shape[1]}")
    logits, _ = _forward(router, x, mode == "train")
    p = softmax(logits)
    return p[0] if single else p


def route(router: RouterModel, x: np.ndarray) -> int:
    """argmax of the eval-mode probabilities; ties go to the lowest index."""
    return int(np.argmax(forward(router, x, "eval")))


def route_text(router: RouterModel, text: str) -> tuple[str, np.ndarray]:
    p = forward(router, extract_features(text, router.feature), "eval")
    return router.class_labels[int(np.argmax(p))], p


def loss_and_grads(router: RouterModel, x: np.ndarray, y: np.ndarray):
    """Mean cross-entropy on a batch (train-mode batch norm) and its gradients.

    Gradients come back in ``router.parameters()`` order.
    """
    logits, cache = _forward(router, x, train=True)
    n = x.shape[0]
    p = softmax(logits)
    loss = -np.mean(np.log(p[np.arange(n), y] + 1e-300))
    g = p.copy()
    g[np.arange(n), y] -= 1.0
    g /= n

    grads_rev = []
    slope = router.leaky_slope
    for i in range(len(router.weights) - 1, -1, -1):
        h, bn_cache = cache[i]
        if bn_cache is not None:
            # g currently holds dL/da for this layer's activation output
            zhat, inv, y_pre, _, _ = bn_cache
            bn = router.norms[i]
            g = g * np.where(y_pre > 0, 1.0, slope).astype(g.dtype)
            dgamma = (g * zhat).sum(axis=0)
            dbeta = g.sum(axis=0)
            gz = g * bn.gamma
            g = inv * (gz - gz.mean(axis=0) - zhat * (gz * zhat).mean(axis=0))
            grads_rev += [dbeta, dgamma]
        dw = h.T @ g
        db = g.sum(axis=0)
        grads_rev += [db, dw]
        g = g @ router.weights[i].T
    return float(loss), grads_rev[::-1]


@dataclass
class RoutingDataset:
    texts: list[str]
    labels: list[str]

    @property
    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for lab in self.labels:
            out[lab] = out.get(lab, 0) + 1
        return out

    @classmethod
    def from_jsonl(cls, files: dict[str, str], limit: int | None = None) -> "RoutingDataset":
        texts, labels = [], []
        for label, path in files.items():
            with open(path, encoding="utf-8") as fh:
                rows = [json.loads(line)["text"] for line in fh if line.strip()]
            if limit is not None:
                rows = rows[:limit]
            texts += rows
            labels += [label] * len(rows)
        return cls(texts, labels)


DEFAULT_HYPER = {"lr": 5e-5, "epochs": 20, "batch": 64, "seed": 0, "hidden": (256, 128)}


def train(
    x: np.ndarray,
    labels: Sequence[str],
    class_labels: Sequence[str] | None = None,
    lr: float = 5e-5,
    epochs: int = 20,
    batch: int = 64,
    seed: int = 0,
    hidden: tuple[int, int] = (256, 128),
    leaky_slope: float = 0.01,
    feature: FeatureExtractorConfig | None = None,
) -> RouterModel:
    """Plain mini-batch gradient descent on mean cross-entropy.

    Running batch-norm statistics are updated per step and frozen on return.
    """
    x = np.asarray(x, dtype=np.float32)
    if class_labels is None:
        class_labels = sorted(set(labels))
    class_labels = list(class_labels)
    index = {c: i for i, c in enumerate(class_labels)}
    unknown = set(labels) - set(index)
    if unknown:
        raise DegenerateDataset(f"labels outside class set: {sorted(unknown)}")
    present = set(labels)
    if len(class_labels) < 2 or len(present) < 2:
        raise DegenerateDataset("routing needs at least two classes")
    missing = set(class_labels) - present
    if missing:
        raise DegenerateDataset(f"no examples for {sorted(missing)}")
    y = np.array([index[lab] for lab in labels])
    if x.shape[0] != len(y):
        raise DimMismatch(f"{x.shape[0]} feature rows for {len(y)} labels")

    router = init_router([x.shape[1], *hidden, len(class_labels)], class_labels, seed,
                         leaky_slope, feature=feature)
    rng = np.random.default_rng(seed + 1)
    params = router.parameters()
    for _ in range(epochs):
        order = rng.permutation(len(y))
        for start in range(0, len(y), batch):
            idx = order[start : start + batch]
            if len(idx) < 2:  # batch statistics undefined
                continue
            xb, yb = x[idx], y[idx]
            _, grads = loss_and_grads(router, xb, yb)
            _update_running_stats(router, xb)
            for p, g in zip(params, grads):
                p -= np.asarray(lr * g, dtype=p.dtype)
    router.train_accuracy = float(np.mean(np.argmax(forward(router, x, "eval"), axis=1) == y))
    router.hyper = {"lr": lr, "epochs": epochs, "batch": batch, "seed": seed,
                    "hidden": list(hidden)}
    return router


def _update_running_stats(router: RouterModel, xb: np.ndarray) -> None:
    h = xb
    n = xb.shape[0]
    for i, bn in enumerate(router.norms):
        z = h @ router.weights[i] + router.biases[i]
        mu, var = z.mean(axis=0), z.var(axis=0)
        unbiased = var * n / (n - 1)
        bn.running_mean[:] = (1 - bn.momentum) * bn.running_mean + bn.momentum * mu
        bn.running_var[:] = (1 - bn.momentum) * bn.running_var + bn.momentum * unbiased
        y = bn.gamma * (z - mu) / np.sqrt(var + bn.eps) + bn.beta
        h = np.where(y > 0, y, router.leaky_slope * y)


def train_on_dataset(dataset: RoutingDataset, cfg: FeatureExtractorConfig = FeatureExtractorConfig(),
                     class_labels: Sequence[str] | None = None, **hyper) -> RouterModel:
    return train(featurize(dataset.texts, cfg), dataset.labels, class_labels, feature=cfg, **hyper)


# --- persistence ---------------------------------------------------------------


def to_checkpoint(router: RouterModel) -> ModelCheckpoint:
    tensors = {}
    for i, (w, b) in enumerate(zip(router.weights, router.biases)):
        tensors[f"layers.{i}.weight"] = Tensor("fp32", w.astype("<f4"))
        tensors[f"layers.{i}.bias"] = Tensor("fp32", b.astype("<f4"))
        if i < len(router.norms):
            bn = router.norms[i]
            for key in ("gamma", "beta", "running_mean", "running_var"):
                tensors[f"norms.{i}.{key}"] = Tensor("fp32", getattr(bn, key).astype("<f4"))
    meta = {
        "format": FORMAT,
        "labels": ",".join(router.class_labels),
        "feature_scheme": router.feature.scheme,
        "dims": ",".join(map(str, router.dims)),
        "leaky_slope": repr(router.leaky_slope),
        "bn_eps": repr(router.norms[0].eps if router.norms else 1e-5),
    }
    if router.train_accuracy is not None:
        meta["train_accuracy"] = repr(router.train_accuracy)
    if router.hyper:
        meta["hyper"] = json.dumps(router.hyper, sort_keys=True)
    return ModelCheckpoint(tensors, meta)


def from_checkpoint(ckpt: ModelCheckpoint) -> RouterModel:
    meta = ckpt.metadata
    if meta.get("format") != FORMAT:
        raise MalformedHeader(f"not a {FORMAT} file (format={meta.get('format')!r})")
    n_layers = len(meta["dims"].split(",")) - 1
    eps = float(meta.get("bn_eps", "1e-5"))
    try:
        weights = [ckpt[f"layers.{i}.weight"].to_float32() for i in range(n_layers)]
        biases = [ckpt[f"layers.{i}.bias"].to_float32() for i in range(n_layers)]
        norms = [
            BatchNorm(*(ckpt[f"norms.{i}.{k}"].to_float32()
                        for k in ("gamma", "beta", "running_mean", "running_var")), eps=eps)
            for i in range(n_layers - 1)
        ]
    except KeyError as exc:
        raise MalformedHeader(f"router file lacks tensor {exc}") from None
    acc = meta.get("train_accuracy")
    return RouterModel(
        weights, biases, norms, meta["labels"].split(","), float(meta["leaky_slope"]),
        FeatureExtractorConfig.from_scheme(meta["feature_scheme"]),
        float(acc) if acc is not None else None,
        json.loads(meta["hyper"]) if "hyper" in meta else {},
    )


def save_router(router: RouterModel, path) -> None:
    save_checkpoint(to_checkpoint(router), path)


def load_router(path) -> RouterModel:
    return from_checkpoint(load_checkpoint(path))
