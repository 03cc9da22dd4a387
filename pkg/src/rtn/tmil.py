"""Transformer-based multiple-instance learning backbone.

A bag of cubes goes through a small 3D residual CNN (one embedding per cube),
a learnable quality token is prepended, and a stack of pre-norm transformer
layers mixes the tokens. The final quality token is classified; the final
instance tokens are the state handed to the discarding agent.
"""

from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .autodiff import ops
from .autodiff.checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from .autodiff.nn import Conv3d, LayerNorm, Linear, Module, Parameter
from .autodiff.optim import Adam
from .autodiff.tensor import Tensor, no_grad
from .instances.cubes import Bag, Instance, jitter_cubes


@dataclass
class TransformerConfig:
    dim: int = 32
    layers: int = 2
    heads: int = 4
    mlp_hidden: int = 64
    use_positional: bool = False
    max_instances: int = 19
    channels: tuple[int, ...] = (8, 16)
    aggregator: str = "transformer"  # or "mean", a pooling-only sanity baseline

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.aggregator not in ("transformer", "mean"):
            raise ValueError(f"unknown aggregator {self.aggregator!r}")

    def to_lines(self) -> list[str]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(c) for c in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            out.append(f"{f.name}={v}")
        return out

    @classmethod
    def from_lines(cls, lines: Sequence[str]) -> TransformerConfig:
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for raw in lines:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in kinds:
                raise ValueError(f"unknown TransformerConfig key {key!r}")
            default = getattr(cls(), key)
            if isinstance(default, bool):
                values[key] = value.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                values[key] = int(value)
            elif isinstance(default, tuple):
                values[key] = tuple(int(c) for c in value.split(",") if c.strip())
            else:
                values[key] = value
        return cls(**values)


@dataclass
class TMilOutput:
    logits: Tensor  # (2,)
    quality_embedding: Tensor  # (D,)
    instance_embeddings: Tensor  # (k, D)
    probabilities: np.ndarray = field(init=False)

    def __post_init__(self):
        z = self.logits.data.astype(np.float64)
        e = np.exp(z - z.max())
        self.probabilities = e / e.sum()

    @property
    def prediction(self) -> int:
        # argmax returns the first maximum, so an exact tie goes to class 0
        return int(np.argmax(self.logits.data))

    @property
    def positive_score(self) -> float:
        return float(self.probabilities[1])


class ResidualBlock3d(Module):
    """conv(stride 2) -> GELU -> conv, plus a strided 1x1x1 projection shortcut, then GELU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv1 = Conv3d(c_in, c_out, 3, rng, stride=2, padding=1)
        self.conv2 = Conv3d(c_out, c_out, 3, rng, stride=1, padding=1)
        self.shortcut = Conv3d(c_in, c_out, 1, rng, stride=2, padding=0)

    def __call__(self, x: Tensor) -> Tensor:
        h = self.conv2(ops.gelu(self.conv1(x)))
        return ops.gelu(h + self.shortcut(x))


class FeatureExtractor(Module):
    def __init__(self, channels: Sequence[int], dim: int, rng: np.random.Generator):
        chans = (1,) + tuple(channels)
        self.blocks = [ResidualBlock3d(a, b, rng) for a, b in zip(chans[:-1], chans[1:])]
        self.project = Linear(chans[-1], dim, rng)

    def __call__(self, cubes) -> Tensor:
        """``[k, 1, s, s, s]`` cubes to ``[k, D]`` embeddings, each row from its own cube."""
        x = ops.as_tensor(cubes)
        if x.ndim != 5:
            raise ValueError(f"expected cubes [k, 1, s, s, s], got shape {x.shape}")
        for block in self.blocks:
            x = block(x)
        pooled = ops.mean(x, axis=(2, 3, 4))
        return self.project(pooled)


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``heads`` heads over 2-d token matrices."""

    def __init__(self, dim: int, heads: int, rng: np.random.Generator, out_proj: bool = True):
        self.heads = heads
        self.q = Linear(dim, dim, rng)
        self.k = Linear(dim, dim, rng)
        self.v = Linear(dim, dim, rng)
        self.out = Linear(dim, dim, rng) if out_proj else None

    def _split(self, x: Tensor) -> Tensor:
        t, d = x.shape
        return ops.transpose(ops.reshape(x, (t, self.heads, d // self.heads)), (1, 0, 2))

    def __call__(self, query: Tensor, context: Tensor, return_weights: bool = False):
        tq, d = query.shape
        q = self._split(self.q(query))
        k = self._split(self.k(context))
        v = self._split(self.v(context))
        scores = ops.matmul(q, ops.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d // self.heads))
        weights = ops.softmax(scores, axis=-1)
        mixed = ops.reshape(ops.transpose(ops.matmul(weights, v), (1, 0, 2)), (tq, d))
        out = self.out(mixed) if self.out is not None else mixed
        return (out, weights) if return_weights else out


class EncoderLayer(Module):
    """Pre-norm layer: z' = z + MHSA(LN(z)); z = z' + MLP(LN(z'))."""

    def __init__(self, dim: int, heads: int, hidden: int, rng: np.random.Generator):
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)

    def __call__(self, z: Tensor) -> Tensor:
        h = self.norm1(z)
        z = z + self.attn(h, h)
        return z + self.fc2(ops.gelu(self.fc1(self.norm2(z))))


class TMilModel(Module):
    def __init__(self, config: TransformerConfig | None = None, seed: int = 0):
        self.config = config = config or TransformerConfig()
        rng = np.random.default_rng(seed)
        self.extractor = FeatureExtractor(config.channels, config.dim, rng)
        self.quality_token = Parameter(rng.normal(0.0, 0.02, size=config.dim))
        self.encoder = [
            EncoderLayer(config.dim, config.heads, config.mlp_hidden, rng) for _ in range(config.layers)
        ]
        self.head = Linear(config.dim, 2, rng)
        if config.use_positional:
            self.positional = Parameter(np.zeros((config.max_instances + 1, config.dim)))
        self.name_parameters()

    def extract_features(self, instances) -> Tensor:
        """Embed every instance cube; accepts ``Instance`` objects or a ``[k, 1, s, s, s]`` array."""
        if isinstance(instances, (list, tuple)):
            if not instances:
                raise ValueError("no instances to embed")
            shapes = {np.shape(inst.cube) for inst in instances}
            if len(shapes) != 1:
                raise ValueError(f"instances have heterogeneous cube shapes: {sorted(shapes)}")
            instances = np.stack([inst.cube for inst in instances])
        return self.extractor(instances)

    def aggregate(self, features: Tensor, positions: Sequence[int] | None = None) -> TMilOutput:
        """Quality token + ``features`` through the encoder; ``positions`` are centerline indices."""
        features = ops.as_tensor(features)
        if features.ndim != 2 or features.shape[0] < 1:
            raise ValueError(f"features must be [k >= 1, D], got {features.shape}")
        if self.config.aggregator == "mean":
            pooled = ops.mean(features, axis=0, keepdims=True)
            return TMilOutput(ops.reshape(self.head(pooled), (2,)), ops.reshape(pooled, (-1,)), features)
        token = ops.reshape(self.quality_token, (1, -1))
        z = ops.concat([token, features], axis=0)
        if self.config.use_positional:
            k = features.shape[0]
            idx = np.arange(k) if positions is None else np.asarray(positions, dtype=np.int64)
            rows = np.concatenate([[0], idx + 1])
            z = z + ops.getitem(self.positional, rows)
        for layer in self.encoder:
            z = layer(z)
        quality = ops.getitem(z, slice(0, 1))
        logits = ops.reshape(self.head(quality), (2,))
        return TMilOutput(logits, ops.reshape(quality, (-1,)), ops.getitem(z, slice(1, None)))

    def __call__(self, cubes, positions: Sequence[int] | None = None) -> TMilOutput:
        return self.aggregate(self.extract_features(cubes), positions)

    def tmil_forward(self, bag_subset: Sequence[Instance]) -> TMilOutput:
        if len(bag_subset) == 0:
            raise ValueError("empty instance subset: every instance was discarded")
        return self(list(bag_subset), [inst.index_on_centerline for inst in bag_subset])

    def predict_bag(self, bag: Bag, indices: Sequence[int] | None = None) -> TMilOutput:
        indices = np.arange(bag.n) if indices is None else np.asarray(indices)
        if len(indices) == 0:
            raise ValueError("empty instance subset: every instance was discarded")
        with no_grad():
            return self(bag.cubes[indices], indices)

    def save(self, path: str | os.PathLike) -> None:
        """Checkpoint plus a ``.cfg`` sidecar with one ``key=value`` per config field."""
        save_checkpoint(path, self.state_dict())
        text = "\n".join(self.config.to_lines()) + "\n"
        atomic_write_bytes(f"{os.fspath(path)}.cfg", text.encode())

    @classmethod
    def load(cls, path: str | os.PathLike) -> TMilModel:
        config = TransformerConfig.from_lines(Path(f"{os.fspath(path)}.cfg").read_text().splitlines())
        state = load_checkpoint(path)
        model = cls(config)
        dtype = next(iter(state.values())).dtype if state else np.float32
        model.astype(dtype)
        model.load_state_dict(state)
        return model

    def config_dict(self) -> dict:
        return asdict(self.config)


def draw_subset(n: int, m: int, rng: np.random.Generator) -> np.ndarray:
    """Sorted uniformly random subset of ``n - m`` of the ``n`` instance indices."""
    if not 0 <= m < n:
        raise ValueError(f"discard count m={m} must satisfy 0 <= m < n={n}")
    if m == 0:
        return np.arange(n)
    return np.sort(rng.choice(n, size=n - m, replace=False))


def pretrain_step(
    model: TMilModel,
    bags_batch: Sequence[Bag],
    m: int,
    rng: np.random.Generator,
    optimizer: Adam,
    augment: bool = False,
) -> float:
    """One optimiser step of stage-1 training on random ``n - m`` subsets.

    Bags are forwarded one at a time and their cross-entropy gradients are
    averaged before the update, because subsets are variable-length.
    """
    optimizer.zero_grad()
    total = 0.0
    for bag in bags_batch:
        idx = draw_subset(bag.n, m, rng)
        cubes = bag.cubes[idx]
        if augment:
            cubes = jitter_cubes(cubes, rng)
        out = model(cubes, idx)
        loss = ops.cross_entropy_logits(ops.reshape(out.logits, (1, 2)), [bag.label])
        (loss * (1.0 / len(bags_batch))).backward()
        total += loss.item()
    optimizer.step()
    return total / len(bags_batch)
