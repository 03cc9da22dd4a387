"""Progressive instance discarding with a policy-gradient agent.

At iteration ``t`` the agent sees the frozen T-MIL instance embeddings of the
``n - t + 1`` surviving cubes, pools them into one vector with a learnable
attention query, and maps that vector through the ``t``-th policy head to a
distribution over which survivor to drop. After the drop the T-MIL is run
again; whether its prediction is right now, and was right one step earlier,
sets the reward.
"""

from __future__ import annotations

import math
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import ops
from .autodiff.checkpoint import atomic_write_bytes, load_checkpoint, save_checkpoint
from .autodiff.nn import Linear, Module, Parameter
from .autodiff.optim import Adam
from .autodiff.tensor import Tensor, no_grad
from .instances.cubes import Bag
from .tmil import MultiHeadAttention, TMilModel, TMilOutput

POOLING_MODES = ("pma", "avg", "max")

Scorer = Callable[[Sequence[int]], TMilOutput]


class PolicyHead(Module):
    """Two-layer perceptron D -> D -> k; the output layer starts at zero (uniform policy)."""

    def __init__(self, dim: int, k: int, rng: np.random.Generator):
        self.hidden = Linear(dim, dim, rng)
        self.out = Linear(dim, k, rng, zero=True)

    def __call__(self, x: Tensor) -> Tensor:
        return self.out(ops.gelu(self.hidden(x)))


class AgentNetwork(Module):
    def __init__(self, dim: int, heads: int, n: int, m: int, pooling: str = "pma", seed: int = 0):
        if pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {pooling!r}")
        if not 0 <= m < n:
            raise ValueError(f"need 0 <= m < n, got m={m}, n={n}")
        rng = np.random.default_rng(seed)
        self.dim, self.n_heads, self.n, self.m, self.pooling = dim, heads, n, m, pooling
        if pooling == "pma":
            self.pma_query = Parameter(rng.normal(0.0, 1.0 / math.sqrt(dim), size=(1, dim)))
            self.pma_attention = MultiHeadAttention(dim, heads, rng, out_proj=False)
        self.heads = [PolicyHead(dim, n - t + 1, rng) for t in range(1, m + 1)]
        self.name_parameters()

    def head_size(self, t: int) -> int:
        return self.n - t + 1

    def pma_pool(self, instance_embeddings) -> Tensor:
        """One ``[1, D]`` summary of the ``[k, D]`` embeddings."""
        y = ops.as_tensor(instance_embeddings)
        if y.ndim != 2 or y.shape[0] < 1:
            raise ValueError(f"instance embeddings must be [k >= 1, D], got {y.shape}")
        if self.pooling == "avg":
            return ops.mean(y, axis=0, keepdims=True)
        if self.pooling == "max":
            return ops.max(y, axis=0, keepdims=True)
        return self.pma_attention(self.pma_query, y)

    def policy(self, instance_embeddings, t: int) -> Tensor:
        """Discard distribution ``P_t`` over the current survivors (shape ``[k]``)."""
        if not 1 <= t <= self.m:
            raise ValueError(f"iteration t={t} outside 1..{self.m}")
        k = ops.as_tensor(instance_embeddings).shape[0]
        if k != self.head_size(t):
            raise ValueError(
                f"desynchronised rollout: {k} survivors at t={t}, head expects {self.head_size(t)}"
            )
        logits = self.heads[t - 1](self.pma_pool(instance_embeddings))
        return ops.softmax(ops.reshape(logits, (k,)), axis=0)

    def save(self, path: str | os.PathLike) -> None:
        save_checkpoint(path, self.state_dict())
        meta = f"dim={self.dim}\nheads={self.n_heads}\nn={self.n}\nm={self.m}\npooling={self.pooling}\n"
        atomic_write_bytes(f"{os.fspath(path)}.cfg", meta.encode())

    @classmethod
    def load(cls, path: str | os.PathLike) -> AgentNetwork:
        meta = dict(
            line.split("=", 1) for line in Path(f"{os.fspath(path)}.cfg").read_text().split() if "=" in line
        )
        agent = cls(int(meta["dim"]), int(meta["heads"]), int(meta["n"]), int(meta["m"]), meta["pooling"])
        state = load_checkpoint(path)
        if state:
            agent.astype(next(iter(state.values())).dtype)
        agent.load_state_dict(state)
        return agent


def sample_action(probs, mode: str, rng: np.random.Generator | None = None) -> int:
    """Categorical draw in ``"train"`` mode; lowest-index argmax in ``"test"`` mode."""
    p = np.asarray(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    if mode == "test":
        return int(np.argmax(p))
    if mode != "train":
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    cdf = np.cumsum(p)
    u = rng.random() * cdf[-1]
    return int(min(np.searchsorted(cdf, u, side="right"), len(p) - 1))


def compute_reward(prediction: int, prev_correct: bool | None, label: int) -> int:
    """+1/-1 on the first step; afterwards 2, 1, -1, -2 from (correct now, correct before)."""
    correct = int(prediction) == int(label)
    if prev_correct is None:
        return 1 if correct else -1
    if correct:
        return 2 if prev_correct else 1
    return -1 if prev_correct else -2


@dataclass
class EpisodeStep:
    probabilities: np.ndarray
    action_position: int
    action_original_index: int
    reward: int
    prediction: int
    chosen_prob: Tensor | None = field(default=None, repr=False)


@dataclass
class Episode:
    bag_id: str
    label: int
    n: int
    steps: list[EpisodeStep]
    survivors: list[int]
    prediction: int
    score: float
    full_bag_prediction: int

    @property
    def discarded(self) -> list[int]:
        return [s.action_original_index for s in self.steps]

    @property
    def rewards(self) -> list[int]:
        return [s.reward for s in self.steps]

    @property
    def correct(self) -> bool:
        return self.prediction == self.label

    def to_line(self) -> str:
        return (
            f"bag={self.bag_id} label={self.label}"
            f" actions={','.join(map(str, self.discarded))}"
            f" rewards={','.join(map(str, self.rewards))}"
            f" pred={self.prediction} n={self.n}"
        )


@dataclass
class EpisodeRecord:
    """An episode as read back from a log line."""

    bag_id: str
    label: int
    actions: list[int]
    rewards: list[int]
    prediction: int
    n: int | None = None

    @property
    def correct(self) -> bool:
        return self.prediction == self.label


def parse_episode_line(line: str) -> EpisodeRecord:
    fields_ = dict(tok.split("=", 1) for tok in line.split())
    try:
        ints = lambda s: [int(v) for v in s.split(",") if v]  # noqa: E731
        return EpisodeRecord(
            bag_id=fields_["bag"],
            label=int(fields_["label"]),
            actions=ints(fields_["actions"]),
            rewards=ints(fields_["rewards"]),
            prediction=int(fields_["pred"]),
            n=int(fields_["n"]) if "n" in fields_ else None,
        )
    except KeyError as exc:
        raise ValueError(f"episode line missing field {exc}: {line!r}") from None


def frozen_scorer(tmil: TMilModel, bag: Bag, cache: dict | None = None) -> Scorer:
    """Evaluate a frozen T-MIL on subsets of ``bag``, embedding each cube only once.

    ``cache`` (keyed by bag id) lets features survive across epochs; it must be
    cleared whenever the T-MIL parameters change.
    """
    features = cache.get(bag.id) if cache is not None else None
    if features is None:
        with no_grad():
            features = tmil.extract_features(bag.cubes).data
        if cache is not None:
            cache[bag.id] = features

    def score(active: Sequence[int]) -> TMilOutput:
        active = np.asarray(active, dtype=np.int64)
        if len(active) == 0:
            raise ValueError("empty instance subset: every instance was discarded")
        with no_grad():
            return tmil.aggregate(Tensor(features[active]), active)

    return score


def episode_rollout(
    bag: Bag,
    tmil: TMilModel | Scorer,
    agent: AgentNetwork | None,
    m: int,
    mode: str,
    rng: np.random.Generator | None = None,
    cache: dict | None = None,
) -> Episode:
    """Discard ``m`` instances from ``bag`` one at a time.

    ``tmil`` is either a model (wrapped with :func:`frozen_scorer`) or any
    callable mapping surviving indices to a :class:`TMilOutput`. With
    ``agent=None`` discards are uniformly random, the baseline strategy.
    """
    if not 0 <= m < bag.n:
        raise ValueError(f"discard count m={m} must satisfy 0 <= m < n={bag.n}")
    scorer = frozen_scorer(tmil, bag, cache) if isinstance(tmil, TMilModel) else tmil
    active = list(range(bag.n))
    out = scorer(active)
    full_pred = out.prediction
    prev_correct = None
    steps = []
    for t in range(1, m + 1):
        state = out.instance_embeddings.detach()
        if agent is None:
            probs = Tensor(np.full(len(active), 1.0 / len(active)))
            pos = sample_action(probs, "train", rng)
        elif mode == "test":
            with no_grad():
                probs = agent.policy(state, t)
            pos = sample_action(probs, "test")
        else:
            probs = agent.policy(state, t)
            pos = sample_action(probs, "train", rng)
        removed = active.pop(pos)
        out = scorer(active)
        reward = compute_reward(out.prediction, prev_correct, bag.label)
        prev_correct = out.prediction == bag.label
        chosen = ops.getitem(probs, pos) if probs.requires_grad else None
        steps.append(EpisodeStep(probs.data.copy(), pos, removed, reward, out.prediction, chosen))
    return Episode(
        bag_id=bag.id,
        label=bag.label,
        n=bag.n,
        steps=steps,
        survivors=active,
        prediction=out.prediction,
        score=out.positive_score,
        full_bag_prediction=full_pred,
    )


def reinforce_loss(episode: Episode, baseline: float = 0.0) -> Tensor:
    """``-sum_t log P_t[k_t] * (R_t - baseline)`` over the episode's steps."""
    if not episode.steps:
        raise ValueError("episode has no steps")
    terms = []
    for step in episode.steps:
        if step.chosen_prob is None:
            raise ValueError("episode was not recorded with gradient tracking (train-mode agent rollout)")
        if float(step.chosen_prob.data) == 0.0:
            raise ValueError("chosen action has probability exactly 0; log is undefined")
        terms.append(ops.log(step.chosen_prob) * float(step.reward - baseline))
    return ops.neg(ops.sum(ops.stack(terms)))


def rollout_rng(seed: int, bag_id: str, epoch: int) -> np.random.Generator:
    """Per-rollout generator derived from (seed, bag id, epoch), independent of execution order."""
    return np.random.default_rng([seed, zlib.crc32(bag_id.encode("utf-8")), epoch])


def train_agent_step(
    agent: AgentNetwork,
    tmil: TMilModel,
    bags_batch: Sequence[Bag],
    m: int,
    rng: np.random.Generator | Callable[[Bag], np.random.Generator],
    optimizer: Adam,
    cache: dict | None = None,
    baseline: bool = False,
) -> float:
    """Roll out every bag in train mode, average the REINFORCE losses, take one step.

    The T-MIL is only ever evaluated under ``no_grad`` and is not in the
    optimiser, so its parameters are untouched. ``baseline=True`` subtracts the
    batch-mean reward (off by default).
    """
    if m < 1:
        raise ValueError("agent training needs m >= 1")
    optimizer.zero_grad()
    episodes = []
    for bag in bags_batch:
        bag_rng = rng(bag) if callable(rng) else rng
        episodes.append(episode_rollout(bag, tmil, agent, m, "train", bag_rng, cache=cache))
    b = float(np.mean([r for ep in episodes for r in ep.rewards])) if baseline else 0.0
    losses = [reinforce_loss(ep, b) for ep in episodes]
    total = ops.sum(ops.stack(losses)) * (1.0 / len(losses))
    total.backward()
    optimizer.step()
    return total.item()
