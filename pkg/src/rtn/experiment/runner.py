"""Two-stage training, k-fold evaluation and ablation grids."""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass, field
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from ..autodiff.checkpoint import atomic_write_bytes
from ..autodiff.optim import Adam
from ..instances.cubes import Bag
from ..instances.folds import kfold_split
from ..instances.synthetic import generate_synthetic_dataset
from ..prid import AgentNetwork, Episode, episode_rollout, rollout_rng, train_agent_step
from ..tmil import TMilModel, draw_subset, pretrain_step
from .config import ExperimentConfig, copy_config
from .metrics import accuracy, auc, negative_recall

log = logging.getLogger(__name__)


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


# -- stage 1 / stage 2 --------------------------------------------------------


def subset_accuracy(model: TMilModel, bags: Sequence[Bag], m: int, seed: int) -> float:
    """T-MIL accuracy on fixed random ``n - m`` subsets (the full bag when ``m == 0``)."""
    preds = []
    for bag in bags:
        idx = draw_subset(bag.n, m, rollout_rng(seed, bag.id, 0))
        preds.append(model.predict_bag(bag, idx).prediction)
    return accuracy(preds, [b.label for b in bags])


def train_tmil(config: ExperimentConfig, train_bags: Sequence[Bag], fold: int = 0) -> tuple[TMilModel, dict]:
    """Stage 1: T-MIL on uniformly random ``n - m`` instance subsets."""
    model = TMilModel(config.transformer, seed=derive_seed(config.seed, fold, 1))
    optimizer = Adam(model.parameters(), lr=config.lr, max_grad_norm=config.tmil_grad_clip)
    rng = np.random.default_rng(derive_seed(config.seed, fold, 2))
    history = {"loss": [], "train_accuracy": [], "epochs_run": 0}
    for epoch in range(config.tmil_epochs):
        order = rng.permutation(len(train_bags))
        losses = [
            pretrain_step(
                model,
                [train_bags[i] for i in order[j : j + config.batch_size]],
                config.m,
                rng,
                optimizer,
                augment=config.augment,
            )
            for j in range(0, len(order), config.batch_size)
        ]
        history["loss"].append(float(np.mean(losses)))
        history["epochs_run"] = epoch + 1
        if config.tmil_target_accuracy is not None and (epoch + 1) % config.eval_every == 0:
            acc = subset_accuracy(model, train_bags, config.m, derive_seed(config.seed, fold, 5))
            history["train_accuracy"].append(acc)
            log.info("fold %d stage1 epoch %d loss %.4f train_acc %.3f", fold, epoch + 1, history["loss"][-1], acc)
            if acc >= config.tmil_target_accuracy:
                break
        else:
            log.info("fold %d stage1 epoch %d loss %.4f", fold, epoch + 1, history["loss"][-1])
    return model, history


def train_agent(
    config: ExperimentConfig, tmil: TMilModel, train_bags: Sequence[Bag], fold: int = 0
) -> tuple[AgentNetwork, dict]:
    """Stage 2: REINFORCE on the agent against the frozen T-MIL."""
    agent = AgentNetwork(
        config.transformer.dim,
        config.transformer.heads,
        config.n,
        config.m,
        pooling=config.pooling,
        seed=derive_seed(config.seed, fold, 3),
    )
    optimizer = Adam(agent.parameters(), lr=config.agent_lr)
    order_rng = np.random.default_rng(derive_seed(config.seed, fold, 4))
    rollout_seed = derive_seed(config.seed, fold, 6)
    cache: dict = {}
    history = {"loss": []}
    for epoch in range(config.agent_epochs):
        order = order_rng.permutation(len(train_bags))
        losses = [
            train_agent_step(
                agent,
                tmil,
                [train_bags[i] for i in order[j : j + config.batch_size]],
                config.m,
                lambda bag, e=epoch: rollout_rng(rollout_seed, bag.id, e),
                optimizer,
                cache=cache,
                baseline=config.reward_baseline,
            )
            for j in range(0, len(order), config.batch_size)
        ]
        history["loss"].append(float(np.mean(losses)))
        log.info("fold %d stage2 epoch %d loss %.4f", fold, epoch + 1, history["loss"][-1])
    return agent, history


# -- evaluation -----------------------------------------------------------------


@dataclass
class Outcome:
    """Per-bag evaluation results for one strategy on one fold."""

    labels: list[int] = field(default_factory=list)
    predictions: list[int] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    full_bag_predictions: list[int] = field(default_factory=list)
    recalls: list[float] = field(default_factory=list)
    episodes: list[Episode] = field(default_factory=list)

    def extend(self, other: Outcome) -> None:
        for name in ("labels", "predictions", "scores", "full_bag_predictions", "recalls", "episodes"):
            getattr(self, name).extend(getattr(other, name))


def evaluate(
    tmil: TMilModel,
    agent: AgentNetwork | None,
    bags: Sequence[Bag],
    m: int,
    seed: int,
) -> Outcome:
    """Test-mode rollouts (argmax) with ``agent``; random discards when it is None.

    Predictions and scores come from the survivors only.
    """
    out = Outcome()
    cache: dict = {}
    for bag in bags:
        ep = episode_rollout(bag, tmil, agent, m, "test", rollout_rng(seed, bag.id, 0), cache=cache)
        out.labels.append(bag.label)
        out.predictions.append(ep.prediction)
        out.scores.append(ep.score)
        out.full_bag_predictions.append(ep.full_bag_prediction)
        if m and not bag.informative.all():
            r = negative_recall(ep.discarded, bag.informative)
            if r is not None:
                out.recalls.append(r)
        out.episodes.append(ep)
    return out


def _safe_auc(scores, labels) -> float | None:
    try:
        return auc(scores, labels)
    except ValueError:
        return None


@dataclass
class MetricsReport:
    accuracy: float
    auc: float | None
    accuracy_mean: float
    accuracy_std: float
    auc_mean: float | None
    auc_std: float | None
    full_bag_accuracy: float
    negative_recall: float | None
    per_fold: list[dict]
    n_bags: int

    @classmethod
    def from_outcomes(cls, outcomes: Sequence[Outcome]) -> MetricsReport:
        pooled = Outcome()
        per_fold = []
        for i, o in enumerate(outcomes):
            pooled.extend(o)
            per_fold.append(
                {
                    "fold": i,
                    "accuracy": accuracy(o.predictions, o.labels),
                    "auc": _safe_auc(o.scores, o.labels),
                    "negative_recall": float(np.mean(o.recalls)) if o.recalls else None,
                    "n_bags": len(o.labels),
                }
            )
        accs = [f["accuracy"] for f in per_fold]
        aucs = [f["auc"] for f in per_fold if f["auc"] is not None]
        return cls(
            accuracy=accuracy(pooled.predictions, pooled.labels),
            auc=_safe_auc(pooled.scores, pooled.labels),
            accuracy_mean=float(np.mean(accs)),
            accuracy_std=float(np.std(accs)),
            auc_mean=float(np.mean(aucs)) if aucs else None,
            auc_std=float(np.std(aucs)) if aucs else None,
            full_bag_accuracy=accuracy(pooled.full_bag_predictions, pooled.labels),
            negative_recall=float(np.mean(pooled.recalls)) if pooled.recalls else None,
            per_fold=per_fold,
            n_bags=len(pooled.labels),
        )

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunResult:
    config: ExperimentConfig
    report: MetricsReport
    random_report: MetricsReport | None
    episodes: list[Episode]
    checkpoints: dict[str, str]
    histories: list[dict]

    def record(self) -> dict:
        """Machine-readable summary: one JSON object per run."""
        return {
            "config_hash": self.config.digest(),
            "seed": self.config.seed,
            "strategy": self.config.discard_strategy,
            "m": self.config.m,
            "pooling": self.config.pooling,
            "cube_size": self.config.cube_size,
            "metrics": self.report.to_dict(),
            "random_metrics": self.random_report.to_dict() if self.random_report else None,
            "checkpoints": self.checkpoints,
        }


def dataset_for(config: ExperimentConfig) -> list[Bag]:
    return generate_synthetic_dataset(config.synthetic).bags


def fold_splits(config: ExperimentConfig, bags: Sequence[Bag]) -> list[tuple[list[Bag], list[Bag]]]:
    folds = kfold_split(list(bags), config.k_folds, config.seed)
    return folds if config.max_folds is None else folds[: config.max_folds]


def _uses_agent(config: ExperimentConfig) -> bool:
    return config.m > 0 and config.discard_strategy == "prid"


@dataclass
class FoldResult:
    fold: int
    outcome: Outcome
    random_outcome: Outcome | None
    history: dict
    checkpoints: dict[str, str]


def _fold_dir(out_dir, fold: int) -> Path | None:
    return None if out_dir is None else Path(out_dir) / f"fold{fold}"


def _run_fold(job) -> FoldResult:
    """One fold of the protocol. ``job`` is a tuple so it can cross a process boundary.

    ``stages`` selects what runs: "tmil" trains stage 1 (otherwise it is
    loaded from ``ckpt_dir``), "agent" trains stage 2 (otherwise it is loaded
    when the strategy needs one), "eval" scores the held-out bags.
    """
    config, fold, train, test, out_dir, ckpt_dir, stages = job
    log.info("fold %d: %d train / %d test bags", fold, len(train), len(test))
    history: dict = {"fold": fold}
    checkpoints: dict[str, str] = {}
    fold_out = _fold_dir(out_dir, fold)
    fold_in = _fold_dir(ckpt_dir, fold) or fold_out
    if "tmil" in stages:
        tmil, history["stage1"] = train_tmil(config, train, fold)
        if fold_out is not None:
            tmil.save(fold_out / "tmil.ckpt")
            checkpoints[f"fold{fold}/tmil"] = str(fold_out / "tmil.ckpt")
    else:
        tmil = TMilModel.load(fold_in / "tmil.ckpt")
        if fold_out is not None and fold_out != fold_in and "agent" in stages:
            # Keep the output directory self-contained for later evaluation.
            tmil.save(fold_out / "tmil.ckpt")
            checkpoints[f"fold{fold}/tmil"] = str(fold_out / "tmil.ckpt")
    agent = None
    if _uses_agent(config) and ("agent" in stages or "eval" in stages):
        if "agent" in stages:
            agent, history["stage2"] = train_agent(config, tmil, train, fold)
            if fold_out is not None:
                agent.save(fold_out / "agent.ckpt")
                checkpoints[f"fold{fold}/agent"] = str(fold_out / "agent.ckpt")
        else:
            agent = AgentNetwork.load(fold_in / "agent.ckpt")
            if agent.m != config.m:
                raise ValueError(f"agent checkpoint was trained for m={agent.m}, config has m={config.m}")
    outcome = random_outcome = None
    if "eval" in stages:
        random_seed = derive_seed(config.seed, fold, 7)
        outcome = evaluate(tmil, agent, test, config.m, random_seed)
        if agent is not None and config.compare_random:
            random_outcome = evaluate(tmil, None, test, config.m, random_seed)
    return FoldResult(fold, outcome, random_outcome, history, checkpoints)


def run_folds(
    config: ExperimentConfig,
    bags: Sequence[Bag] | None = None,
    out_dir: str | os.PathLike | None = None,
    ckpt_dir: str | os.PathLike | None = None,
    stages: Sequence[str] = ("tmil", "agent", "eval"),
    jobs: int = 1,
) -> list[FoldResult]:
    """Run ``stages`` on every fold; folds are independent and may use ``jobs`` processes."""
    config = copy_config(config).resolve()
    bags = list(bags) if bags is not None else dataset_for(config)
    work = [
        (config, fold, train, test, out_dir, ckpt_dir, tuple(stages))
        for fold, (train, test) in enumerate(fold_splits(config, bags))
    ]
    if jobs > 1 and len(work) > 1:
        with ProcessPoolExecutor(max_workers=min(jobs, len(work))) as pool:
            return list(pool.map(_run_fold, work))
    return [_run_fold(job) for job in work]


def collect(config: ExperimentConfig, folds: Sequence[FoldResult]) -> RunResult:
    primary = [f.outcome for f in folds]
    randoms = [f.random_outcome for f in folds if f.random_outcome is not None]
    checkpoints: dict[str, str] = {}
    for f in folds:
        checkpoints.update(f.checkpoints)
    return RunResult(
        config=config,
        report=MetricsReport.from_outcomes(primary),
        random_report=MetricsReport.from_outcomes(randoms) if randoms else None,
        episodes=[ep for o in primary for ep in o.episodes],
        checkpoints=checkpoints,
        histories=[f.history for f in folds],
    )


def run_two_stage(
    config: ExperimentConfig,
    bags: Sequence[Bag] | None = None,
    out_dir: str | os.PathLike | None = None,
    jobs: int = 1,
) -> RunResult:
    """Full protocol over the k folds (or the first ``max_folds``).

    Stage 1 pretrains T-MIL on random ``n - m`` subsets; stage 2 freezes it and
    trains the agent (skipped for ``m == 0`` or the random strategy).
    Evaluation uses argmax rollouts; random-discard metrics with the same
    T-MIL are reported alongside when ``compare_random`` is set.
    """
    config = copy_config(config).resolve()
    result = collect(config, run_folds(config, bags, out_dir, jobs=jobs))
    if out_dir is not None:
        write_run_outputs(result, Path(out_dir))
    return result


def write_run_outputs(result: RunResult, out_dir: Path) -> None:
    lines = "".join(ep.to_line() + "\n" for ep in result.episodes)
    atomic_write_bytes(out_dir / "episodes.log", lines.encode())
    atomic_write_bytes(out_dir / "metrics.json", (json.dumps(result.record(), sort_keys=True) + "\n").encode())


# -- ablations ----------------------------------------------------------------

ABLATION_AXES = {
    "m": ("m", int, (4, 9, 14)),
    "pooling": ("pooling", str, ("pma", "avg", "max")),
    "cube_size": ("cube_size", int, (15, 20, 30)),
}


@dataclass
class AblationTable:
    axis: str
    rows: list[tuple[object, RunResult]]

    def records(self) -> list[dict]:
        return [{"axis": self.axis, "value": value, **result.record()} for value, result in self.rows]

    def format(self) -> str:
        def cell(report: MetricsReport | None) -> str:
            if report is None:
                return "-"
            a = "n/a" if report.auc is None else f"{report.auc:.4f}"
            return f"{report.accuracy:.4f}/{a}"

        header = [self.axis, "Strategy(Accuracy/AUC)", "Random(Accuracy/AUC)", "NegRecall"]
        body = []
        for value, result in self.rows:
            recall = result.report.negative_recall
            body.append(
                [
                    str(value),
                    cell(result.report),
                    cell(result.random_report),
                    "-" if recall is None else f"{recall:.4f}",
                ]
            )
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        fmt = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths))  # noqa: E731
        rule = "-+-".join("-" * w for w in widths)
        return "\n".join([fmt(header), rule] + [fmt(r) for r in body])


def run_ablation_grid(
    base_config: ExperimentConfig,
    axis: str,
    values: Sequence | None = None,
    bags: Sequence[Bag] | None = None,
    out_dir: str | os.PathLike | None = None,
    jobs: int = 1,
) -> AblationTable:
    """One full run per value along ``axis`` with the base config's seed.

    The cube-size axis regenerates the synthetic instances for each value, so
    ``bags`` is ignored there.
    """
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}; choose from {sorted(ABLATION_AXES)}")
    name, kind, default_values = ABLATION_AXES[axis]
    values = [kind(v) for v in (values if values is not None else default_values)]
    rows = []
    for value in values:
        cfg = base_config.replace(**{name: value})
        cell_bags = None if axis == "cube_size" else bags
        cell_dir = None if out_dir is None else Path(out_dir) / f"{axis}={value}"
        log.info("ablation %s=%s", axis, value)
        rows.append((value, run_two_stage(cfg, cell_bags, cell_dir, jobs=jobs)))
    table = AblationTable(axis, rows)
    if out_dir is not None:
        out = Path(out_dir)
        atomic_write_bytes(out / "ablation.txt", (table.format() + "\n").encode())
        payload = "".join(json.dumps(r, sort_keys=True) + "\n" for r in table.records())
        atomic_write_bytes(out / "ablation.jsonl", payload.encode())
    return table
