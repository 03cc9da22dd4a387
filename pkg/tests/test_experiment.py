import json

import numpy as np
import pytest

from rtn.experiment import (
    ConfigError,
    ExperimentConfig,
    accuracy,
    auc,
    auc_pairwise,
    index_distribution,
    load_config,
    negative_recall,
    parse_config_text,
    render_config,
    run_ablation_grid,
    run_two_stage,
)
from rtn.instances import SyntheticSpec
from rtn.prid import EpisodeRecord
from rtn.tmil import TransformerConfig


def tiny_config(**kw):
    base = dict(
        n=6,
        m=3,
        cube_size=8,
        k_folds=2,
        tmil_epochs=1,
        agent_epochs=1,
        transformer=TransformerConfig(dim=8, layers=1, heads=2, mlp_hidden=8, channels=(2, 4)),
        synthetic=SyntheticSpec(num_bags=10, num_informative=2),
    )
    base.update(kw)
    return ExperimentConfig(**base)


# -- metrics ------------------------------------------------------------------


def test_accuracy_examples():
    assert accuracy([1, 0, 1], [1, 0, 1]) == 1.0
    assert accuracy([1, 0], [0, 1]) == 0.0
    assert accuracy([1, 1, 0, 0], [1, 1, 0, 1]) == 0.75
    with pytest.raises(ValueError):
        accuracy([], [])


def test_auc_examples():
    assert auc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0]) == 1.0
    assert auc([0.1, 0.9], [1, 0]) == 0.0
    assert auc([0.5, 0.5], [1, 0]) == 0.5
    with pytest.raises(ValueError, match="both classes"):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_pairwise_with_ties():
    rng = np.random.default_rng(0)
    for _ in range(20):
        scores = rng.integers(0, 6, size=50) / 5.0
        labels = rng.integers(0, 2, size=50)
        labels[:2] = [0, 1]
        assert abs(auc(scores, labels) - auc_pairwise(scores, labels)) <= 1e-12


def test_auc_invariant_to_increasing_transform():
    rng = np.random.default_rng(1)
    scores, labels = rng.random(40), rng.integers(0, 2, 40)
    labels[:2] = [0, 1]
    assert auc(scores, labels) == auc(np.exp(3 * scores) - 7, labels)


def test_negative_recall():
    mask = np.array([0, 0, 1, 1, 0], dtype=bool)
    assert negative_recall([0, 2], mask) == pytest.approx(1 / 3)
    assert negative_recall([0, 1, 4], mask) == 1.0
    assert negative_recall([0], np.ones(3, dtype=bool)) is None


# -- config -------------------------------------------------------------------


def test_empty_config_gives_documented_defaults(tmp_path):
    path = tmp_path / "empty.cfg"
    path.write_text("")
    c = load_config(path)
    assert (c.n, c.m, c.cube_size, c.k_folds) == (19, 14, 20, 5)
    assert (c.tmil_epochs, c.agent_epochs, c.batch_size) == (200, 400, 2)
    assert c.pooling == "pma" and c.transformer.dim == 32


def test_config_rejects_m_equal_n():
    with pytest.raises(ConfigError, match="m must satisfy"):
        parse_config_text("m = 19\n")


def test_config_grad_clip():
    assert parse_config_text("tmil_grad_clip = 1.5\n").tmil_grad_clip == 1.5
    assert parse_config_text("tmil_grad_clip = none\n").tmil_grad_clip is None
    with pytest.raises(ConfigError, match="tmil_grad_clip"):
        parse_config_text("tmil_grad_clip = 0\n")


def test_config_pooling_and_sections():
    c = parse_config_text(
        "pooling = avg  # table variant\n[transformer]\ndim = 16\n[synthetic]\nnum_bags = 30\n[signal]\nghost_shift = 2\n"
    )
    assert c.pooling == "avg" and c.transformer.dim == 16
    assert c.synthetic.num_bags == 30 and c.synthetic.signal_patterns.ghost_shift == 2


@pytest.mark.parametrize(
    "text,line",
    [
        ("m = 3\nlearning_rate = 1\n", 2),
        ("[nope]\n", 1),
        ("m = three\n", 1),
        ("m = 3\nm = 4\n", 2),
        ("just words\n", 1),
        ("[synthetic]\nn = 5\n", 2),
    ],
)
def test_config_errors_cite_line(text, line):
    with pytest.raises(ConfigError, match=f":{line}:"):
        parse_config_text(text)


def test_render_round_trips():
    c = tiny_config(pooling="max", max_folds=1)
    again = parse_config_text(render_config(c))
    assert again.to_dict() == c.to_dict()
    assert again.digest() == c.digest()


# -- runner -------------------------------------------------------------------


def test_run_is_deterministic_and_reports_both_strategies(tmp_path):
    a = run_two_stage(tiny_config(), out_dir=tmp_path / "a")
    b = run_two_stage(tiny_config())
    assert a.report == b.report and a.random_report == b.random_report
    assert a.report.n_bags == 10 and len(a.report.per_fold) == 2
    assert 0.0 <= a.report.accuracy <= 1.0
    assert a.report.negative_recall is not None
    record = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert record["seed"] == 0 and record["config_hash"] == a.config.digest()
    assert (tmp_path / "a" / "fold1" / "agent.ckpt").exists()
    lines = (tmp_path / "a" / "episodes.log").read_text().splitlines()
    assert len(lines) == 10 and all(line.startswith("bag=") for line in lines)


def test_m_zero_skips_agent():
    r = run_two_stage(tiny_config(m=0, max_folds=1))
    assert r.random_report is None and r.report.negative_recall is None
    assert "stage2" not in r.histories[0]
    assert all(ep.steps == [] for ep in r.episodes)
    assert r.report.accuracy == r.report.full_bag_accuracy


def test_random_strategy_skips_agent():
    r = run_two_stage(tiny_config(discard_strategy="random", max_folds=1))
    assert "stage2" not in r.histories[0] and r.random_report is None
    assert all(len(ep.steps) == 3 for ep in r.episodes)


def test_early_stop_on_target_accuracy():
    r = run_two_stage(tiny_config(m=0, max_folds=1, tmil_epochs=5, tmil_target_accuracy=0.0))
    assert r.histories[0]["stage1"]["epochs_run"] == 1


def test_ablation_table(tmp_path):
    table = run_ablation_grid(tiny_config(max_folds=1), "m", [1, 2], out_dir=tmp_path)
    lines = table.format().splitlines()
    assert lines[0].startswith("m ") and len(lines) == 4
    assert [r["value"] for r in table.records()] == [1, 2]
    assert (tmp_path / "ablation.txt").exists() and (tmp_path / "ablation.jsonl").exists()
    with pytest.raises(ValueError):
        run_ablation_grid(tiny_config(), "depth", [1])


def test_cube_size_ablation_regenerates_data():
    table = run_ablation_grid(tiny_config(max_folds=1, agent_epochs=0), "cube_size", [6, 8])
    assert [r.config.synthetic.cube_size for _, r in table.rows] == [6, 8]


# -- index report --------------------------------------------------------------


def test_random_reserved_distribution_near_uniform():
    rng = np.random.default_rng(0)
    records = [
        EpisodeRecord(f"b{i}", 1, rng.permutation(19)[:14].tolist(), [], 1, 19) for i in range(1000)
    ]
    dist = index_distribution(records)
    counts = dist.counts[("correct", "reserved")]
    p = 5 / 19
    sigma = np.sqrt(1000 * p * (1 - p))
    assert np.all(np.abs(counts - 1000 * p) < 3 * sigma)
    assert "(empty stratum" in dist.render()
    assert dist.frequencies(("incorrect", "reserved")) is None


def test_oracle_agent_reserves_planted_indices():
    keep = [7, 8, 9, 10, 11]
    drop = [i for i in range(19) if i not in keep]
    records = [EpisodeRecord(f"b{i}", 0, drop, [], 0, 19) for i in range(20)]
    freq = index_distribution(records).frequencies(("correct", "reserved"))
    assert freq[keep].sum() == 1.0


def test_report_needs_bag_size():
    with pytest.raises(ValueError, match="bag size"):
        index_distribution([EpisodeRecord("b", 1, [0], [1], 1, None)])
    assert index_distribution([EpisodeRecord("b", 1, [0], [1], 1, None)], n=3).n == 3
