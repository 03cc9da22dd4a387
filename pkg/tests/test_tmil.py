import numpy as np
import pytest

from rtn.autodiff import Adam, Tensor, check_gradients, default_dtype, no_grad, ops
from rtn.instances import Bag, SyntheticSpec, generate_synthetic_dataset
from rtn.tmil import TMilModel, TransformerConfig, draw_subset, pretrain_step

TINY = dict(dim=8, layers=2, heads=2, mlp_hidden=12, channels=(2, 4))


def tiny_model(seed=0, **kw):
    return TMilModel(TransformerConfig(**{**TINY, **kw}), seed=seed)


def cubes(k, size=6, seed=0):
    return np.random.default_rng(seed).random((k, 1, size, size, size)).astype(np.float32)


def test_feature_shapes_default_config():
    model = TMilModel()
    feats = model.extract_features(cubes(19, 20))
    assert feats.shape == (19, 32)


def test_identical_cubes_identical_rows_and_row_locality():
    model = tiny_model()
    x = cubes(4)
    x[1] = x[0]
    f = model.extract_features(x).data
    np.testing.assert_array_equal(f[0], f[1])
    y = x.copy()
    y[1] = 0.0
    g = model.extract_features(y).data
    changed = np.any(f != g, axis=1)
    assert changed.tolist() == [False, True, False, False]


def test_aggregate_shapes_and_subsets():
    model = tiny_model()
    for k in (19, 5, 1):
        out = model(cubes(k))
        assert out.logits.shape == (2,)
        assert out.instance_embeddings.shape == (k, 8)
        assert out.quality_embedding.shape == (8,)
        assert out.probabilities.sum() == pytest.approx(1.0, abs=1e-6)


def test_zero_layers_returns_raw_quality_token():
    model = tiny_model(layers=0)
    out = model(cubes(3))
    np.testing.assert_array_equal(out.quality_embedding.data, model.quality_token.data)


def test_permutation_invariance_without_positions():
    model = tiny_model()
    feats = Tensor(np.random.default_rng(1).normal(size=(7, 8)).astype(np.float32))
    base = model.aggregate(feats)
    rng = np.random.default_rng(2)
    for _ in range(5):
        perm = rng.permutation(7)
        out = model.aggregate(Tensor(feats.data[perm]))
        assert np.abs(out.logits.data - base.logits.data).max() < 1e-5
        assert np.abs(out.instance_embeddings.data - base.instance_embeddings.data[perm]).max() < 1e-5


def test_positional_embeddings_break_invariance_once_trained():
    model = tiny_model(use_positional=True)
    model.positional.data[:] = np.random.default_rng(0).normal(size=model.positional.shape)
    feats = Tensor(np.random.default_rng(1).normal(size=(5, 8)).astype(np.float32))
    a = model.aggregate(feats, [0, 1, 2, 3, 4]).logits.data
    b = model.aggregate(feats, [4, 3, 2, 1, 0]).logits.data
    assert np.abs(a - b).max() > 1e-4


def test_mean_aggregator_variant():
    model = tiny_model(aggregator="mean")
    out = model(cubes(3))
    assert out.logits.shape == (2,)


def test_tmil_forward_rejects_empty_subset():
    model = tiny_model()
    with pytest.raises(ValueError, match="empty"):
        model.tmil_forward([])
    bag = Bag("x", 1, cubes(3))
    with pytest.raises(ValueError, match="empty"):
        model.predict_bag(bag, [])
    assert model.tmil_forward(bag.instances[:2]).instance_embeddings.shape == (2, 8)


def test_full_model_gradients_float64():
    with default_dtype(np.float64):
        model = tiny_model(seed=3)
        x = np.random.default_rng(4).random((3, 1, 5, 5, 5))
        errors = check_gradients(
            lambda: ops.cross_entropy_logits(ops.reshape(model(x).logits, (1, 2)), [1]),
            model.parameters(),
            max_entries=6,
        )
    assert max(errors) < 1e-3, errors


def test_draw_subset():
    rng = np.random.default_rng(0)
    s = draw_subset(19, 14, rng)
    assert len(s) == 5 and len(set(s.tolist())) == 5 and np.all(np.diff(s) > 0)
    np.testing.assert_array_equal(draw_subset(19, 0, rng), np.arange(19))
    with pytest.raises(ValueError):
        draw_subset(19, 19, rng)


def test_draw_subset_frequencies():
    rng = np.random.default_rng(1)
    counts = np.zeros(19)
    for _ in range(1000):
        counts[draw_subset(19, 14, rng)] += 1
    p = 5 / 19
    sigma = np.sqrt(1000 * p * (1 - p))
    assert np.all(np.abs(counts - 1000 * p) < 3 * sigma), counts


def test_pretrain_step_learns_tiny_problem():
    spec = SyntheticSpec(n=6, num_informative=6, cube_size=8, num_bags=16)
    bags = generate_synthetic_dataset(spec).bags
    model = tiny_model(seed=1)
    opt = Adam(model.parameters(), lr=3e-3)
    rng = np.random.default_rng(0)

    def loss_all():
        with no_grad():
            return float(np.mean([
                ops.cross_entropy_logits(ops.reshape(model.predict_bag(b).logits, (1, 2)), [b.label]).item()
                for b in bags
            ]))

    before = loss_all()
    for _ in range(6):
        for j in range(0, len(bags), 2):
            pretrain_step(model, bags[j : j + 2], 2, rng, opt)
    assert loss_all() < before


def test_save_load_round_trip(tmp_path):
    model = tiny_model(seed=5, use_positional=True)
    model.save(tmp_path / "t.ckpt")
    back = TMilModel.load(tmp_path / "t.ckpt")
    assert back.config == model.config
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), back.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    x = cubes(4)
    np.testing.assert_array_equal(model(x).logits.data, back(x).logits.data)


@pytest.mark.parametrize("seed", range(10))
def test_every_parameter_receives_gradient(seed):
    model = tiny_model(seed=seed)
    x = cubes(4, seed=seed)
    ops.cross_entropy_logits(ops.reshape(model(x).logits, (1, 2)), [seed % 2]).backward()
    for name, p in model.named_parameters():
        assert p.grad is not None and np.any(p.grad != 0), name
