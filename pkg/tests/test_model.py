import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slad.data import Dataset, make_synthetic
from slad.errors import AblationInapplicableError, InvalidInputError, ModelLoadError, TrainingError
from slad.model import (
    TrainConfig,
    batch_loss_and_grads,
    build_phi,
    load_model,
    phi_forward,
    save_model,
    scale_loss,
    score,
    score_batch,
    supervision_loss,
    train,
)
from slad.nn import finite_diff_check
from slad.supervision import generate_supervision

TINY = TrainConfig(c=4, r=3, h=16, hidden_units=8, epochs=2, batch_size=16)


@pytest.fixture(scope="module")
def tiny_data():
    ds = make_synthetic(n=120, n_noise=3, seed=5)
    return ds.subset(np.flatnonzero(ds.labels == 0)[:80]), ds


@pytest.fixture(scope="module")
def tiny_model(tiny_data):
    return train(tiny_data[0], replace(TINY, seed=3))


def test_identical_rows_identical_logits():
    phi = build_phi(6, 5, np.random.default_rng(0))
    row = np.random.default_rng(1).normal(size=6)
    p = phi_forward(phi, np.stack([row, row]))
    assert p[0] == p[1]


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31))
def test_row_permutation_equivariance(c, seed):
    rng = np.random.default_rng(seed)
    phi = build_phi(6, 5, rng)
    U = rng.normal(size=(c, 6))
    perm = rng.permutation(c)
    np.testing.assert_array_equal(phi_forward(phi, U[perm]), phi_forward(phi, U)[perm])


def test_phi_golden_logits():
    phi = build_phi(6, 5, np.random.default_rng(0))
    U = np.random.default_rng(1).normal(size=(4, 6))
    np.testing.assert_allclose(phi_forward(phi, U), [0.19335077, 0.05761091, 0.17010743, 0.18620818], atol=1e-8)


def test_phi_rejects_wrong_width():
    with pytest.raises(InvalidInputError):
        phi_forward(build_phi(6, 5, np.random.default_rng(0)), np.ones((3, 4)))


def test_loss_examples():
    y = np.array([0.3, 1.2, -0.4])
    assert scale_loss(y, y, "jsd")[0] == pytest.approx(0.0, abs=1e-15)
    assert scale_loss(y, y, "mse")[0] == 0.0
    assert scale_loss(y + 1.0, y, "mse")[0] == pytest.approx(1.0)
    p = np.log([0.8, 0.2])
    assert scale_loss(p, np.zeros(2), "jsd")[0] == pytest.approx(0.0506712, abs=1e-6)


@pytest.mark.parametrize("variant", ["jsd", "mse", "ce"])
def test_loss_gradients(variant):
    rng = np.random.default_rng(2)
    p, y = rng.normal(size=5), rng.normal(size=5) * 2
    _, g = scale_loss(p, y, variant)
    eps = 1e-6
    num = [(scale_loss(p + eps * e, y, variant)[0] - scale_loss(p - eps * e, y, variant)[0]) / (2 * eps) for e in np.eye(5)]
    np.testing.assert_allclose(g, num, atol=1e-8)


def test_ce_targets_largest_label():
    loss, _ = scale_loss(np.array([0.0, 5.0, 0.0]), np.array([1.0, 3.0, 2.0]), "ce")
    assert loss < 0.02


def test_unknown_variant():
    with pytest.raises(InvalidInputError):
        scale_loss(np.zeros(2), np.zeros(2), "hinge")


def test_full_pipeline_gradient(tiny_data):
    x = tiny_data[0].features[:6]
    model = train(tiny_data[0], replace(TINY, epochs=1))
    sup = generate_supervision(x, model.transform, model.feature_weights, 4, 2, 16, 200.0, seed=1)
    err = finite_diff_check(
        model.phi,
        lambda n: batch_loss_and_grads(n, sup.U, sup.y, "jsd"),
        eps=1e-4,
        kink_inputs=sup.U.reshape(-1, 16),
    )
    assert err < 1e-4


def test_one_epoch_lowers_training_loss(tiny_data):
    drops = []
    for seed in range(5):
        cfg = replace(TINY, seed=seed, epochs=1)
        before = train(tiny_data[0], replace(cfg, lr=1e-300))
        after = train(tiny_data[0], cfg)
        sup = generate_supervision(
            after.standardizer.transform(tiny_data[0].features), after.transform, after.feature_weights, 4, 3, 16, 200.0, seed=99
        )
        drops.append(supervision_loss(before.phi, sup, "jsd") - supervision_loss(after.phi, sup, "jsd"))
    assert np.mean(drops) > 0


def test_training_leaves_bank_untouched(tiny_data):
    model = train(tiny_data[0], TINY)
    fresh = train(tiny_data[0], replace(TINY, epochs=1))
    d = tiny_data[0].d
    assert model.transform.digest(range(1, d + 1)) == fresh.transform.digest(range(1, d + 1))


def test_training_is_deterministic(tiny_data):
    a = train(tiny_data[0], TINY)
    b = train(tiny_data[0], TINY)
    assert a.history == b.history
    for la, lb in zip(a.phi.layers, b.phi.layers):
        np.testing.assert_array_equal(la.weights, lb.weights)


def test_history_and_callback(tiny_data):
    seen = []
    model = train(tiny_data[0], TINY, epoch_callback=lambda e, m: seen.append(e))
    assert seen == [1, 2] and len(model.history) == 2


def test_resampling_changes_training(tiny_data):
    a = train(tiny_data[0], TINY)
    b = train(tiny_data[0], replace(TINY, resample_each_epoch=True))
    assert a.history[0] == b.history[0] and a.history[1] != b.history[1]


def test_zero_pad_needs_small_dimension():
    ds = Dataset(np.random.default_rng(0).normal(size=(10, 20)))
    with pytest.raises(AblationInapplicableError):
        train(ds, replace(TINY, transform_variant="zero_pad"))


def test_invalid_config():
    with pytest.raises(InvalidInputError, match="c must be"):
        TrainConfig(c=1).validate()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_epoch(tiny_data):
    with pytest.raises(TrainingError, match="epoch 1"):
        train(tiny_data[0], replace(TINY, loss_variant="mse", lr=1e300))


def test_scores_nonnegative_and_deterministic(tiny_model, tiny_data):
    x = tiny_data[1].features
    s1 = score_batch(tiny_model, x, seed=4)
    s2 = score_batch(tiny_model, x, seed=4)
    assert np.all(s1 >= 0)
    np.testing.assert_array_equal(s1, s2)
    assert score(tiny_model, x[0], seed=4) == s1[0]


def test_singleton_batch_and_permutation(tiny_model, tiny_data):
    x = tiny_data[1].features[:30]
    full = score_batch(tiny_model, x)
    assert score_batch(tiny_model, x[7:8])[0] == full[7]
    perm = np.random.default_rng(0).permutation(30)
    np.testing.assert_array_equal(score_batch(tiny_model, x[perm]), full[perm])


def test_threads_give_identical_scores(tiny_model, tiny_data):
    x = tiny_data[1].features[:40]
    np.testing.assert_array_equal(score_batch(tiny_model, x, threads=3), score_batch(tiny_model, x))


def test_score_dimension_mismatch(tiny_model):
    with pytest.raises(InvalidInputError, match="D=5"):
        score_batch(tiny_model, np.ones((2, 3)))


@pytest.mark.parametrize("variant", ["affine", "deep_mlp", "zero_pad"])
def test_save_load_round_trip(tmp_path, tiny_data, variant):
    model = train(tiny_data[0], replace(TINY, transform_variant=variant, epochs=1))
    path = tmp_path / "m.slad"
    save_model(model, path)
    back = load_model(path)
    x = tiny_data[1].features
    np.testing.assert_array_equal(score_batch(back, x, seed=2), score_batch(model, x, seed=2))
    assert back.history == model.history and back.config == model.config


def test_truncated_file(tmp_path, tiny_model):
    path = tmp_path / "m.slad"
    save_model(tiny_model, path)
    text = path.read_text()
    path.write_text(text[: len(text) // 2])
    with pytest.raises(ModelLoadError, match="truncated"):
        load_model(path)


def test_version_is_checked(tmp_path, tiny_model):
    path = tmp_path / "m.slad"
    save_model(tiny_model, path)
    doc = json.loads(path.read_text())
    assert doc["version"] == 1
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ModelLoadError, match="version"):
        load_model(path)


def test_tampered_bank_seed_is_detected(tmp_path, tiny_model):
    path = tmp_path / "m.slad"
    save_model(tiny_model, path)
    doc = json.loads(path.read_text())
    doc["transform"]["seed"] += 1
    path.write_text(json.dumps(doc))
    with pytest.raises(ModelLoadError, match="digest"):
        load_model(path)


def test_missing_model_file(tmp_path):
    with pytest.raises(ModelLoadError):
        load_model(tmp_path / "absent.slad")
