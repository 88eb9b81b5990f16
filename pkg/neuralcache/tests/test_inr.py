import numpy as np
import pytest
from hypothesis import given, strategies as st

from neuralcache.errors import ConfigurationError, ShapeMismatchError, TrainingError
from neuralcache.inr import (AdamState, Batch, BoundarySamples, EncodingConfig, InrModel, MlpConfig, TrainConfig,
                             adam_step, backward, desk_profile, encode_features, full_profile, get_profile, inr_forward,
                             level_resolution, loss_and_gradients, loss_total, lr_at, mlp_forward, train)
from neuralcache.tests.conftest import smooth_field
from neuralcache.volume import sample_trilinear


def oracle_model(seed, table_size=16):
    enc = EncodingConfig(levels=2, features_per_level=2, table_size=table_size, base_resolution=2,
                         per_level_scale=2.0)
    model = InrModel(enc, MlpConfig(hidden_layers=2, neurons=8, output_dim=1), seed=seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 1000)
    model.tables = [rng.uniform(-1.0, 1.0, size=t.shape) for t in model.tables]
    return model


def oracle_batch(seed, lam=0.5):
    rng = np.random.default_rng(seed + 2000)
    return Batch(rng.uniform(0, 1, (12, 3)), rng.uniform(-1, 1, (12, 1)),
                 rng.uniform(0, 1, (5, 3)), rng.uniform(-1, 1, (5, 1)), lam=lam)


def batch_loss(model, batch):
    x = np.concatenate([batch.x_uniform, batch.x_boundary])
    out = inr_forward(model, x)
    nu = len(batch.x_uniform)
    return loss_total(out[:nu], batch.y_uniform, out[nu:], batch.y_boundary, batch.lam)


def kink_pattern(model, batch):
    x = np.concatenate([batch.x_uniform, batch.x_boundary])
    out, _, pre = mlp_forward(model, encode_features(model, x), return_activations=True)
    y = np.concatenate([batch.y_uniform, batch.y_boundary])
    return [z > 0 for z in pre[:-1]] + [np.sign(out - y)]


def same_pattern(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b))


# --------------------------------------------------------------------------- #
# Encoding
# --------------------------------------------------------------------------- #
def test_level_resolutions_of_desk_profile():
    enc = desk_profile().encoding
    assert [level_resolution(enc, l) for l in range(4)] == [4, 6, 9, 13]
    assert enc.is_dense(0)
    assert not enc.is_dense(enc.levels - 1)


def test_profiles():
    assert get_profile("full").encoding == full_profile().encoding
    assert get_profile("paper").encoding == full_profile().encoding
    assert full_profile().encoding.table_size == 2 ** 19
    with pytest.raises(ConfigurationError):
        get_profile("laptop")


def test_table_size_must_be_power_of_two():
    with pytest.raises(ConfigurationError):
        EncodingConfig(table_size=1000)


def test_features_have_expected_width(tiny_encoding, tiny_mlp):
    model = InrModel(tiny_encoding, tiny_mlp)
    feats = encode_features(model, np.random.default_rng(0).uniform(0, 1, (7, 3)))
    assert feats.shape == (7, tiny_encoding.output_width)


def test_encoding_interpolates_dense_table_corners():
    enc = EncodingConfig(levels=1, features_per_level=1, table_size=64, base_resolution=1, per_level_scale=2.0)
    model = InrModel(enc, MlpConfig(hidden_layers=1, neurons=2), dtype=np.float64)
    # dense 2x2x2 corner table; value equals x + 2y + 4z at each corner
    model.tables = [np.array([[c & 1] for c in range(8)], dtype=np.float64)
                    + np.array([[2 * ((c >> 1) & 1) + 4 * ((c >> 2) & 1)] for c in range(8)])]
    pts = np.array([[0.25, 0.5, 0.75], [1.0, 1.0, 1.0]])
    np.testing.assert_allclose(encode_features(model, pts)[:, 0], pts @ [1, 2, 4])


def test_forward_clamps_out_of_range_inputs(tiny_encoding, tiny_mlp):
    model = InrModel(tiny_encoding, tiny_mlp)
    np.testing.assert_array_equal(model([[1.5, -0.2, 0.5]]), model([[1.0, 0.0, 0.5]]))


def test_nbytes_counts_float32_parameters(tiny_encoding, tiny_mlp):
    model = InrModel(tiny_encoding, tiny_mlp)
    assert model.parameter_count == sum(p.size for p in model.parameters)
    assert model.nbytes == 4 * model.parameter_count


def test_boundary_samples_shapes():
    empty = BoundarySamples.empty(3)
    assert len(empty) == 0
    assert empty.values.shape == (0, 3)
    flat = BoundarySamples(coords=[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]], values=[0.25, 0.75])
    assert flat.values.shape == (2, 1)
    with pytest.raises(ShapeMismatchError):
        BoundarySamples(coords=[[0.0, 0.0, 0.0]], values=[[0.1], [0.2]])


# --------------------------------------------------------------------------- #
# Loss
# --------------------------------------------------------------------------- #
@pytest.mark.parametrize("lam,expected", [(0.0, 1.5), (0.5, 1.25), (1.0, 1.0)])
def test_loss_total_hand_cases(lam, expected):
    assert loss_total(np.array([1.0, 2.0]), np.zeros(2), np.array([1.0]), np.zeros(1), lam) == pytest.approx(expected)


def test_loss_total_without_boundary_is_uniform_l1():
    assert loss_total(np.array([1.0, 2.0]), np.zeros(2), np.zeros(0), np.zeros(0), 0.9) == pytest.approx(1.5)


@given(lam=st.floats(0.0, 1.0), lu=st.floats(0.0, 10.0), lb=st.floats(0.0, 10.0))
def test_loss_total_is_linear_in_lambda(lam, lu, lb):
    total = loss_total(np.array([lu]), np.zeros(1), np.array([lb]), np.zeros(1), lam)
    assert total == pytest.approx((1 - lam) * lu + lam * lb, abs=1e-9)


# --------------------------------------------------------------------------- #
# Gradients
# --------------------------------------------------------------------------- #
def assert_finite_differences(model, batch):
    grads = backward(model, batch).as_list()
    base = kink_pattern(model, batch)
    h = 1e-6
    checked = 0
    for p, g in zip(model.parameters, grads):
        flat, gflat = p.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up, up_pattern = batch_loss(model, batch), kink_pattern(model, batch)
            flat[i] = orig - h
            down, down_pattern = batch_loss(model, batch), kink_pattern(model, batch)
            flat[i] = orig
            if not (same_pattern(base, up_pattern) and same_pattern(base, down_pattern)):
                continue
            fd = (up - down) / (2 * h)
            assert abs(gflat[i] - fd) <= 1e-4 * max(1.0, abs(fd)), (i, gflat[i], fd)
            checked += 1
    assert checked > 0


@pytest.mark.parametrize("seed", range(20))
def test_gradients_match_finite_differences(seed):
    assert_finite_differences(oracle_model(seed), oracle_batch(seed))


@pytest.mark.parametrize("seed", range(5))
def test_dense_level_gradients_match_finite_differences(seed):
    model = oracle_model(seed, table_size=64)
    assert model.encoding.is_dense(0)
    assert not model.encoding.is_dense(1)
    assert_finite_differences(model, oracle_batch(seed))


def test_gradients_match_torch_autograd():
    torch = pytest.importorskip("torch")
    model = oracle_model(3)
    batch = oracle_batch(3, lam=0.3)
    grads = backward(model, batch)

    x = np.concatenate([batch.x_uniform, batch.x_boundary])
    _, stencils = encode_features(model, x, return_stencils=True)
    tables = [torch.tensor(t, requires_grad=True) for t in model.tables]
    weights = [torch.tensor(w, requires_grad=True) for w in model.weights]
    biases = [torch.tensor(b, requires_grad=True) for b in model.biases]
    feats = torch.cat([(torch.tensor(w)[..., None] * t[torch.tensor(idx)]).sum(0)
                       for t, (idx, w) in zip(tables, stencils)], dim=1)
    h = feats
    for i, (W, b) in enumerate(zip(weights, biases)):
        h = h @ W + b
        if i < len(weights) - 1:
            h = torch.relu(h)
    nu = len(batch.x_uniform)
    y = torch.tensor(np.concatenate([batch.y_uniform, batch.y_boundary]))
    loss = ((1 - batch.lam) * (h[:nu] - y[:nu]).abs().mean() + batch.lam * (h[nu:] - y[nu:]).abs().mean())
    loss.backward()
    for ours, theirs in zip(grads.tables, tables):
        np.testing.assert_allclose(ours, theirs.grad.numpy(), atol=1e-10)
    for ours, theirs in zip(grads.weights, weights):
        np.testing.assert_allclose(ours, theirs.grad.numpy(), atol=1e-10)
    assert grads.loss.total == pytest.approx(loss.item())


def test_loss_and_gradients_reports_forward_loss():
    model, batch = oracle_model(3), oracle_batch(3)
    loss, grads = loss_and_gradients(model, batch)
    assert loss.total == pytest.approx(batch_loss(model, batch), abs=1e-12)
    assert loss.total == pytest.approx((1 - batch.lam) * loss.uniform + batch.lam * loss.boundary, abs=1e-12)
    assert [g.shape for g in grads.as_list()] == [p.shape for p in model.parameters]


def test_boundary_gradient_vanishes_at_lambda_zero():
    model = oracle_model(0)
    full = oracle_batch(0, lam=0.0)
    with_boundary = backward(model, full)
    uniform_only = backward(model, Batch(full.x_uniform, full.y_uniform, lam=0.0))
    for a, b in zip(with_boundary.as_list(), uniform_only.as_list()):
        np.testing.assert_allclose(a, b, atol=1e-12)


# --------------------------------------------------------------------------- #
# Optimizer
# --------------------------------------------------------------------------- #
def test_learning_rate_decay():
    cfg = TrainConfig()
    assert lr_at(cfg, 0) == pytest.approx(1e-2)
    assert lr_at(cfg, 499) == pytest.approx(1e-2)
    assert lr_at(cfg, 500) == pytest.approx(8e-3)
    assert lr_at(cfg, 1000) == pytest.approx(6.4e-3)


def test_first_adam_step_moves_by_lr():
    params = [np.array([1.0, -2.0])]
    state = AdamState.zeros_like(params)
    adam_step(state, params, [np.array([0.5, -3.0])], lr=0.1)
    np.testing.assert_allclose(params[0], [0.9, -1.9], atol=1e-6)
    assert state.t == 1


def test_two_adam_steps_follow_reference_trace():
    params = [np.array([1.0])]
    state = AdamState.zeros_like(params)
    adam_step(state, params, [np.array([0.5])], lr=0.1)
    assert params[0][0] == pytest.approx(0.900000002, abs=1e-12)
    adam_step(state, params, [np.array([-0.25])], lr=0.1)
    assert params[0][0] == pytest.approx(0.873366298708, abs=1e-11)
    np.testing.assert_allclose(state.m[0], [0.02])
    np.testing.assert_allclose(state.v[0], [0.00031225])


def test_adam_shape_mismatch():
    params = [np.zeros(2)]
    with pytest.raises(ShapeMismatchError):
        adam_step(AdamState.zeros_like(params), params, [np.zeros(3)], lr=0.1)


# --------------------------------------------------------------------------- #
# Training
# --------------------------------------------------------------------------- #
def test_train_stops_at_max_steps_with_budget_flag(tiny_encoding, tiny_mlp, quick_train):
    sampler = lambda x: np.sin(3 * x[:, :1]) * 0.5 + 0.5
    _, report = train(sampler, None, quick_train, tiny_encoding, tiny_mlp)
    assert report.steps_taken == 20
    assert report.stop_reason == "max_steps"
    assert report.budget_exhausted
    assert [h["step"] for h in report.history] == [10, 20]


def test_train_reaches_easy_target(tiny_encoding, tiny_mlp):
    cfg = TrainConfig(batch_uniform=128, max_steps=500, psnr_check_interval=10, check_resolution=4,
                      target_psnr=25.0)
    _, report = train(lambda x: np.full((len(x), 1), 0.5), None, cfg, tiny_encoding, tiny_mlp)
    assert report.stop_reason == "target"
    assert not report.budget_exhausted
    assert report.steps_taken < 500


def test_constant_field_reaches_45_db_within_200_steps(tiny_encoding, tiny_mlp):
    cfg = TrainConfig(batch_uniform=256, max_steps=200, psnr_check_interval=5, check_resolution=4,
                      target_psnr=45.0)
    _, report = train(lambda x: np.full((len(x), 1), 0.5), None, cfg, tiny_encoding, tiny_mlp)
    assert report.stop_reason == "target"
    assert report.steps_taken <= 200
    assert report.check_psnr >= 45.0


def test_single_step_budget(tiny_encoding, tiny_mlp):
    cfg = TrainConfig(batch_uniform=32, batch_boundary=8, max_steps=1, psnr_check_interval=10,
                      check_resolution=3, target_psnr=45.0)
    _, report = train(lambda x: x[:, :1], None, cfg, tiny_encoding, tiny_mlp)
    assert report.steps_taken == 1
    assert [h["step"] for h in report.history] == [1]
    assert report.budget_exhausted


def test_train_is_deterministic(tiny_encoding, tiny_mlp, quick_train):
    sampler = lambda x: x[:, :1]
    boundary = BoundarySamples(coords=[[0.5, 0.5, 0.5]], values=[[0.5]])
    a, _ = train(sampler, boundary, quick_train, tiny_encoding, tiny_mlp)
    b, _ = train(sampler, boundary, quick_train, tiny_encoding, tiny_mlp)
    for x, y in zip(a.parameters, b.parameters):
        np.testing.assert_array_equal(x, y)


def test_non_finite_loss_raises(tiny_encoding, tiny_mlp, quick_train):
    with pytest.raises(TrainingError) as err:
        train(lambda x: np.full((len(x), 1), np.nan), None, quick_train, tiny_encoding, tiny_mlp, rank=3)
    assert err.value.rank == 3
    assert err.value.step == 0


def test_output_width_must_match_sampler(tiny_encoding, tiny_mlp, quick_train):
    with pytest.raises(ShapeMismatchError):
        train(lambda x: np.zeros((len(x), 3)), None, quick_train, tiny_encoding, tiny_mlp)


def test_max_steps_must_be_positive():
    with pytest.raises(ConfigurationError):
        TrainConfig(max_steps=0)


@pytest.mark.slow
def test_longer_budget_never_fits_worse():
    vol = smooth_field((16, 16, 16))
    profile = desk_profile()
    sampler = lambda u: sample_trilinear(vol, u)

    def achieved(steps):
        cfg = profile.train_config(max_steps=steps, target_psnr=90.0, batch_uniform=1024, batch_boundary=256)
        return train(sampler, None, cfg, profile.encoding, profile.mlp(1))[1].check_psnr

    assert achieved(2000) >= achieved(200)
