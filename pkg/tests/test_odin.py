import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from losscal import metrics, odin, synthdata
from losscal.nets import ArchConfig, JointModel, init_model, predictor_forward
from losscal.odin import OdinParams, detect, odin_score, perturb_input, temperature_score, tune_hyperparams
from losscal.training import TrainConfig, train


def _model(arch, **weights):
    params = {name: np.zeros(shape) for name, shape in arch.param_shapes().items()}
    params.update({k.replace("_", "."): np.asarray(v, dtype=float) for k, v in weights.items()})
    return JointModel(arch, params)


def linear_softmax_model(a, c):
    """Logits = x @ a + c, built from a ReLU trunk as relu(x) - relu(-x)."""
    d, k = a.shape
    arch = ArchConfig(input_dim=d, hidden_dims=(2 * d,), num_classes=k, tap_layers=(0,), tap_embed_dim=1, dropout=0.0)
    eye = np.eye(d)
    return _model(arch, trunk_0_W=np.hstack([eye, -eye]), head_W=np.vstack([a, -a]), head_b=c)


def gated_model():
    """Class-1 confidence grows with x0 > 0; rows with x0 < 0 sit at a dead
    ReLU with fixed confidence sigmoid(1) and zero input gradient."""
    arch = ArchConfig(input_dim=2, hidden_dims=(1,), num_classes=2, tap_layers=(0,), tap_embed_dim=1, dropout=0.0)
    return _model(arch, trunk_0_W=[[1.0], [0.0]], head_W=[[-100.0, 0.0]], head_b=[1.0, 0.0])


@pytest.fixture(scope="module")
def trained():
    data = synthdata.gen_inliers(k=3, d=4, n=300, imbalance_ratio=3, seed=0)
    tr, va = synthdata.stratified_split(data, 0.2, seed=1)
    arch = ArchConfig(input_dim=4, hidden_dims=(16, 16), num_classes=3, tap_layers=(0, 1), tap_embed_dim=4, dropout=0.2)
    model, _ = train(init_model(arch, 0), tr, va, TrainConfig(epochs=3, seed=0))
    return model, va


def test_temperature_score_examples():
    assert temperature_score(np.full(5, 1.7), 3.0) == pytest.approx(0.2, abs=1e-15)
    assert temperature_score([2.0, 0.0], 1.0) == pytest.approx(np.exp(2) / (np.exp(2) + 1), rel=1e-14)
    assert temperature_score([2.0, 0.0], 1e6) == pytest.approx(0.5, abs=1e-6)
    assert temperature_score([2.0, 0.0, -1.0, 3.0], 1e8) == pytest.approx(0.25, abs=1e-6)
    with pytest.raises(ValueError):
        temperature_score([1.0, 0.0], 0.0)


logit_rows = arrays(np.float64, st.integers(2, 6), elements=st.floats(-30, 30, allow_nan=False))


@settings(max_examples=100, deadline=None)
@given(z=logit_rows, t1=st.floats(1, 1e4), t2=st.floats(1, 1e4))
def test_temperature_score_bounds_and_monotone(z, t1, t2):
    k = z.size
    s1, s2 = temperature_score(z, t1), temperature_score(z, t2)
    for s in (s1, s2):
        assert 1.0 / k - 1e-12 <= s <= 1.0
    if np.sum(z == z.max()) == 1:
        lo, hi = sorted((t1, t2))
        assert temperature_score(z, hi) <= temperature_score(z, lo) + 1e-15


def test_perturb_identity_at_zero_eta():
    model = init_model(ArchConfig(input_dim=3, hidden_dims=(5,), num_classes=2, tap_layers=(0,)), 0)
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert perturb_input(model, x, 10.0, 0.0).tobytes() == x.tobytes()


def test_perturbation_is_a_sign_step(trained):
    model, va = trained
    x = va.x[:20]
    eta = 0.01
    delta = perturb_input(model, x, 10.0, eta) - x
    assert np.all(np.isin(np.round(delta / eta, 9), [-1.0, 0.0, 1.0]))


def test_linear_model_hand_gradient_sign():
    a = np.array([[1.0, -2.0, 0.5], [0.3, 1.0, -1.0]])
    c = np.array([0.1, 0.0, -0.2])
    model = linear_softmax_model(a, c)
    x = np.array([[0.7, -0.4], [-1.1, 0.9], [0.2, 0.25]])
    for temperature in (1.0, 10.0):
        logits = x @ a + c
        z = logits / temperature
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        k = logits.argmax(axis=1)
        grad = (a[:, k].T - p @ a.T) / temperature  # d log p_k / dx
        expected = x - 0.05 * np.sign(-grad)
        np.testing.assert_array_equal(perturb_input(model, x, temperature, 0.05), expected)


def test_perturbation_clamp():
    model = linear_softmax_model(np.array([[1.0, -1.0]]), np.zeros(2))
    out = perturb_input(model, np.array([[0.99], [-0.5]]), 1.0, 0.05, clamp=(-1.0, 1.0))
    assert out.max() <= 1.0


def test_degenerate_odin_is_max_softmax(trained):
    model, va = trained
    logits, _ = predictor_forward(model, va.x)
    p = np.exp(logits - logits.max(axis=1, keepdims=True))
    msp = (p / p.sum(axis=1, keepdims=True)).max(axis=1)
    np.testing.assert_allclose(odin_score(model, va.x, OdinParams(1.0, 0.0, 0.5)), msp, rtol=0, atol=1e-12)


def test_zero_eta_score_is_temperature_score(trained):
    model, va = trained
    logits, _ = predictor_forward(model, va.x)
    for t in (1.0, 7.0, 1000.0):
        np.testing.assert_allclose(odin_score(model, va.x, OdinParams(t, 0.0, 0.5)), temperature_score(logits, t),
                                   atol=1e-15)


def test_detect_boundary():
    assert detect(0.99, 0.5) == "inlier"
    assert detect(0.5, 0.5) == "inlier"
    assert detect(0.3, 0.5) == "outlier"


def test_singleton_grid_returns_baseline(trained):
    model, va = trained
    far = np.random.default_rng(0).normal(size=(30, 4)) * 5
    params = tune_hyperparams(model, va.x, far, [1.0], [0.0])
    assert (params.temperature, params.eta) == (1.0, 0.0)
    assert 0.0 < params.tau < 1.0


def test_duplicate_grid_entries_are_ignored(trained):
    model, va = trained
    far = np.random.default_rng(1).normal(size=(30, 4)) * 5
    a = tune_hyperparams(model, va.x, far, [1, 10, 10, 1], [0.0, 0.002, 0.0])
    b = tune_hyperparams(model, va.x, far, [1, 10], [0.0, 0.002])
    assert a == b


def test_tuner_is_brute_force_argmin(trained):
    model, va = trained
    far = np.random.default_rng(2).normal(size=(40, 4)) * 4
    t_grid, eta_grid = (1.0, 10.0, 100.0), (0.0, 0.005, 0.02)
    best = None
    for t in t_grid:
        for eta in eta_grid:
            p = OdinParams(t, eta, 0.5)
            fpr = metrics.fpr_at_tpr95(odin_score(model, va.x, p), odin_score(model, far, p))
            key = (fpr, eta, t)
            best = key if best is None or key < best else best
    got = tune_hyperparams(model, va.x, far, t_grid, eta_grid)
    assert (got.tuning_metric, got.eta, got.temperature) == pytest.approx(best, abs=1e-12)


def test_tuner_selects_helpful_perturbation():
    model = gated_model()
    x_in = np.column_stack([np.linspace(0.012, 0.017, 20), np.zeros(20)])
    x_out = np.column_stack([np.full(20, -1.0), np.linspace(-1, 1, 20)])
    fpr = {eta: metrics.fpr_at_tpr95(odin_score(model, x_in, OdinParams(1.0, eta, 0.5)),
                                     odin_score(model, x_out, OdinParams(1.0, eta, 0.5)))
           for eta in (0.0, 0.01)}
    assert fpr[0.01] < fpr[0.0]
    params = tune_hyperparams(model, x_in, x_out, [1.0], [0.0, 0.01])
    assert params.eta == 0.01
    assert params.tuning_metric == fpr[0.01]


def test_empty_grid_fails(trained):
    model, va = trained
    with pytest.raises(ValueError, match="nonempty"):
        tune_hyperparams(model, va.x, va.x, [], [0.0])


def test_params_validation_and_file_round_trip(tmp_path):
    for bad in ((0.5, 0.0, 0.5), (1.0, -0.1, 0.5), (1.0, 0.0, 1.0)):
        with pytest.raises(ValueError):
            OdinParams(*bad)
    p = OdinParams(100.0, 0.002, 0.4321, 0.125)
    path = tmp_path / "odin.txt"
    p.save(path)
    assert path.read_text().splitlines() == ["T = 100.0", "eta = 0.002", "tau = 0.4321", "tuning_metric_value = 0.125"]
    assert OdinParams.load(path) == p
    path.write_text("T = 1\neta = 0\n")
    with pytest.raises(ValueError, match="missing"):
        OdinParams.load(path)
    path.write_text("T = 1\neta = 0\ntau = 0.5\ngamma = 2\n")
    with pytest.raises(ValueError, match="unknown"):
        OdinParams.load(path)


def test_score_dump_round_trip(tmp_path):
    path = tmp_path / "scores.csv"
    odin.write_scores(path, [(0, "inliers", 0.9, 1), (1, "inliers", 0.8, None), (0, "far", 0.3, None)])
    back = odin.read_scores(path)
    np.testing.assert_array_equal(back["inliers"], [0.9, 0.8])
    np.testing.assert_array_equal(back["far"], [0.3])
    assert path.read_text().splitlines()[0] == "sample_id,dataset_tag,score,label_if_known"
