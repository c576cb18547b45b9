from dataclasses import replace

import numpy as np
import pytest

from divfree.common import (
    DataIOError,
    DatasetConfig,
    FnoConfig,
    GridConfig,
    LossConfig,
    MicrostructureConfig,
    PreconditionError,
    RunSettings,
    SolverConfig,
    TrainConfig,
)
from divfree.training_harness import (
    Adam,
    Sample,
    componentwise_peak,
    compute_stats,
    denormalize,
    error_peak_boundary_distance,
    evaluate,
    generate_dataset,
    load_checkpoint,
    load_dataset,
    loss,
    loss_and_grad,
    lr_at,
    model_loss,
    normalize,
    prepare_model,
    read_history,
    save_checkpoint,
    save_dataset,
    train,
    verify_dataset,
    write_history,
)

GRID = GridConfig(n_dis=8)
DATA_CFG = DatasetConfig(n_dat=4, n_tra=3, n_res=16, f22=(1.002, 1.004), seed=0)
SMALL_FNO = dict(n_hid=1, width=4, modes=3)


@pytest.fixture(scope="module")
def dataset():
    return generate_dataset(DATA_CFG, GRID, MicrostructureConfig(seed=0), SolverConfig())


@pytest.fixture(scope="module")
def normalized(dataset):
    return normalize(dataset)


def _model(variant, stats, seed=0):
    return prepare_model(FnoConfig(variant=variant, **SMALL_FNO), GRID, stats, seed)


class _StopAfter:
    """Reports a stop request on the n-th poll."""

    def __init__(self, n):
        self.n = n
        self.calls = 0

    def is_set(self):
        self.calls += 1
        return self.calls >= self.n


# =========================
#   Loss
# =========================
def test_loss_toy_values():
    p_dat = np.ones((1, 4, 4, 3, 3))
    report = loss(0.5 * p_dat, p_dat, np.zeros((1, 4, 4, 3)), LossConfig(c_div=2.0, variant="pi"))
    assert report.L_dat == pytest.approx(0.5)
    assert report.L_div == pytest.approx(1e-4)
    assert report.L_total == pytest.approx(0.5 + 2e-4)
    assert loss(np.zeros_like(p_dat), p_dat, np.zeros((1, 4, 4, 3)), LossConfig()).L_dat == pytest.approx(1.0)


def test_loss_ignores_divergence_outside_pi():
    p_dat = np.ones((1, 4, 4, 3, 3))
    d = np.ones((1, 4, 4, 3))
    report = loss(p_dat, p_dat, d, LossConfig(c_div=10.0, variant="pg"))
    assert report.L_total == 0.0
    assert report.L_div > 1.0


def test_loss_rejects_zero_data():
    with pytest.raises(PreconditionError):
        loss(np.ones((1, 2, 2, 3, 3)), np.zeros((1, 2, 2, 3, 3)), np.zeros((1, 2, 2, 3)), LossConfig())


@pytest.mark.parametrize("variant, c_div", [("pg", 0.0), ("pi", 0.5), ("pe", 0.0)])
def test_loss_gradient_matches_finite_differences(normalized, variant, c_div):
    data, stats = normalized
    rng = np.random.default_rng(3)
    model = _model(variant, stats, seed=1)
    if variant == "pe":
        model.stress_weights = rng.uniform(0.3, 1.0, (3, 3))
    cfg = LossConfig(c_div=c_div, variant=variant)
    _, grads = loss_and_grad(model, data.x_train, data.y_train, cfg)

    h = 1e-6
    for name in model.param_names():
        direction = rng.standard_normal(model.params[name].shape)
        plus, minus = model.copy(), model.copy()
        plus.params[name] = plus.params[name] + h * direction
        minus.params[name] = minus.params[name] - h * direction
        fd = (model_loss(plus, data.x_train, data.y_train, cfg).L_total
              - model_loss(minus, data.x_train, data.y_train, cfg).L_total) / (2 * h)
        an = float(np.sum(grads[name] * direction))
        assert fd == pytest.approx(an, rel=1e-5, abs=1e-8), name


# =========================
#   Optimizer
# =========================
def test_lr_schedule():
    assert lr_at(0, 500, 1e-3) == 1e-3
    assert lr_at(99, 500, 1e-3) == 1e-3
    assert lr_at(100, 500, 1e-3) == 5e-4
    assert lr_at(450, 500, 1e-3) == pytest.approx(1e-3 / 16)
    assert lr_at(3, 3, 1e-3) == pytest.approx(1e-3 / 8)


def test_adam_first_step_has_size_lr():
    params = {"x": np.array([1.0, -2.0, 0.5])}
    grads = {"x": np.array([3.0, -0.5, 1.0])}
    Adam(lr=0.01).step(params, grads)
    np.testing.assert_allclose(params["x"], [0.99, -1.99, 0.49], rtol=1e-6)


def test_adam_minimizes_a_quadratic():
    target = np.array([0.7, -0.3, 0.1])
    params = {"x": np.zeros(3)}
    opt = Adam(lr=1e-3)
    for _ in range(5000):
        opt.step(params, {"x": 2.0 * (params["x"] - target)})
    np.testing.assert_allclose(params["x"], target, atol=1e-2)
    assert opt.t == 5000


# =========================
#   Dataset
# =========================
def test_generated_dataset_shapes(dataset):
    assert dataset.n_dat == 4
    assert len(dataset.train) == 3 and len(dataset.test) == 1
    s = dataset.samples[0]
    assert s.P.shape == (8, 8, 3, 3)
    assert s.E.shape == (8, 8)
    assert s.residual <= 1e-8
    assert s.F_bar[1, 1] in (1.002, 1.004)
    for i, j in ((0, 2), (1, 2), (2, 0), (2, 1)):
        assert np.all(s.P[..., i, j] == 0.0)


def test_dataset_does_not_depend_on_threads(dataset):
    again = generate_dataset(DATA_CFG, GRID, MicrostructureConfig(seed=0), SolverConfig(), threads=2)
    for a, b in zip(dataset.samples, again.samples):
        np.testing.assert_array_equal(a.P, b.P)
        np.testing.assert_array_equal(a.grain_id, b.grain_id)


def test_separate_stream_draws_other_microstructures(dataset):
    cfg = replace(DATA_CFG, n_dat=2, n_tra=0)
    again = generate_dataset(cfg, GRID, MicrostructureConfig(seed=0), SolverConfig())
    other = generate_dataset(cfg, GRID, MicrostructureConfig(seed=0), SolverConfig(), stream=1)
    for a in range(2):
        np.testing.assert_array_equal(again.samples[a].E_field, dataset.samples[a].E_field)
        assert not np.array_equal(other.samples[a].E_field, dataset.samples[a].E_field)


def test_dataset_files_are_reproducible(dataset, tmp_path):
    save_dataset(dataset, tmp_path / "a")
    save_dataset(dataset, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert "manifest.json" in names
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_dataset_round_trip_and_tampering(dataset, tmp_path):
    save_dataset(dataset, tmp_path)
    loaded = load_dataset(tmp_path)
    assert loaded.config == dataset.config
    assert loaded.microstructure == dataset.microstructure
    np.testing.assert_array_equal(loaded.samples[2].P, dataset.samples[2].P)
    np.testing.assert_array_equal(loaded.samples[2].grain_id, dataset.samples[2].grain_id)
    assert verify_dataset(tmp_path) == 16

    blob = tmp_path / "sample_00001_E.f64"
    data = bytearray(blob.read_bytes())
    data[0] ^= 0xFF
    blob.write_bytes(bytes(data))
    with pytest.raises(DataIOError):
        verify_dataset(tmp_path)
    with pytest.raises(DataIOError):
        load_dataset(tmp_path)


def test_missing_dataset_is_an_io_error(tmp_path):
    with pytest.raises(DataIOError):
        load_dataset(tmp_path / "nowhere")


def test_n_res_must_be_a_multiple():
    from divfree.common import ConfigError

    with pytest.raises(ConfigError):
        generate_dataset(DatasetConfig(n_dat=1, n_tra=1, n_res=12), GRID, MicrostructureConfig(), SolverConfig())


# =========================
#   Normalization
# =========================
def test_training_split_spans_unit_interval(normalized):
    data, stats = normalized
    for c in (0, 1, 3, 4, 8):
        channel = data.y_train.reshape(-1, 9)[:, c]
        assert channel.min() == pytest.approx(0.0, abs=1e-12)
        assert channel.max() == pytest.approx(1.0, abs=1e-12)
    assert data.x_train[..., 0].min() == pytest.approx(0.0, abs=1e-12)
    assert data.x_train[..., 0].max() == pytest.approx(1.0, abs=1e-12)
    assert data.n_tes == 1


def test_denormalize_round_trip(dataset, normalized):
    data, stats = normalized
    np.testing.assert_allclose(denormalize(data.y_train[0], stats), dataset.samples[0].P, atol=1e-9)


def test_stress_weights_row_maximum_is_one(normalized):
    _, stats = normalized
    w = stats.stress_weights()
    assert w[0, 0] == 1.0 or w[0, 1] == 1.0
    assert np.all(w > 0.0) and np.all(w <= 1.0)
    assert w[2, 2] == 1.0


def test_shared_mode_has_one_scale(dataset):
    stats = compute_stats(dataset.train, "shared")
    active = stats.P_scale[[0, 0, 1, 1, 2], [0, 1, 0, 1, 2]]
    np.testing.assert_allclose(active, active[0], rtol=1e-12)
    np.testing.assert_allclose(stats.stress_weights(), np.ones((3, 3)), rtol=1e-12)


def test_degenerate_channel_raises():
    grid_id = np.zeros((2, 2), dtype=np.int64)
    P = np.zeros((2, 2, 3, 3))
    P[..., 0, 0] = 1.0
    samples = [Sample(a, grid_id, np.full((2, 2), 100.0), np.full((2, 2), 0.3), np.eye(3), P, 1, 0.0, 0.0)
               for a in range(2)]
    with pytest.raises(PreconditionError):
        compute_stats(samples)


# =========================
#   Training
# =========================
def test_zero_epochs_leave_the_model_unchanged(normalized):
    data, stats = normalized
    model = _model("pe", stats)
    before = model.flatten()
    result = train(model, data, LossConfig(variant="pe"), TrainConfig(epochs=0))
    np.testing.assert_array_equal(result.model.flatten(), before)
    assert result.history == []


def test_training_reduces_the_data_loss(normalized):
    data, stats = normalized
    model = _model("pg", stats)
    cfg = LossConfig(variant="pg")
    start = model_loss(model, data.x_train, data.y_train, cfg).L_dat
    result = train(model, data, cfg, TrainConfig(epochs=30, lr0=1e-2, log_every=0))
    assert len(result.history) == 30
    assert result.history[-1]["train_L_dat"] < start
    assert [row["epoch"] for row in result.history] == list(range(30))


def test_pi_without_penalty_matches_pg(normalized):
    data, stats = normalized
    pi = _model("pi", stats)
    pg = pi.with_variant("pg")
    cfg = TrainConfig(epochs=3, lr0=1e-2, log_every=0)
    a = train(pi, data, LossConfig(c_div=0.0, variant="pi"), cfg)
    b = train(pg, data, LossConfig(variant="pg"), cfg)
    np.testing.assert_array_equal(a.model.flatten(), b.model.flatten())


def test_variant_mismatch_is_a_config_error(normalized):
    from divfree.common import ConfigError

    data, stats = normalized
    with pytest.raises(ConfigError):
        train(_model("pe", stats), data, LossConfig(variant="pg"), TrainConfig(epochs=1))


def test_history_csv_round_trip(normalized, tmp_path):
    data, stats = normalized
    result = train(_model("pe", stats), data, LossConfig(variant="pe"), TrainConfig(epochs=2, log_every=0))
    write_history(tmp_path / "history.csv", result.history)
    assert read_history(tmp_path / "history.csv") == result.history


def test_checkpoint_round_trip(normalized, tmp_path):
    data, stats = normalized
    model = _model("pi", stats)
    loss_cfg = LossConfig(c_div=0.1, variant="pi")
    train_cfg = TrainConfig(epochs=2, log_every=0)
    result = train(model, data, loss_cfg, train_cfg)
    save_checkpoint(tmp_path, result.model, stats, result.epoch, result.optimizer, loss_cfg, train_cfg,
                    {"note": "x"})
    ckpt = load_checkpoint(tmp_path)
    np.testing.assert_array_equal(ckpt.model.flatten(), result.model.flatten())
    np.testing.assert_array_equal(ckpt.model.stress_weights, result.model.stress_weights)
    assert ckpt.loss == loss_cfg and ckpt.training == train_cfg
    assert ckpt.epoch == 2 and ckpt.optimizer.t == result.optimizer.t
    np.testing.assert_array_equal(ckpt.stats.P_min, stats.P_min)
    assert ckpt.meta == {"note": "x"}


def test_interrupted_run_resumes_identically(normalized, tmp_path):
    data, stats = normalized
    loss_cfg = LossConfig(c_div=0.5, variant="pi")
    train_cfg = TrainConfig(epochs=6, lr0=1e-2, batch_size=2, log_every=0)

    full = train(_model("pi", stats), data, loss_cfg, train_cfg)

    part = train(_model("pi", stats), data, loss_cfg, train_cfg, stop_event=_StopAfter(3))
    assert part.interrupted and part.epoch == 3
    save_checkpoint(tmp_path, part.model, stats, part.epoch, part.optimizer, loss_cfg, train_cfg)
    ckpt = load_checkpoint(tmp_path)
    resumed = train(ckpt.model, data, loss_cfg, train_cfg, optimizer=ckpt.optimizer,
                    start_epoch=ckpt.epoch, history=part.history)

    np.testing.assert_allclose(resumed.model.flatten(), full.model.flatten(), rtol=0, atol=1e-10)
    assert len(resumed.history) == 6
    assert resumed.history[-1]["train_L_dat"] == pytest.approx(full.history[-1]["train_L_dat"], abs=1e-10)


# =========================
#   Evaluation
# =========================
def test_evaluation_reproduces_training_loss(normalized):
    data, stats = normalized
    cfg = LossConfig(variant="pe")
    result = train(_model("pe", stats), data, cfg, TrainConfig(epochs=2, log_every=0))
    ev = evaluate(result.model, data.x_train, data.y_train, cfg)
    assert ev.metrics["L_dat"] == pytest.approx(result.history[-1]["train_L_dat"], abs=1e-12)
    assert ev.metrics["rel_div_norm"] <= 1e-10
    assert ev.error_map.shape == (3, 8, 8)
    assert ev.div_map.shape == (3, 8, 8)


def test_pg_evaluation_has_divergence(normalized):
    data, stats = normalized
    ev = evaluate(_model("pg", stats), data.x_test, data.y_test, LossConfig(variant="pg"))
    assert ev.metrics["rel_div_norm"] > 1e-6
    assert ev.metrics["max_error"] >= ev.metrics["median_error"]


def test_componentwise_peak():
    P = np.zeros((2, 4, 4, 3, 3))
    P[1, 2, 3, 1, 1] = -5.0
    P[0, 0, 0, 0, 0] = 4.0
    assert componentwise_peak(P) == (1, 1)


def test_error_peak_boundary_distance():
    grain_id = np.zeros((8, 8), dtype=np.int64)
    grain_id[4:] = 1
    error = np.zeros((8, 8))
    error[1, 5] = 1.0
    assert error_peak_boundary_distance(error, grain_id) == 1.0
    error[1, 5] = 0.0
    error[6, 2] = 1.0
    assert error_peak_boundary_distance(error, grain_id) == 1.0


# =========================
#   Desk-scale comparison
# =========================
@pytest.fixture(scope="module")
def desk_runs():
    """pg, pe and pi over c_div trained with the shipped defaults and one seed."""
    settings = RunSettings()
    ds = generate_dataset(settings.dataset, settings.grid, settings.microstructure, settings.solver)
    data, stats = normalize(ds)
    runs = {}
    for variant, c_div in (("pg", 0.0), ("pe", 0.0), ("pi", 0.01), ("pi", 0.1), ("pi", 10.0)):
        model = prepare_model(replace(settings.model, variant=variant), ds.grid, stats, settings.training.seed)
        loss_cfg = replace(settings.loss, variant=variant, c_div=c_div)
        result = train(model, data, loss_cfg, replace(settings.training, log_every=0))
        runs[variant, c_div] = evaluate(result.model, data.x_test, data.y_test, loss_cfg)
    return ds, stats, runs


@pytest.mark.slow
def test_potential_output_has_far_smaller_divergence(desk_runs):
    ds, _, runs = desk_runs
    assert ds.config.n_tra == 48 and ds.config.n_tes == 16 and ds.grid.n_dis == 32
    pe, pg, pi = runs["pe", 0.0].metrics, runs["pg", 0.0].metrics, runs["pi", 0.1].metrics
    assert 100 * pe["rel_div_norm"] <= pg["rel_div_norm"]
    assert 100 * pe["rel_div_norm"] <= pi["rel_div_norm"]
    assert pe["L_dat"] <= 2 * pg["L_dat"]


@pytest.mark.slow
def test_divergence_weight_trades_data_fit(desk_runs):
    _, _, runs = desk_runs
    low, high = runs["pi", 0.01].metrics, runs["pi", 10.0].metrics
    assert high["L_div"] < low["L_div"]
    assert high["L_dat"] > low["L_dat"]


@pytest.mark.slow
def test_held_out_field_structure(desk_runs):
    ds, stats, runs = desk_runs
    ev = runs["pe", 0.0]
    P_out = stats.denormalize_P(ev.p_out)
    P_dat = stats.denormalize_P(ev.p_dat)
    near_boundary = 0
    for a, sample in enumerate(ds.test):
        assert sample.grain_id.max() > 0
        assert componentwise_peak(P_dat[a]) == (1, 1)
        assert componentwise_peak(P_out[a]) == (1, 1)
        near_boundary += error_peak_boundary_distance(ev.error_map[a], sample.grain_id) <= 2
    assert near_boundary >= 12
