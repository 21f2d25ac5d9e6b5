import math

import numpy as np
import pytest

from spikebp import data as dio
from spikebp import trainer as tr
from spikebp.network import load_checkpoint
from spikebp.trainer import (
    EpochStats,
    NumericFailure,
    TrainConfig,
    build_streams,
    evaluate_accuracy,
    parse_config_text,
    read_config,
    read_metrics,
    trailing_accuracy,
    train,
    write_config,
)


def small_cfg(**kw):
    base = dict(hidden=(12,), epochs=2, train_duration=20_000, eval_duration=50_000, checkpoint_every=1)
    base.update(kw)
    return TrainConfig(**base)


# configuration

def test_config_round_trip(tmp_path):
    cfg = small_cfg(mus=(-0.4, -1.0), optimizer="adam", tau_mp=15_000.0)
    write_config(cfg, tmp_path / "c.txt")
    assert read_config(tmp_path / "c.txt") == cfg


def test_config_overrides_and_comments(tmp_path):
    (tmp_path / "c.txt").write_text("# desk run\nepochs = 3  # short\n\nhidden = (50, 20)\ndataset = mnist\n")
    cfg = read_config(tmp_path / "c.txt", epochs=7, seed=None)
    assert (cfg.epochs, cfg.hidden, cfg.dataset, cfg.seed) == (7, (50, 20), "mnist", 1)


@pytest.mark.parametrize("text, msg", [("epochs 3", "key = value"), ("speed = 3", "unknown key")])
def test_config_parse_errors(text, msg):
    with pytest.raises(ValueError, match=msg):
        parse_config_text(text)


@pytest.mark.parametrize("kw", [dict(dataset="cifar"), dict(optimizer="rmsprop"), dict(epochs=-1)])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_out_of_range_value_warns(caplog):
    TrainConfig(alpha=20.0)
    assert "alpha" in caplog.text


def test_derived_settings():
    cfg = TrainConfig(hidden=(300, 300))
    assert cfg.layer_mus == (-0.4, 0.0, -1.0)
    assert cfg.use_warmup and cfg.presentation(0) == 200_000 and cfg.presentation(1) == 50_000
    assert TrainConfig().tau == 20_000.0 and TrainConfig(dataset="nmnist").tau == 200_000.0
    assert TrainConfig().n_inputs == 784 and TrainConfig(dataset="nmnist").n_inputs == 2312
    assert TrainConfig(eta_w=0.004).threshold_lr == pytest.approx(0.0004)
    assert TrainConfig(optimizer="adam", eta_w=0.002).threshold_lr == 0.002
    with pytest.raises(ValueError):
        _ = TrainConfig(mus=(-0.4,)).layer_mus


# streams

def test_mnist_streams(mnist_dir):
    train_s, test_s = build_streams(small_cfg(train_limit=10), mnist_dir)
    assert len(train_s) == 10 and len(test_s) == 30
    ev, d = train_s.train_stream(3, 0, 20_000)
    assert d == 20_000 and np.all(np.diff(ev["time"]) >= 0)
    ev2, _ = train_s.train_stream(3, 1, 20_000)
    assert not np.array_equal(ev, ev2)  # fresh presentation each epoch
    np.testing.assert_array_equal(test_s.eval_stream(0)[0], test_s.eval_stream(0)[0])


def test_permutation_shared_by_train_and_test(mnist_dir):
    train_s, test_s = build_streams(small_cfg(), mnist_dir)
    raw = dio.load_mnist(mnist_dir, "train").images
    perm = dio.make_permutation(3)
    np.testing.assert_array_equal(train_s.pixels, raw[:, perm])
    np.testing.assert_array_equal(test_s.pixels, dio.load_mnist(mnist_dir, "test").images[:, perm])


def test_nmnist_streams(tmp_path):
    rng = np.random.default_rng(0)
    for split in ("Train", "Test"):
        for digit in (1, 7):
            d = tmp_path / split / str(digit)
            d.mkdir(parents=True)
            t = np.sort(rng.integers(0, 100_000, 400))
            ev = np.zeros(400, dtype=[("time", "i8"), ("source", "i8"), ("channel", "i1")])
            ev["time"], ev["source"], ev["channel"] = t, rng.integers(0, 34 * 34, 400), rng.integers(0, 2, 400)
            (d / "0.bin").write_bytes(dio.encode_nmnist(ev))
    cfg = small_cfg(dataset="nmnist")
    train_s, test_s = build_streams(cfg, tmp_path)
    assert sorted(train_s.labels.tolist()) == [1, 7]
    win, d = train_s.train_stream(0, 0, 0)
    assert len(win) == 300 and win["time"][0] == 0 and d == win["time"][-1] + 1
    assert win["source"].max() < dio.NMNIST_INPUTS
    full, _ = test_s.eval_stream(0)
    assert len(full) == 400


# training

def test_train_writes_outputs(mnist_dir, tmp_path):
    cfg = small_cfg()
    train_s, test_s = build_streams(cfg, mnist_dir)
    params, rows = train(cfg, train_s, test_s, tmp_path / "run")
    out = tmp_path / "run"
    assert (out / "metrics.csv").read_text().splitlines()[0] == ",".join(tr.METRICS_HEADER)
    assert (out / "timing.csv").exists() and (out / "config.txt").exists()
    assert (out / "checkpoint_e001.json").exists() and (out / "checkpoint_e002.json").exists()
    back = read_metrics(out / "metrics.csv")
    assert [r["epoch"] for r in back] == [1, 2]
    for got, want in zip(back, rows):
        assert got["train_loss"] == want["train_loss"]
        assert got["test_accuracy"] == want["test_accuracy"]
        assert len(got["rate_hz"]) == 2
    loaded, meta = load_checkpoint(out / "checkpoint.json")
    assert meta["epoch"] == 2 and meta["seed"] == cfg.seed
    for a, b in zip(loaded, params):
        np.testing.assert_array_equal(a.weights, b.weights)


def test_training_is_deterministic(mnist_dir, tmp_path):
    cfg = small_cfg(train_limit=30, test_limit=10)
    for name in ("a", "b"):
        train_s, test_s = build_streams(cfg, mnist_dir)
        train(cfg, train_s, test_s, tmp_path / name)
    for f in ("checkpoint.json", "metrics.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_training_reduces_loss(mnist_dir, tmp_path):
    cfg = small_cfg(epochs=4, alpha=3.0, floor_alpha=1.0, eval_every=0)
    train_s, test_s = build_streams(cfg, mnist_dir)
    _, rows = train(cfg, train_s, test_s, tmp_path / "run")
    assert rows[-1]["train_loss"] < rows[0]["train_loss"]
    assert [r["test_accuracy"] is None for r in rows] == [True, True, True, False]


def test_zero_epochs_writes_initial_checkpoint(mnist_dir, tmp_path):
    cfg = small_cfg(epochs=0)
    train_s, test_s = build_streams(cfg, mnist_dir)
    _, rows = train(cfg, train_s, test_s, tmp_path / "run")
    assert rows == [] and load_checkpoint(tmp_path / "run" / "checkpoint.json")[1]["epoch"] == 0


def test_numeric_failure_keeps_last_good_checkpoint(mnist_dir, tmp_path, monkeypatch):
    cfg = small_cfg(epochs=1)
    train_s, test_s = build_streams(cfg, mnist_dir)

    def boom(*a, **k):
        raise FloatingPointError("non-finite parameter update")

    monkeypatch.setattr(tr, "apply_updates", boom)
    with pytest.raises(NumericFailure):
        train(cfg, train_s, test_s, tmp_path / "run")
    params, meta = load_checkpoint(tmp_path / "run" / "checkpoint.json")
    assert meta["aborted"] is True and meta["epoch"] == 0


def test_silent_output_counts_as_skipped(mnist_dir):
    cfg = small_cfg(alpha=10.0, silent_error=False, reg_output=False)
    train_s, _ = build_streams(cfg, mnist_dir)
    from spikebp.learning import OptimizerState
    from spikebp.network import init_params

    params = init_params(cfg.topology(), 10.0, 0)
    params[-1].thresholds[:] = 1e6  # nothing can reach the output threshold
    stats = EpochStats(counts=[np.zeros(p.n_neurons, dtype=np.int64) for p in params])
    ev, d = train_s.train_stream(0, 0, 20_000)
    reg_before = sum(float(np.sum(tr.exp_reg_cost(p.weights, cfg.reg()))) for p in params[:-1])
    value = tr.train_sample(params, ev, d, int(train_s.labels[0]), OptimizerState(), 0.004, 0.0004, 0.0, cfg.reg(), stats,
                            cfg.silent_error)
    assert stats.skipped == 1 and stats.n == 1
    assert value == pytest.approx(0.5 + reg_before, rel=1e-12)


def test_parallel_evaluation_matches_serial(mnist_dir):
    cfg = small_cfg()
    _, test_s = build_streams(cfg, mnist_dir)
    from spikebp.network import init_params

    params = init_params(cfg.topology(), cfg.alpha, 0)
    one = evaluate_accuracy(params, test_s, 1)
    three = evaluate_accuracy(params, test_s, 3)
    assert one.accuracy == three.accuracy
    np.testing.assert_array_equal(one.confusion, three.confusion)
    assert one.n == 30


def test_evaluation_rejects_wrong_topology(mnist_dir):
    cfg = small_cfg()
    _, test_s = build_streams(cfg, mnist_dir)
    from spikebp.network import init_params

    params = init_params(TrainConfig(dataset="nmnist", hidden=(5,)).topology(), 3.0, 0)
    with pytest.raises(ValueError, match="topology"):
        evaluate_accuracy(params, test_s)


def test_trailing_accuracy():
    rows = [{"test_accuracy": a} for a in (0.5, None, 0.7, 0.9)]
    assert trailing_accuracy(rows, 1) == 0.9
    assert trailing_accuracy(rows, 2) == pytest.approx(0.8)
    assert trailing_accuracy(rows, 10) == pytest.approx(0.7)
    assert trailing_accuracy([{"test_accuracy": None}], 3) is None
    assert math.isclose(trailing_accuracy(rows, 3), 0.7)
