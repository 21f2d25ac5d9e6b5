"""Training and evaluation loops, configuration files and metrics output."""

from __future__ import annotations

import ast
import csv
import dataclasses
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from spikebp import data as dio
from spikebp.dynamics import RefractoryConfig
from spikebp.learning import (
    InactiveOutputError,
    OptimizerState,
    apply_updates,
    backward,
    loss,
    one_hot,
    output_activity,
)
from spikebp.network import (
    LayerParams,
    NetworkTopology,
    copy_params,
    forward_sample,
    init_params,
    load_checkpoint,
    predict_label,
    save_checkpoint,
)
from spikebp.regularizers import RegConfig, epoch_schedule, exp_reg_cost

log = logging.getLogger(__name__)

METRICS_HEADER = [
    "epoch", "presentation_us", "train_loss", "test_accuracy", "skipped",
    "dead_neurons", "rate_hz", "mean_vth",
]
TIMING_HEADER = ["epoch", "wall_seconds"]

# usual hyperparameter ranges; values outside only warn
USUAL_RANGES = {
    "alpha": (3.0, 10.0),
    "eta_w": (0.002, 0.004),
    "lam": (0.002, 0.04),
    "rho": (0.00004, 0.0002),
}


class NumericFailure(RuntimeError):
    """Training produced a non-finite loss or update."""


@dataclass
class TrainConfig:
    dataset: str = "mnist"
    hidden: tuple = (100,)
    mus: Optional[tuple] = None  # one per non-input layer; None: -0.4 first hidden, -1.0 output, 0 otherwise
    sigma: float = 0.5
    gamma: float = 1.0
    alpha: float = 10.0
    floor_alpha: float = 0.1
    eta_w: float = 0.004
    eta_th: Optional[float] = None  # None: 0.1*eta_w for SGD, eta_w for ADAM
    lam: float = 0.002
    beta: float = 10.0
    rho: float = 0.00004
    reg_output: bool = True  # exponential regularizer on the output layer as well
    epoch_decay: float = math.exp(-1.0 / 35.0)
    tau_mp: Optional[float] = None  # None: 20 ms for MNIST, 200 ms for N-MNIST
    t_ref: int = 1000
    w_d0: float = 0.0
    optimizer: str = "sgd"
    epochs: int = 20
    train_duration: int = 50_000
    eval_duration: int = 1_000_000
    warmup_duration: int = 200_000
    warmup: Optional[bool] = None  # None: only for nets with two or more hidden layers
    total_rate: float = 5000.0
    window: int = 300
    silent_error: bool = True  # train on samples whose output layer stayed silent (target error -y)
    permute: bool = True
    train_limit: Optional[int] = None
    test_limit: Optional[int] = None
    eval_every: int = 1  # 0: evaluate after the last epoch only
    checkpoint_every: int = 5
    seed: int = 1
    data_seed: int = 2
    perm_seed: int = 3
    eval_seed: int = 4
    n_jobs: int = 1

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.mus is not None:
            self.mus = tuple(float(m) for m in self.mus)
        if self.dataset not in ("mnist", "nmnist"):
            raise ValueError(f"unknown dataset {self.dataset!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        for key, (lo, hi) in USUAL_RANGES.items():
            val = getattr(self, key)
            if not lo <= val <= hi:
                log.warning("%s=%g is outside the usual range [%g, %g]", key, val, lo, hi)

    @property
    def n_inputs(self) -> int:
        return 784 if self.dataset == "mnist" else dio.NMNIST_INPUTS

    @property
    def layer_mus(self) -> tuple:
        if self.mus is not None:
            if len(self.mus) != len(self.hidden) + 1:
                raise ValueError("mus needs one entry per hidden layer plus the output layer")
            return self.mus
        return tuple(-0.4 if i == 0 else 0.0 for i in range(len(self.hidden))) + (-1.0,)

    @property
    def tau(self) -> float:
        if self.tau_mp is not None:
            return float(self.tau_mp)
        return 20_000.0 if self.dataset == "mnist" else 200_000.0

    @property
    def threshold_lr(self) -> float:
        if self.eta_th is not None:
            return self.eta_th
        return 0.1 * self.eta_w if self.optimizer == "sgd" else self.eta_w

    @property
    def use_warmup(self) -> bool:
        return len(self.hidden) >= 2 if self.warmup is None else self.warmup

    def topology(self) -> NetworkTopology:
        return NetworkTopology(
            sizes=(self.n_inputs,) + self.hidden + (10,),
            mus=self.layer_mus,
            sigma=self.sigma,
            gamma=self.gamma,
            tau_mp=self.tau,
            refractory=RefractoryConfig(self.t_ref, self.w_d0),
        )

    def reg(self) -> RegConfig:
        return RegConfig(lam=self.lam, beta=self.beta, rho=self.rho, epoch_decay=self.epoch_decay, output=self.reg_output)

    def presentation(self, epoch: int) -> int:
        return self.warmup_duration if (epoch == 0 and self.use_warmup) else self.train_duration


# ---------------------------------------------------------------------------
# flat key = value config files


def _format_value(v) -> str:
    return repr(v)


def write_config(cfg: TrainConfig, path) -> None:
    lines = [f"{f.name} = {_format_value(getattr(cfg, f.name))}" for f in dataclasses.fields(cfg)]
    Path(path).write_text("\n".join(lines) + "\n")


def parse_config_text(text: str) -> dict:
    out = {}
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {n}: expected 'key = value', got {raw!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in names:
            raise ValueError(f"line {n}: unknown key {key!r}")
        try:
            out[key] = ast.literal_eval(val)
        except (ValueError, SyntaxError):
            out[key] = val
    return out


def read_config(path, **overrides) -> TrainConfig:
    values = parse_config_text(Path(path).read_text())
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


# ---------------------------------------------------------------------------
# per-sample input streams


class MnistStreams:
    """Poisson-encoded (optionally permuted) MNIST images."""

    def __init__(self, images: dio.ImageSet, cfg: TrainConfig, train: bool):
        self.labels = images.labels
        pix = images.images
        if cfg.permute:
            pix = dio.permute(pix, dio.make_permutation(cfg.perm_seed, pix.shape[1]))
        self.pixels = pix
        self.rate = cfg.total_rate
        self.seed = cfg.data_seed if train else cfg.eval_seed
        self.eval_duration = cfg.eval_duration

    def __len__(self):
        return self.labels.shape[0]

    def train_stream(self, i: int, epoch: int, duration: int):
        enc = dio.EncoderConfig(self.rate, duration, self.seed)
        return dio.poisson_encode(self.pixels[i], enc, i, epoch), duration

    def eval_stream(self, i: int):
        enc = dio.EncoderConfig(self.rate, self.eval_duration, self.seed)
        return dio.poisson_encode(self.pixels[i], enc, i, 0), self.eval_duration


class NmnistStreams:
    """Random 300-event training windows; full recordings for evaluation."""

    def __init__(self, samples: Sequence[dio.EventSample], cfg: TrainConfig, train: bool):
        self.samples = list(samples)
        self.labels = np.array([s.label for s in self.samples], dtype=np.int64)
        self.window = cfg.window
        self.seed = cfg.data_seed

    def __len__(self):
        return len(self.samples)

    def train_stream(self, i: int, epoch: int, duration: int):
        rng = np.random.default_rng([self.seed, i, epoch])
        win = dio.flatten_channels(dio.pick_window(self.samples[i].events, self.window, rng))
        return win, int(win["time"][-1]) + 1

    def eval_stream(self, i: int):
        s = self.samples[i]
        return dio.flatten_channels(s.events), max(s.total_duration, 1)


def build_streams(cfg: TrainConfig, data_dir) -> tuple:
    if cfg.dataset == "mnist":
        tr = dio.load_mnist(data_dir, "train").subset(cfg.train_limit)
        te = dio.load_mnist(data_dir, "test").subset(cfg.test_limit)
        return MnistStreams(tr, cfg, True), MnistStreams(te, cfg, False)
    tr = dio.load_nmnist(data_dir, "train", cfg.train_limit, cfg.data_seed)
    te = dio.load_nmnist(data_dir, "test", cfg.test_limit, cfg.eval_seed)
    return NmnistStreams(tr, cfg, True), NmnistStreams(te, cfg, False)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray  # (10, 10), rows = true label
    degenerate: int

    @property
    def n(self) -> int:
        return int(self.confusion.sum())


def _eval_range(params, streams, idx):
    out = []
    for i in idx:
        events, dur = streams.eval_stream(i)
        counts = forward_sample(params, events, dur, train_mode=False).output_counts
        out.append((predict_label(counts), not np.any(counts)))
    return out


def evaluate_accuracy(params: Sequence[LayerParams], streams, n_jobs: int = 1) -> EvalResult:
    """Classify every sample of ``streams`` by output spike counts."""
    n = len(streams)
    if params[-1].n_neurons != 10 or params[0].n_synapses != _input_dim(streams):
        raise ValueError("checkpoint topology does not match the dataset")
    if n_jobs > 1:
        chunks = np.array_split(np.arange(n), n_jobs)
        with ThreadPoolExecutor(n_jobs) as ex:
            parts = list(ex.map(lambda c: _eval_range(params, streams, c), chunks))
        results = [r for part in parts for r in part]
    else:
        results = _eval_range(params, streams, range(n))
    conf = np.zeros((10, 10), dtype=np.int64)
    for (pred, _), y in zip(results, streams.labels):
        conf[y, pred] += 1
    degenerate = sum(d for _, d in results)
    acc = float(np.trace(conf)) / max(n, 1)
    return EvalResult(acc, conf, degenerate)


def _input_dim(streams) -> int:
    return streams.pixels.shape[1] if isinstance(streams, MnistStreams) else dio.NMNIST_INPUTS


# ---------------------------------------------------------------------------
# training


@dataclass
class EpochStats:
    loss_sum: float = 0.0
    n: int = 0
    skipped: int = 0
    counts: list = field(default_factory=list)


def train_sample(
    params, events, duration, label, opt, eta_w, eta_th, rho, reg: RegConfig, stats: EpochStats,
    silent_error: bool = False,
):
    rec = forward_sample(params, events, duration, train_mode=True, threshold_rho=rho)
    for l, lr in enumerate(rec.layers):
        stats.counts[l] += lr.spike_counts
    y = one_hot(label, params[-1].n_neurons)
    a, degenerate = output_activity(rec.output_counts)
    reg_layers = params if reg.output else params[:-1]
    reg_cost = sum(float(np.sum(exp_reg_cost(p.weights, reg))) for p in reg_layers) if reg.lam > 0 else 0.0
    value = loss(a, y, reg_cost)
    if not math.isfinite(value):
        raise NumericFailure(f"non-finite loss {value}")
    stats.loss_sum += value
    stats.n += 1
    bundle = None
    if silent_error or not degenerate:
        try:
            bundle = backward(rec, params, y, silent_error=silent_error)
        except InactiveOutputError:
            bundle = None
    if bundle is None:
        stats.skipped += 1
    try:
        apply_updates(params, bundle, opt, eta_w, eta_th, reg)
    except FloatingPointError as exc:
        raise NumericFailure(str(exc)) from exc
    return value


def _write_rows(path, header, rows, append):
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(header)
        for r in rows:
            w.writerow(r)


def _fmt(x: float) -> str:
    return repr(float(x))


def train(
    cfg: TrainConfig,
    train_streams,
    test_streams,
    out_dir,
    params: Optional[list] = None,
    progress: bool = False,
) -> tuple[list[LayerParams], list[dict]]:
    """Run ``cfg.epochs`` epochs, writing metrics.csv, timing.csv and checkpoints to ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if len(train_streams) == 0:
        raise ValueError("empty training set")
    if params is None:
        params = init_params(cfg.topology(), cfg.alpha, cfg.seed, cfg.floor_alpha)
    write_config(cfg, out / "config.txt")
    save_checkpoint(out / "checkpoint.json", params, cfg.seed, {"epoch": 0})
    _write_rows(out / "metrics.csv", METRICS_HEADER, [], append=False)
    _write_rows(out / "timing.csv", TIMING_HEADER, [], append=False)

    reg = cfg.reg()
    opt = OptimizerState(cfg.optimizer)
    rows = []
    last_good = copy_params(params)
    n_hidden_layers = len(params) - 1
    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        eta_w, rho = epoch_schedule(cfg.eta_w, cfg.rho, epoch, reg)
        eta_th = cfg.threshold_lr * eta_w / cfg.eta_w
        dur = cfg.presentation(epoch)
        order = np.random.default_rng([cfg.data_seed, epoch, 7]).permutation(len(train_streams))
        stats = EpochStats(counts=[np.zeros(p.n_neurons, dtype=np.int64) for p in params])
        presented_us = 0
        try:
            for step, i in enumerate(order):
                events, d = train_streams.train_stream(int(i), epoch, dur)
                presented_us += d
                if events.shape[0] == 0:
                    stats.skipped += 1
                    continue
                train_sample(params, events, d, int(train_streams.labels[i]), opt, eta_w, eta_th, rho, reg, stats, cfg.silent_error)
                if progress and step % 5000 == 0:
                    log.info("epoch %d sample %d loss %.4f", epoch + 1, step, stats.loss_sum / max(stats.n, 1))
        except NumericFailure:
            save_checkpoint(out / "checkpoint.json", last_good, cfg.seed, {"epoch": epoch, "aborted": True})
            raise
        epoch_num = epoch + 1
        do_eval = (cfg.eval_every > 0 and epoch_num % cfg.eval_every == 0) or epoch_num == cfg.epochs
        acc = evaluate_accuracy(params, test_streams, cfg.n_jobs).accuracy if do_eval else None
        secs = max(presented_us, 1) * 1e-6
        rates = [c.sum() / (c.size * secs) for c in stats.counts]
        dead = int(sum(np.count_nonzero(c == 0) for c in stats.counts[:n_hidden_layers]))
        row = {
            "epoch": epoch_num,
            "presentation_us": dur,
            "train_loss": stats.loss_sum / max(stats.n, 1),
            "test_accuracy": acc,
            "skipped": stats.skipped,
            "dead_neurons": dead,
            "rate_hz": rates,
            "mean_vth": [float(p.thresholds.mean()) for p in params],
        }
        rows.append(row)
        _write_rows(out / "metrics.csv", METRICS_HEADER, [[
            epoch_num, dur, _fmt(row["train_loss"]), "" if acc is None else _fmt(acc), stats.skipped, dead,
            ";".join(_fmt(r) for r in rates), ";".join(_fmt(v) for v in row["mean_vth"]),
        ]], append=True)
        _write_rows(out / "timing.csv", TIMING_HEADER, [[epoch_num, f"{time.perf_counter() - t0:.3f}"]], append=True)
        log.info("epoch %d loss %.4f acc %s dead %d", epoch_num, row["train_loss"], acc, dead)
        last_good = copy_params(params)
        if cfg.checkpoint_every > 0 and epoch_num % cfg.checkpoint_every == 0:
            save_checkpoint(out / f"checkpoint_e{epoch_num:03d}.json", params, cfg.seed, {"epoch": epoch_num})
        save_checkpoint(out / "checkpoint.json", params, cfg.seed, {"epoch": epoch_num})
    return params, rows


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r["epoch"] = int(r["epoch"])
        r["presentation_us"] = int(r["presentation_us"])
        r["train_loss"] = float(r["train_loss"])
        r["test_accuracy"] = float(r["test_accuracy"]) if r["test_accuracy"] else None
        r["skipped"] = int(r["skipped"])
        r["dead_neurons"] = int(r["dead_neurons"])
        r["rate_hz"] = [float(v) for v in r["rate_hz"].split(";")]
        r["mean_vth"] = [float(v) for v in r["mean_vth"].split(";")]
    return rows


def trailing_accuracy(rows: Sequence[dict], window: int) -> Optional[float]:
    """Mean test accuracy over the last ``window`` evaluated epochs."""
    accs = [r["test_accuracy"] for r in rows if r["test_accuracy"] is not None]
    if not accs:
        return None
    return float(np.mean(accs[-window:]))


def evaluate_checkpoint(path, streams, n_jobs: int = 1) -> EvalResult:
    params, _ = load_checkpoint(path)
    return evaluate_accuracy(params, streams, n_jobs)
