"""Epoch loop with alternating precoder-only / joint updates, slope and
learning-rate annealing, validation-gated checkpoints and a CSV metric log."""
from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .channel import Scenario
from .dataset import DatasetView, load_batches
from .e2e import E2EModel, ModelConfig, loss_total
from .nn import Adam, load_arrays, load_module_state, module_state, no_grad, save_arrays

LOG_COLUMNS = ["epoch", "mode", "train_loss", "train_rate", "val_rate", "spacing_violation_frac", "omega", "eta",
               "best_val_rate"]
PRECODER_ONLY, JOINT = "P", "J"

# substream tags
ORDER_STREAM, NOISE_STREAM, VAL_STREAM, ABLATION_STREAM = 21, 22, 23, 24


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 32  # samples, or episodes in the statistical regime
    lr: float = 1e-3
    lr_decay: float = 0.99
    lr_floor: float = 1e-6
    omega0: float = 1.0
    omega_growth: float = 1.01
    omega_max: float = 10.0
    distance_weight: float = 1.0  # 1/m^2
    alternation_period: int = 2
    feasibility: bool = False
    regime: str = "instantaneous"
    random_bits: bool = False
    val_batch: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1 or self.alternation_period < 1:
            raise ValueError("batch_size and alternation_period must be >= 1")
        if self.lr <= 0 or self.omega0 <= 0:
            raise ValueError("lr and omega0 must be positive")
        if self.regime not in ("instantaneous", "statistical"):
            raise ValueError(f"unknown regime {self.regime!r}")


@dataclass
class EpochMetrics:
    loss: float
    rate: float
    violation_frac: float
    penalty: float
    batches: int
    max_pilot_dev: float = 0.0
    max_power_dev: float = 0.0
    losses: list = field(default_factory=list)
    rates: list = field(default_factory=list)
    penalties: list = field(default_factory=list)


@dataclass
class TrainResult:
    best_rate: float
    best_epoch: int
    log: list
    best_path: Path | None
    last_path: Path | None
    max_pilot_dev: float
    max_power_dev: float


def anneal_update(omega: float, eta: float, epoch: int | None = None, cfg: TrainConfig | None = None):
    """One epoch's update of the sign-STE slope and the learning rate."""
    if omega <= 0 or eta <= 0:
        raise ValueError("omega and eta must be positive")
    cfg = cfg or TrainConfig()
    return min(cfg.omega_growth * omega, cfg.omega_max), max(cfg.lr_decay * eta, cfg.lr_floor)


def mode_for_epoch(epoch: int, period: int = 2) -> str:
    """Blocks of ``period`` epochs alternate, starting with the position net frozen."""
    return PRECODER_ONLY if (epoch // period) % 2 == 0 else JOINT


def parameter_hash(params) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(np.ascontiguousarray(p.data).tobytes())
    return h.hexdigest()


def _slots(view: DatasetView, cfg: TrainConfig) -> int:
    return view.header.slots_per_episode if cfg.regime == "statistical" else 1


def _pilot_dev(model: E2EModel) -> float:
    if model.pilot is None:
        return 0.0
    x = model.pilot.matrix()
    if np.any(x[model.pilot.mask == 0] != 0):
        return float("inf")
    return float(np.max(np.abs(np.sum(np.abs(x) ** 2, axis=0) - model.pilot.max_power)))


def _power_dev(trace, max_power: float) -> float:
    p = np.sum(trace.v_re.data ** 2 + trace.v_im.data ** 2, axis=(1, 2))
    return float(np.max(np.abs(p - max_power)))


def train_epoch(model: E2EModel, opt: Adam, view: DatasetView, cfg: TrainConfig, mode: str, omega: float,
                epoch: int) -> EpochMetrics:
    """One pass over ``view``; in precoder-only mode the position net is not updated."""
    model.train()
    slots = _slots(view, cfg)
    frozen = {id(p) for p in model.position_parameters()} if mode == PRECODER_ONLY else set()
    trainable = [p for p in model.parameters() if id(p) not in frozen]
    order_rng = np.random.default_rng([cfg.seed, ORDER_STREAM, epoch])
    m = EpochMetrics(0.0, 0.0, 0.0, 0.0, 0)
    viol, n_samples = 0, 0
    for b, batch in enumerate(_batches(view, cfg, order_rng, slots)):
        noise = np.random.default_rng([cfg.seed, NOISE_STREAM, epoch, b])
        ablate = np.random.default_rng([cfg.seed, ABLATION_STREAM, epoch, b]) if cfg.random_bits else None
        trace = model(batch.h_grid, batch.h_meas, omega, noise, cfg.feasibility, ablate, slots)
        loss = loss_total(trace, cfg.distance_weight)
        if not np.isfinite(loss.data):
            raise NonFiniteLoss(f"non-finite loss {loss.data} at epoch {epoch}, batch {b} (mode {mode}, "
                                f"mean rate {np.mean(trace.sum_rates)}, max |logit prob| {np.max(trace.probs.data)})")
        model.zero_grad()
        loss.backward()
        opt.step(trainable)
        model.project()
        m.max_pilot_dev = max(m.max_pilot_dev, _pilot_dev(model))
        m.max_power_dev = max(m.max_power_dev, _power_dev(trace, model.scenario.max_power))
        m.losses.append(float(loss.data))
        m.rates.append(float(np.mean(trace.sum_rates)))
        m.penalties.append(float(np.mean(trace.penalty.data)))
        viol += int(np.sum(trace.violations))
        n_samples += len(trace.violations)
    if not m.losses:
        raise ValueError("training view yields no usable batch")
    m.batches = len(m.losses)
    m.loss, m.rate, m.penalty = float(np.mean(m.losses)), float(np.mean(m.rates)), float(np.mean(m.penalties))
    m.violation_frac = viol / n_samples
    return m


def _batches(view, cfg, rng, slots):
    for batch in load_batches(view, cfg.batch_size, rng, group=slots):
        # batch statistics need two samples
        if len(batch.indices) >= 2:
            yield batch


def validate(model: E2EModel, view: DatasetView, cfg: TrainConfig, pilot_noise: float | None = None,
             return_trace: bool = False):
    """Mean validation sum rate at a fixed noise seed (eval-mode batch norm).

    ``pilot_noise`` overrides the pilot-phase noise power (the rate formula keeps
    the scenario's noise power).

    Returns (mean rate, spacing-violation fraction), plus per-sample rates and
    positions when ``return_trace`` is set.
    """
    if len(view) == 0:
        raise ValueError("empty validation set")
    model.eval()
    slots = _slots(view, cfg)
    rng = np.random.default_rng([cfg.seed, VAL_STREAM])
    ablate = np.random.default_rng([cfg.seed, VAL_STREAM, ABLATION_STREAM]) if cfg.random_bits else None
    chunk = max(slots, (cfg.val_batch // slots) * slots)
    rates, viol, extra = [], [], {"rates_u": [], "positions": [], "bits": [], "power": []}
    with no_grad():
        for start in range(0, len(view), chunk):
            h_grid, h_meas = view.arrays(slice(start, start + chunk))
            trace = model(h_grid, h_meas, 1.0, rng, cfg.feasibility, ablate, slots, pilot_noise)
            rates.append(trace.sum_rates)
            viol.append(trace.violations)
            if return_trace:
                extra["rates_u"].append(trace.rates.data)
                extra["positions"].append(trace.positions)
                extra["bits"].append(trace.bits.data)
                extra["power"].append(np.sum(trace.v_re.data ** 2 + trace.v_im.data ** 2, axis=(1, 2)))
    rates = np.concatenate(rates)
    viol = np.concatenate(viol)
    if return_trace:
        extra = {k: np.concatenate(v) if v else None for k, v in extra.items()}
        extra["rates"] = rates
        return float(np.mean(rates)), float(np.mean(viol)), extra
    return float(np.mean(rates)), float(np.mean(viol))


# -- checkpoints ------------------------------------------------------------------------

def save_checkpoint(path, model: E2EModel, meta: dict, with_optimizer: bool = False):
    meta = dict(meta)
    meta["scenario"] = model.scenario.to_dict()
    meta["model"] = asdict(model.cfg)
    save_arrays(path, module_state(model, with_optimizer), meta)


def load_checkpoint(path):
    """Rebuild the model stored at ``path``; returns (model, meta, raw state)."""
    state, meta = load_arrays(path)
    model = E2EModel(Scenario.from_dict(meta["scenario"]), ModelConfig(**meta["model"]))
    load_module_state(model, state)
    return model, meta, state


def run_algorithm1(model: E2EModel, train_view: DatasetView, val_view: DatasetView, cfg: TrainConfig,
                   out_dir=None, resume: bool = False, log_name: str = "metrics.csv",
                   on_epoch=None, meta_extra: dict | None = None) -> TrainResult:
    """Full training loop. Writes ``best.ckpt``, ``last.ckpt`` and the metric log to ``out_dir``.

    With ``resume`` the loop restarts after the epoch stored in ``last.ckpt``.
    ``meta_extra`` is stored verbatim in every checkpoint's metadata.
    """
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    opt = Adam(model.parameters(), lr=cfg.lr)
    omega, eta = cfg.omega0, cfg.lr
    best_rate, best_epoch, start = -math.inf, -1, 0
    log = []
    if resume:
        if out is None or not (out / "last.ckpt").exists():
            raise FileNotFoundError("nothing to resume: last.ckpt missing")
        state, meta = load_arrays(out / "last.ckpt")
        load_module_state(model, state)
        omega, eta = meta["omega_next"], meta["eta_next"]
        best_rate, best_epoch, start = meta["best_rate"], meta["best_epoch"], meta["epoch"] + 1
        if (out / log_name).exists():
            with open(out / log_name) as fh:
                log = [r for r in csv.DictReader(fh) if int(r["epoch"]) < start]
    max_pilot, max_power = _pilot_dev(model), 0.0
    for epoch in range(start, cfg.epochs):
        mode = mode_for_epoch(epoch, cfg.alternation_period)
        opt.lr = eta
        m = train_epoch(model, opt, train_view, cfg, mode, omega, epoch)
        max_pilot, max_power = max(max_pilot, m.max_pilot_dev), max(max_power, m.max_power_dev)
        val_rate, val_viol = validate(model, val_view, cfg)
        improved = val_rate > best_rate
        if improved:
            best_rate, best_epoch = val_rate, epoch
        row = {"epoch": epoch, "mode": mode, "train_loss": repr(m.loss), "train_rate": repr(m.rate),
               "val_rate": repr(val_rate), "spacing_violation_frac": repr(val_viol), "omega": repr(omega),
               "eta": repr(eta), "best_val_rate": repr(best_rate)}
        log.append(row)
        omega_next, eta_next = anneal_update(omega, eta, epoch, cfg)
        meta = {"epoch": epoch, "best_rate": best_rate, "best_epoch": best_epoch, "val_rate": val_rate,
                "omega": omega, "eta": eta, "omega_next": omega_next, "eta_next": eta_next,
                "train": asdict(cfg), **(meta_extra or {})}
        if out is not None:
            if improved:
                save_checkpoint(out / "best.ckpt", model, dict(meta, kind="best"))
            save_checkpoint(out / "last.ckpt", model, dict(meta, kind="last"), with_optimizer=True)
            _write_log(out / log_name, log)
        if on_epoch is not None:
            on_epoch(epoch, m, row)
        omega, eta = omega_next, eta_next
    return TrainResult(best_rate, best_epoch, log, out / "best.ckpt" if out else None,
                       out / "last.ckpt" if out else None, max_pilot, max_power)


def _write_log(path, rows):
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    tmp.replace(path)
