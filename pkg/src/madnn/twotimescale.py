"""Statistical-CSI antenna positioning: one layout per episode of feedback slots,
precoding per slot, judged by the ergodic sum rate."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .baselines import RankDeficient, zf_precoder
from .channel import PathSet, Scenario, statistical_channel_draw
from .e2e import E2EModel, StatEncoder, greedy_feasible_mask, power_normalize, rates_tensor, sum_rate
from .nn import F, no_grad


@dataclass
class FeedbackHistory:
    bits: np.ndarray  # (T, K, B), entries +-1
    episode: int = 0

    def __post_init__(self):
        if self.bits.ndim != 3:
            raise ValueError("feedback history must be T x K x B")
        if not np.all(np.abs(self.bits) == 1):
            raise ValueError("feedback bits must be +-1")


@dataclass
class ErgodicResult:
    mean: float
    stderr: float
    n: int
    rates: np.ndarray


def extract_stat_features(q_all, encoder: StatEncoder):
    """CLS feature for one history (T, K, B) or a batch (E, T, K, B)."""
    q = q_all.bits if isinstance(q_all, FeedbackHistory) else np.asarray(getattr(q_all, "data", q_all))
    if q.ndim == 3:
        q = q[None]
    if q.shape[1] < 1:
        raise ValueError("history needs at least one slot")
    e, t = q.shape[:2]
    return encoder.features(q.reshape(e, t, -1))


def stat_select_positions(features, encoder: StatEncoder, tau: float, n: int, points: np.ndarray,
                          wavelength: float = 0.0, feasibility: bool = False):
    """Head logits -> temperature softmax -> N-hot mask; returns (p, straight-through mask, positions)."""
    probs = F.softmax(encoder.head(features), tau, axis=-1)
    if feasibility:
        hard = greedy_feasible_mask(probs.data, n, points, wavelength)
    else:
        hard = F.top_n_mask(probs.data, n)
    mask = F.straight_through(probs, hard)
    positions = np.stack([points[np.flatnonzero(r)] for r in hard])
    return probs, mask, positions


def ergodic_eval(layout: np.ndarray, scenario: Scenario, path_set: PathSet, num_draws: int, precoding_fn,
                 rng: np.random.Generator) -> ErgodicResult:
    """Monte-Carlo mean sum rate at a fixed layout over statistical channel draws.

    ``precoding_fn(h)`` maps the (N, K) draw to a precoder; each draw is a slot.
    """
    if num_draws < 1:
        raise ValueError("num_draws must be >= 1")
    h = statistical_channel_draw(layout, path_set, rng, size=num_draws)
    rates = np.array([sum_rate(hd, precoding_fn(hd), scenario.noise_power)[0] for hd in h])
    stderr = float(rates.std(ddof=1) / math.sqrt(num_draws)) if num_draws > 1 else float("nan")
    return ErgodicResult(float(rates.mean()), stderr, num_draws, rates)


def zf_perfect_fn(scenario: Scenario):
    """ZF precoding on the exact per-draw channel (falls back to MRT if rank deficient)."""
    def fn(h):
        try:
            return zf_precoder(h, scenario.max_power)
        except RankDeficient:
            return h * math.sqrt(scenario.max_power) / np.linalg.norm(h)
    return fn


def learned_layout(model: E2EModel, h_grid: np.ndarray, h_meas: np.ndarray, feasibility: bool = False,
                   noise_rng=None) -> np.ndarray:
    """Layout mask (G,) chosen by a statistical model from one episode of channels (T, ...)."""
    with no_grad():
        model.eval()
        trace = model(h_grid, h_meas, noise_rng=noise_rng, feasibility=feasibility, slots=len(h_grid))
    return trace.hard_mask[0]


def learned_rates_at_layout(model: E2EModel, h_grid: np.ndarray, h_meas: np.ndarray, mask: np.ndarray,
                            noise_rng=None) -> np.ndarray:
    """Per-slot sum rates of the learned feedback + precoder when the layout is forced to ``mask``."""
    nb = len(h_grid)
    with no_grad():
        model.eval()
        _, q = model.feedback(h_meas, 1.0, noise_rng)
        feats = model.trunk(q)
        m = np.broadcast_to(mask.astype(float), (nb, model.g))
        out = model.precoder_head(F.concat([feats, q, m], axis=1)).reshape(nb, 2, model.g, model.k)
        v = power_normalize(out * m.reshape(nb, 1, model.g, 1), model.scenario.max_power)
        rates = rates_tensor(h_grid, v[:, 0], v[:, 1], model.scenario.noise_power)
    return rates.data.sum(axis=1)
