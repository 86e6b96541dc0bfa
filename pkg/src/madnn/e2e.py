"""End-to-end pilot / feedback / antenna-selection / precoding network.

Stages, per forward pass over a batch of channel samples:

1. pilots: each user observes ``y_k = h_k^H X + e_k`` over Z rounds of L symbols
2. feedback: a per-user MLP maps ``[Re y_k, Im y_k]`` to B bits (hard sign, STE)
3. selection: a CNN on the stacked bits gives G logits -> temperature softmax ->
   N-hot mask (straight-through identity gradient)
4. precoding: a head on the same CNN features, the bits and the mask emits a
   G x K grid precoder, masked and scaled to total power P_max

Complex values are carried as separate real and imaginary tensors.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .channel import Scenario
from .nn import F
from .nn.tensor import Tensor

LN2 = math.log(2.0)


class InfeasibleSelection(ValueError):
    """Not enough mutually spaced candidates for the requested antenna count."""


@dataclass
class ModelConfig:
    feedback_bits: int = 10
    pilot_length: int = 8
    encoder_hidden: tuple = (64, 32)
    trunk_channels: tuple = (16, 32, 16)
    trunk_features: int = 128
    position_hidden: int = 64
    precoder_hidden: int = 128
    temperature: float = 1.0
    csi_mode: str = "bits"  # "bits" or "perfect" (true measurement CSI, no pilots/feedback)
    selector: str = "instantaneous"  # or "statistical"
    stat_d_model: int = 64
    stat_heads: int = 4
    stat_layers: int = 2
    stat_ff: int = 128
    stat_positional: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if self.csi_mode not in ("bits", "perfect"):
            raise ValueError(f"unknown csi_mode {self.csi_mode!r}")
        if self.selector not in ("instantaneous", "statistical"):
            raise ValueError(f"unknown selector {self.selector!r}")
        if self.stat_d_model % self.stat_heads:
            raise ValueError("stat_d_model must be divisible by stat_heads")
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.trunk_channels = tuple(self.trunk_channels)


# -- numpy reference formulas -------------------------------------------------

def sum_rate(h: np.ndarray, v: np.ndarray, noise_power: float):
    """Sum rate and per-user rates for channel ``h`` (N, K) and precoder ``v`` (N, K)."""
    if noise_power <= 0:
        raise ValueError("noise power must be positive")
    g = np.abs(h.conj().T @ v) ** 2  # g[k, j] = |h_k^H v_j|^2
    sig = np.diag(g)
    interf = g.sum(axis=1) - sig
    rates = np.log2(1.0 + sig / (interf + noise_power))
    return float(rates.sum()), rates


def distance_penalty(positions: np.ndarray, wavelength: float) -> float:
    """Sum over pairs of ``max(0, lambda/2 - |r_i - r_j|)^2``."""
    pos = np.asarray(positions, dtype=float)
    d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    iu = np.triu_indices(len(pos), 1)
    return float(np.sum(np.maximum(0.0, wavelength / 2 - d[iu]) ** 2))


def spacing_violated(positions: np.ndarray, wavelength: float) -> bool:
    pos = np.asarray(positions, dtype=float)
    if len(pos) < 2:
        return False
    d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1)
    iu = np.triu_indices(len(pos), 1)
    return bool(np.any(d[iu] < wavelength / 2 * (1 - 1e-9)))


def greedy_feasible_mask(p: np.ndarray, n: int, points: np.ndarray, wavelength: float) -> np.ndarray:
    """Walk candidates by decreasing probability, skipping ones closer than lambda/2 to a pick.

    When the walk runs out of candidates it backtracks to the latest pick that
    still has an alternative, so the result is the first spaced N-set in
    probability order. It equals the plain walk whenever that succeeds.
    """
    d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=-1)
    far = d >= wavelength / 2 * (1 - 1e-9)
    out = np.zeros_like(p, dtype=np.float64)
    for row, prow in zip(out.reshape(-1, p.shape[-1]), p.reshape(-1, p.shape[-1])):
        chosen = first_spaced_set(np.argsort(-prow, kind="stable"), n, far)
        if chosen is None:
            raise InfeasibleSelection(f"fewer than N={n} mutually spaced candidates")
        row[chosen] = 1.0
    return out


def first_spaced_set(order, n, far):
    """First ``n``-subset of ``order`` (depth-first, in order) whose pairs are all ``far``; None if none."""
    stack = [0]  # next position in ``order`` to try at each depth
    chosen = []
    while stack:
        i = stack[-1]
        if len(chosen) == n:
            return chosen
        # not enough candidates left to finish this branch
        if i >= len(order) or len(order) - i < n - len(chosen):
            stack.pop()
            if chosen:
                chosen.pop()
            continue
        stack[-1] = i + 1
        g = order[i]
        if all(far[g, c] for c in chosen):
            chosen.append(g)
            stack.append(i + 1)
    return None


def measurement_rounds(m: int, n: int) -> np.ndarray:
    """Measurement-point index for each of the Z*N probe slots.

    Rounds take consecutive blocks of N points; an incomplete final round
    re-probes the last N points. If M < N the points are repeated cyclically.
    """
    z = max(1, math.ceil(m / n))
    if m < n:
        return np.arange(n) % m
    idx = [np.arange(r * n, (r + 1) * n) for r in range(z - 1)]
    idx.append(np.arange(m - n, m))
    return np.concatenate(idx)


def pilot_block_mask(n: int, z: int, length: int) -> np.ndarray:
    """Block-diagonal 0/1 support: N x L blocks on the diagonal of a (N Z) x (Z L) matrix."""
    mask = np.zeros((n * z, z * length))
    for r in range(z):
        mask[r * n:(r + 1) * n, r * length:(r + 1) * length] = 1.0
    return mask


# -- network stages -------------------------------------------------------------

class PilotLayer(nn.Module):
    """Trainable block-diagonal pilot matrix X whose columns carry energy P_max."""

    def __init__(self, n: int, z: int, length: int, max_power: float, rng: np.random.Generator):
        super().__init__()
        self.n, self.z, self.length, self.max_power = n, z, length, max_power
        self.register_buffer("mask", pilot_block_mask(n, z, length))
        std = math.sqrt(math.sqrt(max_power / n) / 2)
        self.xr = nn.Parameter(rng.normal(0, std, self.mask.shape))
        self.xi = nn.Parameter(rng.normal(0, std, self.mask.shape))
        self.project()

    def project(self):
        """Zero the off-block entries and scale each column to energy P_max."""
        self.xr.data *= self.mask
        self.xi.data *= self.mask
        energy = np.sum(self.xr.data ** 2 + self.xi.data ** 2, axis=0)
        scale = np.sqrt(self.max_power / energy)
        self.xr.data *= scale
        self.xi.data *= scale

    def matrix(self) -> np.ndarray:
        return self.xr.data + 1j * self.xi.data

    def check_projected(self, tol: float = 1e-9):
        x = self.matrix()
        if np.any(x[self.mask == 0] != 0):
            raise ValueError("pilot matrix violates its block-diagonal support")
        if np.max(np.abs(np.sum(np.abs(x) ** 2, axis=0) - self.max_power)) > tol:
            raise ValueError("pilot columns are not normalized to P_max")

    def forward(self, h_stacked: np.ndarray, noise_power: float, rng: np.random.Generator | None):
        """Received pilots ``[Re y, Im y]`` of shape (batch, K, 2 Z L)."""
        hr = np.swapaxes(h_stacked.real, 1, 2)  # (b, K, NZ)
        hi = np.swapaxes(h_stacked.imag, 1, 2)
        yr = hr @ self.xr + hi @ self.xi
        yi = hr @ self.xi - hi @ self.xr
        if rng is not None and noise_power > 0:
            std = math.sqrt(noise_power / 2)
            yr = yr + rng.normal(0, std, yr.shape)
            yi = yi + rng.normal(0, std, yi.shape)
        return F.concat([yr, yi], axis=-1)


class UserEncoder(nn.Module):
    """Dense layers with batch norm after each, ReLU on hidden layers, sign output."""

    def __init__(self, n_in: int, hidden: tuple, bits: int, rng: np.random.Generator):
        super().__init__()
        sizes = (n_in,) + tuple(hidden) + (bits,)
        self.n_in = n_in
        self.dense = nn.ModuleList([nn.Linear(a, b, rng) for a, b in zip(sizes[:-1], sizes[1:])])
        self.norms = nn.ModuleList([nn.BatchNorm(b) for b in sizes[1:]])

    def pre_activation(self, y):
        if y.shape[-1] != self.n_in:
            raise ValueError(f"encoder expects {self.n_in} inputs, got {y.shape[-1]}")
        last = len(self.dense) - 1
        for i, (lin, bn) in enumerate(zip(self.dense, self.norms)):
            y = bn(lin(y))
            if i < last:
                y = F.relu(y)
        return y

    def forward(self, y, omega: float):
        return F.sign_ste(self.pre_activation(y), omega)


class Trunk(nn.Module):
    """Three conv1d(k=3, pad=1) + batch norm + ReLU stages, flatten, dense + batch norm + ReLU."""

    def __init__(self, length: int, channels: tuple, features: int, rng: np.random.Generator):
        super().__init__()
        chans = (1,) + tuple(channels)
        self.convs = nn.ModuleList([nn.Conv1d(a, b, rng) for a, b in zip(chans[:-1], chans[1:])])
        self.cnorms = nn.ModuleList([nn.BatchNorm(b, feature_axis=1) for b in chans[1:]])
        self.fc = nn.Linear(chans[-1] * length, features, rng)
        self.fnorm = nn.BatchNorm(features)

    def forward(self, x):
        b = x.shape[0]
        h = x.reshape(b, 1, -1)
        for conv, bn in zip(self.convs, self.cnorms):
            h = F.relu(bn(conv(h)))
        return F.relu(self.fnorm(self.fc(h.reshape(b, -1))))


class MLPHead(nn.Module):
    def __init__(self, n_in: int, hidden: int, n_out: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = nn.Linear(n_in, hidden, rng)
        self.fc2 = nn.Linear(hidden, n_out, rng)

    def forward(self, x):
        return self.fc2(F.relu(self.fc1(x)))


class StatEncoder(nn.Module):
    """Self-attention encoder over a feedback history with a learnable CLS token.

    Each slot's K x B bits form one token. The CLS output goes through a
    dense head to G logits.
    """

    def __init__(self, token_dim: int, d_model: int, heads: int, layers: int, d_ff: int,
                 head_hidden: int, g: int, rng: np.random.Generator, positional: bool = False):
        super().__init__()
        self.token_dim, self.d_model, self.positional = token_dim, d_model, positional
        self.embed = nn.Linear(token_dim, d_model, rng)
        self.cls = nn.Parameter(rng.normal(0, 0.02, d_model))
        self.layers = nn.ModuleList([nn.EncoderLayer(d_model, heads, d_ff, rng) for _ in range(layers)])
        self.head = MLPHead(d_model, head_hidden, g, rng)

    def features(self, history):
        """CLS output for history of shape (episodes, T, token_dim)."""
        e, t, dim = history.shape
        if dim != self.token_dim:
            raise ValueError(f"token length {dim} does not match embedding input {self.token_dim}")
        tok = self.embed(history)
        if self.positional:
            tok = tok + nn.sinusoidal_encoding(t, self.d_model)
        cls = F.broadcast_to(self.cls.reshape(1, 1, -1), (e, 1, self.d_model))
        x = F.concat([cls, tok], axis=1)
        for layer in self.layers:
            x = layer(x)
        return x[:, 0, :]

    def forward(self, history):
        return self.head(self.features(history))


# -- forward trace ----------------------------------------------------------------

@dataclass
class ForwardTrace:
    ybar: Tensor | None
    bits: Tensor
    probs: Tensor
    mask: Tensor  # straight-through mask, forward values exactly 0/1
    hard_mask: np.ndarray  # (batch, G)
    positions: np.ndarray  # (batch, N, 2)
    v_re: Tensor  # (batch, G, K), zero outside the selected rows
    v_im: Tensor
    rates: Tensor  # (batch, K)
    penalty: Tensor  # (batch,)
    violations: np.ndarray = field(default=None)  # (batch,) bool

    @property
    def sum_rates(self) -> np.ndarray:
        return self.rates.data.sum(axis=1)

    def precoder(self, b: int) -> np.ndarray:
        """Selected-row precoder V (N, K) for sample ``b``."""
        rows = np.flatnonzero(self.hard_mask[b])
        return self.v_re.data[b, rows] + 1j * self.v_im.data[b, rows]

    def bits_array(self) -> np.ndarray:
        return self.bits.data


def rates_tensor(h_grid: np.ndarray, v_re, v_im, noise_power: float):
    """Per-user rates (batch, K) with ``h`` constant (batch, G, K) and V as tensors."""
    hr = np.swapaxes(h_grid.real, 1, 2)  # (b, K, G)
    hi = np.swapaxes(h_grid.imag, 1, 2)
    a_re = hr @ v_re + hi @ v_im  # [k, j] = Re h_k^H v_j
    a_im = hr @ v_im - hi @ v_re
    power = F.square(a_re) + F.square(a_im)
    k = power.shape[-1]
    eye = np.eye(k)
    sig = (power * eye).sum(axis=-1)
    interf = power.sum(axis=-1) - sig
    return F.log(1.0 + sig / (interf + noise_power)) * (1.0 / LN2)


def power_normalize(v, max_power: float, axes=None):
    """Scale ``v`` so its squared norm over ``axes`` (all but batch by default) is ``max_power``."""
    if axes is None:
        axes = tuple(range(1, v.ndim))
    sq = F.square(v).sum(axis=axes, keepdims=True)
    if np.any(sq.data <= 0):
        raise ValueError("cannot normalize a zero precoder")
    return v * (math.sqrt(max_power) / F.sqrt(sq))


class E2EModel(nn.Module):
    def __init__(self, scenario: Scenario, cfg: ModelConfig):
        super().__init__()
        object.__setattr__(self, "scenario", scenario)
        object.__setattr__(self, "cfg", cfg)
        rng = np.random.default_rng([cfg.seed, 7])
        sc = scenario
        self.n, self.k = sc.num_mas, sc.num_users
        grid, meas = sc.grid, sc.measurement_grid
        object.__setattr__(self, "grid_points", grid.points)
        self.g, self.m = len(grid), len(meas)
        if self.n > self.g:
            raise ValueError(f"cannot place {self.n} antennas on {self.g} grid points")
        self.z = max(1, math.ceil(self.m / self.n))
        object.__setattr__(self, "probe_index", measurement_rounds(self.m, self.n))
        d = np.linalg.norm(grid.points[:, None] - grid.points[None], axis=-1)
        object.__setattr__(self, "hinge", np.maximum(0.0, sc.wavelength / 2 - d) ** 2 * (1 - np.eye(self.g)))

        b = cfg.feedback_bits
        if cfg.csi_mode == "bits":
            self.pilot = PilotLayer(self.n, self.z, cfg.pilot_length, sc.max_power, rng)
            self.encoders = nn.ModuleList([UserEncoder(2 * self.z * cfg.pilot_length, cfg.encoder_hidden, b, rng)
                                           for _ in range(self.k)])
            self.feedback_len = self.k * b
        else:
            self.pilot = None
            self.feedback_len = 2 * self.m * self.k
        self.trunk = Trunk(self.feedback_len, cfg.trunk_channels, cfg.trunk_features, rng)
        if cfg.selector == "instantaneous":
            self.position_head = MLPHead(cfg.trunk_features, cfg.position_hidden, self.g, rng)
        else:
            self.stat_encoder = StatEncoder(self.feedback_len, cfg.stat_d_model, cfg.stat_heads, cfg.stat_layers,
                                            cfg.stat_ff, cfg.position_hidden, self.g, rng, cfg.stat_positional)
        self.precoder_head = MLPHead(cfg.trunk_features + self.feedback_len + self.g, cfg.precoder_hidden,
                                     2 * self.g * self.k, rng)

    # parameter groups
    def position_parameters(self):
        """Parameters of the antenna-position network (frozen in precoder-only epochs)."""
        if self.cfg.selector == "instantaneous":
            return self.trunk.parameters() + self.position_head.parameters()
        return self.stat_encoder.parameters()

    def project(self):
        if self.pilot is not None:
            self.pilot.project()

    # stages
    def feedback(self, h_meas: np.ndarray, omega: float, noise_rng, random_bits_rng=None, pilot_noise=None):
        """Flattened bits (batch, K B) and received pilots, or raw CSI features in perfect mode."""
        b = h_meas.shape[0]
        if self.pilot is None:
            feat = np.concatenate([h_meas.real.reshape(b, -1), h_meas.imag.reshape(b, -1)], axis=1)
            return None, Tensor(feat)
        h_stacked = h_meas[:, self.probe_index, :]
        noise = self.scenario.noise_power if pilot_noise is None else pilot_noise
        ybar = self.pilot(h_stacked, noise, noise_rng)
        bits = F.stack([enc(ybar[:, k, :], omega) for k, enc in enumerate(self.encoders)], axis=1)
        if random_bits_rng is not None:
            bits = Tensor(random_bits_rng.choice([-1.0, 1.0], size=bits.shape))
        return ybar, bits.reshape(b, -1)

    def select(self, logits, feasibility: bool):
        tau = self.cfg.temperature
        probs = F.softmax(logits, tau, axis=-1)
        if feasibility:
            hard = greedy_feasible_mask(probs.data, self.n, self.grid_points, self.scenario.wavelength)
        else:
            hard = F.top_n_mask(probs.data, self.n)
        return probs, F.straight_through(probs, hard), hard

    def positions_of(self, hard: np.ndarray) -> np.ndarray:
        rows = [np.flatnonzero(r) for r in hard]
        return np.stack([self.grid_points[r] for r in rows])

    def forward(self, h_grid: np.ndarray, h_meas: np.ndarray, omega: float = 1.0, noise_rng=None,
                feasibility: bool = False, random_bits_rng=None, slots: int = 1,
                pilot_noise: float | None = None) -> ForwardTrace:
        """Run all stages. With the statistical selector, the batch holds whole
        episodes of ``slots`` consecutive samples and one layout is chosen per episode."""
        nb = h_grid.shape[0]
        ybar, q = self.feedback(h_meas, omega, noise_rng, random_bits_rng, pilot_noise)
        feats = self.trunk(q)
        if self.cfg.selector == "instantaneous":
            probs, mask, hard = self.select(self.position_head(feats), feasibility)
        else:
            if nb % slots:
                raise ValueError("batch is not a whole number of episodes")
            e = nb // slots
            probs_e, mask_e, hard_e = self.select(self.stat_encoder(q.reshape(e, slots, -1)), feasibility)
            probs = probs_e
            mask = F.broadcast_to(mask_e.reshape(e, 1, self.g), (e, slots, self.g)).reshape(nb, self.g)
            hard = np.repeat(hard_e, slots, axis=0)
        out = self.precoder_head(F.concat([feats, q, mask], axis=1)).reshape(nb, 2, self.g, self.k)
        masked = out * mask.reshape(nb, 1, self.g, 1)
        v = power_normalize(masked, self.scenario.max_power)
        v_re, v_im = v[:, 0], v[:, 1]
        rates = rates_tensor(h_grid, v_re, v_im, self.scenario.noise_power)
        penalty = ((mask @ self.hinge) * mask).sum(axis=-1) * 0.5
        positions = self.positions_of(hard)
        viol = np.array([spacing_violated(p, self.scenario.wavelength) for p in positions])
        return ForwardTrace(ybar, q, probs, mask, hard, positions, v_re, v_im, rates, penalty, viol)


def loss_total(trace: ForwardTrace, distance_weight: float):
    """Negative mean sum rate plus ``distance_weight`` times the mean spacing penalty."""
    loss = -trace.rates.sum(axis=1).mean()
    if distance_weight:
        loss = loss + distance_weight * trace.penalty.mean()
    return loss
