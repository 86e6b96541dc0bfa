"""Classical comparison schemes: pilot-based estimation, ZF precoding, antenna
selection, continuous position search, fixed arrays and scalar CSI quantization."""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .channel import (SLOT_STREAM, PathSet, Scenario, draw_path_responses, instantaneous_channel,
                      make_environment, substream)
from .dataset import DatasetView, channel_at, sample_path_set
from .e2e import first_spaced_set, measurement_rounds, spacing_violated, sum_rate

BASELINE_STREAM = 11
METHODS = ("zf-perfect", "fixed-zf", "fixed-zf-est", "as-zf", "as-zf-est", "as-zf-perfect", "gradient-perfect")


class RankDeficient(ValueError):
    pass


@dataclass
class BaselineResult:
    method: str
    positions: np.ndarray  # (N, 2)
    precoder: np.ndarray  # (N, K)
    sum_rate: float
    rates: np.ndarray
    interference: float
    mse: float | None = None
    extra: dict = field(default_factory=dict)


# -- estimation -------------------------------------------------------------------

def dft_pilot(n: int, length: int, max_power: float) -> np.ndarray:
    """First N rows (and L columns) of a DFT matrix, every column at energy P_max.

    Rows are mutually orthogonal when L >= N.
    """
    size = max(n, length)
    f = np.exp(-2j * np.pi * np.outer(np.arange(size), np.arange(size)) / size)[:n, :length]
    return f * math.sqrt(max_power / n)


def block_pilot(block: np.ndarray, rounds: int) -> np.ndarray:
    n, length = block.shape
    x = np.zeros((n * rounds, length * rounds), dtype=complex)
    for r in range(rounds):
        x[r * n:(r + 1) * n, r * length:(r + 1) * length] = block
    return x


def observe(h_stacked: np.ndarray, pilot: np.ndarray, noise_power: float, rng) -> np.ndarray:
    """Conjugated receptions ``z_k = y_k^H = X^H h_k + n_k``, shape (Z L, K)."""
    z = pilot.conj().T @ h_stacked
    if noise_power > 0:
        z = z + math.sqrt(noise_power / 2) * (rng.standard_normal(z.shape) + 1j * rng.standard_normal(z.shape))
    return z


def ls_lmmse_estimate(z: np.ndarray, pilot: np.ndarray, noise_power: float, kind: str = "lmmse",
                      prior_cov: np.ndarray | None = None, block: tuple | None = None) -> np.ndarray:
    """Estimate stacked channels (N Z, K) from conjugated receptions ``z`` (Z L, K).

    LS works round by round on the ``block`` = (N, L) sub-pilots; LMMSE uses the
    whole stacked prior covariance (N Z, N Z).
    """
    a = pilot.conj().T  # (ZL, NZ)
    if kind == "ls":
        n, length = block if block is not None else pilot.shape
        if length < n:
            raise RankDeficient(f"LS needs L >= N per round (L={length}, N={n}); use the LMMSE estimator")
        rounds = pilot.shape[0] // n
        out = np.empty((pilot.shape[0], z.shape[1]), dtype=complex)
        for r in range(rounds):
            xr = pilot[r * n:(r + 1) * n, r * length:(r + 1) * length]
            gram = xr @ xr.conj().T
            if np.linalg.cond(gram) > 1e12:
                raise RankDeficient("singular pilot Gram matrix; use the LMMSE estimator")
            out[r * n:(r + 1) * n] = np.linalg.solve(gram, xr @ z[r * length:(r + 1) * length])
        return out
    if kind != "lmmse":
        raise ValueError(f"unknown estimator {kind!r}")
    if prior_cov is None:
        raise ValueError("LMMSE needs a prior covariance")
    s = a @ prior_cov @ a.conj().T + noise_power * np.eye(a.shape[0])
    return prior_cov @ a.conj().T @ np.linalg.solve(s, z)


def sample_covariance(h: np.ndarray) -> np.ndarray:
    """Zero-mean covariance pooled over samples and users; ``h`` is (S, n, K)."""
    v = np.moveaxis(h, 2, 1).reshape(-1, h.shape[1])
    return v.T @ v.conj() / len(v)


def unstack(h_stacked: np.ndarray, index: np.ndarray, m: int) -> np.ndarray:
    """Average repeated probes back onto the M measurement points."""
    out = np.zeros((m, h_stacked.shape[1]), dtype=complex)
    count = np.zeros(m)
    np.add.at(out, index, h_stacked)
    np.add.at(count, index, 1)
    return out / count[:, None]


# -- precoding and quantization ------------------------------------------------------

def zf_precoder(h: np.ndarray, max_power: float) -> np.ndarray:
    """Zero-forcing ``H (H^H H)^-1`` with unit-norm columns and power P_max / K each."""
    n, k = h.shape
    if k > n:
        raise RankDeficient(f"ZF needs K <= N (K={k}, N={n})")
    gram = h.conj().T @ h
    if np.linalg.matrix_rank(h) < k or np.linalg.cond(gram) > 1e14:
        raise RankDeficient("channel matrix is rank deficient")
    v = h @ np.linalg.inv(gram)
    v = v / np.linalg.norm(v, axis=0, keepdims=True)
    return v * math.sqrt(max_power / k)


def zf_or_mrt(h: np.ndarray, max_power: float) -> np.ndarray:
    """ZF, or matched filtering with equal power when ``h`` is rank deficient
    (coarsely quantized estimates can collapse two users onto one direction)."""
    try:
        return zf_precoder(h, max_power)
    except RankDeficient:
        norms = np.linalg.norm(h, axis=0, keepdims=True)
        return h / np.where(norms > 0, norms, 1.0) * math.sqrt(max_power / h.shape[1])


def zf_sum_rate(h: np.ndarray, max_power: float, noise_power: float) -> float:
    try:
        v = zf_precoder(h, max_power)
    except RankDeficient:
        return -np.inf
    return sum_rate(h, v, noise_power)[0]


def max_interference(h: np.ndarray, v: np.ndarray) -> float:
    g = np.abs(h.conj().T @ v)
    np.fill_diagonal(g, 0.0)
    return float(g.max()) if g.size > 1 else 0.0


def quantize_dequantize_csi(h: np.ndarray, bits_per_user: int) -> np.ndarray:
    """Uniform scalar quantization of each user's column of ``h`` (n, K).

    The budget is split evenly over the user's 2n real components; each
    component uses 2^b levels over [-r, r] with r the user's largest |Re| or
    |Im| and is restored to its cell midpoint. The range r itself is assumed
    to be known at the receiver.
    """
    n = h.shape[0]
    b = bits_per_user // (2 * n)
    if b < 1:
        raise ValueError(f"{bits_per_user} bits cannot give 1 bit to each of {2 * n} real components")
    levels = 2 ** b
    out = np.empty_like(h, dtype=complex)
    for k in range(h.shape[1]):
        col = h[:, k]
        r = max(np.abs(col.real).max(), np.abs(col.imag).max())
        if r == 0:
            out[:, k] = 0
            continue
        step = 2 * r / levels

        def q(x):
            idx = np.clip(np.floor((x + r) / step), 0, levels - 1)
            return -r + (idx + 0.5) * step

        out[:, k] = q(col.real) + 1j * q(col.imag)
    return out


# -- layouts ------------------------------------------------------------------------

def fixed_array_layout(n: int, wavelength: float, region_size) -> np.ndarray:
    """Uniform linear array along x at lambda/2, centered in the region."""
    span = (n - 1) * wavelength / 2
    sx, sz = region_size
    if span > sx + 1e-12:
        raise ValueError(f"{n} antennas at lambda/2 need {span:.4g} m but the region is {sx:.4g} m wide")
    x = sx / 2 + (np.arange(n) - (n - 1) / 2) * wavelength / 2
    return np.stack([x, np.full(n, sz / 2)], axis=1)


def greedy_antenna_selection(h: np.ndarray, n: int, points: np.ndarray, wavelength: float,
                             max_power: float, noise_power: float, refine: bool = True) -> np.ndarray:
    """Pick ``n`` of the candidate rows of ``h`` (G, K) greedily by ZF sum rate.

    While fewer than K antennas are chosen, ZF is undefined and the log-det
    capacity of the chosen rows ranks candidates instead. Candidates closer than
    lambda/2 to a chosen one are skipped, as are candidates after which no
    spaced completion to ``n`` exists; ties go to the lower index. With
    ``refine`` a single-swap local search polishes the greedy set.
    Returns sorted candidate indices.
    """
    g, k = h.shape
    if n > g:
        raise ValueError(f"cannot select {n} of {g} candidates")
    d = np.linalg.norm(points[:, None] - points[None], axis=-1)
    far = d >= wavelength / 2 * (1 - 1e-9)
    snr = max_power / noise_power

    def score(sel):
        hs = h[list(sel)]
        if len(sel) >= k:
            return zf_sum_rate(hs, max_power, noise_power)
        # capacity proxy, shifted below any ZF value so it only ranks partial sets
        return float(np.linalg.slogdet(np.eye(len(sel)) + snr / k * hs @ hs.conj().T)[1] / math.log(2))

    def completable(sel):
        need = n - len(sel)
        rest = [c for c in range(g) if c not in sel and all(far[c, s] for s in sel)]
        return need == 0 or first_spaced_set(rest, need, far) is not None

    chosen: list[int] = []
    while len(chosen) < n:
        best, best_val = None, -np.inf
        for c in range(g):
            if c in chosen or not all(far[c, s] for s in chosen) or not completable(chosen + [c]):
                continue
            val = score(chosen + [c])
            if best is None or val > best_val + 1e-12:
                best, best_val = c, val
        if best is None:
            raise ValueError(f"no spacing-feasible set of {n} candidates")
        chosen.append(best)

    if refine and len(chosen) >= k:
        current = score(chosen)
        improved = True
        while improved:
            improved = False
            for i, c_out in enumerate(list(chosen)):
                rest = chosen[:i] + chosen[i + 1:]
                for c in range(g):
                    if c in chosen or not all(far[c, s] for s in rest):
                        continue
                    val = score(rest + [c])
                    if val > current + 1e-12:
                        chosen, current, improved = rest + [c], val, True
                        break
                if improved:
                    break
    return np.array(sorted(chosen))


def exhaustive_antenna_selection(h, n, points, wavelength, max_power, noise_power):
    """Best spacing-feasible subset by brute force; returns (indices, rate)."""
    d = np.linalg.norm(points[:, None] - points[None], axis=-1)
    best, best_val = None, -np.inf
    for sel in itertools.combinations(range(len(points)), n):
        if any(d[a, b] < wavelength / 2 * (1 - 1e-9) for a, b in itertools.combinations(sel, 2)):
            continue
        val = zf_sum_rate(h[list(sel)], max_power, noise_power)
        if val > best_val:
            best, best_val = np.array(sel), val
    return best, best_val


def project_layout(pos: np.ndarray, region_size, wavelength: float, iters: int = 200) -> np.ndarray:
    """Clip into the region and push pairs apart until all are >= lambda/2 (best effort)."""
    lo = np.zeros(2)
    hi = np.asarray(region_size, dtype=float)
    p = np.clip(pos.astype(float).copy(), lo, hi)
    dmin = wavelength / 2
    for _ in range(iters):
        moved = False
        for i, j in itertools.combinations(range(len(p)), 2):
            diff = p[j] - p[i]
            dist = np.linalg.norm(diff)
            if dist < dmin * (1 - 1e-9):
                u = diff / dist if dist > 0 else np.array([1.0, 0.0])
                shift = (dmin - dist) / 2 * u * (1 + 1e-6)
                p[i] -= shift
                p[j] += shift
                moved = True
        p = np.clip(p, lo, hi)
        if not moved:
            break
    return p


def gradient_position_search(path_set: PathSet, n: int, region_size, wavelength: float, max_power: float,
                             noise_power: float, steps: int = 60, step_size: float | None = None,
                             init: np.ndarray | None = None, restarts: int = 1, rng=None):
    """Projected gradient ascent on the ZF sum rate over continuous positions.

    Gradients are central differences of the field-response channel; each step
    backtracks until the projected point does not lower the objective. The best
    feasible iterate over all restarts is returned with its best-so-far history.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    step_size = wavelength / 4 if step_size is None else step_size
    fd = wavelength * 1e-5

    def f(pos):
        if spacing_violated(pos, wavelength):
            return -np.inf
        return zf_sum_rate(instantaneous_channel(pos, path_set), max_power, noise_power)

    def grad(pos):
        g = np.zeros_like(pos)
        for idx in np.ndindex(pos.shape):
            e = np.zeros_like(pos)
            e[idx] = fd
            fp = zf_sum_rate(instantaneous_channel(pos + e, path_set), max_power, noise_power)
            fm = zf_sum_rate(instantaneous_channel(pos - e, path_set), max_power, noise_power)
            g[idx] = (fp - fm) / (2 * fd) if np.isfinite(fp) and np.isfinite(fm) else 0.0
        return g

    starts = []
    if init is not None:
        starts.append(np.asarray(init, dtype=float))
    else:
        try:
            starts.append(fixed_array_layout(n, wavelength, region_size))
        except ValueError:
            pass
    while len(starts) < max(restarts, 1):
        starts.append(rng.random((n, 2)) * np.asarray(region_size))

    best_pos, best_val, history = None, -np.inf, []
    for start in starts:
        pos = project_layout(start, region_size, wavelength)
        val = f(pos)
        if val > best_val:
            best_pos, best_val = pos.copy(), val
        history.append(best_val)
        for _ in range(steps):
            g = grad(pos)
            gn = np.linalg.norm(g)
            if gn == 0:
                break
            alpha = step_size / gn
            for _ in range(12):
                cand = project_layout(pos + alpha * g, region_size, wavelength)
                cval = f(cand)
                if cval >= val:
                    pos, val = cand, cval
                    break
                alpha /= 2
            if val > best_val:
                best_pos, best_val = pos.copy(), val
            history.append(best_val)
    return best_pos, best_val, np.array(history)


# -- dataset-level runners ------------------------------------------------------------

def _format_positions(pos: np.ndarray) -> str:
    return ";".join(f"{x:.6g}:{z:.6g}" for x, z in pos)


def result_row(method: str, sample: int, res: BaselineResult, sweep_variable: str = "", sweep_value="",
               wavelength: float = 0.1, bits: str = "") -> dict:
    row = {"method": method, "sweep_variable": sweep_variable, "sweep_value": sweep_value, "sample": sample,
           "sum_rate": res.sum_rate}
    for k, r in enumerate(res.rates):
        row[f"rate_u{k}"] = float(r)
    row.update({"interference": res.interference,
                "spacing_violation": int(spacing_violated(res.positions, wavelength)),
                "positions": _format_positions(res.positions), "bits": bits})
    return row


def _finish(method, pos, h_true, v, sc: Scenario, mse=None):
    total, rates = sum_rate(h_true, v, sc.noise_power)
    return BaselineResult(method, pos, v, total, rates, max_interference(h_true, v), mse)


class BaselineRunner:
    """Evaluates one baseline over a dataset view.

    ``prior_view`` supplies the training channels for LMMSE sample covariances.
    """

    def __init__(self, method: str, scenario: Scenario, bits: int = 10, pilot_length: int = 8,
                 prior_view: DatasetView | None = None, seed: int = 0, prior_samples: int = 512):
        if method not in METHODS:
            raise ValueError(f"unknown baseline {method!r}; choose one of: {', '.join(METHODS)}")
        self.method, self.sc, self.bits, self.seed = method, scenario, bits, seed
        self.pilot_length = pilot_length
        sc = scenario
        self.env = make_environment(sc)
        self.meas_points = sc.measurement_grid.points
        self.m = len(self.meas_points)
        self.ula = None
        if method in ("zf-perfect", "fixed-zf", "fixed-zf-est"):
            self.ula = fixed_array_layout(sc.num_mas, sc.wavelength, sc.region_size)
        needs_prior = method in ("fixed-zf", "fixed-zf-est", "as-zf", "as-zf-est")
        if needs_prior:
            if prior_view is None or len(prior_view) == 0:
                raise ValueError(f"{method} needs training channels for the LMMSE prior")
            idx = prior_view.indices[:prior_samples]
            if method.startswith("fixed"):
                self.pilot = dft_pilot(sc.num_mas, pilot_length, sc.max_power)
                self.probe = np.arange(sc.num_mas)
                h = np.stack([channel_at(prior_view.header, int(i), self.ula, self.env) for i in idx])
            else:
                n = min(sc.num_mas, self.m)
                self.probe = measurement_rounds(self.m, n)
                z = len(self.probe) // n
                self.pilot = block_pilot(dft_pilot(n, pilot_length, sc.max_power), z)
                h = prior_view.dataset.h_meas[idx][:, self.probe, :]
            self.prior = sample_covariance(h)

    def _estimate(self, h_probe_true: np.ndarray, rng, quantize: bool):
        z = observe(h_probe_true[self.probe], self.pilot, self.sc.noise_power, rng)
        est = ls_lmmse_estimate(z, self.pilot, self.sc.noise_power, "lmmse", self.prior)
        if self.method.startswith("as"):
            est = unstack(est, self.probe, self.m)
        if quantize:
            est = quantize_dequantize_csi(est, self.bits)
        return est

    def run_sample(self, view: DatasetView, local: int) -> BaselineResult:
        sc = self.sc
        index = int(view.indices[local])
        rng = substream(self.seed, BASELINE_STREAM, index)
        meth = self.method
        if self.ula is not None:
            h_true = channel_at(view.header, index, self.ula, self.env)
            if meth == "zf-perfect":
                h_use, mse = h_true, None
            else:
                h_use = self._estimate(h_true, rng, quantize=meth == "fixed-zf")
                mse = float(np.mean(np.abs(h_use - h_true) ** 2))
            return _finish(meth, self.ula, h_true, zf_or_mrt(h_use, sc.max_power), sc, mse)
        if meth.startswith("as"):
            h_meas = view.dataset.h_meas[index]
            if meth == "as-zf-perfect":
                h_use, mse = h_meas, None
            else:
                h_use = self._estimate(h_meas, rng, quantize=meth == "as-zf")
                mse = float(np.mean(np.abs(h_use - h_meas) ** 2))
            n = min(sc.num_mas, self.m)
            sel = greedy_antenna_selection(h_use, n, self.meas_points, sc.wavelength, sc.max_power, sc.noise_power)
            return _finish(meth, self.meas_points[sel], h_meas[sel], zf_or_mrt(h_use[sel], sc.max_power), sc, mse)
        # gradient-perfect
        ps = _path_set(view, index, self.env)
        pos, _, _ = gradient_position_search(ps, sc.num_mas, sc.region_size, sc.wavelength, sc.max_power,
                                             sc.noise_power, rng=rng)
        h_true = channel_at(view.header, index, pos, self.env)
        return _finish(meth, pos, h_true, zf_precoder(h_true, sc.max_power), sc)

    def run(self, view: DatasetView, limit: int | None = None, sweep_variable: str = "", sweep_value=""):
        n = len(view) if limit is None else min(limit, len(view))
        rows = []
        for i in range(n):
            res = self.run_sample(view, i)
            rows.append(result_row(self.method, int(view.indices[i]), res, sweep_variable, sweep_value,
                                   self.sc.wavelength))
        return rows


def _path_set(view: DatasetView, index: int, env):
    hdr = view.header
    ps = sample_path_set(hdr, index, env)
    if hdr.regime == "statistical":
        # freeze this slot's path responses into a single-receive-path equivalent
        episode, slot = divmod(index, hdr.slots_per_episode)
        psi = draw_path_responses(ps, substream(hdr.seed, SLOT_STREAM, episode, slot))
        prm = psi[:, :, None].astype(complex)
        kr = np.zeros((ps.num_users, 1, 3))
        return PathSet(ps.kappa_t, kr, prm, ps.user_positions)
    return ps
