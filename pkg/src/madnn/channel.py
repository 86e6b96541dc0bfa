"""Field-response multipath channels for a planar movable-antenna array.

Antenna positions are 2-vectors ``(x, z)`` in the array plane (meters). The BS
array plane is spanned by the global x and z axes and faces the +y half-space,
where users and scatterers live.

Path bookkeeping per user ``k``: transmit path 0 and receive path 0 are the
direct BS-user ray; the remaining paths go through scatterers close to the user.
The path-response matrix couples the LoS pair only through entry ``[0, 0]`` and
the NLoS transmit/receive paths through the full lower-right block.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

# substream tags for np.random.default_rng([seed, tag, ...])
ENV_STREAM = 0
SAMPLE_STREAM = 1
EPISODE_STREAM = 2
SLOT_STREAM = 3


def substream(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *map(int, keys)])


@dataclass(frozen=True)
class Scenario:
    """Geometry and link-budget parameters. All lengths in meters, powers in watts."""

    wavelength: float = 0.1
    num_users: int = 2
    num_mas: int = 4
    tx_paths: int = 3
    rx_paths: int = 3
    rician_factor: float = 10.0  # linear, LoS/NLoS power ratio
    region_size: tuple = (0.175, 0.025)  # (S_x, S_z) of the movable region
    grid_spacing: float = 0.025
    measurement_spacing: float = 0.05
    noise_power: float = 0.01
    max_power: float = 1.0
    bs_position: tuple = (50.0, 0.0, 10.0)
    area_x: tuple = (0.0, 100.0)
    area_y: tuple = (0.0, 100.0)
    area_z: tuple = (-5.0, 5.0)
    num_scatterers: int = 40
    rng_seed: int = 0

    def __post_init__(self):
        if self.wavelength <= 0:
            raise ValueError("wavelength must be positive")
        if self.num_users < 1 or self.num_mas < 1:
            raise ValueError("need at least one user and one antenna")
        if self.tx_paths < 1 or self.rx_paths < 1:
            raise ValueError("path counts must be >= 1")
        if min(self.region_size) <= 0:
            raise ValueError("region sizes must be positive")
        if self.noise_power <= 0 or self.max_power <= 0:
            raise ValueError("noise and max power must be positive")
        if self.rician_factor <= 0:
            raise ValueError("Rician factor must be positive")
        if self.grid_spacing > self.measurement_spacing:
            raise ValueError("grid spacing must not exceed measurement spacing")
        object.__setattr__(self, "region_size", tuple(float(v) for v in self.region_size))
        object.__setattr__(self, "bs_position", tuple(float(v) for v in self.bs_position))
        for name in ("area_x", "area_y", "area_z"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))

    @property
    def grid(self) -> "Grid":
        return make_grid(self.region_size, self.grid_spacing)

    @property
    def measurement_grid(self) -> "Grid":
        return make_grid(self.region_size, self.measurement_spacing)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        for key in ("region_size", "bs_position", "area_x", "area_y", "area_z"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Grid:
    points: np.ndarray  # (G, 2), row-major over (x index, z index)
    spacing: float
    dims: tuple  # (G_x, G_z)

    def __len__(self):
        return len(self.points)


def make_grid(region_size, spacing: float) -> Grid:
    gx = int(math.floor(region_size[0] / spacing + 1e-9)) + 1
    gz = int(math.floor(region_size[1] / spacing + 1e-9)) + 1
    ix, iz = np.meshgrid(np.arange(gx), np.arange(gz), indexing="ij")
    pts = np.stack([ix.ravel() * spacing, iz.ravel() * spacing], axis=1)
    return Grid(pts, float(spacing), (gx, gz))


@dataclass
class PathSet:
    """Per-user multipath description, stacked over users (equal path counts)."""

    kappa_t: np.ndarray  # (K, L_t, 2) rad/m
    kappa_r: np.ndarray  # (K, L_r, 3) rad/m
    prm: np.ndarray  # (K, L_t, L_r) complex path-response matrices
    user_positions: np.ndarray  # (K, 3) m
    power: np.ndarray = field(default=None)  # (K, L_t) transmit path-response powers

    def __post_init__(self):
        if self.prm.shape[1] != self.kappa_t.shape[1] or self.prm.shape[2] != self.kappa_r.shape[1]:
            raise ValueError(
                f"PRM shape {self.prm.shape[1:]} does not match path counts "
                f"({self.kappa_t.shape[1]}, {self.kappa_r.shape[1]})")
        if self.power is None:
            self.power = np.sum(np.abs(self.prm) ** 2, axis=2)
        if np.any(self.power < 0):
            raise ValueError("path powers must be non-negative")

    @property
    def num_users(self) -> int:
        return self.prm.shape[0]


@dataclass
class ChannelSample:
    h_grid: np.ndarray  # (G, K) complex
    h_meas: np.ndarray  # (M, K) complex
    path_set: PathSet | None = None
    slot: int = 0


# -- field responses ----------------------------------------------------------

def tx_wavevector(elevation, azimuth, wavelength: float) -> np.ndarray:
    el, az = np.asarray(elevation), np.asarray(azimuth)
    return 2 * np.pi / wavelength * np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az)], axis=-1)


def rx_wavevector(elevation, azimuth, wavelength: float) -> np.ndarray:
    el, az = np.asarray(elevation), np.asarray(azimuth)
    return 2 * np.pi / wavelength * np.stack(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)


def transmit_frv(position, tx_wavevectors) -> np.ndarray:
    """``exp(j a^T kappa_l)`` for each transmit path ``l``."""
    return np.exp(1j * (np.asarray(tx_wavevectors) @ np.asarray(position, dtype=float)))


def receive_frv(user_position, rx_wavevectors) -> np.ndarray:
    return np.exp(1j * (np.asarray(rx_wavevectors) @ np.asarray(user_position, dtype=float)))


def transmit_frm(positions, tx_wavevectors) -> np.ndarray:
    """(L_t, N) matrix whose n-th column is the transmit FRV at position n."""
    return np.exp(1j * (np.asarray(tx_wavevectors) @ np.asarray(positions, dtype=float).T))


def instantaneous_channel(positions, path_set: PathSet) -> np.ndarray:
    """Channel ``h_k = Q_k^H Sigma_k f_k`` at the given positions, shape (N, K)."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    out = np.empty((len(positions), path_set.num_users), dtype=complex)
    for k in range(path_set.num_users):
        q = transmit_frm(positions, path_set.kappa_t[k])
        f = receive_frv(path_set.user_positions[k], path_set.kappa_r[k])
        out[:, k] = q.conj().T @ (path_set.prm[k] @ f)
    return out


def draw_path_responses(path_set: PathSet, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """psi_k ~ CN(0, Diag(b_k)); shape (K, L_t) or (size, K, L_t)."""
    b = path_set.power
    if np.any(b < 0):
        raise ValueError("path powers must be non-negative")
    shape = b.shape if size is None else (size,) + b.shape
    z = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    return z * np.sqrt(b)


def channel_from_responses(positions, path_set: PathSet, psi: np.ndarray) -> np.ndarray:
    """``h_k = Q_k^H psi_k`` for psi of shape (K, L_t) or (S, K, L_t); returns (N, K) or (S, N, K)."""
    positions = np.atleast_2d(np.asarray(positions, dtype=float))
    # phases: (K, L_t, N)
    qh = np.exp(-1j * np.einsum("kld,nd->kln", path_set.kappa_t, positions))
    if psi.ndim == 2:
        return np.einsum("kln,kl->nk", qh, psi)
    return np.einsum("kln,skl->snk", qh, psi)


def statistical_channel_draw(positions, path_set: PathSet, rng: np.random.Generator, size: int | None = None):
    """One (or ``size``) draws of the statistical channel at ``positions``."""
    return channel_from_responses(positions, path_set, draw_path_responses(path_set, rng, size))


# -- scenario generation ------------------------------------------------------

def rician_scale(p_los: float, p_nlos: float, beta: float) -> tuple[float, float]:
    """Amplitude scalings giving LoS/NLoS power ratio ``beta`` at unchanged total power."""
    if p_los <= 0 or p_nlos <= 0 or beta <= 0:
        raise ValueError("Rician scaling needs positive powers and factor")
    total = p_los + p_nlos
    eta_los = math.sqrt(total / p_los * beta / (1.0 + beta))
    eta_nlos = math.sqrt(total / p_nlos / (1.0 + beta))
    return eta_los, eta_nlos


def _angles_tx(direction: np.ndarray):
    # array-plane frame: (x, z) in-plane, y along the boresight
    el = np.arcsin(np.clip(direction[..., 1], -1.0, 1.0))
    az = np.arctan2(direction[..., 2], direction[..., 0])
    return el, az


def _angles_rx(direction: np.ndarray):
    el = np.arcsin(np.clip(direction[..., 2], -1.0, 1.0))
    az = np.arctan2(direction[..., 1], direction[..., 0])
    return el, az


def _unit(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def _uniform_points(scenario: Scenario, rng, n):
    lo = np.array([scenario.area_x[0], scenario.area_y[0], scenario.area_z[0]])
    hi = np.array([scenario.area_x[1], scenario.area_y[1], scenario.area_z[1]])
    return lo + (hi - lo) * rng.random((n, 3))


def make_environment(scenario: Scenario) -> np.ndarray:
    """Fixed scatterer positions (num_scatterers, 3), drawn from the scenario seed.

    Scatterers keep 1 m clearance from the BS.
    """
    needed = max(scenario.tx_paths, scenario.rx_paths) - 1
    if scenario.num_scatterers < needed:
        raise ValueError(f"{scenario.num_scatterers} scatterers cannot serve {needed} NLoS paths per user")
    rng = substream(scenario.rng_seed, ENV_STREAM)
    bs = np.asarray(scenario.bs_position)
    pts = []
    for _ in range(1000):
        cand = _uniform_points(scenario, rng, scenario.num_scatterers)
        cand = cand[np.linalg.norm(cand - bs, axis=1) > 1.0]
        pts.extend(cand[: scenario.num_scatterers - len(pts)])
        if len(pts) == scenario.num_scatterers:
            return np.array(pts)
    raise ValueError("region too small for the requested scatterer count")


def draw_path_set(scenario: Scenario, scatterers: np.ndarray, rng: np.random.Generator) -> PathSet:
    """Place users, attach nearby scatterers and draw the path-response matrices."""
    K, lt, lr = scenario.num_users, scenario.tx_paths, scenario.rx_paths
    lam = scenario.wavelength
    bs = np.asarray(scenario.bs_position)
    n_s = max(lt, lr) - 1
    users = np.empty((K, 3))
    for k in range(K):
        for _ in range(1000):
            u = _uniform_points(scenario, rng, 1)[0]
            clear = np.linalg.norm(u - bs) > 1.0
            if len(scatterers):
                clear = clear and np.min(np.linalg.norm(scatterers - u, axis=1)) > 1.0
            if clear:
                users[k] = u
                break
        else:
            raise ValueError("could not place a user with 1 m clearance")

    kappa_t = np.empty((K, lt, 2))
    kappa_r = np.empty((K, lr, 3))
    prm = np.zeros((K, lt, lr), dtype=complex)
    for k in range(K):
        d_los = _unit(users[k] - bs)
        if n_s:
            dist = np.linalg.norm(scatterers - users[k], axis=1)
            pool = np.argsort(dist, kind="stable")[: min(len(scatterers), 2 * n_s)]
            chosen = scatterers[rng.choice(pool, n_s, replace=False)]
        else:
            chosen = np.empty((0, 3))
        d_tx = np.vstack([d_los, _unit(chosen[: lt - 1] - bs)]) if lt > 1 else d_los[None]
        # direction from the user toward the incoming wave's source
        d_rx = np.vstack([-d_los, _unit(chosen[: lr - 1] - users[k])]) if lr > 1 else -d_los[None]
        kappa_t[k] = tx_wavevector(*_angles_tx(d_tx), lam)
        kappa_r[k] = rx_wavevector(*_angles_rx(d_rx), lam)

        los = np.exp(2j * np.pi * rng.random())
        if lt > 1 and lr > 1:
            n_nlos = (lt - 1) * (lr - 1)
            # unscaled expected powers: LoS 1/2, NLoS 1/2 spread evenly
            nlos = (rng.standard_normal((lt - 1, lr - 1)) + 1j * rng.standard_normal((lt - 1, lr - 1)))
            nlos *= np.sqrt(0.5 / n_nlos / 2.0)
            eta_los, eta_nlos = rician_scale(0.5, 0.5, scenario.rician_factor)
            prm[k, 0, 0] = eta_los * np.sqrt(0.5) * los
            prm[k, 1:, 1:] = eta_nlos * nlos
        else:
            prm[k, 0, 0] = los
    return PathSet(kappa_t, kappa_r, prm, users)


def generate_scenario(scenario: Scenario, rng: np.random.Generator) -> tuple[np.ndarray, PathSet]:
    """Environment scatterers plus one drawn path set."""
    env = make_environment(scenario)
    return env, draw_path_set(scenario, env, rng)


def sample_channels(scenario: Scenario, path_set: PathSet, rng: np.random.Generator | None = None,
                    statistical: bool = False) -> ChannelSample:
    grid, meas = scenario.grid, scenario.measurement_grid
    if statistical:
        psi = draw_path_responses(path_set, rng)
        return ChannelSample(channel_from_responses(grid.points, path_set, psi),
                             channel_from_responses(meas.points, path_set, psi), path_set)
    return ChannelSample(instantaneous_channel(grid.points, path_set),
                         instantaneous_channel(meas.points, path_set), path_set)
