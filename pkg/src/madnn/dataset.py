"""Channel dataset generation, binary serialization and batching.

File layout (little-endian):

    b"MADS" | uint16 version | uint32 header_len | header (UTF-8 JSON) | records

Each record is ``int32 slot`` followed by float32 pairs (re, im) for the grid
channel (G x K, row-major) and then the measurement channel (M x K).
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .channel import (EPISODE_STREAM, SAMPLE_STREAM, SLOT_STREAM, PathSet, Scenario, channel_from_responses,
                      draw_path_responses, draw_path_set, instantaneous_channel, make_environment,
                      sample_channels, substream)

MAGIC = b"MADS"
VERSION = 1
REGIMES = ("instantaneous", "statistical")


class DatasetError(ValueError):
    """Corrupt or inconsistent dataset file."""


@dataclass
class DatasetHeader:
    scenario: Scenario
    num_samples: int
    regime: str = "instantaneous"
    slots_per_episode: int = 1
    seed: int = 0
    float_width: int = 4

    @property
    def dims(self) -> tuple[int, int, int]:
        return len(self.scenario.grid), len(self.scenario.measurement_grid), self.scenario.num_users

    def to_json(self) -> bytes:
        g, m, k = self.dims
        d = {
            "format_version": VERSION,
            "scenario": self.scenario.to_dict(),
            "num_samples": self.num_samples,
            "G": g, "M": m, "K": k,
            "regime": self.regime,
            "slots_per_episode": self.slots_per_episode,
            "seed": self.seed,
            "float_width": self.float_width,
        }
        return json.dumps(d, sort_keys=True).encode()

    @classmethod
    def from_json(cls, raw: bytes) -> "DatasetHeader":
        d = json.loads(raw)
        hdr = cls(Scenario.from_dict(d["scenario"]), d["num_samples"], d["regime"],
                  d["slots_per_episode"], d["seed"], d["float_width"])
        if hdr.dims != (d["G"], d["M"], d["K"]):
            raise DatasetError("header dimensions disagree with scenario")
        return hdr


def record_dtype(g: int, m: int, k: int) -> np.dtype:
    return np.dtype([("slot", "<i4"), ("grid", "<f4", (g, k, 2)), ("meas", "<f4", (m, k, 2))])


@dataclass
class Dataset:
    header: DatasetHeader
    h_grid: np.ndarray  # (S, G, K) complex128
    h_meas: np.ndarray  # (S, M, K) complex128
    slot: np.ndarray  # (S,)

    def __len__(self):
        return len(self.slot)

    def view(self, indices=None) -> "DatasetView":
        return DatasetView(self, np.arange(len(self)) if indices is None else np.asarray(indices))


@dataclass
class DatasetView:
    dataset: Dataset
    indices: np.ndarray

    def __len__(self):
        return len(self.indices)

    @property
    def header(self) -> DatasetHeader:
        return self.dataset.header

    def arrays(self, idx=None):
        sel = self.indices if idx is None else self.indices[idx]
        return self.dataset.h_grid[sel], self.dataset.h_meas[sel]


@dataclass
class Batch:
    h_grid: np.ndarray
    h_meas: np.ndarray
    indices: np.ndarray  # positions within the dataset


def _to_pairs(h: np.ndarray) -> np.ndarray:
    return np.stack([h.real, h.imag], axis=-1)


def sample_path_set(header: DatasetHeader, index: int, env: np.ndarray | None = None) -> PathSet:
    """Re-derive the path set behind sample ``index`` from the header's seed."""
    sc = header.scenario
    env = make_environment(sc) if env is None else env
    if header.regime == "statistical":
        episode = index // header.slots_per_episode
        return draw_path_set(sc, env, substream(header.seed, EPISODE_STREAM, episode))
    return draw_path_set(sc, env, substream(header.seed, SAMPLE_STREAM, index))


def channel_at(header: DatasetHeader, index: int, positions, env: np.ndarray | None = None) -> np.ndarray:
    """Channel (N, K) of sample ``index`` at arbitrary antenna positions.

    Re-derives the sample's path set (and, for statistical data, its slot
    path responses) from the header seed, so it agrees with the stored grid
    channel wherever the positions coincide with grid points.
    """
    ps = sample_path_set(header, index, env)
    if header.regime == "statistical":
        episode, slot = divmod(index, header.slots_per_episode)
        psi = draw_path_responses(ps, substream(header.seed, SLOT_STREAM, episode, slot))
        return channel_from_responses(positions, ps, psi)
    return instantaneous_channel(positions, ps)


def _generate_records(header: DatasetHeader) -> np.ndarray:
    sc = header.scenario
    g, m, k = header.dims
    rec = np.zeros(header.num_samples, dtype=record_dtype(g, m, k))
    env = make_environment(sc)
    path_set = None
    for i in range(header.num_samples):
        if header.regime == "statistical":
            episode, slot = divmod(i, header.slots_per_episode)
            if slot == 0:
                path_set = draw_path_set(sc, env, substream(header.seed, EPISODE_STREAM, episode))
            smp = sample_channels(sc, path_set, substream(header.seed, SLOT_STREAM, episode, slot), statistical=True)
        else:
            slot = 0
            path_set = draw_path_set(sc, env, substream(header.seed, SAMPLE_STREAM, i))
            smp = sample_channels(sc, path_set)
        rec[i]["slot"] = slot
        rec[i]["grid"] = _to_pairs(smp.h_grid)
        rec[i]["meas"] = _to_pairs(smp.h_meas)
    return rec


def generate_dataset(scenario: Scenario, num_samples: int, path, regime: str = "instantaneous",
                     slots_per_episode: int = 16, seed: int | None = None) -> DatasetHeader:
    """Draw ``num_samples`` channel samples and write them to ``path``.

    Instantaneous datasets draw a fresh path set per sample. Statistical datasets
    keep one path set per episode of ``slots_per_episode`` samples and redraw the
    path responses each slot.
    """
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    if num_samples < 0:
        raise ValueError("num_samples must be non-negative")
    header = DatasetHeader(scenario, int(num_samples), regime,
                           int(slots_per_episode) if regime == "statistical" else 1,
                           scenario.rng_seed if seed is None else int(seed))
    write_dataset(path, header, _generate_records(header))
    return header


def write_dataset(path, header: DatasetHeader, records: np.ndarray):
    hdr = header.to_json()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(hdr)))
        fh.write(hdr)
        fh.write(records.tobytes())


def read_records(path) -> tuple[DatasetHeader, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) < 10 or raw[:4] != MAGIC:
        raise DatasetError(f"{path}: bad magic, not a dataset file")
    version, hlen = struct.unpack("<HI", raw[4:10])
    if version != VERSION:
        raise DatasetError(f"{path}: unsupported format version {version}")
    try:
        header = DatasetHeader.from_json(raw[10:10 + hlen])
    except (ValueError, KeyError, TypeError) as exc:
        raise DatasetError(f"{path}: unreadable header ({exc})") from exc
    dt = record_dtype(*header.dims)
    payload = raw[10 + hlen:]
    if len(payload) != header.num_samples * dt.itemsize:
        raise DatasetError(f"{path}: payload holds {len(payload)} bytes, header promises "
                           f"{header.num_samples} records of {dt.itemsize}")
    rec = np.frombuffer(payload, dtype=dt)
    if not (np.all(np.isfinite(rec["grid"])) and np.all(np.isfinite(rec["meas"]))):
        raise DatasetError(f"{path}: non-finite channel values")
    return header, rec


def load_dataset(path) -> Dataset:
    header, rec = read_records(path)
    grid = rec["grid"].astype(np.float64)
    meas = rec["meas"].astype(np.float64)
    return Dataset(header, grid[..., 0] + 1j * grid[..., 1], meas[..., 0] + 1j * meas[..., 1],
                   rec["slot"].astype(np.int64))


def split_train_val(dataset: Dataset, val_fraction: float, unit: int | None = None):
    """Contiguous tail split; the validation part has ``floor(n * val_fraction)`` units.

    ``unit`` groups samples (episode length for statistical data); defaults to the
    header's episode length.
    """
    if not 0 <= val_fraction < 1:
        raise ValueError("val_fraction must be in [0, 1)")
    unit = unit or dataset.header.slots_per_episode
    n_units = len(dataset) // unit
    n_val = int(math.floor(n_units * val_fraction + 1e-9)) * unit
    n_train = n_units * unit - n_val
    idx = np.arange(len(dataset))
    return dataset.view(idx[:n_train]), dataset.view(idx[n_train:n_train + n_val])


def load_batches(view: DatasetView, batch_size: int, rng: np.random.Generator, group: int = 1):
    """Yield shuffled mini-batches; the last one may be partial.

    With ``group > 1`` consecutive runs of ``group`` samples (episodes) stay
    together and ``batch_size`` counts groups.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n_groups = len(view) // group
    order = rng.permutation(n_groups)
    for start in range(0, n_groups, batch_size):
        gsel = order[start:start + batch_size]
        local = (gsel[:, None] * group + np.arange(group)[None, :]).ravel()
        h_grid, h_meas = view.arrays(local)
        yield Batch(h_grid, h_meas, view.indices[local])
