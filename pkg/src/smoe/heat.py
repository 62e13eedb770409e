"""Location-dependent heat diffusion data.

A region map assigns each grid cell a type, each type has its own diffusivity,
and samples are consecutive timesteps of an explicit five-point diffusion with
zero boundary conditions.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .tensor import DTYPE, make_rng

DEFAULT_DIFFUSIVITIES = (0.25, 0.025, 0.0025)

MAGIC = b"SMHD"
VERSION = 1


class DatasetFormatError(ValueError):
    """Malformed dataset file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(DatasetFormatError):
    pass


@dataclass
class RegionMap:
    grid: np.ndarray  # uint8 [H, W]
    diffusivities: np.ndarray  # float32 [num_types]
    seed: int = 0

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=np.uint8)
        self.diffusivities = np.asarray(self.diffusivities, dtype=DTYPE)
        if self.grid.ndim != 2:
            raise ValueError("region grid must be 2-D")
        if self.grid.size and int(self.grid.max()) >= len(self.diffusivities):
            raise ValueError("region grid references an undefined type")
        if np.any(self.diffusivities <= 0) or np.any(self.diffusivities > 0.25):
            raise ValueError("diffusivities must lie in (0, 0.25] for a stable explicit step")

    @property
    def shape(self) -> tuple[int, int]:
        return self.grid.shape

    @property
    def num_types(self) -> int:
        return len(self.diffusivities)

    def alpha(self) -> np.ndarray:
        """Per-cell diffusivity [H, W]."""
        return self.diffusivities[self.grid]

    def stencil(self, region_type: int) -> np.ndarray:
        """The 3x3 kernel that performs one diffusion step inside ``region_type``."""
        a = float(self.diffusivities[region_type])
        return np.array([[0, a, 0], [a, 1 - 4 * a, a], [0, a, 0]], dtype=DTYPE)

    def region_sizes(self) -> list[int]:
        return np.bincount(self.grid.ravel(), minlength=self.num_types).tolist()


def generate_region_map(
    height: int,
    width: int,
    num_types: int,
    rng: np.random.Generator,
    diffusivities=None,
    seed: int = 0,
) -> RegionMap:
    """Grow ``num_types`` connected regions by random frontier attachment.

    One seed cell per type is placed at random; then a random (assigned cell,
    unassigned 4-neighbour) pair is drawn and the neighbour joins that cell's
    region, until the grid is full. Long region boundaries attract more growth.
    """
    if num_types < 1:
        raise ValueError("num_types must be at least 1")
    if num_types > height * width:
        raise ValueError(f"num_types={num_types} exceeds the {height * width} grid cells")
    if num_types > 255:
        raise ValueError("at most 255 region types fit the on-disk format")
    if diffusivities is None:
        if num_types <= len(DEFAULT_DIFFUSIVITIES):
            diffusivities = DEFAULT_DIFFUSIVITIES[:num_types]
        else:
            diffusivities = 0.25 * np.logspace(0, -2, num_types)
    if len(diffusivities) != num_types:
        raise ValueError("need one diffusivity per region type")

    grid = np.full((height, width), -1, dtype=np.int64)
    seeds = rng.choice(height * width, size=num_types, replace=False)
    frontier: list[tuple[int, int]] = []

    def push_neighbours(cell: int) -> None:
        i, j = divmod(cell, width)
        for ni, nj in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1)):
            if 0 <= ni < height and 0 <= nj < width and grid[ni, nj] < 0:
                frontier.append((cell, ni * width + nj))

    for t, cell in enumerate(seeds):
        grid.flat[cell] = t
    for cell in seeds:
        push_neighbours(int(cell))

    remaining = height * width - num_types
    while remaining:
        k = int(rng.integers(len(frontier)))
        src, dst = frontier[k]
        frontier[k] = frontier[-1]
        frontier.pop()
        if grid.flat[dst] >= 0:
            continue
        grid.flat[dst] = grid.flat[src]
        remaining -= 1
        push_neighbours(dst)

    return RegionMap(grid.astype(np.uint8), np.asarray(diffusivities, dtype=DTYPE), seed)


def diffusion_step(state: np.ndarray, region_map: RegionMap) -> np.ndarray:
    """One explicit five-point step, zero outside the domain.

    Evaluated in float64 as ``(1 - 4a) s + a * (sum of neighbours)``, whose
    terms are all non-negative for a <= 0.25, then rounded once to float32.
    """
    state = np.asarray(state)
    if state.shape[-2:] != region_map.shape:
        raise ValueError(f"state {state.shape} does not match region map {region_map.shape}")
    s = state.astype(np.float64)
    p = np.pad(s, [(0, 0)] * (s.ndim - 2) + [(1, 1), (1, 1)])
    neighbours = p[..., :-2, 1:-1] + p[..., 2:, 1:-1] + p[..., 1:-1, :-2] + p[..., 1:-1, 2:]
    a = region_map.alpha().astype(np.float64)
    return ((1.0 - 4.0 * a) * s + a * neighbours).astype(DTYPE)


@dataclass
class DropConfig:
    """Heat drops per initial state; ``random_magnitude`` draws each from U(0, magnitude]."""

    count: int = 10
    magnitude: float = 1.0
    random_magnitude: bool = False


@dataclass
class HeatDataset:
    region_map: RegionMap
    inputs: np.ndarray  # float32 [n_pairs, 1, H, W]
    targets: np.ndarray  # float32 [n_pairs, 1, H, W]
    splits: tuple[int, int, int] = (0, 0, 0)  # end offsets of train, val, test

    def __len__(self) -> int:
        return len(self.inputs)

    def split(self, name: str) -> tuple[np.ndarray, np.ndarray]:
        lo, hi = {
            "train": (0, self.splits[0]),
            "val": (self.splits[0], self.splits[1]),
            "test": (self.splits[1], self.splits[2]),
        }[name]
        return self.inputs[lo:hi], self.targets[lo:hi]


def initial_state(shape, rng: np.random.Generator, drops: DropConfig) -> np.ndarray:
    h, w = shape
    if drops.count > h * w:
        raise ValueError("more heat drops than grid cells")
    state = np.zeros(h * w, dtype=DTYPE)
    cells = rng.choice(h * w, size=drops.count, replace=False)
    if drops.random_magnitude:
        state[cells] = drops.magnitude * (1.0 - rng.random(drops.count))
    else:
        state[cells] = drops.magnitude
    return state.reshape(1, 1, h, w)


def split_offsets(n_initial_states: int, n_timesteps: int, fractions=(0.8, 0.1, 0.1)):
    """Pair-index ends of train/val/test, cutting only between trajectories."""
    n_train = int(round(fractions[0] * n_initial_states))
    n_val = int(round((fractions[0] + fractions[1]) * n_initial_states)) - n_train
    ends = (n_train, n_train + n_val, n_initial_states)
    return tuple(e * n_timesteps for e in ends)


def generate_dataset(
    region_map: RegionMap,
    n_initial_states: int,
    n_timesteps: int,
    rng: np.random.Generator,
    drops: Optional[DropConfig] = None,
) -> HeatDataset:
    if n_initial_states < 1 or n_timesteps < 1:
        raise ValueError("need at least one initial state and one timestep")
    drops = drops or DropConfig()
    h, w = region_map.shape
    n = n_initial_states * n_timesteps
    inputs = np.empty((n, 1, h, w), dtype=DTYPE)
    targets = np.empty((n, 1, h, w), dtype=DTYPE)
    k = 0
    for _ in range(n_initial_states):
        state = initial_state((h, w), rng, drops)
        for _ in range(n_timesteps):
            nxt = diffusion_step(state, region_map)
            inputs[k] = state[0]
            targets[k] = nxt[0]
            state = nxt
            k += 1
    return HeatDataset(region_map, inputs, targets, split_offsets(n_initial_states, n_timesteps))


def dense_drops(size: int) -> DropConfig:
    """One drop of U(0, 1] heat on every cell: a random, fully populated initial field."""
    return DropConfig(size * size, 1.0, random_magnitude=True)


# Presets start from dense random fields: with a few sparse drops most cells never
# carry enough heat for the routing to be learned there (see the decisions ledger).
PRESETS = {
    "reduced": dict(size=32, num_types=3, n_initial_states=200, n_timesteps=50),
    "paper": dict(size=64, num_types=3, n_initial_states=1000, n_timesteps=100),
    "tiny": dict(size=16, num_types=3, n_initial_states=20, n_timesteps=10),
}


def generate_preset(name: str, seed: int) -> HeatDataset:
    """Region map and samples for a named preset, all drawn from one seeded stream."""
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    p = PRESETS[name]
    rng = make_rng(seed)
    rmap = generate_region_map(p["size"], p["size"], p["num_types"], rng, seed=seed)
    return generate_dataset(
        rmap, p["n_initial_states"], p["n_timesteps"], rng, dense_drops(p["size"])
    )


# On-disk layout (little-endian):
#   "SMHD" | u32 version | u32 H | u32 W | u32 num_types | f32 diffusivities[num_types]
#   | u8 grid[H*W] | u64 n_pairs | u64 splits[3]
#   | n_pairs x (f32 input[H*W], f32 target[H*W]) | u64 checksum
# checksum = BLAKE2b with an 8-byte digest over every preceding byte, read as u64.

def checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def dataset_to_bytes(ds: HeatDataset) -> bytes:
    h, w = ds.region_map.shape
    parts = [
        MAGIC,
        struct.pack("<IIII", VERSION, h, w, ds.region_map.num_types),
        ds.region_map.diffusivities.astype("<f4").tobytes(),
        ds.region_map.grid.astype(np.uint8).tobytes(),
        struct.pack("<Q", len(ds)),
        struct.pack("<3Q", *ds.splits),
    ]
    pairs = np.stack([ds.inputs.reshape(len(ds), -1), ds.targets.reshape(len(ds), -1)], axis=1)
    parts.append(pairs.astype("<f4").tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<Q", checksum(payload))


def save_dataset(ds: HeatDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise DatasetFormatError(f"truncated file while reading {what}", self.pos)
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out


def dataset_from_bytes(buf: bytes) -> HeatDataset:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise DatasetFormatError("bad magic, not an SMHD dataset", 0)
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported dataset version {version}", 4)
    h, w, num_types = struct.unpack("<III", r.take(12, "dimensions"))
    diff = np.frombuffer(r.take(4 * num_types, "diffusivities"), dtype="<f4").astype(DTYPE)
    grid_at = r.pos
    grid = np.frombuffer(r.take(h * w, "region grid"), dtype=np.uint8).reshape(h, w)
    (n_pairs,) = struct.unpack("<Q", r.take(8, "pair count"))
    splits = struct.unpack("<3Q", r.take(24, "split offsets"))
    body = r.take(n_pairs * 2 * h * w * 4, "sample pairs")
    end = r.pos
    (stored,) = struct.unpack("<Q", r.take(8, "checksum"))
    if r.pos != len(buf):
        raise DatasetFormatError("trailing bytes after checksum", r.pos)
    if checksum(buf[:end]) != stored:
        raise DatasetFormatError("checksum mismatch", end)
    if splits[2] != n_pairs or not splits[0] <= splits[1] <= splits[2]:
        raise DatasetFormatError("inconsistent split offsets", grid_at + h * w + 8)
    try:
        rmap = RegionMap(grid.copy(), diff)
    except ValueError as exc:
        raise DatasetFormatError(str(exc), grid_at) from exc
    pairs = np.frombuffer(body, dtype="<f4").astype(DTYPE).reshape(n_pairs, 2, 1, h, w)
    return HeatDataset(rmap, pairs[:, 0].copy(), pairs[:, 1].copy(), tuple(int(s) for s in splits))


def load_dataset(path) -> HeatDataset:
    return dataset_from_bytes(Path(path).read_bytes())
