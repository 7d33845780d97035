"""Synthetic low-dimensional datasets and their on-disk format.

Four kinds: two analytic Gaussian mixtures (ring, grid) that carry their
component means and covariances for alignment scoring, plus two classic
non-analytic shapes (two-moons, checkerboard).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from sklearn.datasets import make_moons

DATASET_KINDS = ("gaussian-ring", "gaussian-grid", "two-moons", "checkerboard")

RING_RADIUS = 4.0
RING_STD = 0.3
GRID_EXTENT = 4.0
GRID_STD = 0.3
MOONS_NOISE = 0.1
BOARD_HALF = 4.0

_MAGIC = b"TJDF"
_VERSION = 1
_KIND_CODES = {k: i for i, k in enumerate(DATASET_KINDS)}
_DTYPE_F64 = 0


@dataclass
class MixtureSpec:
    """Component means (K, d) and covariances (K, d, d) of an analytic
    Gaussian mixture."""

    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        k, d = self.means.shape
        if self.covs.shape != (k, d, d):
            raise ValueError("covariance block must be (K, d, d)")


@dataclass
class Dataset:
    kind: str
    samples: np.ndarray
    labels: np.ndarray
    mixture: MixtureSpec | None = None

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.uint32)
        if self.samples.ndim != 2 or self.labels.shape != (self.samples.shape[0],):
            raise ValueError("samples must be n x d with one label per row")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples must be finite")
        if self.mixture is not None:
            k = self.mixture.means.shape[0]
            if self.labels.size and int(self.labels.max()) >= k:
                raise ValueError("label indexes a missing mixture component")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels.size else 0


def _stratified_counts(n: int, k: int) -> np.ndarray:
    counts = np.full(k, n // k, dtype=np.int64)
    counts[: n % k] += 1
    return counts


def _ring_means(k: int) -> np.ndarray:
    ang = 2.0 * np.pi * np.arange(k) / k
    return RING_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def _grid_means(k: int) -> np.ndarray:
    side = round(np.sqrt(k))
    if side * side != k:
        raise ValueError(f"gaussian-grid needs a square K, got {k}")
    axis = np.zeros(1) if side == 1 else np.linspace(-GRID_EXTENT, GRID_EXTENT, side)
    gx, gy = np.meshgrid(axis, axis, indexing="ij")
    return np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)


def _sample_mixture(kind: str, means: np.ndarray, std: float, n: int,
                    rng: np.random.Generator) -> Dataset:
    k, d = means.shape
    labels = np.repeat(np.arange(k, dtype=np.uint32), _stratified_counts(n, k))
    samples = means[labels] + std * rng.standard_normal((n, d))
    covs = np.tile(std * std * np.eye(d), (k, 1, 1))
    return Dataset(kind=kind, samples=samples, labels=labels,
                   mixture=MixtureSpec(means=means, covs=covs))


def _checkerboard(n: int, k: int, rng: np.random.Generator) -> Dataset:
    # dark squares of a 4x4 board over [-4, 4]^2; labels index the 8 cells
    if k != 8:
        raise ValueError("checkerboard uses the 8 dark cells of a 4x4 board; K must be 8")
    cells = [(i, j) for i in range(4) for j in range(4) if (i + j) % 2 == 0]
    side = BOARD_HALF / 2.0
    labels = np.repeat(np.arange(k, dtype=np.uint32), _stratified_counts(n, k))
    lo = np.array([(-BOARD_HALF + side * i, -BOARD_HALF + side * j)
                   for i, j in cells])
    samples = lo[labels] + side * rng.random((n, 2))
    return Dataset(kind="checkerboard", samples=samples, labels=labels)


def gen_dataset(kind: str, n: int, d: int = 2, k: int = 8,
                seed: int = 0) -> Dataset:
    """Deterministic synthetic dataset of ``n`` points.

    gaussian-ring: K isotropic components (std 0.3) evenly spaced on a
    radius-4 circle, stratified so labels split n as evenly as possible.
    gaussian-grid: K components on a square lattice. two-moons: the usual
    interleaved half-circles (K=2). checkerboard: uniform fill of the dark
    cells of a 4x4 board (K=8).
    """
    if kind not in DATASET_KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}")
    if not 1 <= k <= n:
        raise ValueError(f"need n >= K >= 1, got n={n}, K={k}")
    if d != 2:
        raise ValueError(f"{kind} is two-dimensional, got d={d}")
    rng = np.random.default_rng(seed)
    if kind == "gaussian-ring":
        return _sample_mixture(kind, _ring_means(k), RING_STD, n, rng)
    if kind == "gaussian-grid":
        return _sample_mixture(kind, _grid_means(k), GRID_STD, n, rng)
    if kind == "two-moons":
        if k != 2:
            raise ValueError("two-moons has exactly 2 components")
        samples, labels = make_moons(n_samples=n, noise=MOONS_NOISE,
                                     random_state=seed)
        return Dataset(kind=kind, samples=np.asarray(samples, dtype=np.float64),
                       labels=labels.astype(np.uint32))
    return _checkerboard(n, k, rng)


# ---------------------------------------------------------------------------
# binary file format: little-endian header + row-major float64 payload


def write_dataset(ds: Dataset, path) -> None:
    """Self-describing binary layout: magic, version, kind, n, d, K,
    dtype code, mixture flag, then samples (n*d f64), labels (n u32), and
    the mixture block when present."""
    k = ds.mixture.means.shape[0] if ds.mixture is not None else ds.n_classes
    header = _MAGIC + struct.pack(
        "<IIQIIIB3x", _VERSION, _KIND_CODES[ds.kind], ds.n, ds.d, k,
        _DTYPE_F64, 1 if ds.mixture is not None else 0)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(ds.samples, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())
        if ds.mixture is not None:
            f.write(np.ascontiguousarray(ds.mixture.means, dtype="<f8").tobytes())
            f.write(np.ascontiguousarray(ds.mixture.covs, dtype="<f8").tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise ValueError(f"{path}: not a dataset file (bad magic)")
    version, kind_code, n, d, k, dtype_code, has_mix = struct.unpack_from(
        "<IIQIIIB3x", blob, 4)
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported dataset version {version}")
    if dtype_code != _DTYPE_F64:
        raise ValueError(f"{path}: unsupported dtype code {dtype_code}")
    kind = DATASET_KINDS[kind_code]
    off = 4 + struct.calcsize("<IIQIIIB3x")
    samples = np.frombuffer(blob, dtype="<f8", count=n * d, offset=off)
    off += samples.nbytes
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=off)
    off += labels.nbytes
    mixture = None
    if has_mix:
        means = np.frombuffer(blob, dtype="<f8", count=k * d, offset=off)
        off += means.nbytes
        covs = np.frombuffer(blob, dtype="<f8", count=k * d * d, offset=off)
        mixture = MixtureSpec(means=means.reshape(k, d).copy(),
                              covs=covs.reshape(k, d, d).copy())
    return Dataset(kind=kind, samples=samples.reshape(n, d).copy(),
                   labels=labels.copy(), mixture=mixture)
