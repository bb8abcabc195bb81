"""Truncated path signatures of piecewise-linear paths.

Coordinates are stored flat, level by level, with words in row-major order:
level ``k`` occupies ``c**k`` entries and the word ``(i1, ..., ik)`` sits at
offset ``sum(i_m * c**(k-m))`` inside its block.  The level-0 term (always 1)
is implicit.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateLeadLag, GridMismatch, InvalidPath, UnsupportedLevel

MAX_LEVEL = 4


def sig_dim(channels: int, level: int) -> int:
    """Number of stored coordinates, ``sum_{k=1..level} channels**k``."""
    return sum(channels**k for k in range(1, level + 1))


def _check_level(level: int) -> None:
    if not isinstance(level, (int, np.integer)) or not 1 <= level <= MAX_LEVEL:
        raise UnsupportedLevel(f"signature level must be in 1..{MAX_LEVEL}, got {level!r}")


@dataclass(frozen=True)
class PiecewisePath:
    """Polyline through ``(times[i], values[i])``; values has shape (n, c)."""

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or times.ndim != 1 or len(times) != len(values):
            raise InvalidPath(f"times {times.shape} and values {values.shape} do not describe a path")
        if len(times) < 2:
            raise InvalidPath("a path needs at least 2 points")
        if np.any(np.diff(times) <= 0):
            raise InvalidPath("path times must be strictly increasing")
        if not np.all(np.isfinite(values)):
            raise InvalidPath("path values must be finite")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_values(cls, values, times=None) -> "PiecewisePath":
        values = np.asarray(values, dtype=np.float64)
        if times is None:
            times = np.arange(len(values), dtype=np.float64)
        return cls(times, values)

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def __len__(self) -> int:
        return len(self.times)

    def time_augmented(self) -> "PiecewisePath":
        """Prepend a channel holding time rescaled to [0, 1]."""
        t = (self.times - self.times[0]) / (self.times[-1] - self.times[0])
        return PiecewisePath(self.times, np.column_stack([t, self.values]))


@dataclass(frozen=True)
class TruncatedSignature:
    level: int
    channels: int
    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.shape != (sig_dim(self.channels, self.level),):
            raise InvalidPath(
                f"expected {sig_dim(self.channels, self.level)} coordinates, got {coords.shape}"
            )
        object.__setattr__(self, "coords", coords)

    def levels(self) -> list[np.ndarray]:
        """Per-level blocks, each of shape (c**k,)."""
        return _split_levels(self.coords, self.channels, self.level)

    def __getitem__(self, word) -> float:
        """Coordinate of a word given as a tuple of 0-based channel indices."""
        word = tuple(word)
        k = len(word)
        if not 1 <= k <= self.level:
            raise KeyError(word)
        offset = sig_dim(self.channels, k - 1)
        idx = 0
        for letter in word:
            if not 0 <= letter < self.channels:
                raise KeyError(word)
            idx = idx * self.channels + letter
        return float(self.coords[offset + idx])

    def __mul__(self, other: "TruncatedSignature") -> "TruncatedSignature":
        return tensor_product(self, other)


def _split_levels(flat: np.ndarray, channels: int, level: int) -> list[np.ndarray]:
    out, start = [], 0
    for k in range(1, level + 1):
        n = channels**k
        out.append(flat[..., start:start + n])
        start += n
    return out


def _chen(left: list[np.ndarray], right: list[np.ndarray], level: int) -> list[np.ndarray]:
    # (1 + a1 + a2 + ...) (x) (1 + b1 + b2 + ...) truncated at `level`
    out = []
    for k in range(1, level + 1):
        acc = left[k - 1] + right[k - 1]
        for i in range(1, k):
            a, b = left[i - 1], right[k - i - 1]
            acc = acc + (a[..., :, None] * b[..., None, :]).reshape(*a.shape[:-1], -1)
        out.append(acc)
    return out


def _segment_exp(delta: np.ndarray, level: int) -> list[np.ndarray]:
    """Truncated tensor exponential of increments with shape (..., c)."""
    out = [delta]
    for k in range(2, level + 1):
        prev = out[-1]
        out.append((prev[..., :, None] * delta[..., None, :]).reshape(*delta.shape[:-1], -1) / k)
    return out


def tensor_product(a: TruncatedSignature, b: TruncatedSignature) -> TruncatedSignature:
    """Truncated tensor product; by Chen's identity this concatenates paths."""
    if a.channels != b.channels:
        raise GridMismatch("signatures have different channel counts")
    level = min(a.level, b.level)
    levels = _chen(a.levels()[:level], b.levels()[:level], level)
    return TruncatedSignature(level, a.channels, np.concatenate(levels))


def signature_from_values(values: np.ndarray, level: int) -> np.ndarray:
    """Batched signature of polylines ``values[..., n, c]`` -> ``(..., sig_dim)``.

    Each linear piece contributes the tensor exponential of its increment and
    the pieces are folded left to right with Chen's identity.
    """
    _check_level(level)
    values = np.asarray(values, dtype=np.float64)
    if values.ndim < 2 or values.shape[-2] < 2:
        raise InvalidPath("need at least 2 points along axis -2")
    incs = np.diff(values, axis=-2)
    acc = _segment_exp(incs[..., 0, :], level)
    for s in range(1, incs.shape[-2]):
        acc = _chen(acc, _segment_exp(incs[..., s, :], level), level)
    return np.concatenate(acc, axis=-1)


def signature(path: PiecewisePath, level: int) -> TruncatedSignature:
    """Level-``level`` signature of the piecewise-linear interpolant of ``path``."""
    if not isinstance(path, PiecewisePath):
        path = PiecewisePath.from_values(path)
    _check_level(level)
    return TruncatedSignature(level, path.channels, signature_from_values(path.values, level))


def segment_signature(delta, level: int) -> TruncatedSignature:
    """Signature of one straight segment with increment ``delta``: Δ^⊗k / k!."""
    _check_level(level)
    delta = np.atleast_1d(np.asarray(delta, dtype=np.float64))
    return TruncatedSignature(level, len(delta), np.concatenate(_segment_exp(delta, level)))


def _joint_values(path_j: PiecewisePath, path_l: PiecewisePath) -> np.ndarray:
    if path_j.channels != 1 or path_l.channels != 1:
        raise InvalidPath("cross-signatures take two single-channel paths")
    if len(path_j) != len(path_l) or not np.array_equal(path_j.times, path_l.times):
        raise GridMismatch("paths must share the same time grid")
    joint = np.column_stack([path_j.values[:, 0], path_l.values[:, 0]])
    return joint - joint[0]


def cross_signature(path_j: PiecewisePath, path_l: PiecewisePath, level: int = 2) -> TruncatedSignature:
    """Signature of the basepointed 2-channel path (path_j, path_l)."""
    _check_level(level)
    joint = _joint_values(path_j, path_l)
    return TruncatedSignature(level, 2, signature_from_values(joint, level))


def signed_area(path_j: PiecewisePath, path_l: PiecewisePath) -> float:
    """S^{12} - S^{21} of the basepointed pair; positive when path_j leads."""
    sig = cross_signature(path_j, path_l, 2)
    return sig[0, 1] - sig[1, 0]


def signed_area_matrix(values: np.ndarray) -> np.ndarray:
    """All pairwise signed areas of the columns of ``values`` (n, d).

    Entry ``[j, l]`` equals ``signed_area(col j, col l)``.  Closed form for
    polylines, ``sum_t (x_{t-1} - x_0)^T dy_t - (y_{t-1} - y_0)^T dx_t``.
    """
    values = np.asarray(values, dtype=np.float64)
    base = values[:-1] - values[0]
    inc = np.diff(values, axis=0)
    m = base.T @ inc
    return m - m.T


def make_leadlag_path(sync_values, segment_len: float = 1.0) -> tuple[PiecewisePath, PiecewisePath]:
    """Leader/lagger pair with a strict lead-lag structure.

    On each lead interval the leader moves from S_{k-1} to S_k while the lagger
    holds; on the following lag interval the lagger catches up.  Both meet at
    every synchronisation value.
    """
    s = np.asarray(sync_values, dtype=np.float64)
    if s.ndim != 1 or len(s) < 2:
        raise DegenerateLeadLag("need at least two synchronisation values")
    if segment_len <= 0:
        raise InvalidPath("segment_len must be positive")
    if np.any(np.diff(s) == 0):
        k = int(np.flatnonzero(np.diff(s) == 0)[0]) + 1
        raise DegenerateLeadLag(f"sync values {k - 1} and {k} coincide")
    n = len(s) - 1
    times = segment_len * np.arange(2 * n + 1, dtype=np.float64)
    leader = np.empty(2 * n + 1)
    lagger = np.empty(2 * n + 1)
    leader[0] = lagger[0] = s[0]
    leader[1::2] = s[1:]
    leader[2::2] = s[1:]
    lagger[1::2] = s[:-1]
    lagger[2::2] = s[1:]
    return PiecewisePath(times, leader), PiecewisePath(times, lagger)


def sig_coord_index(channels: int, word) -> int:
    """Flat index of ``word`` inside a stored coordinate vector."""
    word = tuple(word)
    idx = 0
    for letter in word:
        idx = idx * channels + letter
    return sig_dim(channels, len(word) - 1) + idx


__all__ = [
    "MAX_LEVEL",
    "PiecewisePath",
    "TruncatedSignature",
    "cross_signature",
    "make_leadlag_path",
    "segment_signature",
    "sig_coord_index",
    "sig_dim",
    "signature",
    "signature_from_values",
    "signed_area",
    "signed_area_matrix",
    "tensor_product",
]
