"""Synthetic training corpus: procedural patches, a severity-ordered
distortion ladder, and ranked pair instances.

Ground-truth ranking comes from the severity ordering within a distortion
kind; lower severity means higher quality. Generation is a pure function of
(config, seed): every instance derives its own seed from (seed, index), so
parallel and serial generation agree.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

KINDS = (
    "gaussian-blur",
    "additive-gaussian-noise",
    "uniform-quantization",
    "downsample-upsample",
)

DEFAULT_LEVELS = 6

PAIR_MAGIC = b"RPDS"
EVAL_MAGIC = b"RPEV"
FORMAT_VERSION = 1


class DataFormatError(ValueError):
    """Bad container magic, version, or a truncated file."""


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    level: int  # 0 = identity, 1..S on a monotone severity ladder

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distortion kind {self.kind!r}")
        if self.level < 0:
            raise ValueError("severity level must be >= 0")


@dataclass(frozen=True)
class PairInstance:
    """One ranked training instance; label 1 iff pair (r1, d1) has higher quality."""

    r1: np.ndarray
    d1: np.ndarray
    r2: np.ndarray
    d2: np.ndarray
    label: int
    kind: str
    lev1: int
    lev2: int
    mos1: float
    mos2: float


@dataclass(frozen=True)
class EvalItem:
    """One graded evaluation item with its pseudo-MOS score."""

    ref: np.ndarray
    dist: np.ndarray
    kind: str
    level: int
    mos: float


# ---------------------------------------------------------------------------
# source patches


def _rescale(patch: np.ndarray) -> np.ndarray:
    lo, hi = patch.min(), patch.max()
    span = hi - lo
    if span < 1e-9:
        return np.full_like(patch, 0.5)
    return 0.1 + 0.8 * (patch - lo) / span


def _make_source(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    style = rng.integers(0, 4)
    if style == 0:  # band-limited noise
        patch = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=rng.uniform(0.8, 2.5))
    elif style == 1:  # oriented ramp with texture
        theta = rng.uniform(0, np.pi)
        yy, xx = np.mgrid[0:h, 0:w]
        patch = np.cos(theta) * xx / w + np.sin(theta) * yy / h
        patch = patch + 0.15 * ndimage.gaussian_filter(rng.standard_normal((h, w)), 1.0)
    elif style == 2:  # jittered checkerboard
        cell = int(rng.integers(4, 9))
        yy, xx = np.mgrid[0:h, 0:w]
        jitter = rng.integers(0, cell, size=2)
        patch = (((yy + jitter[0]) // cell + (xx + jitter[1]) // cell) % 2).astype(float)
        patch = patch * rng.uniform(0.5, 1.0) + 0.1 * rng.standard_normal((h, w))
    else:  # smoothed blobs
        patch = np.zeros((h, w))
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(int(rng.integers(3, 7))):
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            s = rng.uniform(h / 12, h / 4)
            patch += rng.uniform(-1, 1) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * s * s))
    return _rescale(patch).astype(np.float32)


def generate_sources(n: int, geometry: tuple[int, int, int], seed: int) -> list[np.ndarray]:
    """Procedural grayscale/RGB patches in [0, 1], deterministic per seed."""
    if n < 1:
        raise ValueError("need n >= 1 source patches")
    c, h, w = geometry
    if c < 1 or h < 4 or w < 4:
        raise ValueError(f"degenerate geometry {geometry}")
    out = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xA5, i)))
        out.append(np.stack([_make_source(rng, h, w) for _ in range(c)]))
    return out


# ---------------------------------------------------------------------------
# distortions


def _down_up(plane: np.ndarray, factor: int) -> np.ndarray:
    h, w = plane.shape
    ph = (-h) % factor
    pw = (-w) % factor
    padded = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    hh, ww = padded.shape
    small = padded.reshape(hh // factor, factor, ww // factor, factor).mean(axis=(1, 3))
    return np.repeat(np.repeat(small, factor, axis=0), factor, axis=1)[:h, :w]


def apply_distortion(patch: np.ndarray, spec: DistortionSpec, seed: int) -> np.ndarray:
    """Apply one ladder level; level 0 is the identity. Output clipped to [0, 1]."""
    if spec.level == 0:
        return patch.copy()
    level = spec.level
    out = patch.astype(np.float64)
    if spec.kind == "gaussian-blur":
        out = np.stack([ndimage.gaussian_filter(pl, sigma=0.6 * level) for pl in out])
    elif spec.kind == "additive-gaussian-noise":
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xD1, level)))
        out = out + rng.standard_normal(out.shape) * 0.05 * level
    elif spec.kind == "uniform-quantization":
        q = 2 ** (7 - level)  # levels 1..6 -> 64, 32, 16, 8, 4, 2 bins
        out = np.round(out * (q - 1)) / (q - 1)
    elif spec.kind == "downsample-upsample":
        out = np.stack([_down_up(pl, factor=1 + level) for pl in out])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def pseudo_mos(level: int, levels: int, rng: np.random.Generator) -> float:
    """Graded quality stand-in: higher is better, jittered to avoid ties."""
    # stored as float32 in the containers; round here so round-trips are exact
    return float(np.float32(levels - level + rng.uniform(-0.2, 0.2)))


# ---------------------------------------------------------------------------
# datasets


def make_pair_dataset(
    sources: list[np.ndarray],
    levels: int,
    pairs_per_source: int,
    seed: int,
    cross_content: bool = False,
) -> list[PairInstance]:
    if levels < 2:
        raise ValueError("severity ladder needs at least 2 levels")
    instances = []
    idx = 0
    for si in range(len(sources)):
        for _ in range(pairs_per_source):
            rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB2, idx)))
            kind = KINDS[rng.integers(0, len(KINDS))]
            if cross_content:
                # harder setting: distinct contents, levels at least 2 apart
                sj = int(rng.integers(0, len(sources)))
                while True:
                    la, lb = rng.choice(np.arange(1, levels + 1), size=2, replace=False)
                    if abs(int(la) - int(lb)) >= 2:
                        break
                src1, src2 = sources[si], sources[sj]
            else:
                la, lb = rng.choice(np.arange(1, levels + 1), size=2, replace=False)
                src1 = src2 = sources[si]
            lev1, lev2 = int(la), int(lb)
            d1 = apply_distortion(src1, DistortionSpec(kind, lev1), seed=int(rng.integers(2**31)))
            d2 = apply_distortion(src2, DistortionSpec(kind, lev2), seed=int(rng.integers(2**31)))
            instances.append(
                PairInstance(
                    r1=src1,
                    d1=d1,
                    r2=src2,
                    d2=d2,
                    label=1 if lev1 < lev2 else 0,
                    kind=kind,
                    lev1=lev1,
                    lev2=lev2,
                    mos1=pseudo_mos(lev1, levels, rng),
                    mos2=pseudo_mos(lev2, levels, rng),
                )
            )
            idx += 1
    return instances


def make_eval_dataset(
    sources: list[np.ndarray], levels: int, seed: int
) -> list[EvalItem]:
    """One graded item per (source, kind, level)."""
    items = []
    for si, src in enumerate(sources):
        for ki, kind in enumerate(KINDS):
            for level in range(1, levels + 1):
                rng = np.random.default_rng(np.random.SeedSequence((seed, 0xC3, si, ki, level)))
                dist = apply_distortion(
                    src, DistortionSpec(kind, level), seed=int(rng.integers(2**31))
                )
                items.append(EvalItem(src, dist, kind, level, pseudo_mos(level, levels, rng)))
    return items


# ---------------------------------------------------------------------------
# binary containers


def _geometry_of(patch: np.ndarray) -> tuple[int, int, int]:
    c, h, w = patch.shape
    return int(c), int(h), int(w)


_PAIR_HEADER = struct.Struct("<4sHIHHH")
_PAIR_TRAILER = struct.Struct("<BBBBff")
_EVAL_TRAILER = struct.Struct("<BBf")


def write_dataset(path, instances: list[PairInstance]):
    path = Path(path)
    if instances:
        c, h, w = _geometry_of(instances[0].r1)
    else:
        c = h = w = 0
    parts = [_PAIR_HEADER.pack(PAIR_MAGIC, FORMAT_VERSION, len(instances), c, h, w)]
    for inst in instances:
        for patch in (inst.r1, inst.d1, inst.r2, inst.d2):
            parts.append(np.ascontiguousarray(patch, dtype="<f4").tobytes())
        parts.append(
            _PAIR_TRAILER.pack(
                inst.label, KINDS.index(inst.kind), inst.lev1, inst.lev2, inst.mos1, inst.mos2
            )
        )
    path.write_bytes(b"".join(parts))


def read_dataset(path) -> list[PairInstance]:
    data = Path(path).read_bytes()
    if len(data) < _PAIR_HEADER.size:
        raise DataFormatError(f"{path}: file shorter than header")
    magic, version, count, c, h, w = _PAIR_HEADER.unpack_from(data)
    if magic != PAIR_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    patch_bytes = 4 * c * h * w
    record = 4 * patch_bytes + _PAIR_TRAILER.size
    expected = _PAIR_HEADER.size + count * record
    if len(data) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(data)} (truncated?)")
    instances = []
    pos = _PAIR_HEADER.size
    for _ in range(count):
        patches = []
        for _ in range(4):
            arr = np.frombuffer(data, dtype="<f4", count=c * h * w, offset=pos).reshape(c, h, w)
            patches.append(arr.copy())
            pos += patch_bytes
        label, kind_idx, lev1, lev2, mos1, mos2 = _PAIR_TRAILER.unpack_from(data, pos)
        pos += _PAIR_TRAILER.size
        instances.append(
            PairInstance(*patches, label, KINDS[kind_idx], lev1, lev2, mos1, mos2)
        )
    return instances


def write_eval_dataset(path, items: list[EvalItem]):
    path = Path(path)
    if items:
        c, h, w = _geometry_of(items[0].ref)
    else:
        c = h = w = 0
    parts = [_PAIR_HEADER.pack(EVAL_MAGIC, FORMAT_VERSION, len(items), c, h, w)]
    for item in items:
        parts.append(np.ascontiguousarray(item.ref, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(item.dist, dtype="<f4").tobytes())
        parts.append(_EVAL_TRAILER.pack(KINDS.index(item.kind), item.level, item.mos))
    path.write_bytes(b"".join(parts))


def read_eval_dataset(path) -> list[EvalItem]:
    data = Path(path).read_bytes()
    if len(data) < _PAIR_HEADER.size:
        raise DataFormatError(f"{path}: file shorter than header")
    magic, version, count, c, h, w = _PAIR_HEADER.unpack_from(data)
    if magic != EVAL_MAGIC:
        raise DataFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    patch_bytes = 4 * c * h * w
    record = 2 * patch_bytes + _EVAL_TRAILER.size
    expected = _PAIR_HEADER.size + count * record
    if len(data) != expected:
        raise DataFormatError(f"{path}: expected {expected} bytes, found {len(data)} (truncated?)")
    items = []
    pos = _PAIR_HEADER.size
    for _ in range(count):
        ref = np.frombuffer(data, dtype="<f4", count=c * h * w, offset=pos).reshape(c, h, w).copy()
        pos += patch_bytes
        dist = np.frombuffer(data, dtype="<f4", count=c * h * w, offset=pos).reshape(c, h, w).copy()
        pos += patch_bytes
        kind_idx, level, mos = _EVAL_TRAILER.unpack_from(data, pos)
        pos += _EVAL_TRAILER.size
        items.append(EvalItem(ref, dist, KINDS[kind_idx], level, mos))
    return items
