"""
augment.py – DepthAug3D
Seeded random affine augmentation (zoom, shift, rotation) and the three
training-set expansion strategies:

    A  one joint zoom+shift+rotation warp per sample        (+N samples)
    B  one zoom-only, one shift-only, one rotation-only warp (+3N samples)
    C  three independent joint warps per sample              (+3N samples)

Transforms act about the volume center, composed scale -> rotate -> translate.
Rotation is Rz @ Ry @ Rx (extrinsic x, y, z) with angles in degrees; shifts
are fractions of each axis length.
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Any, Dict, List, NamedTuple, Sequence, Set, Tuple

import numpy as np
from scipy.spatial.transform import Rotation

from helpers import mix_seed, write_jsonl
from volume import AffineTransform, Dims, Volume3D, warp_affine

logger = logging.getLogger(__name__)

KINDS = ('zoom', 'shift', 'rotation', 'all')

# Generator algorithm used by every seeded stream in the toolkit
RNG_ALGORITHM = 'numpy.PCG64'


# ── Seeded generator ──────────────────────────────────────────────────────────

class SeededRng:
    """
    Deterministic random stream (numpy PCG64) with a draw-position counter,
    so augmentation logs can say exactly where in the stream a draw came from.
    """

    algorithm = RNG_ALGORITHM

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.generator = np.random.Generator(np.random.PCG64(self.seed))
        self.position = 0

    def uniform(self, low: float, high: float, size=None):
        self.position += 1
        return self.generator.uniform(low, high, size)

    def random(self, size=None):
        self.position += 1
        return self.generator.random(size)

    def normal(self, loc: float = 0.0, scale: float = 1.0, size=None):
        self.position += 1
        return self.generator.normal(loc, scale, size)

    def permutation(self, n: int) -> np.ndarray:
        self.position += 1
        return self.generator.permutation(n)

    def spawn(self, tag: Any) -> 'SeededRng':
        """Independent child stream keyed by *tag*."""
        return SeededRng(mix_seed(self.seed, tag))


# ── Parameters ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class AugmentRanges:
    """Sampling bounds (defaults: zoom ±20%, shift < 0.4 of each axis, ±5°)."""

    zoom: Tuple[float, float] = (0.8, 1.2)
    shift: float = 0.4
    rotation: float = 5.0

    @classmethod
    def identity(cls) -> 'AugmentRanges':
        return cls(zoom=(1.0, 1.0), shift=0.0, rotation=0.0)

    @classmethod
    def from_config(cls, section: Dict[str, Any]) -> 'AugmentRanges':
        return cls(
            zoom=tuple(section.get('zoom_range', (0.8, 1.2))),
            shift=float(section.get('shift_limit', 0.4)),
            rotation=float(section.get('rotation_limit', 5.0)),
        )


@dataclass(frozen=True)
class AugmentParams:
    zoom: float = 1.0
    shift: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    angles: Tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, 'zoom', float(self.zoom))
        object.__setattr__(self, 'shift', tuple(float(s) for s in self.shift))
        object.__setattr__(self, 'angles', tuple(float(a) for a in self.angles))
        if not self.zoom > 0:
            raise ValueError(f"zoom must be positive, got {self.zoom}")

    def within(self, ranges: AugmentRanges) -> bool:
        lo, hi = ranges.zoom
        return (lo <= self.zoom <= hi
                and all(abs(s) <= ranges.shift for s in self.shift)
                and all(abs(a) <= ranges.rotation for a in self.angles))

    def to_record(self) -> Dict[str, Any]:
        return {'zoom': self.zoom, 'shift': list(self.shift), 'angles': list(self.angles)}


def sample_params(kind: str, rng: SeededRng, ranges: AugmentRanges = AugmentRanges()) -> AugmentParams:
    """
    Draw augmentation parameters uniformly within *ranges*. Fields not
    selected by *kind* keep identity values; ``all`` draws zoom, then shift,
    then angles.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}, got '{kind}'")

    zoom, shift, angles = 1.0, (0.0, 0.0, 0.0), (0.0, 0.0, 0.0)
    if kind in ('zoom', 'all'):
        zoom = float(rng.uniform(ranges.zoom[0], ranges.zoom[1]))
    if kind in ('shift', 'all'):
        shift = tuple(np.asarray(rng.uniform(-ranges.shift, ranges.shift, 3), dtype=np.float64))
    if kind in ('rotation', 'all'):
        angles = tuple(np.asarray(rng.uniform(-ranges.rotation, ranges.rotation, 3), dtype=np.float64))
    return AugmentParams(zoom=zoom, shift=shift, angles=angles)


def to_affine(p: AugmentParams, dims: Dims) -> AffineTransform:
    """Compose scale -> rotate -> translate about the center of a *dims* grid."""
    dims_arr = np.asarray(dims, dtype=np.float64)
    if dims_arr.shape != (3,) or np.any(dims_arr < 1):
        raise ValueError(f"dims must be three positive ints, got {dims}")

    if any(p.angles):
        rotation = Rotation.from_euler('xyz', p.angles, degrees=True).as_matrix()
    else:
        rotation = np.eye(3)
    linear = rotation @ (p.zoom * np.eye(3))
    translation = np.asarray(p.shift, dtype=np.float64) * dims_arr
    return AffineTransform(linear, translation, (dims_arr - 1.0) / 2.0)


# ── Strategies ────────────────────────────────────────────────────────────────

class Strategy(str, Enum):
    A = 'A'
    B = 'B'
    C = 'C'

    @property
    def kinds(self) -> Tuple[str, ...]:
        return {
            Strategy.A: ('all',),
            Strategy.B: ('zoom', 'shift', 'rotation'),
            Strategy.C: ('all', 'all', 'all'),
        }[self]

    @property
    def multiplier(self) -> int:
        return len(self.kinds)


class AugmentedSet(NamedTuple):
    samples: List[Tuple[Volume3D, int]]
    log: List[Dict[str, Any]]


def augment_set(samples: Sequence[Tuple[Volume3D, int]],
                strategy,
                rng: SeededRng,
                ranges: AugmentRanges = AugmentRanges(),
                keep_originals: bool = True) -> AugmentedSet:
    """
    Expand a training set. Originals come first (unless *keep_originals* is
    false), followed by the augmented samples in sample-major order.

    Returns:
        AugmentedSet(samples, log); one log record per augmented sample.
    """
    if not samples:
        raise ValueError("augment_set needs at least one sample")
    strategy = Strategy(strategy)

    out: List[Tuple[Volume3D, int]] = list(samples) if keep_originals else []
    log: List[Dict[str, Any]] = []

    for index, (vol, label) in enumerate(samples):
        for copy_no, kind in enumerate(strategy.kinds):
            position = rng.position
            params = sample_params(kind, rng, ranges)
            warped = warp_affine(vol, to_affine(params, vol.dims), vol.dims)
            aug_id = f"{vol.source_id or index}#aug{strategy.value}{copy_no}"
            warped = warped.with_data(warped.data, step=f"augment:{kind}", source_id=aug_id)
            out.append((warped, label))
            log.append({
                'source_id': vol.source_id or str(index),
                'augmented_id': aug_id,
                'label': int(label),
                'strategy': strategy.value,
                'kind': kind,
                'seed': rng.seed,
                'seed_position': position,
                'algorithm': rng.algorithm,
                'composition': 'scale>rotate(zyx)>translate@center',
                **params.to_record(),
            })

    logger.debug("Augmented %d samples with strategy %s -> %d total", len(samples), strategy.value, len(out))
    return AugmentedSet(out, log)


def replay_augmentation(vol: Volume3D, record: Dict[str, Any]) -> Volume3D:
    """Rebuild one augmented volume exactly from its log record."""
    params = AugmentParams(record['zoom'], record['shift'], record['angles'])
    return warp_affine(vol, to_affine(params, vol.dims), vol.dims)


def write_augmentation_log(path, log: Sequence[Dict[str, Any]]) -> None:
    write_jsonl(path, log)


def source_ids(log: Sequence[Dict[str, Any]]) -> Set[str]:
    """Distinct source ids that contributed augmented samples."""
    return {r['source_id'] for r in log}
