"""
volume.py – DepthAug3D
3D scalar-field container, trilinear resampling, resizing and nonzero-voxel
intensity normalization, plus the on-disk volume container.

Axis convention (fixed everywhere, including files):
    x = sagittal index, y = coronal index, z = axial index.
Arrays are stored with shape (nx, ny, nz) in C order, so z varies fastest.

Volume file layout (little-endian):
    4s   magic  b'DAV3'
    u32  format version (1)
    u32  nx, u32 ny, u32 nz
    f32  nx*ny*nz samples in the axis order above
A JSON sidecar ``<file>.json`` carries provenance (source id, steps applied).
"""

import logging
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from errors import AllZeroVolume, MissingFile, SingularTransform, VolumeFormatError
from helpers import atomic_write_bytes, read_json, write_json

logger = logging.getLogger(__name__)

Dims = Tuple[int, int, int]

VOLUME_MAGIC = b'DAV3'
VOLUME_VERSION = 1
_HEADER = struct.Struct('<4sIIII')
AXIS_ORDER = 'x=sagittal,y=coronal,z=axial;C-order,z-fastest'

# Below this |det| a linear map is treated as non-invertible
_SINGULAR_TOL = 1e-12


# ── Types ─────────────────────────────────────────────────────────────────────

@dataclass(frozen=True, eq=False)
class Volume3D:
    """Immutable real-valued 3D scalar field."""

    data: np.ndarray
    source_id: str = ''
    steps: Tuple[str, ...] = ()
    degenerate: bool = False

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise ValueError(f"Volume data must be a non-empty 3D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Volume data must be finite (no NaN/Inf)")
        arr.flags.writeable = False
        object.__setattr__(self, 'data', arr)
        object.__setattr__(self, 'steps', tuple(self.steps))

    @property
    def dims(self) -> Dims:
        return tuple(int(n) for n in self.data.shape)

    @property
    def center(self) -> np.ndarray:
        return (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0

    def with_data(self, data: np.ndarray, step: str = '', **changes) -> 'Volume3D':
        """Return a new volume with *data*, appending *step* to the provenance."""
        steps = self.steps + ((step,) if step else ())
        return replace(self, data=data, steps=steps, **changes)


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """
    Map p -> linear @ (p - center) + center + translation, in voxel units.
    """

    linear: np.ndarray
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    center: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        linear = np.array(self.linear, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        center = np.array(self.center, dtype=np.float64).reshape(3)
        for arr in (linear, translation, center):
            arr.flags.writeable = False
        object.__setattr__(self, 'linear', linear)
        object.__setattr__(self, 'translation', translation)
        object.__setattr__(self, 'center', center)

    @classmethod
    def identity(cls, center: Sequence[float] = (0.0, 0.0, 0.0)) -> 'AffineTransform':
        return cls(np.eye(3), np.zeros(3), np.asarray(center, dtype=np.float64))

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.linear))

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.linear, np.eye(3)) and not np.any(self.translation))

    def apply(self, p: Sequence[float]) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64)
        return self.linear @ (p - self.center) + self.center + self.translation

    def inverse(self) -> 'AffineTransform':
        """
        Raises:
            SingularTransform: If the linear part is not invertible.
        """
        if abs(self.det) < _SINGULAR_TOL:
            raise SingularTransform(f"Affine transform is singular (det={self.det:.3e})")
        inv = np.linalg.inv(self.linear)
        return AffineTransform(inv, -inv @ self.translation, self.center)

    def compose(self, other: 'AffineTransform') -> 'AffineTransform':
        """Transform equal to applying *other* first, then self (about self's center)."""
        linear = self.linear @ other.linear
        offset_other = other.center + other.translation - other.linear @ other.center
        offset = self.linear @ offset_other + self.center + self.translation - self.linear @ self.center
        return AffineTransform(linear, offset - self.center + linear @ self.center, self.center)


# ── Sampling & warping ────────────────────────────────────────────────────────

def trilinear_sample(vol: Volume3D, p: Sequence[float]) -> float:
    """
    Trilinear interpolation of the 8 voxels around continuous coordinate *p*.
    Neighbours outside the grid contribute the fill value 0.
    """
    coords = np.asarray(p, dtype=np.float64).reshape(3, 1)
    value = ndimage.map_coordinates(
        vol.data, coords, order=1, mode='grid-constant', cval=0.0, prefilter=False,
    )
    return float(value[0])


def warp_affine(vol: Volume3D, t: AffineTransform, out_dims: Dims = None) -> Volume3D:
    """
    Resample *vol* under *t* by inverse mapping: output voxel q holds
    trilinear_sample(vol, t^-1(q)); reads outside the input are 0.

    Raises:
        SingularTransform: If *t* is not invertible.
        ValueError:        If *out_dims* is not positive.
    """
    out_dims = tuple(int(n) for n in (out_dims or vol.dims))
    if len(out_dims) != 3 or min(out_dims) < 1:
        raise ValueError(f"out_dims must be three positive ints, got {out_dims}")

    inv = t.inverse()
    if inv.is_identity() and out_dims == vol.dims:
        return vol.with_data(vol.data, step='warp:identity')

    # input = inv.linear @ (q - c) + c + inv.translation
    offset = inv.center - inv.linear @ inv.center + inv.translation
    out = ndimage.affine_transform(
        vol.data, inv.linear, offset=offset, output_shape=out_dims,
        order=1, mode='grid-constant', cval=0.0, prefilter=False,
    )
    return vol.with_data(out, step='warp:affine')


def resize(vol: Volume3D, target: Dims) -> Volume3D:
    """
    Resample onto a *target* grid with per-axis scale target_i/dims_i on the
    origin-aligned grid (output q reads input q * dims/target). Edges are
    clamped so constant volumes stay constant.
    """
    target = tuple(int(n) for n in target)
    if len(target) != 3 or min(target) < 1:
        raise ValueError(f"target must be three positive ints, got {target}")
    if target == vol.dims:
        return vol.with_data(vol.data, step=f"resize:{target}")

    scale = np.asarray(vol.dims, dtype=np.float64) / np.asarray(target, dtype=np.float64)
    out = ndimage.affine_transform(
        vol.data, np.diag(scale), offset=0.0, output_shape=target,
        order=1, mode='nearest', prefilter=False,
    )
    return vol.with_data(out, step=f"resize:{target}")


# ── Intensity normalization ──────────────────────────────────────────────────

def normalize_intensity(vol: Volume3D, scale_variance: bool = True) -> Volume3D:
    """
    Standardise the strictly-nonzero voxels by their own mean (and std when
    *scale_variance*); zero background stays 0.

    If the nonzero voxels have zero spread they all become 0 and the result
    is flagged ``degenerate``.

    Raises:
        AllZeroVolume: If the volume has no nonzero voxel.
    """
    mask = vol.data != 0
    if not mask.any():
        raise AllZeroVolume(f"Volume '{vol.source_id}' has no nonzero voxel")

    values = vol.data[mask]
    mu = values.mean()
    sigma = values.std()
    out = np.zeros_like(vol.data)

    if sigma == 0:
        logger.warning("Degenerate intensity spread in volume '%s'; nonzero voxels set to 0", vol.source_id)
        return vol.with_data(out, step='normalize:degenerate', degenerate=True)

    out[mask] = (values - mu) / sigma if scale_variance else values - mu
    step = 'normalize:zscore-nonzero' if scale_variance else 'normalize:center-nonzero'
    return vol.with_data(out, step=step)


def preprocess_volume(vol: Volume3D, target: Dims, scale_variance: bool = True) -> Volume3D:
    """Full preprocessing: one composite scaling warp, then normalization."""
    return normalize_intensity(resize(vol, target), scale_variance=scale_variance)


def median_planes(vol: Volume3D) -> Dict[str, np.ndarray]:
    """Mid-slices on the sagittal, coronal and axial planes."""
    nx, ny, nz = vol.dims
    return {
        'sagittal': vol.data[nx // 2, :, :],
        'coronal': vol.data[:, ny // 2, :],
        'axial': vol.data[:, :, nz // 2],
    }


# ── File I/O ──────────────────────────────────────────────────────────────────

def sidecar_path(path: Union[str, Path]) -> Path:
    path = Path(path)
    return path.with_name(path.name + '.json')


def write_volume(path: Union[str, Path], vol: Volume3D) -> None:
    """Write *vol* in the binary container and its JSON provenance sidecar."""
    header = _HEADER.pack(VOLUME_MAGIC, VOLUME_VERSION, *vol.dims)
    payload = vol.data.astype('<f4').tobytes(order='C')
    atomic_write_bytes(path, header + payload)
    write_json(sidecar_path(path), {
        'source_id': vol.source_id,
        'steps': list(vol.steps),
        'degenerate': vol.degenerate,
        'axis_order': AXIS_ORDER,
        'dims': list(vol.dims),
    })


def read_volume(path: Union[str, Path]) -> Volume3D:
    """
    Read a volume container (and its sidecar when present).

    Raises:
        MissingFile:       If *path* does not exist.
        VolumeFormatError: On bad magic, version or payload size.
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except FileNotFoundError:
        raise MissingFile(f"Volume file not found: {path}")

    if len(raw) < _HEADER.size:
        raise VolumeFormatError(f"Truncated volume header in {path}")
    magic, version, nx, ny, nz = _HEADER.unpack_from(raw)
    if magic != VOLUME_MAGIC:
        raise VolumeFormatError(f"Bad magic {magic!r} in {path}")
    if version != VOLUME_VERSION:
        raise VolumeFormatError(f"Unsupported volume format version {version} in {path}")
    expected = nx * ny * nz * 4
    if len(raw) - _HEADER.size != expected or expected == 0:
        raise VolumeFormatError(f"Payload size mismatch in {path}: expected {expected} bytes")

    data = np.frombuffer(raw, dtype='<f4', offset=_HEADER.size).reshape(nx, ny, nz)

    meta = {}
    side = sidecar_path(path)
    if side.exists():
        meta = read_json(side)
    return Volume3D(
        data.astype(np.float64),
        source_id=meta.get('source_id', path.stem),
        steps=tuple(meta.get('steps', ())),
        degenerate=bool(meta.get('degenerate', False)),
    )
