"""Raster primitives shared by the whole pipeline.

Rasters are plain numpy arrays: probability/intensity planes are ``float32``
arrays of shape ``(H, W, C)`` (channel-last), instance maps are non-negative
integer arrays of shape ``(H, W)`` with 0 reserved for background, and
semantic maps are integer arrays of class indices with 0 = background.

Also hosts the ``NTNS`` tensor file format and PNG helpers.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

__all__ = [
    "TensorFormatError",
    "BadMagicError",
    "TruncatedPayloadError",
    "DimsOverflowError",
    "connected_components",
    "fill_holes",
    "solidity",
    "convex_hull",
    "polygon_area",
    "read_tensor",
    "write_tensor",
    "read_png",
    "write_png",
]

_STRUCT_4 = ndimage.generate_binary_structure(2, 1)
_STRUCT_8 = ndimage.generate_binary_structure(2, 2)


def _as_binary(mask: np.ndarray) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim == 3 and mask.shape[-1] == 1:
        mask = mask[..., 0]
    if mask.ndim != 2:
        raise ValueError(f"expected a single 2-D plane, got shape {mask.shape}")
    if mask.dtype == bool:
        return mask
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask must be binary (values in {0, 1})")
    return mask.astype(bool)


def connected_components(mask: np.ndarray, connectivity: int = 8) -> np.ndarray:
    """Label maximal connected foreground regions of a binary plane.

    Labels are ``1..K`` in ascending raster order of each region's first pixel.

    Args:
        mask: binary ``(H, W)`` plane (bool or {0, 1}).
        connectivity: 4 or 8.

    Returns:
        ``int32`` instance map.
    """
    binary = _as_binary(mask)
    if connectivity == 8:
        structure = _STRUCT_8
    elif connectivity == 4:
        structure = _STRUCT_4
    else:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    # ndimage.label scans in raster order, so the first-pixel ordering holds.
    labels, _ = ndimage.label(binary, structure=structure)
    return labels.astype(np.int32, copy=False)


def fill_holes(mask: np.ndarray) -> np.ndarray:
    """Fill background cavities not 4-connected to the image border."""
    binary = _as_binary(mask)
    return ndimage.binary_fill_holes(binary, structure=_STRUCT_4)


def convex_hull(points: np.ndarray) -> np.ndarray:
    """Convex hull of 2-D points (Andrew's monotone chain), counter-clockwise.

    Collinear points on hull edges are dropped.
    """
    pts = np.unique(np.asarray(points, dtype=np.int64), axis=0)
    if len(pts) <= 2:
        return pts
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = [tuple(p) for p in pts[order]]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1], dtype=np.int64)


def polygon_area(vertices: np.ndarray) -> float:
    """Shoelace area of a simple polygon given in order."""
    v = np.asarray(vertices, dtype=np.float64)
    if len(v) < 3:
        return 0.0
    y, x = v[:, 0], v[:, 1]
    return 0.5 * abs(float(np.dot(y, np.roll(x, -1)) - np.dot(x, np.roll(y, -1))))


def _boundary_corner_points(binary: np.ndarray) -> np.ndarray:
    # Interior corners never lie on the hull; only corners of pixels on the
    # mask's outline are needed.
    outline = binary & ~ndimage.binary_erosion(binary, structure=_STRUCT_4)
    ys, xs = np.nonzero(outline)
    corners = np.concatenate(
        [
            np.stack([ys, xs], axis=1),
            np.stack([ys + 1, xs], axis=1),
            np.stack([ys, xs + 1], axis=1),
            np.stack([ys + 1, xs + 1], axis=1),
        ]
    )
    return corners


def solidity(mask: np.ndarray) -> float:
    """Pixel count divided by the area of the convex hull of pixel corners.

    A single pixel has hull area 1, so solidity is always in (0, 1].
    """
    binary = _as_binary(mask)
    area = int(binary.sum())
    if area == 0:
        raise ValueError("solidity of an empty mask is undefined")
    hull = convex_hull(_boundary_corner_points(binary))
    return area / polygon_area(hull)


# --------------------------------------------------------------------------
# NTNS tensor files
# --------------------------------------------------------------------------

MAGIC = b"NTNS"
_DTYPES = {0: np.dtype("<u1"), 1: np.dtype("<u2"), 2: np.dtype("<f4")}
_CODES = {np.dtype(v).newbyteorder("="): k for k, v in _DTYPES.items()}
_MAX_ELEMENTS = 1 << 34


class TensorFormatError(ValueError):
    """Malformed NTNS file."""

    code = 1


class BadMagicError(TensorFormatError):
    code = 2


class TruncatedPayloadError(TensorFormatError):
    code = 3


class DimsOverflowError(TensorFormatError):
    code = 4


def _dtype_code(dtype: np.dtype) -> int:
    key = np.dtype(dtype).newbyteorder("=")
    if key not in _CODES:
        raise TypeError(f"unsupported tensor dtype {dtype}; use uint8, uint16 or float32")
    return _CODES[key]


def write_tensor(array: np.ndarray, path: str | Path) -> None:
    """Write ``array`` as an NTNS file (u8, u16 or f32, little-endian)."""
    array = np.asarray(array)
    code = _dtype_code(array.dtype)
    header = MAGIC + struct.pack("<BI", code, array.ndim)
    header += struct.pack(f"<{array.ndim}I", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_DTYPES[code]).tobytes()
    Path(path).write_bytes(header + payload)


def read_tensor(path: str | Path) -> np.ndarray:
    """Read an NTNS file written by :func:`write_tensor`."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: bad magic {raw[:4]!r}")
    if len(raw) < 9:
        raise TruncatedPayloadError(f"{path}: truncated header")
    code, ndim = struct.unpack_from("<BI", raw, 4)
    if code not in _DTYPES:
        raise TensorFormatError(f"{path}: unknown dtype code {code}")
    offset = 9 + 4 * ndim
    if len(raw) < offset:
        raise TruncatedPayloadError(f"{path}: truncated dims")
    dims = struct.unpack_from(f"<{ndim}I", raw, 9)
    count = 1
    for d in dims:
        count *= d
        if count > _MAX_ELEMENTS:
            raise DimsOverflowError(f"{path}: declared size overflows ({dims})")
    dtype = _DTYPES[code]
    expected = count * dtype.itemsize
    if len(raw) - offset < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(raw) - offset} bytes, header declares {expected}"
        )
    if len(raw) - offset > expected:
        raise TensorFormatError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def read_png(path: str | Path) -> np.ndarray:
    """Read an 8-bit RGB PNG as float32 in [0, 1]."""
    with Image.open(path) as im:
        rgb = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return rgb.astype(np.float32) / 255.0


def write_png(image: np.ndarray, path: str | Path) -> None:
    """Write a float image in [0, 1] (or uint8) as 8-bit RGB PNG."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(image).save(path, format="PNG")
