"""Image and tensor files.

NetPBM (P2/P3/P5/P6, 8- or 16-bit) is the exact interchange format; PNG is
supported for viewing.  Tensors use a small binary container:

    offset  size      field
    0       4         magic b"TGD1"
    4       4         dtype tag b"f32\\x00"
    8       8         rank R (uint64, little-endian)
    16      8 * R     dims (uint64, little-endian)
    16+8R   4 * prod  payload, row-major float32 little-endian
"""

import hashlib
import json
import logging
from pathlib import Path
import struct
import warnings

import numpy as np

from ._validation import LATENT_DTYPE, check_latent
from .exceptions import ConfigError, ParseError

logger = logging.getLogger(__name__)

TENSOR_MAGIC = b"TGD1"
TENSOR_DTYPE_F32 = b"f32\x00"
_WHITESPACE = b" \t\r\n\v\f"


# -- NetPBM ------------------------------------------------------------------


def _read_token(data, pos):
    """Next header token starting at ``pos``; skips whitespace and comments."""
    n = len(data)
    while pos < n:
        c = data[pos : pos + 1]
        if c in (b"",):
            break
        if c == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c in _WHITESPACE:
            pos += 1
        else:
            break
    if pos >= n:
        raise ParseError("unexpected end of header", pos)
    start = pos
    while pos < n and data[pos : pos + 1] not in _WHITESPACE and data[pos : pos + 1] != b"#":
        pos += 1
    return data[start:pos], start, pos


def _header_int(data, pos, what):
    tok, start, pos = _read_token(data, pos)
    try:
        v = int(tok)
    except ValueError:
        raise ParseError(f"bad {what} {tok!r}", start) from None
    if v <= 0:
        raise ParseError(f"{what} must be positive, got {v}", start)
    return v, start, pos


def parse_netpbm(data):
    """Decode NetPBM bytes into ``(array[C, H, W] of ints, maxval)``."""
    if len(data) < 2:
        raise ParseError("file too short for a NetPBM header", 0)
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise ParseError(f"unsupported NetPBM magic {magic!r}", 0)
    channels = 3 if magic in (b"P3", b"P6") else 1
    width, _, pos = _header_int(data, 2, "width")
    height, _, pos = _header_int(data, pos, "height")
    maxval, maxval_start, pos = _header_int(data, pos, "maxval")
    if maxval > 65535:
        raise ParseError(f"maxval {maxval} exceeds 65535", maxval_start)
    count = width * height * channels
    if magic in (b"P5", b"P6"):
        if pos >= len(data) or data[pos : pos + 1] not in _WHITESPACE:
            raise ParseError("missing whitespace after maxval", pos)
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        need = count * dtype.itemsize
        if len(data) - pos < need:
            raise ParseError(f"truncated raster: need {need} bytes, have {len(data) - pos}", len(data))
        vals = np.frombuffer(data, dtype=dtype, count=count, offset=pos).astype(np.int64)
    else:
        vals = np.empty(count, dtype=np.int64)
        for k in range(count):
            try:
                tok, start, pos = _read_token(data, pos)
            except ParseError as exc:
                raise ParseError(f"truncated raster after {k} of {count} samples", exc.offset) from None
            try:
                vals[k] = int(tok)
            except ValueError:
                raise ParseError(f"bad sample {tok!r}", start) from None
    if vals.size and vals.max() > maxval:
        raise ParseError(f"sample exceeds maxval {maxval}", pos)
    img = vals.reshape(height, width, channels).transpose(2, 0, 1)
    return img, maxval


def encode_netpbm(latent, maxval=255):
    x = check_latent(latent, "image")
    C, H, W = x.shape
    if C not in (1, 3):
        raise ConfigError(f"NetPBM needs 1 or 3 channels, got {C}")
    if not 1 <= maxval <= 65535:
        raise ConfigError(f"maxval must be in [1, 65535], got {maxval}")
    if x.min() < 0.0 or x.max() > 1.0:
        warnings.warn("image values outside [0, 1] were clamped", RuntimeWarning, stacklevel=3)
        x = np.clip(x, 0.0, 1.0)
    q = np.rint(x.astype(np.float64) * maxval).astype(np.int64)
    dtype = ">u2" if maxval > 255 else "u1"
    magic = b"P6" if C == 3 else b"P5"
    header = magic + b"\n%d %d\n%d\n" % (W, H, maxval)
    return header + q.transpose(1, 2, 0).astype(dtype).tobytes()


def read_image(path):
    """Load an image as a float32 ``[C, H, W]`` latent with values in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        from PIL import Image

        with Image.open(path) as im:
            arr = np.asarray(im)
        peak = 65535.0 if arr.dtype == np.uint16 or arr.max(initial=0) > 255 else 255.0
        if arr.ndim == 2:
            arr = arr[:, :, None]
        arr = arr[:, :, :3] if arr.shape[2] >= 3 else arr[:, :, :1]
        return (arr.transpose(2, 0, 1).astype(np.float64) / peak).astype(LATENT_DTYPE)
    data = path.read_bytes()
    ints, maxval = parse_netpbm(data)
    return (ints.astype(np.float64) / maxval).astype(LATENT_DTYPE)


def write_image(latent, path, bit_depth=8):
    """Write ``[C, H, W]`` values in [0, 1]; out-of-range values are clamped with a warning."""
    path = Path(path)
    if bit_depth not in (8, 16):
        raise ConfigError("bit_depth must be 8 or 16")
    if path.suffix.lower() == ".png":
        from PIL import Image

        x = check_latent(latent, "image")
        if x.min() < 0.0 or x.max() > 1.0:
            warnings.warn("image values outside [0, 1] were clamped", RuntimeWarning, stacklevel=2)
            x = np.clip(x, 0.0, 1.0)
        q = np.rint(x.astype(np.float64) * 255).astype(np.uint8)
        img = Image.fromarray(q[0] if q.shape[0] == 1 else q.transpose(1, 2, 0))
        img.save(path, format="PNG")
        return path
    path.write_bytes(encode_netpbm(latent, 255 if bit_depth == 8 else 65535))
    return path


# -- tensors -----------------------------------------------------------------


def encode_tensor(arr):
    # np.require keeps rank 0, unlike ascontiguousarray
    a = np.require(np.asarray(arr, dtype="<f4"), requirements="C")
    head = TENSOR_MAGIC + TENSOR_DTYPE_F32 + struct.pack("<Q", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    return head + a.tobytes()


def decode_tensor(data):
    if len(data) < 16 or data[:4] != TENSOR_MAGIC:
        raise ParseError("not a TGD1 tensor file", 0)
    if data[4:8] != TENSOR_DTYPE_F32:
        raise ParseError(f"unsupported dtype tag {data[4:8]!r}", 4)
    (rank,) = struct.unpack_from("<Q", data, 8)
    if rank > 32:
        raise ParseError(f"implausible rank {rank}", 8)
    if len(data) < 16 + 8 * rank:
        raise ParseError("truncated dims", len(data))
    dims = struct.unpack_from(f"<{rank}Q", data, 16)
    off = 16 + 8 * rank
    count = int(np.prod(dims, dtype=np.int64))
    if len(data) - off != 4 * count:
        raise ParseError(f"payload is {len(data) - off} bytes, expected {4 * count}", off)
    return np.frombuffer(data, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def write_tensor(arr, path):
    path = Path(path)
    path.write_bytes(encode_tensor(arr))
    return path


def read_tensor(path):
    return decode_tensor(Path(path).read_bytes())


# -- run directories -----------------------------------------------------------


def sha256_file(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(run_dir, seed, extra=None):
    """Hash every file under ``run_dir`` into ``manifest.json``."""
    run_dir = Path(run_dir)
    files = sorted(p for p in run_dir.rglob("*") if p.is_file() and p.name != "manifest.json")
    manifest = {
        "seed": seed,
        "artifacts": {p.relative_to(run_dir).as_posix(): sha256_file(p) for p in files},
    }
    if extra:
        manifest.update(extra)
    out = run_dir / "manifest.json"
    out.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest
