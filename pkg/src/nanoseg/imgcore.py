"""Core image types and bit-exact PGM file I/O.

Conventions shared by every module in this package:

* a grayscale image is a 2D ``float64`` array in row-major order with the
  origin at the top-left corner, nominal intensity range ``[0, 1]``;
* a binary mask is a 2D ``bool`` array of the same layout (``True`` = particle);
* a label map is a 2D integer array (0 = background, ``k >= 1`` = component id).

Images are exchanged on disk as binary PGM (P5): ASCII header
``P5\\n<width> <height>\\n<maxval>\\n`` followed by row-major samples,
plain bytes for ``maxval <= 255`` and big-endian 16-bit words otherwise.
"""
from __future__ import annotations

import numpy as np

__all__ = [
    "PgmFormatError",
    "PgmSizeError",
    "as_gray_image",
    "as_mask",
    "normalize",
    "read_pgm",
    "write_pgm",
    "read_mask",
    "write_mask",
]


class PgmFormatError(ValueError):
    """Malformed or unsupported PGM header."""


class PgmSizeError(ValueError):
    """PGM payload does not match the dimensions announced by the header."""


def as_gray_image(arr) -> np.ndarray:
    """Validate and coerce ``arr`` to the 2D float64 image convention."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"expected a 2D image, got shape {a.shape}")
    return a


def as_mask(arr) -> np.ndarray:
    """Validate and coerce ``arr`` to the 2D bool mask convention."""
    a = np.asarray(arr)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"expected a 2D mask, got shape {a.shape}")
    return a.astype(bool)


def normalize(img) -> np.ndarray:
    """Affinely rescale intensities to span [0, 1].

    Constant images map to all zeros. Idempotent on already-normalized input.
    """
    img = as_gray_image(img)
    lo = img.min()
    hi = img.max()
    if hi == lo:
        return np.zeros_like(img)
    return (img - lo) / (hi - lo)


def _tokenize_header(data: bytes):
    """Yield (token, end_offset) for whitespace-separated header tokens.

    Comments (``#`` to end of line) are skipped, as allowed by the PGM
    specification. ``end_offset`` points one past the token's final byte.
    """
    i = 0
    n = len(data)
    while i < n:
        c = data[i : i + 1]
        if c in b" \t\r\n":
            i += 1
        elif c == b"#":
            j = data.find(b"\n", i)
            i = n if j < 0 else j + 1
        else:
            j = i
            while j < n and data[j : j + 1] not in b" \t\r\n#":
                j += 1
            yield data[i:j], j
            i = j


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM (P5) file and scale samples to [0, 1] by 1/maxval."""
    with open(path, "rb") as fh:
        data = fh.read()

    tokens = _tokenize_header(data)

    def next_token(what: str):
        try:
            return next(tokens)
        except StopIteration:
            raise PgmFormatError(f"truncated PGM header: missing {what}") from None

    magic, _ = next_token("magic")
    if magic != b"P5":
        raise PgmFormatError(
            f"unsupported PGM magic {magic.decode('latin-1')!r}: only binary 'P5' is supported"
        )

    fields = {}
    end = 0
    for name in ("width", "height", "maxval"):
        tok, end = next_token(name)
        try:
            fields[name] = int(tok)
        except ValueError:
            raise PgmFormatError(
                f"invalid PGM {name} token {tok.decode('latin-1')!r}"
            ) from None

    width, height, maxval = fields["width"], fields["height"], fields["maxval"]
    if width <= 0 or height <= 0:
        raise PgmFormatError(f"non-positive PGM dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise PgmFormatError(f"PGM maxval {maxval} outside [1, 65535]")

    # Exactly one whitespace byte separates the header from the payload.
    payload = data[end + 1 :]
    dtype = np.dtype(np.uint8) if maxval < 256 else np.dtype(">u2")
    expected = width * height * dtype.itemsize
    if len(payload) < expected:
        raise PgmSizeError(
            f"PGM payload holds {len(payload)} bytes, expected {expected} "
            f"for {width}x{height} at maxval {maxval}"
        )
    samples = np.frombuffer(payload[:expected], dtype=dtype).reshape(height, width)
    return samples.astype(np.float64) / maxval


def write_pgm(img, path, bit_depth: int = 16) -> None:
    """Write ``img`` as binary PGM, clamping to [0, 1] and rounding half up."""
    if bit_depth not in (8, 16):
        raise ValueError(f"bit_depth must be 8 or 16, got {bit_depth}")
    img = as_gray_image(img)
    maxval = (1 << bit_depth) - 1
    quantized = np.floor(np.clip(img, 0.0, 1.0) * maxval + 0.5)
    dtype = np.uint8 if bit_depth == 8 else np.dtype(">u2")
    samples = quantized.astype(dtype)
    height, width = img.shape
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(samples.tobytes())


def write_mask(mask, path) -> None:
    """Store a binary mask as 8-bit PGM with background=0, particle=255."""
    mask = as_mask(mask)
    write_pgm(mask.astype(np.float64), path, bit_depth=8)


def read_mask(path) -> np.ndarray:
    """Read a mask PGM; any sample at or above half intensity counts as True."""
    return read_pgm(path) >= 0.5
