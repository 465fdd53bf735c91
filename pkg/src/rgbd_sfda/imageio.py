"""PNG raster I/O for RGB images, 16-bit disparity maps and 8-bit label maps.

Disparity follows a fixed-point convention: stored value = round(d * 256),
with 0 meaning "no measurement".
"""

import io
import struct
import zlib

import numpy as np
from PIL import Image

DISPARITY_SCALE = 256.0
IGNORE_LABEL = 255
_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class DecodeError(ValueError):
    def __init__(self, path, offset, reason):
        super().__init__(f"{path}: {reason} at byte {offset}")
        self.path = path
        self.offset = offset


def _check_png(buf, path):
    """Walk the chunk list so structural damage is reported with a byte offset."""
    if buf[:8] != _PNG_SIGNATURE:
        raise DecodeError(path, 0, "missing PNG signature")
    off = 8
    seen_end = False
    while off < len(buf):
        if off + 8 > len(buf):
            raise DecodeError(path, off, "truncated chunk header")
        length, ctype = struct.unpack(">I4s", buf[off:off + 8])
        end = off + 12 + length
        if end > len(buf):
            raise DecodeError(path, off, f"chunk {ctype!r} runs past end of file")
        (crc,) = struct.unpack(">I", buf[end - 4:end])
        if zlib.crc32(buf[off + 4:end - 4]) & 0xFFFFFFFF != crc:
            raise DecodeError(path, off, f"CRC mismatch in chunk {ctype!r}")
        off = end
        if ctype == b"IEND":
            seen_end = True
            break
    if not seen_end:
        raise DecodeError(path, off, "missing IEND chunk")


def _read(path, mode):
    with open(path, "rb") as f:
        buf = f.read()
    _check_png(buf, path)
    try:
        img = Image.open(io.BytesIO(buf))
        img.load()
    except Exception as exc:  # Pillow raises a zoo of types
        raise DecodeError(path, 8, f"undecodable image data ({exc})") from exc
    if img.mode != mode:
        raise DecodeError(path, 8, f"expected mode {mode}, found {img.mode}")
    return np.array(img)


def write_rgb(path, rgb):
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected H x W x 3, got {arr.shape}")
    Image.fromarray(np.clip(np.rint(arr), 0, 255).astype(np.uint8)).save(path, format="PNG")


def read_rgb(path):
    return _read(path, "RGB")


def disparity_to_raw(disparity):
    return np.clip(np.rint(np.asarray(disparity, dtype=np.float64) * DISPARITY_SCALE), 0, 65535).astype(np.uint16)


def write_disparity(path, disparity):
    Image.fromarray(disparity_to_raw(disparity)).save(path, format="PNG")


def read_disparity(path):
    """Returns ``(disparity, valid)``; raw 0 reads back as an invalid pixel."""
    raw = _read(path, "I;16").astype(np.uint16)
    return raw / DISPARITY_SCALE, raw > 0


def write_label(path, labels):
    arr = np.asarray(labels)
    if arr.min(initial=0) < 0 or arr.max(initial=0) > 255:
        raise ValueError("label ids must fit in 8 bits")
    Image.fromarray(arr.astype(np.uint8)).save(path, format="PNG")


def read_label(path):
    return _read(path, "L").astype(np.int64)
