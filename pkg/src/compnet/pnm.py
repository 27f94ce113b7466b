"""Binary PGM (P5) and PPM (P6) reading and writing, 8-bit only.

A file may hold several images back to back; that is how volumes are stored.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PNMError(ValueError):
    pass


def to_uint8(image: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to 0..255; uint8 input passes through."""
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def _encode(image: np.ndarray, magic: bytes) -> bytes:
    h, w = image.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(image).tobytes()


def encode_pgm(images) -> bytes:
    """Encode one [H,W] image or a [D,H,W] stack."""
    arr = to_uint8(images)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise PNMError(f"PGM needs [H,W] or [D,H,W], got shape {arr.shape}")
    return b"".join(_encode(a, b"P5") for a in arr)


def encode_ppm(rgb: np.ndarray) -> bytes:
    arr = to_uint8(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise PNMError(f"PPM needs [H,W,3], got shape {arr.shape}")
    return _encode(arr, b"P6")


def write_pgm(path, images) -> None:
    Path(path).write_bytes(encode_pgm(images))


def write_ppm(path, rgb) -> None:
    Path(path).write_bytes(encode_ppm(rgb))


def _token(data: bytes, pos: int) -> tuple[bytes, int]:
    while pos < len(data):
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif data[pos:pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PNMError("truncated header")
    return data[start:pos], pos


def decode(data: bytes) -> list[np.ndarray]:
    """Decode every image in a P5/P6 byte stream."""
    images = []
    pos = 0
    while pos < len(data) and data[pos:].strip():
        magic, pos = _token(data, pos)
        if magic not in (b"P5", b"P6"):
            raise PNMError(f"unsupported magic {magic!r}")
        fields = []
        for _ in range(3):
            tok, pos = _token(data, pos)
            try:
                fields.append(int(tok))
            except ValueError as exc:
                raise PNMError(f"bad header field {tok!r}") from exc
        w, h, maxval = fields
        if maxval != 255:
            raise PNMError(f"only maxval 255 is supported, got {maxval}")
        pos += 1  # single whitespace byte after maxval
        channels = 1 if magic == b"P5" else 3
        n = w * h * channels
        if pos + n > len(data):
            raise PNMError("truncated pixel data")
        arr = np.frombuffer(data, dtype=np.uint8, count=n, offset=pos).copy()
        images.append(arr.reshape(h, w) if channels == 1 else arr.reshape(h, w, 3))
        pos += n
    if not images:
        raise PNMError("no image data")
    return images


def read_pgm(path, stack: bool = False) -> np.ndarray:
    """Read P5 image(s) as uint8.

    A single image comes back as [H,W] unless ``stack`` is set; several
    images always come back as [D,H,W].
    """
    images = decode(Path(path).read_bytes())
    if any(im.ndim != 2 for im in images):
        raise PNMError(f"{path}: not a grayscale PGM")
    if len({im.shape for im in images}) != 1:
        raise PNMError(f"{path}: images differ in size")
    return images[0] if len(images) == 1 and not stack else np.stack(images)


def read_ppm(path) -> np.ndarray:
    images = decode(Path(path).read_bytes())
    if len(images) != 1 or images[0].ndim != 3:
        raise PNMError(f"{path}: expected a single P6 image")
    return images[0]
