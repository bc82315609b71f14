"""Image loading and saving.

Images are plain ``uint8`` numpy arrays shaped ``(H, W)`` or ``(H, W, 3)``.
Binary PPM/PGM (P6/P5, maxval 255) is handled natively; PNG goes through
Pillow.
"""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import DataError, EmptyInputError

IMAGE_SUFFIXES = (".png", ".ppm", ".pgm", ".pnm")


def check_image(img: np.ndarray) -> np.ndarray:
    """Validate an image array and return it as uint8."""
    arr = np.asarray(img)
    if arr.ndim not in (2, 3) or (arr.ndim == 3 and arr.shape[2] not in (1, 3)):
        raise DataError(f"image must be HxW or HxWx3, got shape {arr.shape}")
    if arr.size == 0:
        raise EmptyInputError("image has no pixels")
    if arr.dtype != np.uint8:
        if np.any(arr < 0) or np.any(arr > 255) or np.any(arr != np.round(arr)):
            raise DataError("image samples must be integers in [0, 255]")
        arr = arr.astype(np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    return arr


def to_gray(img: np.ndarray) -> np.ndarray:
    """Luma conversion ``0.299R + 0.587G + 0.114B`` rounded to nearest.

    Grayscale input is returned unchanged, so the conversion is idempotent.
    """
    arr = check_image(img)
    if arr.ndim == 2:
        return arr
    rgb = arr.astype(np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.rint(y), 0, 255).astype(np.uint8)


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        ch = buf[pos:pos + 1]
        if ch == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise DataError("truncated PNM header")
    return buf[start:pos], pos


def decode_pnm(buf: bytes) -> np.ndarray:
    magic, pos = _read_token(buf, 0)
    if magic not in (b"P5", b"P6"):
        raise DataError(f"unsupported PNM type {magic!r}; only binary P5/P6 are read")
    fields = []
    for _ in range(3):
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError as exc:
            raise DataError(f"bad PNM header field {tok!r}") from exc
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"only 8-bit PNM is supported (maxval {maxval})")
    pos += 1  # single whitespace byte before the raster
    channels = 3 if magic == b"P6" else 1
    need = width * height * channels
    raster = buf[pos:pos + need]
    if len(raster) != need:
        raise DataError(f"PNM raster truncated: expected {need} bytes, got {len(raster)}")
    arr = np.frombuffer(raster, dtype=np.uint8)
    shape = (height, width, 3) if channels == 3 else (height, width)
    return arr.reshape(shape).copy()


def encode_pnm(img: np.ndarray) -> bytes:
    arr = check_image(img)
    magic = b"P6" if arr.ndim == 3 else b"P5"
    h, w = arr.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def load_image(path: str | os.PathLike) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if buf[:2] in (b"P5", b"P6"):
        return decode_pnm(buf)
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        from PIL import Image

        with Image.open(path) as im:
            mode = "L" if im.mode in ("L", "I", "I;16", "1", "LA") else "RGB"
            return check_image(np.asarray(im.convert(mode)))
    raise DataError(f"{path}: not a PNG or binary PPM/PGM file")


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temp file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def save_image(path: str | os.PathLike, img: np.ndarray) -> None:
    path = Path(path)
    arr = check_image(img)
    if path.suffix.lower() == ".png":
        import io

        from PIL import Image

        bio = io.BytesIO()
        Image.fromarray(arr).save(bio, format="PNG")
        atomic_write_bytes(path, bio.getvalue())
    else:
        atomic_write_bytes(path, encode_pnm(arr))


def list_images(directory: str | os.PathLike) -> list[Path]:
    """Image files directly inside ``directory``, sorted by name."""
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"{d} is not a directory")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file())
