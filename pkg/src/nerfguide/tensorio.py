"""Binary file formats: named-tensor checkpoints, float image dumps and PPM.

Checkpoint (little-endian): magic ``NFD1``, u32 version, then until EOF one
record per tensor: u32 name length, UTF-8 name, u32 rank, u32 dims, float32
payload in C order.

Float image: magic ``NFDI``, u32 H, W, C, then row-major float32.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"NFD1"
CKPT_VERSION = 1
IMAGE_MAGIC = b"NFDI"


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION)]
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype="<f4")  # not ascontiguousarray: that promotes 0-d to 1-d
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    out = {}
    while pos < len(buf):
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        dims = struct.unpack_from(f"<{rank}I", buf, pos)
        pos += 4 * rank
        count = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims).copy()
        pos += 4 * count
    return out


def save_float_image(path, img: np.ndarray) -> None:
    a = np.asarray(img)
    if a.ndim == 2:
        a = a[..., None]
    h, w, c = a.shape
    Path(path).write_bytes(
        IMAGE_MAGIC + struct.pack("<3I", h, w, c) + np.ascontiguousarray(a, dtype="<f4").tobytes()
    )


def load_float_image(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != IMAGE_MAGIC:
        raise ValueError(f"{path}: not a float image (bad magic)")
    h, w, c = struct.unpack_from("<3I", buf, 4)
    return np.frombuffer(buf, dtype="<f4", count=h * w * c, offset=16).reshape(h, w, c).copy()


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(255 * np.clip(np.asarray(img, dtype=np.float64), 0, 1)).astype(np.uint8)


def save_ppm(path, img: np.ndarray) -> None:
    a = to_uint8(img)
    if a.ndim == 2:
        a = np.repeat(a[..., None], 3, axis=2)
    h, w, _ = a.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + a[..., :3].tobytes())


def load_ppm(path) -> np.ndarray:
    """Read a binary P6 file written by :func:`save_ppm`; returns uint8 (H, W, 3)."""
    buf = Path(path).read_bytes()
    fields = []
    pos = 0
    while len(fields) < 4:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        end = pos
        while not buf[end:end + 1].isspace():
            end += 1
        fields.append(buf[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: only P6 with maxval 255 is supported")
    w, h = int(fields[1]), int(fields[2])
    pos += 1
    return np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos).reshape(h, w, 3).copy()
