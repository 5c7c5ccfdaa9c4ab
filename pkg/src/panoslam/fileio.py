"""Readers and writers for the toolkit's on-disk formats.

* PPM: binary P6, maxval 255, RGB uint8.
* PFM: grayscale ``Pf``, scale ``-1.0`` (little-endian), rows stored bottom to top.
  Invalid depth is encoded as 0.0.
* Trajectory: TUM lines ``timestamp tx ty tz qx qy qz qw``; ``#`` starts a comment.
  Poses are camera-in-world.
* PLY: ASCII, ``x y z r g b`` per vertex.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np


class FormatError(ValueError):
    pass


def _read_header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Pull ``count`` whitespace-separated header tokens, skipping ``#`` comments.

    Returns the tokens and the offset of the first payload byte (after the
    single whitespace character that terminates the last token).
    """
    tokens: list[bytes] = []
    i = 0
    n = len(data)
    while len(tokens) < count:
        while i < n and data[i : i + 1].isspace():
            i += 1
        if i < n and data[i : i + 1] == b"#":
            while i < n and data[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i : i + 1].isspace():
            i += 1
        if start == i:
            raise FormatError("truncated header")
        tokens.append(data[start:i])
    if i >= n:
        raise FormatError("missing payload after header")
    return tokens, i + 1


def write_ppm(path, image: np.ndarray) -> None:
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise FormatError(f"PPM needs an (H, W, 3) image, got shape {img.shape}")
    if img.dtype != np.uint8:
        raise FormatError(f"PPM needs uint8 data, got {img.dtype}")
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, off = _read_header_tokens(data, 4)
    if tokens[0] != b"P6":
        raise FormatError(f"not a binary PPM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("malformed PPM header") from exc
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    if w <= 0 or h <= 0:
        raise FormatError("non-positive PPM dimensions")
    need = w * h * 3
    payload = data[off : off + need]
    if len(payload) != need:
        raise FormatError(f"truncated PPM payload: {len(payload)} of {need} bytes")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3).copy()


def write_pfm(path, values: np.ndarray) -> None:
    arr = np.asarray(values)
    if arr.ndim != 2:
        raise FormatError(f"PFM writer expects a 2D array, got shape {arr.shape}")
    arr = arr.astype("<f4")
    if np.isnan(arr).any():
        raise FormatError("NaN values cannot be written; encode invalid depth as 0.0")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a grayscale PFM into a float32 (H, W) array, top row first."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, off = _read_header_tokens(data, 4)
    if tokens[0] != b"Pf":
        raise FormatError(f"not a grayscale PFM (magic {tokens[0]!r})")
    try:
        w, h = int(tokens[1]), int(tokens[2])
        scale = float(tokens[3])
    except ValueError as exc:
        raise FormatError("malformed PFM header") from exc
    if w <= 0 or h <= 0 or scale == 0.0:
        raise FormatError("invalid PFM dimensions or scale")
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * 4
    payload = data[off : off + need]
    if len(payload) != need:
        raise FormatError(f"truncated PFM payload: {len(payload)} of {need} bytes")
    arr = np.frombuffer(payload, dtype=dtype).reshape(h, w)[::-1]
    return arr.astype(np.float32)


@dataclass
class Trajectory:
    """Timestamped camera-in-world poses: quaternions (x, y, z, w) and positions."""

    timestamps: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).reshape(-1)
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.quaternions = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)
        n = len(self.timestamps)
        if len(self.positions) != n or len(self.quaternions) != n:
            raise FormatError("trajectory arrays have mismatched lengths")

    def __len__(self) -> int:
        return len(self.timestamps)

    def validate(self) -> None:
        if np.any(np.diff(self.timestamps) <= 0):
            raise FormatError("trajectory timestamps must be strictly increasing")
        norms = np.linalg.norm(self.quaternions, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise FormatError("trajectory quaternions must be unit length")


def write_trajectory(path, traj: Trajectory, header: str | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        if header:
            for line in header.splitlines():
                fh.write(f"# {line}\n")
        for t, p, q in zip(traj.timestamps, traj.positions, traj.quaternions):
            vals = [t, *p, *q]
            fh.write(" ".join(f"{v:.17g}" for v in vals) + "\n")


def read_trajectory(path) -> Trajectory:
    ts, ps, qs = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.replace(",", " ").split()
            if len(parts) != 8:
                raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            try:
                vals = [float(x) for x in parts]
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: non-numeric field") from exc
            ts.append(vals[0])
            ps.append(vals[1:4])
            qs.append(vals[4:8])
    return Trajectory(np.array(ts), np.array(ps).reshape(-1, 3), np.array(qs).reshape(-1, 4))


def write_ply(path, points: np.ndarray, colors: np.ndarray | None = None) -> None:
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if colors is None:
        cols = np.full((len(pts), 3), 255, dtype=np.uint8)
    else:
        cols = np.asarray(colors).reshape(-1, 3).astype(np.uint8)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(pts)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("property uchar red\nproperty uchar green\nproperty uchar blue\n")
        fh.write("end_header\n")
        for p, c in zip(pts, cols):
            fh.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {c[0]} {c[1]} {c[2]}\n")


def read_ply(path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, encoding="ascii") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != "ply":
        raise FormatError("not a PLY file")
    n = None
    i = 1
    while i < len(lines) and lines[i] != "end_header":
        if lines[i].startswith("element vertex"):
            n = int(lines[i].split()[2])
        i += 1
    if n is None or i == len(lines):
        raise FormatError("malformed PLY header")
    body = lines[i + 1 : i + 1 + n]
    if len(body) != n:
        raise FormatError("truncated PLY body")
    data = np.array([[float(x) for x in ln.split()] for ln in body]).reshape(-1, 6)
    return data[:, :3], data[:, 3:].astype(np.uint8)


def read_calib(path) -> tuple[int, int]:
    with open(path, encoding="utf-8") as fh:
        parts = fh.read().split()
    if len(parts) != 2:
        raise FormatError(f"calib file must hold exactly 'W H', got {parts!r}")
    return int(parts[0]), int(parts[1])


def write_calib(path, width: int, height: int) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{width} {height}\n")


def frame_paths(root, index: int) -> tuple[str, str]:
    return (
        os.path.join(root, "rgb", f"{index:06d}.ppm"),
        os.path.join(root, "depth", f"{index:06d}.pfm"),
    )
