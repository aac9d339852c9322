"""Small file formats: binary PPM/PGM, key-value text records, float record bins, PLY."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_ppm(path, rgb: np.ndarray):
    """Write an (H, W, 3) float image in [0, 1] as binary P6."""
    img = np.clip(np.rint(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    H, W, _ = img.shape
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode() + img.tobytes())


def write_pgm(path, gray: np.ndarray):
    img = np.clip(np.rint(np.asarray(gray, float) * 255.0), 0, 255).astype(np.uint8)
    H, W = img.shape
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + img.tobytes())


def _read_netpbm(path, magic: bytes):
    buf = Path(path).read_bytes()
    tokens = []
    off = 0
    while len(tokens) < 4:
        while buf[off : off + 1].isspace():
            off += 1
        if buf[off : off + 1] == b"#":
            off = buf.index(b"\n", off) + 1
            continue
        end = off
        while not buf[end : end + 1].isspace():
            end += 1
        tokens.append(buf[off:end])
        off = end
    off += 1  # single whitespace before raster
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic.decode()} image, got {tokens[0]!r}")
    W, H, maxval = (int(t) for t in tokens[1:])
    ch = 3 if magic == b"P6" else 1
    data = np.frombuffer(buf, np.uint8, count=W * H * ch, offset=off)
    return data.reshape(H, W, ch).astype(np.float64) / maxval


def read_ppm(path) -> np.ndarray:
    return _read_netpbm(path, b"P6")


def read_pgm(path) -> np.ndarray:
    return _read_netpbm(path, b"P5")[..., 0]


def write_record(path, items: dict):
    """``key v1 v2 ...`` per line; arrays are flattened, shapes are implied by the reader."""
    lines = []
    for k, v in items.items():
        vals = np.atleast_1d(np.asarray(v, dtype=np.float64)).ravel()
        lines.append(k + " " + " ".join(repr(float(x)) for x in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_record(path) -> dict[str, np.ndarray]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, *vals = line.split()
        out[key] = np.array([float(v) for v in vals])
    return out


def write_f32_records(path, *columns: np.ndarray):
    rec = np.concatenate([np.asarray(c, np.float64).reshape(len(c), -1) for c in columns], axis=1)
    Path(path).write_bytes(rec.astype("<f4").tobytes())


def read_f32_records(path, width: int) -> np.ndarray:
    return np.frombuffer(Path(path).read_bytes(), dtype="<f4").reshape(-1, width).astype(np.float64)


_LABEL_DT = np.dtype([("xyz", "<f4", (3,)), ("label", "u1")])


def write_labels(path, xyz: np.ndarray, labels: np.ndarray):
    rec = np.zeros(len(xyz), _LABEL_DT)
    rec["xyz"] = xyz
    rec["label"] = labels
    Path(path).write_bytes(rec.tobytes())


def read_labels(path) -> tuple[np.ndarray, np.ndarray]:
    rec = np.frombuffer(Path(path).read_bytes(), _LABEL_DT)
    return rec["xyz"].astype(np.float64), rec["label"].astype(np.int64)


def write_ply(path, vertices, faces, normals=None, albedo=None, shaded=None):
    """ASCII PLY with per-vertex position, normal and albedo/shaded RGB."""
    V = np.asarray(vertices, float)
    n = np.zeros_like(V) if normals is None else np.asarray(normals, float)
    a = np.zeros_like(V) if albedo is None else np.asarray(albedo, float)
    s = np.zeros_like(V) if shaded is None else np.asarray(shaded, float)
    to8 = lambda c: np.clip(np.rint(c * 255), 0, 255).astype(int)
    a8, s8 = to8(a), to8(s)
    head = [
        "ply", "format ascii 1.0", f"element vertex {len(V)}",
        "property float x", "property float y", "property float z",
        "property float nx", "property float ny", "property float nz",
        "property uchar red", "property uchar green", "property uchar blue",
        "property uchar shaded_red", "property uchar shaded_green", "property uchar shaded_blue",
        f"element face {len(faces)}", "property list uchar int vertex_indices", "end_header",
    ]
    rows = [
        f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} {q[0]:.6f} {q[1]:.6f} {q[2]:.6f} "
        f"{c[0]} {c[1]} {c[2]} {d[0]} {d[1]} {d[2]}"
        for p, q, c, d in zip(V, n, a8, s8)
    ]
    rows += [f"3 {f[0]} {f[1]} {f[2]}" for f in np.asarray(faces, int)]
    tmp = Path(str(path) + ".tmp")
    tmp.write_text("\n".join(head + rows) + "\n")
    tmp.replace(path)


def read_ply(path) -> tuple[np.ndarray, np.ndarray, dict]:
    lines = Path(path).read_text().splitlines()
    nv = nf = 0
    i = 0
    while lines[i] != "end_header":
        if lines[i].startswith("element vertex"):
            nv = int(lines[i].split()[-1])
        if lines[i].startswith("element face"):
            nf = int(lines[i].split()[-1])
        i += 1
    vrows = np.array([l.split() for l in lines[i + 1 : i + 1 + nv]], float).reshape(nv, 12)
    frows = np.array([l.split()[1:4] for l in lines[i + 1 + nv : i + 1 + nv + nf]], int).reshape(nf, 3)
    extra = {"normals": vrows[:, 3:6], "albedo": vrows[:, 6:9] / 255.0, "shaded": vrows[:, 9:12] / 255.0}
    return vrows[:, :3], frows, extra
