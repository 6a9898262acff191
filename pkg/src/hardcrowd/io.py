"""File formats: grid CSV and PGM images, JSON-lines micro frames, metrics CSV."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np


def grid_to_image(values: np.ndarray) -> np.ndarray:
    """``(nx, ny)`` array in cell indexing to image layout: rows are y from the top, columns are x."""
    return np.asarray(values).T[::-1]


def image_to_grid(img: np.ndarray) -> np.ndarray:
    return np.asarray(img)[::-1].T


def write_grid_csv(values: np.ndarray, path) -> None:
    vals = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(vals)):
        raise ValueError(f"refusing to write non-finite values to {path}")
    np.savetxt(path, grid_to_image(vals), delimiter=",", fmt="%.17g")


def read_grid_csv(path) -> np.ndarray:
    return image_to_grid(np.loadtxt(path, delimiter=",", ndmin=2))


def write_pgm(values: np.ndarray, path, vmax: float = 1.0) -> None:
    """8-bit binary PGM of ``values / vmax`` clipped to [0, 1]; the scale is kept in a header comment."""
    vals = np.asarray(values, dtype=float)
    scale = vmax if vmax > 0 else 1.0
    img = np.rint(np.clip(grid_to_image(vals) / scale, 0.0, 1.0) * 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n# scale {scale:.17g}\n{w} {h}\n255\n".encode())
        fh.write(img.tobytes())


def read_pgm(path) -> tuple[np.ndarray, float]:
    """Returns the image in cell indexing (values in 0..255) and the header scale."""
    data = Path(path).read_bytes()
    fields = []
    scale = 1.0
    pos = 0
    while len(fields) < 4:
        end = data.index(b"\n", pos)
        line = data[pos:end].decode()
        pos = end + 1
        if line.startswith("#"):
            parts = line[1:].split()
            if len(parts) == 2 and parts[0] == "scale":
                scale = float(parts[1])
            continue
        fields.extend(line.split())
    w, h = int(fields[1]), int(fields[2])
    img = np.frombuffer(data[pos : pos + w * h], dtype=np.uint8).reshape(h, w)
    return image_to_grid(img), scale


class MetricsWriter:
    """Row-by-row CSV writer that rejects non-finite numbers."""

    def __init__(self, path, columns):
        self.columns = list(columns)
        self._fh = open(path, "w", newline="")
        self._w = csv.writer(self._fh)
        self._w.writerow(self.columns)

    def write(self, row: dict) -> None:
        vals = []
        for c in self.columns:
            v = row[c]
            if isinstance(v, float):
                if not math.isfinite(v):
                    raise ValueError(f"non-finite metric {c}={v}")
                vals.append(repr(v))
            else:
                vals.append(v)
        self._w.writerow(vals)

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path} is empty")
    head, body = rows[0], rows[1:]
    out = {}
    for k, name in enumerate(head):
        out[name] = np.array([float(r[k]) for r in body]) if body else np.zeros(0)
    return out


def frame_record(step: int, time: float, positions, exited, pressures=()) -> dict:
    """One micro frame. Pressures are ``[i, j, p]`` with ``j = -(k + 1)`` for wall segment k."""
    return {
        "step": int(step),
        "time": float(time),
        "positions": np.asarray(positions, dtype=float).tolist(),
        "exited": np.asarray(exited, dtype=bool).astype(int).tolist(),
        "pressures": [[int(i), int(j), float(p)] for i, j, p in pressures],
    }


def write_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, allow_nan=False) + "\n")


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
