"""Synthetic fixtures and the IDX image loader."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..ot import EmpiricalMeasure

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

FAMILIES = ("ring", "grid", "moons", "point-mass")


class FormatError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    """``kind="synthetic"`` uses ``family``/``params``/``n``/``seed``;
    ``kind="idx"`` reads ``images_path`` (and optionally ``labels_path``)."""

    kind: str = "synthetic"
    family: str = "ring"
    params: Mapping[str, Any] = field(default_factory=dict)
    n: int = 1000
    seed: int = 0
    images_path: str | None = None
    labels_path: str | None = None

    def __post_init__(self):
        if self.kind not in ("synthetic", "idx"):
            raise ValueError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "synthetic":
            if self.family not in FAMILIES:
                raise ValueError(f"unknown synthetic family {self.family!r}")
            if self.n < 1:
                raise ValueError("n must be positive")
        elif not self.images_path:
            raise ValueError("idx datasets need images_path")

    def to_dict(self) -> dict:
        if self.kind == "idx":
            return {"kind": "idx", "images_path": self.images_path, "labels_path": self.labels_path}
        return {"kind": "synthetic", "family": self.family, "params": dict(self.params),
                "n": self.n, "seed": self.seed}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DatasetSpec":
        return cls(d.get("kind", "synthetic"), d.get("family", "ring"), dict(d.get("params", {})),
                   int(d.get("n", 1000)), int(d.get("seed", 0)), d.get("images_path"),
                   d.get("labels_path"))


def load_dataset(spec: DatasetSpec) -> EmpiricalMeasure:
    if spec.kind == "idx":
        return load_idx(spec.images_path, spec.labels_path)
    return synth_dataset(spec)


def _one_hot(index: np.ndarray, k: int) -> np.ndarray:
    out = np.zeros((len(index), k))
    out[np.arange(len(index)), index] = 1.0
    return out


def synth_dataset(spec: DatasetSpec) -> EmpiricalMeasure:
    """Deterministic 2-d fixtures clamped to [-1, 1]^2.

    ring: ``k`` Gaussian blobs of std ``sigma`` on a circle of ``radius``,
    first centre at angle ``rotation`` degrees; atoms are split evenly
    across blobs. ``labels=True`` appends the one-hot blob index.
    """
    rng = np.random.default_rng(spec.seed)
    p = dict(spec.params)
    n = spec.n
    labels = None
    if spec.family == "ring":
        k = int(p.get("k", 4))
        radius = float(p.get("radius", 0.6))
        sigma = float(p.get("sigma", 0.05))
        if k < 1 or sigma < 0 or radius < 0:
            raise ValueError("ring needs k >= 1, sigma >= 0, radius >= 0")
        labels = np.arange(n) % k
        centres = ring_centres(k, radius, float(p.get("rotation", 0.0)))
        x = centres[labels] + sigma * rng.standard_normal((n, 2))
    elif spec.family == "grid":
        k = int(p.get("k", 3))
        sigma = float(p.get("sigma", 0.05))
        span = float(p.get("span", 0.7))
        if k < 1:
            raise ValueError("grid needs k >= 1")
        ticks = np.linspace(-span, span, k) if k > 1 else np.zeros(1)
        centres = np.array([(a, b) for a in ticks for b in ticks])
        labels = np.arange(n) % len(centres)
        x = centres[labels] + sigma * rng.standard_normal((n, 2))
    elif spec.family == "moons":
        noise = float(p.get("noise", 0.05))
        labels = np.arange(n) % 2
        t = rng.uniform(0.0, np.pi, n)
        x = np.where(labels[:, None] == 0,
                     np.c_[np.cos(t), np.sin(t)],
                     np.c_[1.0 - np.cos(t), 0.5 - np.sin(t)])
        x = (x - [0.5, 0.25]) * 0.6 + noise * rng.standard_normal((n, 2))
    else:
        point = np.asarray(p.get("point", [0.0, 0.0]), dtype=np.float64)
        x = np.tile(point, (n, 1))
    x = np.clip(x, -1.0, 1.0)
    if p.get("labels") and labels is not None:
        x = np.concatenate([x, _one_hot(labels, int(labels.max()) + 1)], axis=1)
    return EmpiricalMeasure.uniform(x)


def synthetic_dim(spec: DatasetSpec) -> int | None:
    """Atom dimension of a synthetic fixture, ``None`` for idx data."""
    if spec.kind != "synthetic":
        return None
    if not spec.params.get("labels") or spec.family == "point-mass":
        return 2
    k = int(spec.params.get("k", 4 if spec.family == "ring" else 3))
    return 2 + {"ring": k, "grid": k * k, "moons": 2}[spec.family]


def ring_centres(k: int, radius: float, rotation_deg: float = 0.0) -> np.ndarray:
    ang = np.deg2rad(rotation_deg) + 2.0 * np.pi * np.arange(k) / k
    return radius * np.c_[np.cos(ang), np.sin(ang)]


def _read_header(raw: bytes, path) -> tuple[int, tuple[int, ...], int]:
    if len(raw) < 4:
        raise FormatError(f"{path}: file too short for an IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    ndim = raw[3]
    if raw[0] != 0 or raw[1] != 0 or raw[2] != 0x08:
        raise FormatError(f"{path}: bad IDX magic 0x{magic:08x}")
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise FormatError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:end])
    return magic, dims, end


def read_idx(path) -> np.ndarray:
    """Raw unsigned-byte IDX array with its declared shape."""
    raw = Path(path).read_bytes()
    _, dims, offset = _read_header(raw, path)
    expected = int(np.prod(dims, dtype=np.int64))
    payload = raw[offset:]
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header declares {expected}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path=None, n_classes: int | None = None) -> EmpiricalMeasure:
    """Images as equal-weight atoms in [-1, 1]^(rows*cols), one-hot labels appended."""
    raw = Path(images_path).read_bytes()
    magic, dims, _ = _read_header(raw, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise FormatError(f"{images_path}: expected image magic 0x00000803, got 0x{magic:08x}")
    images = read_idx(images_path)
    n = dims[0]
    if n == 0:
        raise FormatError(f"{images_path}: no images")
    x = images.reshape(n, -1).astype(np.float64) / 127.5 - 1.0
    if labels_path is not None:
        raw_l = Path(labels_path).read_bytes()
        magic_l, _, _ = _read_header(raw_l, labels_path)
        if magic_l != IDX_LABELS_MAGIC:
            raise FormatError(f"{labels_path}: expected label magic 0x00000801, got 0x{magic_l:08x}")
        labels = read_idx(labels_path).astype(np.int64)
        if labels.shape != (n,):
            raise FormatError(f"{labels_path}: {labels.shape[0]} labels for {n} images")
        k = n_classes if n_classes is not None else int(labels.max()) + 1
        if labels.max() >= k:
            raise FormatError("label value exceeds n_classes")
        x = np.concatenate([x, _one_hot(labels, k)], axis=1)
    return EmpiricalMeasure.uniform(x)


def write_idx(path, array: np.ndarray):
    """Write an unsigned-byte IDX file (used for fixtures and tests)."""
    array = np.asarray(array, dtype=np.uint8)
    header = bytes([0, 0, 0x08, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())
