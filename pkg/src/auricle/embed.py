"""Embedding backends, the built-in descriptor, standardization, and the store format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .onnx_backend import OnnxError, OnnxModel
from .preprocess import EarImage, luma
from .validation import check_matrix, check_rgb_image

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)

BUILTIN_DIM = 14 * 14 * 8  # 1568


@dataclass(frozen=True)
class BackendSpec:
    kind: str  # "model_file" | "builtin"
    name: str
    model_path: str | None = None
    output_name: str | None = None
    input_normalization: str = "imagenet_mean_std"  # or "zero_one"

    def __post_init__(self):
        if self.kind not in ("model_file", "builtin"):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.kind == "model_file" and not self.model_path:
            raise ValueError("model_file backend requires model_path")
        if self.input_normalization not in ("zero_one", "imagenet_mean_std"):
            raise ValueError(f"unknown input normalization {self.input_normalization!r}")
        if not self.name:
            raise ValueError("backend name must be nonempty")


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray
    backend: str
    record: str  # record key

    def __post_init__(self):
        if np.asarray(self.values).ndim != 1:
            raise ValueError("embedding values must be 1-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("embedding contains non-finite values")


def _as_pixels(img) -> np.ndarray:
    if isinstance(img, EarImage):
        return img.pixels
    return check_rgb_image(np.asarray(img))


def builtin_descriptor(img) -> np.ndarray:
    """Model-free descriptor: gradient-orientation histograms on the luma plane.

    Central-difference gradients (replicated borders), 14x14 cells of 16x16 px,
    8 unsigned orientation bins over [0, pi) weighted by gradient magnitude,
    concatenated row-major and L2-normalized (zero vector stays zero).
    """
    pixels = _as_pixels(img)
    if pixels.shape[:2] != (224, 224):
        raise ValueError("builtin descriptor expects a canonical 224x224 EarImage")
    plane = luma(pixels).astype(np.float64)
    padded = np.pad(plane, 1, mode="edge")
    gx = (padded[1:-1, 2:] - padded[1:-1, :-2]) / 2.0
    gy = (padded[2:, 1:-1] - padded[:-2, 1:-1]) / 2.0
    mag = np.hypot(gx, gy)
    theta = np.mod(np.arctan2(gy, gx), np.pi)
    bins = np.minimum((theta / (np.pi / 8.0)).astype(np.intp), 7)

    cell_r = np.arange(224) // 16
    cell_c = np.arange(224) // 16
    flat = ((cell_r[:, None] * 14 + cell_c[None, :]) * 8 + bins).ravel()
    hist = np.zeros(BUILTIN_DIM, dtype=np.float64)
    np.add.at(hist, flat, mag.ravel())
    norm = np.linalg.norm(hist)
    if norm > 0.0:
        hist /= norm
    return hist


class BuiltinBackend:
    """Deterministic model-free backend."""

    def __init__(self, spec: BackendSpec):
        self.spec = spec
        self.name = spec.name
        self.dim = BUILTIN_DIM

    def embed(self, img) -> np.ndarray:
        return builtin_descriptor(img)


class OnnxBackend:
    """ONNX model backend; spatial outputs are globally average-pooled."""

    def __init__(self, spec: BackendSpec):
        self.spec = spec
        self.name = spec.name
        path = Path(spec.model_path)
        if not path.is_file():
            raise FileNotFoundError(f"model file not found: {path}")
        self.model = OnnxModel(path)
        probe = self._forward(np.zeros((224, 224, 3), dtype=np.uint8))
        self.dim = int(probe.shape[0])

    def _normalize(self, pixels: np.ndarray) -> np.ndarray:
        x = pixels.astype(np.float32) / np.float32(255.0)
        if self.spec.input_normalization == "imagenet_mean_std":
            x = (x - IMAGENET_MEAN) / IMAGENET_STD
        return np.ascontiguousarray(x.transpose(2, 0, 1)[None, :, :, :])

    def _forward(self, pixels: np.ndarray) -> np.ndarray:
        out = self.model.run(self._normalize(pixels), self.spec.output_name)
        out = np.asarray(out, dtype=np.float32)
        if out.ndim == 4:  # spatial: pool over h x w
            out = out.mean(axis=(2, 3), dtype=np.float32)
        if out.ndim == 2:
            out = out[0]
        if out.ndim != 1:
            raise OnnxError(f"unexpected output rank {out.ndim}")
        if not np.all(np.isfinite(out)):
            raise FloatingPointError("model produced non-finite outputs")
        return out.astype(np.float64)

    def embed(self, img) -> np.ndarray:
        return self._forward(_as_pixels(img))


def load_backend(spec: BackendSpec):
    """Instantiate a backend handle; probes model backends for their dim."""
    if spec.kind == "builtin":
        return BuiltinBackend(spec)
    return OnnxBackend(spec)


def embed_image(backend, img) -> EmbeddingVector:
    key = img.source if isinstance(img, EarImage) else ""
    values = backend.embed(img)
    if values.shape[0] != backend.dim:
        raise ValueError(
            f"backend {backend.name} produced dim {values.shape[0]}, expected {backend.dim}"
        )
    return EmbeddingVector(values=values, backend=backend.name, record=key)


# --- standardization -----------------------------------------------------------


class Standardizer(BaseEstimator, TransformerMixin):
    """Per-dimension (x - mean) / std scaling; constant dims map to 0."""

    def fit(self, X, y=None):
        X = check_matrix(X, "X", min_rows=2)
        self.mean_ = X.mean(axis=0)
        self.scale_ = X.std(axis=0)  # population std
        return self

    def transform(self, X):
        if not hasattr(self, "mean_"):
            raise NotFittedError("Standardizer is not fitted")
        X = np.asarray(X, dtype=np.float64)
        squeeze = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.mean_.shape[0]:
            raise ValueError(
                f"dimension mismatch: {X.shape[1]} vs fitted {self.mean_.shape[0]}"
            )
        out = np.zeros_like(X)
        nz = self.scale_ > 0
        out[:, nz] = (X[:, nz] - self.mean_[nz]) / self.scale_[nz]
        return out[0] if squeeze else out

    def inverse_transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        squeeze = X.ndim == 1
        X = np.atleast_2d(X)
        out = X * self.scale_ + self.mean_
        out[:, self.scale_ == 0] = self.mean_[self.scale_ == 0]
        return out[0] if squeeze else out


def fit_standardizer(vectors: list[EmbeddingVector]) -> Standardizer:
    """Fit per-dimension statistics on one backend's embedding vectors."""
    if len(vectors) < 2:
        raise ValueError("standardizer needs at least 2 vectors")
    backends = {v.backend for v in vectors}
    if len(backends) > 1:
        raise ValueError(f"mixed backends: {sorted(backends)}")
    X = np.stack([v.values for v in vectors])
    return Standardizer().fit(X)


def apply_standardizer(vector: EmbeddingVector, stats: Standardizer) -> EmbeddingVector:
    return EmbeddingVector(
        values=stats.transform(vector.values),
        backend=vector.backend,
        record=vector.record,
    )


# --- embedding store -------------------------------------------------------------

STORE_MAGIC = b"AURE"
STORE_VERSION = 1


def save_store(path, backend_name: str, vectors: list[EmbeddingVector]):
    """Write embeddings to the binary store format (little-endian)."""
    if not vectors:
        raise ValueError("refusing to write an empty store")
    dims = {v.values.shape[0] for v in vectors}
    if len(dims) != 1:
        raise ValueError(f"inconsistent dims in store: {sorted(dims)}")
    dim = dims.pop()
    name_bytes = backend_name.encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(STORE_MAGIC)
        fh.write(struct.pack("<I", STORE_VERSION))
        fh.write(struct.pack("<H", len(name_bytes)))
        fh.write(name_bytes)
        fh.write(struct.pack("<I", dim))
        fh.write(struct.pack("<I", len(vectors)))
        for v in vectors:
            key = v.record.encode("utf-8")
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(np.asarray(v.values, dtype="<f4").tobytes())


def load_store(path) -> tuple[str, list[EmbeddingVector]]:
    """Read an embedding store; returns (backend_name, vectors)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != STORE_MAGIC:
        raise ValueError(f"{path}: not an embedding store (bad magic)")
    pos = 4
    (version,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if version != STORE_VERSION:
        raise ValueError(f"{path}: unsupported store version {version}")
    (name_len,) = struct.unpack_from("<H", data, pos)
    pos += 2
    backend = data[pos:pos + name_len].decode("utf-8")
    pos += name_len
    dim, count = struct.unpack_from("<II", data, pos)
    pos += 8
    vectors = []
    for _ in range(count):
        (key_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        key = data[pos:pos + key_len].decode("utf-8")
        pos += key_len
        values = np.frombuffer(data, dtype="<f4", count=dim, offset=pos).astype(np.float64)
        pos += 4 * dim
        vectors.append(EmbeddingVector(values=values, backend=backend, record=key))
    return backend, vectors
