"""Post-training weight quantisation and weight/activation distribution diagnostics.

Codes use the symmetric range ``[-(2^(b-1) - 1), 2^(b-1) - 1]`` and all
rounding is round-half-to-even (``np.rint``).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import stats

from .model import ModelParams
from .tensor_io import read_tensor, write_tensor
from .tensorcore import Tensor

ABSMAX = "absmax"
ZEROPOINT = "zeropoint"
ROW, COLUMN, WHOLE = "row", "column", "whole"


class PackingError(ValueError):
    """INT4 codes out of range, or a payload inconsistent with its metadata."""


def qmax(bits: int) -> int:
    if bits not in (4, 8):
        raise ValueError(f"bits must be 4 or 8, got {bits}")
    return 2 ** (bits - 1) - 1


# -- INT4 packing -----------------------------------------------------------


def pack_int4(codes) -> bytes:
    """Two signed 4-bit codes per byte: even index in the low nibble.

    Odd-length input is padded with a zero code; callers keep the length.
    """
    codes = np.asarray(codes, dtype=np.int64).ravel()
    if codes.size and (codes.min() < -7 or codes.max() > 7):
        raise PackingError("INT4 codes must lie in [-7, 7]")
    if codes.size % 2:
        codes = np.append(codes, 0)
    nib = (codes & 0xF).astype(np.uint8)
    return (nib[0::2] | (nib[1::2] << 4)).tobytes()


def unpack_int4(payload: bytes, n: int) -> np.ndarray:
    raw = np.frombuffer(payload, dtype=np.uint8)
    if raw.size != (n + 1) // 2:
        raise PackingError(f"{raw.size} bytes cannot hold exactly {n} INT4 codes")
    nib = np.empty(raw.size * 2, dtype=np.int8)
    nib[0::2] = raw & 0xF
    nib[1::2] = raw >> 4
    codes = np.where(nib > 7, nib - 16, nib).astype(np.int8)[:n]
    return codes


# -- quantised matrices -----------------------------------------------------


@dataclass
class QuantizedMatrix:
    bits: int
    scheme: str
    group_axis: str
    payload: bytes
    scales: np.ndarray
    zero_points: np.ndarray | None
    shape: tuple[int, ...]
    degenerate_groups: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    def codes(self) -> np.ndarray:
        if self.bits == 4:
            flat = unpack_int4(self.payload, self.size)
        else:
            flat = np.frombuffer(self.payload, dtype=np.int8)
            if flat.size != self.size:
                raise PackingError(f"INT8 payload has {flat.size} codes, expected {self.size}")
        return flat.reshape(self.shape).astype(np.int64)

    def payload_bytes(self) -> int:
        return len(self.payload)

    def overhead_bytes(self) -> int:
        zp = 0 if self.zero_points is None else self.zero_points.size
        return 2 * (self.scales.size + zp)  # scales stored as fp16 at inference


def _groups(w: np.ndarray, axis: str) -> tuple[np.ndarray, Callable[[np.ndarray], np.ndarray]]:
    """View ``w`` as [groups, elements] and return a function restoring the shape."""
    if w.ndim == 1 or axis == WHOLE:
        return w.reshape(1, -1), lambda g: g.reshape(w.shape)
    if axis == ROW:
        return w, lambda g: g
    if axis == COLUMN:
        return w.T, lambda g: g.T
    raise ValueError(f"unknown group axis {axis!r}")


def _pack(codes: np.ndarray, bits: int) -> bytes:
    if bits == 4:
        return pack_int4(codes)
    return np.ascontiguousarray(codes, dtype=np.int8).tobytes()


def quantize_absmax(w, bits: int = 8, group_axis: str = ROW) -> QuantizedMatrix:
    """``s = absmax / (2^(b-1)-1)``, ``code = round(w / s)`` per group.

    A group of zeros gets ``s = 0`` and all-zero codes.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantise non-finite weights")
    q = qmax(bits)
    grouped, restore = _groups(w, group_axis)
    amax = np.abs(grouped).max(axis=1)
    scales = amax / q
    safe = np.where(scales > 0, scales, 1.0)
    codes = np.clip(np.rint(grouped / safe[:, None]), -q, q)
    codes[scales == 0] = 0
    codes = restore(codes).astype(np.int8)
    return QuantizedMatrix(bits, ABSMAX, group_axis, _pack(codes, bits), scales, None,
                           w.shape, [int(i) for i in np.flatnonzero(scales == 0)])


def quantize_zeropoint(w, bits: int = 8, group_axis: str = ROW) -> QuantizedMatrix:
    """``s = (max-min)/(2^b-2)``, ``z = round(min/s) + 2^(b-1)-1``, ``code = round(w/s) - z``.

    A constant group gets ``s = 0``, zero codes, and stores the constant in
    its zero point.
    """
    w = np.asarray(w, dtype=np.float64)
    if not np.all(np.isfinite(w)):
        raise ValueError("cannot quantise non-finite weights")
    q = qmax(bits)
    grouped, restore = _groups(w, group_axis)
    lo, hi = grouped.min(axis=1), grouped.max(axis=1)
    scales = (hi - lo) / (2 ** bits - 2)
    const = scales == 0
    safe = np.where(const, 1.0, scales)
    zp = np.rint(lo / safe) + q
    codes = np.clip(np.rint(grouped / safe[:, None]) - zp[:, None], -q, q)
    codes[const] = 0
    zp = np.where(const, lo, zp)
    codes = restore(codes).astype(np.int8)
    return QuantizedMatrix(bits, ZEROPOINT, group_axis, _pack(codes, bits), scales, zp,
                           w.shape, [int(i) for i in np.flatnonzero(const)])


def dequantize(qm: QuantizedMatrix) -> np.ndarray:
    codes = qm.codes().astype(np.float64)
    grouped, restore = _groups(codes, qm.group_axis)
    n_groups = grouped.shape[0]
    if qm.scales.size != n_groups:
        raise PackingError(f"{qm.scales.size} scales for {n_groups} groups")
    s = qm.scales[:, None]
    if qm.scheme == ABSMAX:
        out = s * grouped
    elif qm.scheme == ZEROPOINT:
        z = qm.zero_points[:, None]
        const = (qm.scales == 0)[:, None]
        out = np.where(const, z, s * (grouped + z))
    else:
        raise PackingError(f"unknown scheme {qm.scheme!r}")
    return restore(out).reshape(qm.shape)


def quantize(w, bits: int = 8, scheme: str = ABSMAX, group_axis: str = ROW) -> QuantizedMatrix:
    if scheme == ABSMAX:
        return quantize_absmax(w, bits, group_axis)
    if scheme == ZEROPOINT:
        return quantize_zeropoint(w, bits, group_axis)
    raise ValueError(f"unknown scheme {scheme!r}")


def quantization_mse(w, bits: int, scheme: str = ABSMAX, group_axis: str = ROW) -> float:
    w = np.asarray(w, dtype=np.float64)
    return float(np.mean((dequantize(quantize(w, bits, scheme, group_axis)) - w) ** 2))


# -- whole-model quantisation -----------------------------------------------


def is_linear_weight(name: str) -> bool:
    return name.startswith("layers.") and name.endswith(".weight")


@dataclass(frozen=True)
class QuantPolicy:
    bits: int = 4
    scheme: str = ABSMAX
    group_axis: str = ROW
    include: Callable[[str], bool] = is_linear_weight


@dataclass
class QuantizedModel:
    params: ModelParams
    quantized: dict[str, QuantizedMatrix]
    policy: QuantPolicy

    def dequantized_params(self) -> ModelParams:
        """Parameters for inference: quantised matrices replaced by their dequantisation."""
        tensors = {}
        for name, t in self.params:
            if name in self.quantized:
                tensors[name] = Tensor(dequantize(self.quantized[name]), name=name)
            else:
                tensors[name] = t
        return ModelParams(self.params.cfg, tensors)

    def memory_report(self) -> dict[str, int]:
        n = sum(qm.size for qm in self.quantized.values())
        return {
            "linear_elements": n,
            "fp16_bytes": 2 * n,
            "payload_bytes": sum(qm.payload_bytes() for qm in self.quantized.values()),
            "scale_bytes": sum(qm.overhead_bytes() for qm in self.quantized.values()),
        }

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        manifest = {"config": self.params.cfg.to_manifest(), "matrices": {}, "plain": []}
        for name, t in self.params:
            if name in self.quantized:
                qm = self.quantized[name]
                write_tensor(directory / f"{name}.codes.glmt",
                             np.frombuffer(qm.payload, dtype=np.int8))
                write_tensor(directory / f"{name}.scales.glmt", qm.scales)
                if qm.zero_points is not None:
                    write_tensor(directory / f"{name}.zeros.glmt", qm.zero_points)
                manifest["matrices"][name] = {
                    "bits": qm.bits, "scheme": qm.scheme, "axis": qm.group_axis,
                    "shape": list(qm.shape),
                }
            else:
                write_tensor(directory / f"{name}.glmt", t.data)
                manifest["plain"].append(name)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
        return directory

    @staticmethod
    def load_matrix(directory, name: str) -> QuantizedMatrix:
        directory = Path(directory)
        meta = json.loads((directory / "manifest.json").read_text())["matrices"][name]
        zeros = directory / f"{name}.zeros.glmt"
        return QuantizedMatrix(
            meta["bits"], meta["scheme"], meta["axis"],
            read_tensor(directory / f"{name}.codes.glmt").tobytes(),
            read_tensor(directory / f"{name}.scales.glmt"),
            read_tensor(zeros) if zeros.exists() else None,
            tuple(meta["shape"]),
        )


def quantize_model(params: ModelParams, policy: QuantPolicy = QuantPolicy()) -> QuantizedModel:
    """Quantise the linear-layer weight matrices selected by ``policy.include``.

    Embeddings, layer-norm parameters and biases are carried over as the
    very same tensors.
    """
    quantized = {
        name: quantize(t.data, policy.bits, policy.scheme, policy.group_axis)
        for name, t in params if policy.include(name)
    }
    return QuantizedModel(params, quantized, policy)


# -- diagnostics ------------------------------------------------------------


@dataclass
class DistributionReport:
    bin_edges: np.ndarray
    counts: np.ndarray
    minimum: float
    maximum: float
    variance: float
    skewness: float
    kurtosis: float  # excess kurtosis; 0 for a Gaussian
    outlier_share: float

    def histogram_table(self) -> list[tuple[float, float, int]]:
        return [(float(a), float(b), int(c))
                for a, b, c in zip(self.bin_edges[:-1], self.bin_edges[1:], self.counts)]


def weight_distribution_report(w, outlier_k: float = 3.0, bins: int = 64) -> DistributionReport:
    w = np.asarray(w, dtype=np.float64).ravel()
    counts, edges = np.histogram(w, bins=bins)
    var = float(w.var())
    if var > 0:
        skew = float(stats.skew(w))
        kurt = float(stats.kurtosis(w))
        outliers = float(np.mean(np.abs(w - w.mean()) > outlier_k * math.sqrt(var)))
    else:
        skew = kurt = outliers = 0.0
    return DistributionReport(edges, counts, float(w.min()), float(w.max()), var,
                              skew, kurt, outliers)


def activation_outlier_scan(activations, magnitude_threshold: float = 6.0) -> float:
    """Share of hidden dimensions whose largest |activation| exceeds the threshold."""
    a = np.abs(np.asarray(activations, dtype=np.float64))
    if a.ndim == 1:
        a = a[None, :]
    a = a.reshape(-1, a.shape[-1])
    return float(np.mean(a.max(axis=0) > magnitude_threshold))
