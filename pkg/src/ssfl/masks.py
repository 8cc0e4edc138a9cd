"""Connection saliency, global mask selection and the ablation mask generators.

Masks are boolean numpy arrays of length ``d``; the number of active
coordinates ``k`` is their popcount.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ssfl.nn import Batch, LayerLayout, backward


def active_count(d: int, sigma: float) -> int:
    """``floor((1 - sigma) * d)``, robust to float noise such as ``(1 - 0.7) * 100``."""
    if not 0.0 < sigma < 1.0:
        raise ValueError(f"sparsity must lie in (0, 1), got {sigma}")
    raw = (1.0 - sigma) * d
    k = int(np.floor(raw + 1e-9 * max(1.0, raw)))
    if k == 0:
        raise ValueError(f"sparsity {sigma} leaves no active parameters out of {d}")
    return k


def local_saliency(params: np.ndarray, layout: LayerLayout, batch: Batch) -> np.ndarray:
    """``|dL/dw * w|`` on one batch; params are not modified."""
    return np.abs(backward(params, layout, batch) * params)


def aggregate_saliency(pairs: Iterable[tuple[np.ndarray, int]]) -> np.ndarray:
    """Data-size weighted average of client saliency vectors, summed in input order."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("no saliency vectors to aggregate")
    d = len(pairs[0][0])
    sizes = np.array([n for _, n in pairs], dtype=np.float64)
    if (sizes < 1).any():
        raise ValueError("every client must report n_k >= 1")
    weights = sizes / sizes.sum()
    # Accumulate offsets from the first vector: identical inputs then come back bit-for-bit.
    base = np.asarray(pairs[0][0], dtype=np.float64)
    out = base.copy()
    for (s, _), p in zip(pairs, weights):
        if len(s) != d:
            raise ValueError(f"saliency length {len(s)} differs from {d}")
        out += p * (s - base)
    return out


def topk_mask(scores: np.ndarray, sigma: float | None = None, k: int | None = None) -> np.ndarray:
    """Ones at the ``k`` largest scores; ties go to the lower index."""
    d = len(scores)
    if k is None:
        k = active_count(d, sigma)
    if not 0 < k <= d:
        raise ValueError(f"k={k} out of range for d={d}")
    order = np.argsort(-np.asarray(scores), kind="stable")
    mask = np.zeros(d, dtype=bool)
    mask[order[:k]] = True
    return mask


def oracle_mask(params: np.ndarray, layout: LayerLayout, batches: Sequence[Batch] | Batch,
                sigma: float) -> np.ndarray:
    """Top-k of the saliency of the mean loss over all samples.

    ``batches`` may be the full dataset as a single batch or a list of batches
    that together cover it; gradients are combined by sample count, which is
    the same as one full-batch pass.
    """
    if isinstance(batches, Batch):
        batches = [batches]
    total = sum(len(b) for b in batches)
    grad = np.zeros_like(params)
    for b in batches:
        grad += backward(params, layout, b) * (len(b) / total)
    return topk_mask(np.abs(grad * params), sigma)


def mask_error(mask: np.ndarray, reference: np.ndarray) -> float:
    """``1 - |active overlap| / k`` for two masks with equal popcount."""
    k = int(mask.sum())
    if k != int(reference.sum()):
        raise ValueError(f"masks have different active counts ({k} vs {int(reference.sum())})")
    if k == 0:
        raise ValueError("empty masks")
    return 1.0 - int(np.count_nonzero(mask & reference)) / k


def shuffle_within_layers(mask: np.ndarray, layout: LayerLayout, seed) -> np.ndarray:
    """Permute mask bits inside each layer slice, keeping per-layer density."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = mask.copy()
    for layer in layout.layers:
        out[layer.slice] = rng.permutation(mask[layer.slice])
    return out


def random_mask(d: int, sigma: float, seed) -> np.ndarray:
    """Uniformly random ``k``-subset of all ``d`` coordinates (not stratified by layer)."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    mask = np.zeros(d, dtype=bool)
    mask[rng.choice(d, size=active_count(d, sigma), replace=False)] = True
    return mask


def topk_magnitude(values: np.ndarray, k: int) -> np.ndarray:
    return topk_mask(np.abs(values), k=k)


@dataclass
class MaskStats:
    layers: list[dict]
    active: int
    total: int

    @property
    def density(self) -> float:
        return self.active / self.total

    def to_dict(self) -> dict:
        return {"layers": self.layers, "active": self.active, "total": self.total, "density": self.density}


def layer_densities(mask: np.ndarray, layout: LayerLayout) -> MaskStats:
    rows = []
    for layer in layout.layers:
        n = int(np.count_nonzero(mask[layer.slice]))
        rows.append({"name": layer.name, "active": n, "size": layer.length, "density": n / layer.length})
    return MaskStats(rows, int(np.count_nonzero(mask)), layout.total_params)


# Serialized masks: d bits packed little-endian within each byte (bit i of the
# mask is bit i % 8 of byte i // 8), zero-padded to a whole byte, alongside a
# JSON sidecar {"d", "k", "layout_sha256"}.


def layout_hash(layout: LayerLayout) -> str:
    blob = json.dumps(layout.describe(), separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def pack_mask(mask: np.ndarray) -> bytes:
    return np.packbits(mask.astype(np.uint8), bitorder="little").tobytes()


def unpack_mask(blob: bytes, d: int) -> np.ndarray:
    if len(blob) != (d + 7) // 8:
        raise ValueError(f"expected {(d + 7) // 8} bytes for d={d}, got {len(blob)}")
    bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), bitorder="little")
    if bits[d:].any():
        raise ValueError("nonzero padding bits")
    return bits[:d].astype(bool)


def save_mask(mask: np.ndarray, layout: LayerLayout, path) -> None:
    """Write ``<path>`` (packed bits) and ``<path>.json`` (sidecar)."""
    path = Path(path)
    path.write_bytes(pack_mask(mask))
    sidecar = {"d": int(len(mask)), "k": int(mask.sum()), "layout_sha256": layout_hash(layout)}
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def load_mask(path, layout: LayerLayout | None = None) -> np.ndarray:
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    mask = unpack_mask(path.read_bytes(), sidecar["d"])
    if int(mask.sum()) != sidecar["k"]:
        raise ValueError("popcount does not match sidecar k")
    if layout is not None and sidecar["layout_sha256"] != layout_hash(layout):
        raise ValueError("mask was saved for a different layout")
    return mask
