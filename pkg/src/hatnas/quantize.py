"""Post-training k-means weight quantization and storage accounting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import CodedBlock, block_bytes, block_header_bytes
from .design_space import ValidationError
from .supernet import ModelWeights, is_layer_norm, save_weights


@dataclass
class QuantizedBlock(CodedBlock):
    """Codebook + per-entry codes; ``objective`` holds the MSE after init and each iteration."""
    objective: list[float] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.codes.shape


def init_centroids(lo: float, hi: float, k: int) -> np.ndarray:
    if k == 1:
        return np.array([(lo + hi) / 2.0])
    return np.linspace(lo, hi, k)


def _assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    # centroids stay sorted under 1-D Lloyd updates, so midpoints partition the line
    mids = (centroids[1:] + centroids[:-1]) / 2.0
    return np.searchsorted(mids, x, side="left")


def kmeans_quantize(matrix: np.ndarray, bits: int, max_iters: int = 300) -> QuantizedBlock:
    """1-D k-means (k = 2**bits) with centroids initialized evenly over [min, max]."""
    if not 1 <= bits <= 8:
        raise ValidationError(f"bits must be in [1, 8], got {bits}")
    m = np.asarray(matrix, dtype=np.float64)
    if m.size == 0:
        raise ValidationError("cannot quantize an empty matrix")
    x = m.reshape(-1)
    k = 2 ** bits
    c = init_centroids(float(x.min()), float(x.max()), k)
    codes = _assign(x, c)
    history = [float(np.mean((x - c[codes]) ** 2))]
    for _ in range(max_iters):
        counts = np.bincount(codes, minlength=k)
        # shift by the mean residual so a cluster of identical values lands exactly on them
        shift = np.bincount(codes, weights=x - c[codes], minlength=k)
        # empty clusters keep their centroid
        c = np.where(counts > 0, c + shift / np.maximum(counts, 1), c)
        new = _assign(x, c)
        history.append(float(np.mean((x - c[new]) ** 2)))
        stable = np.array_equal(new, codes)
        codes = new
        if stable:
            break
    return QuantizedBlock(bits, c, codes.reshape(m.shape).astype(np.uint8),
                          history)


def dequantize(block: CodedBlock) -> np.ndarray:
    return np.asarray(block.codebook, dtype=np.float64)[block.codes.astype(np.int64)]


def quantizable(name: str) -> bool:
    return not is_layer_norm(name)


def codes_bytes(n: int, bits: int) -> int:
    return (n * bits + 7) // 8


def quantized_size_bytes(weights: ModelWeights, bits: int) -> int:
    """Serialized block bytes after quantization: packed codes, codebooks and block headers.

    Layer-norm blocks stay float32.
    """
    total = 0
    for name, p in weights.params.items():
        if quantizable(name):
            total += block_header_bytes(name, p.ndim) + 1 + 2 + 4 * 2 ** bits + codes_bytes(p.size, bits)
        else:
            total += block_bytes(name, p)
    return total


def baseline_size_bytes(weights: ModelWeights) -> int:
    """Serialized block bytes with every value stored as float32."""
    return sum(block_bytes(name, p) for name, p in weights.params.items())


def payload_bytes(weights: ModelWeights, bits: int | None) -> int:
    """Weight values only: packed codes for quantized blocks, 4 bytes per unquantized entry.

    ``bits=None`` gives the 32-bit baseline.
    """
    total = 0
    for name, p in weights.params.items():
        if bits is not None and quantizable(name):
            total += codes_bytes(p.size, bits)
        else:
            total += 4 * p.size
    return total


@dataclass
class QuantizedModel:
    weights: ModelWeights            # dequantized values, ready for forward
    blocks: dict                     # name -> QuantizedBlock or raw layer-norm array
    bits: int

    def save(self, path) -> None:
        save_weights(path, self.weights, self.blocks)


def quantize_weights(weights: ModelWeights, bits: int, max_iters: int = 300) -> QuantizedModel:
    """Quantize every non-layer-norm block independently."""
    blocks: dict = {}
    params = {}
    for name, p in weights.params.items():
        if quantizable(name):
            q = kmeans_quantize(p, bits, max_iters)
            # codebooks are stored as float32; use the stored values so save/load is exact
            q.codebook = q.codebook.astype(np.float32).astype(np.float64)
            blocks[name] = q
            params[name] = dequantize(q)
        else:
            blocks[name] = p
            params[name] = p.copy()
    return QuantizedModel(ModelWeights(weights.space, params, weights.arch), blocks, bits)


def quantize_model(weights: ModelWeights, bits: int, valid_pairs=None, arch=None,
                   max_iters: int = 300) -> tuple[QuantizedModel, dict]:
    """Quantize and compare validation loss before/after (when ``valid_pairs`` is given)."""
    from .trainer import validate
    qm = quantize_weights(weights, bits, max_iters)
    report = {
        "bits": bits,
        "baseline_bytes": baseline_size_bytes(weights),
        "quantized_bytes": quantized_size_bytes(weights, bits),
        "baseline_payload_bytes": payload_bytes(weights, None),
        "quantized_payload_bytes": payload_bytes(weights, bits),
    }
    report["size_ratio"] = report["baseline_bytes"] / report["quantized_bytes"]
    report["payload_ratio"] = report["baseline_payload_bytes"] / report["quantized_payload_bytes"]
    report["mean_block_mse"] = float(np.mean([b.objective[-1] for b in qm.blocks.values()
                                              if isinstance(b, QuantizedBlock)]))
    if valid_pairs is not None:
        arch = arch or weights.arch or weights.space.largest()
        before = validate(weights, arch, valid_pairs)
        after = validate(qm.weights, arch, valid_pairs)
        report.update(val_loss_before=before, val_loss_after=after,
                      relative_increase=(after - before) / before)
    return qm, report
