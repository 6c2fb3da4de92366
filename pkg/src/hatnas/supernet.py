"""Weight-shared SuperTransformer.

Every parameter block is allocated at the maximum size the design space can
ask for.  A SubTransformer uses the front slice of each block; a standalone
(extracted) SubTransformer is simply a weight set whose blocks already have
exactly the sliced shapes, so the same forward code serves both.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .design_space import ArchConfig, DesignSpace, ValidationError
from .numerics import Tensor

PAD, BOS, EOS = 0, 1, 2


# ------------------------------------------------------------------ layout

def _attn_shapes(prefix: str, e: int, q: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.wq": (e, q), f"{prefix}.wk": (e, q), f"{prefix}.wv": (e, q), f"{prefix}.wo": (q, e)}


def _ffn_shapes(prefix: str, e: int, h: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.w1": (e, h), f"{prefix}.b1": (h,), f"{prefix}.w2": (h, e), f"{prefix}.b2": (e,)}


def _ln_shapes(prefix: str, e: int) -> dict[str, tuple[int, ...]]:
    return {f"{prefix}.g": (e,), f"{prefix}.b": (e,)}


def param_shapes(space: DesignSpace) -> dict[str, tuple[int, ...]]:
    """Maximal block shapes, in a fixed canonical order."""
    E, H, Q = space.max_embed, space.max_hidden, space.qkv_dim
    shapes: dict[str, tuple[int, ...]] = {"embed": (space.vocab_size, E)}
    for i in range(space.encoder_layer_count):
        p = f"enc.{i}"
        shapes.update(_ln_shapes(f"{p}.ln1", E))
        shapes.update(_attn_shapes(f"{p}.self", E, Q))
        shapes.update(_ln_shapes(f"{p}.ln2", E))
        shapes.update(_ffn_shapes(f"{p}.ffn", E, H))
    shapes.update(_ln_shapes("enc.ln", E))
    shapes["adapter"] = (E, E)
    for i in range(space.max_decoder_layers):
        p = f"dec.{i}"
        shapes.update(_ln_shapes(f"{p}.ln1", E))
        shapes.update(_attn_shapes(f"{p}.self", E, Q))
        shapes.update(_ln_shapes(f"{p}.ln2", E))
        shapes.update(_attn_shapes(f"{p}.cross", E, Q))
        shapes.update(_ln_shapes(f"{p}.ln3", E))
        shapes.update(_ffn_shapes(f"{p}.ffn", E, H))
    shapes.update(_ln_shapes("dec.ln", E))
    return shapes


def is_layer_norm(name: str) -> bool:
    return ".ln" in name or name.startswith("enc.ln") or name.startswith("dec.ln")


def arch_extents(space: DesignSpace, arch: ArchConfig) -> dict[str, tuple[int, ...]]:
    """Front-slice extents of every block the architecture activates."""
    a = arch.active()
    ed, dd, Q = a.encoder_embed_dim, a.decoder_embed_dim, space.qkv_dim
    ext: dict[str, tuple[int, ...]] = {"embed": (space.vocab_size, max(ed, dd))}
    for i in range(a.encoder_layers):
        p = f"enc.{i}"
        ext.update(_ln_shapes(f"{p}.ln1", ed))
        ext.update(_attn_shapes(f"{p}.self", ed, Q))
        ext.update(_ln_shapes(f"{p}.ln2", ed))
        ext.update(_ffn_shapes(f"{p}.ffn", ed, a.enc_hidden[i]))
    ext.update(_ln_shapes("enc.ln", ed))
    if ed != dd:
        ext["adapter"] = (ed, dd)
    for i in range(a.decoder_layers):
        p = f"dec.{i}"
        ext.update(_ln_shapes(f"{p}.ln1", dd))
        ext.update(_attn_shapes(f"{p}.self", dd, Q))
        ext.update(_ln_shapes(f"{p}.ln2", dd))
        ext.update(_attn_shapes(f"{p}.cross", dd, Q))
        ext.update(_ln_shapes(f"{p}.ln3", dd))
        ext.update(_ffn_shapes(f"{p}.ffn", dd, a.dec_hidden[i]))
    ext.update(_ln_shapes("dec.ln", dd))
    return ext


def count_params(space: DesignSpace, arch: ArchConfig) -> int:
    return int(sum(np.prod(s) for s in arch_extents(space, arch).values()))


def init_params(shapes: dict[str, tuple[int, ...]], seed: int) -> dict[str, np.ndarray]:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrices, zero biases, unit LN gains.

    Each block draws from its own stream keyed by (seed, name), so the values
    of a block do not depend on which other blocks exist.
    """
    params = {}
    for name, shape in shapes.items():
        if name.endswith(".g"):
            params[name] = np.ones(shape)
        elif len(shape) == 1:
            params[name] = np.zeros(shape)
        else:
            rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
            # tied embedding acts as the output projection, whose fan-in is its width
            fan_in = shape[1] if name == "embed" else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


@dataclass
class ModelWeights:
    """A parameter set plus the design space it belongs to.

    ``arch`` is None for a SuperTransformer; for an extracted SubTransformer it
    is the architecture whose slices the blocks hold.
    """
    space: DesignSpace
    params: dict[str, np.ndarray]
    arch: ArchConfig | None = None

    @property
    def is_super(self) -> bool:
        return self.arch is None

    def copy(self) -> "ModelWeights":
        return ModelWeights(self.space, {k: v.copy() for k, v in self.params.items()}, self.arch)

    def num_entries(self) -> int:
        return int(sum(v.size for v in self.params.values()))


SuperWeights = ModelWeights


def init_super(space: DesignSpace, seed: int) -> ModelWeights:
    return ModelWeights(space, init_params(param_shapes(space), seed))


def init_sub(space: DesignSpace, arch: ArchConfig, seed: int) -> ModelWeights:
    """Fresh standalone SubTransformer weights (fan-in taken from the sub shapes)."""
    arch = space.check(arch)
    return ModelWeights(space, init_params(arch_extents(space, arch), seed), arch)


@dataclass(frozen=True)
class SubView:
    arch: ArchConfig
    extents: dict[str, tuple[int, ...]] = field(hash=False)


def slice_view(weights: ModelWeights, arch: ArchConfig) -> SubView:
    arch = weights.space.check(arch)
    ext = arch_extents(weights.space, arch)
    for name, e in ext.items():
        have = weights.params.get(name)
        if have is None or any(x > s for x, s in zip(e, have.shape)):
            raise ValidationError(f"block {name} cannot provide slice {e}")
    return SubView(arch, ext)


def extract_sub(weights: ModelWeights, arch: ArchConfig) -> ModelWeights:
    view = slice_view(weights, arch)
    params = {}
    for name, e in view.extents.items():
        idx = tuple(slice(0, x) for x in e)
        params[name] = np.ascontiguousarray(weights.params[name][idx]).copy()
    return ModelWeights(weights.space, params, view.arch)


# ----------------------------------------------------------------- forward

def sinusoid(length: int, dim: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(dim)[None, :]
    rates = np.power(10000.0, -(2 * (i // 2)) / dim)
    ang = pos * rates
    return np.where(i % 2 == 0, np.sin(ang), np.cos(ang))


def _linear(x: Tensor, P: dict[str, Tensor], name: str, ext: dict) -> Tensor:
    return nx.matmul(x, nx.prefix(P[name], ext[name]))


def _ln(x: Tensor, P, name: str, ext) -> Tensor:
    return nx.layer_norm(x, nx.prefix(P[f"{name}.g"], ext[f"{name}.g"]),
                         nx.prefix(P[f"{name}.b"], ext[f"{name}.b"]))


def _ffn(x: Tensor, P, name: str, ext) -> Tensor:
    h = nx.relu(nx.add_bias(_linear(x, P, f"{name}.w1", ext), nx.prefix(P[f"{name}.b1"], ext[f"{name}.b1"])))
    return nx.add_bias(_linear(h, P, f"{name}.w2", ext), nx.prefix(P[f"{name}.b2"], ext[f"{name}.b2"]))


def _embed(P, ids: np.ndarray, dim: int, vocab: int) -> Tensor:
    batch, length = ids.shape
    table = nx.prefix(P["embed"], (vocab, dim))
    x = nx.scale(nx.embedding_lookup(table, ids), np.sqrt(dim))
    pe = np.tile(sinusoid(length, dim), (batch, 1))
    return nx.add(x, Tensor(pe))


def self_attention_block(x: Tensor, P, name: str, ext, heads: int, batch: int, mask) -> Tensor:
    q = _linear(x, P, f"{name}.wq", ext)
    k = _linear(x, P, f"{name}.wk", ext)
    v = _linear(x, P, f"{name}.wv", ext)
    ctx = nx.attention(q, k, v, heads, batch, mask)
    return _linear(ctx, P, f"{name}.wo", ext)


def arbitrary_ende_attention(x: Tensor, memories: list[Tensor], span: int, heads: int, P, name: str,
                             ext, batch: int, src_valid: np.ndarray | None) -> Tensor:
    """Cross-attention over the last ``span`` encoder outputs joined along time.

    ``memories`` are per-encoder-layer outputs, already in decoder width.  The
    shallowest attended layer comes first, the last encoder layer last.  The
    key/value projections are the same single pair whatever the span.
    """
    if not 1 <= span <= len(memories):
        raise ValidationError(f"attend span {span} outside [1, {len(memories)}]")
    mem = nx.concat_seq(memories[-span:], batch) if span > 1 else memories[-1]
    q = _linear(x, P, f"{name}.wq", ext)
    k = _linear(mem, P, f"{name}.wk", ext)
    v = _linear(mem, P, f"{name}.wv", ext)
    tq, tk = q.shape[0] // batch, k.shape[0] // batch
    valid = None if src_valid is None else np.tile(src_valid, (1, span))
    mask = nx.attention_mask(batch, tq, tk, key_valid=valid)
    ctx = nx.attention(q, k, v, heads, batch, mask)
    return _linear(ctx, P, f"{name}.wo", ext)


def _as_tensors(weights: ModelWeights, P: dict[str, Tensor] | None) -> dict[str, Tensor]:
    if P is not None:
        return P
    return {k: Tensor(v) for k, v in weights.params.items()}


def _check_ids(space: DesignSpace, ids: np.ndarray, what: str) -> np.ndarray:
    ids = np.asarray(ids)
    if ids.ndim != 2:
        raise ValidationError(f"{what} must be [batch, length]")
    if ids.shape[1] > space.max_seq_len:
        raise ValidationError(f"{what} length {ids.shape[1]} exceeds max_seq_len {space.max_seq_len}")
    if ids.size and (ids.min() < 0 or ids.max() >= space.vocab_size):
        raise ValidationError(f"{what} holds ids outside the vocabulary")
    return ids


def encode(weights: ModelWeights, view: SubView, src: np.ndarray, P=None) -> list[Tensor]:
    """Per-layer encoder outputs (residual stream after each layer)."""
    P = _as_tensors(weights, P)
    a, ext = view.arch, view.extents
    batch, slen = src.shape
    ed = a.encoder_embed_dim
    x = _embed(P, src, ed, weights.space.vocab_size)
    mask = nx.attention_mask(batch, slen, slen, key_valid=src != PAD)
    outs = []
    for i in range(a.encoder_layers):
        p = f"enc.{i}"
        x = nx.add(x, self_attention_block(_ln(x, P, f"{p}.ln1", ext), P, f"{p}.self", ext,
                                            a.enc_heads[i], batch, mask))
        x = nx.add(x, _ffn(_ln(x, P, f"{p}.ln2", ext), P, f"{p}.ffn", ext))
        outs.append(x)
    return outs


def encoder_memories(weights: ModelWeights, view: SubView, enc_outs: list[Tensor], P=None) -> list[Tensor]:
    """Normalize (and, if widths differ, adapt) the encoder outputs the decoder may attend."""
    P = _as_tensors(weights, P)
    a, ext = view.arch, view.extents
    deepest = max(a.attend_spans[:a.decoder_layers])
    mems = [None] * len(enc_outs)
    for i in range(len(enc_outs) - deepest, len(enc_outs)):
        m = _ln(enc_outs[i], P, "enc.ln", ext)
        if a.encoder_embed_dim != a.decoder_embed_dim:
            m = _linear(m, P, "adapter", ext)
        mems[i] = m
    return mems


def forward(weights: ModelWeights, arch: ArchConfig, src: np.ndarray, tgt_in: np.ndarray,
            P: dict[str, Tensor] | None = None) -> Tensor:
    """Teacher-forced logits ``[batch*tgt_len, vocab]``.

    Pass ``P`` (name -> Tensor wrapping ``weights.params``) to collect gradients.
    """
    space = weights.space
    src = _check_ids(space, src, "source")
    tgt_in = _check_ids(space, tgt_in, "target")
    if src.shape[0] != tgt_in.shape[0]:
        raise ValidationError("source and target batch sizes differ")
    view = slice_view(weights, arch)
    P = _as_tensors(weights, P)
    a, ext = view.arch, view.extents
    batch, tlen = tgt_in.shape
    mems = encoder_memories(weights, view, encode(weights, view, src, P), P)
    src_valid = src != PAD
    dd = a.decoder_embed_dim
    y = _embed(P, tgt_in, dd, space.vocab_size)
    causal = nx.attention_mask(batch, tlen, tlen, causal=True)
    for j in range(a.decoder_layers):
        p = f"dec.{j}"
        y = nx.add(y, self_attention_block(_ln(y, P, f"{p}.ln1", ext), P, f"{p}.self", ext,
                                            a.dec_heads[j], batch, causal))
        y = nx.add(y, arbitrary_ende_attention(_ln(y, P, f"{p}.ln2", ext), mems, a.attend_spans[j],
                                               a.ende_heads[j], P, f"{p}.cross", ext, batch, src_valid))
        y = nx.add(y, _ffn(_ln(y, P, f"{p}.ln3", ext), P, f"{p}.ffn", ext))
    y = _ln(y, P, "dec.ln", ext)
    return nx.matmul(y, nx.prefix(P["embed"], (space.vocab_size, dd)), transpose_b=True)


# ---------------------------------------------------- incremental decoding

class DecoderState:
    """Cached encoder memory projections and self-attention keys/values."""

    def __init__(self, weights: ModelWeights, arch: ArchConfig, src: np.ndarray):
        src = _check_ids(weights.space, src, "source")
        self.weights = weights
        self.view = slice_view(weights, arch)
        self.P = _as_tensors(weights, None)
        self.batch = src.shape[0]
        self.step = 0
        a, ext, P = self.view.arch, self.view.extents, self.P
        with nx.no_grad():
            mems = encoder_memories(weights, self.view, encode(weights, self.view, src, P), P)
            self.cross_k, self.cross_v, self.cross_mask = [], [], []
            for j in range(a.decoder_layers):
                span = a.attend_spans[j]
                mem = nx.concat_seq(mems[-span:], self.batch) if span > 1 else mems[-1]
                self.cross_k.append(_linear(mem, P, f"dec.{j}.cross.wk", ext).data)
                self.cross_v.append(_linear(mem, P, f"dec.{j}.cross.wv", ext).data)
                self.cross_mask.append(np.tile(src != PAD, (1, span)))
        q = weights.space.qkv_dim
        self.self_k = [np.zeros((self.batch, 0, q)) for _ in range(a.decoder_layers)]
        self.self_v = [np.zeros((self.batch, 0, q)) for _ in range(a.decoder_layers)]

    def reorder(self, index: np.ndarray) -> None:
        """Select/duplicate batch rows (beam search bookkeeping)."""
        index = np.asarray(index)
        self.self_k = [k[index] for k in self.self_k]
        self.self_v = [v[index] for v in self.self_v]
        self.cross_k = [self._rows(k, index) for k in self.cross_k]
        self.cross_v = [self._rows(v, index) for v in self.cross_v]
        self.cross_mask = [m[index] for m in self.cross_mask]
        self.batch = len(index)

    def _rows(self, flat: np.ndarray, index: np.ndarray) -> np.ndarray:
        t = flat.shape[0] // self.batch
        return flat.reshape(self.batch, t, -1)[index].reshape(len(index) * t, -1)

    def advance(self, tokens: np.ndarray) -> np.ndarray:
        """Feed one token per row; return next-token logits ``[batch, vocab]``."""
        a, ext, P = self.view.arch, self.view.extents, self.P
        space = self.weights.space
        tokens = np.asarray(tokens).reshape(self.batch, 1)
        if self.step >= space.max_seq_len:
            raise ValidationError("decode exceeded max_seq_len")
        dd = a.decoder_embed_dim
        b = self.batch
        with nx.no_grad():
            table = nx.prefix(P["embed"], (space.vocab_size, dd))
            y = nx.scale(nx.embedding_lookup(table, tokens), np.sqrt(dd))
            pe = sinusoid(self.step + 1, dd)[self.step]
            y = nx.add(y, Tensor(np.tile(pe, (b, 1))))
            for j in range(a.decoder_layers):
                p = f"dec.{j}"
                h = _ln(y, P, f"{p}.ln1", ext)
                q = _linear(h, P, f"{p}.self.wq", ext)
                k_new = _linear(h, P, f"{p}.self.wk", ext).data.reshape(b, 1, -1)
                v_new = _linear(h, P, f"{p}.self.wv", ext).data.reshape(b, 1, -1)
                self.self_k[j] = np.concatenate([self.self_k[j], k_new], axis=1)
                self.self_v[j] = np.concatenate([self.self_v[j], v_new], axis=1)
                t = self.self_k[j].shape[1]
                k = Tensor(self.self_k[j].reshape(b * t, -1))
                v = Tensor(self.self_v[j].reshape(b * t, -1))
                ctx = nx.attention(q, k, v, a.dec_heads[j], b)
                y = nx.add(y, _linear(ctx, P, f"{p}.self.wo", ext))
                h = _ln(y, P, f"{p}.ln2", ext)
                q = _linear(h, P, f"{p}.cross.wq", ext)
                mask = nx.attention_mask(b, 1, self.cross_mask[j].shape[1], key_valid=self.cross_mask[j])
                ctx = nx.attention(q, Tensor(self.cross_k[j]), Tensor(self.cross_v[j]),
                                   a.ende_heads[j], b, mask)
                y = nx.add(y, _linear(ctx, P, f"{p}.cross.wo", ext))
                y = nx.add(y, _ffn(_ln(y, P, f"{p}.ln3", ext), P, f"{p}.ffn", ext))
            y = _ln(y, P, "dec.ln", ext)
            logits = nx.matmul(y, table, transpose_b=True)
        self.step += 1
        return logits.data


# -------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"HATCKPT"


def save_weights(path, weights: ModelWeights, blocks: dict | None = None) -> None:
    """Write a checkpoint; values are stored as float32.

    ``blocks`` may replace some parameters with coded (quantized) blocks.
    """
    from .container import write_container
    meta = {"space": weights.space.to_dict(),
            "arch": None if weights.arch is None else weights.arch.to_dict()}
    write_container(path, CKPT_MAGIC, meta, blocks if blocks is not None else weights.params)


def load_weights(path) -> ModelWeights:
    """Read a checkpoint (plain or quantized); coded blocks are dequantized."""
    from .container import ArtifactError, CodedBlock, read_container
    meta, blocks = read_container(path, CKPT_MAGIC)
    try:
        space = DesignSpace.from_dict(meta["space"])
        arch = None if meta.get("arch") is None else ArchConfig.from_dict(meta["arch"])
    except (KeyError, ValidationError) as exc:
        raise ArtifactError(f"{path}: bad checkpoint metadata ({exc})") from None
    params = {}
    for name, b in blocks.items():
        params[name] = b.codebook[b.codes.astype(np.int64)] if isinstance(b, CodedBlock) else b
    expected = param_shapes(space) if arch is None else arch_extents(space, arch)
    if set(expected) != set(params) or any(params[k].shape != tuple(v) for k, v in expected.items()):
        raise ArtifactError(f"{path}: parameter blocks do not match the stored design space/arch")
    return ModelWeights(space, params, arch)
