"""Elastic encoder-decoder design space and SubTransformer genomes.

A genome is a fixed-length tuple of genes.  Decoder genes are stored for every
possible decoder layer, including the ones a given config does not activate,
so mutation and crossover always operate on vectors of the same length.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np


class ValidationError(ValueError):
    """Raised when a space, architecture, or input violates its contract."""


def _check_choices(name: str, values: Sequence[int]) -> None:
    if len(values) == 0:
        raise ValidationError(f"{name} must be non-empty")
    if any(int(v) <= 0 for v in values):
        raise ValidationError(f"{name} must hold positive ints, got {list(values)}")
    if list(values) != sorted(set(values)):
        raise ValidationError(f"{name} must be sorted ascending without duplicates, got {list(values)}")


@dataclass(frozen=True)
class DesignSpace:
    embed_choices: tuple[int, ...] = (64, 80)
    hidden_choices: tuple[int, ...] = (128, 256, 384)
    head_choices: tuple[int, ...] = (2, 4)
    decoder_layer_choices: tuple[int, ...] = (1, 2, 3, 4)
    encoder_layer_count: int = 4
    attend_span_choices: tuple[int, ...] = (1, 2, 3)
    qkv_dim: int = 64
    vocab_size: int = 32
    max_seq_len: int = 32

    def __post_init__(self):
        for name in ("embed_choices", "hidden_choices", "head_choices",
                     "decoder_layer_choices", "attend_span_choices"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        for name in ("embed_choices", "hidden_choices", "head_choices",
                     "decoder_layer_choices", "attend_span_choices"):
            _check_choices(name, getattr(self, name))
        for scalar in ("encoder_layer_count", "qkv_dim", "vocab_size", "max_seq_len"):
            if int(getattr(self, scalar)) <= 0:
                raise ValidationError(f"{scalar} must be positive")
        bad = [h for h in self.head_choices if self.qkv_dim % h]
        if bad:
            raise ValidationError(f"head choices {bad} do not divide qkv_dim={self.qkv_dim}")
        if max(self.attend_span_choices) > self.encoder_layer_count:
            raise ValidationError("attend span exceeds encoder layer count")

    @property
    def max_embed(self) -> int:
        return self.embed_choices[-1]

    @property
    def max_hidden(self) -> int:
        return self.hidden_choices[-1]

    @property
    def max_decoder_layers(self) -> int:
        return self.decoder_layer_choices[-1]

    def gene_choices(self) -> list[tuple[str, tuple[int, ...]]]:
        """(gene name, choices) in genome order."""
        genes = [
            ("encoder_embed_dim", self.embed_choices),
            ("decoder_embed_dim", self.embed_choices),
            ("decoder_layers", self.decoder_layer_choices),
        ]
        for i in range(self.encoder_layer_count):
            genes.append((f"enc_hidden.{i}", self.hidden_choices))
        for i in range(self.encoder_layer_count):
            genes.append((f"enc_heads.{i}", self.head_choices))
        for prefix, choices in (("dec_hidden", self.hidden_choices),
                                ("dec_heads", self.head_choices),
                                ("ende_heads", self.head_choices),
                                ("attend_spans", self.attend_span_choices)):
            for i in range(self.max_decoder_layers):
                genes.append((f"{prefix}.{i}", choices))
        return genes

    @property
    def genome_length(self) -> int:
        return 3 + 2 * self.encoder_layer_count + 4 * self.max_decoder_layers

    def genome(self, arch: "ArchConfig") -> tuple[int, ...]:
        return self.pad(arch).genes()

    def from_genome(self, genes: Sequence[int]) -> "ArchConfig":
        if len(genes) != self.genome_length:
            raise ValidationError(f"genome length {len(genes)} != {self.genome_length}")
        return ArchConfig.from_genes(genes, self.encoder_layer_count, self.max_decoder_layers)

    def pad(self, arch: "ArchConfig") -> "ArchConfig":
        """Extend active-only decoder gene lists to the full genome length.

        Missing inactive genes repeat the last active layer's value.
        """
        n = self.max_decoder_layers
        if all(len(getattr(arch, f)) == n for f in ArchConfig.DECODER_FIELDS):
            return arch
        updates = {}
        for f in ArchConfig.DECODER_FIELDS:
            vals = tuple(getattr(arch, f))
            if len(vals) < arch.decoder_layers or len(vals) > n:
                raise ValidationError(f"{f} has length {len(vals)}")
            updates[f] = vals + (vals[-1],) * (n - len(vals))
        return arch.replace(**updates)

    def check(self, arch: "ArchConfig") -> "ArchConfig":
        """Validate ``arch`` against this space and return the padded genome form."""
        if arch.encoder_layers != self.encoder_layer_count:
            raise ValidationError(
                f"encoder_layers={arch.encoder_layers} but space fixes {self.encoder_layer_count}")
        if arch.decoder_layers not in self.decoder_layer_choices:
            raise ValidationError(f"decoder_layers={arch.decoder_layers} not in {self.decoder_layer_choices}")
        for f in ("enc_hidden", "enc_heads"):
            if len(getattr(arch, f)) != self.encoder_layer_count:
                raise ValidationError(f"{f} must have {self.encoder_layer_count} entries")
        padded = self.pad(arch)
        for (name, choices), value in zip(self.gene_choices(), self.genome(padded)):
            if value not in choices:
                raise ValidationError(f"gene {name}={value} not in {choices}")
        return padded

    def contains(self, arch: "ArchConfig") -> bool:
        try:
            self.check(arch)
        except ValidationError:
            return False
        return True

    def largest(self) -> "ArchConfig":
        return self.from_genome([c[-1] for _, c in self.gene_choices()])

    def smallest(self) -> "ArchConfig":
        return self.from_genome([c[0] for _, c in self.gene_choices()])

    def size(self) -> int:
        """Number of distinct active configurations."""
        e = len(self.embed_choices) ** 2
        enc = (len(self.hidden_choices) * len(self.head_choices)) ** self.encoder_layer_count
        per_dec = len(self.hidden_choices) * len(self.head_choices) ** 2 * len(self.attend_span_choices)
        return e * enc * sum(per_dec ** n for n in self.decoder_layer_choices)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DesignSpace":
        try:
            return cls(**d)
        except TypeError as exc:
            raise ValidationError(f"bad design space fields: {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "DesignSpace":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class ArchConfig:
    encoder_embed_dim: int
    decoder_embed_dim: int
    encoder_layers: int
    decoder_layers: int
    enc_hidden: tuple[int, ...]
    enc_heads: tuple[int, ...]
    dec_hidden: tuple[int, ...]
    dec_heads: tuple[int, ...]
    ende_heads: tuple[int, ...]
    attend_spans: tuple[int, ...]

    DECODER_FIELDS = ("dec_hidden", "dec_heads", "ende_heads", "attend_spans")

    def __post_init__(self):
        for f in ("enc_hidden", "enc_heads") + self.DECODER_FIELDS:
            object.__setattr__(self, f, tuple(int(v) for v in getattr(self, f)))
        for f in ("encoder_embed_dim", "decoder_embed_dim", "encoder_layers", "decoder_layers"):
            object.__setattr__(self, f, int(getattr(self, f)))
        if self.decoder_layers < 1:
            raise ValidationError("decoder_layers must be >= 1")
        for f in self.DECODER_FIELDS:
            if len(getattr(self, f)) < self.decoder_layers:
                raise ValidationError(f"{f} shorter than decoder_layers")

    def replace(self, **changes) -> "ArchConfig":
        d = {f: getattr(self, f) for f in self.__dataclass_fields__}
        d.update(changes)
        return ArchConfig(**d)

    def active(self) -> "ArchConfig":
        """Copy with inactive decoder genes dropped."""
        n = self.decoder_layers
        return self.replace(**{f: getattr(self, f)[:n] for f in self.DECODER_FIELDS})

    def genes(self) -> tuple[int, ...]:
        """Flat genome in the order used by :meth:`DesignSpace.gene_choices`."""
        return (self.encoder_embed_dim, self.decoder_embed_dim, self.decoder_layers,
                *self.enc_hidden, *self.enc_heads, *self.dec_hidden, *self.dec_heads,
                *self.ende_heads, *self.attend_spans)

    @classmethod
    def from_genes(cls, genes: Sequence[int], n_enc: int, n_dec: int) -> "ArchConfig":
        g = [int(v) for v in genes]
        if len(g) != 3 + 2 * n_enc + 4 * n_dec:
            raise ValidationError(f"genome length {len(g)} does not match layout ({n_enc}, {n_dec})")
        pos = 3
        parts = []
        for width in (n_enc, n_enc, n_dec, n_dec, n_dec, n_dec):
            parts.append(tuple(g[pos:pos + width]))
            pos += width
        return cls(encoder_embed_dim=g[0], decoder_embed_dim=g[1], encoder_layers=n_enc,
                   decoder_layers=g[2], enc_hidden=parts[0], enc_heads=parts[1], dec_hidden=parts[2],
                   dec_heads=parts[3], ende_heads=parts[4], attend_spans=parts[5])

    def key(self) -> tuple:
        """Hashable identity of the active network (inactive genes ignored)."""
        a = self.active()
        return (a.encoder_embed_dim, a.decoder_embed_dim, a.encoder_layers, a.decoder_layers,
                a.enc_hidden, a.enc_heads, a.dec_hidden, a.dec_heads, a.ende_heads, a.attend_spans)

    def to_dict(self) -> dict:
        return {f: (list(v) if isinstance(v, tuple) else v)
                for f, v in ((f, getattr(self, f)) for f in self.__dataclass_fields__)}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        try:
            return cls(**{f: d[f] for f in cls.__dataclass_fields__})
        except KeyError as exc:
            raise ValidationError(f"arch JSON missing field {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        return cls.from_dict(json.loads(text))


FEATURE_NAMES = (
    "encoder_layers", "encoder_embed_dim", "enc_hidden_mean", "enc_heads_mean",
    "decoder_layers", "decoder_embed_dim", "dec_hidden_mean", "dec_heads_mean",
    "ende_heads_mean", "attend_span_mean",
)


def sample_uniform(space: DesignSpace, rng: np.random.Generator) -> ArchConfig:
    genes = [choices[rng.integers(len(choices))] for _, choices in space.gene_choices()]
    return space.from_genome(genes)


def mutate(parent: ArchConfig, p: float, space: DesignSpace, rng: np.random.Generator) -> ArchConfig:
    if not 0.0 <= p <= 1.0:
        raise ValidationError(f"mutation probability {p} outside [0, 1]")
    genes = []
    for (_, choices), value in zip(space.gene_choices(), space.genome(parent)):
        if rng.random() < p:
            value = choices[rng.integers(len(choices))]
        genes.append(value)
    return space.from_genome(genes)


def crossover(a: ArchConfig, b: ArchConfig, rng: np.random.Generator) -> ArchConfig:
    ga, gb = a.genes(), b.genes()
    if len(ga) != len(gb) or a.encoder_layers != b.encoder_layers:
        raise ValidationError("crossover parents have different genome layouts")
    genes = [x if rng.random() < 0.5 else y for x, y in zip(ga, gb)]
    return ArchConfig.from_genes(genes, a.encoder_layers, len(a.dec_hidden))


def encode_features(arch: ArchConfig) -> np.ndarray:
    a = arch.active()
    return np.array([
        a.encoder_layers,
        a.encoder_embed_dim,
        np.mean(a.enc_hidden),
        np.mean(a.enc_heads),
        a.decoder_layers,
        a.decoder_embed_dim,
        np.mean(a.dec_hidden),
        np.mean(a.dec_heads),
        np.mean(a.ende_heads),
        np.mean(a.attend_spans),
    ], dtype=np.float64)


def feature_bounds(space: DesignSpace) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature [min, max] over the whole space."""
    lo = [space.encoder_layer_count, space.embed_choices[0], space.hidden_choices[0], space.head_choices[0],
          space.decoder_layer_choices[0], space.embed_choices[0], space.hidden_choices[0],
          space.head_choices[0], space.head_choices[0], space.attend_span_choices[0]]
    hi = [space.encoder_layer_count, space.embed_choices[-1], space.hidden_choices[-1], space.head_choices[-1],
          space.decoder_layer_choices[-1], space.embed_choices[-1], space.hidden_choices[-1],
          space.head_choices[-1], space.head_choices[-1], space.attend_span_choices[-1]]
    return np.array(lo, dtype=np.float64), np.array(hi, dtype=np.float64)


def linear_flops(m: int, n: int, k: int) -> int:
    """FLOPs of an [m, k] x [k, n] product, a multiply-accumulate counted as 2."""
    return 2 * m * n * k


def estimate_flops(arch: ArchConfig, src_len: int, tgt_len: int, qkv_dim: int = 64,
                   vocab_size: int = 32) -> float:
    """Closed-form FLOPs for translating ``src_len`` tokens into ``tgt_len`` tokens.

    Counts matrix products only.  The encoder runs once over the source; the
    decoder runs one step per output token, attending to a growing self-attention
    cache and to the concatenated memory of its attended encoder layers.
    """
    if src_len < 1 or tgt_len < 1:
        raise ValidationError("lengths must be >= 1")
    a = arch.active()
    S, Q = src_len, qkv_dim
    ed, dd = a.encoder_embed_dim, a.decoder_embed_dim
    total = 0
    for h in a.enc_hidden:
        total += 3 * linear_flops(S, Q, ed)          # q, k, v projections
        total += 2 * linear_flops(S, S, Q)           # scores and context, summed over heads
        total += linear_flops(S, ed, Q)              # output projection
        total += linear_flops(S, h, ed) + linear_flops(S, ed, h)
    if ed != dd:
        total += linear_flops(S * max(a.attend_spans), dd, ed)   # width adapter
    for span in a.attend_spans:
        total += 2 * linear_flops(span * S, Q, dd)   # cross-attention k, v over memory
    for t in range(1, tgt_len + 1):
        for h, span in zip(a.dec_hidden, a.attend_spans):
            total += 3 * linear_flops(1, Q, dd) + 2 * linear_flops(1, t, Q) + linear_flops(1, dd, Q)
            total += linear_flops(1, Q, dd) + 2 * linear_flops(1, span * S, Q) + linear_flops(1, dd, Q)
            total += linear_flops(1, h, dd) + linear_flops(1, dd, h)
        total += linear_flops(1, vocab_size, dd)      # tied output projection
    return float(total)
