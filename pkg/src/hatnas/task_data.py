"""Synthetic sequence-to-sequence tasks, batching, decoding and accuracy."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .container import ArtifactError
from .design_space import ArchConfig, ValidationError
from .supernet import BOS, EOS, PAD, DecoderState, ModelWeights

TASKS = ("copy", "reverse", "sort")
CORPUS_MAGIC = "HATCORP"
CORPUS_VERSION = 1

Pair = tuple[tuple[int, ...], tuple[int, ...]]


def transform(task: str, tokens: Sequence[int]) -> list[int]:
    if task == "copy":
        return list(tokens)
    if task == "reverse":
        return list(tokens)[::-1]
    if task == "sort":
        return sorted(tokens)
    raise ValidationError(f"unknown task {task!r}; expected one of {TASKS}")


@dataclass
class Corpus:
    task: str
    seed: int
    vocab_size: int
    min_len: int
    max_len: int
    train: list[Pair] = field(default_factory=list)
    valid: list[Pair] = field(default_factory=list)
    test: list[Pair] = field(default_factory=list)

    def split(self, name: str) -> list[Pair]:
        if name not in ("train", "valid", "test"):
            raise ValidationError(f"unknown split {name!r}")
        return getattr(self, name)

    def header(self) -> dict:
        return {"task": self.task, "seed": self.seed, "vocab_size": self.vocab_size,
                "min_len": self.min_len, "max_len": self.max_len,
                "n_train": len(self.train), "n_valid": len(self.valid), "n_test": len(self.test)}

    def save(self, path: str | Path) -> None:
        lines = [f"{CORPUS_MAGIC} {CORPUS_VERSION}", json.dumps(self.header(), sort_keys=True)]
        for name in ("train", "valid", "test"):
            for src, tgt in self.split(name):
                lines.append(f"{name}\t{' '.join(map(str, src))}\t{' '.join(map(str, tgt))}")
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "Corpus":
        path = Path(path)
        expect = f"{CORPUS_MAGIC} {CORPUS_VERSION}"
        try:
            lines = path.read_text().splitlines()
        except OSError as exc:
            raise ArtifactError(f"{path}: cannot read ({exc}); expected corpus {expect}") from None
        if not lines or lines[0] != expect:
            raise ArtifactError(f"{path}: expected header '{expect}'")
        try:
            h = json.loads(lines[1])
            corpus = cls(h["task"], h["seed"], h["vocab_size"], h["min_len"], h["max_len"])
            for line in lines[2:]:
                name, src, tgt = line.split("\t")
                corpus.split(name).append((tuple(map(int, src.split())), tuple(map(int, tgt.split()))))
        except (IndexError, KeyError, ValueError) as exc:
            raise ArtifactError(f"{path}: corrupt corpus file ({exc})") from None
        return corpus


def generate_corpus(task: str, n_train: int, n_valid: int, n_test: int, min_len: int, max_len: int,
                    vocab: int, seed: int, max_seq_len: int = 32) -> Corpus:
    """Random token sequences over the non-special ids and their task transforms.

    Source sequences are unique across all splits.
    """
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}")
    if not 1 <= min_len <= max_len:
        raise ValidationError(f"invalid lengths min={min_len} max={max_len}")
    if max_len > max_seq_len - 2:
        raise ValidationError(f"max_len {max_len} exceeds max_seq_len - 2 = {max_seq_len - 2}")
    if vocab <= EOS + 1:
        raise ValidationError("vocabulary leaves no usable tokens")
    rng = np.random.default_rng(seed)
    seen: set[tuple[int, ...]] = set()
    pairs: list[Pair] = []
    need = n_train + n_valid + n_test
    attempts = 0
    while len(pairs) < need:
        attempts += 1
        if attempts > 50 * need + 1000:
            raise ValidationError("cannot draw enough distinct sources for these sizes")
        n = int(rng.integers(min_len, max_len + 1))
        toks = tuple(int(t) for t in rng.integers(EOS + 1, vocab, size=n))
        if toks in seen:
            continue
        seen.add(toks)
        pairs.append((toks + (EOS,), tuple(transform(task, toks)) + (EOS,)))
    corpus = Corpus(task, seed, vocab, min_len, max_len)
    corpus.train = pairs[:n_train]
    corpus.valid = pairs[n_train:n_train + n_valid]
    corpus.test = pairs[n_train + n_valid:]
    return corpus


# ----------------------------------------------------------------- batching

def make_batch(pairs: Sequence[Pair]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Padded (source, decoder input, decoder target) id matrices."""
    b = len(pairs)
    slen = max(len(s) for s, _ in pairs)
    tlen = max(len(t) for _, t in pairs)
    src = np.full((b, slen), PAD, dtype=np.int64)
    tin = np.full((b, tlen), PAD, dtype=np.int64)
    tout = np.full((b, tlen), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, :len(s)] = s
        tout[i, :len(t)] = t
        tin[i, 0] = BOS
        tin[i, 1:len(t)] = t[:-1]
    return src, tin, tout


def iterate_batches(pairs: Sequence[Pair], batch_size: int, rng: np.random.Generator,
                    bucket: int = 16) -> Iterator[tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Endless shuffled batches; neighbouring lengths are grouped to cut padding."""
    pairs = list(pairs)
    if not pairs:
        raise ValidationError("cannot batch an empty split")
    while True:
        order = rng.permutation(len(pairs))
        batches = []
        chunk = batch_size * bucket
        for start in range(0, len(order), chunk):
            idx = sorted(order[start:start + chunk], key=lambda i: (len(pairs[i][0]), len(pairs[i][1])))
            batches.extend(idx[j:j + batch_size] for j in range(0, len(idx), batch_size))
        for k in rng.permutation(len(batches)):
            yield make_batch([pairs[i] for i in batches[k]])


def eval_batches(pairs: Sequence[Pair], batch_size: int):
    """Deterministic length-sorted batches covering every pair once."""
    order = sorted(range(len(pairs)), key=lambda i: (len(pairs[i][0]), len(pairs[i][1]), i))
    for j in range(0, len(order), batch_size):
        yield make_batch([pairs[i] for i in order[j:j + batch_size]])


# ----------------------------------------------------------------- decoding

def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def greedy_decode_batch(weights: ModelWeights, arch: ArchConfig, sources: Sequence[Sequence[int]],
                        max_len: int | None = None, stop_at_eos: bool = True) -> list[list[int]]:
    """Argmax decoding for many sources at once; each output ends at eos or max_len."""
    max_len = max_len or weights.space.max_seq_len
    src, _, _ = make_batch([(tuple(s), (EOS,)) for s in sources])
    state = DecoderState(weights, arch, src)
    b = len(sources)
    tokens = np.full(b, BOS, dtype=np.int64)
    out = [[] for _ in range(b)]
    done = np.zeros(b, dtype=bool)
    for _ in range(max_len):
        logits = state.advance(tokens)
        tokens = logits.argmax(axis=-1)
        for i in np.flatnonzero(~done):
            out[i].append(int(tokens[i]))
        if stop_at_eos:
            done |= tokens == EOS
            if done.all():
                break
    return out


def greedy_decode(weights, arch, src: Sequence[int], max_len: int | None = None,
                  stop_at_eos: bool = True) -> list[int]:
    return greedy_decode_batch(weights, arch, [src], max_len, stop_at_eos)[0]


def sequence_score(logprob: float, length: int, length_penalty: float) -> float:
    return logprob / (length ** length_penalty)


def beam_search(state, beam: int, length_penalty: float, max_len: int,
                bos: int = BOS, eos: int = EOS) -> tuple[list[int], float]:
    """Beam search over any object with ``advance(tokens)`` / ``reorder(index)``.

    ``state`` must start with a single row.  Hypotheses are ranked by summed
    log-probability while alive and by ``logprob / len**length_penalty`` once
    finished.  For beam > 1 the greedy path rides along as one extra row and
    wins if it scores higher, so widening the beam never loses to greedy.
    Returns (tokens, normalized score).
    """
    if beam < 1:
        raise ValidationError("beam must be >= 1")
    seqs: list[list[int]] = [[]]
    scores = np.zeros(1)
    finished: list[tuple[float, list[int]]] = []
    unfinished: list[tuple[float, list[int]]] = []
    track = beam > 1
    g_seq: list[int] = []
    g_score = 0.0
    greedy: tuple[float, list[int]] | None = None
    beam_open = True
    # the first step expands one shared row for both beam and greedy
    tokens = np.array([bos])
    g_row = 0
    for step in range(max_len):
        logp = _log_softmax(state.advance(tokens))
        vocab = logp.shape[1]
        rows, next_tokens = [], []
        if track and greedy is None:
            tok = int(np.argmax(logp[g_row]))
            g_score += logp[g_row, tok]
            g_seq = g_seq + [tok]
            if tok == eos:
                greedy = (sequence_score(g_score, len(g_seq), length_penalty), g_seq)
            elif step == max_len - 1:
                greedy = (sequence_score(g_score, len(g_seq), length_penalty), g_seq)
            else:
                g_next = (g_row, tok)
        if beam_open:
            n = len(seqs)
            cand = (scores[:, None] + logp[:n]).reshape(-1)
            top = np.argsort(-cand, kind="stable")[:2 * beam]
            keep_rows, keep_tok, keep_score = [], [], []
            for rank, c in enumerate(top):
                row, tok = divmod(int(c), vocab)
                if tok == eos:
                    if rank < beam:
                        seq = seqs[row] + [tok]
                        finished.append((sequence_score(cand[c], len(seq), length_penalty), seq))
                    continue
                if len(keep_rows) < beam:
                    keep_rows.append(row)
                    keep_tok.append(tok)
                    keep_score.append(cand[c])
            if len(finished) >= beam or not keep_rows:
                beam_open = False
            elif step == max_len - 1:
                unfinished = [(sequence_score(sc, len(seqs[r]) + 1, length_penalty), seqs[r] + [t])
                              for r, t, sc in zip(keep_rows, keep_tok, keep_score)]
                beam_open = False
            else:
                seqs = [seqs[r] + [t] for r, t in zip(keep_rows, keep_tok)]
                scores = np.array(keep_score)
                rows, next_tokens = list(keep_rows), list(keep_tok)
        g_alive = track and greedy is None
        if not beam_open and not g_alive:
            break
        if g_alive:
            g_row = len(rows)
            rows.append(g_next[0])
            next_tokens.append(g_next[1])
        state.reorder(np.array(rows))
        tokens = np.array(next_tokens)
    pool = finished or unfinished
    # ties keep discovery order
    best = max(range(len(pool)), key=lambda i: (pool[i][0], -i))
    result = pool[best]
    if greedy is not None and greedy[0] > result[0]:
        result = greedy
    return result[1], result[0]


def beam_decode(weights: ModelWeights, arch: ArchConfig, src: Sequence[int], beam: int = 4,
                length_penalty: float = 0.6, max_len: int | None = None) -> list[int]:
    max_len = max_len or weights.space.max_seq_len
    state = DecoderState(weights, arch, np.asarray([list(src)]))
    return beam_search(state, beam, length_penalty, max_len)[0]


def make_decoder(weights: ModelWeights, arch: ArchConfig, beam: int = 1, length_penalty: float = 0.6,
                 max_len: int | None = None, batch_size: int = 200) -> Callable[[list], list]:
    """Callable mapping a list of sources to a list of hypotheses."""
    def decode(sources):
        if beam == 1:
            out = []
            for j in range(0, len(sources), batch_size):
                out.extend(greedy_decode_batch(weights, arch, sources[j:j + batch_size], max_len))
            return out
        return [beam_decode(weights, arch, s, beam, length_penalty, max_len) for s in sources]
    return decode


def score_predictions(hyps: Sequence[Sequence[int]], golds: Sequence[Sequence[int]]) -> dict[str, float]:
    """Token accuracy (position-aligned, over gold tokens) and exact-match rate."""
    if len(hyps) != len(golds):
        raise ValidationError("hypotheses and references differ in count")
    hit = total = exact = 0
    for h, g in zip(hyps, golds):
        g = [t for t in g if t != PAD]
        n = min(len(h), len(g))
        hit += sum(1 for a, b in zip(h[:n], g[:n]) if a == b)
        total += len(g)
        exact += int(list(h) == g)
    return {"token_acc": hit / max(total, 1), "exact_match": exact / max(len(golds), 1)}


def sequence_accuracy(decoder: Callable[[list], list], pairs: Sequence[Pair]) -> dict[str, float]:
    hyps = decoder([list(s) for s, _ in pairs])
    return score_predictions(hyps, [list(t) for _, t in pairs])
