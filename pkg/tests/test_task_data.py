import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hatnas.container import ArtifactError
from hatnas.design_space import ValidationError
from hatnas.supernet import BOS, EOS, PAD, forward, init_super
from hatnas.task_data import (Corpus, beam_decode, beam_search, eval_batches, generate_corpus, greedy_decode,
                              greedy_decode_batch, iterate_batches, make_batch, make_decoder, score_predictions,
                              sequence_accuracy, sequence_score, transform)


@pytest.mark.parametrize("task,src,tgt", [("reverse", [5, 7, 9], [9, 7, 5]),
                                          ("copy", [5, 7, 9], [5, 7, 9]),
                                          ("sort", [9, 5, 7], [5, 7, 9])])
def test_transforms(task, src, tgt):
    assert transform(task, src) == tgt


def test_unknown_task():
    with pytest.raises(ValidationError):
        transform("shuffle", [3])
    with pytest.raises(ValidationError):
        generate_corpus("shuffle", 1, 1, 1, 2, 3, 32, 0)


@pytest.mark.parametrize("lens", [(0, 3), (5, 4), (4, 31)])
def test_invalid_lengths(lens):
    with pytest.raises(ValidationError):
        generate_corpus("copy", 5, 1, 1, *lens, vocab=32, seed=0)


def test_corpus_invariants(tiny_corpus):
    c = tiny_corpus
    splits = [{s for s, _ in c.split(n)} for n in ("train", "valid", "test")]
    assert len(splits[0]) == 200 and len(splits[1]) == 40 and len(splits[2]) == 40
    assert not (splits[0] & splits[1]) and not (splits[0] & splits[2]) and not (splits[1] & splits[2])
    for name in ("train", "valid", "test"):
        for src, tgt in c.split(name):
            assert src[-1] == EOS and tgt[-1] == EOS
            assert all(EOS < t < 32 for t in src[:-1])
            assert 3 <= len(src) - 1 <= 6
            assert list(tgt[:-1]) == list(src[:-1])[::-1]


def test_corpus_deterministic_and_bitwise_round_trip(tmp_path, tiny_corpus):
    again = generate_corpus("reverse", 200, 40, 40, 3, 6, 32, seed=3)
    tiny_corpus.save(tmp_path / "a.txt")
    again.save(tmp_path / "b.txt")
    assert (tmp_path / "a.txt").read_bytes() == (tmp_path / "b.txt").read_bytes()
    back = Corpus.load(tmp_path / "a.txt")
    assert back == tiny_corpus
    back.save(tmp_path / "c.txt")
    assert (tmp_path / "c.txt").read_bytes() == (tmp_path / "a.txt").read_bytes()
    assert generate_corpus("reverse", 200, 40, 40, 3, 6, 32, seed=4).train != tiny_corpus.train


def test_corpus_load_errors(tmp_path):
    with pytest.raises(ArtifactError, match="HATCORP 1"):
        Corpus.load(tmp_path / "missing.txt")
    (tmp_path / "bad.txt").write_text("HATCORP 9\n{}\n")
    with pytest.raises(ArtifactError, match="HATCORP 1"):
        Corpus.load(tmp_path / "bad.txt")
    (tmp_path / "junk.txt").write_text("HATCORP 1\nnot json\n")
    with pytest.raises(ArtifactError, match="corrupt"):
        Corpus.load(tmp_path / "junk.txt")


def test_make_batch_layout():
    src, tin, tout = make_batch([((4, 5, EOS), (5, 4, EOS)), ((6, EOS), (6, EOS))])
    np.testing.assert_array_equal(src, [[4, 5, EOS], [6, EOS, PAD]])
    np.testing.assert_array_equal(tin, [[BOS, 5, 4], [BOS, 6, PAD]])
    np.testing.assert_array_equal(tout, [[5, 4, EOS], [6, EOS, PAD]])


def test_iterate_batches_deterministic(tiny_corpus):
    a = iterate_batches(tiny_corpus.train, 16, np.random.default_rng(0))
    b = iterate_batches(tiny_corpus.train, 16, np.random.default_rng(0))
    for _ in range(30):      # crosses an epoch boundary
        for x, y in zip(next(a), next(b)):
            np.testing.assert_array_equal(x, y)


def test_iterate_batches_covers_epoch(tiny_corpus):
    it = iterate_batches(tiny_corpus.train, 16, np.random.default_rng(1))
    seen = []
    for _ in range(13):      # ceil(200 / 16)
        src, _, _ = next(it)
        seen += [tuple(int(t) for t in row if t != PAD) for row in src]
    assert sorted(seen) == sorted(s for s, _ in tiny_corpus.train)


def test_eval_batches_cover_each_pair_once(tiny_corpus):
    rows = [tuple(int(t) for t in r if t != PAD) for src, _, _ in eval_batches(tiny_corpus.valid, 7) for r in src]
    assert sorted(rows) == sorted(s for s, _ in tiny_corpus.valid)


# ---------------------------------------------------------------- beam search on a table model

class TableModel:
    """Log-probabilities from a dict keyed by prefix; unlisted prefixes are uniform."""

    def __init__(self, table, vocab=3):
        self.table = table
        self.vocab = vocab
        self.rows = [()]
        self.started = False

    def advance(self, tokens):
        if self.started:
            self.rows = [r + (int(t),) for r, t in zip(self.rows, tokens)]
        self.started = True
        return np.log(np.array([self.table.get(r, [1 / self.vocab] * self.vocab) for r in self.rows]))

    def reorder(self, index):
        self.rows = [self.rows[i] for i in index]


A, B, END = 0, 1, 2
TOY = {(): [0.6, 0.4 - 1e-9, 1e-9], (A,): [0.34, 0.33, 0.33], (B,): [0.05, 0.05, 0.9]}


def enumerate_best(table, max_len, lp, vocab=3):
    best = None
    for n in range(1, max_len + 1):
        for seq in itertools.product(range(vocab), repeat=n):
            if END in seq[:-1] or (n < max_len and seq[-1] != END):
                continue
            lp_sum = sum(np.log(table.get(seq[:i], [1 / vocab] * vocab)[seq[i]]) for i in range(n))
            s = sequence_score(lp_sum, n, lp)
            if best is None or s > best[0]:
                best = (s, list(seq))
    return best


def test_beam_two_beats_greedy_on_toy_table():
    greedy, _ = beam_search(TableModel(TOY), 1, 0.0, 3, bos=9, eos=END)
    beam, score = beam_search(TableModel(TOY), 2, 0.0, 3, bos=9, eos=END)
    oracle_score, oracle_seq = enumerate_best(TOY, 3, 0.0)
    assert greedy[0] == A
    assert beam == oracle_seq == [B, END]
    assert score == pytest.approx(np.log(0.4 * 0.9)) and score == pytest.approx(oracle_score)


def test_length_penalty_zero_is_raw_logprob():
    assert sequence_score(-3.5, 7, 0.0) == -3.5
    assert sequence_score(-4.0, 4, 1.0) == -1.0


def test_beam_requires_positive_width():
    with pytest.raises(ValidationError):
        beam_search(TableModel(TOY), 0, 0.6, 3, bos=9, eos=END)


def _score(table, seq, lp, vocab=3):
    lps = sum(np.log(table.get(tuple(seq[:i]), [1 / vocab] * vocab)[seq[i]]) for i in range(len(seq)))
    return sequence_score(lps, len(seq), lp)


@st.composite
def tables(draw):
    rng = np.random.default_rng(draw(st.integers(0, 2 ** 31)))
    vocab = 4
    table = {}
    for n in range(4):
        for prefix in itertools.product(range(vocab), repeat=n):
            table[prefix] = list(rng.dirichlet(np.ones(vocab) * 0.5) + 1e-12)
    return table


@given(tables(), st.integers(2, 4), st.sampled_from([0.0, 0.6, 1.0]))
@settings(max_examples=60)
def test_beam_score_not_below_greedy(table, beam, lp):
    greedy, g_score = beam_search(TableModel(table, 4), 1, lp, 4, bos=9, eos=END)
    seq, score = beam_search(TableModel(table, 4), beam, lp, 4, bos=9, eos=END)
    assert g_score == pytest.approx(_score(table, greedy, lp, 4))
    assert score == pytest.approx(_score(table, seq, lp, 4))
    assert score >= g_score - 1e-12


# ---------------------------------------------------------------- decoding with the model

@pytest.fixture(scope="module")
def random_model():
    from hatnas.design_space import DesignSpace
    space = DesignSpace()
    return init_super(space, 0), space


def test_beam_one_equals_greedy(random_model, tiny_corpus):
    w, space = random_model
    arch = space.smallest()
    for src, _ in tiny_corpus.valid[:8]:
        assert beam_decode(w, arch, src, beam=1, max_len=12) == greedy_decode(w, arch, src, max_len=12)


def test_batched_greedy_matches_single(random_model, tiny_corpus):
    w, space = random_model
    arch = space.largest()
    sources = [list(s) for s, _ in tiny_corpus.valid[:6]]
    batch = greedy_decode_batch(w, arch, sources, max_len=10)
    assert batch == [greedy_decode(w, arch, s, max_len=10) for s in sources]


def test_greedy_matches_teacher_forced_argmax(random_model):
    w, space = random_model
    arch = space.smallest()
    src = [5, 9, 11, EOS]
    out = greedy_decode(w, arch, src, max_len=6, stop_at_eos=False)
    tin = np.array([[BOS] + out[:-1]])
    logits = forward(w, arch, np.array([src]), tin).data
    assert list(logits.argmax(axis=1)) == out


def test_outputs_terminate_and_ids_in_range(random_model, tiny_corpus):
    w, space = random_model
    for beam in (1, 3):
        dec = make_decoder(w, space.smallest(), beam=beam, max_len=9)
        for hyp in dec([list(s) for s, _ in tiny_corpus.valid[:5]]):
            assert all(0 <= t < 32 for t in hyp)
            assert len(hyp) == 9 or hyp[-1] == EOS
            assert EOS not in hyp[:-1]


# ---------------------------------------------------------------- metrics

def test_perfect_oracle(tiny_corpus):
    m = sequence_accuracy(lambda srcs: [list(s[:-1])[::-1] + [EOS] for s in srcs], tiny_corpus.test)
    assert m == {"token_acc": 1.0, "exact_match": 1.0}


def test_constant_output_model(tiny_corpus):
    m = sequence_accuracy(lambda srcs: [[7, 7, 7, EOS] for _ in srcs], tiny_corpus.test)
    assert m["exact_match"] <= 0.05
    assert 0.0 <= m["token_acc"] <= 1.0


def test_score_predictions_hand_example():
    m = score_predictions([[5, 4, EOS], [6]], [[5, 9, EOS], [6, EOS]])
    assert m["token_acc"] == pytest.approx(3 / 5)
    assert m["exact_match"] == 0.0
    with pytest.raises(ValidationError):
        score_predictions([[1]], [])


@given(st.lists(st.tuples(st.lists(st.integers(0, 5), max_size=6), st.lists(st.integers(1, 5), min_size=1,
                                                                            max_size=6)), min_size=1))
def test_metrics_in_unit_interval(pairs):
    m = score_predictions([h for h, _ in pairs], [g for _, g in pairs])
    assert 0.0 <= m["token_acc"] <= 1.0 and 0.0 <= m["exact_match"] <= 1.0
