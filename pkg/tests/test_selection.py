import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iclcontrast.errors import DomainError, InputError, SelectionError, ValidationError
from iclcontrast.selection import (
    Bm25Index,
    CorpusEntry,
    bm25_rank,
    confounder_pairs,
    nearest_by_embedding,
    select_one_shot,
    tokenize,
)


def docs(*texts, labels=None):
    labels = labels or [None] * len(texts)
    return [CorpusEntry(id=f"d{i}", text=t, label=y) for i, (t, y) in enumerate(zip(texts, labels))]


def brute_bm25(query, texts, k1=1.2, b=0.75):
    toks = [re_tok(t) for t in texts]
    n = len(toks)
    avg = sum(map(len, toks)) / n
    out = []
    for doc in toks:
        s = 0.0
        for term in re_tok(query):
            df = sum(term in d for d in toks)
            f = doc.count(term)
            idf = math.log((n - df + 0.5) / (df + 0.5) + 1)
            s += idf * f * (k1 + 1) / (f + k1 * (1 - b + b * len(doc) / avg))
        out.append(s)
    return out


def re_tok(text):
    return "".join(c if c.isascii() and c.isalnum() else " " for c in text.lower()).split()


def test_tokenize():
    assert tokenize("Hello, World! x2-Y") == ["hello", "world", "x2", "y"]


def test_bm25_two_document_hand_values():
    index = Bm25Index.build(docs("a b", "a a b"))
    # N=2, df(a)=2, avgdl=2.5: idf = ln(1.2); length norms 1.2*(0.25+0.75*2/2.5)=1.02 and 1.38
    idf = math.log(1.2)
    expected = [idf * 1 * 2.2 / (1 + 1.02), idf * 2 * 2.2 / (2 + 1.38)]
    scores = index.scores("a")
    assert abs(scores[0] - expected[0]) <= 1e-12
    assert abs(scores[1] - expected[1]) <= 1e-12
    assert bm25_rank("a", index, 2)[0][0] == "d1"


def test_bm25_absent_term_scores_zero():
    index = Bm25Index.build(docs("red fox", "blue whale"))
    assert index.scores("zebra") == [0.0, 0.0]


def test_bm25_duplicated_corpus_keeps_ranking():
    texts = ["the cat sat", "a dog ran far", "cat and dog", "birds fly south", "cat cat cat"]
    query = "cat dog"
    single = [i for i, _ in bm25_rank(query, Bm25Index.build(docs(*texts)), 5)]
    doubled = Bm25Index.build(docs(*(texts + texts)))
    ranked = [i for i, _ in bm25_rank(query, doubled, 10)]
    # map duplicated ids back to the original document index
    order = []
    for doc_id in ranked:
        j = int(doc_id[1:]) % len(texts)
        if f"d{j}" not in order:
            order.append(f"d{j}")
    assert order == single


def test_bm25_errors_and_tie_break():
    index = Bm25Index.build(docs("x", "x", "y"))
    assert [i for i, _ in bm25_rank("x", index, 3)] == ["d0", "d1", "d2"]
    with pytest.raises(DomainError):
        bm25_rank("x", index, 0)
    with pytest.raises(InputError):
        Bm25Index.build([])
    with pytest.raises(ValidationError):
        Bm25Index.build([CorpusEntry("a", "x"), CorpusEntry("a", "y")])


words = st.sampled_from(["alpha", "beta", "gamma", "delta", "eps", "zeta"])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.lists(words, min_size=1, max_size=8).map(" ".join), min_size=1, max_size=8),
       st.lists(words, min_size=1, max_size=3).map(" ".join))
def test_bm25_matches_brute_force_and_is_nonnegative(texts, query):
    index = Bm25Index.build(docs(*texts))
    got = index.scores(query)
    ref = brute_bm25(query, texts)
    assert all(s >= 0 for s in got)
    assert np.allclose(got, ref, rtol=0, atol=1e-12)


def test_bm25_invariants():
    index = Bm25Index.build(docs("a b c", "b c", "a"))
    assert index.avg_len == 2.0
    assert all(df <= index.n_docs for df in index.doc_freq.values())


def test_nearest_examples():
    rng = np.random.default_rng(1987)
    corpus = [CorpusEntry(f"e{i:03d}", "", embedding=rng.normal(size=16)) for i in range(100)]
    q = corpus[42].embedding.copy()
    assert nearest_by_embedding(q, corpus) == "e042"
    assert nearest_by_embedding(3 * q, corpus, "cosine") == "e042"
    probe = rng.normal(size=16)
    for metric in ("cosine", "euclidean"):
        best = None
        for e in corpus:
            if metric == "cosine":
                dist = 1 - e.embedding @ probe / (np.linalg.norm(e.embedding) * np.linalg.norm(probe))
            else:
                dist = np.sqrt(np.sum((e.embedding - probe) ** 2))
            if best is None or (dist, e.id) < best:
                best = (dist, e.id)
        assert nearest_by_embedding(probe, corpus, metric) == best[1]
        shuffled = [corpus[i] for i in rng.permutation(100)]
        assert nearest_by_embedding(probe, shuffled, metric) == best[1]


def test_nearest_ties_and_errors():
    corpus = [CorpusEntry("b", "", embedding=np.ones(2)), CorpusEntry("a", "", embedding=np.ones(2))]
    assert nearest_by_embedding(np.ones(2), corpus) == "a"
    with pytest.raises(InputError):
        nearest_by_embedding(np.ones(2), [CorpusEntry("c", "")])


def test_confounder_pairs_examples():
    assert len(confounder_pairs(docs("same", "same", labels=[0, 1]))) == 1
    assert confounder_pairs(docs("same", "same", labels=[1, 1])) == []
    pairs = confounder_pairs(docs("t", "t", "t", labels=[0, 1, 1]))
    assert [(a.id, b.id) for a, b in pairs] == [("d0", "d1"), ("d0", "d2")]
    assert len({frozenset((a.id, b.id)) for a, b in pairs}) == len(pairs)


def test_select_one_shot_examples():
    train = docs("sunny beach day", "angry crowd shouting", labels=[0, 1])
    benign, hateful = select_one_shot("anything", train)
    assert (benign.id, hateful.id) == ("d0", "d1")

    train = docs("cats are lovely", "cats sleeping", "dogs barking", "loud dogs", labels=[0, 0, 1, 1])
    benign, _ = select_one_shot("cats sleeping", train)
    assert benign.id == "d1"
    with pytest.raises(SelectionError):
        select_one_shot("x", docs("a", "b", labels=[0, 0]))


def test_select_one_shot_matches_per_class_scan():
    rng = np.random.default_rng(1987)
    vocab = ["cat", "dog", "sun", "rain", "car", "tree", "bird", "fish", "road", "hill"]
    texts = [" ".join(rng.choice(vocab, size=rng.integers(2, 7))) for _ in range(50)]
    labels = [int(x) for x in rng.integers(0, 2, 50)]
    train = docs(*texts, labels=labels)
    query = "cat dog rain"
    scores = brute_bm25(query, texts)
    for label, pick in zip((0, 1), select_one_shot(query, train)):
        best = min((-scores[i], f"d{i}") for i in range(50) if labels[i] == label)
        assert pick.id == best[1]


def test_removing_non_query_term_only_matters_through_length():
    before = docs("cat hat mat", "dog log")
    after = docs("cat mat", "dog log")
    # with length normalization off, only query-term counts and document frequencies matter
    flat = [Bm25Index.build(c, b=0.0).scores("cat dog") for c in (before, after)]
    assert flat[0] == flat[1]
    normed = [Bm25Index.build(c).scores("cat dog") for c in (before, after)]
    assert normed[0] != normed[1]
