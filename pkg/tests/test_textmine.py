import numpy as np
import pytest

import oracles
from ldpo.core import LabelVector, ValidationError
from ldpo.textmine import (STOPWORDS, DocumentSet, extract_keywords, load_documents,
                           load_stopwords, tokenize)

VOCAB = ["nodule", "effusion", "adenopathy", "liver", "lesion", "cyst", "kidney",
         "mass", "edema", "fracture", "spleen", "aorta", "the", "of", "and"]


def random_corpus(seed, n=40, k=4):
    rng = np.random.default_rng(seed)
    ids = [f"d{i:03d}" for i in range(n)]
    texts = {i: " ".join(rng.choice(VOCAB, size=int(rng.integers(0, 12)))) for i in ids}
    labels = rng.integers(0, k, n)
    return texts, ids, labels


def test_tokenize():
    assert tokenize("Mild LEFT-sided effusion; no pneumothorax. Patient's 2nd_scan") == \
        ["mild", "left-sided", "effusion", "no", "pneumothorax", "patient's", "2nd", "scan"]
    assert len(STOPWORDS) == 100 and "the" in STOPWORDS


def test_planted_term():
    texts = {f"a{i}": f"adenopathy seen near liver {i}" for i in range(5)}
    texts.update({f"b{i}": "kidney cyst kidney" for i in range(5)})
    ids = sorted(texts)
    labels = LabelVector.from_labels([0 if i.startswith("a") else 1 for i in ids], ids)
    rep = extract_keywords(DocumentSet.from_texts(texts), labels)
    assert rep.keywords[0][0] == ("adenopathy", 5)
    assert "adenopathy" not in dict(rep.keywords[1])


def test_common_term_removed():
    texts = {f"x{i}": f"contrast {w}" for i, w in enumerate(["liver", "kidney", "aorta"] * 2)}
    ids = sorted(texts)
    labels = LabelVector.from_labels([int(i[1:]) % 3 for i in ids], ids)
    rep = extract_keywords(DocumentSet.from_texts(texts), labels, commonality=1.0)
    assert rep.removed_common == ["contrast"]
    assert all("contrast" not in dict(kw) for kw in rep.keywords.values())


@pytest.mark.parametrize("seed", range(5))
def test_counting_oracle(seed):
    texts, ids, labels = random_corpus(seed)
    docs = DocumentSet.from_texts(texts)
    # an absent document is skipped and counted
    lv = LabelVector.from_labels(labels, ids)
    del docs.docs[ids[0]]
    rep = extract_keywords(docs, lv, top_n=50, commonality=1.1)
    ref = oracles.keyword_counts(docs.docs, dict(zip(ids, labels.tolist())), STOPWORDS)
    assert rep.n_missing == 1 and rep.removed_common == []
    for c, kw in rep.keywords.items():
        assert dict(kw) == dict(ref[c])
        assert [n for _, n in kw] == sorted((n for _, n in kw), reverse=True)
        for (t1, n1), (t2, n2) in zip(kw, kw[1:]):
            assert n1 > n2 or t1 < t2


def test_order_and_relabel_invariance():
    texts, ids, labels = random_corpus(7)
    base = extract_keywords(DocumentSet.from_texts(texts), LabelVector.from_labels(labels, ids))
    perm = np.random.default_rng(0).permutation(len(ids))
    shuffled = {ids[i]: texts[ids[i]] for i in perm}
    relabel = np.array([2, 0, 3, 1])
    lv = LabelVector.from_labels(relabel[labels][perm], [ids[i] for i in perm])
    rep = extract_keywords(DocumentSet.from_texts(shuffled), lv)
    assert rep.removed_common == base.removed_common
    for c, kw in base.keywords.items():
        assert rep.keywords[int(relabel[c])] == kw


def test_unique_terms_survive():
    rng = np.random.default_rng(8)
    k = 5
    texts, labs = {}, []
    for i in range(50):
        c = i % k
        texts[f"d{i}"] = " ".join(rng.choice(VOCAB[:12], 6)) + f" only{c}"
        labs.append(c)
    rep = extract_keywords(DocumentSet.from_texts(texts),
                           LabelVector.from_labels(labs, list(texts)),
                           top_n=20, commonality=1 / k + 0.01)
    for c in range(k):
        assert f"only{c}" in dict(rep.keywords[c])
        assert f"only{c}" not in rep.removed_common


def test_load_documents(tmp_path):
    d = tmp_path / "docs"
    d.mkdir()
    (d / "im1.txt").write_text("Liver lesion", encoding="utf-8")
    (d / "im2").write_text("kidney", encoding="utf-8")
    assert load_documents(d).docs == {"im1": ["liver", "lesion"], "im2": ["kidney"]}
    tsv = tmp_path / "docs.tsv"
    tsv.write_text("im1\tLiver lesion\n\nim2\tkidney\n", encoding="utf-8")
    assert load_documents(tsv).docs == {"im1": ["liver", "lesion"], "im2": ["kidney"]}
    tsv.write_text("im1\ta\nim1\tb\n", encoding="utf-8")
    with pytest.raises(ValidationError, match="duplicate"):
        load_documents(tsv)


def test_custom_stopwords(tmp_path):
    f = tmp_path / "stop.txt"
    f.write_text("Liver\nkidney\n", encoding="utf-8")
    stop = load_stopwords(f)
    assert stop == {"liver", "kidney"}
    docs = DocumentSet.from_texts({"a": "liver kidney the", "b": "the"})
    rep = extract_keywords(docs, LabelVector.from_labels([0, 0], ["a", "b"]), stopwords=stop,
                           commonality=1.1)
    assert rep.keywords[0] == [("the", 2)]


def test_errors():
    lv = LabelVector.from_labels([0], ["a"])
    with pytest.raises(ValidationError, match="empty"):
        extract_keywords(DocumentSet({}), lv)
    with pytest.raises(ValidationError):
        extract_keywords(DocumentSet.from_texts({"b": "x"}), lv)
