"""Per-cluster keyword reports from documents attached to items."""

from __future__ import annotations

import csv
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from ldpo.core import LabelVector, ValidationError, dump_json

# 100 common English function words
STOPWORDS = frozenset("""
a about after again all am an and any are as at be because been before between
but by can could did do does down during each few for from had has have he her
here him his how i if in into is it its just me more most my no not now of on
only or other our out over she should so some such than that the their them
then there these they this those through to too under until up very was we
were what when where which while who why will with would you your
""".split())

_TOKEN = re.compile(r"[^\W_]+(?:['-][^\W_]+)*", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens; punctuation is stripped."""
    return [t.lower() for t in _TOKEN.findall(text)]


@dataclass
class DocumentSet:
    docs: dict[str, list[str]]

    def __len__(self):
        return len(self.docs)

    @classmethod
    def from_texts(cls, texts: dict[str, str]) -> "DocumentSet":
        return cls({k: tokenize(v) for k, v in texts.items()})


def load_documents(path) -> DocumentSet:
    """A directory of UTF-8 files named by item id (extension dropped), or an
    ``item_id<TAB>text`` file."""
    path = Path(path)
    texts: dict[str, str] = {}
    if path.is_dir():
        for f in sorted(path.iterdir()):
            if f.is_file():
                item = f.stem if f.suffix else f.name
                if item in texts:
                    raise ValidationError(f"duplicate document for item {item!r}")
                texts[item] = f.read_text(encoding="utf-8")
    else:
        with open(path, newline="", encoding="utf-8") as fh:
            for line, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
                if not row:
                    continue
                if len(row) < 2:
                    raise ValidationError(f"{path}: line {line} needs item_id<TAB>text")
                if row[0] in texts:
                    raise ValidationError(f"{path}: duplicate item id {row[0]!r}")
                texts[row[0]] = "\t".join(row[1:])
    return DocumentSet.from_texts(texts)


def load_stopwords(path) -> frozenset[str]:
    return frozenset(tokenize(Path(path).read_text(encoding="utf-8")))


@dataclass
class KeywordReport:
    keywords: dict[int, list[tuple[str, int]]]
    removed_common: list[str] = field(default_factory=list)
    n_missing: int = 0

    def to_dict(self) -> dict:
        return {"clusters": {str(c): [[t, n] for t, n in kw]
                             for c, kw in sorted(self.keywords.items())},
                "removed_common": self.removed_common,
                "n_missing_documents": self.n_missing}

    def save(self, path) -> None:
        dump_json(self.to_dict(), path)


def _ranked(counts: Counter) -> list[tuple[str, int]]:
    return sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))


def extract_keywords(docs: DocumentSet, labels: LabelVector, top_n: int = 10,
                     commonality: float = 0.8, stopwords=STOPWORDS,
                     common_depth: int = 100) -> KeywordReport:
    """Top ``top_n`` terms per cluster after stopword and common-term removal.

    A term is common when it sits in the ``common_depth`` most frequent
    terms of at least ``commonality`` of the clusters; common terms are
    removed from every cluster.  Ranking is by occurrence count, then
    alphabetical.
    """
    if len(docs) == 0:
        raise ValidationError("empty document set")
    counts: dict[int, Counter] = {}
    missing = 0
    for item, lab in zip(labels.item_ids, labels.labels):
        tokens = docs.docs.get(item)
        if tokens is None:
            missing += 1
            continue
        c = counts.setdefault(int(lab), Counter())
        c.update(t for t in tokens if t not in stopwords)
    if not counts:
        raise ValidationError("no labeled item has a document")
    appear = Counter()
    for c in counts.values():
        appear.update(t for t, _ in _ranked(c)[:common_depth])
    n_clusters = len(counts)
    common = sorted(t for t, n in appear.items() if n / n_clusters >= commonality)
    drop = set(common)
    keywords = {lab: [(t, n) for t, n in _ranked(c) if t not in drop][:top_n]
                for lab, c in sorted(counts.items())}
    return KeywordReport(keywords, common, missing)
