"""Caption metrics implemented from first principles: BLEU-n and CIDEr.

Tokenization is deterministic and shared by hypotheses, references and the
IDF corpus: lowercase, split on whitespace, strip leading/trailing
punctuation per token, drop empties.

BLEU is the geometric mean of clipped n-gram precisions times a brevity
penalty. Orders longer than the hypothesis contribute no n-grams and are
excluded from the mean, so a sentence identical to its reference scores 1.0
at any max_n. Without smoothing, any zero precision zeroes the score;
with ``smooth=True`` orders n >= 2 use add-one counts.

CIDEr is the average over n = 1..4 of the mean cosine similarity between
TF-IDF n-gram vectors of the hypothesis and each distinct reference,
scaled by 10. tf = count / total n-grams of the sentence;
idf = ln(corpus_size / max(1, df)) with df counted over corpus sentences.
Exact duplicate references are collapsed before averaging. The gaussian
length penalty of the -D variant is deliberately omitted at this scale.
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass

PUNCT = set(string.punctuation)


def tokenize(text: str) -> list[str]:
    out = []
    for piece in text.lower().split():
        tok = piece.strip("".join(PUNCT))
        if tok:
            out.append(tok)
    return out


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(
    hypothesis: list[str],
    references: list[list[str]],
    max_n: int = 4,
    smooth: bool = False,
) -> float:
    if not hypothesis:
        raise ValueError("hypothesis must be non-empty")
    if not references or any(not r for r in references):
        raise ValueError("references must be non-empty")

    log_precisions = []
    for n in range(1, max_n + 1):
        total = len(hypothesis) - n + 1
        if total <= 0:
            continue
        hyp_counts = _ngrams(hypothesis, n)
        clipped = 0
        for gram, count in hyp_counts.items():
            best = max(_ngrams(ref, n).get(gram, 0) for ref in references)
            clipped += min(count, best)
        if smooth and n >= 2:
            p = (clipped + 1) / (total + 1)
        else:
            if clipped == 0:
                return 0.0
            p = clipped / total
        log_precisions.append(math.log(p))

    c = len(hypothesis)
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(sum(log_precisions) / len(log_precisions))


def bleu_scores(hypothesis, references, smooth: bool = False) -> dict[str, float]:
    """Cumulative BLEU-1..4, the usual reporting set."""
    return {
        f"bleu{n}": bleu(hypothesis, references, max_n=n, smooth=smooth)
        for n in range(1, 5)
    }


@dataclass
class NGramStats:
    """Document frequencies per n-gram order over a reference corpus."""

    max_n: int
    corpus_size: int
    doc_freq: list[Counter]  # index n-1

    def idf(self, n: int, gram: tuple) -> float:
        return math.log(self.corpus_size / max(1, self.doc_freq[n - 1][gram]))


def build_idf(reference_corpus: list[list[str]], max_n: int = 4) -> NGramStats:
    if not reference_corpus:
        raise ValueError("reference corpus must be non-empty")
    doc_freq = [Counter() for _ in range(max_n)]
    for sentence in reference_corpus:
        for n in range(1, max_n + 1):
            for gram in set(_ngrams(sentence, n)):
                doc_freq[n - 1][gram] += 1
    return NGramStats(max_n=max_n, corpus_size=len(reference_corpus), doc_freq=doc_freq)


def _tfidf_vector(tokens: list[str], n: int, stats: NGramStats) -> dict:
    counts = _ngrams(tokens, n)
    total = sum(counts.values())
    if total == 0:
        return {}
    return {g: (c / total) * stats.idf(n, g) for g, c in counts.items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0.0 or nb == 0.0:
        return 0.0
    dot = sum(v * b[g] for g, v in a.items() if g in b)
    return dot / (na * nb)


def cider(hypothesis: list[str], references: list[list[str]], stats: NGramStats) -> float:
    if not references or any(not r for r in references):
        raise ValueError("references must be non-empty")
    distinct = []
    for ref in references:
        if ref not in distinct:
            distinct.append(ref)

    per_n = []
    for n in range(1, stats.max_n + 1):
        hyp_vec = _tfidf_vector(hypothesis, n, stats)
        sims = [_cosine(hyp_vec, _tfidf_vector(ref, n, stats)) for ref in distinct]
        per_n.append(sum(sims) / len(sims))
    return 10.0 * sum(per_n) / len(per_n)
