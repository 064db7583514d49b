"""Corpus BLEU-1..4 (no smoothing) and sentence-averaged ROUGE-L F1, both x100."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from .data import Tokenizer, WhitespaceTokenizer


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _check(hyps, refs):
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    if not hyps:
        raise ValueError("empty corpus")


def bleu(hypotheses: Sequence[str], references: Sequence[str], n: int = 4,
         tokenizer: Optional[Tokenizer] = None) -> float:
    """Corpus BLEU-n: geometric mean of clipped 1..n-gram precisions times BP."""
    _check(hypotheses, references)
    if not 1 <= n <= 4:
        raise ValueError("n must be in 1..4")
    tok = tokenizer or WhitespaceTokenizer()
    matches = [0] * n
    totals = [0] * n
    hyp_len = ref_len = 0
    for h, r in zip(hypotheses, references):
        ht, rt = tok.tokenize(h), tok.tokenize(r)
        hyp_len += len(ht)
        ref_len += len(rt)
        for k in range(1, n + 1):
            hc, rc = _ngrams(ht, k), _ngrams(rt, k)
            matches[k - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            totals[k - 1] += max(len(ht) - k + 1, 0)
    if hyp_len == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / n
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(hyp: Sequence[str], ref: Sequence[str]) -> float:
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return 2 * p * r / (p + r)


def rouge_l(hypotheses: Sequence[str], references: Sequence[str],
            tokenizer: Optional[Tokenizer] = None) -> float:
    _check(hypotheses, references)
    tok = tokenizer or WhitespaceTokenizer()
    scores = [rouge_l_sentence(tok.tokenize(h), tok.tokenize(r)) for h, r in zip(hypotheses, references)]
    return 100.0 * sum(scores) / len(scores)


@dataclass
class EvalReport:
    bleu1: float
    bleu2: float
    bleu3: float
    bleu4: float
    rouge_l: float
    n: int
    tokenization: str
    per_sentence: list[dict] = field(default_factory=list)

    def scores(self) -> dict[str, float]:
        return {"bleu1": self.bleu1, "bleu2": self.bleu2, "bleu3": self.bleu3,
                "bleu4": self.bleu4, "rouge_l": self.rouge_l}

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, indent=1)

    def table(self) -> str:
        head = ["BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L"]
        vals = [f"{v:.2f}" for v in self.scores().values()]
        widths = [max(len(a), len(b)) for a, b in zip(head, vals)]
        row = lambda cells: " | ".join(c.rjust(w) for c, w in zip(cells, widths))
        return "\n".join([row(head), "-+-".join("-" * w for w in widths), row(vals),
                          f"({self.n} sentences, {self.tokenization} tokens)"])


def evaluate(hypotheses: Sequence[str], references: Sequence[str], ids: Optional[Sequence[str]] = None,
             tokenizer: Optional[Tokenizer] = None) -> EvalReport:
    tok = tokenizer or WhitespaceTokenizer()
    ids = list(ids) if ids is not None else [str(i) for i in range(len(hypotheses))]
    per = []
    for i, h, r in zip(ids, hypotheses, references):
        per.append({"id": i, "bleu4": bleu([h], [r], 4, tok) if r.strip() else 0.0,
                    "rouge_l": 100.0 * rouge_l_sentence(tok.tokenize(h), tok.tokenize(r))})
    return EvalReport(*(bleu(hypotheses, references, k, tok) for k in range(1, 5)),
                      rouge_l(hypotheses, references, tok), len(hypotheses), tok.name, per)
