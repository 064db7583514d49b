"""Independent oracles shared by unit and acceptance tests."""
from __future__ import annotations

import itertools
import math
from fractions import Fraction

import torch

from mmslt.models import FeatureSeq
from mmslt.translate import length_penalty


def numeric_grad(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
    """Central differences of scalar f() w.r.t. every entry of x (float64, in place)."""
    g = torch.zeros_like(x)
    flat, gflat = x.data.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        up = float(f())
        flat[i] = old - h
        down = float(f())
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def rel_error(a: torch.Tensor, b: torch.Tensor) -> float:
    scale = max(a.abs().max().item(), b.abs().max().item(), 1e-12)
    return (a - b).abs().max().item() / scale


def check_grads(f, tensors) -> float:
    """Max relative error between autograd and central differences over ``tensors``."""
    for t in tensors:
        t.grad = None
    f().backward()
    worst = 0.0
    for t in tensors:
        analytic = t.grad.detach().clone()
        with torch.no_grad():
            numeric = numeric_grad(f, t)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


# ---------------------------------------------------------------------------
# metric oracle table (hand-derived closed forms, exact ratios via Fraction)

def _bleu_closed(precisions, hyp_len, ref_len):
    if any(p == 0 for p in precisions):
        return 0.0
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - Fraction(ref_len, hyp_len))
    prod = Fraction(1)
    for p in precisions:
        prod *= p
    return 100.0 * bp * float(prod) ** (1.0 / len(precisions))


F_ = Fraction
METRIC_CASES = [
    # (kind, n, hypotheses, references, expected)
    ("bleu", 4, ["a b c d"], ["a b c d"], 100.0),
    ("bleu", 4, ["a b c d"], ["a b c d e"], _bleu_closed([F_(1)] * 4, 4, 5)),            # 77.88
    ("bleu", 4, ["a b c d e"], ["a b c d"], _bleu_closed([F_(4, 5), F_(3, 4), F_(2, 3), F_(1, 2)], 5, 4)),
    ("bleu", 4, ["the the the the"], ["the cat"], 0.0),
    ("bleu", 1, ["the the the the"], ["the cat"], _bleu_closed([F_(1, 4)], 4, 2)),     # 25
    ("bleu", 4, ["a b c d", "x y"], ["a b c d", "x z"],
     _bleu_closed([F_(5, 6), F_(3, 4), F_(1), F_(1)], 6, 6)),
    ("bleu", 2, ["a b a"], ["a b"], _bleu_closed([F_(2, 3), F_(1, 2)], 3, 2)),
    ("rouge", 0, ["a b c"], ["a c"], 80.0),
    ("rouge", 0, ["a b"], ["c d"], 0.0),
    ("rouge", 0, ["a b c", "x"], ["a c", "y"], 40.0),
]


# ---------------------------------------------------------------------------
# brute-force decoding oracle

class TableDecoder:
    """Step decoder whose next-token distribution depends on the prefix only.

    Vocabulary {0: BOS, 1: EOS, 2: 'x', 3: 'y'}; the log-probabilities are
    drawn once per prefix from a seeded generator.
    """

    def __init__(self, seed: int = 0, vocab: int = 4, bos: int = 0):
        self.seed, self.vocab, self.bos = seed, vocab, bos
        self._table: dict[tuple, torch.Tensor] = {}

    def dist(self, prefix: tuple) -> torch.Tensor:
        if prefix not in self._table:
            g = torch.Generator().manual_seed(hash((self.seed,) + prefix) % (2 ** 31))
            logits = 3.0 * torch.randn(self.vocab, generator=g, dtype=torch.float64)
            logits[self.bos] = float("-inf")
            self._table[prefix] = logits.log_softmax(-1)
        return self._table[prefix]

    def log_probs(self, memory, prefixes: torch.Tensor) -> torch.Tensor:
        return torch.stack([self.dist(tuple(p.tolist())) for p in prefixes])


def brute_force_best(dec: TableDecoder, max_len: int, eos: int, alpha: float):
    """Highest penalised score over every sequence the search may return."""
    best = (-math.inf, None)
    symbols = [t for t in range(dec.vocab) if t != dec.bos]
    for n in range(1, max_len + 1):
        for seq in itertools.product(symbols, repeat=n):
            if eos in seq[:-1]:
                continue
            if seq[-1] != eos and n != max_len:
                continue
            lp, prefix = 0.0, (dec.bos,)
            for t in seq:
                lp += float(dec.dist(prefix)[t])
                prefix += (t,)
            score = lp / length_penalty(n, alpha)
            if score > best[0]:
                best = (score, list(seq))
    return best


def dummy_memory() -> FeatureSeq:
    return FeatureSeq(torch.zeros(1, 1, 1), torch.ones(1, 1, dtype=torch.bool), "M")
