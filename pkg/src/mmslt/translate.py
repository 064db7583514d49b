"""Stage 2: decoder fine-tuning and autoregressive decoding."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .data import Batch, Vocabulary
from .models import MMSLT, FeatureSeq


@dataclass
class DecodeConfig:
    beam_size: int = 8
    length_penalty: float = 1.0
    max_len: int = 32

    def __post_init__(self):
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")


def default_max_len(sentence_lengths: Sequence[int]) -> int:
    """1.5x the longest training sentence, capped at 128."""
    longest = max(sentence_lengths, default=1)
    return int(min(128, math.ceil(1.5 * longest)))


def slt_loss(logits: torch.Tensor, targets: torch.Tensor, mask: Optional[torch.Tensor] = None,
             smoothing: float = 0.0) -> torch.Tensor:
    """Label-smoothed cross-entropy averaged over real target positions.

    Per position: (1 - eps) * NLL(target) + eps * mean over the vocabulary
    of -log p.
    """
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    if not 0.0 <= smoothing < 1.0:
        raise ValueError("smoothing must be in [0, 1)")
    if mask is None:
        mask = torch.ones_like(targets, dtype=torch.bool)
    logp = logits.log_softmax(-1)
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    per_pos = (1.0 - smoothing) * nll + smoothing * (-logp.mean(-1))
    n = mask.sum()
    if n == 0:
        raise ValueError("no real target positions")
    return (per_pos * mask.to(per_pos.dtype)).sum() / n


def decoder_io(tokens: torch.Tensor, token_mask: torch.Tensor, bos: int, eos: int, pad: int):
    """Teacher-forcing inputs [BOS w1..wn] and targets [w1..wn EOS], with a shared mask."""
    B, L = tokens.shape
    lengths = token_mask.sum(1)
    inp = torch.full((B, L + 1), pad, dtype=torch.long)
    tgt = torch.full((B, L + 1), pad, dtype=torch.long)
    inp[:, 0] = bos
    inp[:, 1:] = torch.where(token_mask, tokens, torch.full_like(tokens, pad))
    tgt[:, :L] = torch.where(token_mask, tokens, torch.full_like(tokens, pad))
    tgt[torch.arange(B), lengths] = eos
    mask = torch.arange(L + 1)[None] <= lengths[:, None]
    return inp, tgt, mask


class StepDecoder(Protocol):
    def log_probs(self, memory: FeatureSeq, prefixes: torch.Tensor) -> torch.Tensor: ...


def length_penalty(length: int, alpha: float) -> float:
    return ((5.0 + length) / 6.0) ** alpha


@dataclass
class Hypothesis:
    tokens: list[int]           # generated ids after <BOS>, including a final <EOS> if any
    logprob: float
    finished: bool = False

    def score(self, alpha: float) -> float:
        return self.logprob / length_penalty(len(self.tokens), alpha)


def _strip_eos(tokens: Sequence[int], eos: int) -> list[int]:
    return list(tokens[:-1]) if tokens and tokens[-1] == eos else list(tokens)


@torch.no_grad()
def greedy_search(M: FeatureSeq, decoder: StepDecoder, max_len: int, bos: int, eos: int) -> Hypothesis:
    tokens: list[int] = []
    logprob = 0.0
    for _ in range(max_len):
        prefix = torch.tensor([[bos] + tokens], dtype=torch.long)
        lp = decoder.log_probs(M, prefix)[0].double()
        nxt = int(torch.argmax(lp))
        logprob += float(lp[nxt])
        tokens.append(nxt)
        if nxt == eos:
            break
    return Hypothesis(tokens, logprob, True)


def greedy_decode(M: FeatureSeq, decoder: StepDecoder, max_len: int, bos: int, eos: int) -> list[int]:
    return _strip_eos(greedy_search(M, decoder, max_len, bos, eos).tokens, eos)


@torch.no_grad()
def beam_search(M: FeatureSeq, decoder: StepDecoder, cfg: DecodeConfig, bos: int, eos: int) -> list[Hypothesis]:
    """Finished hypotheses, best first by length-penalised score.

    Each step keeps the ``beam_size`` best expansions by cumulative
    log-probability; those ending in <EOS> leave the beam. Search stops when
    ``beam_size`` hypotheses have finished, the beam is empty, or
    ``max_len`` tokens were generated (survivors then count as finished).
    Equal cumulative scores are ordered by the step's own log-probability,
    then beam index, then token id, which makes beam size 1 coincide with
    greedy argmax decoding.
    """
    live = [Hypothesis([], 0.0)]
    finished: list[Hypothesis] = []
    for step in range(cfg.max_len):
        prefixes = torch.tensor([[bos] + h.tokens for h in live], dtype=torch.long)
        lp = decoder.log_probs(M, prefixes).double().numpy()
        cum = np.array([h.logprob for h in live])[:, None] + lp
        n, V = lp.shape
        beam_idx = np.repeat(np.arange(n), V)
        tok_idx = np.tile(np.arange(V), n)
        order = np.lexsort((tok_idx, beam_idx, -lp.ravel(), -cum.ravel()))[: cfg.beam_size]
        new_live = []
        for flat in order:
            b, t = int(beam_idx[flat]), int(tok_idx[flat])
            h = Hypothesis(live[b].tokens + [t], float(cum.ravel()[flat]))
            if t == eos or step == cfg.max_len - 1:
                h.finished = True
                finished.append(h)
            else:
                new_live.append(h)
        live = new_live
        if not live or len(finished) >= cfg.beam_size:
            break
    finished.sort(key=lambda h: (-h.score(cfg.length_penalty), len(h.tokens), h.tokens))
    return finished


def beam_decode(M: FeatureSeq, decoder: StepDecoder, cfg: DecodeConfig, bos: int, eos: int) -> list[int]:
    return _strip_eos(beam_search(M, decoder, cfg, bos, eos)[0].tokens, eos)


@torch.no_grad()
def sequence_logprob(M: FeatureSeq, decoder: StepDecoder, tokens: Sequence[int], bos: int) -> float:
    """Sum of step-wise log-probabilities the decoding path assigns to ``tokens``."""
    total = 0.0
    prefix = [bos]
    for t in tokens:
        lp = decoder.log_probs(M, torch.tensor([prefix], dtype=torch.long))[0]
        total += float(lp[t])
        prefix.append(int(t))
    return total


def teacher_forced_loss(batch: Batch, model: MMSLT, vocab: Vocabulary, smoothing: float = 0.0):
    M, _, _ = model.encode_video(batch.frames, batch.frame_mask, batch.descriptions)
    inp, tgt, mask = decoder_io(batch.tokens, batch.token_mask, vocab.bos_id, vocab.eos_id, vocab.pad_id)
    logits = model.dec(inp, mask, M)
    return slt_loss(logits, tgt, mask, smoothing)


def finetune_step(batch: Batch, model: MMSLT, optimizer: torch.optim.Optimizer, vocab: Vocabulary,
                  lr: Optional[float] = None, smoothing: float = 0.2) -> float:
    model.train()
    if lr is not None:
        for g in optimizer.param_groups:
            g["lr"] = lr
    loss = teacher_forced_loss(batch, model, vocab, smoothing)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


@torch.no_grad()
def translate_batch(batch: Batch, model: MMSLT, vocab: Vocabulary, cfg: DecodeConfig) -> list[tuple[list[int], float]]:
    """Decode every video of ``batch`` one at a time; returns (token ids, penalised score)."""
    model.eval()
    out = []
    for b in range(len(batch)):
        T = int(batch.frame_mask[b].sum())
        desc = None if batch.descriptions is None else batch.descriptions[b:b + 1, :T]
        M, _, _ = model.encode_video(batch.frames[b:b + 1, :T], batch.frame_mask[b:b + 1, :T], desc)
        best = beam_search(M, model.dec, cfg, vocab.bos_id, vocab.eos_id)[0]
        out.append((_strip_eos(best.tokens, vocab.eos_id), best.score(cfg.length_penalty)))
    return out
