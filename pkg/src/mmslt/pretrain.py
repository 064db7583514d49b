"""Stage 1: description-mapper regression + multimodal-language alignment."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from pathlib import Path
from typing import Mapping, Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import Batch
from .models import MMSLT, FeatureSeq, describe_encode


def dm_loss(D_hat: torch.Tensor, D: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared L2 distance over real (video, frame) positions."""
    if D_hat.shape != D.shape:
        raise ValueError(f"shape mismatch: {tuple(D_hat.shape)} vs {tuple(D.shape)}")
    if mask.shape != D.shape[:-1]:
        raise ValueError(f"mask {tuple(mask.shape)} does not match features {tuple(D.shape)}")
    n = mask.sum()
    if n == 0:
        raise ValueError("no real positions")
    sq = ((D_hat - D) ** 2).sum(-1)
    return (sq * mask.to(sq.dtype)).sum() / n


def global_pool(values: torch.Tensor | FeatureSeq, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Average of the real positions of each sequence, B x d."""
    if isinstance(values, FeatureSeq):
        values, mask = values.values, values.mask
    if mask is None:
        mask = torch.ones(values.shape[:2], dtype=torch.bool)
    counts = mask.sum(1, keepdim=True)
    if bool((counts == 0).any()):
        raise ValueError("cannot pool an all-masked sequence")
    w = mask.unsqueeze(-1).to(values.dtype)
    return (values * w).sum(1) / counts.to(values.dtype)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    na, nb = a.norm(dim=-1), b.norm(dim=-1)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise ValueError("cosine similarity is undefined for zero vectors")
    return (a / na.unsqueeze(-1)) @ (b / nb.unsqueeze(-1)).T


def align_loss(M: torch.Tensor, L: torch.Tensor, tau) -> torch.Tensor:
    """Symmetric InfoNCE over cosine similarities of paired rows."""
    if M.ndim != 2 or M.shape != L.shape or M.shape[0] < 1:
        raise ValueError(f"expected two B x d matrices of equal shape, got {tuple(M.shape)}, {tuple(L.shape)}")
    logits = cosine_matrix(M, L) / tau
    target = torch.arange(M.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def mmlp_loss(align, dm, lam: float):
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return align + lam * dm


def retrieval_accuracy(M: torch.Tensor, L: torch.Tensor) -> float:
    """Fraction of rows j whose most similar sentence feature is L_j."""
    sim = cosine_matrix(M, L)
    return float((sim.argmax(1) == torch.arange(M.shape[0])).float().mean())


class AlignmentHead(nn.Module):
    """Learnable temperature tau = exp(-s), s initialised to ln(1/0.07)."""

    def __init__(self, lam: float = 0.1, init_tau: float = 0.07):
        super().__init__()
        if lam < 0:
            raise ValueError("lambda must be >= 0")
        self.lam = lam
        self.log_inv_tau = nn.Parameter(torch.tensor(math.log(1.0 / init_tau)))

    @property
    def tau(self) -> torch.Tensor:
        return torch.exp(-self.log_inv_tau)


def stage1_forward(batch: Batch, model: MMSLT, head: AlignmentHead, use_align: bool = True,
                   use_dm: bool = True, dm_grad_to_visual: bool = True):
    """Forward pass of stage 1; returns (loss dict of tensors, pooled M, pooled L)."""
    needs_desc = (use_dm and model.desc_mode == "mapped") or model.desc_mode == "direct"
    if needs_desc and batch.descriptions is None:
        raise ValueError("stage 1 needs description features for every video in the batch")
    M, V, D_hat = model.encode_video(batch.frames, batch.frame_mask, batch.descriptions,
                                     dm_grad_to_visual)
    L = model.text_encode(batch.tokens, batch.token_mask)
    M_pool, L_pool = global_pool(M), global_pool(L)
    zero = M.values.new_zeros(())
    l_align = align_loss(M_pool, L_pool, head.tau) if use_align else zero
    l_dm = zero
    if use_dm and D_hat is not None:
        l_dm = dm_loss(D_hat.values, batch.descriptions.to(D_hat.values.dtype), batch.frame_mask)
    total = mmlp_loss(l_align, l_dm, head.lam)
    return {"loss_align": l_align, "loss_dm": l_dm, "loss_mmlp": total}, M_pool, L_pool


def pretrain_step(batch: Batch, model: MMSLT, head: AlignmentHead, optimizer: torch.optim.Optimizer,
                  lr: Optional[float] = None, use_align: bool = True, use_dm: bool = True,
                  dm_grad_to_visual: bool = True) -> dict[str, float]:
    """One optimisation step over the trainable parameters; returns float losses."""
    model.train()
    if lr is not None:
        for g in optimizer.param_groups:
            g["lr"] = lr
    losses, _, _ = stage1_forward(batch, model, head, use_align, use_dm, dm_grad_to_visual)
    optimizer.zero_grad(set_to_none=True)
    if losses["loss_mmlp"].requires_grad:
        losses["loss_mmlp"].backward()
        optimizer.step()
    return {k: float(v.detach()) for k, v in losses.items()}


# ---------------------------------------------------------------------------
# feature store

_MAGIC = b"MMFS1\n"


class StaleFeatureStore(RuntimeError):
    pass


class FeatureStore:
    """Per-video description features, T x C-bar float32 rows.

    Layout: magic, 8-byte little-endian header length, JSON header with
    ``meta`` and ``index`` (video id -> [row offset, rows]), then the rows.
    """

    def __init__(self, data: np.ndarray, index: dict[str, tuple[int, int]], meta: dict):
        self.data = data
        self.index = index
        self.meta = meta

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def __contains__(self, video_id: str) -> bool:
        return video_id in self.index

    def __len__(self) -> int:
        return len(self.index)

    def get(self, video_id: str) -> np.ndarray:
        try:
            off, n = self.index[video_id]
        except KeyError:
            raise KeyError(f"no description features for video {video_id!r}") from None
        return self.data[off:off + n]

    @staticmethod
    def write(path: str | Path, features: Mapping[str, np.ndarray], meta: dict) -> Path:
        path = Path(path)
        dims = {a.shape[1] for a in features.values()}
        if len(dims) > 1:
            raise ValueError(f"inconsistent feature widths {sorted(dims)}")
        index, off = {}, 0
        for vid, arr in features.items():
            index[vid] = [off, int(arr.shape[0])]
            off += int(arr.shape[0])
        header = json.dumps({"meta": meta, "dim": dims.pop() if dims else 0, "index": index}).encode()
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(path.suffix + ".tmp")
        with tmp.open("wb") as fh:
            fh.write(_MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for arr in features.values():
                fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        tmp.replace(path)
        return path

    @classmethod
    def open(cls, path: str | Path, expected_hash: Optional[str] = None) -> "FeatureStore":
        raw = Path(path).read_bytes()
        if not raw.startswith(_MAGIC):
            raise ValueError(f"{path}: not a feature store")
        (n,) = struct.unpack("<Q", raw[len(_MAGIC):len(_MAGIC) + 8])
        start = len(_MAGIC) + 8
        header = json.loads(raw[start:start + n])
        dim = header["dim"]
        data = np.frombuffer(raw, dtype="<f4", offset=start + n).reshape(-1, dim) if dim else np.zeros((0, 0), "f4")
        store = cls(data.astype(np.float32), {k: tuple(v) for k, v in header["index"].items()}, header["meta"])
        if expected_hash is not None and store.meta.get("config_hash") != expected_hash:
            raise StaleFeatureStore(f"{path}: built for a different description cache or encoder; rebuild it")
        return store


def feature_store_hash(cache_digest: str, desc_config: dict, prompt_id: int, model_id: str) -> str:
    blob = json.dumps({"cache": cache_digest, "encoder": desc_config, "prompt": prompt_id,
                       "model": model_id}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def build_features(description_sets, encoder) -> dict[str, np.ndarray]:
    """video id -> T x C-bar, one encoder pass per video."""
    return {vid: describe_encode(encoder, ds.texts()) for vid, ds in description_sets.items()}
