"""Datasets, manifests, vocabulary, batching and the synthetic glyph corpus."""

from __future__ import annotations

import hashlib
import json
import logging
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol, Sequence

import numpy as np
import torch
from PIL import Image

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<PAD>", "<BOS>", "<EOS>", "<UNK>"
SPECIALS = (PAD, BOS, EOS, UNK)
SPLITS = ("train", "dev", "test")


class ManifestError(ValueError):
    pass


class Tokenizer(Protocol):
    name: str

    def tokenize(self, text: str) -> list[str]: ...

    def detokenize(self, tokens: Sequence[str]) -> str: ...


class WhitespaceTokenizer:
    name = "whitespace"

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def detokenize(self, tokens: Sequence[str]) -> str:
        return " ".join(tokens)


class CharTokenizer:
    """Character-level tokens with whitespace dropped (CJK-style scoring)."""

    name = "char"

    def tokenize(self, text: str) -> list[str]:
        return [c for c in text if not c.isspace()]

    def detokenize(self, tokens: Sequence[str]) -> str:
        return "".join(tokens)


def get_tokenizer(name: str) -> Tokenizer:
    if name == "whitespace":
        return WhitespaceTokenizer()
    if name == "char":
        return CharTokenizer()
    raise ValueError(f"unknown tokenizer {name!r}")


class Vocabulary:
    """Token <-> id bijection with reserved ids 0..3 for PAD, BOS, EOS, UNK."""

    def __init__(self, tokens: Iterable[str] = (), tokenizer: Optional[Tokenizer] = None):
        self.tokenizer = tokenizer or WhitespaceTokenizer()
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self.stoi:
            self.stoi[token] = len(self.itos)
            self.itos.append(token)
        return self.stoi[token]

    @classmethod
    def build(cls, texts: Iterable[str], tokenizer: Optional[Tokenizer] = None) -> "Vocabulary":
        tokenizer = tokenizer or WhitespaceTokenizer()
        seen: dict[str, None] = {}
        for text in texts:
            for tok in tokenizer.tokenize(text):
                seen.setdefault(tok, None)
        return cls(sorted(seen), tokenizer)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 3

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def encode(self, text: str) -> list[int]:
        return [self.stoi.get(t, self.unk_id) for t in self.tokenizer.tokenize(text)]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> str:
        toks = []
        for i in ids:
            i = int(i)
            if i == self.eos_id and strip_special:
                break
            if strip_special and i < len(SPECIALS):
                continue
            toks.append(self.itos[i])
        return self.tokenizer.detokenize(toks)

    def to_dict(self) -> dict:
        return {"tokenizer": self.tokenizer.name, "itos": self.itos}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        if tuple(d["itos"][: len(SPECIALS)]) != SPECIALS:
            raise ValueError("vocabulary does not start with the reserved tokens")
        return cls(d["itos"][len(SPECIALS):], get_tokenizer(d.get("tokenizer", "whitespace")))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), ensure_ascii=False, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _load_image(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode in ("L", "1", "P", "I;16"):
            return np.asarray(im.convert("L"), dtype=np.uint8)
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


class SignVideo:
    """One signed utterance: an ordered frame sequence and its target sentence.

    Frames are either held in memory (synthetic data) or read lazily from
    image files on first access. Lazy loading is guarded by a lock so
    concurrent readers trigger at most one load.
    """

    def __init__(
        self,
        id: str,
        text: str,
        split: str = "train",
        frames: Optional[np.ndarray] = None,
        frame_paths: Optional[Sequence[Path]] = None,
    ):
        if frames is None and not frame_paths:
            raise ValueError(f"video {id!r} has no frames")
        if split not in SPLITS:
            raise ValueError(f"video {id!r}: split must be one of {SPLITS}, got {split!r}")
        self.id = id
        self.text = text
        self.split = split
        self.frame_paths = [Path(p) for p in frame_paths] if frame_paths else None
        self._frames = None if frames is None else self._validate(np.asarray(frames, dtype=np.uint8))
        self._lock = threading.Lock()

    def _validate(self, frames: np.ndarray) -> np.ndarray:
        if frames.ndim not in (3, 4) or frames.shape[0] < 1:
            raise ValueError(f"video {self.id!r}: frames must be T x H x W[x 3] with T >= 1")
        frames.setflags(write=False)
        return frames

    @property
    def num_frames(self) -> int:
        if self._frames is not None:
            return int(self._frames.shape[0])
        return len(self.frame_paths)

    @property
    def frames(self) -> np.ndarray:
        if self._frames is None:
            with self._lock:
                if self._frames is None:
                    imgs = []
                    for p in self.frame_paths:
                        if not p.exists():
                            raise FileNotFoundError(f"video {self.id!r}: missing frame file {p}")
                        imgs.append(_load_image(p))
                    shapes = {im.shape for im in imgs}
                    if len(shapes) != 1:
                        raise ValueError(f"video {self.id!r}: frames differ in size {sorted(shapes)}")
                    self._frames = self._validate(np.stack(imgs))
        return self._frames

    def __repr__(self) -> str:
        return f"SignVideo(id={self.id!r}, T={self.num_frames}, split={self.split!r}, text={self.text!r})"


@dataclass
class Dataset:
    items: list[SignVideo]
    vocab: Vocabulary
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ids = [v.id for v in self.items]
        if len(set(ids)) != len(ids):
            dup = next(i for i in ids if ids.count(i) > 1)
            raise ManifestError(f"duplicate video id {dup!r}")
        self._by_id = {v.id: v for v in self.items}

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    def __getitem__(self, video_id: str) -> SignVideo:
        return self._by_id[video_id]

    def split(self, name: str) -> list[SignVideo]:
        return [v for v in self.items if v.split == name]

    def digest(self) -> str:
        """Content hash over ids, texts, splits and frame bytes."""
        h = hashlib.sha256()
        for v in self.items:
            h.update(json.dumps([v.id, v.text, v.split]).encode())
            f = v.frames
            h.update(str(f.shape).encode())
            h.update(f.tobytes())
        h.update(json.dumps(self.vocab.itos).encode())
        return h.hexdigest()


_REQUIRED = ("id", "frames", "text", "split")


def load_manifest(path: str | Path, vocab: Optional[Vocabulary] = None,
                  tokenizer: Optional[Tokenizer] = None) -> Dataset:
    """Read a JSON Lines manifest.

    Frame paths are resolved relative to the manifest's directory and loaded
    on first access. When no vocabulary is given one is built from the train
    split. A ``toy_meta.json`` beside the manifest is attached as ``meta``.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    root = path.parent
    items = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({e.msg})") from None
            if not isinstance(rec, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in _REQUIRED if k not in rec]
            if missing:
                raise ManifestError(f"{path}:{lineno}: missing field(s) {', '.join(missing)}")
            if not isinstance(rec["frames"], list) or not rec["frames"]:
                raise ManifestError(f"{path}:{lineno}: 'frames' must be a non-empty list")
            if not isinstance(rec["text"], str) or not rec["text"].strip():
                raise ManifestError(f"{path}:{lineno}: 'text' must be a non-empty string")
            try:
                items.append(SignVideo(str(rec["id"]), rec["text"], rec["split"],
                                       frame_paths=[root / p for p in rec["frames"]]))
            except ValueError as e:
                raise ManifestError(f"{path}:{lineno}: {e}") from None
    if vocab is None:
        vocab = Vocabulary.build((v.text for v in items if v.split == "train"), tokenizer)
    meta_path = root / "toy_meta.json"
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    try:
        return Dataset(items, vocab, meta)
    except ManifestError as e:
        raise ManifestError(f"{path}: {e}") from None


def write_manifest(dataset: Dataset, out_dir: str | Path, name: str = "manifest.jsonl") -> Path:
    """Write frames as 8-bit PNG files plus a manifest referencing them."""
    out_dir = Path(out_dir)
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    lines = []
    for v in dataset.items:
        rel = []
        vdir = out_dir / "frames" / v.id
        vdir.mkdir(parents=True, exist_ok=True)
        for t, frame in enumerate(v.frames):
            p = vdir / f"{t:04d}.png"
            Image.fromarray(frame).save(p, optimize=False)
            rel.append(str(p.relative_to(out_dir)))
        lines.append(json.dumps({"id": v.id, "frames": rel, "text": v.text, "split": v.split},
                                ensure_ascii=False))
    manifest = out_dir / name
    manifest.write_text("".join(l + "\n" for l in lines))
    if dataset.meta:
        (out_dir / "toy_meta.json").write_text(json.dumps(dataset.meta, indent=1))
    return manifest


# ---------------------------------------------------------------------------
# synthetic glyph corpus

GLYPH_GRID = 8
_CONS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def toy_words(n: int) -> list[str]:
    words = []
    for i in range(n):
        c1 = _CONS[i % len(_CONS)]
        v = _VOWELS[(i // len(_CONS)) % len(_VOWELS)]
        c2 = _CONS[(i // (len(_CONS) * len(_VOWELS))) % len(_CONS)]
        words.append(c1 + v + c2)
    return words


def glyph_templates(n: int, seed: int, grid: int = GLYPH_GRID) -> np.ndarray:
    """Distinct binary grid patterns, one per word; pairwise Hamming distance >= grid."""
    rng = np.random.default_rng([seed, 0x61797068])
    out: list[np.ndarray] = []
    while len(out) < n:
        cand = rng.random((grid, grid)) < 0.5
        if all(np.sum(cand != o) >= grid for o in out):
            out.append(cand)
    return np.stack(out)


GLYPH_ON = 220.0
GLYPH_OFF = 30.0


def render_glyph(template: np.ndarray, image_size: int, rng: np.random.Generator,
                 max_shift: int = 1, noise: float = 12.0, background: float = GLYPH_OFF) -> np.ndarray:
    cell = image_size // template.shape[0]
    img = np.kron(template.astype(np.float64), np.ones((cell, cell)))
    canvas = np.zeros((image_size, image_size))
    off = (image_size - img.shape[0]) // 2
    canvas[off:off + img.shape[0], off:off + img.shape[1]] = img
    canvas = background + (GLYPH_ON - background) * canvas
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    canvas = np.roll(canvas, (int(dy), int(dx)), axis=(0, 1))
    canvas += rng.normal(0.0, noise, canvas.shape)
    return np.clip(np.rint(canvas), 0, 255).astype(np.uint8)


def make_toy_dataset(n_videos: int, vocab_size: int, max_len: int, seed: int,
                     image_size: int = 32) -> Dataset:
    """Synthetic corpus: each target word is signed as one rendered glyph frame.

    ``vocab_size`` counts word types (reserved tokens excluded). Sentences
    are unique, 80/10/10 split, and everything is a pure function of the
    arguments.
    """
    if vocab_size < 4:
        raise ValueError(f"vocab_size must be >= 4, got {vocab_size}")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    if n_videos < 0:
        raise ValueError("n_videos must be >= 0")
    if image_size % GLYPH_GRID:
        raise ValueError(f"image_size must be a multiple of {GLYPH_GRID}")
    min_len = max(1, (max_len + 1) // 2)
    capacity = sum(vocab_size ** L for L in range(min_len, max_len + 1))
    if n_videos > capacity:
        raise ValueError(f"cannot draw {n_videos} distinct sentences (capacity {capacity})")

    rng = np.random.default_rng(seed)
    words = toy_words(vocab_size)
    templates = glyph_templates(vocab_size, seed)
    seen: set[tuple[int, ...]] = set()
    sentences = []
    while len(sentences) < n_videos:
        L = int(rng.integers(min_len, max_len + 1))
        s = tuple(int(w) for w in rng.integers(0, vocab_size, size=L))
        if s not in seen:
            seen.add(s)
            sentences.append(s)

    order = rng.permutation(n_videos)
    n_train = int(round(0.8 * n_videos))
    n_dev = int(round(0.1 * n_videos))
    split_of = {}
    for rank, idx in enumerate(order):
        split_of[int(idx)] = "train" if rank < n_train else ("dev" if rank < n_train + n_dev else "test")

    items = []
    for i, s in enumerate(sentences):
        frames = np.stack([render_glyph(templates[w], image_size, rng) for w in s])
        items.append(SignVideo(f"toy{i:05d}", " ".join(words[w] for w in s), split_of[i], frames=frames))
    vocab = Vocabulary(words)
    meta = {"toy": {"n_videos": n_videos, "vocab_size": vocab_size, "max_len": max_len,
                    "seed": seed, "image_size": image_size}}
    return Dataset(items, vocab, meta)


# ---------------------------------------------------------------------------
# batching

@dataclass
class Batch:
    ids: list[str]
    frames: torch.Tensor        # B x T_max x C x H x W, float in [0, 1]
    frame_mask: torch.Tensor    # B x T_max bool
    tokens: torch.Tensor        # B x L_max long, PAD-filled
    token_mask: torch.Tensor    # B x L_max bool
    descriptions: Optional[torch.Tensor] = None   # B x T_max x C_bar
    n_unknown: int = 0

    def __len__(self) -> int:
        return len(self.ids)


def frames_to_tensor(frames: np.ndarray) -> torch.Tensor:
    """T x H x W [x 3] uint8 -> T x C x H x W float in [0, 1]."""
    t = torch.as_tensor(np.array(frames, copy=True)).float().div_(255.0)
    if t.ndim == 3:
        return t.unsqueeze(1)
    return t.permute(0, 3, 1, 2).contiguous()


def collate(items: Sequence[SignVideo], vocab: Vocabulary,
            frame_fn: Optional[Callable[[SignVideo], torch.Tensor]] = None,
            descriptions: Optional[Sequence[np.ndarray]] = None) -> Batch:
    """Pad frames and tokens of a list of videos into one batch.

    ``frame_fn`` maps a video to its preprocessed T x C x H x W tensor
    (defaults to plain conversion). Out-of-vocabulary words become <UNK>
    and are counted.
    """
    if not items:
        raise ValueError("collate needs at least one item")
    frame_fn = frame_fn or (lambda v: frames_to_tensor(v.frames))
    clips = [frame_fn(v) for v in items]
    shapes = {c.shape[1:] for c in clips}
    if len(shapes) != 1:
        raise ValueError(f"frames differ in shape across the batch: {sorted(shapes)}")
    B, T_max = len(items), max(c.shape[0] for c in clips)
    frames = clips[0].new_zeros((B, T_max) + tuple(clips[0].shape[1:]))
    frame_mask = torch.zeros(B, T_max, dtype=torch.bool)
    for b, c in enumerate(clips):
        frames[b, : c.shape[0]] = c
        frame_mask[b, : c.shape[0]] = True

    seqs = [vocab.encode(v.text) for v in items]
    n_unk = sum(s.count(vocab.unk_id) for s in seqs)
    if n_unk:
        logger.warning("collate: %d token(s) mapped to %s", n_unk, UNK)
    L_max = max(1, max(len(s) for s in seqs))
    tokens = torch.full((B, L_max), vocab.pad_id, dtype=torch.long)
    token_mask = torch.zeros(B, L_max, dtype=torch.bool)
    for b, s in enumerate(seqs):
        tokens[b, : len(s)] = torch.tensor(s, dtype=torch.long)
        token_mask[b, : len(s)] = True

    desc = None
    if descriptions is not None:
        if len(descriptions) != B:
            raise ValueError("one description array per item is required")
        width = descriptions[0].shape[1]
        desc = torch.zeros(B, T_max, width)
        for b, (d, c) in enumerate(zip(descriptions, clips)):
            if d.shape[0] != c.shape[0]:
                raise ValueError(f"{items[b].id}: {d.shape[0]} description rows for {c.shape[0]} frames")
            desc[b, : d.shape[0]] = torch.from_numpy(np.asarray(d, dtype=np.float32))
    return Batch([v.id for v in items], frames, frame_mask, tokens, token_mask, desc, n_unk)


def uncollate(batch: Batch) -> list[tuple[int, list[int]]]:
    """Per-item (frame count, token ids) recovered from the masks."""
    out = []
    for b in range(len(batch)):
        n = int(batch.frame_mask[b].sum())
        toks = batch.tokens[b][batch.token_mask[b]].tolist()
        out.append((n, toks))
    return out
