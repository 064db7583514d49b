"""Per-frame sign descriptions from an image MLLM, with a resumable cache.

Every frame is sent as an independent single-image request; frames are
dispatched in groups of ``batch_size`` concurrent requests. Results are
appended to a JSON Lines cache keyed by (video, frame, prompt, model) and
guarded by a content digest of the frame, so reruns only request what is
missing or changed.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
from PIL import Image

from .data import GLYPH_GRID, Dataset, SignVideo, glyph_templates

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PromptTemplate:
    id: int
    text: str
    group: str


# simple (1, 2), detailed (3, 4), in-context (5, 6)
PROMPTS: dict[int, PromptTemplate] = {p.id: p for p in (
    PromptTemplate(1, "Describe this image.", "simple"),
    PromptTemplate(2, "What is the person in this image doing?", "simple"),
    PromptTemplate(3, (
        "This image is a single frame of a person communicating in sign language. "
        "Describe the sign language components only: the shape of each hand, the "
        "position and orientation of the hands, the configuration of the fingers, "
        "the direction of the signer's gaze, the facial expression and the shape of "
        "the mouth. Do not describe clothing, background or anything unrelated to "
        "the signing."), "detailed"),
    PromptTemplate(4, (
        "Describe this image in detail, including the person's appearance, posture, "
        "facial expression and the movement of their hands."), "detailed"),
    PromptTemplate(5, (
        "You are an expert in sign language. An example description of a sign "
        "language frame is: 'The right hand is raised to chest height with the index "
        "finger extended upward, the left hand rests near the waist, the eyebrows are "
        "raised and the mouth is slightly open.' In the same manner, describe the "
        "hands, face and mouth of the signer in this image."), "in-context"),
    PromptTemplate(6, (
        "Example: 'Both hands form loose fists in front of the chest while the signer "
        "looks straight ahead.' Describe the sign shown in this image the same way."),
        "in-context"),
)}
DEFAULT_PROMPT_ID = 3


def render_prompt(prompt_id: int) -> str:
    try:
        return PROMPTS[int(prompt_id)].text
    except (KeyError, TypeError, ValueError):
        raise ValueError(f"unknown prompt id {prompt_id!r}; expected one of {sorted(PROMPTS)}") from None


def frame_digest(frame: np.ndarray) -> str:
    h = hashlib.sha256()
    h.update(str(frame.shape).encode())
    h.update(np.ascontiguousarray(frame).tobytes())
    return h.hexdigest()


def preprocess_frame_for_mllm(frame: np.ndarray, target_side: int = 256) -> np.ndarray:
    """Resize to a target_side square (aspect ratio is not preserved)."""
    frame = np.asarray(frame)
    if frame.size == 0:
        raise ValueError("empty frame")
    if frame.shape[0] == target_side and frame.shape[1] == target_side:
        return frame
    im = Image.fromarray(frame.astype(np.uint8))
    return np.asarray(im.resize((target_side, target_side), Image.BILINEAR))


def encode_png(frame: np.ndarray) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(frame).save(buf, format="PNG")
    return buf.getvalue()


def truncate_tokens(text: str, max_tokens: int) -> str:
    toks = text.split()
    if len(toks) <= max_tokens:
        return text.strip()
    return " ".join(toks[:max_tokens])


# ---------------------------------------------------------------------------
# clients

@dataclass(frozen=True)
class DescribeRequest:
    image_png: bytes
    prompt: str
    prompt_id: int
    frame_digest: str
    max_tokens: int


class TransportError(RuntimeError):
    pass


class GenerationError(RuntimeError):
    def __init__(self, video_id: str, frame_index: int, reason: str):
        super().__init__(f"video {video_id!r} frame {frame_index}: {reason}")
        self.video_id = video_id
        self.frame_index = frame_index


class MLLMClient:
    """Base client. Subclasses implement :meth:`describe` for one frame."""

    model_id = "unknown"

    def __init__(self):
        self.calls = 0
        self.batches = 0
        self._count_lock = threading.Lock()

    def describe(self, request: DescribeRequest) -> str:
        raise NotImplementedError

    def _call(self, request: DescribeRequest) -> str:
        with self._count_lock:
            self.calls += 1
        return self.describe(request)

    def describe_batch(self, requests: list[DescribeRequest], attempts: int = 3,
                       backoff: float = 0.5) -> list[object]:
        """Issue requests concurrently; each slot holds a text or the final exception."""
        with self._count_lock:
            self.batches += 1

        def one(req):
            for attempt in range(attempts):
                try:
                    return self._call(req)
                except TransportError as e:
                    if attempt == attempts - 1:
                        return e
                    time.sleep(backoff * (2 ** attempt))
                except Exception as e:  # noqa: BLE001 - surfaced per frame
                    return e

        if len(requests) == 1:
            return [one(requests[0])]
        with ThreadPoolExecutor(max_workers=len(requests)) as pool:
            return list(pool.map(one, requests))


class MockClient(MLLMClient):
    """Deterministic client: text = fn(frame_digest, prompt_id)."""

    def __init__(self, fn: Optional[Callable[[str, int], str]] = None, model_id: str = "mock"):
        super().__init__()
        self.fn = fn or (lambda digest, pid: f"frame {digest[:12]} described with prompt {pid}")
        self.model_id = model_id

    def describe(self, request: DescribeRequest) -> str:
        return self.fn(request.frame_digest, request.prompt_id)


_HAND_SHAPES = ["flat open palm", "closed fist", "extended index finger", "pinched thumb and index",
                "curved C shape", "V shape with two fingers", "hooked fingers", "raised thumb"]
_LOCATIONS = ["at chest height", "beside the cheek", "in front of the forehead", "at waist level",
              "near the chin"]
_FACES = ["the eyebrows are raised", "the gaze is directed forward", "the mouth is slightly open",
          "the lips are pressed together"]


def toy_description(glyph_id: int) -> str:
    shape = _HAND_SHAPES[glyph_id % len(_HAND_SHAPES)]
    loc = _LOCATIONS[(glyph_id // len(_HAND_SHAPES)) % len(_LOCATIONS)]
    face = _FACES[(glyph_id * 3 + glyph_id // 40) % len(_FACES)]
    return f"Right hand: {shape} {loc}; {face}."


class GlyphMockClient(MLLMClient):
    """Mock MLLM for the synthetic corpus.

    Recognises which glyph a frame shows by shift-tolerant template matching
    and answers with a fixed description of that glyph, so descriptions carry
    real information about the sign.
    """

    model_id = "mock-glyph"

    def __init__(self, vocab_size: int, seed: int, image_size: int, max_shift: int = 3):
        super().__init__()
        self.image_size = image_size
        cell = image_size // GLYPH_GRID
        clean = []
        for t in glyph_templates(vocab_size, seed):
            img = 30.0 + 190.0 * np.kron(t.astype(np.float64), np.ones((cell, cell)))
            clean.append(img)
        clean = np.stack(clean)
        shifts = [(dy, dx) for dy in range(-max_shift, max_shift + 1)
                  for dx in range(-max_shift, max_shift + 1)]
        self._bank = np.stack([np.roll(clean, s, axis=(1, 2)) for s in shifts], axis=1)

    @classmethod
    def from_dataset(cls, dataset: Dataset) -> "GlyphMockClient":
        toy = dataset.meta.get("toy")
        if not toy:
            raise ValueError("dataset carries no toy metadata; the glyph mock only serves toy corpora")
        return cls(toy["vocab_size"], toy["seed"], toy["image_size"])

    def classify(self, frame: np.ndarray) -> int:
        im = Image.fromarray(frame).convert("L")
        if im.size != (self.image_size, self.image_size):
            im = im.resize((self.image_size, self.image_size), Image.BOX)
        x = np.asarray(im, dtype=np.float64)
        err = ((self._bank - x) ** 2).sum(axis=(2, 3)).min(axis=1)
        return int(np.argmin(err))

    def describe(self, request: DescribeRequest) -> str:
        with Image.open(io.BytesIO(request.image_png)) as im:
            frame = np.asarray(im.convert("L"))
        return toy_description(self.classify(frame))


class HTTPClient(MLLMClient):
    """OpenAI-style chat-completions endpoint, one image + prompt per message.

    Decoding is fixed to temperature 0 and recorded in ``model_id``.
    """

    def __init__(self, url: Optional[str] = None, model: Optional[str] = None,
                 api_key: Optional[str] = None, timeout: float = 120.0):
        super().__init__()
        import requests

        self._requests = requests
        self.url = url or os.environ.get("MMSLT_MLLM_URL", "http://localhost:8000/v1/chat/completions")
        self.model = model or os.environ.get("MMSLT_MLLM_MODEL", "llava-onevision-qwen2-7b-ov")
        self.api_key = api_key if api_key is not None else os.environ.get("MMSLT_MLLM_API_KEY", "")
        self.timeout = timeout
        self.model_id = f"{self.model}|temperature=0"

    def payload(self, request: DescribeRequest) -> dict:
        b64 = base64.b64encode(request.image_png).decode("ascii")
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": [
                {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{b64}"}},
                {"type": "text", "text": request.prompt},
            ]}],
            "max_tokens": request.max_tokens,
            "temperature": 0,
        }

    def describe(self, request: DescribeRequest) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        try:
            r = self._requests.post(self.url, json=self.payload(request), headers=headers,
                                    timeout=self.timeout)
        except self._requests.RequestException as e:
            raise TransportError(str(e)) from e
        if r.status_code >= 500 or r.status_code == 429:
            raise TransportError(f"HTTP {r.status_code}")
        if r.status_code >= 400:
            raise RuntimeError(f"HTTP {r.status_code}: {r.text[:200]}")
        try:
            return r.json()["choices"][0]["message"]["content"] or ""
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise RuntimeError(f"malformed response: {e}") from e


# ---------------------------------------------------------------------------
# cache

@dataclass(frozen=True)
class CacheEntry:
    video_id: str
    frame_index: int
    prompt_id: int
    model_id: str
    frame_digest: str
    text: str

    @property
    def key(self) -> tuple:
        return (self.video_id, self.frame_index, self.prompt_id, self.model_id)


class DescriptionCache:
    """Append-only JSON Lines store; later lines win for duplicate keys."""

    def __init__(self, path: Optional[str | Path] = None):
        self.path = Path(path) if path else None
        self._entries: dict[tuple, CacheEntry] = {}
        self._lock = threading.Lock()
        if self.path and self.path.exists():
            with self.path.open() as fh:
                for lineno, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        e = CacheEntry(**json.loads(line))
                    except (json.JSONDecodeError, TypeError) as err:
                        # a torn final line from an interrupted writer is dropped
                        logger.warning("%s:%d: skipping unreadable cache line (%s)", self.path, lineno, err)
                        continue
                    self._entries[e.key] = e

    def __len__(self) -> int:
        return len(self._entries)

    def lookup(self, key: tuple, digest: str) -> Optional[str]:
        e = self._entries.get(key)
        if e is not None and e.frame_digest == digest:
            return e.text
        return None

    def append(self, entries: Iterable[CacheEntry]) -> None:
        entries = list(entries)
        with self._lock:
            if self.path:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open("a") as fh:
                    for e in entries:
                        fh.write(json.dumps(e.__dict__, ensure_ascii=False) + "\n")
                    fh.flush()
            for e in entries:
                self._entries[e.key] = e

    def as_map(self) -> dict[tuple, str]:
        return {k: e.text for k, e in self._entries.items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self._entries):
            e = self._entries[k]
            h.update(json.dumps([list(k), e.frame_digest, e.text]).encode())
        return h.hexdigest()


@dataclass
class SLDescriptionSet:
    video_id: str
    entries: dict[int, str]
    prompt_id: int
    model_id: str

    def texts(self) -> list[str]:
        return [self.entries[t] for t in range(len(self.entries))]


def generate_descriptions(video: SignVideo, prompt_id: int, client: MLLMClient,
                          cache: DescriptionCache, batch_size: int = 8, max_tokens: int = 256,
                          target_side: int = 256, attempts: int = 3,
                          backoff: float = 0.5) -> SLDescriptionSet:
    """Describe every frame of ``video``, requesting only uncached frames.

    Each group's successful results are written to the cache before any
    error is raised, so an interrupted run resumes where it stopped.
    """
    prompt = render_prompt(prompt_id)
    frames = video.frames
    entries: dict[int, str] = {}
    todo = []
    for t, frame in enumerate(frames):
        digest = frame_digest(frame)
        hit = cache.lookup((video.id, t, prompt_id, client.model_id), digest)
        if hit is not None:
            entries[t] = hit
        else:
            todo.append((t, digest))

    for start in range(0, len(todo), batch_size):
        group = todo[start:start + batch_size]
        reqs = [DescribeRequest(encode_png(preprocess_frame_for_mllm(frames[t], target_side)),
                                prompt, prompt_id, digest, max_tokens) for t, digest in group]
        results = client.describe_batch(reqs, attempts=attempts, backoff=backoff)
        fresh, failure = [], None
        for (t, digest), res in zip(group, results):
            if isinstance(res, Exception):
                failure = failure or GenerationError(video.id, t, f"request failed: {res}")
                continue
            text = truncate_tokens(str(res), max_tokens)
            if not text:
                failure = failure or GenerationError(video.id, t, "empty model response")
                continue
            fresh.append(CacheEntry(video.id, t, prompt_id, client.model_id, digest, text))
            entries[t] = text
        cache.append(fresh)
        if failure is not None:
            raise failure
    return SLDescriptionSet(video.id, dict(sorted(entries.items())), prompt_id, client.model_id)


def generate_corpus(videos: Iterable[SignVideo], prompt_id: int, client: MLLMClient,
                    cache: DescriptionCache, **kwargs) -> dict[str, SLDescriptionSet]:
    out = {}
    videos = list(videos)
    for i, v in enumerate(videos, start=1):
        out[v.id] = generate_descriptions(v, prompt_id, client, cache, **kwargs)
        if i % 50 == 0 or i == len(videos):
            logger.info("descriptions: %d/%d videos (%d client calls)", i, len(videos), client.calls)
    return out


def descriptions_from_cache(video: SignVideo, prompt_id: int, model_id: str,
                            cache: DescriptionCache) -> SLDescriptionSet:
    entries = {}
    for t, frame in enumerate(video.frames):
        text = cache.lookup((video.id, t, prompt_id, model_id), frame_digest(frame))
        if text is None:
            raise KeyError(f"no cached description for video {video.id!r} frame {t}")
        entries[t] = text
    return SLDescriptionSet(video.id, entries, prompt_id, model_id)
