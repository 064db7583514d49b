import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import numpy as np
import pytest

from mmslt.data import SignVideo
from mmslt.gsd import (DescribeRequest, DescriptionCache, GenerationError, GlyphMockClient, HTTPClient,
                       MockClient, TransportError, generate_corpus, generate_descriptions,
                       preprocess_frame_for_mllm, render_prompt, toy_description, truncate_tokens)


class FlakyClient(MockClient):
    """Mock that fails permanently once ``budget`` calls were served."""

    def __init__(self, budget):
        super().__init__()
        self.budget = budget

    def describe(self, request):
        if self.calls > self.budget:
            raise RuntimeError("server went away")
        return super().describe(request)


def _videos(n=6, T=5, seed=0):
    rng = np.random.default_rng(seed)
    return [SignVideo(f"v{i}", "a", frames=rng.integers(0, 255, (T, 16, 16), dtype=np.uint8)) for i in range(n)]


def test_prompts():
    assert "hand" in render_prompt(3).lower()
    with pytest.raises(ValueError):
        render_prompt(99)


def test_truncate_tokens():
    assert truncate_tokens("a b c d", 2) == "a b"
    assert truncate_tokens("  a  ", 5) == "a"


def test_preprocess_resizes_to_square():
    out = preprocess_frame_for_mllm(np.full((10, 20), 200, np.uint8), 32)
    assert out.shape[:2] == (32, 32)


def test_cache_hit_skips_client(tmp_path):
    vids = _videos()
    cache = DescriptionCache(tmp_path / "c.jsonl")
    c1 = MockClient()
    generate_corpus(vids, 3, c1, cache, batch_size=4)
    assert c1.calls == 30
    c2 = MockClient()
    again = generate_corpus(vids, 3, c2, DescriptionCache(tmp_path / "c.jsonl"), batch_size=4)
    assert c2.calls == 0
    assert again["v0"].texts() == generate_corpus(vids[:1], 3, MockClient(), DescriptionCache())["v0"].texts()


def test_interrupt_and_resume(tmp_path):
    vids = _videos()
    ref = DescriptionCache()
    generate_corpus(vids, 3, MockClient(), ref, batch_size=4)

    cache = DescriptionCache(tmp_path / "c.jsonl")
    with pytest.raises(GenerationError):
        generate_corpus(vids, 3, FlakyClient(budget=13), cache, batch_size=4)
    partial = len(DescriptionCache(tmp_path / "c.jsonl"))
    assert 0 < partial < 30
    resumed = MockClient()
    generate_corpus(vids, 3, resumed, DescriptionCache(tmp_path / "c.jsonl"), batch_size=4)
    assert resumed.calls == 30 - partial
    assert DescriptionCache(tmp_path / "c.jsonl").as_map() == ref.as_map()


def test_torn_line_is_dropped(tmp_path):
    p = tmp_path / "c.jsonl"
    generate_descriptions(_videos(1)[0], 3, MockClient(), DescriptionCache(p))
    with p.open("a") as fh:
        fh.write('{"video_id": "v0", "frame_')
    assert len(DescriptionCache(p)) == 5


def test_changed_frame_invalidates_entry(tmp_path):
    v = _videos(1)[0]
    cache = DescriptionCache()
    generate_descriptions(v, 3, MockClient(), cache)
    frames = v.frames.copy()
    frames[2] ^= 1
    c = MockClient()
    generate_descriptions(SignVideo("v0", "a", frames=frames), 3, c, cache)
    assert c.calls == 1


def test_transport_errors_retry():
    class Flaky(MockClient):
        def describe(self, request):
            if self.calls < 3:
                raise TransportError("503")
            return "ok"

    c = Flaky()
    res = c.describe_batch([DescribeRequest(b"", "p", 3, "d", 8)], attempts=3, backoff=0.0)
    assert res == ["ok"] and c.calls == 3


def test_glyph_mock_reads_glyphs(small_ds):
    from mmslt.data import toy_words

    client = GlyphMockClient.from_dataset(small_ds)
    words = toy_words(8)
    sets = generate_corpus(small_ds.items, 3, client, DescriptionCache())
    for v in small_ds:
        assert sets[v.id].texts() == [toy_description(words.index(w)) for w in v.text.split()]
    assert len({toy_description(i) for i in range(40)}) == 40


class _Stub(BaseHTTPRequestHandler):
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        _Stub.seen.append((body, self.headers.get("Authorization")))
        if len(_Stub.seen) == 1:
            self.send_response(503)
            self.end_headers()
            return
        out = json.dumps({"choices": [{"message": {"content": "a raised flat hand"}}]}).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(out)))
        self.end_headers()
        self.wfile.write(out)

    def log_message(self, *a):
        pass


def test_http_client_against_stub():
    srv = HTTPServer(("127.0.0.1", 0), _Stub)
    t = threading.Thread(target=srv.serve_forever, daemon=True)
    t.start()
    try:
        client = HTTPClient(f"http://127.0.0.1:{srv.server_port}/v1/chat/completions", "stub-model",
                            api_key="k", timeout=5)
        v = _videos(1, T=1)[0]
        ds = generate_descriptions(v, 3, client, DescriptionCache(), attempts=2, backoff=0.0)
    finally:
        srv.shutdown()
    assert ds.texts() == ["a raised flat hand"]
    body, auth = _Stub.seen[-1]
    assert auth == "Bearer k"
    assert body["temperature"] == 0 and body["model"] == "stub-model"
    content = body["messages"][0]["content"]
    assert content[0]["image_url"]["url"].startswith("data:image/png;base64,")
    assert content[1]["text"] == render_prompt(3)
    assert client.model_id == "stub-model|temperature=0"
