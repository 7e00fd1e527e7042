import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from epikv.clustering import cluster_history
from epikv.harness.corpus import synth_corpus
from epikv.harness.embed_client import (
    EmbeddingDimensionError,
    EmbeddingError,
    EmbeddingTransportError,
    ExternalEmbedder,
    embed_endpoint,
    external_embed,
)


class FakeService:
    """Tiny /embed server; ``script`` holds the status codes to answer with, then 200s."""

    def __init__(self):
        self.requests: list[list[str]] = []
        self.script: list[int] = []
        self.dim = 3
        service = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args):
                pass

            def do_POST(self):
                body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
                service.requests.append(body["texts"])
                status = service.script.pop(0) if service.script else 200
                if status != 200:
                    self.send_response(status)
                    self.end_headers()
                    return
                vectors = [service.vector(t) for t in body["texts"]]
                data = json.dumps({"dim": service.dim, "vectors": vectors}).encode()
                self.send_response(200)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

        self.server = ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.url = f"http://127.0.0.1:{self.server.server_address[1]}"
        self.thread = threading.Thread(target=self.server.serve_forever, daemon=True)
        self.thread.start()

    def vector(self, text: str) -> list[float]:
        return [float(len(text)), 1.0, 2.0] + [0.5] * (self.dim - 3)

    def close(self):
        self.server.shutdown()
        self.server.server_close()


@pytest.fixture
def service():
    svc = FakeService()
    yield svc
    svc.close()


def client(service, sleeps=None):
    return ExternalEmbedder(service.url, timeout=5, sleep=(sleeps.append if sleeps is not None else lambda s: None))


def test_endpoint_normalisation():
    assert embed_endpoint("http://h:1/") == "http://h:1/embed"
    assert embed_endpoint("http://h:1/embed") == "http://h:1/embed"


def test_returns_normalised_payload(service):
    out = client(service).embed_many(["ab", "abcd"])
    for text, vec in zip(["ab", "abcd"], out):
        raw = np.array(service.vector(text))
        np.testing.assert_allclose(vec, raw / np.linalg.norm(raw))
    assert service.requests == [["ab", "abcd"]]


def test_empty_list_sends_nothing(service):
    assert external_embed([], service.url) == []
    assert service.requests == []


def test_cache_avoids_repeat_calls(service):
    c = client(service)
    first = c.embed_many(["x", "y", "x"])
    again = c.embed_many(["y", "x"])
    assert service.requests == [["x", "y"]]
    np.testing.assert_array_equal(first[1], again[0])


def test_retries_5xx_with_backoff(service):
    service.script = [503, 500]
    sleeps = []
    c = client(service, sleeps)
    c.embed("hello")
    assert c.requests_sent == 3 and sleeps == [0.25, 0.5]


def test_gives_up_after_retries(service):
    service.script = [500] * 4
    sleeps = []
    with pytest.raises(EmbeddingTransportError, match="after 4 attempts"):
        client(service, sleeps).embed("hello")
    assert len(service.requests) == 4 and sleeps == [0.25, 0.5, 1.0]


def test_4xx_is_not_retried(service):
    service.script = [400]
    with pytest.raises(EmbeddingError, match="HTTP 400"):
        client(service).embed("hello")
    assert len(service.requests) == 1


def test_unreachable_service():
    c = ExternalEmbedder("http://127.0.0.1:9", timeout=0.5, retries=1, sleep=lambda s: None)
    with pytest.raises(EmbeddingTransportError):
        c.embed("x")


def test_dimension_switch_is_an_error(service):
    c = client(service)
    assert c.dim == 3
    service.dim = 5
    with pytest.raises(EmbeddingDimensionError):
        c.embed("new text")


def test_embedder_drives_clustering(service):
    conv = synth_corpus(2, 6, 1, seed=0)
    got = cluster_history(conv.history, 2, client(service), seed=0)
    assert sorted(m for ep in got.episodes for m in ep.members) == list(range(1, len(got.segments) + 1))
