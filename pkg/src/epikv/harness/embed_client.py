"""Client for an external sentence-embedding service.

Wire protocol: ``POST <endpoint>`` with ``{"texts": [...]}``; the response is
``{"dim": d, "vectors": [[...], ...]}``. Vectors are normalized on our side
and cached per (endpoint, sha256(text)).
"""

from __future__ import annotations

import hashlib
import json
import logging
import socket
import time
import urllib.error
import urllib.request
from typing import Callable, Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_RETRIES = 3
_PROBE_TEXT = "dimension probe"


class EmbeddingError(RuntimeError):
    pass


class EmbeddingTransportError(EmbeddingError):
    pass


class EmbeddingDimensionError(EmbeddingError):
    pass


def embed_endpoint(url: str) -> str:
    """Accept either the service root or the full /embed URL."""
    url = url.rstrip("/")
    return url if url.endswith("/embed") else url + "/embed"


class ExternalEmbedder:
    def __init__(
        self,
        url: str,
        timeout: float = 10.0,
        retries: int = DEFAULT_RETRIES,
        backoff: float = 0.25,
        sleep: Callable[[float], None] = time.sleep,
    ):
        self.endpoint = embed_endpoint(url)
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self._sleep = sleep
        self._dim: Optional[int] = None
        self._cache: dict[tuple[str, str], np.ndarray] = {}
        self.requests_sent = 0

    @property
    def dim(self) -> int:
        if self._dim is None:
            self.embed_many([_PROBE_TEXT])
        return self._dim

    def _key(self, text: str) -> tuple[str, str]:
        return self.endpoint, hashlib.sha256(text.encode("utf-8")).hexdigest()

    def _post(self, texts: list[str]) -> dict:
        body = json.dumps({"texts": texts}).encode("utf-8")
        last: Optional[Exception] = None
        for attempt in range(self.retries + 1):
            if attempt:
                self._sleep(self.backoff * 2 ** (attempt - 1))
            request = urllib.request.Request(
                self.endpoint, data=body, headers={"Content-Type": "application/json; charset=utf-8"}, method="POST"
            )
            self.requests_sent += 1
            try:
                with urllib.request.urlopen(request, timeout=self.timeout) as resp:
                    return json.loads(resp.read().decode("utf-8"))
            except urllib.error.HTTPError as exc:
                if exc.code < 500:
                    raise EmbeddingError(f"embedding service rejected the request: HTTP {exc.code}") from exc
                last = exc
            except (urllib.error.URLError, ConnectionError, socket.timeout, TimeoutError) as exc:
                last = exc
            except json.JSONDecodeError as exc:
                raise EmbeddingError("embedding service returned invalid JSON") from exc
            log.warning("embedding request failed (attempt %d/%d): %s", attempt + 1, self.retries + 1, last)
        raise EmbeddingTransportError(f"embedding service unreachable after {self.retries + 1} attempts: {last}")

    def _fetch(self, texts: list[str]) -> list[np.ndarray]:
        payload = self._post(texts)
        try:
            dim = int(payload["dim"])
            vectors = payload["vectors"]
        except (KeyError, TypeError, ValueError) as exc:
            raise EmbeddingError("embedding response lacks 'dim' or 'vectors'") from exc
        if len(vectors) != len(texts):
            raise EmbeddingError(f"asked for {len(texts)} vectors, got {len(vectors)}")
        if self._dim is not None and dim != self._dim:
            raise EmbeddingDimensionError(f"service switched dimension from {self._dim} to {dim}")
        out = []
        for vec in vectors:
            arr = np.asarray(vec, dtype=np.float64)
            if arr.shape != (dim,):
                raise EmbeddingDimensionError(f"vector of shape {arr.shape} does not match dim={dim}")
            norm = float(np.linalg.norm(arr))
            if not np.isfinite(norm) or norm == 0.0:
                raise EmbeddingError("service returned a zero or non-finite vector")
            out.append(arr / norm)
        self._dim = dim
        return out

    def embed_many(self, texts: Sequence[str]) -> np.ndarray:
        texts = list(texts)
        missing = []
        for text in texts:
            key = self._key(text)
            if key not in self._cache and text not in missing:
                missing.append(text)
        if missing:
            for text, vec in zip(missing, self._fetch(missing)):
                self._cache[self._key(text)] = vec
        if not texts:
            return np.zeros((0, self._dim or 0))
        return np.array([self._cache[self._key(t)] for t in texts])

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]


def external_embed(texts: Sequence[str], endpoint: str, client: Optional[ExternalEmbedder] = None) -> list[np.ndarray]:
    """Embed ``texts`` through the service; an empty list sends no request."""
    client = client or ExternalEmbedder(endpoint)
    return list(client.embed_many(texts))
