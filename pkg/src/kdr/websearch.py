"""Search backends for the text generation cycle.

The default is an offline fixture backend reading a directory of JSON
documents, so the whole engine runs without a network. A live HTTP backend
sits behind the same contract.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .errors import EmptyCorpus, SchemaViolation, SearchBackendUnavailable
from .textindex import InvertedIndex

log = logging.getLogger(__name__)


@dataclass
class SearchHit:
    title: str
    url: str
    body: str
    score: float = 0.0


class SearchBackend:
    def search(self, query: str, limit: int = 5) -> list[SearchHit]:
        raise NotImplementedError


class FixtureSearchBackend(SearchBackend):
    """Ranked full-text search over a local directory of JSON documents.

    Each ``*.json`` file holds one record: {"title", "url", "body"}.
    """

    def __init__(self, corpus_dir: str):
        self.corpus_dir = corpus_dir
        self.documents: dict[str, SearchHit] = {}
        self._index = InvertedIndex()
        root = Path(corpus_dir)
        if not root.is_dir():
            raise SearchBackendUnavailable(f"{corpus_dir!r} is not a directory")
        for path in sorted(root.glob("*.json")):
            try:
                record = json.loads(path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise SchemaViolation(f"{path.name}: {exc}") from exc
            missing = {"title", "url", "body"} - set(record)
            if missing:
                raise SchemaViolation(f"{path.name}: missing keys {sorted(missing)}")
            doc_id = path.stem
            self.documents[doc_id] = SearchHit(record["title"], record["url"], record["body"])
            self._index.add(doc_id, f"{record['title']} {record['body']}")

    def search(self, query: str, limit: int = 5) -> list[SearchHit]:
        if not self.documents:
            raise EmptyCorpus(f"no documents under {self.corpus_dir!r}")
        hits = []
        for doc_id, score in self._index.search(query, limit=limit):
            hit = self.documents[doc_id]
            hits.append(SearchHit(hit.title, hit.url, hit.body, score))
        return hits


class HttpSearchBackend(SearchBackend):
    """POSTs {"query", "limit"}, expects {"results": [{title, url, body, score?}]}."""

    def __init__(self, endpoint: str, post=None):
        if not endpoint:
            raise SearchBackendUnavailable("no search endpoint configured")
        self.endpoint = endpoint
        self._post = post

    def _do_post(self, payload: dict) -> dict:
        if self._post is not None:
            return self._post(self.endpoint, payload)
        import requests

        response = requests.post(self.endpoint, json=payload, timeout=60)
        response.raise_for_status()
        return response.json()

    def search(self, query: str, limit: int = 5) -> list[SearchHit]:
        try:
            body = self._do_post({"query": query, "limit": limit})
            return [
                SearchHit(r["title"], r["url"], r.get("body", ""), float(r.get("score", 0.0)))
                for r in body["results"]
            ]
        except Exception as exc:  # noqa: BLE001 - transport and shape errors alike
            raise SearchBackendUnavailable(f"search endpoint failed: {exc}") from exc
