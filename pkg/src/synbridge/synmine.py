"""Training-free description mining: two chained prompts per category, sent to
a text-generation provider, with an on-disk cache keyed by content hash.

Descriptor vectors are produced elsewhere (by a text encoder) and attached to
the mined descriptions with :func:`attach_descriptors`.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import socket
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._fileutil import atomic_write
from .dataio import EmbeddingBank
from .errors import EmptyName, MissingDescriptor, ProviderError, ProviderTimeout, ShapeMismatch, ZeroNorm
from .numcore import EPS

log = logging.getLogger(__name__)

PROMPT1_TEMPLATE = (
    "[DEFINITION] is the definition of the [CLASS]. "
    "Can you describe the visual features associated with this category?"
)
PROMPT2_TEMPLATE = (
    "Please describe the [CLASS] in a maximum of five sentences, focusing on discriminative "
    "visual features. Make the description more detailed and aligned with scientific facts, "
    "avoiding general summaries and subjective interpretations."
)


@dataclass(frozen=True)
class PromptPair:
    name: str
    definition: str
    prompt1: str
    prompt2: str


def build_prompts(name: str, definition: str) -> PromptPair:
    if not name:
        raise EmptyName("category name must be non-empty")
    if not definition:
        log.warning("empty definition for category %r", name)
    prompt1 = PROMPT1_TEMPLATE.replace("[DEFINITION]", definition).replace("[CLASS]", name)
    prompt2 = PROMPT2_TEMPLATE.replace("[CLASS]", name)
    return PromptPair(name, definition, prompt1, prompt2)


def conversation(prompts: PromptPair, first_answer: str | None = None) -> list[dict]:
    """Messages for turn one, or for turn two when ``first_answer`` is given."""
    messages = [{"role": "user", "content": prompts.prompt1}]
    if first_answer is not None:
        messages += [
            {"role": "assistant", "content": first_answer},
            {"role": "user", "content": prompts.prompt2},
        ]
    return messages


# -- providers ------------------------------------------------------------------------


@dataclass(frozen=True)
class ProviderConfig:
    endpoint: str = "http://localhost:8000/v1/chat/completions"
    model: str = "gpt-3.5-turbo"
    timeout: float = 30.0
    retries: int = 2
    response_pointer: str = "/choices/0/message/content"
    api_key_env: str = "SYNBRIDGE_API_KEY"
    stub: bool = False
    stub_seed: int = 0
    max_in_flight: int = 4

    def __post_init__(self):
        if self.retries < 0:
            raise ValueError("retry count must be >= 0")


def resolve_pointer(doc, pointer: str):
    """Follow an RFC 6901 JSON pointer."""
    if pointer in ("", "/"):
        return doc
    for raw in pointer.lstrip("/").split("/"):
        token = raw.replace("~1", "/").replace("~0", "~")
        doc = doc[int(token)] if isinstance(doc, list) else doc[token]
    return doc


class HTTPProvider:
    """Chat-completions style provider over HTTP POST with retries."""

    def __init__(self, config: ProviderConfig):
        self.config = config
        self.requests = 0
        self._lock = threading.Lock()

    @property
    def provider_id(self) -> str:
        return f"http:{self.config.model}"

    def complete(self, messages: list[dict]) -> str:
        body = json.dumps({"model": self.config.model, "messages": messages}).encode()
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(self.config.api_key_env)
        if key:
            headers["Authorization"] = f"Bearer {key}"
        last_error = None
        for attempt in range(self.config.retries + 1):
            if attempt:
                time.sleep(min(0.05 * 2**attempt, 2.0))
            with self._lock:
                self.requests += 1
            req = urllib.request.Request(self.config.endpoint, data=body, headers=headers, method="POST")
            try:
                with urllib.request.urlopen(req, timeout=self.config.timeout) as resp:
                    payload = json.loads(resp.read().decode("utf-8"))
                return str(resolve_pointer(payload, self.config.response_pointer))
            except urllib.error.HTTPError as exc:
                text = exc.read().decode("utf-8", "replace")
                last_error = ProviderError(exc.code, text)
                if exc.code < 500 and exc.code != 429:
                    raise last_error from None
            except (socket.timeout, TimeoutError):
                last_error = ProviderTimeout(f"no response within {self.config.timeout}s")
            except urllib.error.URLError as exc:
                if isinstance(exc.reason, (socket.timeout, TimeoutError)):
                    last_error = ProviderTimeout(f"no response within {self.config.timeout}s")
                else:
                    last_error = ProviderError(0, str(exc.reason))
            except (KeyError, IndexError, ValueError) as exc:
                raise ProviderError(200, f"unexpected response shape: {exc}") from None
        raise last_error


class StubProvider:
    """Offline provider returning deterministic pseudo-descriptions."""

    _WORDS = (
        "slender", "glossy", "mottled", "ridged", "pale", "dark", "striped", "rounded",
        "angular", "tapered", "speckled", "translucent", "matte", "banded", "crested", "compact",
    )

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.requests = 0
        self._lock = threading.Lock()

    @property
    def provider_id(self) -> str:
        return f"stub:{self.seed}"

    def complete(self, messages: list[dict]) -> str:
        with self._lock:
            self.requests += 1
        digest = hashlib.sha256(
            json.dumps([self.seed, messages], sort_keys=True).encode()
        ).digest()
        rng = np.random.default_rng(list(digest[:16]))
        subject = messages[-1]["content"].split(" the ", 1)[-1].split(".")[0].split(" in a")[0]
        sentences = []
        for _ in range(3 if len(messages) == 1 else 5):
            a, b = rng.choice(self._WORDS, size=2, replace=False)
            sentences.append(f"The {subject} appears {a} with {b} markings.")
        return " ".join(sentences)


def make_provider(config: ProviderConfig):
    return StubProvider(config.stub_seed) if config.stub else HTTPProvider(config)


# -- mining with cache ----------------------------------------------------------------


def content_hash(provider_id: str, prompts: PromptPair) -> str:
    h = hashlib.sha256()
    for part in (provider_id, prompts.name, prompts.definition, prompts.prompt1, prompts.prompt2):
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.hexdigest()


def record_is_valid(record: dict) -> bool:
    prompts = build_prompts(record["name"], record["definition"])
    return content_hash(record["provider"], prompts) == record["hash"]


def _cache_file(cache_dir: Path, digest: str) -> Path:
    return cache_dir / f"{digest}.jsonl"


def _read_cached(path: Path):
    try:
        record = json.loads(path.read_text().splitlines()[0])
    except (OSError, IndexError, ValueError):
        return None
    return record if record_is_valid(record) else None


def mine_descriptions(categories, provider, cache_dir, max_in_flight: int = 4) -> dict:
    """Description text per category id, asking the provider only on cache misses.

    Each category is a two-turn exchange: the answer to the first prompt is
    sent back as context with the second prompt, whose answer is kept.
    Returns ``{id: record}`` with keys id, name, definition, description,
    provider, hash.
    """
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    records, todo = {}, []
    for cat in categories:
        prompts = build_prompts(cat.name, cat.definition)
        digest = content_hash(provider.provider_id, prompts)
        cached = _read_cached(_cache_file(cache_dir, digest))
        if cached is not None:
            records[cat.id] = {**cached, "id": cat.id}
        else:
            todo.append((cat, prompts, digest))

    def mine_one(item):
        cat, prompts, digest = item
        first = provider.complete(conversation(prompts))
        description = provider.complete(conversation(prompts, first))
        record = {
            "id": cat.id,
            "name": cat.name,
            "definition": cat.definition,
            "description": description,
            "provider": provider.provider_id,
            "hash": digest,
        }
        atomic_write(_cache_file(cache_dir, digest), (json.dumps(record, sort_keys=True) + "\n").encode())
        return record

    if todo:
        log.info("mining %d of %d categories", len(todo), len(todo) + len(records))
        with ThreadPoolExecutor(max_workers=max(1, max_in_flight)) as pool:
            for record in pool.map(mine_one, todo):
                records[record["id"]] = record
    return dict(sorted(records.items()))


def write_descriptions(records: dict, path) -> None:
    lines = [json.dumps(records[k], sort_keys=True) for k in sorted(records)]
    atomic_write(Path(path), ("\n".join(lines) + "\n").encode())


def read_descriptions(path) -> dict:
    """Load a descriptions JSONL file, rejecting records whose hash does not verify."""
    records = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        if not record_is_valid(record):
            raise ValueError(f"hash mismatch for category {record.get('id')}")
        records[int(record["id"])] = record
    return records


# -- descriptors ----------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SemanticDescriptorSet:
    """Unit descriptor vector per category, with the text it came from."""

    category_ids: tuple
    vectors: np.ndarray
    records: dict

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def matrix(self) -> np.ndarray:
        """Rows indexed by category id (ids must be ``0..n-1``)."""
        if list(self.category_ids) != list(range(len(self.category_ids))):
            raise ValueError("category ids are not contiguous")
        return self.vectors

    def vector(self, category_id) -> np.ndarray:
        return self.vectors[self.category_ids.index(category_id)]


def attach_descriptors(texts: dict, encoded: EmbeddingBank, dim: int | None = None) -> SemanticDescriptorSet:
    """Pair mined texts with externally encoded rows, re-normalizing each row."""
    if dim is not None and encoded.dim != dim:
        raise ShapeMismatch(f"encoded descriptors have dim {encoded.dim}, expected {dim}")
    ids = tuple(sorted(texts))
    vectors = []
    for cid in ids:
        rows = encoded.indices_by_label.get(cid)
        if rows is None or rows.size == 0:
            name = texts[cid]["name"] if isinstance(texts[cid], dict) else cid
            raise MissingDescriptor(f"no encoded descriptor for category {cid} ({name})")
        v = encoded.rows[rows[0]]
        n = np.linalg.norm(v)
        if n <= EPS:
            raise ZeroNorm(f"descriptor for category {cid} has zero norm")
        vectors.append(v / n)
    records = {cid: texts[cid] if isinstance(texts[cid], dict) else {"description": texts[cid]} for cid in ids}
    return SemanticDescriptorSet(ids, np.vstack(vectors), records)
