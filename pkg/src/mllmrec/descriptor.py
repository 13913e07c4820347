"""MLLM-generated item descriptions and user preference texts.

Items: image -> semantic description, fused with the item's text metadata.
Users: the fused descriptions of their train items, in time order, are put into
a second prompt that asks the MLLM to summarize the user's preferences.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import mimetypes
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import httpx

from mllmrec.config import MllmClientConfig
from mllmrec.corpus import InteractionMatrix

log = logging.getLogger(__name__)

ITEM_PROMPT = (
    "Please convert the given image into an accurate and concise textual description "
    "relevant to the {dataset name}, focusing on extracting key attributes that can "
    "influence the buying behavior of users, such as color, material, style, "
    "functionality, etc. To generate the textual description using a one-paragraph "
    "natural language overview in no more than 100 words."
)

USER_PROMPT = (
    "Please reason about the user preferences based on the following list of item "
    "descriptions that he or she has interacted with. The list is: "
    "{behavioral description}. To generate the user preferences using a one-paragraph "
    "natural language in no more than 100 words."
)

DEFAULT_SEPARATOR = ". "


class DescriptorError(RuntimeError):
    pass


class TransportError(DescriptorError):
    def __init__(self, message: str, attempts: int):
        self.attempts = attempts
        super().__init__(f"{message} (after {attempts} attempts)")


class EmptyResponse(DescriptorError):
    pass


class MissingImage(DescriptorError):
    pass


class MissingDescription(DescriptorError):
    def __init__(self, item: int):
        self.item = item
        super().__init__(f"item {item} has no multimodal description")


def render_item_prompt(dataset_name: str) -> str:
    if not dataset_name:
        raise ValueError("dataset name must be nonempty")
    return ITEM_PROMPT.replace("{dataset name}", dataset_name)


def serialize_behavior_list(behavior_list: Sequence[str]) -> str:
    return "; ".join(f'{n}. "{d}"' for n, d in enumerate(behavior_list, start=1))


def render_user_prompt(behavior_list: Sequence[str]) -> str:
    if not behavior_list:
        raise ValueError("behavior list must be nonempty")
    return USER_PROMPT.replace("{behavioral description}", serialize_behavior_list(behavior_list))


def fuse_descriptions(text_meta: str, semantic_desc: str, separator: str = DEFAULT_SEPARATOR) -> str:
    """Concatenate metadata and generated description; an empty side drops the separator."""
    if not text_meta:
        return semantic_desc
    if not semantic_desc:
        return text_meta
    return f"{text_meta}{separator}{semantic_desc}"


def content_hash(*parts: str | None) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(b"\x00" if p is None else p.encode("utf-8") + b"\x01")
    return h.hexdigest()[:16]


# clients --------------------------------------------------------------------------

class MllmClient(Protocol):
    model_name: str
    calls: int

    def complete(self, prompt: str, image_ref: str | None = None) -> str: ...


class StubMllmClient:
    """Offline provider: ``"stub-desc <hash>"`` from (seed, prompt, image_ref)."""

    def __init__(self, seed: int = 0, model_name: str = "stub"):
        self.seed = seed
        self.model_name = model_name
        self.calls = 0
        self._lock = threading.Lock()

    def complete(self, prompt: str, image_ref: str | None = None) -> str:
        with self._lock:
            self.calls += 1
        return f"stub-desc {content_hash(str(self.seed), prompt, image_ref)}"


def image_payload(image_ref: str, mode: str = "base64") -> str:
    """URL for the chat request: remote refs pass through, local files are inlined."""
    if image_ref.startswith(("http://", "https://", "data:")):
        return image_ref
    path = Path(image_ref)
    if not path.is_file():
        raise MissingImage(f"image not found: {image_ref}")
    if mode == "url":
        return path.resolve().as_uri()
    mime = mimetypes.guess_type(path.name)[0] or "image/jpeg"
    return f"data:{mime};base64,{base64.b64encode(path.read_bytes()).decode('ascii')}"


class HttpMllmClient:
    """Chat-completions style client (OpenAI-compatible wire format)."""

    RETRY_STATUS = {408, 429, 500, 502, 503, 504}

    def __init__(self, cfg: MllmClientConfig, api_key: str | None = None,
                 transport: httpx.BaseTransport | None = None, backoff: float = 1.0):
        self.cfg = cfg
        self.model_name = cfg.model_name
        self.calls = 0
        self.backoff = backoff
        headers = {"Authorization": f"Bearer {api_key}"} if api_key else {}
        self._http = httpx.Client(timeout=cfg.timeout, headers=headers, transport=transport)
        self._lock = threading.Lock()

    def request_body(self, prompt: str, image_ref: str | None = None) -> dict:
        content: list[dict] = []
        if image_ref is not None:
            content.append({"type": "image_url",
                            "image_url": {"url": image_payload(image_ref, self.cfg.image_mode)}})
        content.append({"type": "text", "text": prompt})
        return {"model": self.cfg.model_name, "temperature": self.cfg.temperature,
                "messages": [{"role": "user", "content": content}]}

    def complete(self, prompt: str, image_ref: str | None = None) -> str:
        body = self.request_body(prompt, image_ref)
        attempts = self.cfg.max_retries + 1
        last = ""
        for attempt in range(1, attempts + 1):
            with self._lock:
                self.calls += 1
            try:
                resp = self._http.post(self.cfg.endpoint, json=body)
                if resp.status_code in self.RETRY_STATUS:
                    last = f"HTTP {resp.status_code}"
                else:
                    resp.raise_for_status()
                    return _first_text(resp.json())
            except httpx.TransportError as exc:
                last = repr(exc)
            except httpx.HTTPStatusError as exc:
                raise TransportError(str(exc), attempt) from exc
            log.warning("MLLM request failed (%s), attempt %d/%d", last, attempt, attempts)
            if attempt < attempts and self.backoff:
                time.sleep(self.backoff * 2 ** (attempt - 1))
        raise TransportError(f"MLLM endpoint {self.cfg.endpoint} unreachable: {last}", attempts)

    def close(self):
        self._http.close()


def _first_text(payload: dict) -> str:
    try:
        content = payload["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError):
        raise EmptyResponse(f"unexpected response shape: {str(payload)[:200]}") from None
    if isinstance(content, list):
        texts = [c.get("text", "") for c in content if isinstance(c, dict) and c.get("type") == "text"]
        content = texts[0] if texts else ""
    if not isinstance(content, str) or not content.strip():
        raise EmptyResponse("MLLM returned an empty message")
    return content


# cache ------------------------------------------------------------------------------

class ResponseCache:
    """Append-only JSONL log of generated texts with an in-memory index.

    Records: ``{kind, index, model, prompt_hash, text}``; later lines win.
    """

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path is not None else None
        self._index: dict[tuple[str, int, str, str], str] = {}
        self._lock = threading.Lock()
        if self.path is not None and self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if not line.strip():
                        continue
                    try:
                        rec = json.loads(line)
                    except json.JSONDecodeError:
                        # a torn final line from an interrupted run
                        continue
                    self._index[(rec["kind"], rec["index"], rec["model"], rec["prompt_hash"])] = rec["text"]

    def __len__(self):
        return len(self._index)

    def get(self, kind: str, index: int, model: str, prompt_hash: str) -> str | None:
        return self._index.get((kind, index, model, prompt_hash))

    def put(self, kind: str, index: int, model: str, prompt_hash: str, text: str) -> None:
        rec = {"kind": kind, "index": index, "model": model, "prompt_hash": prompt_hash, "text": text}
        with self._lock:
            self._index[(kind, index, model, prompt_hash)] = text
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8") as fh:
                    fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def _cached_call(client: MllmClient, cache: ResponseCache | None, kind: str, index: int,
                 prompt: str, image_ref: str | None, key_hash: str) -> str:
    if cache is not None:
        hit = cache.get(kind, index, client.model_name, key_hash)
        if hit is not None:
            return hit
    text = client.complete(prompt, image_ref)
    if not text or not text.strip():
        raise EmptyResponse(f"{kind} {index}: blank response")
    if cache is not None:
        cache.put(kind, index, client.model_name, key_hash, text)
    return text


def generate_item_description(client: MllmClient, prompt: str, image_ref: str | None,
                              index: int = 0, cache: ResponseCache | None = None) -> str:
    if not image_ref:
        raise MissingImage(f"item {index} has no image reference")
    return _cached_call(client, cache, "item", index, prompt, image_ref,
                        content_hash(prompt, image_ref))


def generate_user_preference(client: MllmClient, behavior_list: Sequence[str], index: int = 0,
                             cache: ResponseCache | None = None) -> str:
    prompt = render_user_prompt(behavior_list)
    return _cached_call(client, cache, "user", index, prompt, None, content_hash(prompt))


# catalogs -----------------------------------------------------------------------------

@dataclass
class ItemRecord:
    item_key: str
    text_meta: str = ""
    image_ref: str = ""
    semantic_desc: str | None = None
    multimodal_desc: str | None = None


@dataclass
class UserRecord:
    user_key: str
    behavior_list: list[str] = field(default_factory=list)
    preference_text: str | None = None


def load_item_metadata(path: str | Path, item_keys: Sequence[str]) -> list[ItemRecord]:
    """Catalog entries aligned to ``item_keys``; every key needs a metadata line."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"item metadata file not found: {path}")
    meta: dict[str, dict] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                meta[str(rec["item_key"])] = rec
            except (json.JSONDecodeError, KeyError) as exc:
                raise DescriptorError(f"{path}:{line_no}: bad metadata record ({exc})") from None
    missing = [k for k in item_keys if k not in meta]
    if missing:
        raise DescriptorError(f"{len(missing)} items lack metadata, e.g. {missing[0]!r}")
    return [ItemRecord(k, str(meta[k].get("text_meta") or ""), str(meta[k].get("image_ref") or ""))
            for k in item_keys]


def build_behavior_list(user: int, train: InteractionMatrix, catalog: Sequence[ItemRecord],
                        cap: int = 50) -> list[str]:
    """Fused descriptions of the user's train items, oldest first, last ``cap`` kept."""
    items = train.by_user[user].tolist()

    def when(i):
        ts = train.timestamps.get((user, i))
        return (ts is not None, ts if ts is not None else 0, i)

    ordered = sorted(items, key=when)[-cap:] if cap > 0 else []
    out = []
    for i in ordered:
        desc = catalog[i].multimodal_desc
        if not desc:
            raise MissingDescription(i)
        out.append(desc)
    return out


@dataclass
class DescribeReport:
    item_failures: dict[int, str] = field(default_factory=dict)
    user_failures: dict[int, str] = field(default_factory=dict)
    generated: int = 0

    @property
    def partial(self) -> bool:
        return bool(self.item_failures or self.user_failures)


def describe_items(client: MllmClient, catalog: list[ItemRecord], dataset_name: str,
                   cache: ResponseCache | None = None, separator: str = DEFAULT_SEPARATOR,
                   concurrency: int = 1, report: DescribeReport | None = None) -> DescribeReport:
    """Fill ``semantic_desc`` and ``multimodal_desc`` in place.

    A failed item keeps ``semantic_desc=None`` and falls back to its metadata
    text as the fused description, so user generation can proceed.
    """
    report = report or DescribeReport()
    prompt = render_item_prompt(dataset_name)
    before = client.calls

    def one(idx):
        rec = catalog[idx]
        try:
            return idx, generate_item_description(client, prompt, rec.image_ref, idx, cache), None
        except (DescriptorError, httpx.HTTPError) as exc:
            return idx, None, str(exc)

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        results = list(pool.map(one, range(len(catalog))))
    for idx, text, err in results:
        rec = catalog[idx]
        rec.semantic_desc = text
        if err is not None:
            report.item_failures[idx] = err
            log.warning("item %d: %s", idx, err)
        rec.multimodal_desc = fuse_descriptions(rec.text_meta, text or "", separator) or None
    report.generated += client.calls - before
    return report


def describe_users(client: MllmClient, train: InteractionMatrix, catalog: Sequence[ItemRecord],
                   cache: ResponseCache | None = None, cap: int = 50, concurrency: int = 1,
                   report: DescribeReport | None = None) -> tuple[list[UserRecord], DescribeReport]:
    report = report or DescribeReport()
    keys = train.user_keys or tuple(str(u) for u in range(train.n_users))
    users = [UserRecord(keys[u]) for u in range(train.n_users)]
    before = client.calls

    def one(u):
        try:
            blist = build_behavior_list(u, train, catalog, cap)
            return u, blist, generate_user_preference(client, blist, u, cache), None
        except (DescriptorError, ValueError, httpx.HTTPError) as exc:
            return u, [], None, str(exc)

    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        results = list(pool.map(one, range(train.n_users)))
    for u, blist, text, err in results:
        users[u].behavior_list = blist
        users[u].preference_text = text
        if err is not None:
            report.user_failures[u] = err
            log.warning("user %d: %s", u, err)
    report.generated += client.calls - before
    return users, report


def write_jsonl(records, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r.__dict__, ensure_ascii=False) + "\n")


def read_items(path: str | Path) -> list[ItemRecord]:
    with open(path, encoding="utf-8") as fh:
        return [ItemRecord(**json.loads(line)) for line in fh if line.strip()]


def read_users(path: str | Path) -> list[UserRecord]:
    with open(path, encoding="utf-8") as fh:
        return [UserRecord(**json.loads(line)) for line in fh if line.strip()]
