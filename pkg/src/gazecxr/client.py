"""Vision-chat request building, retrying HTTP generation and an on-disk exchange cache.

Every request carries one user turn (prompt text + one base64 png) and is
decoded greedily (temperature 0) with the per-task token cap below.
"""
from __future__ import annotations

import base64
import copy
import hashlib
import io
import json
import logging
import os
import tempfile
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Iterable, Mapping, Optional, Sequence

import httpx
from PIL import Image
from pydantic import BaseModel, Field

from .tasks import TaskInstance, TaskKind

log = logging.getLogger(__name__)

TASK_LIMITS: Mapping[str, int] = MappingProxyType(
    {"GEN": 320, "SUM": 128, "ERR": 64, "DDX": 192, "VQA": 64}
)
TEMPERATURE = 0
CONDITIONS = ("no_gaze", "gaze")
PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class VlmError(RuntimeError):
    pass


class MissingImage(VlmError):
    pass


class Timeout(VlmError):
    pass


class AuthError(VlmError):
    pass


class ServerError(VlmError):
    def __init__(self, status: int, body: str = ""):
        super().__init__(f"server returned {status}: {body[:200]}")
        self.status = status


class ExhaustedRetries(VlmError):
    def __init__(self, attempts: int, last: Exception):
        super().__init__(f"gave up after {attempts} attempts: {last}")
        self.attempts = attempts
        self.last = last


class EndpointConfig(BaseModel):
    base_url: str = "http://127.0.0.1:8000/v1"
    model_name: str = "mock-vlm"
    token_env: Optional[str] = "VLM_API_KEY"
    timeout: float = Field(60.0, gt=0)
    max_retries: int = Field(2, ge=0)
    backoff_initial: float = Field(1.0, ge=0)
    backoff_multiplier: float = Field(2.0, ge=1)
    concurrency: int = Field(4, ge=1)

    def headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.token_env) if self.token_env else None
        if token:
            headers["Authorization"] = f"Bearer {token}"
        return headers


@dataclass
class VlmExchange:
    instance_id: str
    condition: str
    model_name: str
    prompt_hash: str
    image_ref: str
    request: dict
    status: str  # success | error
    response_text: Optional[str] = None
    error: Optional[str] = None
    latency_ms: float = 0.0
    attempt_count: int = 1
    cached: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("cached")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VlmExchange":
        return cls(**d)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def png_bytes(path: str | Path) -> bytes:
    """File contents as png; other containers are re-encoded losslessly."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise MissingImage(f"image not found: {path}") from None
    if data.startswith(PNG_SIGNATURE):
        return data
    with Image.open(io.BytesIO(data)) as im:
        im.load()
        if im.mode not in ("L", "RGB", "RGBA", "I;16"):
            im = im.convert("RGB")
        buf = io.BytesIO()
        im.save(buf, format="PNG", compress_level=6)
    return buf.getvalue()


def image_for(instance: TaskInstance, condition: str) -> str:
    if condition == "gaze":
        return instance.overlay_ref
    if condition == "no_gaze":
        return instance.image_ref
    raise ValueError(f"unknown condition {condition!r}")


def prompt_hash(prompt: str, image_digest: str) -> str:
    return _sha256(prompt.encode("utf-8") + b"\x00" + image_digest.encode())


def build_request(
    instance: TaskInstance,
    condition: str,
    limits: Mapping[str, int] = TASK_LIMITS,
    model_name: str = "",
    image: Optional[bytes] = None,
) -> dict:
    """Chat-completions payload for one instance under one image condition.

    ``image`` overrides reading the condition's file (already-encoded png).
    """
    kind = instance.kind.value if isinstance(instance.kind, TaskKind) else str(instance.kind)
    if image is None:
        image = png_bytes(image_for(instance, condition))
    url = "data:image/png;base64," + base64.b64encode(image).decode("ascii")
    return {
        "model": model_name,
        "messages": [
            {
                "role": "user",
                "content": [
                    {"type": "text", "text": instance.prompt},
                    {"type": "image_url", "image_url": {"url": url}},
                ],
            }
        ],
        "temperature": TEMPERATURE,
        "max_tokens": limits[kind],
        "n": 1,
        "stream": False,
    }


def payload_prompt(payload: dict) -> str:
    return "".join(p["text"] for p in payload["messages"][0]["content"] if p["type"] == "text")


def payload_image(payload: dict) -> bytes:
    for part in payload["messages"][0]["content"]:
        if part["type"] == "image_url":
            return base64.b64decode(part["image_url"]["url"].split(",", 1)[1])
    raise ValueError("payload has no image part")


def redact_payload(payload: dict) -> dict:
    """Copy of the payload with image data replaced by its sha256 digest."""
    out = copy.deepcopy(payload)
    for part in out["messages"][0]["content"]:
        if part["type"] == "image_url":
            part["image_url"]["url"] = "sha256:" + _sha256(payload_image(payload))
    return out


def _response_text(body: dict) -> str:
    content = body["choices"][0]["message"]["content"]
    if isinstance(content, list):
        content = "".join(p.get("text", "") for p in content if isinstance(p, dict))
    if not isinstance(content, str):
        raise TypeError("message content is not text")
    return content.rstrip()


def _attempt(client: httpx.Client, url: str, payload: dict, endpoint: EndpointConfig) -> str:
    try:
        resp = client.post(url, json=payload, headers=endpoint.headers(), timeout=endpoint.timeout)
    except httpx.TimeoutException as exc:
        raise Timeout(str(exc) or "request timed out") from exc
    if resp.status_code in (401, 403):
        raise AuthError(f"authentication rejected ({resp.status_code})")
    if resp.status_code >= 400:
        raise ServerError(resp.status_code, resp.text)
    try:
        return _response_text(resp.json())
    except (ValueError, KeyError, IndexError, TypeError) as exc:
        raise ServerError(resp.status_code, f"malformed response: {exc}") from exc


def _retryable(exc: Exception) -> bool:
    if isinstance(exc, (Timeout, httpx.TransportError)):
        return True
    return isinstance(exc, ServerError) and (exc.status >= 500 or exc.status == 429)


def generate(
    payload: dict,
    endpoint: EndpointConfig,
    client: Optional[httpx.Client] = None,
    *,
    instance_id: str = "",
    condition: str = "",
    image_ref: str = "",
    sleep: Callable[[float], None] = time.sleep,
) -> VlmExchange:
    """POST one payload, retrying transport failures, timeouts, 429 and 5xx.

    Raises AuthError immediately on 401/403 and ServerError on other 4xx;
    raises ExhaustedRetries once ``max_retries`` retries have failed.
    """
    own = client is None
    client = client or httpx.Client()
    url = endpoint.base_url.rstrip("/") + "/chat/completions"
    delay = endpoint.backoff_initial
    started = time.perf_counter()
    try:
        for attempt in range(1, endpoint.max_retries + 2):
            try:
                text = _attempt(client, url, payload, endpoint)
            except (VlmError, httpx.TransportError) as exc:
                if not _retryable(exc):
                    raise
                if attempt > endpoint.max_retries:
                    raise ExhaustedRetries(attempt, exc) from exc
                log.warning("attempt %d for %s failed (%s); retrying in %.2fs", attempt, instance_id, exc, delay)
                sleep(delay)
                delay *= endpoint.backoff_multiplier
                continue
            image_digest = _sha256(payload_image(payload))
            return VlmExchange(
                instance_id=instance_id,
                condition=condition,
                model_name=endpoint.model_name,
                prompt_hash=prompt_hash(payload_prompt(payload), image_digest),
                image_ref=image_ref,
                request=redact_payload(payload),
                status="success",
                response_text=text,
                latency_ms=round((time.perf_counter() - started) * 1000.0, 3),
                attempt_count=attempt,
            )
    finally:
        if own:
            client.close()
    raise AssertionError("unreachable")


class ExchangeCache:
    """One json document per successful exchange, written atomically."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._locks: dict[str, threading.Lock] = {}
        self._guard = threading.Lock()

    @staticmethod
    def key(instance_id: str, condition: str, model_name: str, p_hash: str) -> str:
        return _sha256(json.dumps([instance_id, condition, model_name, p_hash]).encode())

    def path(self, key: str) -> Path:
        return self.root / f"{key}.json"

    def _lock(self, key: str) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(key, threading.Lock())

    def get(self, key: str) -> Optional[VlmExchange]:
        try:
            doc = json.loads(self.path(key).read_text("utf-8"))
            ex = VlmExchange.from_dict(doc)
        except (FileNotFoundError, ValueError, TypeError):
            return None
        ex.cached = True
        return ex

    def put(self, key: str, exchange: VlmExchange) -> None:
        data = json.dumps(exchange.to_dict(), sort_keys=True, ensure_ascii=False, indent=1)
        with self._lock(key):
            fd, tmp = tempfile.mkstemp(dir=self.root, prefix=".tmp-", suffix=".json")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    fh.write(data)
                    fh.flush()
                    os.fsync(fh.fileno())
                os.replace(tmp, self.path(key))
            except BaseException:
                Path(tmp).unlink(missing_ok=True)
                raise

    def __len__(self) -> int:
        return sum(1 for _ in self.root.glob("*.json"))


@dataclass(frozen=True)
class _Job:
    instance: TaskInstance
    condition: str


def _prepare(job: _Job, endpoint: EndpointConfig, limits) -> tuple[dict, str, str]:
    ref = image_for(job.instance, job.condition)
    image = png_bytes(ref)
    payload = build_request(job.instance, job.condition, limits, endpoint.model_name, image=image)
    return payload, ref, prompt_hash(job.instance.prompt, _sha256(image))


def run_batch(
    instances: Sequence[TaskInstance],
    conditions: Iterable[str],
    endpoint: EndpointConfig,
    cache: ExchangeCache,
    client: Optional[httpx.Client] = None,
    limits: Mapping[str, int] = TASK_LIMITS,
    max_workers: Optional[int] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> list[VlmExchange]:
    """Dispatch every (instance, condition) as its own single-item request.

    Cached successes are returned without a network call; failures become
    ``status="error"`` records and are not cached. Output order is
    instance-major, condition-minor, independent of completion order.
    """
    conditions = list(conditions)
    for c in conditions:
        if c not in CONDITIONS:
            raise ValueError(f"unknown condition {c!r}")
    jobs = [_Job(inst, cond) for inst in instances for cond in conditions]
    own = client is None
    client = client or httpx.Client(timeout=endpoint.timeout)

    def work(job: _Job) -> VlmExchange:
        base = dict(instance_id=job.instance.instance_id, condition=job.condition, model_name=endpoint.model_name)
        try:
            payload, ref, p_hash = _prepare(job, endpoint, limits)
        except (MissingImage, OSError) as exc:
            return VlmExchange(**base, prompt_hash="", image_ref=image_for(job.instance, job.condition),
                               request={}, status="error", error=f"{type(exc).__name__}: {exc}")
        key = cache.key(job.instance.instance_id, job.condition, endpoint.model_name, p_hash)
        hit = cache.get(key)
        if hit is not None:
            return hit
        try:
            ex = generate(payload, endpoint, client, instance_id=job.instance.instance_id,
                          condition=job.condition, image_ref=ref, sleep=sleep)
        except (VlmError, httpx.HTTPError) as exc:
            attempts = exc.attempts if isinstance(exc, ExhaustedRetries) else 1
            return VlmExchange(**base, prompt_hash=p_hash, image_ref=ref, request=redact_payload(payload),
                               status="error", error=f"{type(exc).__name__}: {exc}", attempt_count=attempts)
        cache.put(key, ex)
        return ex

    try:
        with ThreadPoolExecutor(max_workers=max_workers or endpoint.concurrency) as pool:
            return list(pool.map(work, jobs))
    finally:
        if own:
            client.close()
