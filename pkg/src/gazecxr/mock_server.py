"""Deterministic offline stand-ins for the VLM, NER and embedding services.

The chat endpoint answers from a fixture table keyed by prompt hash and
falls back to a canned per-task response chosen by hashing the request,
so identical requests always get identical answers.
"""
from __future__ import annotations

import hashlib
import threading
import time
from typing import Optional

import numpy as np
import uvicorn
from fastapi import FastAPI, HTTPException, Request
from pydantic import BaseModel

from .client import TASK_LIMITS, payload_image, payload_prompt, prompt_hash
from .extract import scan_mentions
from .lexicon import DiagnosisLexicon, load_lexicon

CANNED = {
    "GEN": [
        "The lungs are clear. No pleural effusion or pneumothorax. Heart size is normal.",
        "There is mild cardiomegaly. Small left pleural effusion. No pneumothorax.",
        "Right lower lobe opacity concerning for pneumonia. No pneumothorax.",
        "Low lung volumes with bibasilar atelectasis. No large pleural effusion.",
    ],
    "SUM": [
        "No acute cardiopulmonary process.",
        "Right lower lobe pneumonia.",
        "Cardiomegaly with small left pleural effusion.",
    ],
    "ERR": ["Y", "N", "Yes, the report contains an error.", "No, the report is accurate.", "I am not sure."],
    "DDX": [
        "Findings suggest pneumonia and pleural effusion.",
        "Likely heart failure with pulmonary edema.",
        "Possible atelectasis.",
        "Cardiomegaly. Consider pneumothorax.",
    ],
    "VQA": ["yes", "no", "left lung", "The right lung."],
}
_TASK_BY_LIMIT = {v: k for k, v in TASK_LIMITS.items()}
# ERR and VQA share a cap; the prompt tells them apart
_ERR_MARKER = "contain an error"


def _task_of(payload: dict) -> str:
    task = _TASK_BY_LIMIT.get(payload.get("max_tokens"), "VQA")
    if task in ("ERR", "VQA"):
        task = "ERR" if _ERR_MARKER in payload_prompt(payload) else "VQA"
    return task


def canned_response(payload: dict) -> str:
    digest = hashlib.sha256(payload_prompt(payload).encode() + b"\x00" + payload_image(payload)).digest()
    bank = CANNED[_task_of(payload)]
    return bank[int.from_bytes(digest[:4], "big") % len(bank)]


def trigram_embedding(text: str, dim: int = 64) -> list[float]:
    vec = np.zeros(dim)
    padded = f"  {text.lower()} "
    for i in range(len(padded) - 2):
        h = hashlib.md5(padded[i : i + 3].encode()).digest()
        vec[int.from_bytes(h[:4], "big") % dim] += 1.0
    norm = np.linalg.norm(vec)
    return (vec / norm if norm else vec).tolist()


class NerRequest(BaseModel):
    text: str


class Span(BaseModel):
    start: int
    end: int
    surface: str


class NerResponse(BaseModel):
    spans: list[Span]


class EmbedRequest(BaseModel):
    texts: list[str]


class EmbedResponse(BaseModel):
    vectors: list[list[float]]


def create_app(
    fixtures: Optional[dict[str, str]] = None,
    fail_first: int = 0,
    fail_status: int = 500,
    required_token: Optional[str] = None,
    lexicon: Optional[DiagnosisLexicon] = None,
    delay: float = 0.0,
) -> FastAPI:
    """Build the mock app. Received chat payloads are kept in ``app.state.requests``."""
    app = FastAPI(title="gazecxr mock services")
    app.state.fixtures = dict(fixtures or {})
    app.state.requests = []
    app.state.remaining_failures = fail_first
    app.state.lock = threading.Lock()
    lex = lexicon or load_lexicon()

    @app.get("/health")
    def health():
        return {"status": "ok"}

    @app.post("/v1/chat/completions")
    async def chat(request: Request):
        if required_token and request.headers.get("authorization") != f"Bearer {required_token}":
            raise HTTPException(status_code=401, detail="bad token")
        payload = await request.json()
        with app.state.lock:
            app.state.requests.append(payload)
            if app.state.remaining_failures > 0:
                app.state.remaining_failures -= 1
                raise HTTPException(status_code=fail_status, detail="injected failure")
        if delay:
            time.sleep(delay)
        prompt = payload_prompt(payload)
        image_digest = hashlib.sha256(payload_image(payload)).hexdigest()
        key = prompt_hash(prompt, image_digest)
        text_key = hashlib.sha256(prompt.encode()).hexdigest()
        text = app.state.fixtures.get(key) or app.state.fixtures.get(text_key) or canned_response(payload)
        return {
            "id": "mock-" + key[:12],
            "object": "chat.completion",
            "model": payload.get("model", ""),
            "choices": [
                {"index": 0, "message": {"role": "assistant", "content": text}, "finish_reason": "stop"}
            ],
        }

    @app.post("/ner", response_model=NerResponse)
    def ner(req: NerRequest):
        return {"spans": [vars(m) for m in scan_mentions(req.text, lex)]}

    @app.post("/embed", response_model=EmbedResponse)
    def embed(req: EmbedRequest):
        return {"vectors": [trigram_embedding(t) for t in req.texts]}

    return app


class MockServer:
    """Run an app with uvicorn on a background thread; ``port=0`` picks a free port."""

    def __init__(self, app: Optional[FastAPI] = None, host: str = "127.0.0.1", port: int = 0):
        self.app = app or create_app()
        config = uvicorn.Config(self.app, host=host, port=port, log_level="warning", lifespan="off")
        self._server = uvicorn.Server(config)
        self._thread = threading.Thread(target=self._server.run, daemon=True)
        self.host = host
        self.port = port

    @property
    def base_url(self) -> str:
        return f"http://{self.host}:{self.port}/v1"

    @property
    def root_url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def start(self) -> "MockServer":
        self._thread.start()
        deadline = time.monotonic() + 10
        while not self._server.started:
            if time.monotonic() > deadline or not self._thread.is_alive():
                raise RuntimeError("mock server failed to start")
            time.sleep(0.01)
        self.port = self._server.servers[0].sockets[0].getsockname()[1]
        return self

    def stop(self) -> None:
        self._server.should_exit = True
        self._thread.join(timeout=10)

    def __enter__(self) -> "MockServer":
        return self.start()

    def __exit__(self, *exc) -> None:
        self.stop()
