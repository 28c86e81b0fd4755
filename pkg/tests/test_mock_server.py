import hashlib

import httpx
import numpy as np
import pytest
from fastapi.testclient import TestClient

from gazecxr.client import EndpointConfig, build_request, generate, prompt_hash
from gazecxr.mock_server import MockServer, canned_response, create_app, trigram_embedding
from gazecxr.tasks import ImageRefs, Report, build_gen


@pytest.fixture
def instance(tmp_path):
    from PIL import Image

    p = tmp_path / "a.png"
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(p)
    return build_gen(Report("s1", "Clear lungs."), ImageRefs(str(p), str(p)))


def test_health_ner_embed():
    c = TestClient(create_app())
    assert c.get("/health").json() == {"status": "ok"}
    spans = c.post("/ner", json={"text": "pneumonia and pleural effusion"}).json()["spans"]
    assert [s["surface"] for s in spans] == ["pneumonia", "pleural effusion"]
    vecs = c.post("/embed", json={"texts": ["edema", "edema", "nodule"]}).json()["vectors"]
    assert vecs[0] == vecs[1] and len(vecs) == 3
    assert np.linalg.norm(vecs[2]) == pytest.approx(1.0)
    assert trigram_embedding("x") == trigram_embedding("x")


def test_canned_and_fixture_lookup(instance):
    payload = build_request(instance, "no_gaze", model_name="m")
    assert canned_response(payload)
    digest = hashlib.sha256(open(instance.image_ref, "rb").read()).hexdigest()
    key = prompt_hash(instance.prompt, digest)
    c = TestClient(create_app({key: "fixture text"}))
    body = c.post("/v1/chat/completions", json=payload).json()
    assert body["choices"][0]["message"]["content"] == "fixture text"
    text_key = hashlib.sha256(instance.prompt.encode()).hexdigest()
    c = TestClient(create_app({text_key: "by prompt"}))
    assert c.post("/v1/chat/completions", json=payload).json()["choices"][0]["message"]["content"] == "by prompt"


def test_token_and_injected_failures(instance):
    payload = build_request(instance, "gaze")
    c = TestClient(create_app(required_token="t0k"))
    assert c.post("/v1/chat/completions", json=payload).status_code == 401
    assert c.post("/v1/chat/completions", json=payload, headers={"Authorization": "Bearer t0k"}).status_code == 200
    app = create_app(fail_first=2)
    c = TestClient(app)
    assert [c.post("/v1/chat/completions", json=payload).status_code for _ in range(3)] == [500, 500, 200]
    assert len(app.state.requests) == 3


def test_live_server_with_generate(instance):
    with MockServer(create_app(fail_first=1)) as server:
        ep = EndpointConfig(base_url=server.base_url, backoff_initial=0.0)
        ex = generate(build_request(instance, "gaze"), ep)
        assert ex.status == "success" and ex.attempt_count == 2
        assert httpx.get(server.root_url + "/health").status_code == 200
