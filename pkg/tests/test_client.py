import base64
import json

import httpx
import numpy as np
import pytest
from PIL import Image

from gazecxr.client import (
    TASK_LIMITS,
    AuthError,
    EndpointConfig,
    ExchangeCache,
    ExhaustedRetries,
    MissingImage,
    ServerError,
    Timeout,
    build_request,
    generate,
    payload_image,
    png_bytes,
    run_batch,
)
from gazecxr.tasks import ImageRefs, Report, build_err, build_gen, build_sum, inject_error


@pytest.fixture
def images(tmp_path):
    raw, overlay = tmp_path / "raw.png", tmp_path / "overlay.png"
    Image.fromarray(np.full((8, 8), 100, np.uint8)).save(raw)
    Image.fromarray(np.full((8, 8, 3), (200, 10, 10), np.uint8)).save(overlay)
    return ImageRefs(str(raw), str(overlay))


@pytest.fixture
def instances(images):
    r1 = Report("s1", "Small left pleural effusion. No pneumothorax.")
    r2 = Report("s2", "Mild cardiomegaly. Lungs are clear.", "Cardiomegaly.")
    return [build_gen(r1, images), build_sum(r2, images)]


def endpoint(**kw):
    kw.setdefault("base_url", "http://vlm.test/v1")
    kw.setdefault("backoff_initial", 0.0)
    return EndpointConfig(**kw)


def reply(text):
    return httpx.Response(200, json={"choices": [{"message": {"role": "assistant", "content": text}}]})


def client_for(handler):
    return httpx.Client(transport=httpx.MockTransport(handler))


def test_request_shape(instances, images):
    gen = build_request(instances[0], "no_gaze")
    assert gen["temperature"] == 0 and gen["max_tokens"] == 320 and gen["n"] == 1
    assert gen["stream"] is False
    (msg,) = gen["messages"]
    assert msg["role"] == "user"
    kinds = [p["type"] for p in msg["content"]]
    assert kinds.count("image_url") == 1 and kinds.count("text") == 1
    assert payload_image(gen) == open(images.raw, "rb").read()
    corrupted, injection = inject_error(Report("s3", "Left effusion is present."), seed=1, corrupt_probability=1.0)
    err_inst = build_err(corrupted, images, injection)
    assert build_request(err_inst, "gaze")["max_tokens"] == 64
    assert payload_image(build_request(err_inst, "gaze")) == open(images.overlay, "rb").read()


def test_request_uses_task_limits_for_every_kind():
    assert dict(TASK_LIMITS) == {"GEN": 320, "SUM": 128, "ERR": 64, "DDX": 192, "VQA": 64}
    with pytest.raises(TypeError):
        TASK_LIMITS["GEN"] = 1


def test_png_bytes(tmp_path):
    jpg = tmp_path / "x.jpg"
    Image.fromarray(np.zeros((4, 4), np.uint8)).save(jpg)
    assert png_bytes(jpg).startswith(b"\x89PNG")
    with pytest.raises(MissingImage):
        png_bytes(tmp_path / "nope.png")


def test_generate_echo(instances):
    ex = generate(build_request(instances[0], "no_gaze"), endpoint(), client_for(lambda r: reply("N  \n")),
                  instance_id="s1:GEN", condition="no_gaze")
    assert (ex.status, ex.response_text, ex.attempt_count) == ("success", "N", 1)
    assert ex.request["messages"][0]["content"][1]["image_url"]["url"].startswith("sha256:")
    assert "base64" not in json.dumps(ex.to_dict())


def test_generate_retries_then_succeeds(instances):
    calls, sleeps = [], []

    def handler(request):
        calls.append(1)
        return httpx.Response(500) if len(calls) <= 2 else reply("Y")

    ex = generate(build_request(instances[0], "gaze"), endpoint(max_retries=3, backoff_initial=0.5),
                  client_for(handler), sleep=sleeps.append)
    assert ex.attempt_count == 3 and ex.response_text == "Y"
    assert sleeps == [0.5, 1.0]


def test_generate_exhausts(instances):
    calls = []
    handler = lambda r: calls.append(1) or httpx.Response(503)
    with pytest.raises(ExhaustedRetries) as info:
        generate(build_request(instances[0], "gaze"), endpoint(max_retries=0), client_for(handler))
    assert info.value.attempts == 1 and len(calls) == 1


def test_generate_timeout_is_retried(instances):
    state = {"n": 0}

    def handler(request):
        state["n"] += 1
        if state["n"] == 1:
            raise httpx.ReadTimeout("slow", request=request)
        return reply("ok")

    assert generate(build_request(instances[0], "gaze"), endpoint(), client_for(handler)).attempt_count == 2
    with pytest.raises(ExhaustedRetries) as info:
        generate(build_request(instances[0], "gaze"), endpoint(max_retries=1),
                 client_for(lambda r: (_ for _ in ()).throw(httpx.ReadTimeout("slow", request=r))))
    assert isinstance(info.value.last, Timeout)


@pytest.mark.parametrize("status,exc", [(401, AuthError), (403, AuthError), (400, ServerError)])
def test_generate_no_retry_on_client_errors(instances, status, exc):
    calls = []
    with pytest.raises(exc):
        generate(build_request(instances[0], "gaze"), endpoint(max_retries=5),
                 client_for(lambda r: calls.append(1) or httpx.Response(status)))
    assert len(calls) == 1


def test_bearer_token_from_env(monkeypatch, instances):
    monkeypatch.setenv("MY_KEY", "s3cret")
    seen = []
    generate(build_request(instances[0], "gaze"), endpoint(token_env="MY_KEY"),
             client_for(lambda r: seen.append(r.headers.get("authorization")) or reply("x")))
    assert seen == ["Bearer s3cret"]


def counting_handler(calls):
    def handler(request):
        body = json.loads(request.content)
        img = base64.b64decode(body["messages"][0]["content"][1]["image_url"]["url"].split(",", 1)[1])
        calls.append(body)
        kind = "rgb" if Image.open(__import__("io").BytesIO(img)).mode == "RGB" else "gray"
        return reply(f"{body['max_tokens']}:{kind}")
    return handler


def test_run_batch_and_cache(tmp_path, instances):
    calls = []
    cache = ExchangeCache(tmp_path / "cache")
    out = run_batch(instances, ["no_gaze", "gaze"], endpoint(), cache, client_for(counting_handler(calls)))
    assert len(out) == 4 and len(calls) == 4 and len(cache) == 4
    assert [(e.instance_id, e.condition) for e in out] == [
        ("s1:GEN", "no_gaze"), ("s1:GEN", "gaze"), ("s2:SUM", "no_gaze"), ("s2:SUM", "gaze")]
    # no leakage: each condition saw its own image
    assert [e.response_text for e in out] == ["320:gray", "320:rgb", "128:gray", "128:rgb"]

    again = run_batch(instances, ["no_gaze", "gaze"], endpoint(), cache, client_for(counting_handler(calls)))
    assert len(calls) == 4
    assert all(e.cached for e in again)
    assert [e.response_text for e in again] == [e.response_text for e in out]


def test_run_batch_order_independent_of_concurrency(tmp_path, instances):
    many = instances * 5
    seq = run_batch(many, ["gaze", "no_gaze"], endpoint(), ExchangeCache(tmp_path / "a"),
                    client_for(counting_handler([])), max_workers=1)
    par = run_batch(many, ["gaze", "no_gaze"], endpoint(), ExchangeCache(tmp_path / "b"),
                    client_for(counting_handler([])), max_workers=8)
    strip = lambda xs: [(e.instance_id, e.condition, e.response_text, e.prompt_hash) for e in xs]
    assert strip(seq) == strip(par)


def test_run_batch_errors_are_records_and_not_cached(tmp_path, instances, images):
    broken = build_gen(Report("s9", "Clear lungs."), ImageRefs(str(tmp_path / "missing.png"), images.overlay))
    cache = ExchangeCache(tmp_path / "cache")
    out = run_batch([broken], ["no_gaze", "gaze"], endpoint(max_retries=0), cache,
                    client_for(lambda r: httpx.Response(500)))
    assert [e.status for e in out] == ["error", "error"]
    assert "MissingImage" in out[0].error and "ExhaustedRetries" in out[1].error
    assert len(cache) == 0


def test_cache_key_changes_with_image(tmp_path, instances, images):
    calls = []
    cache = ExchangeCache(tmp_path / "cache")
    run_batch(instances[:1], ["gaze"], endpoint(), cache, client_for(counting_handler(calls)))
    Image.fromarray(np.full((8, 8, 3), (0, 200, 0), np.uint8)).save(images.overlay)
    run_batch(instances[:1], ["gaze"], endpoint(), cache, client_for(counting_handler(calls)))
    assert len(calls) == 2 and len(cache) == 2


def test_unknown_condition(tmp_path, instances):
    with pytest.raises(ValueError):
        run_batch(instances, ["both"], endpoint(), ExchangeCache(tmp_path))
