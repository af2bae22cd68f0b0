import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from rlvlm import textenc
from rlvlm.gateway import (
    BackendError,
    Gateway,
    ModelEndpoint,
    ProtocolError,
    TransportError,
    caption,
    embed,
    image_digest,
    mock_caption,
)


class FakeBackend(BaseHTTPRequestHandler):
    """Scripted responses keyed by route; records every request it sees."""

    script: dict = {}
    seen: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).seen.append((self.path, body, self.headers.get("Authorization")))
        queue = type(self).script[self.path]
        status, payload = queue.pop(0) if len(queue) > 1 else queue[0]
        data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    FakeBackend.script, FakeBackend.seen = {}, []
    srv = ThreadingHTTPServer(("127.0.0.1", 0), FakeBackend)
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    yield srv, f"http://127.0.0.1:{srv.server_address[1]}"
    srv.shutdown()
    srv.server_close()


def remote(url, **kw):
    return ModelEndpoint(kind="remote", base_url=url, timeout_ms=2000, retries=kw.pop("retries", 2), seed=None, **kw)


class TestEndpoint:
    def test_validation(self):
        with pytest.raises(ValueError):
            ModelEndpoint(timeout_ms=0)
        with pytest.raises(ValueError):
            ModelEndpoint(kind="mock", seed=None)
        with pytest.raises(ValueError):
            ModelEndpoint(kind="remote")
        with pytest.raises(ValueError):
            ModelEndpoint(kind="grpc")

    def test_from_dict_ignores_unknown(self):
        ep = ModelEndpoint.from_dict({"kind": "mock", "seed": 3, "colour": "red"})
        assert ep.seed == 3


class TestMock:
    def test_deterministic(self, images):
        a = caption(images[0], "Describe the vehicles.", ModelEndpoint(seed=5))
        b = caption(images[0], "Describe the vehicles.", ModelEndpoint(seed=5))
        assert a.caption == b.caption and a.caption.strip()
        assert a.image_digest == image_digest(images[0]) and a.backend == "mock"

    def test_prompt_conditions_caption(self, images):
        base = mock_caption(images[0], "Describe the scene.", 42)
        detailed = mock_caption(images[0], "Describe the vehicles and the weather conditions.", 42)
        assert detailed.startswith(base) and len(detailed) > len(base)

    def test_image_changes_caption(self, images):
        caps = {mock_caption(img, "Describe the vehicles and the road layout.", 42) for img in images}
        assert len(caps) == len(images)

    def test_empty_image(self):
        with pytest.raises(ValueError):
            caption(b"", "x", ModelEndpoint())

    def test_embed_delegates(self):
        text = "a bus waits at the lights"
        v = embed(text, ModelEndpoint(seed=42))
        assert v.tobytes() == textenc.encode_text(text, textenc.init_weights(42)).tobytes()

    def test_gateway_memoizes(self, images):
        gw = Gateway()
        assert gw.caption(images[1], "p") is gw.caption(images[1], "p")
        assert gw.embed("a car") is gw("a car")
        assert gw.dim == 64


class TestRemote:
    def test_caption_round_trip(self, server, images):
        _, url = server
        FakeBackend.script["/caption"] = [(200, {"caption": "a grey truck"})]
        rec = caption(images[0], "Describe.", remote(url, token="s3cret"))
        assert rec.caption == "a grey truck" and rec.backend == "remote"
        route, body, auth = FakeBackend.seen[0]
        assert route == "/caption" and body["prompt"] == "Describe."
        assert auth == "Bearer s3cret"

    def test_missing_caption_field(self, server, images):
        _, url = server
        FakeBackend.script["/caption"] = [(200, {"text": "x"})]
        with pytest.raises(ProtocolError) as info:
            caption(images[0], "p", remote(url))
        assert info.value.stage == "caption"

    def test_non_json(self, server, images):
        _, url = server
        FakeBackend.script["/caption"] = [(200, b"<html>")]
        with pytest.raises(ProtocolError):
            caption(images[0], "p", remote(url))

    def test_empty_caption(self, server, images):
        _, url = server
        FakeBackend.script["/caption"] = [(200, {"caption": "  "})]
        with pytest.raises(BackendError):
            caption(images[0], "p", remote(url))

    def test_client_error_not_retried(self, server, images):
        _, url = server
        FakeBackend.script["/caption"] = [(400, {"error": "bad image"})]
        with pytest.raises(BackendError, match="bad image"):
            caption(images[0], "p", remote(url, retries=3))
        assert len(FakeBackend.seen) == 1

    def test_server_error_retried(self, server, images):
        _, url = server
        FakeBackend.script["/caption"] = [(503, {"error": "busy"}), (200, {"caption": "ok"})]
        assert caption(images[0], "p", remote(url, retries=2)).caption == "ok"
        assert len(FakeBackend.seen) == 2

    def test_unreachable(self, images):
        ep = ModelEndpoint(kind="remote", base_url="http://127.0.0.1:9", timeout_ms=200, retries=2, seed=None)
        start = time.perf_counter()
        with pytest.raises(TransportError) as info:
            caption(images[0], "p", ep)
        assert info.value.stage == "caption" and "caption" in str(info.value)
        assert time.perf_counter() - start <= 2 * 0.2 + 1.0

    def test_embed_normalized(self, server):
        _, url = server
        FakeBackend.script["/embed"] = [(200, {"vector": [3.0, 4.0] + [0.0] * 62})]
        v = embed("a car", remote(url))
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-12)
        assert v[:2].tolist() == pytest.approx([0.6, 0.8])

    def test_embed_wrong_length(self, server):
        _, url = server
        FakeBackend.script["/embed"] = [(200, {"vector": [1.0, 2.0]})]
        with pytest.raises(ProtocolError, match="expected 64"):
            embed("a car", remote(url))

    def test_embed_zero_vector(self, server):
        _, url = server
        FakeBackend.script["/embed"] = [(200, {"vector": [0.0] * 64})]
        with pytest.raises(ProtocolError):
            embed("a car", remote(url))
