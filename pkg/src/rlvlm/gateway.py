"""Caption and embedding services behind one interface.

Remote backends speak JSON over HTTP::

    POST {base}/caption   {"image_b64": str, "prompt": str}  -> {"caption": str}
    POST {base}/embed     {"text": str}                      -> {"vector": [float, ...]}

Non-2xx responses carry ``{"error": str}``. Mock backends are deterministic
functions of their inputs and a seed, so whole pipeline runs reproduce
offline. The mock captioner is test scaffolding: it fills templates from a
fixed vocabulary and makes no claim to describe the image.
"""

from __future__ import annotations

import base64
import hashlib
import json
import random
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import numpy as np

from . import textenc

REMOTE = "remote"
MOCK = "mock"


class GatewayError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


class TransportError(GatewayError):
    pass


class ProtocolError(GatewayError):
    pass


class BackendError(GatewayError):
    pass


@dataclass(frozen=True)
class ModelEndpoint:
    kind: str = MOCK
    base_url: str = ""
    timeout_ms: int = 10_000
    retries: int = 3  # total attempts
    seed: int | None = 42
    token: str | None = None
    dim: int = textenc.D_MODEL

    def __post_init__(self):
        if self.kind not in (MOCK, REMOTE):
            raise ValueError(f"unknown backend kind {self.kind!r}")
        if self.timeout_ms <= 0:
            raise ValueError("timeout_ms must be positive")
        if self.retries < 1:
            raise ValueError("retries must be at least 1")
        if self.kind == MOCK and self.seed is None:
            raise ValueError("mock backend requires a seed")
        if self.kind == REMOTE and not self.base_url:
            raise ValueError("remote backend requires a base_url")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelEndpoint":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class CaptionRecord:
    image_digest: str
    prompt: str
    caption: str
    backend: str
    latency_ms: float


def image_digest(image: bytes) -> str:
    return hashlib.sha256(image).hexdigest()


# -- remote ----------------------------------------------------------------------


def _post_json(endpoint: ModelEndpoint, route: str, payload: dict, stage: str) -> dict:
    url = endpoint.base_url.rstrip("/") + route
    body = json.dumps(payload).encode("utf-8")
    headers = {"Content-Type": "application/json", "Accept": "application/json"}
    if endpoint.token:
        headers["Authorization"] = f"Bearer {endpoint.token}"
    last_exc: Exception | None = None
    for _ in range(endpoint.retries):
        req = urllib.request.Request(url, data=body, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=endpoint.timeout_ms / 1000) as resp:
                raw = resp.read()
            break
        except urllib.error.HTTPError as exc:
            message = _error_message(exc)
            if exc.code >= 500:
                last_exc = BackendError(stage, f"HTTP {exc.code}: {message}")
                continue
            raise BackendError(stage, f"HTTP {exc.code}: {message}") from exc
        except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
            last_exc = exc
    else:
        if isinstance(last_exc, GatewayError):
            raise last_exc
        raise TransportError(
            stage, f"{url} unreachable after {endpoint.retries} attempt(s): {last_exc}"
        ) from last_exc
    try:
        doc = json.loads(raw)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ProtocolError(stage, f"response is not JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ProtocolError(stage, "response is not a JSON object")
    return doc


def _error_message(exc: urllib.error.HTTPError) -> str:
    try:
        return str(json.loads(exc.read())["error"])
    except Exception:
        return exc.reason if isinstance(exc.reason, str) else "request failed"


def _remote_caption(image: bytes, prompt: str, endpoint: ModelEndpoint) -> str:
    doc = _post_json(
        endpoint,
        "/caption",
        {"image_b64": base64.b64encode(image).decode("ascii"), "prompt": prompt},
        "caption",
    )
    if "caption" not in doc or not isinstance(doc["caption"], str):
        raise ProtocolError("caption", "response missing string field 'caption'")
    return doc["caption"]


def _remote_embed(text: str, endpoint: ModelEndpoint) -> np.ndarray:
    doc = _post_json(endpoint, "/embed", {"text": text}, "embed")
    vec = doc.get("vector")
    if not isinstance(vec, list) or not all(isinstance(x, (int, float)) for x in vec):
        raise ProtocolError("embed", "response missing numeric list field 'vector'")
    if len(vec) != endpoint.dim:
        raise ProtocolError("embed", f"vector has {len(vec)} components, expected {endpoint.dim}")
    return np.array(vec, dtype=float)


# -- mock ------------------------------------------------------------------------


@lru_cache(maxsize=1)
def _vocab() -> dict:
    return json.loads(resources.files("rlvlm").joinpath("data/captioner_vocab.json").read_text("utf-8"))


def _rng(*parts: object) -> random.Random:
    h = hashlib.blake2b(digest_size=16)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return random.Random(int.from_bytes(h.digest(), "little"))


def _scene(digest: str, seed: int) -> dict:
    """Objects 'detected' in an image: a fixed function of its digest."""
    v = _vocab()
    rng = _rng("scene", digest, seed)
    vehicles = [(rng.choice(v["colors"]), rng.choice(v["vehicles"])) for _ in range(rng.randint(1, 3))]
    people = [(rng.choice(v["people"]), rng.choice(v["people_actions"])) for _ in range(rng.randint(0, 2))]
    return {
        "vehicles": vehicles,
        "motion": rng.choice(v["motion"]),
        "people": people,
        "behaviour": rng.choice(v["driver_behaviour"]),
        "road": rng.choice(v["roads"]),
        "furniture": rng.sample(v["furniture"], 2),
        "weather": rng.choice(v["weather"]),
        "lighting": rng.choice(v["lighting"]),
        "surface": rng.choice(v["surface"]),
    }


def _prompt_topics(prompt: str) -> list[str]:
    words = set(textenc.tokenize(prompt))
    return [topic for topic, keys in _vocab()["topics"].items() if words & set(keys)]


def _article(word: str) -> str:
    return "an" if word[0] in "aeiou" else "a"


def mock_caption(image: bytes, prompt: str, seed: int) -> str:
    digest = image_digest(image)
    sc = _scene(digest, seed)
    rng = _rng("phrase", digest, prompt, seed)
    color, kind = sc["vehicles"][0]
    parts = [
        f"{_article(color).capitalize()} {color} {kind} is {sc['motion']} at {_article(sc['road'])} "
        f"{sc['road']} {sc['lighting']}."
    ]
    for topic in _prompt_topics(prompt):
        if topic == "vehicles":
            listed = ", ".join(f"{_article(c)} {c} {k}" for c, k in sc["vehicles"])
            parts.append(f"The visible vehicles are {listed}, which occupy the {sc['road']}.")
        elif topic == "people":
            if sc["people"]:
                listed = " and ".join(f"{_article(p)} {p} {act}" for p, act in sc["people"])
                parts.append(f"There is {listed}.")
            else:
                parts.append("No pedestrians or cyclists are visible near the road.")
        elif topic == "behaviour":
            parts.append(f"The driver of the {kind} {sc['behaviour']} while the vehicle is {sc['motion']}.")
        elif topic == "road":
            a, b = sc["furniture"]
            parts.append(f"The {sc['road']} has {_article(a)} {a} and {_article(b)} {b} where the lanes meet.")
        elif topic == "conditions":
            adverb = rng.choice(["clearly", "partially", "mostly"])
            parts.append(
                f"The weather is {sc['weather']} and the road surface is {sc['surface']}, "
                f"which {adverb} affects visibility."
            )
    return " ".join(parts)


# -- public API --------------------------------------------------------------------


def caption(image: bytes, prompt: str, endpoint: ModelEndpoint) -> CaptionRecord:
    if not image:
        raise ValueError("image is empty")
    start = time.perf_counter()
    if endpoint.kind == MOCK:
        text = mock_caption(image, prompt, endpoint.seed)
    else:
        text = _remote_caption(image, prompt, endpoint)
    if not text.strip():
        raise BackendError("caption", "backend returned an empty caption")
    latency = (time.perf_counter() - start) * 1000.0
    return CaptionRecord(image_digest(image), prompt, text, endpoint.kind, latency)


def embed(text: str, endpoint: ModelEndpoint) -> np.ndarray:
    """Unit-norm embedding of ``text`` whatever the backend returns."""
    if not text or not text.strip():
        raise ValueError("text is empty")
    if endpoint.kind == MOCK:
        # already unit-norm; returned untouched so it matches encode_text bit for bit
        return textenc.encode_text(text, textenc.default_weights(endpoint.seed))
    vec = _remote_embed(text, endpoint)
    if not np.all(np.isfinite(vec)):
        raise ProtocolError("embed", "vector has non-finite components")
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        raise ProtocolError("embed", "vector is all zeros")
    return vec / norm


class Gateway:
    """Caption and embedding endpoints with per-instance memoization.

    Each distinct (image, prompt) pair is captioned once and each distinct
    text embedded once for the lifetime of the instance.
    """

    def __init__(self, caption_endpoint: ModelEndpoint | None = None, embed_endpoint: ModelEndpoint | None = None):
        self.caption_endpoint = caption_endpoint or ModelEndpoint()
        self.embed_endpoint = embed_endpoint or ModelEndpoint()
        self._captions: dict[tuple[str, str], CaptionRecord] = {}
        self._vectors: dict[str, np.ndarray] = {}
        self._lock = threading.Lock()

    def caption(self, image: bytes, prompt: str) -> CaptionRecord:
        key = (image_digest(image), prompt)
        with self._lock:
            hit = self._captions.get(key)
        if hit is None:
            hit = caption(image, prompt, self.caption_endpoint)
            with self._lock:
                hit = self._captions.setdefault(key, hit)
        return hit

    def embed(self, text: str) -> np.ndarray:
        with self._lock:
            hit = self._vectors.get(text)
        if hit is None:
            hit = embed(text, self.embed_endpoint)
            hit.setflags(write=False)
            with self._lock:
                hit = self._vectors.setdefault(text, hit)
        return hit

    __call__ = embed

    @property
    def dim(self) -> int:
        return self.embed_endpoint.dim
