"""Caption improvement + visual grounding through an external vision-language service.

The service receives the image, the original caption and an instruction to
write a detailed paragraph caption with pixel bounding boxes for the objects
it mentions.  Responses are parsed into :class:`GroundedCaption` objects and
every box is validated against the image size.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import logging
import os
import random
import re
import threading
import time
import urllib.error
import urllib.request
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from flavars.datapipe.records import GroundedCaption, Grounding, SampleRecord, bbox_problem
from flavars.errors import CredentialError, GroundingError, GroundingParseError, GroundingValidationError

log = logging.getLogger(__name__)

API_KEY_ENV = "FLAVARS_VLM_API_KEY"
PROMPT_VERSION = 1

# Our own wording; no reference prompt text exists to copy.
INSTRUCTION = (
    "Image size: {width}x{height} pixels (overhead view). The short caption below was built from map "
    "tags and may be terse or incomplete. Look at the image and rewrite the caption as several full "
    "sentences covering what is visible. For every object your new caption names, return one entry with "
    "the exact phrase and an integer pixel box [x_min, y_min, x_max, y_max] where "
    "0 <= x_min < x_max <= {width} and 0 <= y_min < y_max <= {height}. "
    "Answer with a single JSON object that follows the response schema and nothing else."
)

RESPONSE_SCHEMA = {
    "type": "object",
    "required": ["caption", "groundings"],
    "properties": {
        "caption": {"type": "string"},
        "groundings": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["phrase", "bbox"],
                "properties": {
                    "phrase": {"type": "string"},
                    "bbox": {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4},
                },
            },
        },
    },
}


def _png_b64(image: np.ndarray) -> str:
    arr = np.asarray(image, dtype=np.uint8)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def build_grounding_request(record: SampleRecord) -> dict:
    height, width = int(record.image.shape[0]), int(record.image.shape[1])
    return {
        "prompt_version": PROMPT_VERSION,
        "record_id": record.id,
        "instruction": INSTRUCTION.format(width=width, height=height),
        "original_caption": record.caption,
        "image": {"width": width, "height": height, "format": "png", "data": _png_b64(record.image)},
        "response_schema": RESPONSE_SCHEMA,
    }


def prompt_fingerprint(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


_FENCE_RE = re.compile(r"^\s*```(?:json)?\s*(.*?)\s*```\s*$", re.DOTALL)


def _number(value, phrase) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise GroundingParseError(f"bbox for {phrase!r} holds a non-number: {value!r}")
    try:
        return float(value)
    except OverflowError:
        raise GroundingParseError(f"bbox for {phrase!r} holds an out-of-range number") from None


def parse_grounded_response(text: str, width: int, height: int) -> GroundedCaption:
    """Parse a service reply; raises GroundingParseError or GroundingValidationError.

    A single bad box rejects the whole grounding list.  The validation error
    carries the improved caption with no groundings and a warning set.
    """
    if not isinstance(text, str):
        raise GroundingParseError(f"response must be text, got {type(text).__name__}")
    fenced = _FENCE_RE.match(text)
    body = fenced.group(1) if fenced else text
    try:
        data = json.loads(body)
    except (json.JSONDecodeError, RecursionError) as exc:
        raise GroundingParseError(f"response is not valid JSON: {exc}") from None
    if not isinstance(data, dict):
        raise GroundingParseError("response must be a JSON object")
    caption = data.get("caption")
    if not isinstance(caption, str) or not caption.strip():
        raise GroundingParseError("missing or empty 'caption'")
    raw = data.get("groundings")
    if not isinstance(raw, list):
        raise GroundingParseError("'groundings' must be a list")

    groundings = []
    for item in raw:
        if not isinstance(item, dict):
            raise GroundingParseError("each grounding must be an object")
        phrase = item.get("phrase")
        bbox = item.get("bbox")
        if not isinstance(phrase, str):
            raise GroundingParseError("grounding 'phrase' must be a string")
        if not isinstance(bbox, list) or len(bbox) != 4:
            raise GroundingParseError(f"bbox for {phrase!r} must be a list of four numbers")
        groundings.append((phrase, tuple(_number(v, phrase) for v in bbox)))

    for phrase, bbox in groundings:
        reason = bbox_problem(phrase, bbox, width, height)
        if reason:
            retained = GroundedCaption(caption, (), warning=f"groundings rejected: {phrase!r}: {reason}")
            raise GroundingValidationError(phrase, reason, retained)
    return GroundedCaption(caption, tuple(Grounding(p, b) for p, b in groundings))


# ---------------------------------------------------------------------------
# transport and client
# ---------------------------------------------------------------------------


class TransportError(Exception):
    def __init__(self, message: str, retryable: bool = True):
        super().__init__(message)
        self.retryable = retryable


Transport = Callable[[dict], str]


class HttpTransport:
    """POSTs the payload as JSON; accepts ``{"output": text}`` or a raw text body."""

    def __init__(self, endpoint: str, api_key: str, timeout: float = 60.0):
        self.endpoint = endpoint
        self.api_key = api_key
        self.timeout = timeout

    def __call__(self, payload: dict) -> str:
        req = urllib.request.Request(
            self.endpoint,
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json", "Authorization": f"Bearer {self.api_key}"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = resp.read().decode("utf-8")
        except urllib.error.HTTPError as exc:
            raise TransportError(f"HTTP {exc.code}", retryable=exc.code == 429 or exc.code >= 500) from None
        except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
            raise TransportError(str(exc)) from None
        try:
            data = json.loads(body)
        except json.JSONDecodeError:
            return body
        if isinstance(data, dict) and isinstance(data.get("output"), str):
            return data["output"]
        return body


class MockTransport:
    """Offline stand-in that answers with one centred box naming the original caption."""

    def __init__(self):
        self.calls = 0

    def __call__(self, payload: dict) -> str:
        self.calls += 1
        w, h = payload["image"]["width"], payload["image"]["height"]
        caption = payload["original_caption"]
        box = [w // 4, h // 4, max(w // 4 + 1, 3 * w // 4), max(h // 4 + 1, 3 * h // 4)]
        return json.dumps(
            {
                "caption": f"An overhead image. {caption}".strip(),
                "groundings": [{"phrase": caption or "scene", "bbox": box}],
            }
        )


@dataclass
class ClientConfig:
    endpoint: str = ""
    api_key_env: str = API_KEY_ENV
    max_attempts: int = 5
    base_delay: float = 0.5
    max_delay: float = 8.0
    jitter: float = 0.5
    max_in_flight: int = 4
    timeout: float = 60.0
    cache_dir: str | None = None
    seed: int = 0


class ResponseCache:
    """One JSON file per (record id, prompt fingerprint); writes are serialised."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, record_id: str, fingerprint: str) -> Path:
        key = hashlib.sha256(f"{record_id}\0{fingerprint}".encode("utf-8")).hexdigest()
        return self.root / f"{key}.json"

    def get(self, record_id: str, fingerprint: str) -> str | None:
        path = self._path(record_id, fingerprint)
        if not path.is_file():
            return None
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            return None
        if entry.get("record_id") != record_id or entry.get("prompt_fingerprint") != fingerprint:
            return None
        return entry.get("response")

    def put(self, record_id: str, fingerprint: str, response: str) -> None:
        path = self._path(record_id, fingerprint)
        entry = {"record_id": record_id, "prompt_fingerprint": fingerprint, "response": response}
        with self._lock:
            tmp = path.with_suffix(".tmp")
            tmp.write_text(json.dumps(entry), encoding="utf-8")
            os.replace(tmp, path)


class VLMClient:
    def __init__(self, config: ClientConfig, transport: Transport | None = None, sleep: Callable[[float], None] = time.sleep):
        self.config = config
        if transport is None:
            key = os.environ.get(config.api_key_env)
            if not key:
                raise CredentialError(f"environment variable {config.api_key_env} is not set")
            if not config.endpoint:
                raise CredentialError("no VLM endpoint configured")
            transport = HttpTransport(config.endpoint, key, config.timeout)
        self.transport = transport
        self.sleep = sleep

    def backoff(self, attempt: int, rng: random.Random) -> float:
        base = min(self.config.max_delay, self.config.base_delay * 2 ** (attempt - 1))
        return base * (1.0 + self.config.jitter * rng.random())

    def call(self, payload: dict, rng: random.Random) -> tuple[str, int]:
        """Returns ``(response, attempts)``; raises the last TransportError on exhaustion."""
        attempt = 0
        while True:
            attempt += 1
            try:
                return self.transport(payload), attempt
            except TransportError as exc:
                log.warning("record %s attempt %d failed: %s", payload.get("record_id"), attempt, exc)
                if not exc.retryable or attempt >= self.config.max_attempts:
                    exc.attempts = attempt
                    raise
                self.sleep(self.backoff(attempt, rng))


@dataclass
class RecordStatus:
    id: str
    status: str  # ok | warning | failed | skipped
    attempts: int = 0
    cached: bool = False
    error: str | None = None


@dataclass
class BatchReport:
    statuses: list[RecordStatus] = field(default_factory=list)

    @property
    def network_calls(self) -> int:
        return sum(s.attempts for s in self.statuses)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for s in self.statuses:
            out[s.status] = out.get(s.status, 0) + 1
        return out


def _has_valid_grounding(rec: SampleRecord) -> bool:
    if rec.grounded is None or rec.grounded.warning:
        return False
    h, w = rec.image.shape[:2]
    return all(bbox_problem(g.phrase, g.bbox, w, h) is None for g in rec.grounded.groundings)


def caption_ground_batch(
    records: Sequence[SampleRecord],
    config: ClientConfig,
    transport: Transport | None = None,
    force: bool = False,
    sleep: Callable[[float], None] = time.sleep,
) -> tuple[list[SampleRecord], BatchReport]:
    """Ground every record, tolerating per-record failures.

    Records that already carry a valid grounded caption are left alone
    unless ``force`` is set.  Raw responses are cached on disk, so a re-run
    of a finished batch makes no service calls.
    """
    client = VLMClient(config, transport, sleep)
    cache = ResponseCache(config.cache_dir) if config.cache_dir else None

    def work(rec: SampleRecord) -> tuple[SampleRecord, RecordStatus]:
        if not force and _has_valid_grounding(rec):
            return rec, RecordStatus(rec.id, "skipped")
        payload = build_grounding_request(rec)
        fp = prompt_fingerprint(payload)
        response = cache.get(rec.id, fp) if cache else None
        attempts, cached = 0, response is not None
        if response is None:
            rng = random.Random(f"{config.seed}:{rec.id}")
            try:
                response, attempts = client.call(payload, rng)
            except TransportError as exc:
                return rec, RecordStatus(rec.id, "failed", getattr(exc, "attempts", 0), False, str(exc))
            if cache:
                cache.put(rec.id, fp, response)
        h, w = rec.image.shape[:2]
        try:
            grounded = parse_grounded_response(response, w, h)
        except GroundingValidationError as exc:
            return replace(rec, grounded=exc.retained), RecordStatus(rec.id, "warning", attempts, cached, str(exc))
        except GroundingError as exc:
            return rec, RecordStatus(rec.id, "failed", attempts, cached, str(exc))
        return replace(rec, grounded=grounded), RecordStatus(rec.id, "ok", attempts, cached)

    with ThreadPoolExecutor(max_workers=max(1, config.max_in_flight)) as pool:
        results = list(pool.map(work, records))
    return [r for r, _ in results], BatchReport([s for _, s in results])
