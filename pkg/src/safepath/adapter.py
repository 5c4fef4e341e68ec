"""HTTP adapter for a logprob-exposing chat-completions endpoint.

The adapter is the only place that talks to the network. It implements the
scorer seam (``McqaInstance -> OptionScores``) and the external generation
backend. Every exchange can be recorded to a JSON-lines transcript and
replayed later, so tests and CI never need a live endpoint.

Extraction rule: only the first generated token position is read. A top-logprob
entry counts for option ``L`` when its token, stripped of whitespace, equals
``L`` exactly. Letters absent from the top list get ``min(observed) - 10``.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path

import httpx

from safepath.errors import AdapterError, BackendError
from safepath.generation import PromptBundle
from safepath.scoring import McqaInstance, OptionScores

API_KEY_ENV = "SAFEPATH_API_KEY"
FLOOR_GAP = 10.0
TOP_LOGPROBS_MARGIN = 2
_RETRY_STATUS = {408, 429, 500, 502, 503, 504}


@dataclass(frozen=True)
class BackendConfig:
    endpoint_url: str
    model_name: str
    top_logprobs: int = 10
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4
    backoff: float = 0.5
    api_key_env: str = API_KEY_ENV

    def __post_init__(self):
        if self.max_retries < 0 or self.max_in_flight < 1:
            raise ValueError("max_retries must be >= 0 and max_in_flight >= 1")


def request_key(body: dict) -> str:
    """Stable identity of a request body, used to match transcript entries."""
    blob = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


class RecordingTransport(httpx.BaseTransport):
    """Wraps a transport and appends each exchange to a JSON-lines file.

    Only the request body and response JSON are stored; headers (and with them
    the credential) never reach the transcript.
    """

    def __init__(self, inner: httpx.BaseTransport, path):
        self.inner = inner
        self.path = Path(path)
        self._lock = threading.Lock()

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        response = self.inner.handle_request(request)
        response.read()
        body = json.loads(request.content)
        entry = {"key": request_key(body), "request": body,
                 "status": response.status_code, "response": response.json()}
        with self._lock, self.path.open("a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return response


class ReplayTransport(httpx.BaseTransport):
    """Serves recorded responses keyed by request body; unknown requests fail."""

    def __init__(self, entries):
        self._by_key = {}
        for e in entries:
            self._by_key.setdefault(e["key"], []).append(e)
        self._used = {}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path) -> "ReplayTransport":
        with open(path) as fh:
            return cls([json.loads(line) for line in fh if line.strip()])

    def handle_request(self, request: httpx.Request) -> httpx.Response:
        key = request_key(json.loads(request.content))
        with self._lock:
            entries = self._by_key.get(key)
            if not entries:
                raise httpx.ConnectError("no recorded response for this request", request=request)
            # repeated identical requests walk through their recordings, then stick on the last
            i = self._used.get(key, 0)
            self._used[key] = i + 1
            entry = entries[min(i, len(entries) - 1)]
        return httpx.Response(entry["status"], json=entry["response"], request=request)


def extract_option_logits(response: dict, labels) -> dict[str, float]:
    """Option-letter logits from the first token position of a completion."""
    try:
        first = response["choices"][0]["logprobs"]["content"][0]
        top = first["top_logprobs"]
    except (KeyError, IndexError, TypeError) as exc:
        raise AdapterError(f"response carries no first-token logprobs: {exc!r}",
                           raw_tokens=json.dumps(response, sort_keys=True)) from exc
    wanted = set(labels)
    found: dict[str, float] = {}
    for entry in top:
        tok = str(entry.get("token", "")).strip()
        if tok in wanted:
            lp = float(entry["logprob"])
            # " A" and "A" both map to A; keep the larger
            found[tok] = max(found.get(tok, lp), lp)
    if not found:
        dump = [(e.get("token"), e.get("logprob")) for e in top]
        raise AdapterError(f"no option letter among top logprobs {dump!r}", raw_tokens=dump)
    floor = min(found.values()) - FLOOR_GAP
    return {lab: found.get(lab, floor) for lab in labels}


class LLMAdapter:
    """Scorer and generation backend over one chat-completions endpoint."""

    def __init__(self, cfg: BackendConfig, transport: httpx.BaseTransport | None = None,
                 sleep=time.sleep):
        self.cfg = cfg
        self._transport = transport
        self._sleep = sleep
        self._gate = threading.BoundedSemaphore(cfg.max_in_flight)

    def _headers(self) -> dict:
        key = os.environ.get(self.cfg.api_key_env)
        if not key:
            raise BackendError(f"credential missing: set the {self.cfg.api_key_env} "
                               "environment variable")
        return {"Authorization": f"Bearer {key}", "Content-Type": "application/json"}

    def post(self, body: dict) -> dict:
        headers = self._headers()
        last = None
        with self._gate, httpx.Client(transport=self._transport, timeout=self.cfg.timeout) as client:
            for attempt in range(self.cfg.max_retries + 1):
                if attempt:
                    self._sleep(self.cfg.backoff * 2 ** (attempt - 1))
                try:
                    resp = client.post(self.cfg.endpoint_url, json=body, headers=headers)
                except httpx.TransportError as exc:
                    last = f"{type(exc).__name__}: {exc}"
                    continue
                if resp.status_code in _RETRY_STATUS:
                    last = f"HTTP {resp.status_code}"
                    continue
                if resp.status_code >= 400:
                    raise BackendError(f"HTTP {resp.status_code} from endpoint")
                try:
                    return resp.json()
                except ValueError as exc:
                    raise BackendError("endpoint returned non-JSON body") from exc
        raise BackendError(f"endpoint failed after {self.cfg.max_retries + 1} attempts: {last}")

    def scoring_body(self, instance: McqaInstance) -> dict:
        return {
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": instance.prompt}],
            "max_tokens": 1,
            "temperature": 0,
            "logprobs": True,
            "top_logprobs": max(self.cfg.top_logprobs, len(instance.options) + TOP_LOGPROBS_MARGIN),
        }

    def score(self, instance: McqaInstance) -> OptionScores:
        response = self.post(self.scoring_body(instance))
        return OptionScores.from_logits(extract_option_logits(response, instance.labels))

    __call__ = score

    def complete(self, bundle: PromptBundle) -> str:
        """Raw completion text; plugs into ``generate_candidates`` as its backend."""
        body = {"model": self.cfg.model_name, "messages": bundle.messages(), "temperature": 0}
        response = self.post(body)
        try:
            return response["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as exc:
            raise BackendError("completion carries no message content") from exc


def llm_adapter_score(instance: McqaInstance, cfg: BackendConfig,
                      transport: httpx.BaseTransport | None = None) -> OptionScores:
    return LLMAdapter(cfg, transport).score(instance)

