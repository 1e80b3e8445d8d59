"""Provider-agnostic LLM access: template registry, structured replies, mock/replay/live backends."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import deque
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional

import jsonschema

logger = logging.getLogger(__name__)

API_KEY_ENV = "RECEVO_API_KEY"
DEFAULT_BASE_URL = "https://api.openai.com/v1"
DEFAULT_MODEL = "gpt-5-mini"

_PLACEHOLDER = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


class GatewayError(RuntimeError):
    """Transport-level failure after retries."""


class ParseError(ValueError):
    def __init__(self, message: str, raw: str):
        super().__init__(message)
        self.raw = raw


class MockMissError(KeyError):
    def __init__(self, instruction_id: str, state_key: str):
        super().__init__(f"no scripted reply for ({instruction_id!r}, {state_key!r})")
        self.instruction_id = instruction_id
        self.state_key = state_key

    def __str__(self):
        return self.args[0]


class ReplayMismatch(GatewayError):
    pass


# --------------------------------------------------------------------------
# templates

_TAGS = ["category_mismatch", "popularity_bias", "low_diversity", "recency_ignored", "price_mismatch", "other"]

_QUERY_LIST = {
    "type": "object",
    "required": ["queries"],
    "properties": {
        "queries": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["text"],
                "properties": {"text": {"type": "string", "minLength": 1}, "motivation": {"type": "string"}},
            },
        }
    },
}

_DEV_REPORT = {
    "type": "object",
    "required": ["modifications"],
    "properties": {
        "summary": {"type": "string"},
        "modifications": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["target", "change"],
                "properties": {
                    "target": {"type": "string"},
                    "change": {"type": "string"},
                    "expected_effect": {"type": "string"},
                    "addresses": {"type": "array", "items": {"type": "string"}},
                    "exploratory": {"type": "boolean"},
                },
            },
        },
        "citations": {"type": "array", "items": {"type": "string"}},
    },
}

SCHEMAS: Dict[str, dict] = {
    "critique": {
        "type": "object",
        "required": ["verdicts", "failure_tags"],
        "properties": {
            "verdicts": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["item", "accept"],
                    "properties": {
                        "item": {"type": "string"},
                        "accept": {"type": "boolean"},
                        "reason": {"type": "string"},
                    },
                },
            },
            "failure_tags": {"type": "array", "items": {"enum": _TAGS}},
            "critique": {"type": "string"},
        },
    },
    "query_list": _QUERY_LIST,
    "dev_report": _DEV_REPORT,
    "code_edits": {
        "type": "object",
        "required": ["edits"],
        "properties": {
            "summary": {"type": "string"},
            "edits": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["path", "content"],
                    "properties": {"path": {"type": "string"}, "content": {"type": "string"}},
                },
            },
        },
    },
    "structural_analysis": {
        "type": "object",
        "required": ["execution_flow"],
        "properties": {
            "execution_flow": {"type": "string"},
            "added": {"type": "array", "items": {"type": "string"}},
            "removed": {"type": "array", "items": {"type": "string"}},
            "modified": {"type": "array", "items": {"type": "string"}},
            "loss_function": {"type": "string"},
            "gaps": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["component", "reason"],
                    "properties": {"component": {"type": "string"}, "reason": {"type": "string"}},
                },
            },
        },
    },
    "diag_source": {
        "type": "object",
        "required": ["content"],
        "properties": {"content": {"type": "string", "minLength": 1}, "summary": {"type": "string"}},
    },
    "session_page": {
        "type": "object",
        "required": ["viewed", "continue"],
        "properties": {
            "viewed": {"type": "array", "items": {"type": "string"}},
            "continue": {"type": "boolean"},
        },
    },
}


@dataclass(frozen=True)
class PromptTemplate:
    instruction_id: str
    text: str
    schema_id: Optional[str] = None
    intent: str = ""

    @property
    def placeholders(self) -> List[str]:
        return list(dict.fromkeys(_PLACEHOLDER.findall(self.text)))

    def render(self, bindings: Mapping[str, Any]) -> str:
        def sub(m):
            name = m.group(1)
            if name not in bindings:
                raise KeyError(name)
            return str(bindings[name])

        # one pass: braces inside bound values are never re-expanded
        return _PLACEHOLDER.sub(sub, self.text)


def _parse_template_file(text: str, instruction_id: str) -> PromptTemplate:
    meta: Dict[str, str] = {}
    lines = text.splitlines(keepends=True)
    body_start = 0
    for i, line in enumerate(lines):
        if line.startswith("#!"):
            key, _, value = line[2:].partition(":")
            meta[key.strip()] = value.strip()
            body_start = i + 1
        else:
            break
    return PromptTemplate(
        instruction_id=meta.get("id", instruction_id),
        text="".join(lines[body_start:]).strip() + "\n",
        schema_id=meta.get("schema") or None,
        intent=meta.get("intent", ""),
    )


class TemplateRegistry:
    def __init__(self, templates: Optional[Dict[str, PromptTemplate]] = None):
        self._templates: Dict[str, PromptTemplate] = dict(templates or {})

    @classmethod
    def builtin(cls) -> "TemplateRegistry":
        reg = cls()
        for entry in resources.files("recevo").joinpath("prompts").iterdir():
            if entry.name.endswith(".txt"):
                iid = entry.name[:-4]
                reg.register(_parse_template_file(entry.read_text(encoding="utf-8"), iid))
        return reg

    @classmethod
    def from_dir(cls, path) -> "TemplateRegistry":
        reg = cls.builtin()
        for p in sorted(Path(path).glob("*.txt")):
            reg.register(_parse_template_file(p.read_text(encoding="utf-8"), p.stem))
        return reg

    def register(self, template: PromptTemplate) -> None:
        self._templates[template.instruction_id] = template

    def get(self, instruction_id: str) -> PromptTemplate:
        try:
            return self._templates[instruction_id]
        except KeyError:
            raise KeyError(f"no template registered for {instruction_id!r}") from None

    def ids(self) -> List[str]:
        return sorted(self._templates)

    def __contains__(self, instruction_id: str) -> bool:
        return instruction_id in self._templates


def render(instruction_id: str, bindings: Mapping[str, Any], registry: Optional[TemplateRegistry] = None) -> str:
    registry = registry or TemplateRegistry.builtin()
    try:
        return registry.get(instruction_id).render(bindings)
    except KeyError as exc:
        name = exc.args[0]
        if instruction_id in registry:
            raise KeyError(f"unbound placeholder {name!r} in {instruction_id}") from None
        raise


# --------------------------------------------------------------------------
# structured output


def extract_json(text: str) -> Any:
    """Best-effort: whole reply, then fenced block, then the first decodable object/array."""
    if text is None:
        return None
    stripped = text.strip()
    try:
        return json.loads(stripped)
    except (json.JSONDecodeError, ValueError):
        pass
    for block in re.findall(r"```(?:json)?\s*\n(.*?)```", text, re.DOTALL):
        try:
            return json.loads(block)
        except json.JSONDecodeError:
            continue
    decoder = json.JSONDecoder()
    for i, ch in enumerate(text):
        if ch in "{[":
            try:
                doc, _ = decoder.raw_decode(text, i)
                return doc
            except json.JSONDecodeError:
                continue
    return None


def validate_reply(text: str, schema: dict) -> Any:
    doc = extract_json(text)
    if doc is None:
        raise ValueError("reply contains no JSON document")
    jsonschema.validate(doc, schema)
    return doc


# --------------------------------------------------------------------------
# transcript


def sha256(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


class TranscriptLog:
    """Append-only JSON-lines record of every chat call, bodies included for replay."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.touch(exist_ok=True)
        self._lock = threading.Lock()

    def append(self, instruction_id: str, state_key: str, prompt: str, reply: str, latency: float) -> dict:
        entry = {
            "timestamp": time.time(),
            "instruction_id": instruction_id,
            "state_key": state_key,
            "prompt_sha256": sha256(prompt),
            "reply_sha256": sha256(reply),
            "latency": latency,
            "prompt": prompt,
            "reply": reply,
        }
        with self._lock, open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
        return entry

    def entries(self) -> List[dict]:
        with open(self.path, encoding="utf-8") as fh:
            return [json.loads(line) for line in fh if line.strip()]


# --------------------------------------------------------------------------
# backends


class MockBackend:
    """Scripted replies keyed by (instruction_id, state key).

    A record may also carry ``when`` / ``unless`` substring lists tested against
    the rendered prompt, and ``replies`` (a sequence, last one repeating)
    instead of a single ``reply``. A reply built in code may be a callable
    taking the prompt. Exact-key records win over ``"*"`` records; within each
    group the first match in script order is used.
    """

    def __init__(self, records: List[dict]):
        self.records = [dict(r) for r in records]
        for r in self.records:
            if "reply" not in r and "replies" not in r:
                raise ValueError(f"script record without reply: {r}")
        self._used: Dict[int, int] = {}
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path) -> "MockBackend":
        text = Path(path).read_text(encoding="utf-8")
        stripped = text.lstrip()
        if stripped.startswith("["):
            records = json.loads(text)
        else:
            records = [json.loads(line) for line in text.splitlines() if line.strip()]
        return cls(records)

    def _matches(self, rec: dict, prompt: str) -> bool:
        return all(s in prompt for s in rec.get("when", ())) and not any(
            s in prompt for s in rec.get("unless", ())
        )

    def complete(self, instruction_id: str, state_key: str, prompt: str) -> str:
        candidates = [(i, r) for i, r in enumerate(self.records) if r["instruction_id"] == instruction_id]
        exact = [(i, r) for i, r in candidates if r.get("key", "*") == state_key]
        wild = [(i, r) for i, r in candidates if r.get("key", "*") == "*"]
        for i, rec in exact + wild:
            if self._matches(rec, prompt):
                if "replies" in rec:
                    with self._lock:
                        n = self._used.get(i, 0)
                        self._used[i] = n + 1
                    seq = rec["replies"]
                    reply = seq[min(n, len(seq) - 1)]
                else:
                    reply = rec["reply"]
                if callable(reply):
                    reply = reply(prompt)
                return reply if isinstance(reply, str) else json.dumps(reply)
        raise MockMissError(instruction_id, state_key)


class ReplayBackend:
    """Answers from a recorded transcript, in call order per (instruction_id, state key, prompt)."""

    def __init__(self, entries: List[dict], strict: bool = True):
        self._queues: Dict[tuple, deque] = {}
        for e in entries:
            key = (e["instruction_id"], e["state_key"], e["prompt_sha256"])
            self._queues.setdefault(key, deque()).append(e["reply"])
        self._last: Dict[tuple, str] = {}
        self.strict = strict
        self._lock = threading.Lock()

    @classmethod
    def from_file(cls, path, strict: bool = True) -> "ReplayBackend":
        return cls(TranscriptLog(path).entries(), strict=strict)

    def complete(self, instruction_id: str, state_key: str, prompt: str) -> str:
        key = (instruction_id, state_key, sha256(prompt))
        with self._lock:
            q = self._queues.get(key)
            if q:
                self._last[key] = q.popleft()
                return self._last[key]
            if key in self._last and not self.strict:
                return self._last[key]
        raise ReplayMismatch(f"no recorded reply for {instruction_id}/{state_key} with this prompt")


class RateLimiter:
    """Sliding-window limiter: at most ``rpm`` acquisitions in any 60 s window."""

    def __init__(self, rpm: int, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rpm < 1:
            raise ValueError("rpm must be >= 1")
        self.rpm = rpm
        self.clock = clock
        self.sleep = sleep
        self._stamps: deque = deque()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            while True:
                now = self.clock()
                while self._stamps and now - self._stamps[0] >= 60.0:
                    self._stamps.popleft()
                if len(self._stamps) < self.rpm:
                    self._stamps.append(now)
                    return
                self.sleep(60.0 - (now - self._stamps[0]))


class LiveBackend:
    """OpenAI-compatible chat-completions endpoint over HTTP."""

    def __init__(self, model: str = DEFAULT_MODEL, base_url: str = DEFAULT_BASE_URL,
                 api_key: Optional[str] = None, timeout: float = 120.0, max_retries: int = 3,
                 rpm: int = 60, transport: Optional[Callable[[dict], str]] = None,
                 sleep: Callable[[float], None] = time.sleep):
        self.model = model
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout = timeout
        self.max_retries = max_retries
        self.limiter = RateLimiter(rpm, sleep=sleep)
        self.sleep = sleep
        self._transport = transport or self._http

    def _http(self, payload: dict) -> str:
        import httpx

        resp = httpx.post(
            f"{self.base_url}/chat/completions",
            json=payload,
            headers={"Authorization": f"Bearer {self.api_key}"},
            timeout=self.timeout,
        )
        resp.raise_for_status()
        return resp.json()["choices"][0]["message"]["content"]

    def complete(self, instruction_id: str, state_key: str, prompt: str) -> str:
        payload = {"model": self.model, "messages": [{"role": "user", "content": prompt}]}
        last: Optional[Exception] = None
        for attempt in range(self.max_retries + 1):
            self.limiter.acquire()
            try:
                return self._transport(payload)
            except Exception as exc:  # transport errors of any provider flavour
                last = exc
                logger.warning("LLM call %s failed (attempt %d): %s", instruction_id, attempt + 1, exc)
                if attempt < self.max_retries:
                    self.sleep(min(2.0 ** attempt, 30.0))
        raise GatewayError(f"{instruction_id}: transport failed after {self.max_retries + 1} attempts: {last}")


# --------------------------------------------------------------------------
# gateway


@dataclass
class GatewayConfig:
    provider: str = "mock"  # live | mock | replay
    model: str = DEFAULT_MODEL
    base_url: str = DEFAULT_BASE_URL
    request_timeout: float = 120.0
    max_retries: int = 3
    rate_limit_rpm: int = 60
    transcript_path: Optional[str] = None
    script_path: Optional[str] = None
    replay_path: Optional[str] = None
    api_key_env: str = API_KEY_ENV
    templates_dir: Optional[str] = None

    def __post_init__(self):
        if self.provider not in ("live", "mock", "replay"):
            raise ValueError(f"unknown provider {self.provider!r}")
        if self.provider == "mock" and not self.script_path:
            raise ValueError("mock provider requires script_path")
        if self.provider == "replay" and not self.replay_path:
            raise ValueError("replay provider requires replay_path")


class Gateway:
    def __init__(self, backend, registry: Optional[TemplateRegistry] = None,
                 transcript: Optional[TranscriptLog] = None, max_reasks: int = 2):
        self.backend = backend
        self.registry = registry or TemplateRegistry.builtin()
        self.transcript = transcript
        self.max_reasks = max_reasks
        self.calls = 0
        self._lock = threading.Lock()

    def render(self, instruction_id: str, bindings: Mapping[str, Any]) -> str:
        return render(instruction_id, bindings, self.registry)

    def _complete(self, instruction_id: str, state_key: str, prompt: str) -> str:
        start = time.monotonic()
        reply = self.backend.complete(instruction_id, state_key, prompt)
        latency = time.monotonic() - start
        with self._lock:
            self.calls += 1
        if self.transcript is not None:
            self.transcript.append(instruction_id, state_key, prompt, reply, latency)
        return reply

    def chat(self, instruction_id: str, bindings: Mapping[str, Any], *, state_key: str = "default",
             schema: Any = None):
        """Render and send a prompt.

        ``schema`` may be ``True`` (use the template's schema id), a schema id,
        or a JSON-schema dict. With a schema the parsed document is returned and
        up to ``max_reasks`` corrective re-asks are made before ParseError.
        """
        prompt = self.render(instruction_id, bindings)
        reply = self._complete(instruction_id, state_key, prompt)
        if schema is None or schema is False:
            return reply
        if schema is True:
            schema = self.registry.get(instruction_id).schema_id
        if isinstance(schema, str):
            schema = SCHEMAS[schema]
        for attempt in range(self.max_reasks + 1):
            try:
                return validate_reply(reply, schema)
            except (ValueError, jsonschema.ValidationError) as exc:
                err = exc.message if isinstance(exc, jsonschema.ValidationError) else str(exc)
                if attempt == self.max_reasks:
                    raise ParseError(f"{instruction_id}: reply violates schema: {err}", reply) from None
                reask = (
                    f"{prompt}\n\nYour previous reply could not be used ({err}). "
                    "Reply again with only a JSON document matching the requested format."
                )
                reply = self._complete(instruction_id, state_key, reask)


def build_gateway(cfg: GatewayConfig) -> Gateway:
    if cfg.provider == "mock":
        backend = MockBackend.from_file(cfg.script_path)
    elif cfg.provider == "replay":
        backend = ReplayBackend.from_file(cfg.replay_path)
    else:
        key = os.environ.get(cfg.api_key_env)
        if not key:
            raise GatewayError(f"live provider requires ${cfg.api_key_env}")
        backend = LiveBackend(cfg.model, cfg.base_url, key, cfg.request_timeout, cfg.max_retries,
                              cfg.rate_limit_rpm)
    registry = TemplateRegistry.from_dir(cfg.templates_dir) if cfg.templates_dir else TemplateRegistry.builtin()
    transcript = TranscriptLog(cfg.transcript_path) if cfg.transcript_path else None
    return Gateway(backend, registry, transcript)
