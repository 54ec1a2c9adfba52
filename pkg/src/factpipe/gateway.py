"""Inference-backend abstraction, prompt construction, and output parsing.

All model calls go through a backend object exposing ``generate`` and an
atomic call counter, so pipelines can be audited call-for-call. The joint
extract-and-verify prompt puts the response and the consolidated evidence
into one user message; the model answers with numbered "claim: label" lines
or the sentinel "No verifiable claim.".
"""
from __future__ import annotations

import hashlib
import json
import re
import threading
import unicodedata
from dataclasses import dataclass, field
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Optional

import requests

from . import segmenter
from .errors import (
    BackendHTTPError,
    BackendTimeout,
    ContractViolation,
    MockFixtureMiss,
    WhollyUnparseable,
)

SENTINEL = "No verifiable claim."
DEFAULT_PROMPT_VERSION = "v1"
DEFAULT_MAX_OUTPUT_TOKENS = 2048


class Label(Enum):
    SUPPORTED = "Supported"
    UNSUPPORTED = "Unsupported"


@dataclass(frozen=True)
class VerifiedClaim:
    """A decontextualized claim plus its binary verification label."""

    text: str
    label: Label


@dataclass
class FactList:
    """Parsed model output: ordered labeled claims, or the sentinel."""

    claims: list[VerifiedClaim]
    no_verifiable_claim: bool
    raw: str
    warnings: list[str] = field(default_factory=list)

    @classmethod
    def sentinel(cls) -> "FactList":
        return cls(claims=[], no_verifiable_claim=True, raw=SENTINEL)

    def supported_count(self) -> int:
        return sum(1 for c in self.claims if c.label == Label.SUPPORTED)


@dataclass
class PromptPayload:
    """What a backend receives: a system message, a user message, and fixed
    greedy decode parameters. ``kind`` and ``fields`` carry the structured
    inputs for rule-based mocks; they are not part of the wire format."""

    system: str
    user: str
    decode_params: dict = field(default_factory=lambda: {"temperature": 0})
    kind: str = "generic"
    fields: dict = field(default_factory=dict, repr=False, compare=False)

    def prompt_key(self) -> str:
        h = hashlib.sha256()
        h.update(self.system.encode("utf-8"))
        h.update(b"\x00")
        h.update(self.user.encode("utf-8"))
        return h.hexdigest()


# --- prompt files ---------------------------------------------------------


def load_prompt(name: str, version: str = DEFAULT_PROMPT_VERSION) -> str:
    """Read a versioned prompt template shipped as package data."""
    return resources.files("factpipe.prompts").joinpath(f"{name}.{version}.txt").read_text("utf-8")


def load_prompt_file(path: str | Path) -> str:
    return Path(path).read_text("utf-8")


def build_joint_prompt(
    response,
    evidence,
    prompt_version: str = DEFAULT_PROMPT_VERSION,
    max_output_tokens: int = DEFAULT_MAX_OUTPUT_TOKENS,
) -> PromptPayload:
    """Build the single-pass extract-and-verify prompt.

    ``response`` may be a plain string or any object with a ``response``
    attribute; ``evidence`` a plain string or anything with ``text`` (a
    consolidated evidence context). Serialization is deterministic: same
    inputs, same bytes, on every platform.
    """
    response_text = getattr(response, "response", response)
    evidence_text = getattr(evidence, "text", evidence)
    system = load_prompt("joint_system", prompt_version)
    user = load_prompt("joint_user", prompt_version).format(
        response=response_text, evidence=evidence_text
    )
    payload = PromptPayload(
        system=system,
        user=user,
        decode_params={"temperature": 0, "max_output_tokens": max_output_tokens},
        kind="joint",
        fields={"response": response_text, "evidence": evidence_text},
    )
    _check_block_structure(payload.user)
    return payload


def _check_block_structure(user: str) -> None:
    starts = [m.group(0) for m in re.finditer(r"^### (?:Response|Evidence)\b", user, re.M)]
    if starts != ["### Response", "### Evidence"]:
        raise ContractViolation(
            "joint prompt must contain exactly one Response block then one Evidence block"
        )


# --- output parsing -------------------------------------------------------

_CLAIM_LINE = re.compile(r"^\s*\d+[.)]\s+(?P<rest>.+)$")
_WS = re.compile(r"\s+")


def normalize_claim_text(text: str) -> str:
    """Normalization used wherever two claim strings are compared for
    equality: NFC, casefold, collapse whitespace, strip one terminal period."""
    s = unicodedata.normalize("NFC", text)
    s = _WS.sub(" ", s).strip().casefold()
    if s.endswith("."):
        s = s[:-1].rstrip()
    return s


def _is_sentinel(text: str) -> bool:
    return normalize_claim_text(text) == normalize_claim_text(SENTINEL)


def _normalize_label(token: str) -> Optional[Label]:
    t = token.strip().strip("*_`").strip().rstrip(".!,;:").casefold()
    if t == "supported":
        return Label.SUPPORTED
    if t == "unsupported":
        return Label.UNSUPPORTED
    return None


def parse_facts(raw: str) -> FactList:
    """Parse arbitrary model output into a FactList.

    Numbered "claim: label" lines become claims in order (the label is taken
    after the last ": " so claims may contain colons). The sentinel, alone,
    sets ``no_verifiable_claim``. Unparseable non-empty lines are collected
    as warnings. Raises WhollyUnparseable only when non-empty output yields
    neither a claim nor the sentinel.
    """
    if raw is None:
        raw = ""
    stripped = raw.strip()
    if not stripped:
        return FactList(claims=[], no_verifiable_claim=False, raw=raw)
    if _is_sentinel(stripped):
        return FactList(claims=[], no_verifiable_claim=True, raw=raw)

    claims: list[VerifiedClaim] = []
    warnings: list[str] = []
    for line in stripped.splitlines():
        if not line.strip():
            continue
        m = _CLAIM_LINE.match(line)
        if not m:
            warnings.append(line.strip())
            continue
        rest = m.group("rest").strip()
        if ": " in rest:
            text, label_token = rest.rsplit(": ", 1)
        elif rest.count(":") == 1 and not rest.endswith(":"):
            text, label_token = rest.rsplit(":", 1)
        else:
            warnings.append(line.strip())
            continue
        label = _normalize_label(label_token)
        text = text.strip()
        if label is None or not text:
            warnings.append(line.strip())
            continue
        claims.append(VerifiedClaim(text=text, label=label))

    if not claims:
        raise WhollyUnparseable(f"no claim line and no sentinel in output of {len(raw)} chars")
    return FactList(claims=claims, no_verifiable_claim=False, raw=raw, warnings=warnings)


def serialize_facts(facts: FactList) -> str:
    """Canonical "i. text: Label" rendering; the sentinel for empty lists.

    Claim text is stripped so that serialize-parse-serialize is a fixed
    point for every fact list."""
    if not facts.claims:
        return SENTINEL
    return "\n".join(
        f"{i}. {c.text.strip()}: {c.label.value}" for i, c in enumerate(facts.claims, start=1)
    )


# --- backends -------------------------------------------------------------


def generate(backend, prompt: PromptPayload) -> str:
    """Run one inference call; the backend's call counter advances by one."""
    return backend.generate(prompt)


class MockBackend:
    """Deterministic stand-in for model inference.

    Outputs come from a content-addressed fixture store (prompt hash to
    text). On a fixture miss, an optional rule oracle answers from the
    prompt's structured fields: a claim is Supported iff its text,
    lowercased, appears in the evidence text. With the oracle disabled a
    miss raises MockFixtureMiss.
    """

    kind = "mock"

    def __init__(self, fixtures: Optional[dict[str, str]] = None, oracle: bool = True,
                 model_id: str = "mock"):
        self.fixtures = dict(fixtures or {})
        self.oracle = oracle
        self.model_id = model_id
        self.call_count = 0
        self._lock = threading.Lock()

    @classmethod
    def from_fixture_file(cls, path: str | Path, oracle: bool = True) -> "MockBackend":
        fixtures = {}
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    rec = json.loads(line)
                    fixtures[rec["key"]] = rec["output"]
        return cls(fixtures=fixtures, oracle=oracle)

    def record(self, prompt: PromptPayload, output: str) -> None:
        self.fixtures[prompt.prompt_key()] = output

    def save_fixtures(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for key in sorted(self.fixtures):
                fh.write(json.dumps({"key": key, "output": self.fixtures[key]}) + "\n")

    def generate(self, prompt: PromptPayload) -> str:
        with self._lock:
            self.call_count += 1
        hit = self.fixtures.get(prompt.prompt_key())
        if hit is not None:
            return hit
        if self.oracle:
            return self._oracle_answer(prompt)
        raise MockFixtureMiss(f"no fixture for prompt {prompt.prompt_key()[:12]}… ({prompt.kind})")

    def _oracle_answer(self, prompt: PromptPayload) -> str:
        f = prompt.fields
        if prompt.kind == "joint":
            evidence = f.get("evidence", "").lower()
            sentences = segmenter.split_sentences(f.get("response", ""))
            if not sentences:
                return SENTINEL
            lines = []
            for i, s in enumerate(sentences, start=1):
                label = Label.SUPPORTED if s.text.lower() in evidence else Label.UNSUPPORTED
                lines.append(f"{i}. {s.text}: {label.value}")
            return "\n".join(lines)
        if prompt.kind == "extract":
            sentence = f.get("sentence", "").strip()
            return sentence if sentence else SENTINEL
        if prompt.kind == "verify":
            claim = f.get("claim", "").lower()
            evidence = f.get("evidence", "").lower()
            return Label.SUPPORTED.value if claim and claim in evidence else Label.UNSUPPORTED.value
        if prompt.kind == "judge":
            statement = normalize_claim_text(f.get("statement", ""))
            for i, ref in enumerate(f.get("references", []), start=1):
                if normalize_claim_text(ref) == statement:
                    return (
                        "### Thoughts\nExact match with one reference fact.\n\n"
                        f"### Justifying Facts\n{i}\n\n### Judgement\nSupported"
                    )
            return (
                "### Thoughts\nNo reference fact entails the statement.\n\n"
                "### Justifying Facts\nNone\n\n### Judgement\nUnsupported"
            )
        if prompt.kind == "sieve":
            words = set(re.findall(r"[a-z]+", f.get("prompt", "").lower()))
            verdict = "No" if words & {
                "story", "stories", "opinion", "imagine", "personal", "advice"
            } else "Yes"
            return f"### Thoughts\nKeyword screen.\n\n### Judgement\n{verdict}"
        raise MockFixtureMiss(f"no fixture and no oracle rule for kind {prompt.kind!r}")


class HttpChatBackend:
    """Chat-completion client: POST <endpoint>/v1/chat/completions with a
    system+user message pair at temperature 0; the first choice's message
    content is the raw output."""

    kind = "http_chat"

    def __init__(
        self,
        endpoint: str,
        model_id: str,
        timeout: float = 300.0,
        max_in_flight: int = 4,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model_id = model_id
        self.timeout = timeout
        self.call_count = 0
        self._lock = threading.Lock()
        self._slots = threading.Semaphore(max_in_flight)
        self._session = session or requests.Session()

    def generate(self, prompt: PromptPayload) -> str:
        with self._lock:
            self.call_count += 1
        body = {
            "model": self.model_id,
            "messages": [
                {"role": "system", "content": prompt.system},
                {"role": "user", "content": prompt.user},
            ],
            "temperature": 0,
        }
        max_out = prompt.decode_params.get("max_output_tokens")
        if max_out:
            body["max_tokens"] = max_out
        with self._slots:
            try:
                resp = self._session.post(
                    f"{self.endpoint}/v1/chat/completions", json=body, timeout=self.timeout
                )
            except requests.Timeout as e:
                raise BackendTimeout(f"no answer within {self.timeout}s") from e
            except requests.RequestException as e:
                raise BackendHTTPError(None, str(e)) from e
        if resp.status_code != 200:
            raise BackendHTTPError(resp.status_code, resp.text[:200])
        try:
            return resp.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError, ValueError) as e:
            raise BackendHTTPError(resp.status_code, f"malformed completion body: {e}") from e
