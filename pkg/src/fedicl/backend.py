"""Predictor backends behind one interface.

Two implementations of the client-side model: a deterministic closed-form
linear self-attention predictor for regression mode, and a remote
chat-completion client speaking the OpenAI-compatible JSON/HTTP protocol
for text QA, with retry/backoff and token accounting.
"""

from __future__ import annotations

import os
import re
import time
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import requests

from .core import (ChoiceLabel, CommLedger, Covariate, Example, Label,
                   RealLabel, TextLabel, ABSTAIN)
from .lsa import predict_closed_form


@dataclass(frozen=True)
class GenerationParams:
    temperature: float = 0.1
    max_tokens: int = 256
    context_count: int = 5
    model_name: str = "gpt-4o-mini"
    timeout_ms: int = 30_000
    max_retries: int = 3

    def __post_init__(self):
        if self.temperature < 0:
            raise ValueError("temperature must be >= 0")
        if self.max_tokens < 1 or self.context_count < 0:
            raise ValueError("max_tokens >= 1 and context_count >= 0 required")


class LmBackend:
    """Answer a query given in-context examples. Deterministic backends must
    return identical labels for identical inputs."""

    descriptor: str = "abstract"

    def answer(self, context: Sequence[Example], query: Covariate,
               params: Optional[GenerationParams] = None) -> Label:
        raise NotImplementedError


class LsaBackend(LmBackend):
    """Closed-form LSA predictor at the pretrained global optimum.

    Pure function of (context, query); GenerationParams are ignored.
    """

    def __init__(self, gamma: np.ndarray):
        self.gamma = np.asarray(gamma, dtype=float)
        self.descriptor = f"lsa(d={self.gamma.shape[0]})"

    def answer(self, context: Sequence[Example], query: Covariate,
               params: Optional[GenerationParams] = None) -> Label:
        if isinstance(query, str):
            raise TypeError("LSA backend handles vector covariates only")
        pairs: List[Tuple[Covariate, float]] = []
        for ex in context:
            if not isinstance(ex.label, RealLabel) or isinstance(ex.covariate, str):
                raise TypeError(f"LSA backend needs real-labeled vector "
                                f"examples, got {ex!r}")
            pairs.append((ex.covariate, ex.label.value))
        return RealLabel(predict_closed_form(pairs, query, self.gamma))


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------

_OPEN_QA_HEADER = ("Answer the final question. Use the solved examples "
                   "as guidance.\n")
_MC_HEADER = ("Answer the final multiple-choice question with the letter of "
              "the correct option. Use the solved examples as guidance.\n")

TEMPLATES = ("open_qa", "multiple_choice")


def _exemplar_text(ex: Example) -> str:
    question = ex.covariate if isinstance(ex.covariate, str) else str(list(ex.covariate))
    if isinstance(ex.label, TextLabel):
        answer = ex.label.answer
    elif isinstance(ex.label, ChoiceLabel):
        answer = ex.label.option
    else:
        answer = repr(ex.label.value)
    return f"Question: {question}\nAnswer: {answer}\n"


def render_prompt(context: Sequence[Example], query: Covariate,
                  template_id: str = "open_qa") -> str:
    """Deterministic prompt text: header, exemplars in order, query last."""
    if template_id == "open_qa":
        header = _OPEN_QA_HEADER
    elif template_id == "multiple_choice":
        header = _MC_HEADER
    else:
        raise ValueError(f"unknown template id: {template_id!r}")
    question = query if isinstance(query, str) else str(list(query))
    parts = [header]
    parts.extend(_exemplar_text(ex) for ex in context)
    parts.append(f"Question: {question}\nAnswer:")
    return "\n".join(parts)


def parse_choice(answer_text: str, options: Sequence[str]) -> ChoiceLabel:
    """Map free-form answer text to the first option it mentions.

    Matching is case-insensitive on whole words; text mentioning no option
    maps to the abstain label, which majority voting ignores.
    """
    if len(options) == 0:
        raise ValueError("options must be nonempty")
    best: Optional[Tuple[int, str]] = None
    for opt in options:
        match = re.search(rf"\b{re.escape(opt)}\b", answer_text, re.IGNORECASE)
        if match and (best is None or match.start() < best[0]):
            best = (match.start(), opt)
    return ChoiceLabel(best[1]) if best else ABSTAIN


# ---------------------------------------------------------------------------
# Remote chat-completion backend
# ---------------------------------------------------------------------------

API_KEY_ENV = "FEDICL_API_KEY"


class RemoteBackendError(RuntimeError):
    pass


class RemoteBackend(LmBackend):
    """OpenAI-compatible chat-completions client.

    POSTs {model, messages, temperature, max_tokens} to
    ``{endpoint}/v1/chat/completions``; the answer is the first completion's
    content. Transient failures retry with exponential backoff, honoring
    Retry-After on rate limits. Token usage is recorded to the supplied
    ledger: prompt tokens as uplink (sent to the model), completion tokens
    as downlink.
    """

    def __init__(self, endpoint: str, params: Optional[GenerationParams] = None,
                 ledger: Optional[CommLedger] = None, client_id: int = 0,
                 template_id: str = "open_qa", backoff_base: float = 0.5,
                 session: Optional[requests.Session] = None):
        self.endpoint = endpoint.rstrip("/")
        self.params = params or GenerationParams()
        self.ledger = ledger
        self.client_id = client_id
        self.template_id = template_id
        self.backoff_base = backoff_base
        self.session = session or requests.Session()
        self.round = 0  # protocol engine updates this for ledger attribution
        self.descriptor = f"remote({self.params.model_name})"

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        key = os.environ.get(API_KEY_ENV, "")
        if key:
            headers["Authorization"] = f"Bearer {key}"
        return headers

    def answer(self, context: Sequence[Example], query: Covariate,
               params: Optional[GenerationParams] = None) -> Label:
        p = params or self.params
        prompt = render_prompt(context[: p.context_count] if p.context_count
                               else context, query, self.template_id)
        body = {
            "model": p.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": p.temperature,
            "max_tokens": p.max_tokens,
        }
        resp = self._post_with_retries(body, p)
        try:
            payload = resp.json()
            content = payload["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise RemoteBackendError(
                f"malformed response body: {exc}: {resp.text[:200]!r}")
        usage = payload.get("usage", {})
        if self.ledger is not None:
            self.ledger.record(max(self.round, 1), "uplink", self.client_id,
                               int(usage.get("prompt_tokens", 0)), "tokens")
            self.ledger.record(max(self.round, 1), "downlink", self.client_id,
                               int(usage.get("completion_tokens", 0)), "tokens")
        # hard cap per answer, matching the accounting scheme
        tokens = str(content).split(" ")
        if len(tokens) > p.max_tokens:
            content = " ".join(tokens[: p.max_tokens])
        return TextLabel(str(content))

    def _post_with_retries(self, body: dict, p: GenerationParams):
        url = f"{self.endpoint}/v1/chat/completions"
        last_error: Optional[str] = None
        for attempt in range(p.max_retries + 1):
            try:
                resp = self.session.post(url, json=body, headers=self._headers(),
                                         timeout=p.timeout_ms / 1000.0)
            except requests.RequestException as exc:
                last_error = f"transport failure: {exc}"
                resp = None
            if resp is not None:
                if 200 <= resp.status_code < 300:
                    return resp
                last_error = f"HTTP {resp.status_code}: {resp.text[:200]!r}"
                if resp.status_code not in (408, 429, 500, 502, 503, 504):
                    break  # non-retryable
            if attempt < p.max_retries:
                delay = self.backoff_base * (2 ** attempt)
                if resp is not None and resp.headers.get("Retry-After"):
                    try:
                        delay = float(resp.headers["Retry-After"])
                    except ValueError:
                        pass
                time.sleep(delay)
        raise RemoteBackendError(f"request failed after retries: {last_error}")
