"""Synthetic student-advisor corpus generation.

Two interchangeable completion backends sit behind the same request/response
types: an offline template grammar (default, fully deterministic per seed)
and a generic HTTP text-generation endpoint. Every advisor reply the template
backend emits carries at least one markdown heading and one bullet list, so
the formatting-compliance checker always has signal.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .data import TOPICS, ConversationRecord, Turn, validate_record
from .errors import AuthError, ConfigError, ProviderError

PROVIDER_KEY_ENV = "PEFT_FORGE_PROVIDER_KEY"


@dataclass
class ProviderRequest:
    prompt: str
    max_tokens: int = 512
    temperature: float = 0.7

    def __post_init__(self):
        if self.max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")


@dataclass
class ProviderResponse:
    text: str
    finish_reason: str = "stop"


_UNIVERSITIES = (
    "Aalto University", "McGill University", "TU Munich",
    "Kyoto University", "Leiden University", "Monash University",
)
_COUNTRIES = ("Canada", "Germany", "Japan", "Australia", "Norway", "Ireland")
_PROGRAMS = (
    "computer science", "economics", "biology",
    "civil engineering", "data science", "linguistics",
)

_QUESTIONS = {
    "applications": (
        "How do I apply to {uni} for a {program} degree?",
        "What should my application to {uni} include?",
        "When should I start my {program} application for {uni}?",
    ),
    "visas": (
        "What documents do I need for a student visa to {country}?",
        "How long does a student visa for {country} usually take?",
        "Can I work in {country} while on a student visa?",
    ),
    "scholarships": (
        "What scholarships exist for {program} studies in {country}?",
        "How do I qualify for a merit scholarship at {uni}?",
        "Are there fully funded scholarships for {program} students?",
    ),
}

_HEADINGS = {
    "applications": ("Application Checklist", "Applying Step by Step"),
    "visas": ("Visa Requirements", "Visa Application Steps"),
    "scholarships": ("Scholarship Options", "Funding Your Studies"),
}

_BULLETS = {
    "applications": (
        "Check the admission requirements on the official website.",
        "Prepare transcripts and two reference letters.",
        "Write a statement of purpose tailored to the program.",
        "Submit before the early deadline to improve your chances.",
        "Pay the application fee and save the confirmation.",
    ),
    "visas": (
        "Get an admission letter from your host university first.",
        "Show proof of funds covering tuition and living costs.",
        "Book a visa appointment at the nearest consulate.",
        "Buy health insurance valid for the whole stay.",
        "Keep certified translations of all civil documents.",
    ),
    "scholarships": (
        "Search the official scholarship database of the host country.",
        "Ask the admissions office about merit-based awards.",
        "Meet every eligibility rule before you apply.",
        "Request recommendation letters well in advance.",
        "Apply to several programs to raise your odds.",
    ),
}

_CLOSINGS = (
    "Start early and keep copies of every document.",
    "Follow the official instructions closely and track all deadlines.",
    "Reach out to the international office if anything is unclear.",
)


def _fill(template: str, rng) -> str:
    return template.format(
        uni=_UNIVERSITIES[rng.integers(len(_UNIVERSITIES))],
        country=_COUNTRIES[rng.integers(len(_COUNTRIES))],
        program=_PROGRAMS[rng.integers(len(_PROGRAMS))],
    )


def build_generation_prompt(topic: str, question: str) -> str:
    return (
        f"Topic: {topic}\n"
        f"Student question: {question}\n"
        "Answer as a study-abroad advisor. Use markdown with a heading and "
        "a bullet list."
    )


class TemplateProvider:
    """Offline deterministic backend: expands a fixed grammar per seed."""

    name = "template"

    def complete(self, request: ProviderRequest, seed: int | None = None) -> ProviderResponse:
        if seed is None:
            raise ConfigError("template provider requires a per-record seed")
        topic = None
        for line in request.prompt.splitlines():
            if line.startswith("Topic: "):
                topic = line[len("Topic: ") :].strip()
                break
        if topic not in TOPICS:
            raise ProviderError(f"prompt does not name a known topic: {topic!r}")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
        heading = _HEADINGS[topic][rng.integers(len(_HEADINGS[topic]))]
        pool = _BULLETS[topic]
        picks = rng.choice(len(pool), size=3, replace=False)
        bullets = "\n".join(f"- {pool[i]}" for i in sorted(picks))
        closing = _CLOSINGS[rng.integers(len(_CLOSINGS))]
        text = f"## {heading}\n\n{bullets}\n\n{closing}"
        if len(text) > 4 * request.max_tokens:
            cut = text[: 4 * request.max_tokens]
            return ProviderResponse(text=cut[: cut.rfind("\n")], finish_reason="length")
        return ProviderResponse(text=text, finish_reason="stop")


class HttpProvider:
    """POSTs the JSON request schema to a text-generation endpoint.

    Credential comes from the PEFT_FORGE_PROVIDER_KEY environment variable
    (checked before any network call) and is sent as a bearer token.
    """

    name = "http"

    def __init__(self, base_url: str, api_key: str | None = None,
                 timeout: float = 30.0):
        if not base_url:
            raise ConfigError("provider URL not configured")
        self.base_url = base_url
        self.api_key = api_key if api_key is not None else os.environ.get(PROVIDER_KEY_ENV)
        self.timeout = timeout

    def complete(self, request: ProviderRequest, seed: int | None = None) -> ProviderResponse:
        if not self.api_key:
            raise AuthError(
                f"no provider credential: set {PROVIDER_KEY_ENV} in the environment"
            )
        import requests

        body = {
            "prompt": request.prompt,
            "max_tokens": request.max_tokens,
            "temperature": request.temperature,
        }
        try:
            resp = requests.post(
                self.base_url,
                json=body,
                headers={"Authorization": f"Bearer {self.api_key}"},
                timeout=self.timeout,
            )
        except requests.Timeout as exc:
            raise ProviderError(f"provider timed out after {self.timeout}s") from exc
        except requests.RequestException as exc:
            raise ProviderError(f"provider request failed: {exc}") from exc
        if resp.status_code in (401, 403):
            raise AuthError(f"provider rejected credential (HTTP {resp.status_code})")
        if not 200 <= resp.status_code < 300:
            raise ProviderError(f"provider returned HTTP {resp.status_code}")
        try:
            payload = resp.json()
            text = payload["text"]
            finish = payload.get("finish_reason", "stop")
        except (ValueError, KeyError, TypeError) as exc:
            raise ProviderError(f"malformed provider response body: {exc}") from exc
        if not isinstance(text, str) or not text:
            raise ProviderError("provider returned empty text")
        return ProviderResponse(text=text, finish_reason=str(finish))


def generate_corpus(n: int, seed: int, provider=None, max_retries: int = 3) -> list:
    """Deterministic corpus of n records, topics cycled across the three
    tracks. External-provider failures are retried per record and then abort
    with the record index and retry count."""
    if n < 1:
        raise ConfigError("n must be >= 1")
    if provider is None:
        provider = TemplateProvider()
    records = []
    for i in range(n):
        topic = TOPICS[i % len(TOPICS)]
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        question = _fill(_QUESTIONS[topic][rng.integers(len(_QUESTIONS[topic]))], rng)
        request = ProviderRequest(
            prompt=build_generation_prompt(topic, question),
            max_tokens=512,
            temperature=0.7,
        )
        rec_seed = int(rng.integers(0, 2**63 - 1))
        answer = None
        last_err = None
        for attempt in range(1, max_retries + 1):
            try:
                answer = provider.complete(request, seed=rec_seed)
                break
            except AuthError:
                raise
            except ProviderError as exc:
                last_err = exc
        if answer is None:
            raise ProviderError(
                f"record {i}: provider failed after {max_retries} attempts: {last_err}"
            )
        rec = ConversationRecord(
            id=f"conv-{i:06d}",
            topic=topic,
            turns=[Turn("user", question), Turn("advisor", answer.text)],
        )
        records.append(validate_record(rec.to_json_obj()))
    return records
