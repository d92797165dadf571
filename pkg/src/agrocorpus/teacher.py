"""Teacher-driven instruction generation: prompts, backends, response parsing.

A backend is anything with ``send(prompt) -> text`` where the prompt exposes
``messages()`` and ``digest()``. Three implementations ship: a live HTTP
chat-completion client (bounded retry, exponential backoff, sliding-window
rate limit), a deterministic replay store keyed by prompt digest, and a
fault injector for error-path tests. With the replay backend the whole
generation path is reproducible end to end.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import re
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Protocol

from . import cleaner
from .corpus_model import (
    ConversationSample,
    ConversationTurn,
    ImageRef,
    KnowledgeRecord,
    TAG_TO_SPEAKER,
)
from .errors import BackendError, GenerationError, ParseError, ValidationError
from .knowledge import knowledge_payload

logger = logging.getLogger(__name__)

API_KEY_ENV_VAR = "TEACHER_API_KEY"


def _digest_messages(messages: list[dict]) -> str:
    canonical = json.dumps(messages, ensure_ascii=False, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ChatPrompt:
    """A bare system/user exchange; used for judge and reference prompts."""

    system_text: str
    user_text: str

    def messages(self) -> list[dict]:
        return [
            {"role": "system", "content": self.system_text},
            {"role": "user", "content": self.user_text},
        ]

    def digest(self) -> str:
        return _digest_messages(self.messages())


@dataclass(frozen=True)
class TeacherPrompt:
    """Instruction-generation prompt: system text, few-shot pairs, knowledge."""

    system_text: str
    knowledge_payload: str
    fewshot_examples: tuple[tuple[str, str], ...] = ()
    round_bounds: tuple[int, int] = (4, 6)

    def validate(self) -> None:
        lo, hi = self.round_bounds
        if lo < 1 or hi < lo:
            raise ValidationError(f"round_bounds ({lo}, {hi}) must satisfy 1 <= min <= max")

    def messages(self) -> list[dict]:
        out = [{"role": "system", "content": self.system_text}]
        for payload, conversation in self.fewshot_examples:
            out.append({"role": "user", "content": payload})
            out.append({"role": "assistant", "content": conversation})
        out.append({"role": "user", "content": self.knowledge_payload})
        return out

    def digest(self) -> str:
        return _digest_messages(self.messages())


class PromptLike(Protocol):
    def messages(self) -> list[dict]: ...

    def digest(self) -> str: ...


class TeacherBackend(Protocol):
    kind: str
    request_count: int

    def send(self, prompt: PromptLike) -> str: ...


# ---------------------------------------------------------------------------
# Prompt construction
# ---------------------------------------------------------------------------

_FEWSHOT_RECORD = KnowledgeRecord(
    name="tomato early blight",
    kind="disease",
    crop="tomato",
    sections={
        "symptoms": "Dark concentric ring spots appear on lower leaves first. "
        "Spots enlarge, the surrounding tissue yellows, and leaves drop early.",
        "pathogen": "Caused by a soil-borne fungus that overwinters on crop debris.",
        "transmission": "Spores spread by wind and splashing rain during warm wet weather.",
        "control": "Rotate crops, remove infected debris, and spray protectant "
        "fungicide at the first sign of spots.",
        "other": "",
    },
    provenance="built-in example",
)

_FEWSHOT_CONVERSATION = """Question: What abnormality can be seen on the plant in the image?
Answer: The lower leaves show dark spots with concentric rings, and the tissue around the spots is turning yellow.
Question: What causes this condition?
Answer: It is caused by a soil-borne fungus that overwinters on crop debris.
Question: How does it spread between plants?
Answer: Spores spread by wind and splashing rain, especially during warm wet weather.
Question: How can it be controlled?
Answer: Rotate crops, remove infected debris, and spray a protectant fungicide at the first sign of spots."""

DEFAULT_FEWSHOT: tuple[tuple[str, str], ...] = (
    (knowledge_payload(_FEWSHOT_RECORD), _FEWSHOT_CONVERSATION),
)

_SYSTEM_TEMPLATE = (
    "You are generating training conversations about an image of a crop "
    "pest or disease. You cannot see the image; you receive its structured "
    "knowledge entry as JSON. Write a conversation between a curious user "
    "looking at the image and an expert assistant.\n"
    "Rules:\n"
    "- Use ONLY facts present in the provided knowledge entry; never add "
    "information from your own judgment.\n"
    "- Produce between {lo} and {hi} question/answer rounds.\n"
    "- Format every round as two lines, 'Question: ...' then 'Answer: ...', "
    "matching the example conversations.\n"
    "- The first question should ask about what is visible in the image."
)


@dataclass(frozen=True)
class TeacherConfig:
    round_bounds: tuple[int, int] = (4, 6)
    regenerate_on_fail: int = 2
    temperature: float = 0.0
    model: str = "gpt-4"
    fewshot: tuple[tuple[str, str], ...] = DEFAULT_FEWSHOT
    allow_empty_fewshot: bool = False

    @property
    def max_attempts(self) -> int:
        return self.regenerate_on_fail + 1


DEFAULT_TEACHER_CONFIG = TeacherConfig()


def build_instruct_prompt(record: KnowledgeRecord,
                          config: TeacherConfig = DEFAULT_TEACHER_CONFIG) -> TeacherPrompt:
    record.validate()
    if not config.fewshot and not config.allow_empty_fewshot:
        raise ValidationError("few-shot examples are required outside test configurations")
    lo, hi = config.round_bounds
    prompt = TeacherPrompt(
        system_text=_SYSTEM_TEMPLATE.format(lo=lo, hi=hi),
        knowledge_payload=knowledge_payload(record),
        fewshot_examples=config.fewshot,
        round_bounds=config.round_bounds,
    )
    prompt.validate()
    return prompt


# ---------------------------------------------------------------------------
# Response parsing
# ---------------------------------------------------------------------------

_LABEL_RE = re.compile(r"^\s*(question|answer)\s*[:：]\s*(.*)$", re.IGNORECASE)
_FENCE_RE = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL)


def _turns_from_json(payload, source: str) -> list[ConversationTurn]:
    if not isinstance(payload, list):
        raise ParseError(f"{source}: expected a JSON list of turns")
    turns = []
    for i, element in enumerate(payload):
        if not isinstance(element, dict):
            raise ParseError(f"{source}: element {i} is not an object")
        if "from" not in element or "value" not in element:
            raise ParseError(f"{source}: element {i} lacks from/value")
        tag, value = element["from"], element["value"]
        if tag not in TAG_TO_SPEAKER:
            raise ParseError(f"{source}: element {i} has unknown speaker {tag!r}")
        if not isinstance(value, str):
            raise ParseError(f"{source}: element {i} value is not a string")
        turns.append(ConversationTurn(TAG_TO_SPEAKER[tag], value.strip()))
    return turns


def _turns_from_labels(text: str) -> list[ConversationTurn]:
    turns: list[tuple[str, list[str], int]] = []
    for line_no, line in enumerate(text.splitlines(), start=1):
        match = _LABEL_RE.match(line)
        if match:
            label = match.group(1).lower()
            speaker = "human" if label == "question" else "assistant"
            turns.append((speaker, [match.group(2).strip()], line_no))
        elif turns:
            turns[-1][1].append(line.strip())
        # preamble lines before the first label are skipped
    if not turns:
        raise ParseError("no Question:/Answer: labels found")
    return [
        ConversationTurn(speaker, "\n".join(parts).strip())
        for speaker, parts, _ in turns
    ]


def parse_conversation(text: str) -> list[ConversationTurn]:
    """Parse a teacher response into alternating turns starting with human.

    Accepts a JSON list of {from, value} turns (optionally inside a fenced
    block) or labeled Question:/Answer: lines. Raises ParseError with the
    first offending line or element; never raises anything else.
    """
    if not isinstance(text, str) or not text.strip():
        raise ParseError("empty response")
    stripped = text.strip()
    fence = _FENCE_RE.search(stripped)
    json_candidate = None
    if fence and fence.group(1).strip().startswith("["):
        json_candidate = fence.group(1).strip()
    elif stripped.startswith("["):
        json_candidate = stripped
    if json_candidate is not None:
        try:
            payload = json.loads(json_candidate)
        except json.JSONDecodeError as exc:
            raise ParseError(f"response looks like JSON but does not parse: {exc}") from exc
        turns = _turns_from_json(payload, "response")
    else:
        turns = _turns_from_labels(stripped)

    if not turns:
        raise ParseError("response contains no turns")
    for i, turn in enumerate(turns):
        expected = "human" if i % 2 == 0 else "assistant"
        if turn.speaker != expected:
            raise ParseError(f"turn {i}: breaks alternation (expected {expected})")
        if not turn.text:
            raise ParseError(f"turn {i}: empty text")
    if len(turns) % 2 != 0:
        raise ParseError("dangling question without an answer")
    return turns


# ---------------------------------------------------------------------------
# Backends
# ---------------------------------------------------------------------------

class RateLimiter:
    """At most ``max_per_second`` acquisitions started per sliding second."""

    def __init__(self, max_per_second: float,
                 time_fn: Callable[[], float] = time.monotonic,
                 sleep_fn: Callable[[float], None] = time.sleep):
        if max_per_second <= 0:
            raise ValidationError("rate limit must be positive")
        self.max_per_second = max_per_second
        self._time = time_fn
        self._sleep = sleep_fn
        self._lock = threading.Lock()
        self._starts: deque[float] = deque()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = self._time()
                # eviction and wait must share one expression, or float
                # rounding can leave wait at 0 without evicting
                while self._starts and self._starts[0] + 1.0 <= now:
                    self._starts.popleft()
                if len(self._starts) < self.max_per_second:
                    self._starts.append(now)
                    return
                wait = self._starts[0] + 1.0 - now
            self._sleep(max(wait, 1e-9))


class ReplayBackend:
    """Deterministic store of prompt-digest -> response text files."""

    kind = "replay"

    def __init__(self, directory):
        self.directory = Path(directory)
        self.request_count = 0
        self._lock = threading.Lock()

    def _path(self, digest: str) -> Path:
        return self.directory / f"{digest}.txt"

    def send(self, prompt: PromptLike) -> str:
        digest = prompt.digest()
        path = self._path(digest)
        if not path.exists():
            raise BackendError(f"replay store has no response for prompt {digest[:16]}...")
        with self._lock:
            self.request_count += 1
        return path.read_text(encoding="utf-8")

    def store(self, prompt: PromptLike, response: str) -> Path:
        self.directory.mkdir(parents=True, exist_ok=True)
        path = self._path(prompt.digest())
        path.write_text(response, encoding="utf-8")
        return path


class FaultBackend:
    """Fails the first ``failures`` sends, then delegates (or replies canned)."""

    kind = "fault"

    def __init__(self, failures: int, response: str | None = None,
                 delegate: TeacherBackend | None = None):
        if response is None and delegate is None:
            raise ValidationError("fault backend needs a canned response or a delegate")
        self.failures = failures
        self.response = response
        self.delegate = delegate
        self.request_count = 0
        self._calls = 0
        self._lock = threading.Lock()

    def send(self, prompt: PromptLike) -> str:
        with self._lock:
            self._calls += 1
            calls = self._calls
            self.request_count += 1
        if calls <= self.failures:
            raise BackendError(f"injected fault on call {calls}")
        if self.delegate is not None:
            return self.delegate.send(prompt)
        return self.response  # type: ignore[return-value]


_RETRYABLE_STATUS = {408, 409, 429, 500, 502, 503, 504}


class LiveBackend:
    """HTTP chat-completion client with bounded retry and rate limiting.

    The credential comes from the TEACHER_API_KEY environment variable,
    never from configuration files or flags.
    """

    kind = "live"

    def __init__(self, endpoint: str, model: str, temperature: float = 0.0,
                 timeout: float = 60.0, max_retries: int = 3,
                 backoff_base: float = 0.5, requests_per_second: float = 1.0,
                 session=None,
                 time_fn: Callable[[], float] = time.monotonic,
                 sleep_fn: Callable[[float], None] = time.sleep):
        api_key = os.environ.get(API_KEY_ENV_VAR)
        if not api_key:
            raise BackendError(f"{API_KEY_ENV_VAR} is not set in the environment")
        self.endpoint = endpoint
        self.model = model
        self.temperature = temperature
        self.timeout = timeout
        self.max_retries = max_retries
        self.backoff_base = backoff_base
        self._api_key = api_key
        self._sleep = sleep_fn
        self._limiter = RateLimiter(requests_per_second, time_fn, sleep_fn)
        self.request_count = 0
        self._count_lock = threading.Lock()
        if session is None:
            import requests

            session = requests.Session()
        self._session = session

    def send(self, prompt: PromptLike) -> str:
        body = {
            "model": self.model,
            "messages": prompt.messages(),
            "temperature": self.temperature,
        }
        headers = {"Authorization": f"Bearer {self._api_key}"}
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                self._sleep(self.backoff_base * (2 ** (attempt - 1)))
            self._limiter.acquire()
            with self._count_lock:
                self.request_count += 1
            try:
                response = self._session.post(
                    self.endpoint, json=body, headers=headers, timeout=self.timeout
                )
            except Exception as exc:  # connection errors are retryable
                last_error = exc
                logger.warning("teacher request failed (attempt %d): %s", attempt + 1, exc)
                continue
            status = getattr(response, "status_code", 0)
            if status in _RETRYABLE_STATUS:
                last_error = BackendError(f"HTTP {status} from teacher endpoint")
                logger.warning("teacher returned %s (attempt %d)", status, attempt + 1)
                continue
            if status != 200:
                raise BackendError(f"teacher endpoint returned HTTP {status}")
            try:
                payload = response.json()
                return payload["choices"][0]["message"]["content"]
            except Exception as exc:
                raise BackendError(f"malformed teacher response: {exc}") from exc
        raise BackendError(
            f"teacher endpoint failed after {self.max_retries + 1} attempts: {last_error}"
        )


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InstructionOutcome:
    sample: ConversationSample
    report: cleaner.CleanReport
    attempt_count: int

    @property
    def clean(self) -> bool:
        return self.report.ok


def _attach_image(turns: list[ConversationTurn], image: ImageRef) -> ConversationSample:
    first = replace(turns[0], has_image_slot=True)
    return ConversationSample(
        image=image, turns=(first, *turns[1:]), origin="instruction"
    )


def _check_generated(sample: ConversationSample, record: KnowledgeRecord,
                     config: TeacherConfig, policy: cleaner.CleanPolicy
                     ) -> cleaner.CleanReport:
    structural = sample.violations()
    if structural:
        return cleaner.CleanReport(
            tuple(cleaner.Violation("structure", v) for v in structural)
        )
    violations = []
    violations.extend(cleaner.check_round_bounds(sample, policy, bounds=config.round_bounds))
    violations.extend(cleaner.check_grounding(sample, record, policy))
    return cleaner.CleanReport(tuple(violations))


def _min_grounding(sample: ConversationSample, record: KnowledgeRecord,
                   policy: cleaner.CleanPolicy) -> float:
    scores = [
        cleaner.grounding_score(t.text, record, policy)
        for t in sample.turns
        if t.speaker == "assistant"
    ]
    return min(scores) if scores else 0.0


def generate_instruction_sample(image: ImageRef, record: KnowledgeRecord,
                                backend: TeacherBackend,
                                config: TeacherConfig = DEFAULT_TEACHER_CONFIG,
                                policy: cleaner.CleanPolicy = cleaner.DEFAULT_POLICY,
                                ) -> InstructionOutcome:
    """Drive the backend to one instruction sample plus its check report.

    Retries up to config.max_attempts on backend errors, unparseable
    responses, and failed checks; if no attempt comes out clean, the
    best-scoring dirty attempt is surfaced with its report. Raises
    GenerationError only when no attempt produced a parseable sample.
    """
    prompt = build_instruct_prompt(record, config)
    candidates: list[tuple[tuple[int, float], InstructionOutcome]] = []
    last_error: Exception | None = None

    for attempt in range(1, config.max_attempts + 1):
        try:
            response = backend.send(prompt)
        except BackendError as exc:
            last_error = exc
            logger.warning("backend error for %s (attempt %d): %s",
                           image.file_name, attempt, exc)
            continue
        try:
            turns = parse_conversation(response)
        except ParseError as exc:
            last_error = exc
            logger.warning("unparseable response for %s (attempt %d): %s",
                           image.file_name, attempt, exc)
            continue
        sample = _attach_image(turns, image)
        report = _check_generated(sample, record, config, policy)
        outcome = InstructionOutcome(sample=sample, report=report, attempt_count=attempt)
        if report.ok:
            return outcome
        rank = (len(report.violations), -_min_grounding(sample, record, policy))
        candidates.append((rank, outcome))

    if candidates:
        best = min(candidates, key=lambda pair: pair[0])[1]
        return InstructionOutcome(
            sample=best.sample, report=best.report, attempt_count=config.max_attempts
        )
    raise GenerationError(
        f"no usable response for {image.file_name} after {config.max_attempts} attempts: "
        f"{last_error}"
    )


def generate_instruction_corpus(tasks: Iterable[tuple[ImageRef, KnowledgeRecord]],
                                backend: TeacherBackend,
                                config: TeacherConfig = DEFAULT_TEACHER_CONFIG,
                                policy: cleaner.CleanPolicy = cleaner.DEFAULT_POLICY,
                                concurrency: int = 1) -> list[InstructionOutcome]:
    """Generate for every (image, record) pair, preserving input order.

    ``concurrency`` bounds in-flight backend requests; output order never
    depends on completion order.
    """
    tasks = list(tasks)
    if concurrency <= 1:
        return [
            generate_instruction_sample(image, record, backend, config, policy)
            for image, record in tasks
        ]
    with ThreadPoolExecutor(max_workers=concurrency) as pool:
        futures = [
            pool.submit(generate_instruction_sample, image, record, backend, config, policy)
            for image, record in tasks
        ]
        return [f.result() for f in futures]
