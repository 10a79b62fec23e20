"""Chat-completion gateway: trace generation, step judging, and aggregation.

Renders the generation/judging prompts, talks to chat-completion endpoints
with retries and an append-only verdict cache, and turns per-judge step
verdicts into step scores, a trace-level integrity score (RIS), the flawed
flag, and error/misuse labels.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Iterable, Optional, Protocol

import requests

from .errors import (
    EmptyTrace,
    ParseError,
    RateLimited,
    TransportError,
    UnparseableVerdict,
)
from .traces import (
    Condition,
    ReasoningTrace,
    TaskRecord,
    _read_jsonl,
    _write_jsonl,
    render_generation_prompt,
    trace_from_json,
    trace_from_raw,
    trace_to_json,
)

log = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.8

# Judge prompts. The binary frame, the error taxonomy, and the misuse rubric
# are fixed texts with {context}/{step} slots; the three-level variant keeps
# the binary frame but asks for a score on the 1.0/0.5/0.0 rubric.
BINARY_JUDGE_TEMPLATE = (
    "You are a strict verifier. Your task is to determine if the 'Generated Step' "
    "is logically and factually supported by the 'Context'.\n"
    " Context: {context}\n"
    " Generated Step: {step}\n"
    " Is the 'Generated Step' fully and correctly supported by the 'Context'? "
    "Respond with only 'Yes' or 'No'."
)

THREE_LEVEL_JUDGE_TEMPLATE = (
    "You are a strict verifier. Your task is to determine if the 'Generated Step' "
    "is logically and factually supported by the 'Context'.\n"
    " Context: {context}\n"
    " Generated Step: {step}\n"
    " Score the 'Generated Step' on this scale: 1.0 (fully correct), 0.5 (partial "
    "flaw), 0.0 (wrong). Respond with only '1.0', '0.5', or '0.0'."
)

ERROR_CLASSIFIER_TEMPLATE = (
    "You are an error analyst. The 'Generated Step' was deemed flawed (incorrect). "
    "Given the 'Context', classify the primary error in the 'Generated Step'.\n"
    " Categories: [1. Factual Error, 2. Logical Leap, 3. Numerical Miscalculation, "
    "4. Other]\n"
    " Context: {context}\n"
    " Generated Step: {step}\n"
    " Output only the category name."
)

MISUSE_CLASSIFIER_TEMPLATE = (
    "You are an error analyst. Determine if the 'Generated Step' misuses the "
    "'Context'.\n"
    " Misapplication: references context but uses it incorrectly (e.g., logical "
    "error, misquote, misinterpretation).\n"
    " Correct: uses the context correctly.\n"
    " Irrelevant: does not use the context at all.\n"
    " Context: {context}\n"
    " Generated Step: {step}\n"
    " Respond with only 'Misapplication', 'Correct', or 'Irrelevant'."
)

_PLACEHOLDER = re.compile(r"\{(context|step)\}")
_BINARY_VERDICT = re.compile(r"\b(yes|no)\b", re.IGNORECASE)
_THREE_LEVEL_VERDICT = re.compile(r"1\.0|0\.5|0\.0")
_MISUSE_VERDICT = re.compile(
    r"\W*(misapplication|correct|irrelevant)\W*\Z", re.IGNORECASE
)

VALID_SCORES = (0.0, 0.5, 1.0)


class RubricMode(str, Enum):
    BINARY = "binary"
    THREE_LEVEL = "three_level"


class ErrorCategory(str, Enum):
    CALCULATION_ERROR = "calculation_error"
    HALLUCINATION = "hallucination"
    LOGICAL_LEAP = "logical_leap"
    OTHER = "other"


class MisuseVerdict(str, Enum):
    MISAPPLICATION = "misapplication"
    CORRECT = "correct"
    IRRELEVANT = "irrelevant"


@dataclass(frozen=True)
class ModelEndpoint:
    """One chat-completion model: identifier, endpoint base, temperature."""

    model: str
    base_url: str = ""
    temperature: float = 0.0

    def __post_init__(self):
        if not self.model:
            raise ValueError("model identifier must be nonempty")


@dataclass(frozen=True)
class RetryPolicy:
    max_attempts: int = 4
    backoff_base_s: float = 0.5

    def __post_init__(self):
        if self.max_attempts < 1:
            raise ValueError("max_attempts must be >= 1")
        if self.backoff_base_s < 0:
            raise ValueError("backoff_base_s must be >= 0")


@dataclass(frozen=True)
class JudgeConfig:
    """Panel configuration: 1-5 judges, odd panel size in binary mode."""

    judges: tuple[ModelEndpoint, ...]
    rubric_mode: RubricMode = RubricMode.THREE_LEVEL
    max_in_flight: int = 8
    retry: RetryPolicy = field(default_factory=RetryPolicy)
    cache_path: Optional[Path] = None

    def __post_init__(self):
        object.__setattr__(self, "judges", tuple(self.judges))
        if not 1 <= len(self.judges) <= 5:
            raise ValueError("panel size must be between 1 and 5 judges")
        if self.rubric_mode is RubricMode.BINARY and len(self.judges) % 2 == 0:
            raise ValueError("binary rubric requires an odd panel size")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


@dataclass(frozen=True)
class StepVerdict:
    """Panel verdicts for one step plus their majority aggregate."""

    step_index: int
    per_judge_scores: tuple[float, ...]
    aggregate: float
    raw_responses: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "per_judge_scores", tuple(self.per_judge_scores))
        object.__setattr__(self, "raw_responses", tuple(self.raw_responses))
        if not self.per_judge_scores:
            raise ValueError("per_judge_scores must be nonempty")
        if any(s not in VALID_SCORES for s in self.per_judge_scores):
            raise ValueError(f"scores must be in {VALID_SCORES}")
        if self.aggregate not in set(self.per_judge_scores) | {0.5}:
            raise ValueError("aggregate must be a panel score or the 0.5 midpoint")
        if len(self.raw_responses) != len(self.per_judge_scores):
            raise ValueError("one raw response per judge required")


@dataclass(frozen=True)
class ScoredTrace:
    """A trace with per-step verdicts, RIS, and the flawed flag.

    error_labels / misuse_labels, when present, align with the trace's steps
    (entries for unclassified steps are None).
    """

    trace: ReasoningTrace
    verdicts: tuple[StepVerdict, ...]
    ris: float
    flawed: bool
    error_labels: Optional[tuple[Optional[ErrorCategory], ...]] = None
    misuse_labels: Optional[tuple[Optional[MisuseVerdict], ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "verdicts", tuple(self.verdicts))
        if len(self.verdicts) != len(self.trace.steps):
            raise ValueError("one verdict per step required")
        for verdict, step in zip(self.verdicts, self.trace.steps):
            if verdict.step_index != step.index:
                raise ValueError("verdict step_index must match the step")
        if self.verdicts:
            mean = math.fsum(v.aggregate for v in self.verdicts) / len(self.verdicts)
            if abs(self.ris - mean) > 1e-9:
                raise ValueError("ris must be the mean of step aggregates")
        if not 0.0 <= self.ris <= 1.0:
            raise ValueError("ris must be in [0, 1]")
        for labels in (self.error_labels, self.misuse_labels):
            if labels is not None and len(labels) != len(self.trace.steps):
                raise ValueError("label list must align with steps")

    def is_flawed_at(self, threshold: float) -> bool:
        """Strict inequality: a trace exactly at the threshold is not flawed."""
        return self.ris < threshold


# --- prompt rendering ---------------------------------------------------------


def _fill(template: str, context: str, step: str) -> str:
    """Single-pass placeholder substitution; values are never re-expanded."""
    mapping = {"context": context, "step": step}
    return _PLACEHOLDER.sub(lambda m: mapping[m.group(1)], template)


def render_step_judgment_prompt(context: str, step: str, mode: RubricMode) -> str:
    if not step:
        raise ValueError("step text must be nonempty")
    template = (
        BINARY_JUDGE_TEMPLATE if mode is RubricMode.BINARY else THREE_LEVEL_JUDGE_TEMPLATE
    )
    return _fill(template, context, step)


def render_error_prompt(context: str, step: str) -> str:
    return _fill(ERROR_CLASSIFIER_TEMPLATE, context, step)


def render_misuse_prompt(context: str, step: str) -> str:
    return _fill(MISUSE_CLASSIFIER_TEMPLATE, context, step)


def build_step_context(
    trace: ReasoningTrace, step_position: int, question: Optional[str] = None
) -> str:
    """Judging context for the step at 0-based position: the task question
    (when known) followed by all preceding step texts."""
    parts = []
    if question:
        parts.append(f"Question: {question}")
    for step in trace.steps[:step_position]:
        parts.append(f"Step {step.index}: {step.text}")
    return "\n".join(parts) if parts else "(none)"


# --- verdict parsing & aggregation ---------------------------------------------


def parse_verdict(raw: str, mode: RubricMode) -> float:
    """Extract a step score from a judge response.

    Binary: the first standalone yes/no (case-insensitive) maps to 1.0/0.0.
    ThreeLevel: the first standalone occurrence of 1.0/0.5/0.0.
    """
    if mode is RubricMode.BINARY:
        match = _BINARY_VERDICT.search(raw)
        if match:
            return 1.0 if match.group(1).lower() == "yes" else 0.0
    else:
        match = _THREE_LEVEL_VERDICT.search(raw)
        if match:
            return float(match.group(0))
    raise UnparseableVerdict(f"no {mode.value} verdict in {raw[:80]!r}")


def aggregate_verdicts(per_judge: Iterable[float]) -> float:
    """Majority vote over a step's panel scores.

    A value held by at least ceil(n/2) judges wins; when no single value has
    a majority the median is used, snapped to 0.5 if it falls between rubric
    levels. Permutation-invariant by construction.
    """
    scores = list(per_judge)
    if not scores:
        raise ValueError("cannot aggregate an empty panel")
    counts: dict[float, int] = {}
    for s in scores:
        if s not in VALID_SCORES:
            raise ValueError(f"scores must be in {VALID_SCORES}")
        counts[s] = counts.get(s, 0) + 1
    need = math.ceil(len(scores) / 2)
    winners = [s for s, c in counts.items() if c >= need]
    if len(winners) == 1:
        return winners[0]
    scores.sort()
    mid = len(scores) // 2
    if len(scores) % 2 == 1:
        return scores[mid]
    median = (scores[mid - 1] + scores[mid]) / 2
    return median if median in VALID_SCORES else 0.5


def misuse_fraction(labels: Iterable[Optional[MisuseVerdict]]) -> float:
    """Fraction of context-referencing steps (non-Irrelevant) judged
    Misapplication; 0.0 when no step references the context."""
    present = [l for l in labels if l is not None]
    referencing = [l for l in present if l is not MisuseVerdict.IRRELEVANT]
    if not referencing:
        return 0.0
    bad = sum(1 for l in referencing if l is MisuseVerdict.MISAPPLICATION)
    return bad / len(referencing)


# --- verdict cache --------------------------------------------------------------


def verdict_cache_key(model: str, prompt: str) -> str:
    digest = hashlib.sha256()
    digest.update(model.encode("utf-8"))
    digest.update(b"\x00")
    digest.update(prompt.encode("utf-8"))
    return digest.hexdigest()


class VerdictCache:
    """Append-only JSONL response cache, one {"key","judge","response",
    "timestamp"} object per line. Concurrent readers, serialized writers."""

    def __init__(self, path: str | Path):
        self._path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[str, str] = {}
        if self._path.exists():
            with open(self._path, encoding="utf-8") as fh:
                for line_no, line in enumerate(fh, start=1):
                    if not line.strip():
                        continue
                    try:
                        obj = json.loads(line)
                        self._entries[obj["key"]] = obj["response"]
                    except (json.JSONDecodeError, KeyError, TypeError) as exc:
                        raise ParseError(f"corrupt cache entry: {exc}", line_no) from exc

    def __len__(self) -> int:
        return len(self._entries)

    def get(self, key: str) -> Optional[str]:
        with self._lock:
            return self._entries.get(key)

    def put(self, key: str, judge: str, response: str) -> None:
        record = {
            "key": key,
            "judge": judge,
            "response": response,
            "timestamp": time.time(),
        }
        with self._lock:
            self._entries[key] = response
            self._path.parent.mkdir(parents=True, exist_ok=True)
            with open(self._path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, ensure_ascii=False))
                fh.write("\n")


# --- transport -------------------------------------------------------------------


class ChatTransport(Protocol):
    def complete(
        self,
        endpoint: ModelEndpoint,
        messages: list[dict],
        temperature: Optional[float] = None,
    ) -> str: ...


class HttpChatTransport:
    """Chat-completion HTTP client with bounded retries.

    Retries transport failures, 5xx, and 429 with exponential backoff
    (base 500 ms doubling per attempt); other 4xx fail immediately. The
    exception surfaced after the final attempt keeps its type, so a run
    that died rate-limited raises RateLimited rather than a bare
    TransportError.
    """

    def __init__(
        self,
        retry: RetryPolicy | None = None,
        timeout_s: float = 60.0,
        api_key: Optional[str] = None,
        sleeper: Callable[[float], None] = time.sleep,
    ):
        self._retry = retry or RetryPolicy()
        self._timeout_s = timeout_s
        self._api_key = api_key
        self._sleeper = sleeper

    def complete(
        self,
        endpoint: ModelEndpoint,
        messages: list[dict],
        temperature: Optional[float] = None,
    ) -> str:
        base = endpoint.base_url or os.environ.get("RIS_API_BASE", "")
        if not base:
            raise TransportError(
                f"no endpoint base URL for {endpoint.model}; set RIS_API_BASE"
            )
        url = base.rstrip("/") + "/chat/completions"
        body = {
            "model": endpoint.model,
            "messages": messages,
            "temperature": endpoint.temperature if temperature is None else temperature,
        }
        headers = {}
        api_key = self._api_key or os.environ.get("RIS_API_KEY")
        if api_key:
            headers["Authorization"] = f"Bearer {api_key}"

        last_error: TransportError = TransportError("no attempts made")
        for attempt in range(1, self._retry.max_attempts + 1):
            try:
                resp = requests.post(
                    url, json=body, headers=headers, timeout=self._timeout_s
                )
            except requests.RequestException as exc:
                last_error = TransportError(f"request to {url} failed: {exc}")
            else:
                if resp.status_code == 429:
                    last_error = RateLimited(f"429 from {url}")
                elif resp.status_code >= 500:
                    last_error = TransportError(f"{resp.status_code} from {url}")
                elif resp.status_code >= 400:
                    raise TransportError(f"{resp.status_code} from {url}: {resp.text[:200]}")
                else:
                    try:
                        return resp.json()["choices"][0]["message"]["content"]
                    except (ValueError, KeyError, IndexError, TypeError) as exc:
                        last_error = TransportError(f"malformed response from {url}: {exc}")
            if attempt < self._retry.max_attempts:
                self._sleeper(self._retry.backoff_base_s * 2 ** (attempt - 1))
        raise last_error


# --- client ------------------------------------------------------------------------


class JudgeClient:
    """Panel orchestration: cached judge queries, step scoring, trace-level
    aggregation, and error/misuse labeling."""

    def __init__(
        self,
        config: JudgeConfig,
        transport: Optional[ChatTransport] = None,
        cache: Optional[VerdictCache] = None,
    ):
        self.config = config
        self.transport = transport or HttpChatTransport(retry=config.retry)
        if cache is None and config.cache_path is not None:
            cache = VerdictCache(config.cache_path)
        self.cache = cache

    def query_judge(
        self, judge: ModelEndpoint, prompt: str, *, bypass_cache: bool = False
    ) -> str:
        key = verdict_cache_key(judge.model, prompt)
        if self.cache is not None and not bypass_cache:
            hit = self.cache.get(key)
            if hit is not None:
                return hit
        content = self.transport.complete(
            judge, [{"role": "user", "content": prompt}]
        )
        if self.cache is not None:
            self.cache.put(key, judge.model, content)
        return content

    def _judge_step(self, judge: ModelEndpoint, context: str, step_text: str) -> tuple[float, str]:
        prompt = render_step_judgment_prompt(context, step_text, self.config.rubric_mode)
        raw = self.query_judge(judge, prompt)
        try:
            return parse_verdict(raw, self.config.rubric_mode), raw
        except UnparseableVerdict:
            raw = self.query_judge(judge, prompt, bypass_cache=True)
            try:
                return parse_verdict(raw, self.config.rubric_mode), raw
            except UnparseableVerdict:
                log.warning(
                    "judge %s verdict unparseable after re-query, scoring 0.0: %r",
                    judge.model,
                    raw[:80],
                )
                return 0.0, raw

    def score_trace(
        self,
        trace: ReasoningTrace,
        threshold: float = DEFAULT_THRESHOLD,
        question: Optional[str] = None,
    ) -> ScoredTrace:
        """Judge every step with the full panel and aggregate into RIS.

        Requests fan out over a bounded pool; results are assembled by
        (step, judge) key, so the outcome is independent of completion order.
        """
        if not trace.steps:
            raise EmptyTrace(f"trace {trace.record_id} has no steps to judge")
        contexts = [
            build_step_context(trace, pos, question) for pos in range(len(trace.steps))
        ]
        tasks = [
            (pos, judge_idx)
            for pos in range(len(trace.steps))
            for judge_idx in range(len(self.config.judges))
        ]
        results: dict[tuple[int, int], tuple[float, str]] = {}
        with ThreadPoolExecutor(max_workers=self.config.max_in_flight) as pool:
            futures = {
                pool.submit(
                    self._judge_step,
                    self.config.judges[judge_idx],
                    contexts[pos],
                    trace.steps[pos].text,
                ): (pos, judge_idx)
                for pos, judge_idx in tasks
            }
            for future, task in futures.items():
                results[task] = future.result()

        verdicts = []
        for pos, step in enumerate(trace.steps):
            scores = tuple(results[(pos, j)][0] for j in range(len(self.config.judges)))
            raws = tuple(results[(pos, j)][1] for j in range(len(self.config.judges)))
            verdicts.append(
                StepVerdict(
                    step_index=step.index,
                    per_judge_scores=scores,
                    aggregate=aggregate_verdicts(scores),
                    raw_responses=raws,
                )
            )
        ris = math.fsum(v.aggregate for v in verdicts) / len(verdicts)
        return ScoredTrace(
            trace=trace,
            verdicts=tuple(verdicts),
            ris=ris,
            flawed=ris < threshold,
        )

    def classify_error(self, context: str, step: str) -> ErrorCategory:
        """Classify the primary error in a step already judged flawed."""
        raw = self.query_judge(self.config.judges[0], render_error_prompt(context, step))
        lowered = raw.lower()
        hits = [
            (lowered.find(name), category)
            for name, category in (
                ("numerical miscalculation", ErrorCategory.CALCULATION_ERROR),
                ("factual error", ErrorCategory.HALLUCINATION),
                ("logical leap", ErrorCategory.LOGICAL_LEAP),
                ("other", ErrorCategory.OTHER),
            )
            if lowered.find(name) >= 0
        ]
        if not hits:
            log.warning("unrecognized error category %r, using Other", raw[:80])
            return ErrorCategory.OTHER
        return min(hits)[1]

    def classify_misuse(self, context: str, step: str) -> MisuseVerdict:
        """Strict three-word misuse verdict for a step of a RAG trace."""
        raw = self.query_judge(self.config.judges[0], render_misuse_prompt(context, step))
        match = _MISUSE_VERDICT.fullmatch(raw.strip())
        if match is None:
            log.warning("unparseable misuse verdict %r, using Irrelevant", raw[:80])
            return MisuseVerdict.IRRELEVANT
        return MisuseVerdict(match.group(1).lower())

    def label_trace_errors(
        self, scored: ScoredTrace, question: Optional[str] = None
    ) -> ScoredTrace:
        """Attach an error category to every flawed step (aggregate < 1.0)."""
        labels: list[Optional[ErrorCategory]] = []
        for pos, (step, verdict) in enumerate(zip(scored.trace.steps, scored.verdicts)):
            if verdict.aggregate < 1.0:
                context = build_step_context(scored.trace, pos, question)
                labels.append(self.classify_error(context, step.text))
            else:
                labels.append(None)
        return replace(scored, error_labels=tuple(labels))

    def label_trace_misuse(
        self, scored: ScoredTrace, retrieval_context: str
    ) -> ScoredTrace:
        """Attach a misuse verdict to every step, judged against the
        retrieved context of a RAG trace."""
        labels = tuple(
            self.classify_misuse(retrieval_context, step.text)
            for step in scored.trace.steps
        )
        return replace(scored, misuse_labels=labels)

    def generate_trace(
        self,
        record: TaskRecord,
        condition: Condition,
        generator: ModelEndpoint,
        temperature: Optional[float] = None,
    ) -> ReasoningTrace:
        """Prompt the generator under one condition and parse the output."""
        pair = render_generation_prompt(record, condition)
        content = self.transport.complete(
            generator,
            [
                {"role": "system", "content": pair.system},
                {"role": "user", "content": pair.user},
            ],
            temperature=temperature,
        )
        return trace_from_raw(record, condition, generator.model, content)


# --- scored-trace JSONL codec --------------------------------------------------------
#
# One object per line: {"trace": <trace object>, "verdicts": [{"step_index",
# "per_judge_scores", "aggregate", "raw_responses"}], "ris", "flawed",
# "error_labels": [category|null per step] | null, "misuse_labels": likewise}.


def scored_to_json(scored: ScoredTrace) -> dict:
    return {
        "trace": trace_to_json(scored.trace),
        "verdicts": [
            {
                "step_index": v.step_index,
                "per_judge_scores": list(v.per_judge_scores),
                "aggregate": v.aggregate,
                "raw_responses": list(v.raw_responses),
            }
            for v in scored.verdicts
        ],
        "ris": scored.ris,
        "flawed": scored.flawed,
        "error_labels": (
            None
            if scored.error_labels is None
            else [c.value if c is not None else None for c in scored.error_labels]
        ),
        "misuse_labels": (
            None
            if scored.misuse_labels is None
            else [m.value if m is not None else None for m in scored.misuse_labels]
        ),
    }


def scored_from_json(obj: dict, line: int | None = None) -> ScoredTrace:
    try:
        error_labels = obj.get("error_labels")
        misuse_labels = obj.get("misuse_labels")
        return ScoredTrace(
            trace=trace_from_json(obj["trace"], line),
            verdicts=tuple(
                StepVerdict(
                    step_index=v["step_index"],
                    per_judge_scores=tuple(v["per_judge_scores"]),
                    aggregate=v["aggregate"],
                    raw_responses=tuple(v["raw_responses"]),
                )
                for v in obj["verdicts"]
            ),
            ris=obj["ris"],
            flawed=obj["flawed"],
            error_labels=(
                None
                if error_labels is None
                else tuple(
                    ErrorCategory(c) if c is not None else None for c in error_labels
                )
            ),
            misuse_labels=(
                None
                if misuse_labels is None
                else tuple(
                    MisuseVerdict(m) if m is not None else None for m in misuse_labels
                )
            ),
        )
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(str(exc), line) from exc


def read_scored(path: str | Path) -> list[ScoredTrace]:
    return _read_jsonl(path, scored_from_json)


def write_scored(path: str | Path, scored: Iterable[ScoredTrace]) -> None:
    _write_jsonl(path, (scored_to_json(s) for s in scored))
