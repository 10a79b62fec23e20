"""Domain model and codecs for step-structured reasoning traces.

Covers everything upstream of judging: splitting raw model output into
ordered steps, extracting and normalizing the final answer, checking it
against gold, rendering the generation prompts for the four experiment
conditions, and reading/writing the JSONL interchange formats.

All values are immutable after construction and safe to share across
threads; the functions here are pure apart from file I/O.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Optional

from .errors import MissingContext, ParseError

BASE_SYSTEM_PROMPT = (
    "Solve the user's request step by step. For math problems, put the final "
    "answer in brackets [like this]. For multiple-choice questions, put the "
    "final answer (e.g., [A] or [1]) in brackets."
)

VERIFICATION_PREFIX = "Verify each step before proceeding."
SELF_CRITIQUE_SUFFIX = "After solving, review your reasoning for any flaws."

# Step marker grammar is fixed: "step", one space, digits, optional space,
# colon. Markers only count at line starts or after sentence boundaries,
# so prose like "In step 3: ..." does not split.
_STEP_MARKER = re.compile(r"step \d+ ?:", re.IGNORECASE)
_ANSWER_MARKER = re.compile(r"\b(?:final answer|answer) ?:", re.IGNORECASE)
_TRAILING_BRACKET = re.compile(r"\[[^\[\]]*\]\s*[.!?]*\s*$")
_ANY_BRACKET = re.compile(r"\[([^\[\]]*)\]")
_NUMERIC_ANSWER = re.compile(r"[+-]?(?:\d{1,3}(?:,\d{3})+|\d+)(?:\.\d+)?")
_WHITESPACE = re.compile(r"\s+")


class Dataset(str, Enum):
    GSM8K = "gsm8k"
    HOTPOTQA = "hotpotqa"
    ARC = "arc"
    OTHER = "other"


class Condition(str, Enum):
    BASELINE = "baseline"
    RAG = "rag"
    SELF_CRITIQUE = "self_critique"
    VERIFICATION = "verification"


@dataclass(frozen=True)
class TaskRecord:
    """One benchmark question with its gold answer and optional context."""

    id: str
    dataset: Dataset
    question: str
    gold_answer: str
    context: Optional[str] = None
    metadata: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.id:
            raise ValueError("record id must be nonempty")
        if not self.gold_answer:
            raise ValueError("gold_answer must be nonempty")


@dataclass(frozen=True)
class ReasoningStep:
    """A single reasoning step with its character extent in the raw output."""

    index: int
    text: str
    char_span: tuple[int, int]

    def __post_init__(self):
        if self.index < 1:
            raise ValueError("step index must be >= 1")
        start, end = self.char_span
        if start < 0 or end < start:
            raise ValueError(f"invalid char_span {self.char_span}")


@dataclass(frozen=True)
class ReasoningTrace:
    """Raw model output decomposed into ordered steps plus the final answer."""

    record_id: str
    dataset: Dataset
    model: str
    condition: Condition
    raw_output: str
    steps: tuple[ReasoningStep, ...]
    final_answer: Optional[str] = None
    answer_correct: Optional[bool] = None

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        prev_end = 0
        for pos, step in enumerate(self.steps, start=1):
            if step.index != pos:
                raise ValueError(
                    f"step indices must be contiguous from 1, got {step.index} at position {pos}"
                )
            start, end = step.char_span
            if end > len(self.raw_output):
                raise ValueError("char_span exceeds raw_output bounds")
            if start < prev_end:
                raise ValueError("char_spans must be ordered and non-overlapping")
            prev_end = end
        if self.final_answer is None and self.answer_correct is not None:
            raise ValueError("answer_correct requires final_answer")


@dataclass(frozen=True)
class PromptPair:
    """System and user message for one generation request."""

    system: str
    user: str

    def __post_init__(self):
        if not self.system:
            raise ValueError("system prompt must be nonempty")


def _is_marker_position(raw: str, start: int) -> bool:
    """A step marker only counts at a line start or after a sentence boundary."""
    if start == 0:
        return True
    prefix = raw[:start]
    line_start = prefix.rfind("\n") + 1
    if prefix[line_start:].strip() == "":
        return True
    stripped = prefix.rstrip()
    return len(stripped) < len(prefix) and stripped[-1] in ".!?"


def _tail_cut(raw: str, region_start: int) -> int:
    """End of reasoning text in the tail region: the first final-answer
    marker, or a trailing bracketed answer, whichever comes first."""
    cut = len(raw)
    marker = _ANSWER_MARKER.search(raw, region_start)
    if marker is not None:
        cut = min(cut, marker.start())
    bracket = _TRAILING_BRACKET.search(raw, region_start)
    if bracket is not None:
        cut = min(cut, bracket.start())
    return cut


def _stripped_extent(raw: str, start: int, end: int) -> tuple[str, tuple[int, int]]:
    chunk = raw[start:end]
    text = chunk.strip()
    if not text:
        return "", (start, start)
    left = start + (len(chunk) - len(chunk.lstrip()))
    return text, (left, left + len(text))


def parse_steps(raw_output: str) -> list[ReasoningStep]:
    """Split raw model output into ordered reasoning steps.

    Splits on "Step <n>:" markers (case-insensitive) at line starts or after
    sentence boundaries. Step text runs to the next marker; the last step's
    text stops at the final-answer marker or a trailing bracketed answer.
    Indices are renumbered 1..n in textual order regardless of the model's
    own numbering. Output with no markers becomes a single step covering
    all non-answer text, if any; empty input yields no steps.
    """
    if not raw_output:
        return []
    markers = [
        m
        for m in _STEP_MARKER.finditer(raw_output)
        if _is_marker_position(raw_output, m.start())
    ]
    if markers:
        regions = []
        for i, marker in enumerate(markers):
            start = marker.end()
            if i + 1 < len(markers):
                end = markers[i + 1].start()
            else:
                end = _tail_cut(raw_output, start)
            regions.append((start, end))
    else:
        regions = [(0, _tail_cut(raw_output, 0))]

    steps: list[ReasoningStep] = []
    for start, end in regions:
        text, span = _stripped_extent(raw_output, start, max(start, end))
        if text:
            steps.append(ReasoningStep(index=len(steps) + 1, text=text, char_span=span))
    return steps


def normalize_answer(text: str) -> Optional[str]:
    """Canonical form of an answer string.

    Trims, strips surrounding brackets/periods, collapses internal
    whitespace, lowercases non-numeric answers, and writes numeric answers
    in canonical decimal form. Returns None when nothing remains.
    """
    s = text
    while True:
        trimmed = s.strip().strip("[].")
        if trimmed == s:
            break
        s = trimmed
    s = _WHITESPACE.sub(" ", s)
    if not s:
        return None
    if _NUMERIC_ANSWER.fullmatch(s):
        return _canonical_number(s)
    return s.lower()


def _canonical_number(s: str) -> str:
    s = s.replace(",", "")
    sign = ""
    if s[0] in "+-":
        sign = "-" if s[0] == "-" else ""
        s = s[1:]
    if "." in s:
        int_part, frac_part = s.split(".", 1)
        frac_part = frac_part.rstrip("0")
    else:
        int_part, frac_part = s, ""
    int_part = int_part.lstrip("0") or "0"
    out = int_part + (f".{frac_part}" if frac_part else "")
    if out == "0":
        sign = ""
    return sign + out


def extract_final_answer(raw_output: str) -> Optional[str]:
    """Pull the final answer out of raw model output, normalized.

    The last bracketed token wins; failing that, the text after the last
    "Final Answer:" / "Answer:" marker. Returns None when neither pattern
    is present.
    """
    if not raw_output:
        return None
    last_bracket = None
    for match in _ANY_BRACKET.finditer(raw_output):
        last_bracket = match
    if last_bracket is not None:
        return normalize_answer(last_bracket.group(1))
    last_marker = None
    for match in _ANSWER_MARKER.finditer(raw_output):
        last_marker = match
    if last_marker is not None:
        return normalize_answer(raw_output[last_marker.end():])
    return None


def check_answer(predicted: str, gold: str) -> bool:
    """True iff the normalized forms agree.

    When both sides parse as numbers the comparison is numeric with an
    absolute tolerance of 1e-6, so "12" matches gold "12.0".
    """
    pred_norm = normalize_answer(predicted)
    gold_norm = normalize_answer(gold)
    if pred_norm is None or gold_norm is None:
        return False
    if pred_norm == gold_norm:
        return True
    if _NUMERIC_ANSWER.fullmatch(pred_norm) and _NUMERIC_ANSWER.fullmatch(gold_norm):
        return abs(float(pred_norm) - float(gold_norm)) <= 1e-6
    return False


def render_generation_prompt(record: TaskRecord, condition: Condition) -> PromptPair:
    """Render the system/user prompt pair for one condition.

    Baseline uses the base system prompt verbatim; Verification prefixes it,
    SelfCritique suffixes it, and RAG injects the record's retrieval context
    into the user prompt. RAG without context raises MissingContext.
    """
    if condition is Condition.RAG:
        if record.context is None:
            raise MissingContext(f"record {record.id} has no context for RAG")
        return PromptPair(
            system=BASE_SYSTEM_PROMPT,
            user=f"Context: {record.context}  {record.question}",
        )
    if condition is Condition.VERIFICATION:
        system = f"{VERIFICATION_PREFIX} {BASE_SYSTEM_PROMPT}"
    elif condition is Condition.SELF_CRITIQUE:
        system = f"{BASE_SYSTEM_PROMPT}  {SELF_CRITIQUE_SUFFIX}"
    else:
        system = BASE_SYSTEM_PROMPT
    return PromptPair(system=system, user=record.question)


# --- JSONL codecs -----------------------------------------------------------
#
# Trace schema, one object per line, fields in this order:
#   {"record_id", "dataset", "model", "condition", "raw_output",
#    "steps": [{"index", "text"}], "final_answer", "answer_correct"}
# Record schema:
#   {"id", "dataset", "question", "gold_answer", "context", "metadata"}
# Absent optionals are serialized as null. All files are UTF-8.


def trace_to_json(trace: ReasoningTrace) -> dict:
    return {
        "record_id": trace.record_id,
        "dataset": trace.dataset.value,
        "model": trace.model,
        "condition": trace.condition.value,
        "raw_output": trace.raw_output,
        "steps": [{"index": s.index, "text": s.text} for s in trace.steps],
        "final_answer": trace.final_answer,
        "answer_correct": trace.answer_correct,
    }


def _recover_spans(raw_output: str, texts: list[str], line: int | None) -> list[tuple[int, int]]:
    """Reconstruct char spans by locating each step text in reading order."""
    spans = []
    cursor = 0
    for text in texts:
        start = raw_output.find(text, cursor)
        if start < 0:
            raise ParseError(f"step text not found in raw_output: {text[:40]!r}", line)
        spans.append((start, start + len(text)))
        cursor = start + len(text)
    return spans


def trace_from_json(obj: dict, line: int | None = None) -> ReasoningTrace:
    try:
        raw_output = obj["raw_output"]
        step_objs = obj["steps"]
        texts = [s["text"] for s in step_objs]
        spans = _recover_spans(raw_output, texts, line)
        steps = tuple(
            ReasoningStep(index=s["index"], text=s["text"], char_span=span)
            for s, span in zip(step_objs, spans)
        )
        return ReasoningTrace(
            record_id=obj["record_id"],
            dataset=Dataset(obj["dataset"]),
            model=obj["model"],
            condition=Condition(obj["condition"]),
            raw_output=raw_output,
            steps=steps,
            final_answer=obj.get("final_answer"),
            answer_correct=obj.get("answer_correct"),
        )
    except ParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(str(exc), line) from exc


def record_to_json(record: TaskRecord) -> dict:
    return {
        "id": record.id,
        "dataset": record.dataset.value,
        "question": record.question,
        "gold_answer": record.gold_answer,
        "context": record.context,
        "metadata": dict(record.metadata),
    }


def record_from_json(obj: dict, line: int | None = None) -> TaskRecord:
    try:
        return TaskRecord(
            id=obj["id"],
            dataset=Dataset(obj["dataset"]),
            question=obj["question"],
            gold_answer=obj["gold_answer"],
            context=obj.get("context"),
            metadata=dict(obj.get("metadata") or {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(str(exc), line) from exc


def _read_jsonl(path: str | Path, loader) -> list:
    items = []
    seen_ids: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line_no) from exc
            item = loader(obj, line_no)
            if isinstance(item, TaskRecord):
                if item.id in seen_ids:
                    raise ParseError(f"duplicate record id {item.id!r}", line_no)
                seen_ids.add(item.id)
            items.append(item)
    return items


def _write_jsonl(path: str | Path, objs: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for obj in objs:
            fh.write(json.dumps(obj, ensure_ascii=False))
            fh.write("\n")


def read_traces(path: str | Path) -> list[ReasoningTrace]:
    return _read_jsonl(path, trace_from_json)


def write_traces(path: str | Path, traces: Iterable[ReasoningTrace]) -> None:
    _write_jsonl(path, (trace_to_json(t) for t in traces))


def read_records(path: str | Path) -> list[TaskRecord]:
    return _read_jsonl(path, record_from_json)


def write_records(path: str | Path, records: Iterable[TaskRecord]) -> None:
    _write_jsonl(path, (record_to_json(r) for r in records))


def trace_from_raw(
    record: TaskRecord,
    condition: Condition,
    model: str,
    raw_output: str,
) -> ReasoningTrace:
    """Build a full trace from raw generator output: parse steps, extract
    the answer, and score it against the record's gold answer."""
    steps = parse_steps(raw_output)
    final_answer = extract_final_answer(raw_output)
    answer_correct = None
    if final_answer is not None:
        answer_correct = check_answer(final_answer, record.gold_answer)
    return ReasoningTrace(
        record_id=record.id,
        dataset=record.dataset,
        model=model,
        condition=condition,
        raw_output=raw_output,
        steps=tuple(steps),
        final_answer=final_answer,
        answer_correct=answer_correct,
    )
