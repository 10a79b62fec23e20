"""Acceptance gate: one test per shipped promise, at the stated tolerances.

Run with -v to get one pass/fail line per criterion. Unit suites cover the
fine structure; each test here exercises one capability end to end, offline
and deterministically:

  1. parser fixture corpus          6. evaluation metric fixture
  2. statistics oracles             7. model codec round-trip
  3. mock-judged RWR pipeline       8. service latency budget
  4. focal loss closed forms        9. desk-scale CLI pipeline
  5. trainer on separable data
"""

from __future__ import annotations

import csv
import json
import math
import random
import re
import statistics
import time

import numpy as np
import pytest
from fastapi.testclient import TestClient

from ris.cli import main
from ris.errors import CorruptModel
from ris.features import FEATURE_DIM, FeatureRecord, FeatureVector, NormStats
from ris.judging import JudgeClient, JudgeConfig, ModelEndpoint, aggregate_verdicts
from ris.service import create_app
from ris.stats import (
    RatingMatrix,
    cohens_d,
    fleiss_kappa,
    pearson_r,
    posthoc_power,
    rwr_table,
    threshold_sweep,
)
from ris.traces import (
    Condition,
    Dataset,
    ReasoningTrace,
    TaskRecord,
    extract_final_answer,
    parse_steps,
    write_records,
)
from ris.verifier import (
    CANONICAL_DIMS,
    TrainConfig,
    VerifierModel,
    evaluate,
    focal_loss,
    init_parameters,
    load_model,
    predict_batch,
    save_model,
    stratified_split,
    train,
)

# --- 1. parser fixtures -------------------------------------------------------------
#
# (raw output, expected step texts in order, expected normalized answer)

_PARSER_FIXTURES = [
    (
        "Step 1: To find 15% of 80, we multiply 0.15 by 80.\n"
        "Step 2: 0.15 × 80 = 12.\n"
        "Answer: 12",
        ["To find 15% of 80, we multiply 0.15 by 80.", "0.15 × 80 = 12."],
        "12",
    ),
    ("Step 1: a.\nStep 2: b.\nStep 3: c.\nAnswer: [42]", ["a.", "b.", "c."], "42"),
    (
        "Step 1: first.\nStep 5: second.\nStep 9: third.\nAnswer: 7",
        ["first.", "second.", "third."],
        "7",
    ),
    (
        "The cat sat on the mat. It was warm.\nAnswer: warm",
        ["The cat sat on the mat. It was warm."],
        "warm",
    ),
    ("Thinking aloud without structure", ["Thinking aloud without structure"], None),
    ("", [], None),
    ("Answer: 42", [], "42"),
    ("Step 1:", [], None),
    (
        "STEP 1 : shout it.\nstep 2: whisper it.\nFinal Answer: yes",
        ["shout it.", "whisper it."],
        "yes",
    ),
    (
        "Step 1: compute the base. Step 2: add the tip.\nAnswer: 50",
        ["compute the base.", "add the tip."],
        "50",
    ),
    (
        "Step 1: we follow step 3: the recipe rule.\nStep 2: done.\nAnswer: 1",
        ["we follow step 3: the recipe rule.", "done."],
        "1",
    ),
    ("Step 1: multiply.\nAnswer: 1,234", ["multiply."], "1234"),
    ("Step 1: divide.\nAnswer: 3.500", ["divide."], "3.5"),
    ("Step 1: count.\nAnswer: +007", ["count."], "7"),
    ("Step 1: cancel.\nAnswer: -0", ["cancel."], "0"),
    ("Step 1: derive.\nAnswer: 5 but actually [7]", ["derive."], "7"),
    ("Step 1: audit.\nAnswer: 100.00", ["audit."], "100"),
    ("Step 1: survey.\nAnswer:  Mount   Everest ", ["survey."], "mount everest"),
    (
        "Step 1: reason hard.\nThe answer is [12].",
        ["reason hard.\nThe answer is"],
        "12",
    ),
    (
        "Step 1: try 5.\nAnswer: 5\nStep 2: correct to 6.\nAnswer: 6",
        ["try 5.\nAnswer: 5", "correct to 6."],
        "6",
    ),
    ("Step 1: alpha.\r\nStep 2: beta.\r\nAnswer: 3\r\n", ["alpha.", "beta."], "3"),
    (
        "Step 1: is it prime? Step 2: yes, check divisors.\nAnswer: yes",
        ["is it prime?", "yes, check divisors."],
        "yes",
    ),
    ("Step 1: compute 3 × 4 = 12 ✓.\nAnswer: 12", ["compute 3 × 4 = 12 ✓."], "12"),
    ("Step 10: begin.\nStep 11: end.\nAnswer: [ok]", ["begin.", "end."], "ok"),
    (
        "Let me think.\nStep 1: actual work.\nAnswer: 1",
        ["actual work."],
        "1",
    ),
    (
        "Step 1: go.\nStep 2 we skip this line.\nStep 3: stop.\nAnswer: 9",
        ["go.\nStep 2 we skip this line.", "stop."],
        "9",
    ),
    ("All in one breath here. Final Answer: [C]", ["All in one breath here."], "c"),
    (
        "Step 1: one.\nStep 1: again one.\nStep 2: two.\nAnswer: 3",
        ["one.", "again one.", "two."],
        "3",
    ),
    ("Step 1: wow! Step 2: calm.\nAnswer: ok", ["wow!", "calm."], "ok"),
    ("Step 1: subtract.\nAnswer: -12.50", ["subtract."], "-12.5"),
    ("Step 1: alpha.\n\nStep 2: beta.\nAnswer: 0", ["alpha.", "beta."], "0"),
    ("  Step 1: padded start.\nAnswer: 3", ["padded start."], "3"),
    ("Step 1:tight text.\nStep 2:more.\nAnswer: 4", ["tight text.", "more."], "4"),
    ("Step 0: zeroth counts.\nAnswer: 5", ["zeroth counts."], "5"),
    ("Step 1: hmm.\nAnswer:", ["hmm."], None),
    ("Step 1: void.\nAnswer: []", ["void."], None),
    ("Step 1: sum the ledger.\nAnswer: 12,345.60", ["sum the ledger."], "12345.6"),
    ("step 12 : both spaced.\nAnswer: 12", ["both spaced."], "12"),
    ("Step 1: option B fits.\nAnswer: [B]", ["option B fits."], "b"),
]


def test_parser_fixture_corpus_under_one_second():
    assert len(_PARSER_FIXTURES) >= 25
    started = time.perf_counter()
    for raw, texts, answer in _PARSER_FIXTURES:
        steps = parse_steps(raw)
        assert [s.text for s in steps] == texts, raw
        assert [s.index for s in steps] == list(range(1, len(texts) + 1)), raw
        for step in steps:
            lo, hi = step.char_span
            assert raw[lo:hi] == step.text, raw
        assert extract_final_answer(raw) == answer, raw
    elapsed = time.perf_counter() - started
    assert elapsed < 1.0, f"parsed {len(_PARSER_FIXTURES)} fixtures in {elapsed:.3f}s"


# --- 2. statistics oracles ------------------------------------------------------------


def test_statistics_match_oracles_and_properties():
    # Hand-worked kappa on two items, three raters, categories {0, 0.5, 1}.
    matrix = RatingMatrix.from_ratings(
        [(1.0, 1.0, 0.5), (0.0, 0.0, 0.0)], categories=(0.0, 0.5, 1.0)
    )
    assert fleiss_kappa(matrix) == pytest.approx(5 / 11, abs=1e-9)

    unanimous = RatingMatrix.from_ratings([(1.0,) * 4, (0.0,) * 4, (1.0,) * 4])
    assert fleiss_kappa(unanimous) == 1.0

    uniform = RatingMatrix.from_ratings([(0.0, 0.5, 1.0)] * 5, categories=(0.0, 0.5, 1.0))
    assert fleiss_kappa(uniform) == pytest.approx(-0.5, abs=1e-9)

    # Unit pooled variance makes d the raw mean gap.
    assert cohens_d([1, 2, 3], [4, 5, 6]) == pytest.approx(-3.0, abs=1e-9)
    assert pearson_r([1, 2, 3, 4], [1, 3, 2, 4]) == pytest.approx(0.8, abs=1e-9)

    # Simpson integration of the normal pdf gives 0.9988355297 at
    # lambda = 0.41 * sqrt(298^2/596) = 5.00469.
    assert posthoc_power(0.41, 298, 298) == pytest.approx(0.9988355297, abs=1e-6)
    assert posthoc_power(0.0, 298, 298) == pytest.approx(0.05, abs=1e-9)

    # 1,000 random integer-grid cases: d antisymmetry and r affine invariance.
    rng = random.Random(20260819)
    scales = (0.25, 0.5, 2.0, 8.0)
    for _ in range(1000):
        n1, n2 = rng.randint(2, 12), rng.randint(2, 12)
        x = [rng.randint(-50, 50) for _ in range(n1)]
        y = [rng.randint(-50, 50) for _ in range(n2)]
        while len(set(x)) == 1 and len(set(y)) == 1:
            x = [rng.randint(-50, 50) for _ in range(n1)]
            y = [rng.randint(-50, 50) for _ in range(n2)]
        assert cohens_d(x, y) == -cohens_d(y, x)

        n = rng.randint(3, 12)
        a = [rng.randint(-50, 50) for _ in range(n)]
        b = [rng.randint(-50, 50) for _ in range(n)]
        while len(set(a)) == 1 or len(set(b)) == 1:
            a = [rng.randint(-50, 50) for _ in range(n)]
            b = [rng.randint(-50, 50) for _ in range(n)]
        scale = rng.choice(scales)
        shift = rng.randint(-20, 20)
        transformed = [scale * v + shift for v in a]
        assert pearson_r(transformed, b) == pytest.approx(pearson_r(a, b), abs=1e-9)


# --- 3. mock-judged RWR pipeline --------------------------------------------------------

_STEP_LINE = re.compile(r" Generated Step: (.*)")


class _ScriptedPanel:
    """In-process judge transport: the verdict is read off marker words in
    the step under judgment, so every panel member is unanimous."""

    def complete(self, endpoint, messages, temperature=None):
        prompt = messages[-1]["content"]
        match = _STEP_LINE.search(prompt)
        step = match.group(1) if match else ""
        if "BAD" in step:
            return "0.0"
        if "SHAKY" in step:
            return "0.5"
        return "1.0"


_WORD = {1.0: "solid", 0.5: "SHAKY", 0.0: "BAD"}


def _marked_trace(
    record_id: str, model: str, dataset: Dataset, scores: list[float], correct: bool
) -> ReasoningTrace:
    lines = [f"Step {i + 1}: a {_WORD[s]} move." for i, s in enumerate(scores)]
    raw = "\n".join(lines) + "\nAnswer: [4]"
    return ReasoningTrace(
        record_id=record_id,
        dataset=dataset,
        model=model,
        condition=Condition.BASELINE,
        raw_output=raw,
        steps=tuple(parse_steps(raw)),
        final_answer=extract_final_answer(raw),
        answer_correct=correct,
    )


def test_mock_judged_corpus_reproduces_rwr_table_and_sweep():
    plan = [
        ("m1", Dataset.GSM8K, [([1.0, 1.0], True)] * 6 + [([1.0, 0.0], True)] * 4 + [([0.0, 0.0], False)] * 5),
        ("m1", Dataset.ARC, [([1.0, 1.0], True)] * 9 + [([1.0, 1.0, 1.0, 0.0], True)] * 3 + [([0.0, 0.0], False)] * 3),
        ("m2", Dataset.GSM8K, [([1.0, 1.0, 1.0, 1.0, 0.5], True)] * 5 + [([1.0, 1.0, 1.0, 0.5, 0.5], True)] * 5 + [([0.5, 0.5], False)] * 5),
        ("m2", Dataset.ARC, [([1.0, 1.0], True)] * 5 + [([1.0, 0.0], True)] * 10),
    ]
    config = JudgeConfig(
        judges=tuple(ModelEndpoint(model=f"panel-{i}") for i in range(3))
    )
    client = JudgeClient(config, transport=_ScriptedPanel())

    scored = []
    counter = 0
    for model, dataset, traces in plan:
        for step_scores, correct in traces:
            trace = _marked_trace(f"t{counter}", model, dataset, step_scores, correct)
            counter += 1
            item = client.score_trace(trace)
            assert item.ris == pytest.approx(
                sum(step_scores) / len(step_scores), abs=1e-12
            )
            assert [v.aggregate for v in item.verdicts] == step_scores
            scored.append(item)
    assert len(scored) == 60

    # Strict inequality right at the threshold: a 0.8-RIS trace is clean.
    boundary = [s for s in scored if s.ris == 0.8]
    assert len(boundary) == 5
    assert all(not s.flawed for s in boundary)
    assert all(not s.is_flawed_at(0.8) for s in boundary)
    assert all(s.is_flawed_at(0.85) for s in boundary)

    table = rwr_table(scored)
    expected_rows = {
        ("m1", Dataset.GSM8K): (10, 4, 0.4),
        ("m1", Dataset.ARC): (12, 3, 0.25),
        ("m2", Dataset.GSM8K): (10, 0, 0.0),
        ("m2", Dataset.ARC): (15, 10, 10 / 15),
    }
    assert set(table.rows) == set(expected_rows)
    for key, (correct_n, flawed_n, rate) in expected_rows.items():
        row = table.rows[key]
        assert row.correct_count == correct_n
        assert row.flawed_given_correct_count == flawed_n
        assert row.rwr_rate == pytest.approx(rate, abs=1e-12)
    assert table.model_averages["m1"] == pytest.approx((0.4 + 0.25) / 2, abs=1e-12)
    assert table.model_averages["m2"] == pytest.approx((0.0 + 10 / 15) / 2, abs=1e-12)
    assert table.dataset_averages[Dataset.GSM8K] == pytest.approx(0.2, abs=1e-12)
    assert table.dataset_averages[Dataset.ARC] == pytest.approx(
        (0.25 + 10 / 15) / 2, abs=1e-12
    )

    # Precomputed sweep over the default thresholds; 47 correct traces.
    sweep = threshold_sweep(scored)
    expected_sweep = [
        (0.70, 27 / 60, 14 / 47),
        (0.75, 27 / 60, 14 / 47),
        (0.80, 30 / 60, 17 / 47),
        (0.85, 35 / 60, 22 / 47),
        (0.90, 35 / 60, 22 / 47),
    ]
    assert len(sweep) == len(expected_sweep)
    for point, (t, flagged, rwr) in zip(sweep, expected_sweep):
        assert point.threshold == t
        assert point.flagged_fraction == pytest.approx(flagged, abs=1e-12)
        assert point.rwr_rate == pytest.approx(rwr, abs=1e-12)

    # Majority vote is invariant under panel permutation, 1,000 random panels.
    rng = random.Random(99)
    for _ in range(1000):
        panel = [rng.choice((0.0, 0.5, 1.0)) for _ in range(rng.randint(1, 5))]
        shuffled = panel[:]
        rng.shuffle(shuffled)
        assert aggregate_verdicts(panel) == aggregate_verdicts(shuffled)


# --- 4. focal loss ----------------------------------------------------------------


def test_focal_loss_value_reduction_and_gradient():
    loss, _ = focal_loss(np.array([0.5]), np.array([1.0]))
    assert loss[0] == pytest.approx(0.0433217, abs=1e-7)

    # gamma = 0 collapses to alpha-weighted cross-entropy on a (p, y) grid.
    ps = np.linspace(0.05, 0.95, 19)
    for y in (0.0, 1.0):
        ys = np.full_like(ps, y)
        loss, _ = focal_loss(ps, ys, gamma=0.0, alpha=0.25)
        alpha_t = np.where(ys == 1.0, 0.25, 0.75)
        p_t = np.where(ys == 1.0, ps, 1.0 - ps)
        assert np.max(np.abs(loss - (-alpha_t * np.log(p_t)))) <= 1e-12

    # Analytic dL/dz against central differences through the sigmoid.
    h = 1e-6
    for gamma in (0.0, 0.5, 2.0):
        for y in (0.0, 1.0):
            for z in (-2.2, -1.0, -0.25, 0.3, 1.1, 2.2):
                p = 1.0 / (1.0 + math.exp(-z))
                _, grad = focal_loss(
                    np.array([p]), np.array([y]), gamma=gamma, alpha=0.25
                )
                p_hi = 1.0 / (1.0 + math.exp(-(z + h)))
                p_lo = 1.0 / (1.0 + math.exp(-(z - h)))
                hi, _ = focal_loss(np.array([p_hi]), np.array([y]), gamma=gamma, alpha=0.25)
                lo, _ = focal_loss(np.array([p_lo]), np.array([y]), gamma=gamma, alpha=0.25)
                numeric = (hi[0] - lo[0]) / (2 * h)
                rel = abs(grad[0] - numeric) / max(abs(grad[0]), abs(numeric))
                assert rel <= 1e-5, (gamma, y, z)


# --- 5. trainer -------------------------------------------------------------------


def _separable_records(n: int = 2000, seed: int = 7) -> list[FeatureRecord]:
    rng = np.random.default_rng(seed)
    w = rng.normal(size=FEATURE_DIM)
    w /= np.linalg.norm(w)
    x = rng.normal(size=(n, FEATURE_DIM))
    labels = (x @ w >= 0).astype(int)
    x = x + np.outer(np.where(labels == 1, 1.0, -1.0), w)
    return [
        FeatureRecord(f"r{i}", FeatureVector(tuple(map(float, row))), int(label))
        for i, (row, label) in enumerate(zip(x, labels))
    ]


def test_trainer_separates_synthetic_data_deterministically():
    records = _separable_records()
    flawed_total = sum(r.label for r in records)
    clean_total = len(records) - flawed_total

    train_side, _ = stratified_split(records, ratio=0.8, seed=3)
    train_flawed = sum(r.label for r in train_side)
    train_clean = len(train_side) - train_flawed
    assert abs(train_flawed - 0.8 * flawed_total) <= 1
    assert abs(train_clean - 0.8 * clean_total) <= 1

    started = time.perf_counter()
    model, history = train(train_side, TrainConfig(seed=3))
    elapsed = time.perf_counter() - started
    assert elapsed < 120.0, f"training took {elapsed:.1f}s"
    assert len(history) <= 200
    assert max(h.val_macro_f1 for h in history) >= 0.95

    again, _ = train(train_side, TrainConfig(seed=3))
    for w1, w2 in zip(model.weights, again.weights):
        assert w1.dtype == np.float32 and np.array_equal(w1, w2)
    for b1, b2 in zip(model.biases, again.biases):
        assert b1.dtype == np.float32 and np.array_equal(b1, b2)


# --- 6. evaluation metrics ----------------------------------------------------------


def _probe_vector(x0: float) -> FeatureVector:
    values = [0.0] * FEATURE_DIM
    values[0] = x0
    return FeatureVector(tuple(values))


def _probe_model() -> VerifierModel:
    weights = np.zeros((FEATURE_DIM, 1), dtype=np.float32)
    weights[0, 0] = 10.0
    return VerifierModel(
        dims=(FEATURE_DIM, 1),
        weights=(weights,),
        biases=(np.zeros(1, dtype=np.float32),),
        norm_stats=NormStats.identity(),
    )


def test_eval_metrics_match_hand_confusion_fixture():
    # (label, logit sign, count): 8 TP, 2 FP, 2 FN, 8 TN.
    plan = [(1, 1.0, 8), (0, 1.0, 2), (1, -1.0, 2), (0, -1.0, 8)]
    records = []
    for label, sign, count in plan:
        for _ in range(count):
            records.append(
                FeatureRecord(f"e{len(records)}", _probe_vector(sign), label)
            )
    report = evaluate(_probe_model(), records)
    assert (report.tp, report.fp, report.fn, report.tn) == (8, 2, 2, 8)
    assert report.precision_flawed == pytest.approx(0.8, abs=1e-12)
    assert report.recall_flawed == pytest.approx(0.8, abs=1e-12)
    assert report.f1_flawed == pytest.approx(0.8, abs=1e-12)
    assert report.f1_clean == pytest.approx(0.8, abs=1e-12)
    assert report.macro_f1 == pytest.approx(0.8, abs=1e-12)


# --- 7. model codec ---------------------------------------------------------------


def test_model_codec_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(42)
    weights, biases = init_parameters((FEATURE_DIM, 16, 1), rng)
    model = VerifierModel(
        dims=(FEATURE_DIM, 16, 1),
        weights=weights,
        biases=biases,
        norm_stats=NormStats.identity(),
    )
    inputs = [tuple(map(float, row)) for row in rng.normal(size=(100, FEATURE_DIM))]
    before = [r.probability for r in predict_batch(model, inputs)]

    path = tmp_path / "codec.risv"
    save_model(model, path)
    loaded = load_model(path)
    after = [r.probability for r in predict_batch(loaded, inputs)]
    assert before == after  # bit-identical float64 probabilities

    blob = path.read_bytes()
    truncated = tmp_path / "truncated.risv"
    truncated.write_bytes(blob[:-64])
    with pytest.raises(CorruptModel):
        load_model(truncated)
    mangled = tmp_path / "mangled.risv"
    mangled.write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(CorruptModel):
        load_model(mangled)


# --- 8. service latency -------------------------------------------------------------


def test_service_latency_budget_and_determinism():
    rng = np.random.default_rng(5)
    weights, biases = init_parameters(CANONICAL_DIMS, rng)
    model = VerifierModel(
        dims=CANONICAL_DIMS,
        weights=weights,
        biases=biases,
        norm_stats=NormStats.identity(),
    )
    client = TestClient(create_app(model, model_digest="f" * 64))
    payload = {"features": [0.1] * FEATURE_DIM}
    for _ in range(20):  # warmup
        client.post("/v1/verify", json=payload)

    latencies = []
    probabilities = set()
    for _ in range(1000):
        body = client.post("/v1/verify", json=payload).json()
        latencies.append(body["latency_ms"])
        probabilities.add(body["probability"])
    assert len(probabilities) == 1  # deterministic responses
    p50 = statistics.median(latencies)
    p99 = statistics.quantiles(latencies, n=100)[98]
    assert p50 <= 10.0, f"p50 {p50:.3f} ms"
    assert p99 <= 25.0, f"p99 {p99:.3f} ms"


# --- 9. desk-scale CLI pipeline ------------------------------------------------------


def test_end_to_end_desk_scale_pipeline(chat_server, tmp_path):
    base, script = chat_server
    records = [
        TaskRecord(
            id=f"r{i}",
            dataset=Dataset.GSM8K if i % 2 == 0 else Dataset.ARC,
            question=f"Add {i} and {i + 3}.",
            gold_answer=str(2 * i + 3),
            context=f"The ledger lists {i} and {i + 3}.",
        )
        for i in range(10)
    ]
    records_path = tmp_path / "records.jsonl"
    write_records(records_path, records)
    config_path = tmp_path / "cfg.json"
    config_path.write_text(
        json.dumps(
            {
                "judge": {
                    "judges": [
                        {"model": f"mock-judge-{i}", "base_url": base} for i in range(3)
                    ]
                },
                "generator": {"model": "mock-gen", "base_url": base},
            }
        )
    )

    traces_path = tmp_path / "traces.jsonl"
    scored_path = tmp_path / "scored.jsonl"
    labeled_path = tmp_path / "labeled.jsonl"
    rwr_path = tmp_path / "rwr.csv"
    report_dir = tmp_path / "report"

    common = ["--config", str(config_path)]
    assert main(["generate", "--records", str(records_path), "--out", str(traces_path)] + common) == 0
    assert main(["judge", "--in", str(traces_path), "--out", str(scored_path), "--records", str(records_path)] + common) == 0
    assert main(["classify", "--in", str(scored_path), "--out", str(labeled_path), "--records", str(records_path), "--misuse"] + common) == 0
    assert main(["stats", "--scored", str(labeled_path), "--out", str(rwr_path)]) == 0
    assert main(["report", "--scored", str(labeled_path), "--out-dir", str(report_dir)]) == 0

    # Recompute the whole corpus from the script and check the RWR table.
    expected: dict[str, list[tuple[float, bool]]] = {"gsm8k": [], "arc": []}
    for record in records:
        for condition in Condition:
            raw = script.trace_for(record.question, condition.value)
            steps = parse_steps(raw)
            scores = [float(script.judge_score(s.text)) for s in steps]
            ris = sum(scores) / len(scores)
            answer = raw.rsplit("Answer: ", 1)[1]
            expected[record.dataset.value].append((ris, answer == record.gold_answer))

    rows = {r["dataset"]: r for r in csv.DictReader(rwr_path.open())}
    assert set(rows) == {"gsm8k", "arc"}
    for dataset, outcomes in expected.items():
        correct = [ris for ris, ok in outcomes if ok]
        flawed = [ris for ris in correct if ris < 0.8]
        row = rows[dataset]
        assert row["model"] == "mock-gen"
        assert int(row["correct_count"]) == len(correct)
        assert int(row["flawed_given_correct_count"]) == len(flawed)
        assert float(row["rwr_rate"]) == pytest.approx(
            len(flawed) / len(correct), abs=1e-12
        )

    # All four report artifacts exist; the SVG carries the manifest digest.
    for name in ("rwr_table.csv", "error_deltas.csv", "effect_sizes.csv", "effects.svg"):
        assert (report_dir / name).exists(), name
    manifest = json.loads((report_dir / "manifest.json").read_text())
    svg = (report_dir / "effects.svg").read_text()
    assert f"manifest: {manifest['digest']}" in svg
    assert 'class="bar' in svg  # nonempty effect set draws bars

    # Error deltas: shares renormalize to 100 and deltas cancel per condition.
    deltas = list(csv.DictReader((report_dir / "error_deltas.csv").open()))
    by_condition: dict[str, list[dict]] = {}
    for row in deltas:
        by_condition.setdefault(row["condition"], []).append(row)
    assert "baseline" in by_condition
    for condition, rows_ in by_condition.items():
        share_sum = sum(float(r["share_pct"]) for r in rows_)
        delta_sum = sum(float(r["delta_pp"]) for r in rows_)
        assert share_sum == pytest.approx(100.0, abs=0.1), condition
        assert delta_sum == pytest.approx(0.0, abs=0.1), condition
        if condition == "baseline":
            assert all(float(r["delta_pp"]) == 0.0 for r in rows_)

    # Effect sizes cover both datasets against a five-trace baseline each.
    effects = list(csv.DictReader((report_dir / "effect_sizes.csv").open()))
    assert effects, "expected at least one effect-size row"
    for row in effects:
        assert row["model"] == "mock-gen"
        assert row["intervention"] in {"rag", "self_critique", "verification"}
        assert int(row["n_baseline"]) == 5
        assert int(row["n_treatment"]) == 5
        assert 0.0 < float(row["power"]) <= 1.0
