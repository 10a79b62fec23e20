"""Command-line pipeline: trace generation, panel judging, error labeling,
feature dumps, training, evaluation, prediction, statistics, and reporting.

Stages exchange JSONL; CSV and SVG appear only at the reporting edge. Every
file-producing subcommand drops a manifest next to its output recording the
effective configuration, paths, seed, and tool version. The manifest digest
is stable across re-runs (timestamps are recorded but excluded from it), so
identical inputs and seed reproduce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

from .errors import MissingBaseline, ParseError, RisError
from .features import (
    FeatureRecord,
    FeatureVector,
    embed_texts,
    read_feature_dump,
    structural_features,
    write_feature_dump,
)
from .judging import (
    DEFAULT_THRESHOLD,
    JudgeClient,
    JudgeConfig,
    ModelEndpoint,
    RubricMode,
    read_scored,
    write_scored,
)
from .reporting import write_report, write_rwr_csv
from .stats import DELTA_CATEGORIES, effect_sizes, error_delta_table
from .traces import Condition, read_records, read_traces, write_traces
from .verifier import (
    TrainConfig,
    evaluate,
    load_model,
    predict_batch,
    save_model,
    train,
)

__version__ = "0.1.0"

log = logging.getLogger(__name__)

_DEFAULT_JUDGES = ("judge-a", "judge-b", "judge-c")


# --- run manifests ----------------------------------------------------------------


@dataclass(frozen=True)
class RunManifest:
    """Provenance for one subcommand run; the digest identifies the run
    configuration, not the moment it happened."""

    command: str
    tool_version: str
    seed: Optional[int]
    config: dict
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]
    created_utc: str

    @property
    def digest(self) -> str:
        payload = {
            "command": self.command,
            "tool_version": self.tool_version,
            "seed": self.seed,
            "config": self.config,
            "inputs": list(self.inputs),
            "outputs": list(self.outputs),
        }
        canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["inputs"] = list(self.inputs)
        doc["outputs"] = list(self.outputs)
        doc["digest"] = self.digest
        return doc


def _manifest(
    command: str,
    config: dict,
    inputs: Sequence[str],
    outputs: Sequence[str],
    seed: Optional[int] = None,
) -> RunManifest:
    return RunManifest(
        command=command,
        tool_version=__version__,
        seed=seed,
        config=config,
        inputs=tuple(str(p) for p in inputs),
        outputs=tuple(str(p) for p in outputs),
        created_utc=datetime.now(timezone.utc).isoformat(timespec="seconds"),
    )


def _write_manifest(manifest: RunManifest, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sidecar(out_path: str) -> str:
    return f"{out_path}.manifest.json"


# --- configuration ----------------------------------------------------------------


def _load_config_doc(path: Optional[str]) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"config file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError("config file must hold a single JSON object")
    return doc


def _endpoint_from(obj: dict, fallback_model: str) -> ModelEndpoint:
    return ModelEndpoint(
        model=obj.get("model", fallback_model),
        base_url=obj.get("base_url", ""),
        temperature=obj.get("temperature", 0.0),
    )


def _judge_config(doc: dict) -> JudgeConfig:
    section = doc.get("judge", {})
    specs = section.get("judges")
    if specs:
        judges = tuple(_endpoint_from(spec, "") for spec in specs)
    else:
        judges = tuple(ModelEndpoint(model=name) for name in _DEFAULT_JUDGES)
    cache_path = section.get("cache_path")
    return JudgeConfig(
        judges=judges,
        rubric_mode=RubricMode(section.get("rubric_mode", "three_level")),
        max_in_flight=section.get("max_in_flight", 8),
        cache_path=Path(cache_path) if cache_path else None,
    )


def _judge_config_snapshot(config: JudgeConfig) -> dict:
    return {
        "judges": [asdict(j) for j in config.judges],
        "rubric_mode": config.rubric_mode.value,
        "max_in_flight": config.max_in_flight,
        "cache_path": str(config.cache_path) if config.cache_path else None,
    }


def _train_config(doc: dict, seed: Optional[int]) -> TrainConfig:
    merged = {**TrainConfig().to_dict(), **doc.get("train", {})}
    if seed is not None:
        merged["seed"] = seed
    return TrainConfig.from_dict(merged)


def _threshold(args: argparse.Namespace, doc: dict) -> float:
    if getattr(args, "threshold", None) is not None:
        return args.threshold
    return doc.get("threshold", DEFAULT_THRESHOLD)


# --- subcommands ------------------------------------------------------------------


def _cmd_generate(args: argparse.Namespace) -> int:
    doc = _load_config_doc(args.config)
    records = read_records(args.records)
    conditions = (
        list(Condition) if args.condition == "all" else [Condition(args.condition)]
    )
    generator = _endpoint_from(doc.get("generator", {}), "generator")
    client = JudgeClient(_judge_config(doc))
    traces = [
        client.generate_trace(record, condition, generator)
        for record in records
        for condition in conditions
    ]
    write_traces(args.out, traces)
    manifest = _manifest(
        "generate",
        {
            "generator": asdict(generator),
            "conditions": [c.value for c in conditions],
        },
        inputs=[args.records],
        outputs=[args.out],
        seed=args.seed,
    )
    _write_manifest(manifest, _sidecar(args.out))
    log.info("generated %d traces across %d conditions", len(traces), len(conditions))
    return 0


def _cmd_judge(args: argparse.Namespace) -> int:
    doc = _load_config_doc(args.config)
    threshold = _threshold(args, doc)
    traces = read_traces(args.in_path)
    questions = {}
    if args.records:
        questions = {r.id: r.question for r in read_records(args.records)}
    config = _judge_config(doc)
    client = JudgeClient(config)
    scored = [
        client.score_trace(t, threshold=threshold, question=questions.get(t.record_id))
        for t in traces
    ]
    write_scored(args.out, scored)
    manifest = _manifest(
        "judge",
        {"judge": _judge_config_snapshot(config), "threshold": threshold},
        inputs=[p for p in (args.in_path, args.records) if p],
        outputs=[args.out],
        seed=args.seed,
    )
    _write_manifest(manifest, _sidecar(args.out))
    log.info("judged %d traces at threshold %g", len(scored), threshold)
    return 0


def _cmd_classify(args: argparse.Namespace) -> int:
    doc = _load_config_doc(args.config)
    scored = read_scored(args.in_path)
    records = {}
    if args.records:
        records = {r.id: r for r in read_records(args.records)}
    config = _judge_config(doc)
    client = JudgeClient(config)
    labeled = []
    for item in scored:
        record = records.get(item.trace.record_id)
        question = record.question if record else None
        result = client.label_trace_errors(item, question=question)
        if args.misuse and item.trace.condition is Condition.RAG:
            context = record.context if record else None
            if context:
                result = client.label_trace_misuse(result, context)
            else:
                log.warning(
                    "no retrieval context for %s; skipping misuse labels",
                    item.trace.record_id,
                )
        labeled.append(result)
    write_scored(args.out, labeled)
    manifest = _manifest(
        "classify",
        {"judge": _judge_config_snapshot(config), "misuse": bool(args.misuse)},
        inputs=[p for p in (args.in_path, args.records) if p],
        outputs=[args.out],
        seed=args.seed,
    )
    _write_manifest(manifest, _sidecar(args.out))
    return 0


def _trace_key(trace) -> str:
    return f"{trace.record_id}:{trace.model}:{trace.condition.value}"


def _cmd_features(args: argparse.Namespace) -> int:
    scored = read_scored(args.in_path)
    embeddings = embed_texts(
        [item.trace.raw_output for item in scored], base_url=args.embed_base
    )
    rows = [
        FeatureRecord(
            record_id=_trace_key(item.trace),
            features=FeatureVector(
                tuple(embedding) + structural_features(item.trace).as_tuple()
            ),
            label=int(item.flawed),
        )
        for item, embedding in zip(scored, embeddings)
    ]
    write_feature_dump(args.out, rows)
    manifest = _manifest(
        "features",
        {"embed_base": args.embed_base},
        inputs=[args.in_path],
        outputs=[args.out],
        seed=args.seed,
    )
    _write_manifest(manifest, _sidecar(args.out))
    log.info("dumped %d feature rows (%d flawed)", len(rows), sum(r.label for r in rows))
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    doc = _load_config_doc(args.config)
    records = read_feature_dump(args.in_path)
    config = _train_config(doc, args.seed)
    model, history = train(records, config)
    manifest = _manifest(
        "train",
        {"train": config.to_dict()},
        inputs=[args.in_path],
        outputs=[args.out],
        seed=config.seed,
    )
    save_model(model, args.out, manifest_digest=manifest.digest)
    _write_manifest(manifest, _sidecar(args.out))
    best = max(h.val_macro_f1 for h in history)
    log.info(
        "trained %d epochs on %d rows; best val macro-F1 %.4f",
        len(history),
        len(records),
        best,
    )
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    records = read_feature_dump(args.in_path)
    report = evaluate(model, records)
    payload = json.dumps(asdict(report), indent=2, sort_keys=True)
    if args.out:
        manifest = _manifest(
            "eval",
            {"model": args.model, "threshold": model.decision_threshold},
            inputs=[args.model, args.in_path],
            outputs=[args.out],
            seed=args.seed,
        )
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(payload)
            fh.write("\n")
        _write_manifest(manifest, _sidecar(args.out))
    print(payload)
    return 0


def _cmd_predict(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    traces = read_traces(args.trace)
    embeddings = embed_texts(
        [t.raw_output for t in traces], base_url=args.embed_base
    )
    vectors = [
        FeatureVector(tuple(embedding) + structural_features(t).as_tuple())
        for t, embedding in zip(traces, embeddings)
    ]
    results = predict_batch(model, vectors, threshold=args.threshold)
    lines = [
        json.dumps(
            {
                "record_id": trace.record_id,
                "probability": result.probability,
                "flagged": result.flagged,
            }
        )
        for trace, result in zip(traces, results)
    ]
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line)
                fh.write("\n")
        used = args.threshold if args.threshold is not None else model.decision_threshold
        manifest = _manifest(
            "predict",
            {"model": args.model, "threshold": used, "embed_base": args.embed_base},
            inputs=[args.model, args.trace],
            outputs=[args.out],
            seed=args.seed,
        )
        _write_manifest(manifest, _sidecar(args.out))
    else:
        for line in lines:
            print(line)
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    doc = _load_config_doc(args.config)
    threshold = _threshold(args, doc)
    scored = read_scored(args.scored)
    write_rwr_csv(args.out, scored, threshold)
    manifest = _manifest(
        "stats",
        {"threshold": threshold},
        inputs=[args.scored],
        outputs=[args.out],
        seed=args.seed,
    )
    _write_manifest(manifest, _sidecar(args.out))
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    doc = _load_config_doc(args.config)
    threshold = _threshold(args, doc)
    scored = read_scored(args.scored)

    labels_by_condition: dict[Condition, list] = {}
    for item in scored:
        if not item.error_labels:
            continue
        present = [label for label in item.error_labels if label is not None]
        labels_by_condition.setdefault(item.trace.condition, []).extend(present)
    # A condition whose labels are all Other cannot be renormalized; drop it
    # rather than fail the whole report.
    substantive = {
        condition: labels
        for condition, labels in labels_by_condition.items()
        if any(label in DELTA_CATEGORIES for label in labels)
    }
    dropped = set(labels_by_condition) - set(substantive)
    if dropped:
        log.warning(
            "no substantive error labels under %s; omitting from deltas",
            ", ".join(sorted(c.value for c in dropped)),
        )
    deltas = None
    if substantive:
        try:
            deltas = error_delta_table(substantive)
        except MissingBaseline as exc:
            log.warning("skipping error deltas: %s", exc)
    effects = effect_sizes(scored)

    artifacts = ["rwr_table.csv", "error_deltas.csv", "effect_sizes.csv", "effects.svg"]
    manifest = _manifest(
        "report",
        {"threshold": threshold},
        inputs=[args.scored],
        outputs=[str(Path(args.out_dir) / name) for name in artifacts],
        seed=args.seed,
    )
    write_report(
        scored,
        deltas,
        effects,
        args.out_dir,
        threshold=threshold,
        manifest_digest=manifest.digest,
    )
    _write_manifest(manifest, Path(args.out_dir) / "manifest.json")
    return 0


def _cmd_serve(args: argparse.Namespace) -> int:
    # Deferred import: uvicorn startup cost is irrelevant to batch commands.
    import uvicorn

    from .service import create_app

    blob = Path(args.model).read_bytes()
    digest = hashlib.sha256(blob).hexdigest()
    model = load_model(args.model)
    host, port = args.addr
    app = create_app(model, model_digest=digest, embed_base=args.embed_base)
    log.info("serving model %s on %s:%d", digest[:12], host, port)
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return 0


# --- argument parsing -------------------------------------------------------------


def _addr(value: str) -> tuple[str, int]:
    host, sep, port = value.rpartition(":")
    if not sep or not host:
        raise argparse.ArgumentTypeError("addr must look like host:port")
    try:
        return host, int(port)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid port {port!r}") from None


def _add_common(parser: argparse.ArgumentParser, threshold: bool = False) -> None:
    parser.add_argument("--seed", type=int, default=None, help="RNG seed recorded in the manifest")
    parser.add_argument("--config", default=None, help="JSON config file mirroring the module configs")
    if threshold:
        parser.add_argument("--threshold", type=float, default=None, help="RIS flaw threshold (default 0.8)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ris",
        description="Reasoning-trace integrity pipeline: judge steps, score RIS, "
        "train and serve a distilled verifier.",
    )
    parser.add_argument("--version", action="version", version=f"ris {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("generate", help="sample traces for each record under each condition")
    p.add_argument("--records", required=True, help="task records JSONL")
    p.add_argument("--out", required=True, help="traces JSONL to write")
    p.add_argument(
        "--condition",
        choices=["all"] + [c.value for c in Condition],
        default="all",
        help="single condition or the full grid",
    )
    _add_common(p)
    p.set_defaults(handler=_cmd_generate)

    p = sub.add_parser("judge", help="score every step with the judge panel")
    p.add_argument("--in", dest="in_path", required=True, help="traces JSONL")
    p.add_argument("--out", required=True, help="scored traces JSONL to write")
    p.add_argument("--records", default=None, help="task records JSONL for question context")
    _add_common(p, threshold=True)
    p.set_defaults(handler=_cmd_judge)

    p = sub.add_parser("classify", help="label error mechanisms on flawed steps")
    p.add_argument("--in", dest="in_path", required=True, help="scored traces JSONL")
    p.add_argument("--out", required=True, help="labeled scored traces JSONL to write")
    p.add_argument("--records", default=None, help="task records JSONL for questions and contexts")
    p.add_argument("--misuse", action="store_true", help="also label context misuse on RAG traces")
    _add_common(p)
    p.set_defaults(handler=_cmd_classify)

    p = sub.add_parser("features", help="dump hybrid feature vectors for training")
    p.add_argument("--in", dest="in_path", required=True, help="scored traces JSONL")
    p.add_argument("--out", required=True, help="feature dump JSONL to write")
    p.add_argument("--embed-base", default=None, help="embedding provider base URL")
    _add_common(p)
    p.set_defaults(handler=_cmd_features)

    p = sub.add_parser("train", help="fit the verifier on a feature dump")
    p.add_argument("--in", dest="in_path", required=True, help="feature dump JSONL")
    p.add_argument("--out", required=True, help="model file to write")
    _add_common(p)
    p.set_defaults(handler=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a model on a labeled feature dump")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--in", dest="in_path", required=True, help="feature dump JSONL")
    p.add_argument("--out", default=None, help="optional JSON report path")
    _add_common(p)
    p.set_defaults(handler=_cmd_eval)

    p = sub.add_parser("predict", help="flag traces with a trained model")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--trace", required=True, help="traces JSONL to score")
    p.add_argument("--out", default=None, help="predictions JSONL (stdout when omitted)")
    p.add_argument("--embed-base", default=None, help="embedding provider base URL")
    _add_common(p, threshold=True)
    p.set_defaults(handler=_cmd_predict)

    p = sub.add_parser("stats", help="tabulate right-for-wrong-reasons rates")
    p.add_argument("--scored", required=True, help="scored traces JSONL")
    p.add_argument("--out", required=True, help="RWR CSV to write")
    _add_common(p, threshold=True)
    p.set_defaults(handler=_cmd_stats)

    p = sub.add_parser("report", help="write the CSV and SVG report bundle")
    p.add_argument("--scored", required=True, help="scored traces JSONL")
    p.add_argument("--out-dir", required=True, help="directory for the artifacts")
    _add_common(p, threshold=True)
    p.set_defaults(handler=_cmd_report)

    p = sub.add_parser("serve", help="serve the verifier over HTTP")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--addr", type=_addr, default=("127.0.0.1", 8080), help="host:port to bind")
    p.add_argument("--embed-base", default=None, help="embedding provider base URL")
    _add_common(p)
    p.set_defaults(handler=_cmd_serve)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(
        level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (RisError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
