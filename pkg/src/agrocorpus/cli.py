"""Single command-line entry point for every pipeline stage.

Subcommands: ingest, gen-align, gen-instruct, clean, bench-build, evaluate,
stats, validate. Exit codes: 0 success, 1 validation failure, 2 usage error,
3 backend failure. Diagnostics go to stderr; primary outputs are files (plus
report tables on stdout), never interleaved with logs. Every run with an
--out writes a ``<out>.run.json`` manifest recording input digests, the
seed, backend kind, and request counts, so reruns can be audited byte for
byte.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from . import align, bench, cleaner, evaluator, knowledge, manifest, stats, teacher
from .corpus_model import (
    deserialize_samples,
    deserialize_vqa,
    dumps_bytes,
    image_index,
    loads_bytes,
    serialize_samples,
    serialize_vqa,
    write_artifact,
)
from .errors import BackendError, ParseError, UsageError, ValidationError


def _eprint(*parts) -> None:
    print(*parts, file=sys.stderr)


def _sha256_path(path) -> str:
    path = Path(path)
    if path.is_dir():
        digest = hashlib.sha256()
        for file in sorted(p for p in path.rglob("*") if p.is_file()):
            digest.update(str(file.relative_to(path)).encode("utf-8"))
            digest.update(hashlib.sha256(file.read_bytes()).digest())
        return digest.hexdigest()
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _utc_now() -> str:
    return datetime.datetime.now(datetime.timezone.utc).isoformat()


@dataclass
class RunManifest:
    """Reproducibility record written next to every primary output."""

    command: list[str]
    config_digest: str | None = None
    input_digests: dict[str, dict] = field(default_factory=dict)
    seed: int | None = None
    tool_version: str = __version__
    started_at: str = ""
    finished_at: str = ""
    backend_kind: str | None = None
    request_count: int = 0

    def add_input(self, role: str, path) -> None:
        self.input_digests[role] = {"path": str(path), "sha256": _sha256_path(path)}

    def write(self, out_path) -> None:
        payload = {
            "command": self.command,
            "config_digest": self.config_digest,
            "input_digests": self.input_digests,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "backend_kind": self.backend_kind,
            "request_count": self.request_count,
        }
        write_artifact(str(out_path) + ".run.json", dumps_bytes(payload))


# ---------------------------------------------------------------------------
# Shared loaders
# ---------------------------------------------------------------------------

def _load_manifest(path, records=None) -> list[manifest.ManifestEntry]:
    """Accept a prebuilt manifest file or a directory of canonical .jpg files.

    For directories, knowledge records (when already loaded) resolve each
    ailment's disease/pest kind.
    """
    path = Path(path)
    if path.is_dir():
        kinds = {r.name: r.kind for r in records} if records else None
        return manifest.manifest_from_directory(path, kinds=kinds)
    return manifest.load_manifest(path.read_bytes())


def _load_knowledge(path) -> list:
    return knowledge.load_knowledge(Path(path).read_bytes())


def _load_policy(args) -> cleaner.CleanPolicy:
    if getattr(args, "policy", None):
        return cleaner.load_policy(args.policy)
    return cleaner.DEFAULT_POLICY


def _load_predictions(path) -> dict[str, str]:
    payload = loads_bytes(Path(path).read_bytes())
    if not isinstance(payload, list):
        raise ParseError("predictions file must be a JSON array")
    preds: dict[str, str] = {}
    for i, element in enumerate(payload):
        if not isinstance(element, dict) or "item_id" not in element or "prediction" not in element:
            raise ParseError(f"prediction {i}: expected fields item_id and prediction")
        item_id, prediction = element["item_id"], element["prediction"]
        if not isinstance(item_id, str) or not isinstance(prediction, str):
            raise ParseError(f"prediction {i}: item_id and prediction must be strings")
        if item_id in preds:
            raise ValidationError(f"duplicate prediction for item {item_id!r}")
        preds[item_id] = prediction
    return preds


def _parse_rounds(text: str) -> tuple[int, int]:
    try:
        lo, hi = text.split(":")
        return int(lo), int(hi)
    except ValueError as exc:
        raise UsageError(f"--rounds expects MIN:MAX, got {text!r}") from exc


def _make_backend(args) -> teacher.TeacherBackend:
    kind = args.backend
    if kind == "replay":
        if not args.replay_dir:
            raise UsageError("--backend replay requires --replay-dir")
        return teacher.ReplayBackend(args.replay_dir)
    if kind == "fault":
        if not args.replay_dir:
            raise UsageError("--backend fault requires --replay-dir to delegate to")
        return teacher.FaultBackend(
            failures=args.fault_failures,
            delegate=teacher.ReplayBackend(args.replay_dir),
        )
    if kind == "live":
        if not args.endpoint:
            raise UsageError("--backend live requires --endpoint")
        return teacher.LiveBackend(
            endpoint=args.endpoint,
            model=args.model,
            temperature=args.temperature,
            requests_per_second=args.requests_per_second,
        )
    raise UsageError(f"unknown backend {kind!r}")


# ---------------------------------------------------------------------------
# Subcommand handlers
# ---------------------------------------------------------------------------

def cmd_ingest(args, run: RunManifest) -> int:
    docs = knowledge.load_raw_docs(args.in_path)
    run.add_input("in", args.in_path)
    table = None
    if args.keywords:
        table = knowledge.load_keyword_table(args.keywords)
        run.add_input("keywords", args.keywords)
    records = [knowledge.segment_knowledge(doc, table, strict=args.strict) for doc in docs]
    write_artifact(args.out, knowledge.store_knowledge(records))
    _eprint(f"ingested {len(records)} records -> {args.out}")
    return 0


def cmd_gen_align(args, run: RunManifest) -> int:
    records = _load_knowledge(args.knowledge)
    entries = _load_manifest(args.manifest, records)
    run.add_input("knowledge", args.knowledge)
    run.add_input("manifest", args.manifest)
    if args.templates:
        pool = align.load_template_pool(args.templates)
        run.add_input("templates", args.templates)
    else:
        pool = align.TemplatePool()
    images = [e.image for e in manifest.active_entries(entries)]
    samples, skipped = align.generate_alignment_corpus(images, records, pool, args.seed)
    write_artifact(args.out, serialize_samples(samples))
    run.seed = args.seed
    _eprint(f"generated {len(samples)} alignment samples ({len(skipped)} skipped) -> {args.out}")
    for file_name, reason in skipped:
        _eprint(f"  skipped {file_name}: {reason}")
    return 0


def cmd_gen_instruct(args, run: RunManifest) -> int:
    records = _load_knowledge(args.knowledge)
    entries = _load_manifest(args.manifest, records)
    run.add_input("knowledge", args.knowledge)
    run.add_input("manifest", args.manifest)
    index = cleaner.KnowledgeIndex(records)
    policy = _load_policy(args)

    tasks = []
    skipped = []
    for entry in manifest.active_entries(entries):
        image = entry.image
        if image.ailment_kind == "healthy":
            skipped.append((image.file_name, "healthy image has no knowledge record"))
            continue
        record = index.lookup(image.ailment_name, image.crop)
        if record is None:
            skipped.append((image.file_name, "no knowledge record"))
            continue
        tasks.append((image, record))

    config = teacher.TeacherConfig(round_bounds=_parse_rounds(args.rounds))
    backend = _make_backend(args)
    outcomes = teacher.generate_instruction_corpus(
        tasks, backend, config, policy, concurrency=args.concurrency
    )
    write_artifact(args.out, serialize_samples([o.sample for o in outcomes]))
    reports = [
        {
            "image": outcome.sample.image.file_name,
            "attempt_count": outcome.attempt_count,
            "clean": outcome.clean,
            "report": outcome.report.to_dict(),
        }
        for outcome in outcomes
    ]
    write_artifact(str(args.out) + ".reports.json", dumps_bytes(reports))
    run.backend_kind = backend.kind
    run.request_count = backend.request_count
    dirty = sum(1 for o in outcomes if not o.clean)
    _eprint(
        f"generated {len(outcomes)} instruction samples "
        f"({dirty} flagged dirty, {len(skipped)} skipped) -> {args.out}"
    )
    return 0


def cmd_clean(args, run: RunManifest) -> int:
    data = Path(args.in_path).read_bytes()
    records = _load_knowledge(args.knowledge)
    run.add_input("in", args.in_path)
    run.add_input("knowledge", args.knowledge)
    if args.policy:
        run.add_input("policy", args.policy)
    policy = _load_policy(args)
    index = cleaner.KnowledgeIndex(records)

    payload = loads_bytes(data)
    is_vqa = bool(payload) and isinstance(payload[0], dict) and "question" in payload[0]
    if is_vqa:
        items = deserialize_vqa(data)
        if policy.balance_themes:
            kept, removed, findings = cleaner.trim_theme_surplus(
                items, policy, cleaner.vqa_grounding_score_fn(index, policy)
            )
        else:
            kept, removed, findings = list(items), [], cleaner.theme_balance(items, policy)
        write_artifact(args.out, serialize_vqa(kept))
        rejects = {
            "removed": [
                {"item_id": item.item_id, "theme": item.theme} for item in removed
            ],
            "theme_findings": [
                {"theme": f.theme, "count": f.count, "surplus": f.surplus} for f in findings
            ],
        }
        write_artifact(args.rejects, dumps_bytes(rejects))
        _eprint(f"kept {len(kept)} vqa items, removed {len(removed)} -> {args.out}")
        return 0

    samples = deserialize_samples(data, origin=args.origin)
    kept, rejected = cleaner.clean_corpus(samples, index, policy)
    write_artifact(args.out, serialize_samples(kept))
    rejects = [
        {
            "image": sample.image.file_name,
            "report": report.to_dict(),
        }
        for sample, report in rejected
    ]
    write_artifact(args.rejects, dumps_bytes(rejects))
    _eprint(f"kept {len(kept)} samples, rejected {len(rejected)} -> {args.out}")
    return 0


def cmd_bench_build(args, run: RunManifest) -> int:
    pool_data = Path(args.pool).read_bytes()
    spec = bench.load_bench_spec(args.spec)
    train = _load_manifest(args.train_manifest)
    run.add_input("pool", args.pool)
    run.add_input("spec", args.spec)
    run.add_input("train_manifest", args.train_manifest)
    run.seed = args.seed

    if args.bench_kind == "chatbot":
        pool = bench.load_chatbot_pool(pool_data)
        built = bench.build_chatbot_bench(pool, spec, train, args.seed)
        write_artifact(args.out, serialize_samples(list(built.samples)))
        write_artifact(str(args.out) + ".summary.json", dumps_bytes(built.summary))
        _eprint(
            f"chatbot bench: {built.summary['image_count']} images, "
            f"{built.summary['round_total']} rounds -> {args.out}"
        )
        return 0

    pool = bench.load_vqa_pool(pool_data)
    built, proof = bench.build_vqa_bench(pool, spec, train, args.seed)
    write_artifact(args.out, serialize_vqa(list(built.items)))
    write_artifact(str(args.out) + ".summary.json", dumps_bytes(built.summary))
    _eprint(
        f"vqa bench: {built.summary['image_count']} images, "
        f"{built.summary['item_total']} items, "
        f"{len(proof.overlapping)} train overlaps -> {args.out}"
    )
    return 0


def cmd_evaluate(args, run: RunManifest) -> int:
    bench_data = Path(args.bench).read_bytes()
    predictions = _load_predictions(args.preds)
    run.add_input("bench", args.bench)
    run.add_input("preds", args.preds)

    if args.eval_kind == "vqa":
        items = deserialize_vqa(bench_data)
        pairs = []
        for item in items:
            if item.item_id not in predictions:
                raise ValidationError(f"missing prediction for item {item.item_id!r}")
            pairs.append((item, predictions[item.item_id]))
        report = evaluator.vqa_report(pairs, f1_average=args.f1_mode)
        write_artifact(args.out, dumps_bytes({"kind": "vqa", **report.to_dict()}))
        print(evaluator.render_vqa_table(report))
        return 0

    if not args.knowledge:
        raise UsageError("evaluate chatbot requires --knowledge for the judge payload")
    records = _load_knowledge(args.knowledge)
    run.add_input("knowledge", args.knowledge)
    index = cleaner.KnowledgeIndex(records)
    references = None
    if args.refs:
        references = _load_predictions(args.refs)
        run.add_input("refs", args.refs)
    backend = _make_backend(args)
    samples = deserialize_samples(bench_data, origin="bench_chatbot")
    report, verdicts = evaluator.evaluate_chatbot(
        samples,
        predictions,
        index,
        backend,
        references=references,
        candidate_first=not args.swap_order,
        agg=args.agg,
        concurrency=args.concurrency,
    )
    payload = {
        "kind": "chatbot",
        **report.to_dict(),
        "verdicts": [
            {
                "item_id": v.item_id,
                "score_candidate": v.score_candidate,
                "score_reference": v.score_reference,
                "explanation": v.explanation,
            }
            for v in verdicts
        ],
    }
    write_artifact(args.out, dumps_bytes(payload))
    run.backend_kind = backend.kind
    run.request_count = backend.request_count
    print(evaluator.render_chatbot_table(report))
    return 0


def cmd_stats(args, run: RunManifest) -> int:
    data = Path(args.in_path).read_bytes()
    run.add_input("in", args.in_path)
    stoplist: frozenset[str] = frozenset()
    if args.stoplist:
        stoplist = frozenset(
            Path(args.stoplist).read_text(encoding="utf-8").split()
        )
        run.add_input("stoplist", args.stoplist)

    if args.stats_kind == "taxonomy":
        entries = manifest.load_manifest(data)
        report = stats.taxonomy_counts(entries)
        write_artifact(args.out, dumps_bytes(report.to_dict()))
        print(stats.render_taxonomy(report))
        return 0

    payload = loads_bytes(data)
    is_vqa = bool(payload) and isinstance(payload[0], dict) and "question" in payload[0]
    if args.stats_kind == "words":
        if is_vqa:
            texts = [el["question"] for el in payload] + [el["answer"] for el in payload]
        else:
            samples = deserialize_samples(data)
            texts = [turn.text for sample in samples for turn in sample.turns]
        ranked = stats.word_frequency(texts, stoplist, k=args.top)
        write_artifact(args.out, dumps_bytes([[w, c] for w, c in ranked]))
        print(stats.render_word_frequency(ranked))
        return 0

    if is_vqa:
        questions = [el["question"] for el in payload]
    else:
        samples = deserialize_samples(data)
        questions = [
            turn.text for sample in samples for turn in sample.turns
            if turn.speaker == "human"
        ]
    entries = stats.question_starter_analysis(questions, top_q=args.top_q, top_w=args.top_w)
    write_artifact(args.out, dumps_bytes([e.to_dict() for e in entries]))
    print(stats.render_starters(entries))
    return 0


_VALIDATORS = ("corpus", "vqa", "manifest", "knowledge")


def _detect_kind(payload) -> str:
    if not isinstance(payload, list):
        raise ParseError("artifact must be a JSON array")
    if not payload:
        return "corpus"
    first = payload[0]
    if not isinstance(first, dict):
        raise ParseError("artifact elements must be objects")
    if "conversations" in first:
        return "corpus"
    if "question" in first:
        return "vqa"
    if "content_hash" in first:
        return "manifest"
    if "sections" in first:
        return "knowledge"
    raise ParseError("cannot detect artifact kind from element fields")


def cmd_validate(args, run: RunManifest) -> int:
    data = Path(args.in_path).read_bytes()
    kind = args.kind or _detect_kind(loads_bytes(data))
    if kind == "corpus":
        samples = deserialize_samples(data, origin=args.origin)
        _eprint(f"valid corpus: {len(samples)} samples")
    elif kind == "vqa":
        items = deserialize_vqa(data)
        _eprint(f"valid vqa file: {len(items)} items")
    elif kind == "manifest":
        entries = manifest.load_manifest(data)
        problems = manifest.validate_manifest(entries)
        if problems:
            for problem in problems:
                _eprint(problem)
            return 1
        _eprint(f"valid manifest: {len(entries)} entries")
    else:
        records = knowledge.load_knowledge(data)
        _eprint(f"valid knowledge base: {len(records)} records")
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agrocorpus",
        description="Corpus construction and evaluation toolkit for "
                    "agricultural pest and disease instruction data.",
    )
    parser.add_argument("--config", help="JSON config file; explicit flags win over it")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("ingest", help="segment raw knowledge text into the structured base")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--keywords")
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("gen-align", help="generate two-round feature-alignment samples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--knowledge", required=True)
    p.add_argument("--templates")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_gen_align)

    p = sub.add_parser("gen-instruct", help="generate teacher-driven instruction samples")
    p.add_argument("--manifest", required=True)
    p.add_argument("--knowledge", required=True)
    p.add_argument("--backend", choices=("live", "replay", "fault"), required=True)
    p.add_argument("--replay-dir", dest="replay_dir")
    p.add_argument("--fault-failures", dest="fault_failures", type=int, default=2)
    p.add_argument("--endpoint")
    p.add_argument("--model", default="gpt-4")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--requests-per-second", dest="requests_per_second", type=float, default=1.0)
    p.add_argument("--rounds", default="4:6")
    p.add_argument("--concurrency", type=int, default=1)
    p.add_argument("--policy")
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_gen_instruct)

    p = sub.add_parser("clean", help="apply cleaning rules to a corpus or vqa file")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--knowledge", required=True)
    p.add_argument("--policy")
    p.add_argument("--origin", choices=("alignment", "instruction", "bench_chatbot"),
                   default="instruction")
    p.add_argument("--out", required=True)
    p.add_argument("--rejects", required=True)
    p.set_defaults(handler=cmd_clean)

    p = sub.add_parser("bench-build", help="construct a chatbot or vqa benchmark")
    p.add_argument("bench_kind", choices=("chatbot", "vqa"))
    p.add_argument("--pool", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--train-manifest", dest="train_manifest", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_bench_build)

    p = sub.add_parser("evaluate", help="run an evaluation protocol over predictions")
    p.add_argument("eval_kind", choices=("chatbot", "vqa"))
    p.add_argument("--bench", required=True)
    p.add_argument("--preds", required=True)
    p.add_argument("--refs")
    p.add_argument("--knowledge")
    p.add_argument("--backend", choices=("live", "replay", "fault"), default="replay")
    p.add_argument("--replay-dir", dest="replay_dir")
    p.add_argument("--fault-failures", dest="fault_failures", type=int, default=2)
    p.add_argument("--endpoint")
    p.add_argument("--model", default="gpt-4")
    p.add_argument("--temperature", type=float, default=0.0)
    p.add_argument("--requests-per-second", dest="requests_per_second", type=float, default=1.0)
    p.add_argument("--agg", choices=("ratio_of_sums", "mean_of_ratios"),
                   default="ratio_of_sums")
    p.add_argument("--f1-mode", dest="f1_mode", choices=("macro", "micro"), default="macro")
    p.add_argument("--swap-order", dest="swap_order", action="store_true",
                   help="present the reference answer first to the judge")
    p.add_argument("--concurrency", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("stats", help="corpus statistics")
    p.add_argument("stats_kind", choices=("taxonomy", "words", "starters"))
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--stoplist")
    p.add_argument("--top", type=int, default=50)
    p.add_argument("--top-q", dest="top_q", type=int, default=3)
    p.add_argument("--top-w", dest="top_w", type=int, default=4)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("validate", help="schema-check any artifact file")
    p.add_argument("--in", dest="in_path", required=True)
    p.add_argument("--kind", choices=_VALIDATORS)
    p.add_argument("--origin", choices=("alignment", "instruction", "bench_chatbot"),
                   default="instruction")
    p.set_defaults(handler=cmd_validate)

    return parser


def _extract_config(argv: list[str]) -> dict:
    for i, token in enumerate(argv):
        if token == "--config" and i + 1 < len(argv):
            return json.loads(Path(argv[i + 1]).read_text(encoding="utf-8"))
        if token.startswith("--config="):
            return json.loads(Path(token.split("=", 1)[1]).read_text(encoding="utf-8"))
    return {}


def _apply_config_defaults(parser: argparse.ArgumentParser, config: dict) -> set[str]:
    """Install config values as defaults on this parser and every subparser.

    Subparsers parse into a fresh namespace, so defaults set only on the
    top-level parser would lose to subcommand defaults. Returns the set of
    config keys that matched some destination.
    """
    dests = {action.dest for action in parser._actions}
    relevant = {key: value for key, value in config.items() if key in dests}
    if relevant:
        parser.set_defaults(**relevant)
    matched = set(relevant)
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            for sub in action.choices.values():
                matched |= _apply_config_defaults(sub, config)
    return matched


def dispatch(argv: list[str]) -> int:
    parser = _build_parser()
    try:
        config = _extract_config(argv)
    except (OSError, json.JSONDecodeError) as exc:
        _eprint(f"error: cannot load config: {exc}")
        return 2
    if config:
        matched = _apply_config_defaults(parser, config)
        for key in sorted(set(config) - matched):
            _eprint(f"warning: config key {key!r} matches no flag, ignored")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2

    run = RunManifest(command=["agrocorpus", *argv], started_at=_utc_now())
    if args.config:
        run.config_digest = _sha256_path(args.config)
    if getattr(args, "seed", None) is not None:
        run.seed = getattr(args, "seed")

    try:
        code = args.handler(args, run)
    except UsageError as exc:
        _eprint(f"usage error: {exc}")
        return 2
    except ValueError as exc:
        # ValidationError and ParseError subclass ValueError; bare ValueError
        # covers malformed values inside otherwise well-formed files
        _eprint(f"error: {exc}")
        return 1
    except OSError as exc:
        _eprint(f"error: {exc}")
        return 1
    except BackendError as exc:
        _eprint(f"backend error: {exc}")
        return 3

    run.finished_at = _utc_now()
    if code == 0 and getattr(args, "out", None):
        run.write(args.out)
    return code


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))
