"""Command-line surface: organize, research, align, extract, eval, kb.

Exit codes: 0 success, 1 user error (bad flags, unreadable or malformed
inputs), 2 runtime failure (backend trouble, plan parse failure, sandbox
problems). Metrics and manifests are printed to stdout as JSON; pass
--pretty for an indented rendering.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import alignment as al
from . import evalkit as ek
from . import knowledge_store as ks
from . import ontology as onto
from . import pipeline as pl
from .errors import (
    AmbiguousName,
    CorruptRecord,
    CycleDetected,
    DuplicateAttribute,
    DuplicateName,
    EmptyImport,
    GoldParentMissing,
    IoFailure,
    KdrError,
    KeyMismatch,
    KindMismatch,
    SchemaViolation,
    ShapeMismatch,
    TypeMismatch,
    UnknownConcept,
    UnknownGoldType,
    UnknownId,
    UnknownParent,
)
from .extraction import ExtractionRequest, extract
from .llm_gateway import (
    HttpChatBackend,
    HttpEmbeddingBackend,
    LlmGateway,
    MockChatBackend,
    MockEmbeddingBackend,
    Transcript,
)
from .websearch import FixtureSearchBackend, HttpSearchBackend

# Errors caused by what the operator handed us, as opposed to failures of
# the machinery while running. The distinction drives the exit code.
_USER_ERRORS = (
    ValueError,  # includes json.JSONDecodeError and task validation
    FileNotFoundError,
    NotADirectoryError,
    IsADirectoryError,
    AmbiguousName,
    CorruptRecord,
    CycleDetected,
    DuplicateAttribute,
    DuplicateName,
    EmptyImport,
    GoldParentMissing,
    IoFailure,  # unreadable or unwritable paths the operator pointed at
    KeyMismatch,
    KindMismatch,
    SchemaViolation,
    ShapeMismatch,
    TypeMismatch,
    UnknownConcept,
    UnknownGoldType,
    UnknownId,
    UnknownParent,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad flags; the contract reserves 2 for runtime."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _emit(payload, pretty: bool) -> None:
    if pretty:
        print(json.dumps(payload, indent=2, ensure_ascii=False, sort_keys=True))
    else:
        print(json.dumps(payload, ensure_ascii=False, sort_keys=True))


def _read_jsonl(path: str) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for n, line in enumerate(handle, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise CorruptRecord(exc.msg, n) from exc
    return records


def _read_json(path: str):
    with open(path, encoding="utf-8") as handle:
        return json.load(handle)


def _mock_gateway_from_file(path: str) -> LlmGateway:
    chat = MockChatBackend.from_script_file(path)
    return LlmGateway(chat, MockEmbeddingBackend(), Transcript(None))


def _gateway(args, config: dict) -> LlmGateway:
    """Scripted backend when --mock is given, HTTP from config/env otherwise."""
    mock = getattr(args, "mock", None)
    if mock:
        return _mock_gateway_from_file(mock if isinstance(mock, str) else mock[0])
    llm = config.get("llm", {})
    chat = HttpChatBackend(
        endpoint=llm.get("endpoint"),
        api_key=llm.get("api_key"),
        model=llm.get("model"),
    )
    embed = config.get("embed", {})
    try:
        embedder = HttpEmbeddingBackend(
            endpoint=embed.get("endpoint"),
            api_key=embed.get("api_key"),
            model=embed.get("model"),
        )
    except KdrError:
        embedder = None  # chat-only setups stay usable
    return LlmGateway(chat, embedder, Transcript(getattr(args, "transcript", None)))


def _load_kb(kb_path: str, ontology_path: str | None):
    graph = onto.load_ontology(ontology_path or f"{kb_path}.ontology.json")
    store = ks.load(kb_path, graph)
    return graph, store


def _object_record(obj: ks.KnowledgeObject) -> dict:
    return {
        "id": obj.id,
        "concept": obj.concept,
        "display_name": obj.display_name,
        "slots": {attr: ks._slot_to_json(v) for attr, v in obj.slots.items()},
        "provenance": [[s, ts] for s, ts in obj.provenance],
    }


# -- organize ---------------------------------------------------------------------------


def cmd_organize(args) -> int:
    config = pl.load_config(args.config)
    gateway = _gateway(args, config)
    task = pl.ResearchTask(args.topic, "organize",
                           corpus_path=args.corpus, kb_path=args.kb)

    if args.ontology:
        proposal = pl.review_gate(args.ontology, approve=True)
    else:
        docs, _ = pl.read_corpus(args.corpus)
        sample = "\n\n".join(text for _, text in docs)[:2000]
        review_path = f"{args.kb}.proposal.json"
        proposal = pl.propose_ontology(args.topic, sample, gateway,
                                       review_path=review_path)
        if args.auto_approve:
            proposal = pl.review_gate(review_path, approve=True)
        elif sys.stdin.isatty():
            answer = input(f"Apply the proposed schema in {review_path}? [y/N] ")
            if answer.strip().lower() not in {"y", "yes"}:
                print(f"left for review: {review_path}", file=sys.stderr)
                return 1
            proposal = pl.review_gate(review_path, approve=True)
        else:
            print(f"proposal written to {review_path}; rerun with --auto-approve "
                  "or pass a reviewed file via --ontology", file=sys.stderr)
            return 1

    _, _, manifest = pl.run_organization(task, proposal, gateway,
                                         run_dir=args.run_dir)
    _emit(manifest, args.pretty)
    return 0


# -- research ---------------------------------------------------------------------------


def cmd_research(args) -> int:
    config = pl.load_config(args.config)
    gateway = _gateway(args, config)
    graph, store = _load_kb(args.kb, args.ontology)
    task = pl.ResearchTask(args.task, "research",
                           kb_path=args.kb, output_path=args.out)

    if args.web_corpus:
        search_backend = FixtureSearchBackend(args.web_corpus)
    elif config.get("search", {}).get("endpoint"):
        search_backend = HttpSearchBackend(config["search"]["endpoint"])
    else:
        search_backend = None

    limits = config.get("limits", {})
    doc = pl.run_research(
        task, graph, store, gateway,
        search_backend=search_backend,
        run_dir=args.out,
        cfg=pl.cycle_config_from(config),
        max_rounds=int(limits.get("max_rounds", 3)),
        search_hits=int(limits.get("search_hits", 3)),
    )
    _emit({
        "report": str(Path(args.out) / "report.md"),
        "sections": [s.title for s in doc.sections],
        "sources": len(doc.sources),
    }, args.pretty)
    return 0


# -- align ------------------------------------------------------------------------------


def cmd_align(args) -> int:
    config = pl.load_config(args.config)
    gateway = _gateway(args, config)
    graph = onto.load_ontology(args.ontology)
    root = onto.ENTITY_ROOT if args.kind == "entity" else onto.EVENT_ROOT
    query = onto.Concept(name=args.name, namespace=args.namespace,
                         kind=args.kind, parent=root,
                         description=args.description)
    outcome = al.align_concept(query, graph, gateway, k=args.k)
    if args.save:
        onto.save_ontology(outcome.graph, args.save)
    _emit({
        "concept": query.qualified,
        "parent": outcome.parent,
        "equivalent_to": outcome.equivalent_to,
        "note": outcome.note,
    }, args.pretty)
    return 0


# -- extract ----------------------------------------------------------------------------


def cmd_extract(args) -> int:
    config = pl.load_config(args.config)
    gateway = _gateway(args, config)
    graph = onto.load_ontology(args.ontology)
    if bool(args.text) == bool(args.file):
        raise ValueError("pass exactly one of --text or --file")
    text = args.text if args.text else Path(args.file).read_text(encoding="utf-8")

    if args.types:
        allowed = [t.strip() for t in args.types.split(",") if t.strip()]
    else:
        allowed = sorted(c.name for c in graph.concepts.values()
                         if c.namespace == args.namespace)
    request = ExtractionRequest(text, args.namespace, mode=args.mode,
                                allowed_types=allowed if args.mode == "closed" else [],
                                source_id=args.source_id)
    objects = extract(request, graph, gateway)
    _emit({"objects": [_object_record(o) for o in objects]}, args.pretty)
    return 0


# -- eval -------------------------------------------------------------------------------


def cmd_eval_taxonomy(args) -> int:
    config = pl.load_config(args.config)
    gateway = _gateway(args, config)
    dataset = _read_json(args.dataset)
    result = ek.eval_taxonomy(dataset, al.make_llm_aligner(gateway, k=args.k))
    _emit({
        "accuracy": result.accuracy,
        "mean_wu_palmer": result.mean_wu_palmer,
        "per_query": [list(row) for row in result.per_query],
    }, args.pretty)
    return 0


def cmd_eval_ie(args) -> int:
    result = ek.eval_ie_files(_read_jsonl(args.pred), _read_jsonl(args.gold),
                              args.task)
    _emit(asdict(result), args.pretty)
    return 0


def cmd_eval_kbqa(args) -> int:
    config = pl.load_config(args.config)
    gateway = _gateway(args, config)
    records = _read_jsonl(args.dataset)
    result = ek.eval_kbqa(records, gateway,
                          cfg=pl.cycle_config_from(config),
                          workdir=args.workdir)
    _emit({
        "hits_at_1": result.hits_at_1,
        "per_question": [list(row) for row in result.per_question],
    }, args.pretty)
    return 0


def cmd_eval_report(args) -> int:
    config = pl.load_config(args.config)
    if args.mock:
        gateways = [_mock_gateway_from_file(path) for path in args.mock]
    else:
        gateways = [_gateway(args, config)]
    report = Path(args.report).read_text(encoding="utf-8")
    score = ek.judge_report(report, gateways)
    _emit(score.as_dict(), args.pretty)
    return 0


# -- kb ---------------------------------------------------------------------------------


def cmd_kb_stats(args) -> int:
    graph, store = _load_kb(args.kb, args.ontology)
    counts: dict[str, int] = {}
    for obj in store.objects.values():
        counts[obj.concept] = counts.get(obj.concept, 0) + 1
    _emit({
        "objects": len(store.objects),
        "concepts": {q: counts[q] for q in sorted(counts)},
    }, args.pretty)
    return 0


def cmd_kb_query(args) -> int:
    graph, store = _load_kb(args.kb, args.ontology)
    matches = store.query_by_name(args.name, fuzzy=args.fuzzy)
    _emit({"matches": [_object_record(o) for o in matches]}, args.pretty)
    return 0


def cmd_kb_merge_check(args) -> int:
    graph, store = _load_kb(args.kb, args.ontology)
    by_name: dict[str, list[ks.KnowledgeObject]] = {}
    for obj in store.objects.values():
        by_name.setdefault(ks.normalize_name(obj.display_name), []).append(obj)
    collisions = []
    for name in sorted(by_name):
        group = by_name[name]
        if len(group) < 2:
            continue
        collisions.append({
            "name": name,
            "objects": [{"id": o.id, "concept": o.concept,
                         "display_name": o.display_name}
                        for o in sorted(group, key=lambda o: o.id)],
        })
    _emit({"collisions": collisions}, args.pretty)
    return 0


# -- parser -----------------------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser, mock_append: bool = False) -> None:
    if mock_append:
        p.add_argument("--mock", action="append", metavar="SCRIPT.json",
                       help="scripted model responses; repeat for more judges")
    else:
        p.add_argument("--mock", metavar="SCRIPT.json",
                       help="scripted model responses instead of a live backend")
    p.add_argument("--config", help="config file (overrides KDR_CONFIG)")
    p.add_argument("--pretty", action="store_true",
                   help="indent the JSON output")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kdr", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("organize", help="build a knowledge base from a corpus")
    p.add_argument("--topic", required=True)
    p.add_argument("--corpus", required=True, help="directory of source documents")
    p.add_argument("--kb", required=True, help="knowledge base output path")
    p.add_argument("--ontology", help="reviewed schema file; skips the proposal step")
    p.add_argument("--auto-approve", action="store_true",
                   help="apply the proposed schema without review")
    p.add_argument("--run-dir", help="where to write the run manifest")
    _add_common(p)
    p.set_defaults(func=cmd_organize)

    p = sub.add_parser("research", help="write a research report from a knowledge base")
    p.add_argument("--task", required=True, help="research question or topic")
    p.add_argument("--kb", required=True, help="knowledge base path")
    p.add_argument("--out", required=True, help="run directory for the report")
    p.add_argument("--ontology", help="schema path (default: KB path + .ontology.json)")
    p.add_argument("--web-corpus", help="directory of search fixture documents")
    _add_common(p)
    p.set_defaults(func=cmd_research)

    p = sub.add_parser("align", help="place a new concept into an ontology")
    p.add_argument("--ontology", required=True, help="ontology JSON file")
    p.add_argument("--name", required=True, help="concept name (UpperCamelCase)")
    p.add_argument("--description", default="")
    p.add_argument("--kind", choices=["entity", "event"], default="entity")
    p.add_argument("--namespace", default="NEW")
    p.add_argument("--k", type=int, default=al.DEFAULT_K,
                   help="candidate neighbors to consider")
    p.add_argument("--save", help="write the expanded ontology here")
    _add_common(p)
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("extract", help="extract objects from text against a schema")
    p.add_argument("--ontology", required=True, help="ontology JSON file")
    p.add_argument("--namespace", required=True)
    p.add_argument("--text", help="passage given inline")
    p.add_argument("--file", help="passage read from a file")
    p.add_argument("--mode", choices=["closed", "open"], default="closed")
    p.add_argument("--types", help="comma-separated allowed concept names")
    p.add_argument("--source-id", default="cli", help="provenance label")
    _add_common(p)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="scoring harnesses")
    esub = p.add_subparsers(dest="protocol", required=True)

    e = esub.add_parser("taxonomy", help="parent placement accuracy and similarity")
    e.add_argument("--dataset", required=True, help="taxonomy dataset JSON")
    e.add_argument("--k", type=int, default=al.DEFAULT_K)
    _add_common(e)
    e.set_defaults(func=cmd_eval_taxonomy)

    e = esub.add_parser("ie", help="micro F1 over extraction annotations")
    e.add_argument("--pred", required=True, help="predictions JSONL")
    e.add_argument("--gold", required=True, help="gold annotations JSONL")
    e.add_argument("--task", required=True, choices=list(ek.IE_TASKS))
    e.add_argument("--pretty", action="store_true")
    e.set_defaults(func=cmd_eval_ie)

    e = esub.add_parser("kbqa", help="hits@1 over question subgraphs")
    e.add_argument("--dataset", required=True, help="question records JSONL")
    e.add_argument("--workdir", help="where the analysis scripts run")
    _add_common(e)
    e.set_defaults(func=cmd_eval_kbqa)

    e = esub.add_parser("report", help="multi-judge report scoring")
    e.add_argument("--report", required=True, help="report markdown file")
    _add_common(e, mock_append=True)
    e.set_defaults(func=cmd_eval_report)

    p = sub.add_parser("kb", help="inspect a knowledge base")
    ksub = p.add_subparsers(dest="inspect", required=True)

    k = ksub.add_parser("stats", help="object counts per concept")
    k.add_argument("--kb", required=True)
    k.add_argument("--ontology")
    k.add_argument("--pretty", action="store_true")
    k.set_defaults(func=cmd_kb_stats)

    k = ksub.add_parser("query", help="look up objects by name")
    k.add_argument("--kb", required=True)
    k.add_argument("--ontology")
    k.add_argument("--name", required=True)
    k.add_argument("--fuzzy", action="store_true")
    k.add_argument("--pretty", action="store_true")
    k.set_defaults(func=cmd_kb_query)

    k = ksub.add_parser("merge-check", help="list display-name collisions")
    k.add_argument("--kb", required=True)
    k.add_argument("--ontology")
    k.add_argument("--pretty", action="store_true")
    k.set_defaults(func=cmd_kb_merge_check)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KdrError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
