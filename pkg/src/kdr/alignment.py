"""Two-stage ontology expansion.

Stage one embeds "{name}: {description}" for every concept and retrieves the
top-k most similar existing concepts by cosine. Stage two shows the model the
class-definition code of the query and of each candidate and asks for a
relation per candidate; the verdicts decide where the new concept attaches.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from . import ontology as onto
from . import templates
from .errors import CycleDetected
from .llm_gateway import EmbeddingBackend, LlmGateway

log = logging.getLogger(__name__)

RELATIONS = ("parent_of_query", "child_of_query", "equivalent", "unrelated")

DEFAULT_K = 10


@dataclass
class CandidateSet:
    query: str
    candidates: list[tuple[str, float]]  # (qualified name, cosine), descending


@dataclass
class RelationVerdict:
    candidate: str  # qualified name
    relation: str
    rationale: str = ""
    score: float = 0.0  # cosine carried over from retrieval


def embedding_text(name: str, description: str) -> str:
    return f"{name}: {description}"


def embed_ontology(graph: onto.OntologyGraph, backend: EmbeddingBackend) -> dict[str, np.ndarray]:
    """One vector per concept, keyed by qualified name."""
    keys = list(graph.concepts)
    texts = []
    for q in keys:
        c = graph.concepts[q]
        if not c.description:
            log.warning("concept %s has an empty description; embedding name only", q)
        texts.append(embedding_text(c.name, c.description))
    if not keys:
        return {}
    vectors = backend.embed(texts)
    return {q: vectors[i] for i, q in enumerate(keys)}


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    denom = float(np.linalg.norm(a) * np.linalg.norm(b))
    if denom == 0.0:
        return 0.0
    return float(np.dot(a, b) / denom)


def retrieve_candidates(
    query: onto.Concept,
    index: dict[str, np.ndarray],
    k: int = DEFAULT_K,
    backend: EmbeddingBackend | None = None,
    query_vector: np.ndarray | None = None,
) -> CandidateSet:
    """Exact top-k by cosine; ties break lexicographically; the query itself is skipped."""
    if query_vector is None:
        if backend is None:
            raise ValueError("need a backend or a precomputed query vector")
        query_vector = backend.embed([embedding_text(query.name, query.description)])[0]
    scored = []
    for name, vector in index.items():
        if name == query.qualified:
            continue
        scored.append((name, _cosine(query_vector, vector)))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    return CandidateSet(query.qualified, scored[:k])


def classify_relations(
    query: onto.Concept,
    cands: CandidateSet,
    graph: onto.OntologyGraph,
    gateway: LlmGateway,
) -> list[RelationVerdict]:
    """One relation verdict per candidate, parsed tolerantly from the response.

    A candidate the response skips, or answers with an unknown relation
    token, defaults to unrelated with the parse problem recorded in the
    rationale.
    """
    if not cands.candidates:
        return []
    candidate_codes = "\n\n".join(
        onto.render_class_code(graph, name) for name, _ in cands.candidates
    )
    prompt = templates.RELATION_CLASSIFY_PROMPT.format(
        kind=query.kind,
        query_code=onto.render_concept_code(query),
        candidate_codes=candidate_codes,
    )
    response = gateway.ask(prompt, tag="relation-classify")

    answered: dict[str, tuple[str, str]] = {}
    for line in response.splitlines():
        if ":" not in line:
            continue
        name_part, relation_part = line.split(":", 1)
        name = name_part.strip().lstrip("-* ").casefold()
        relation = relation_part.strip().casefold()
        if relation in RELATIONS:
            answered.setdefault(name, (relation, line.strip()))

    verdicts = []
    for qualified, score in cands.candidates:
        bare = qualified.rsplit(".", 1)[1].casefold()
        hit = answered.get(bare) or answered.get(qualified.casefold())
        if hit is None:
            verdicts.append(RelationVerdict(
                qualified, "unrelated",
                "no parseable verdict line for this candidate", score,
            ))
        else:
            verdicts.append(RelationVerdict(qualified, hit[0], hit[1], score))
    return verdicts


@dataclass
class AlignmentOutcome:
    graph: onto.OntologyGraph
    parent: str  # qualified name or a root
    equivalent_to: str | None
    verdicts: list[RelationVerdict]
    note: str = ""


def expand_ontology(
    query: onto.Concept,
    verdicts: list[RelationVerdict],
    graph: onto.OntologyGraph,
) -> AlignmentOutcome:
    """Attach the query concept using the verdicts.

    Equivalence beats parenthood: the highest-cosine equivalent candidate
    donates its parent and an equivalence edge. Otherwise the highest-cosine
    parent_of_query candidate becomes the parent. Otherwise the kind root.
    """
    root = onto.ENTITY_ROOT if query.kind == "entity" else onto.EVENT_ROOT
    equivalent_to: str | None = None
    note = ""

    equivalents = [v for v in verdicts if v.relation == "equivalent"]
    parents = [v for v in verdicts if v.relation == "parent_of_query"]
    if equivalents:
        best = max(equivalents, key=lambda v: v.score)
        equivalent_to = best.candidate
        parent = graph.parents[best.candidate]
    elif parents:
        parent = max(parents, key=lambda v: v.score).candidate
    else:
        parent = root
        note = "no informative verdicts; attached under the kind root"

    candidate = replace(query, parent=parent, equivalents=[])
    try:
        new_graph = onto.add_concept(graph, candidate)
    except CycleDetected:
        note = f"attaching under {parent} would close a cycle; fell back to {root}"
        log.warning("%s: %s", query.name, note)
        parent = root
        equivalent_to = None
        new_graph = onto.add_concept(graph, replace(query, parent=parent, equivalents=[]))

    if equivalent_to is not None:
        new_graph = new_graph.with_equivalence(query.qualified, equivalent_to)
    return AlignmentOutcome(new_graph, parent, equivalent_to, verdicts, note)


def align_concept(
    query: onto.Concept,
    graph: onto.OntologyGraph,
    gateway: LlmGateway,
    index: dict[str, np.ndarray] | None = None,
    k: int = DEFAULT_K,
) -> AlignmentOutcome:
    """Full two-stage pass for one new concept."""
    if index is None:
        index = embed_ontology(graph, gateway.embedder)
    if not index:
        outcome = expand_ontology(query, [], graph)
        outcome.note = "empty ontology; attached under the kind root"
        return outcome
    cands = retrieve_candidates(query, index, k, backend=gateway.embedder)
    verdicts = classify_relations(query, cands, graph, gateway)
    return expand_ontology(query, verdicts, graph)


def make_llm_aligner(gateway: LlmGateway, k: int = DEFAULT_K):
    """Aligner closure for the taxonomy harness; caches embeddings per graph."""
    cache: dict[int, dict[str, np.ndarray]] = {}

    def aligner(query: onto.Concept, graph: onto.OntologyGraph) -> str:
        key = id(graph)
        if key not in cache:
            cache[key] = embed_ontology(graph, gateway.embedder)
        outcome = align_concept(query, graph, gateway, index=cache[key], k=k)
        return outcome.parent

    return aligner
