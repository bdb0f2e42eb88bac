"""Code-represented ontology.

Concepts are stored as class-like nodes rooted at the two predefined base
concepts ``Entity`` and ``Event``. The module renders concepts as canonical
class-definition code, renders import clauses, and answers hierarchy queries
(depth, lowest common ancestor, Wu&Palmer similarity).

Graphs are copy-on-update: every mutation returns a new graph and never
touches the one it was derived from, so concurrent readers of a loaded graph
are always safe.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

from .errors import (
    AmbiguousName,
    CycleDetected,
    DuplicateAttribute,
    DuplicateName,
    EmptyImport,
    KindMismatch,
    ParseFailure,
    SchemaViolation,
    UnknownConcept,
    UnknownParent,
)

ENTITY_ROOT = "Entity"
EVENT_ROOT = "Event"
ROOTS = {ENTITY_ROOT: "entity", EVENT_ROOT: "event"}

# Mandatory first constructor slot per kind: entity instances are identified
# by a name, event instances by their trigger phrase.
MANDATORY_SLOT = {"entity": "name", "event": "trigger"}

ROOT_DESCRIPTIONS = {
    ENTITY_ROOT: "Base concept for all entities.",
    EVENT_ROOT: "Base concept for all events.",
}

_NAME_RE = re.compile(r"[A-Z][A-Za-z0-9]*\Z")
_ATTR_RE = re.compile(r"[a-z][a-z0-9_]*\Z")
_NAMESPACE_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_\-]*\Z")

SCALAR_BASES = ("text", "number", "date")


def _normalize_text(value: str) -> str:
    """Collapse a free-text field onto one line so class code stays line-based."""
    return " ".join(str(value).split())


@dataclass
class AttributeSpec:
    """One typed attribute of a concept.

    ``type`` is a type token: ``text``, ``number``, ``date``, ``List[...]`` of
    those, a concept name for a reference, or ``List[ConceptName]``.
    """

    name: str
    type: str
    doc: str = ""

    def __post_init__(self) -> None:
        self.doc = _normalize_text(self.doc)


def parse_type_token(token: str) -> tuple[str, bool]:
    """Split a type token into (base, is_list).

    The base is one of the scalar bases or a referenced concept name.
    """
    inner, is_list = token, False
    if token.startswith("List[") and token.endswith("]"):
        inner, is_list = token[5:-1], True
    if inner in SCALAR_BASES or _NAME_RE.match(inner):
        return inner, is_list
    raise SchemaViolation(f"invalid attribute type token: {token!r}")


def is_ref_type(token: str) -> bool:
    base, _ = parse_type_token(token)
    return base not in SCALAR_BASES


@dataclass
class Concept:
    """A node of the ontology: an entity or event class.

    Free-text fields (description, examples, attribute docs) are normalized
    onto single lines at construction time; the canonical code rendering is
    line-based and must stay injective.
    """

    name: str
    namespace: str
    kind: str
    parent: str
    description: str = ""
    examples: list[str] = field(default_factory=list)
    attributes: list[AttributeSpec] = field(default_factory=list)
    equivalents: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.description = _normalize_text(self.description)
        self.examples = [e for e in (_normalize_text(x) for x in self.examples) if e]

    @property
    def qualified(self) -> str:
        return f"{self.namespace}.{self.name}"


def _validate_concept_fields(c: Concept) -> None:
    if not _NAME_RE.match(c.name):
        raise SchemaViolation(f"concept name {c.name!r} must be UpperCamelCase")
    if not _NAMESPACE_RE.match(c.namespace):
        raise SchemaViolation(f"invalid namespace {c.namespace!r}")
    if c.kind not in ("entity", "event"):
        raise SchemaViolation(f"unknown kind {c.kind!r} for concept {c.name}")
    seen: set[str] = set()
    for attr in c.attributes:
        if not _ATTR_RE.match(attr.name):
            raise SchemaViolation(
                f"attribute name {attr.name!r} of {c.name} must be lower_snake_case"
            )
        if attr.name in seen:
            raise DuplicateAttribute(f"attribute {attr.name!r} repeated in {c.name}")
        seen.add(attr.name)
        parse_type_token(attr.type)


@dataclass
class OntologyGraph:
    """An immutable snapshot of the ontology forest.

    ``concepts`` maps qualified names (``namespace.Name``) to concepts;
    ``parents`` maps qualified names to qualified parent names or a root.
    Equivalence is kept symmetric: both directions are stored.
    """

    concepts: dict[str, Concept] = field(default_factory=dict)
    parents: dict[str, str] = field(default_factory=dict)
    equivalences: dict[str, set[str]] = field(default_factory=dict)
    dependencies: dict[str, tuple[str, ...]] = field(default_factory=dict)

    # -- lookup ---------------------------------------------------------------

    def resolve(self, name: str, namespace: str | None = None) -> str:
        """Resolve a possibly-unqualified concept name to its qualified form.

        Lookup order: roots, explicit qualification, the given namespace, that
        namespace's declared dependencies, then a unique global match.
        """
        if name in ROOTS:
            return name
        if "." in name:
            if name in self.concepts:
                return name
            raise UnknownConcept(f"unknown concept {name!r}")
        if namespace is not None:
            q = f"{namespace}.{name}"
            if q in self.concepts:
                return q
            for dep in self.dependencies.get(namespace, ()):
                q = f"{dep}.{name}"
                if q in self.concepts:
                    return q
        matches = [q for q in self.concepts if q.rsplit(".", 1)[1] == name]
        if len(matches) == 1:
            return matches[0]
        if not matches:
            raise UnknownConcept(f"unknown concept {name!r}")
        raise AmbiguousName(f"{name!r} exists in several namespaces: {sorted(matches)}")

    def get(self, name: str, namespace: str | None = None) -> Concept:
        q = self.resolve(name, namespace)
        if q in ROOTS:
            raise UnknownConcept(f"{q} is a root, not a stored concept")
        return self.concepts[q]

    def kind_of(self, qualified: str) -> str:
        if qualified in ROOTS:
            return ROOTS[qualified]
        return self.concepts[qualified].kind

    def namespaces(self) -> dict[str, list[Concept]]:
        out: dict[str, list[Concept]] = {}
        for concept in self.concepts.values():
            out.setdefault(concept.namespace, []).append(concept)
        return out

    def equivalence_class(self, qualified: str) -> set[str]:
        """Transitive closure of declared equivalences, including the node itself."""
        seen = {qualified}
        frontier = [qualified]
        while frontier:
            node = frontier.pop()
            for other in self.equivalences.get(node, ()):
                if other not in seen:
                    seen.add(other)
                    frontier.append(other)
        return seen

    def canonical_concept(self, name: str, namespace: str | None = None) -> str:
        """Canonical representative of a concept's equivalence class.

        The lexicographically smallest qualified member, so merge keys are
        stable no matter which equivalent label produced an instance.
        """
        q = self.resolve(name, namespace)
        if q in ROOTS:
            return q
        return min(self.equivalence_class(q))

    # -- hierarchy ------------------------------------------------------------

    def root_path(self, qualified: str) -> list[str]:
        """Path from the kind root down to the node, inclusive."""
        path = [qualified]
        node = qualified
        while node not in ROOTS:
            node = self.parents[node]
            path.append(node)
        path.reverse()
        return path

    def is_descendant(self, qualified: str, ancestor: str) -> bool:
        return ancestor in self.root_path(qualified)[:-1]

    # -- copy-on-update mutation ----------------------------------------------

    def _clone(self) -> "OntologyGraph":
        return OntologyGraph(
            concepts=dict(self.concepts),
            parents=dict(self.parents),
            equivalences={k: set(v) for k, v in self.equivalences.items()},
            dependencies=dict(self.dependencies),
        )

    def with_dependency(self, namespace: str, dep: str) -> "OntologyGraph":
        g = self._clone()
        current = g.dependencies.get(namespace, ())
        if dep not in current:
            g.dependencies[namespace] = current + (dep,)
        return g

    def with_equivalence(self, a: str, b: str, namespace: str | None = None) -> "OntologyGraph":
        qa, qb = self.resolve(a, namespace), self.resolve(b, namespace)
        if qa in ROOTS or qb in ROOTS:
            raise SchemaViolation("roots cannot take part in equivalences")
        if self.kind_of(qa) != self.kind_of(qb):
            raise KindMismatch(f"{qa} and {qb} have different kinds")
        g = self._clone()
        g.equivalences.setdefault(qa, set()).add(qb)
        g.equivalences.setdefault(qb, set()).add(qa)
        return g


def empty_graph() -> OntologyGraph:
    return OntologyGraph()


def add_concept(graph: OntologyGraph, c: Concept) -> OntologyGraph:
    """Insert a concept, returning a new graph; the input graph is untouched."""
    _validate_concept_fields(c)
    q = c.qualified
    if q in graph.concepts:
        raise DuplicateName(f"{q} already defined")

    if c.parent == c.name or c.parent == q:
        raise CycleDetected(f"{c.name} cannot be its own parent")
    if c.parent in ROOTS:
        parent_q = c.parent
    else:
        try:
            parent_q = graph.resolve(c.parent, c.namespace)
        except UnknownConcept as exc:
            raise UnknownParent(str(exc)) from exc
    if graph.kind_of(parent_q) != c.kind:
        raise KindMismatch(
            f"parent {parent_q} is a {graph.kind_of(parent_q)}, {c.name} is a {c.kind}"
        )

    inherited = {a.name for a in _inherited_attributes(graph, parent_q, c.kind)}
    inherited.add(MANDATORY_SLOT[c.kind])
    for attr in c.attributes:
        if attr.name in inherited:
            raise DuplicateAttribute(
                f"attribute {attr.name!r} of {c.name} shadows an inherited attribute"
            )

    for attr in c.attributes:
        base, _ = parse_type_token(attr.type)
        if base in SCALAR_BASES or base == c.name:
            continue
        try:
            graph.resolve(base, c.namespace)
        except UnknownConcept:
            raise UnknownConcept(
                f"attribute {attr.name!r} of {c.name} references unknown concept {base!r}"
            )

    resolved_equivalents = []
    for other in c.equivalents:
        other_q = graph.resolve(other, c.namespace)
        if other_q in ROOTS:
            raise SchemaViolation("roots cannot take part in equivalences")
        if graph.kind_of(other_q) != c.kind:
            raise KindMismatch(f"{c.name} and {other_q} have different kinds")
        resolved_equivalents.append(other_q)

    g = graph._clone()
    g.concepts[q] = c
    g.parents[q] = parent_q
    for other_q in resolved_equivalents:
        g.equivalences.setdefault(q, set()).add(other_q)
        g.equivalences.setdefault(other_q, set()).add(q)
    return g


def validate_graph(graph: OntologyGraph) -> None:
    """Re-check the forest and equivalence invariants of a whole graph."""
    for q in graph.concepts:
        seen = {q}
        node = q
        while node not in ROOTS:
            node = graph.parents.get(node)
            if node is None:
                raise UnknownParent(f"{q} is detached from both roots")
            if node in seen:
                raise CycleDetected(f"parent cycle through {node}")
            seen.add(node)
        if ROOTS[node] != graph.concepts[q].kind:
            raise KindMismatch(f"{q} reaches the wrong root {node}")
    for a, others in graph.equivalences.items():
        for b in others:
            if graph.kind_of(a) != graph.kind_of(b):
                raise KindMismatch(f"equivalence {a} ~ {b} crosses kinds")
            if a not in graph.equivalences.get(b, ()):
                raise SchemaViolation(f"equivalence {a} ~ {b} is not symmetric")


# -- hierarchy queries --------------------------------------------------------


def depth(graph: OntologyGraph, name: str, namespace: str | None = None) -> int:
    """Depth of a node with the roots at depth 1."""
    return len(graph.root_path(graph.resolve(name, namespace)))


def lowest_common_ancestor(
    graph: OntologyGraph, a: str, b: str, namespace: str | None = None
) -> str:
    qa, qb = graph.resolve(a, namespace), graph.resolve(b, namespace)
    if graph.kind_of(qa) != graph.kind_of(qb):
        raise KindMismatch(f"{qa} and {qb} have different kinds")
    path_a, path_b = graph.root_path(qa), graph.root_path(qb)
    lca = path_a[0]
    for x, y in zip(path_a, path_b):
        if x != y:
            break
        lca = x
    return lca


def wu_palmer(graph: OntologyGraph, a: str, b: str, namespace: str | None = None) -> float:
    """2 * depth(lca) / (depth(a) + depth(b)); 1.0 exactly when a is b."""
    lca = lowest_common_ancestor(graph, a, b, namespace)
    da = depth(graph, a, namespace)
    db = depth(graph, b, namespace)
    return 2.0 * depth(graph, lca) / (da + db)


# -- attribute resolution -----------------------------------------------------


def _inherited_attributes(graph: OntologyGraph, parent_q: str, kind: str) -> list[AttributeSpec]:
    if parent_q in ROOTS:
        return []
    attrs: list[AttributeSpec] = []
    for node in graph.root_path(parent_q):
        if node in ROOTS:
            continue
        attrs.extend(graph.concepts[node].attributes)
    return attrs


def mandatory_attribute(kind: str) -> AttributeSpec:
    return AttributeSpec(MANDATORY_SLOT[kind], "text", "identifying name")


def effective_attributes(
    graph: OntologyGraph, name: str, namespace: str | None = None
) -> list[AttributeSpec]:
    """Full constructor slot list: the mandatory slot, inherited, then own."""
    q = graph.resolve(name, namespace)
    if q in ROOTS:
        return [mandatory_attribute(ROOTS[q])]
    c = graph.concepts[q]
    attrs = [mandatory_attribute(c.kind)]
    attrs.extend(_inherited_attributes(graph, graph.parents[q], c.kind))
    attrs.extend(c.attributes)
    return attrs


def standalone_attributes(c: Concept) -> list[AttributeSpec]:
    """Constructor slots for a concept not yet attached to any graph."""
    return [mandatory_attribute(c.kind)] + list(c.attributes)


# -- canonical code rendering ---------------------------------------------------


def _render_class(
    name: str,
    parent_display: str,
    description: str,
    examples: list[str],
    attrs: list[AttributeSpec],
) -> str:
    lines = [f"class {name}({parent_display}):"]
    lines.append(f'    """{description}')
    lines.append("    Examples:")
    for example in examples:
        lines.append(f"    {example}")
    lines.append('    """')
    params = ", ".join(["self"] + [f"{a.name}: {a.type}" for a in attrs])
    lines.append(f"    def __init__({params}): ...")
    return "\n".join(lines)


def render_class_code(graph: OntologyGraph, name: str, namespace: str | None = None) -> str:
    """Canonical class-definition code for a concept; byte-deterministic."""
    q = graph.resolve(name, namespace)
    if q in ROOTS:
        return _render_class(q, "object", ROOT_DESCRIPTIONS[q], [], [mandatory_attribute(ROOTS[q])])
    c = graph.concepts[q]
    parent_q = graph.parents[q]
    parent_display = parent_q if parent_q in ROOTS else parent_q.rsplit(".", 1)[1]
    return _render_class(
        c.name, parent_display, c.description, c.examples, effective_attributes(graph, q)
    )


def render_concept_code(c: Concept) -> str:
    """Class code for a concept that is not (yet) part of a graph."""
    parent_display = c.parent if c.parent else {"entity": ENTITY_ROOT, "event": EVENT_ROOT}[c.kind]
    return _render_class(c.name, parent_display, c.description, c.examples, standalone_attributes(c))


def parse_class_code(text: str) -> dict:
    """Parse canonical class code back into its structural fields.

    Returns a dict with name, parent, description, examples and attributes
    (the full constructor slot list, mandatory slot included). Attribute docs
    are not carried by the code, so they come back empty.
    """
    lines = text.split("\n")
    if len(lines) < 5:
        raise ParseFailure("class code too short")
    m = re.match(r"class ([A-Za-z0-9]+)\(([A-Za-z0-9]+)\):\Z", lines[0])
    if not m:
        raise ParseFailure(f"bad class header: {lines[0]!r}")
    name, parent = m.group(1), m.group(2)
    if not lines[1].startswith('    """'):
        raise ParseFailure("missing docstring opener")
    description = lines[1][len('    """'):]
    if lines[2] != "    Examples:":
        raise ParseFailure("missing Examples: marker")
    examples = []
    i = 3
    while i < len(lines) and lines[i] != '    """':
        if not lines[i].startswith("    "):
            raise ParseFailure(f"bad example line: {lines[i]!r}")
        examples.append(lines[i][4:])
        i += 1
    if i >= len(lines):
        raise ParseFailure("unterminated docstring")
    ctor = lines[i + 1] if i + 1 < len(lines) else ""
    m = re.match(r"    def __init__\(self(?:, (.*))?\): \.\.\.\Z", ctor)
    if not m:
        raise ParseFailure(f"bad constructor line: {ctor!r}")
    attrs: list[AttributeSpec] = []
    if m.group(1):
        for part in m.group(1).split(", "):
            if ": " not in part:
                raise ParseFailure(f"bad parameter: {part!r}")
            attr_name, token = part.split(": ", 1)
            parse_type_token(token)
            attrs.append(AttributeSpec(attr_name, token))
    return {
        "name": name,
        "parent": parent,
        "description": description,
        "examples": examples,
        "attributes": attrs,
    }


def render_import_clause(graph: OntologyGraph, namespace: str, names: list[str]) -> str:
    """``From {namespace} Import {n1}, {n2}, ...`` preserving input order."""
    if not names:
        raise EmptyImport(f"no names to import from {namespace}")
    for n in names:
        if f"{namespace}.{n}" not in graph.concepts:
            raise UnknownConcept(f"{n!r} does not exist in namespace {namespace}")
    return f"From {namespace} Import {', '.join(names)}"


# -- persistence ----------------------------------------------------------------

_TOP_KEYS = {"namespaces"}
_CONCEPT_KEYS = {"name", "kind", "parent", "description", "examples", "attributes", "equivalents"}
_ATTR_KEYS = {"name", "type", "doc"}


def graph_from_document(document: dict) -> OntologyGraph:
    """Build a graph from the ontology JSON document shape.

    Unknown keys anywhere in the document are rejected. Concepts may appear
    in any order; parent links are settled iteratively and leftovers are
    reported as cycles or unknown parents.
    """
    if not isinstance(document, dict):
        raise SchemaViolation("ontology document must be a JSON object")
    unknown = set(document) - _TOP_KEYS
    if unknown:
        raise SchemaViolation(f"unknown top-level keys: {sorted(unknown)}")
    namespaces = document.get("namespaces", {})
    if not isinstance(namespaces, dict):
        raise SchemaViolation("'namespaces' must be an object")

    pending: list[Concept] = []
    declared_equivalences: list[tuple[str, str, str]] = []
    for ns, entries in namespaces.items():
        if not isinstance(entries, list):
            raise SchemaViolation(f"namespace {ns!r} must hold a list of concepts")
        for entry in entries:
            if not isinstance(entry, dict):
                raise SchemaViolation(f"concept entries in {ns!r} must be objects")
            unknown = set(entry) - _CONCEPT_KEYS
            if unknown:
                raise SchemaViolation(f"unknown concept keys in {ns!r}: {sorted(unknown)}")
            for required in ("name", "kind", "parent"):
                if required not in entry:
                    raise SchemaViolation(f"concept in {ns!r} is missing {required!r}")
            attrs = []
            for raw in entry.get("attributes", []):
                if not isinstance(raw, dict):
                    raise SchemaViolation("attribute entries must be objects")
                unknown = set(raw) - _ATTR_KEYS
                if unknown:
                    raise SchemaViolation(f"unknown attribute keys: {sorted(unknown)}")
                if "name" not in raw or "type" not in raw:
                    raise SchemaViolation("attribute entries need 'name' and 'type'")
                attrs.append(AttributeSpec(raw["name"], raw["type"], raw.get("doc", "")))
            concept = Concept(
                name=entry["name"],
                namespace=ns,
                kind=entry["kind"],
                parent=entry["parent"],
                description=entry.get("description", ""),
                examples=list(entry.get("examples", [])),
                attributes=attrs,
            )
            pending.append(concept)
            for other in entry.get("equivalents", []):
                declared_equivalences.append((ns, entry["name"], other))

    graph = empty_graph()
    remaining = pending
    while remaining:
        progressed = []
        stuck = []
        for concept in remaining:
            try:
                graph = add_concept(graph, concept)
                progressed.append(concept)
            except (UnknownParent, UnknownConcept):
                stuck.append(concept)
        if not progressed:
            names = {c.name for c in stuck}
            internal = [c for c in stuck if c.parent in names]
            if internal:
                raise CycleDetected(
                    f"parent cycle among: {sorted(c.qualified for c in internal)}"
                )
            first = stuck[0]
            raise UnknownParent(f"{first.qualified} has unknown parent {first.parent!r}")
        remaining = stuck

    for ns, name, other in declared_equivalences:
        graph = graph.with_equivalence(name, other, namespace=ns)
    validate_graph(graph)
    return graph


def graph_to_document(graph: OntologyGraph) -> dict:
    namespaces: dict[str, list[dict]] = {}
    for concept in graph.concepts.values():
        equivalents = sorted(
            q for q in graph.equivalences.get(concept.qualified, ())
        )
        namespaces.setdefault(concept.namespace, []).append(
            {
                "name": concept.name,
                "kind": concept.kind,
                "parent": concept.parent,
                "description": concept.description,
                "examples": list(concept.examples),
                "attributes": [
                    {"name": a.name, "type": a.type, "doc": a.doc} for a in concept.attributes
                ],
                "equivalents": equivalents,
            }
        )
    return {"namespaces": namespaces}


def load_ontology(path: str) -> OntologyGraph:
    with open(path, encoding="utf-8") as handle:
        try:
            document = json.load(handle)
        except json.JSONDecodeError as exc:
            raise SchemaViolation(f"not valid JSON: {exc}") from exc
    return graph_from_document(document)


def save_ontology(graph: OntologyGraph, path: str) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(graph_to_document(graph), handle, indent=2, ensure_ascii=False)
        handle.write("\n")
