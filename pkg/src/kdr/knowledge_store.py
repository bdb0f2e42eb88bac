"""Knowledge store: typed instances merged by name, queried, rendered as code.

Instances of ontology concepts are keyed by (canonical concept, normalized
display name). Ingesting an object whose key already exists merges the two:
list-typed attributes take the set union preserving first-seen order, scalar
attributes keep the value with the latest provenance timestamp (ties go to
the later-ingested value), and every replaced scalar lands in the object's
history. Two distinct people sharing a name will merge; that is the accepted
cost of name-keyed merging.
"""

from __future__ import annotations

import hashlib
import json
import re
import threading
from dataclasses import dataclass, field

from . import ontology as onto
from .errors import (
    CorruptRecord,
    IoFailure,
    KeyMismatch,
    TypeMismatch,
    UnknownConcept,
    UnknownId,
    UnrenderableValue,
)
from .textindex import InvertedIndex, tokenize


@dataclass(frozen=True)
class Ref:
    """A resolved reference to another stored object."""

    id: str


@dataclass
class SlotValue:
    value: object  # str | int | float | Ref
    provenance_index: int = 0


@dataclass
class KnowledgeObject:
    id: str
    concept: str  # namespace-qualified canonical name
    display_name: str
    slots: dict[str, list[SlotValue]] = field(default_factory=dict)
    provenance: list[tuple[str, float]] = field(default_factory=list)
    updated_at: float = 0.0
    history: list[tuple[str, object, float]] = field(default_factory=list)

    def live(self, attr: str) -> list[object]:
        return [sv.value for sv in self.slots.get(attr, [])]

    def scalar(self, attr: str) -> object | None:
        values = self.live(attr)
        return values[0] if values else None


_EDGE_PUNCT = re.compile(r"^[\W_]+|[\W_]+$", re.UNICODE)


def normalize_name(name: str) -> str:
    """Merge-key normalization: casefold, collapse whitespace, trim punctuation."""
    collapsed = " ".join(str(name).split()).casefold()
    return _EDGE_PUNCT.sub("", collapsed)


def object_key(graph: onto.OntologyGraph, concept: str, display_name: str,
               namespace: str | None = None) -> tuple[str, str]:
    return graph.canonical_concept(concept, namespace), normalize_name(display_name)


def object_id(graph: onto.OntologyGraph, concept: str, display_name: str,
              namespace: str | None = None) -> str:
    canonical, normalized = object_key(graph, concept, display_name, namespace)
    digest = hashlib.sha1(f"{canonical}\x00{normalized}".encode("utf-8")).hexdigest()
    return digest[:16]


def _attr_specs(graph: onto.OntologyGraph, concept: str) -> dict[str, onto.AttributeSpec]:
    specs = onto.effective_attributes(graph, concept)
    return {a.name: a for a in specs[1:]}  # the mandatory slot lives in display_name


def _check_value(spec: onto.AttributeSpec, value: object, concept: str) -> None:
    base, _ = onto.parse_type_token(spec.type)
    if isinstance(value, Ref):
        if base in onto.SCALAR_BASES:
            raise TypeMismatch(f"{concept}.{spec.name} is {spec.type}, got a reference")
        return
    if base == "number":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeMismatch(f"{concept}.{spec.name} expects a number, got {value!r}")
        return
    # text, date, and unresolved references are all carried as strings
    if not isinstance(value, str):
        raise TypeMismatch(f"{concept}.{spec.name} expects text, got {value!r}")


def validate_object(graph: onto.OntologyGraph, obj: KnowledgeObject) -> None:
    specs = _attr_specs(graph, obj.concept)
    for attr, values in obj.slots.items():
        spec = specs.get(attr)
        if spec is None:
            raise TypeMismatch(f"{obj.concept} has no attribute {attr!r}")
        _, is_list = onto.parse_type_token(spec.type)
        if not is_list and len(values) > 1:
            raise TypeMismatch(f"{obj.concept}.{attr} is scalar but holds {len(values)} values")
        for sv in values:
            _check_value(spec, sv.value, obj.concept)


def make_object(
    graph: onto.OntologyGraph,
    concept: str,
    display_name: str,
    slots: dict[str, object] | None = None,
    provenance: list[tuple[str, float]] | None = None,
    namespace: str | None = None,
) -> KnowledgeObject:
    """Build a validated object; list attrs take lists, scalars take bare values."""
    canonical, _ = object_key(graph, concept, display_name, namespace)
    specs = _attr_specs(graph, canonical)
    slot_values: dict[str, list[SlotValue]] = {}
    for attr, raw in (slots or {}).items():
        if attr not in specs:
            raise TypeMismatch(f"{canonical} has no attribute {attr!r}")
        _, is_list = onto.parse_type_token(specs[attr].type)
        values = list(raw) if isinstance(raw, (list, tuple)) else [raw]
        if not is_list and len(values) > 1:
            raise TypeMismatch(f"{canonical}.{attr} is scalar, got {len(values)} values")
        if values:
            slot_values[attr] = [SlotValue(v, 0) for v in values]
    prov = list(provenance or [])
    obj = KnowledgeObject(
        id=object_id(graph, concept, display_name, namespace),
        concept=canonical,
        display_name=" ".join(str(display_name).split()),
        slots=slot_values,
        provenance=prov,
        updated_at=max((ts for _, ts in prov), default=0.0),
    )
    validate_object(graph, obj)
    return obj


# -- merging ---------------------------------------------------------------------


def _value_ts(obj: KnowledgeObject, sv: SlotValue) -> float:
    if 0 <= sv.provenance_index < len(obj.provenance):
        return obj.provenance[sv.provenance_index][1]
    return obj.updated_at


def _plain(value: object) -> object:
    return {"ref": value.id} if isinstance(value, Ref) else value


def merge_objects(a: KnowledgeObject, b: KnowledgeObject,
                  graph: onto.OntologyGraph) -> KnowledgeObject:
    """Merge newcomer b into existing a; neither input is mutated."""
    if (a.concept, normalize_name(a.display_name)) != (b.concept, normalize_name(b.display_name)):
        raise KeyMismatch(f"cannot merge {a.concept}:{a.display_name} with {b.concept}:{b.display_name}")

    provenance = list(a.provenance)
    seen = set(provenance)
    index_map: dict[int, int] = {}
    for i, entry in enumerate(b.provenance):
        if entry in seen:
            index_map[i] = provenance.index(entry)
        else:
            index_map[i] = len(provenance)
            provenance.append(entry)
            seen.add(entry)

    def remap(sv: SlotValue) -> SlotValue:
        return SlotValue(sv.value, index_map.get(sv.provenance_index, 0))

    specs = _attr_specs(graph, a.concept)
    slots: dict[str, list[SlotValue]] = {k: list(v) for k, v in a.slots.items()}
    history = list(a.history)
    for attr, incoming in b.slots.items():
        _, is_list = onto.parse_type_token(specs[attr].type)
        if attr not in slots:
            slots[attr] = [remap(sv) for sv in incoming]
            continue
        if is_list:
            present = [sv.value for sv in slots[attr]]
            for sv in incoming:
                if sv.value not in present:
                    slots[attr].append(remap(sv))
                    present.append(sv.value)
        else:
            current = slots[attr][0]
            new = incoming[0]
            if new.value == current.value:
                continue
            new_ts, cur_ts = _value_ts(b, new), _value_ts(a, current)
            if new_ts >= cur_ts:  # equal timestamps: the later-ingested value wins
                history.append((attr, _plain(current.value), new_ts))
                slots[attr] = [remap(new)]

    merged = KnowledgeObject(
        id=a.id,
        concept=a.concept,
        display_name=a.display_name,
        slots=slots,
        provenance=provenance,
        updated_at=max((ts for _, ts in provenance), default=max(a.updated_at, b.updated_at)),
        history=history,
    )
    return merged


# -- the store ---------------------------------------------------------------------


class KnowledgeStore:
    """In-memory object store with a single-writer lock and a lazy text index."""

    def __init__(self, graph: onto.OntologyGraph):
        self.graph = graph
        self.objects: dict[str, KnowledgeObject] = {}
        self._lock = threading.Lock()
        self._index: InvertedIndex | None = None

    def __len__(self) -> int:
        return len(self.objects)

    def get(self, obj_id: str) -> KnowledgeObject:
        if obj_id not in self.objects:
            raise UnknownId(f"no object with id {obj_id!r}")
        return self.objects[obj_id]

    def ingest(self, obj: KnowledgeObject) -> KnowledgeObject:
        """Insert or merge; returns the stored object after the update."""
        try:
            self.graph.resolve(obj.concept)
        except UnknownConcept:
            raise
        validate_object(self.graph, obj)
        with self._lock:
            existing = self.objects.get(obj.id)
            stored = merge_objects(existing, obj, self.graph) if existing else obj
            self.objects[obj.id] = stored
            self._index = None
        return stored

    def ingest_all(self, objects: list[KnowledgeObject]) -> list[KnowledgeObject]:
        return [self.ingest(o) for o in objects]

    # -- reference settlement ------------------------------------------------------

    def settle(self) -> int:
        """Resolve string values sitting in reference-typed slots.

        A string in a ref slot is an unresolved display-name reference; when
        exactly that name exists for the target concept (or a descendant),
        the string becomes a real Ref. Returns how many got resolved.
        """
        resolved = 0
        with self._lock:
            for obj in self.objects.values():
                specs = _attr_specs(self.graph, obj.concept)
                for attr, values in obj.slots.items():
                    base, _ = onto.parse_type_token(specs[attr].type)
                    if base in onto.SCALAR_BASES:
                        continue
                    target = self.graph.resolve(base, obj.concept.rsplit(".", 1)[0])
                    for sv in values:
                        if not isinstance(sv.value, str):
                            continue
                        hit = self._find_by_name(sv.value, target)
                        if hit is not None:
                            sv.value = Ref(hit)
                            resolved += 1
            self._index = None
        return resolved

    def _find_by_name(self, name: str, target_concept: str) -> str | None:
        wanted = normalize_name(name)
        hits = []
        for obj in self.objects.values():
            if normalize_name(obj.display_name) != wanted:
                continue
            q = obj.concept
            if q == target_concept or self.graph.is_descendant(q, target_concept) or \
                    target_concept in self.graph.equivalence_class(q):
                hits.append(obj.id)
        return sorted(hits)[0] if hits else None

    # -- queries --------------------------------------------------------------------

    def query_by_name(self, name: str, fuzzy: bool = False) -> list[KnowledgeObject]:
        if not fuzzy:
            wanted = normalize_name(name)
            matches = [o for o in self.objects.values()
                       if normalize_name(o.display_name) == wanted]
            return sorted(matches, key=lambda o: (o.display_name, o.id))
        query_tokens = set(tokenize(name))
        scored = []
        for obj in self.objects.values():
            overlap = len(query_tokens & set(tokenize(self._document_text(obj))))
            if overlap:
                scored.append((obj, overlap))
        scored.sort(key=lambda pair: (-pair[1], pair[0].display_name, pair[0].id))
        return [obj for obj, _ in scored]

    def _document_text(self, obj: KnowledgeObject) -> str:
        parts = [obj.display_name]
        for values in obj.slots.values():
            for sv in values:
                if isinstance(sv.value, str):
                    parts.append(sv.value)
        return " ".join(parts)

    def _ensure_index(self) -> InvertedIndex:
        if self._index is None:
            index = InvertedIndex()
            for obj_id in sorted(self.objects):
                index.add(obj_id, self._document_text(self.objects[obj_id]))
            self._index = index
        return self._index

    def fulltext_search(self, query: str, limit: int = 10) -> list[tuple[str, float]]:
        return self._ensure_index().search(query, limit=limit)

    def subgraph(self, seed_ids: list[str], hops: int = 1) -> list[KnowledgeObject]:
        """Closure over references, both directions, breadth-first, deterministic."""
        for seed in seed_ids:
            if seed not in self.objects:
                raise UnknownId(f"no object with id {seed!r}")
        inbound: dict[str, list[str]] = {}
        for obj_id in sorted(self.objects):
            for attr in sorted(self.objects[obj_id].slots):
                for sv in self.objects[obj_id].slots[attr]:
                    if isinstance(sv.value, Ref):
                        inbound.setdefault(sv.value.id, []).append(obj_id)

        seen = dict.fromkeys(seed_ids)  # insertion-ordered set
        frontier = list(seed_ids)
        for _ in range(hops):
            next_frontier = []
            for obj_id in frontier:
                obj = self.objects[obj_id]
                neighbors = []
                for attr in sorted(obj.slots):
                    for sv in obj.slots[attr]:
                        if isinstance(sv.value, Ref) and sv.value.id in self.objects:
                            neighbors.append(sv.value.id)
                neighbors.extend(inbound.get(obj_id, []))
                for n in neighbors:
                    if n not in seen:
                        seen[n] = None
                        next_frontier.append(n)
            if not next_frontier:
                break
            frontier = next_frontier
        return [self.objects[i] for i in seen]


# -- declaration-code rendering -------------------------------------------------------


def _render_literal(value: object, var_of: dict[str, str], resolve_external) -> str:
    if isinstance(value, Ref):
        if value.id in var_of:
            return var_of[value.id]
        if resolve_external is not None:
            name = resolve_external(value.id)
            if name is not None:
                return json.dumps(name, ensure_ascii=False)
        raise UnrenderableValue(f"reference to {value.id!r} cannot be rendered")
    if isinstance(value, bool):
        raise UnrenderableValue(f"boolean {value!r} has no attribute type")
    if isinstance(value, str):
        return json.dumps(value, ensure_ascii=False)
    if isinstance(value, (int, float)):
        return repr(value)
    raise UnrenderableValue(f"cannot render {value!r}")


def _declaration_order(objects: list[KnowledgeObject]) -> list[KnowledgeObject]:
    """Referees before referrers; input order breaks ties; cycles cut silently."""
    ids = {o.id for o in objects}
    deps: dict[str, set[str]] = {}
    for obj in objects:
        wants = set()
        for values in obj.slots.values():
            for sv in values:
                if isinstance(sv.value, Ref) and sv.value.id in ids and sv.value.id != obj.id:
                    wants.add(sv.value.id)
        deps[obj.id] = wants
    ordered: list[KnowledgeObject] = []
    placed: set[str] = set()
    remaining = list(objects)
    while remaining:
        progressed = False
        still = []
        for obj in remaining:
            if deps[obj.id] <= placed:
                ordered.append(obj)
                placed.add(obj.id)
                progressed = True
            else:
                still.append(obj)
        if not progressed:
            # reference cycle: place the first pending object and let its
            # in-cycle refs degrade to display-name strings
            ordered.append(still[0])
            placed.add(still[0].id)
            still = still[1:]
        remaining = still
    return ordered


def render_declaration_code(
    objects: list[KnowledgeObject],
    graph: onto.OntologyGraph,
    resolve_external=None,
    result_var: str = "search_results",
) -> str:
    """Constructor calls bound to o{i} variables, then the result list.

    Objects are declared referees-first; reference cycles and unresolvable
    external references fall back to display-name strings when possible.
    """
    ordered = _declaration_order(objects)
    var_of: dict[str, str] = {}
    display_of = {o.id: o.display_name for o in objects}

    def resolve(ref_id: str):
        if resolve_external is not None:
            name = resolve_external(ref_id)
            if name is not None:
                return name
        return display_of.get(ref_id)

    lines = []
    for i, obj in enumerate(ordered):
        var = f"o{i}"
        specs = onto.effective_attributes(graph, obj.concept)
        mandatory = specs[0]
        parts = [f"{mandatory.name}={json.dumps(obj.display_name, ensure_ascii=False)}"]
        for spec in specs[1:]:
            values = obj.live(spec.name)
            if not values:
                continue
            _, is_list = onto.parse_type_token(spec.type)
            rendered = [_render_literal(v, var_of, resolve) for v in values]
            parts.append(
                f"{spec.name}=[{', '.join(rendered)}]" if is_list else f"{spec.name}={rendered[0]}"
            )
        class_name = obj.concept.rsplit(".", 1)[1]
        lines.append(f"{var} = {class_name}({', '.join(parts)})")
        var_of[obj.id] = var

    listed = ", ".join(var_of[o.id] for o in objects)
    lines.append(f"{result_var} = [{listed}]")
    return "\n".join(lines)


# -- persistence -----------------------------------------------------------------------


def _slot_to_json(values: list[SlotValue]) -> list[dict]:
    out = []
    for sv in values:
        value = {"ref": sv.value.id} if isinstance(sv.value, Ref) else sv.value
        out.append({"value": value, "provenance_index": sv.provenance_index})
    return out


def _slot_from_json(raw: list, attr: str, line_number: int) -> list[SlotValue]:
    values = []
    for item in raw:
        if not isinstance(item, dict) or "value" not in item:
            raise CorruptRecord(f"bad slot value under {attr!r}", line_number)
        value = item["value"]
        if isinstance(value, dict):
            if set(value) != {"ref"}:
                raise CorruptRecord(f"bad reference under {attr!r}", line_number)
            value = Ref(value["ref"])
        values.append(SlotValue(value, int(item.get("provenance_index", 0))))
    return values


def save(store: KnowledgeStore, path: str) -> None:
    try:
        with open(path, "w", encoding="utf-8") as handle:
            for obj_id in store.objects:
                obj = store.objects[obj_id]
                row = {
                    "id": obj.id,
                    "concept": obj.concept,
                    "display_name": obj.display_name,
                    "slots": {attr: _slot_to_json(v) for attr, v in obj.slots.items()},
                    "provenance": [[s, ts] for s, ts in obj.provenance],
                    "updated_at": obj.updated_at,
                    "history": [[attr, value, ts] for attr, value, ts in obj.history],
                }
                handle.write(json.dumps(row, ensure_ascii=False) + "\n")
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


_ROW_KEYS = {"id", "concept", "display_name", "slots", "provenance", "updated_at", "history"}


def load(path: str, graph: onto.OntologyGraph) -> KnowledgeStore:
    store = KnowledgeStore(graph)
    try:
        with open(path, encoding="utf-8") as handle:
            lines = handle.read().splitlines()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    for n, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            row = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptRecord(exc.msg, n) from exc
        if not isinstance(row, dict) or set(row) != _ROW_KEYS:
            raise CorruptRecord("unexpected field set", n)
        try:
            obj = KnowledgeObject(
                id=row["id"],
                concept=row["concept"],
                display_name=row["display_name"],
                slots={attr: _slot_from_json(v, attr, n) for attr, v in row["slots"].items()},
                provenance=[(s, float(ts)) for s, ts in row["provenance"]],
                updated_at=float(row["updated_at"]),
                history=[(attr, value, float(ts)) for attr, value, ts in row["history"]],
            )
        except (TypeError, ValueError, KeyError) as exc:
            raise CorruptRecord(str(exc), n) from exc
        store.objects[obj.id] = obj
    return store
