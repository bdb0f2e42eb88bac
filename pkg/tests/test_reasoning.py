"""Decomposition tags, script assembly, sandboxed execution, and both cycles."""

from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kdr import knowledge_store as ks
from kdr import ontology as onto
from kdr import reasoning as rs
from kdr.errors import (
    EmptyQuery,
    NoConceptFound,
    NoInstancesFound,
    NoTopicEntity,
    RejectedCode,
    UnbalancedTags,
)
from kdr.llm_gateway import mock_gateway
from kdr.websearch import FixtureSearchBackend


def science_graph():
    g = onto.empty_graph()
    g = onto.add_concept(g, onto.Concept(
        "Person", "NER", "entity", "Entity", "A human being.",
        attributes=[onto.AttributeSpec("awards", "List[text]"),
                    onto.AttributeSpec("birth_year", "number")]))
    g = onto.add_concept(g, onto.Concept(
        "Scientist", "NER", "entity", "Person", "A person doing research.",
        attributes=[onto.AttributeSpec("field", "text")]))
    g = onto.add_concept(g, onto.Concept(
        "Work", "NER", "entity", "Entity", "A published piece.",
        attributes=[onto.AttributeSpec("author", "Person")]))
    return g


def science_store(graph):
    store = ks.KnowledgeStore(graph)
    store.ingest(ks.make_object(
        graph, "NER.Scientist", "Ada Lovelace",
        {"awards": ["Analyst Medal"], "birth_year": 1815, "field": "mathematics"},
        [("doc1", 1.0)]))
    store.ingest(ks.make_object(
        graph, "NER.Scientist", "Charles Babbage",
        {"birth_year": 1791, "field": "mathematics"}, [("doc1", 2.0)]))
    store.ingest(ks.make_object(
        graph, "NER.Work", "Notes on the Analytical Engine",
        {"author": "Ada Lovelace"}, [("doc2", 3.0)]))
    store.settle()
    return store


# -- decomposition ------------------------------------------------------------


def test_parse_decomposition_sections_and_requests():
    plan = (
        "# Early life\n"
        "<begin_web_search>Where was Ada Lovelace born?<end_web_search>\n"
        "\n"
        "# Mathematical work\n"
        "<begin_data_analysis>Average birth year of the scientists<end_data_analysis>\n"
        "<begin_web_search>What did the notes describe?<end_web_search>\n"
    )
    plans = rs.parse_decomposition(plan)
    assert [p.section_title for p in plans] == ["Early life", "Mathematical work"]
    assert [r.kind for r in plans[1].requests] == ["data_analysis", "web_search"]
    assert plans[0].requests[0].query == "Where was Ada Lovelace born?"


def test_parse_decomposition_headerless_prefix_becomes_overview():
    plans = rs.parse_decomposition(
        "<begin_web_search>q1<end_web_search>\n# Later\n"
        "<begin_data_analysis>q2<end_data_analysis>")
    assert plans[0].section_title == "Overview"
    assert plans[0].requests[0].query == "q1"
    assert plans[1].requests[0].query == "q2"


def test_parse_decomposition_no_headings_at_all():
    plans = rs.parse_decomposition("<begin_web_search>q<end_web_search>")
    assert len(plans) == 1 and plans[0].section_title == "Overview"


def test_unbalanced_tags_report_offsets():
    text = "# S\n<begin_web_search>q"
    with pytest.raises(UnbalancedTags) as err:
        rs.parse_decomposition(text)
    assert err.value.position == text.index("<begin_web_search>")

    text = "# S\nq<end_web_search>"
    with pytest.raises(UnbalancedTags) as err:
        rs.parse_decomposition(text)
    assert err.value.position == text.index("<end_web_search>")

    with pytest.raises(UnbalancedTags):
        rs.parse_decomposition(
            "<begin_web_search><begin_data_analysis>q<end_data_analysis><end_web_search>")
    with pytest.raises(UnbalancedTags):
        rs.parse_decomposition("<begin_web_search>q<end_data_analysis>")


def test_empty_query_between_tags():
    text = "# S\n<begin_data_analysis>   <end_data_analysis>"
    with pytest.raises(EmptyQuery) as err:
        rs.parse_decomposition(text)
    assert err.value.position == text.index("<begin_data_analysis>")


def test_render_parse_round_trip_identity():
    plans = [
        rs.CyclePlan("Alpha", [rs.CycleRequest("web_search", "first question")]),
        rs.CyclePlan("Beta", [rs.CycleRequest("data_analysis", "count things"),
                              rs.CycleRequest("web_search", "second question")]),
        rs.CyclePlan("Gamma", []),
    ]
    assert rs.parse_decomposition(rs.render_decomposition(plans)) == plans


@settings(max_examples=50, deadline=None)
@given(st.lists(
    st.tuples(
        st.text(alphabet="abcdefgh ", min_size=1, max_size=12).map(
            lambda s: s.strip() or "x"),
        st.lists(st.tuples(
            st.sampled_from(["data_analysis", "web_search"]),
            st.text(alphabet="abcdefgh?", min_size=1, max_size=20).map(
                lambda s: s.strip() or "q"),
        ), max_size=3),
    ),
    min_size=1, max_size=4,
))
def test_round_trip_property(raw):
    plans = [rs.CyclePlan(title, [rs.CycleRequest(k, q) for k, q in reqs])
             for title, reqs in raw]
    assert rs.parse_decomposition(rs.render_decomposition(plans)) == plans


# -- ontology search and closure ------------------------------------------------


def test_ontology_search_ranks_matching_concepts():
    graph = science_graph()
    hits = rs.ontology_search("scientist research field", graph)
    assert hits[0][0].qualified == "NER.Scientist"
    assert "class Scientist(Person):" in hits[0][1]


def test_ontology_search_no_tokens():
    with pytest.raises(NoConceptFound):
        rs.ontology_search("?!", science_graph())


def test_ontology_search_no_match():
    with pytest.raises(NoConceptFound):
        rs.ontology_search("zeppelin", science_graph())


def test_class_closure_pulls_ancestors_and_ref_targets():
    graph = science_graph()
    closure = rs.class_closure(graph, ["NER.Work"])
    assert closure == ["NER.Person", "NER.Work"]
    closure = rs.class_closure(graph, ["NER.Scientist"])
    assert closure == ["NER.Person", "NER.Scientist"]


# -- script assembly and execution ------------------------------------------------


def assembled_script(graph, store, analysis):
    objects = store.subgraph(
        [o.id for o in store.query_by_name("Ada Lovelace")], hops=2)
    closure = rs.class_closure(graph, [o.concept for o in objects])
    codes = [onto.render_class_code(graph, q) for q in closure]
    return rs.assemble_script(codes, objects, analysis, graph)


def test_assemble_rejects_code_without_result_variable():
    graph = science_graph()
    with pytest.raises(RejectedCode):
        rs.assemble_script([], [], "print(1)", graph)


def test_assembled_script_executes_with_instances(tmp_path):
    graph = science_graph()
    store = science_store(graph)
    analysis = (
        "names = sorted(type(o).__name__ for o in search_results)\n"
        "print(len(search_results), names)\n"
        "ada = [o for o in search_results if getattr(o, 'name', '') == 'Ada Lovelace'][0]\n"
        "print(ada.field, int(ada.birth_year), ada.awards[0])"
    )
    script = assembled_script(graph, store, analysis)
    result = rs.execute_script(script, str(tmp_path / "w"))
    assert result.exit_status == "ok", result.stderr
    assert "2 ['Scientist', 'Work']" in result.stdout
    assert "mathematics 1815 Analyst Medal" in result.stdout


def test_assembled_script_reference_slots_resolve_to_objects(tmp_path):
    graph = science_graph()
    store = science_store(graph)
    analysis = (
        "work = [o for o in search_results if type(o).__name__ == 'Work'][0]\n"
        "print(work.author.name)"
    )
    script = assembled_script(graph, store, analysis)
    result = rs.execute_script(script, str(tmp_path / "w"))
    assert result.exit_status == "ok", result.stderr
    assert "Ada Lovelace" in result.stdout


def test_execute_script_timeout(tmp_path):
    result = rs.execute_script(
        "search_results = []\nwhile True:\n    pass\n",
        str(tmp_path / "w"), wall_seconds=1.0)
    assert result.exit_status == "timeout"
    assert "wall-clock limit" in result.stderr


def test_execute_script_blocks_network(tmp_path):
    script = (
        "import socket\n"
        "socket.create_connection(('127.0.0.1', 9))\n"
    )
    result = rs.execute_script(script, str(tmp_path / "w"))
    assert result.exit_status == "error"
    assert "network access is disabled" in result.stderr


def test_execute_script_truncates_output(tmp_path):
    result = rs.execute_script(
        "print('x' * 100000)", str(tmp_path / "w"), output_bytes=1000)
    assert result.exit_status == "ok"
    assert len(result.stdout) < 2000
    assert result.stdout.endswith("[output truncated]")


def test_execute_script_catalogs_produced_files(tmp_path):
    script = (
        "open('table.csv', 'w').write('a,b\\n')\n"
        "open('plot.png', 'wb').write(b'\\x89PNG')\n"
        "open('notes.txt', 'w').write('hi')\n"
    )
    result = rs.execute_script(script, str(tmp_path / "w"))
    assert result.produced_files == [
        ("notes.txt", "data"), ("plot.png", "chart"), ("table.csv", "table")]


def test_execute_script_error_status(tmp_path):
    result = rs.execute_script("raise ValueError('boom')", str(tmp_path / "w"))
    assert result.exit_status == "error"
    assert "boom" in result.stderr


# -- cycle steps -------------------------------------------------------------------


def test_generate_analysis_code_strips_fence_and_checks_contract():
    gw = mock_gateway({"rules": [
        {"match": "Write a Python script",
         "responses": ["```python\nprint(len(search_results))\n```"]},
    ]})
    code = rs.generate_analysis_code("count", ["class X: ..."], None, gw)
    assert code == "print(len(search_results))"


def test_generate_analysis_code_rejects_missing_variable():
    gw = mock_gateway(default_response="print(42)")
    with pytest.raises(RejectedCode):
        rs.generate_analysis_code("count", ["class X: ..."], None, gw)


def test_generate_analysis_code_requires_class_definitions():
    with pytest.raises(NoConceptFound):
        rs.generate_analysis_code("count", [], None, mock_gateway())


def test_generate_analysis_code_threads_feedback_into_prompt():
    gw = mock_gateway(default_response="search_results")
    rs.generate_analysis_code("count", ["class X: ..."], "divide by zero", gw)
    prompt = gw.chat_backend.calls[0]
    assert "Feedback from the previous attempt:\ndivide by zero" in prompt


def test_instance_query_finds_neighborhood():
    graph = science_graph()
    store = science_store(graph)
    gw = mock_gateway({"rules": [
        {"match": "List the topic entities", "responses": ["- Ada Lovelace\n"]},
    ]})
    objects = rs.instance_query("q", store, graph, gw)
    names = {o.display_name for o in objects}
    assert "Ada Lovelace" in names
    assert "Notes on the Analytical Engine" in names  # in-reference, 1 hop


def test_instance_query_no_topic_entity():
    gw = mock_gateway(default_response="\n\n")
    with pytest.raises(NoTopicEntity):
        rs.instance_query("q", science_store(science_graph()), science_graph(), gw)


def test_instance_query_no_matching_instances():
    graph = science_graph()
    gw = mock_gateway({"rules": [
        {"match": "List the topic entities", "responses": ["Zeppelin"]},
    ]})
    with pytest.raises(NoInstancesFound):
        rs.instance_query("q", ks.KnowledgeStore(graph), graph, gw)


def test_evaluate_result_short_circuits_broken_execution():
    broken = rs.ExecutionResult("error", "", "Traceback: boom")
    verdict, feedback = rs.evaluate_result("q", broken, gateway=None)
    assert verdict == "fail" and "boom" in feedback


def test_evaluate_result_parses_leading_token():
    ok = rs.ExecutionResult("ok", "42", "")
    gw = mock_gateway(default_response="PASS: the count is printed")
    assert rs.evaluate_result("q", ok, gw) == ("pass", "the count is printed")
    gw = mock_gateway(default_response="FAIL missing the chart")
    assert rs.evaluate_result("q", ok, gw) == ("fail", "missing the chart")
    gw = mock_gateway(default_response="maybe?")
    verdict, feedback = rs.evaluate_result("q", ok, gw)
    assert verdict == "fail" and "maybe?" in feedback


# -- full computation cycle -----------------------------------------------------------


def scripted_cycle_gateway():
    return mock_gateway({"rules": [
        {"match": "Write a Python script", "responses": [
            "```python\nprint('count:', len(search_results))\n```",
            "```python\nyears = [o.birth_year for o in search_results"
            " if getattr(o, 'birth_year', None)]\n"
            "print('mean birth year:', sum(years) / len(years))\n```",
        ]},
        {"match": "List the topic entities",
         "responses": ["Ada Lovelace\nCharles Babbage"]},
        {"match": "Decide whether the analysis results satisfy", "responses": [
            "FAIL a bare count does not answer the mean birth year",
            "PASS the mean is printed",
        ]},
    ]})


def test_computation_cycle_retries_then_passes(tmp_path):
    graph = science_graph()
    store = science_store(graph)
    trace_path = tmp_path / "trace.json"
    trace = rs.run_computation_cycle(
        "mean birth year of the scientists", graph, store,
        scripted_cycle_gateway(), workdir=str(tmp_path / "run"),
        trace_path=str(trace_path))
    assert trace.final_status == "passed"
    assert len(trace.iterations) == 2
    assert trace.iterations[0].verdict == "fail"
    assert trace.iterations[1].verdict == "pass"
    assert "mean birth year: 1803.0" in trace.iterations[1].execution.stdout
    saved = json.loads(trace_path.read_text())
    assert saved["final_status"] == "passed"
    assert len(saved["iterations"]) == 2


def test_computation_cycle_feedback_flows_to_codegen(tmp_path):
    graph = science_graph()
    store = science_store(graph)
    gw = scripted_cycle_gateway()
    rs.run_computation_cycle(
        "mean birth year of the scientists", graph, store, gw,
        workdir=str(tmp_path / "run"))
    codegen_prompts = [c for c in gw.chat_backend.calls if "Write a Python script" in c]
    assert len(codegen_prompts) == 2
    assert "bare count" in codegen_prompts[1]
    assert "bare count" not in codegen_prompts[0]


def test_computation_cycle_exhausts_budget(tmp_path):
    graph = science_graph()
    store = science_store(graph)
    gw = mock_gateway({"rules": [
        {"match": "Write a Python script",
         "responses": ["```python\nprint(len(search_results))\n```"]},
        {"match": "List the topic entities", "responses": ["Ada Lovelace"]},
        {"match": "Decide whether the analysis results satisfy",
         "responses": ["FAIL not enough"]},
    ]})
    trace = rs.run_computation_cycle(
        "mean birth year of the scientists", graph, store, gw,
        cfg=rs.CycleConfig(max_iterations=2), workdir=str(tmp_path / "run"))
    assert trace.final_status == "exhausted"
    assert len(trace.iterations) == 2


def test_computation_cycle_fails_without_concepts(tmp_path):
    graph = science_graph()
    trace = rs.run_computation_cycle(
        "zeppelin", graph, ks.KnowledgeStore(graph), mock_gateway(),
        workdir=str(tmp_path / "run"))
    assert trace.final_status == "failed"
    assert "zeppelin" in trace.reason


def test_computation_cycle_fails_without_instances(tmp_path):
    graph = science_graph()
    gw = mock_gateway({"rules": [
        {"match": "Write a Python script",
         "responses": ["```python\nprint(len(search_results))\n```"]},
        {"match": "List the topic entities", "responses": ["Zeppelin"]},
    ]})
    trace = rs.run_computation_cycle(
        "birth year of scientists", graph, ks.KnowledgeStore(graph), gw,
        workdir=str(tmp_path / "run"))
    assert trace.final_status == "failed"
    assert "Zeppelin" in trace.reason


def test_computation_cycle_rejected_code_consumes_iteration(tmp_path):
    graph = science_graph()
    store = science_store(graph)
    gw = mock_gateway({"rules": [
        {"match": "Write a Python script", "responses": [
            "print(42)",
            "```python\nprint('n =', len(search_results))\n```",
        ]},
        {"match": "List the topic entities", "responses": ["Ada Lovelace"]},
        {"match": "Decide whether the analysis results satisfy",
         "responses": ["PASS fine"]},
    ]})
    trace = rs.run_computation_cycle(
        "count of scientist records", graph, store, gw,
        workdir=str(tmp_path / "run"))
    assert trace.final_status == "passed"
    assert len(trace.iterations) == 2
    assert trace.iterations[0].execution is None
    assert trace.iterations[0].verdict == "fail"


def test_computation_cycle_objects_override_skips_topic_query(tmp_path):
    graph = science_graph()
    store = science_store(graph)
    pinned = store.query_by_name("Charles Babbage")
    gw = mock_gateway({"rules": [
        {"match": "Write a Python script",
         "responses": ["```python\nprint(search_results[0].name)\n```"]},
        {"match": "Decide whether the analysis results satisfy",
         "responses": ["PASS named"]},
    ]})
    trace = rs.run_computation_cycle(
        "who is the scientist", graph, store, gw,
        workdir=str(tmp_path / "run"), objects_override=pinned)
    assert trace.final_status == "passed"
    assert "Charles Babbage" in trace.iterations[0].execution.stdout
    assert all("List the topic entities" not in c for c in gw.chat_backend.calls)


def test_computation_cycle_collects_artifacts(tmp_path):
    graph = science_graph()
    store = science_store(graph)
    gw = mock_gateway({"rules": [
        {"match": "Write a Python script", "responses": [
            "```python\nopen('years.csv', 'w').write('year\\n')\n"
            "print('rows:', len(search_results))\n```",
        ]},
        {"match": "List the topic entities", "responses": ["Ada Lovelace"]},
        {"match": "Decide whether the analysis results satisfy",
         "responses": ["PASS table written"]},
    ]})
    trace = rs.run_computation_cycle(
        "tabulate scientist birth years", graph, store, gw,
        workdir=str(tmp_path / "run"))
    assert trace.final_status == "passed"
    assert len(trace.artifacts) == 1
    assert trace.artifacts[0].endswith("years.csv")
    assert trace.iterations[0].execution.produced_files == [("years.csv", "table")]


# -- text cycle ------------------------------------------------------------------------


def corpus(tmp_path):
    docs = [
        ("ada.json", "Ada Lovelace", "https://w/ada",
         "Ada Lovelace wrote the first published program in her notes."),
        ("engine.json", "Analytical engine", "https://w/engine",
         "The analytical engine was a proposed mechanical computer."),
    ]
    for name, title, url, body in docs:
        (tmp_path / name).write_text(
            json.dumps({"title": title, "url": url, "body": body}))
    return FixtureSearchBackend(str(tmp_path))


def test_text_cycle_single_sufficient_round(tmp_path):
    backend = corpus(tmp_path)
    gw = mock_gateway({"rules": [
        {"match": "Summarize the following source", "responses": ["a summary"]},
        {"match": "Write the answer to the research question",
         "responses": ["Ada wrote the first program [1]."]},
        {"match": "Decide whether the draft sufficiently answers",
         "responses": ["PASS complete"]},
    ]})
    result = rs.run_text_cycle("Who wrote the first program?", backend, gw)
    assert result.sufficient and result.rounds == 1
    assert result.text == "Ada wrote the first program [1]."
    assert ("Ada Lovelace", "https://w/ada") in result.sources


class RecordingBackend:
    def __init__(self, inner):
        self.inner = inner
        self.queries: list[str] = []

    def search(self, query, limit=5):
        self.queries.append(query)
        return self.inner.search(query, limit=limit)


def test_text_cycle_insufficient_draft_retries_with_feedback(tmp_path):
    backend = RecordingBackend(corpus(tmp_path))
    gw = mock_gateway({"rules": [
        {"match": "Summarize the following source", "responses": ["s"]},
        {"match": "Write the answer to the research question",
         "responses": ["draft one", "draft two"]},
        {"match": "Decide whether the draft sufficiently answers",
         "responses": ["FAIL missing the engine details", "PASS good"]},
    ]})
    result = rs.run_text_cycle("first program", backend, gw, max_rounds=3)
    assert result.sufficient and result.rounds == 2
    assert result.text == "draft two"
    # the second search folded in the missing-information feedback
    assert backend.queries[0] == "first program"
    assert "engine details" in backend.queries[1]


def test_text_cycle_round_budget(tmp_path):
    backend = corpus(tmp_path)
    gw = mock_gateway({"rules": [
        {"match": "Summarize the following source", "responses": ["s"]},
        {"match": "Write the answer to the research question", "responses": ["d"]},
        {"match": "Decide whether the draft sufficiently answers",
         "responses": ["FAIL never enough"]},
    ]})
    result = rs.run_text_cycle("first program", backend, gw, max_rounds=2)
    assert not result.sufficient and result.rounds == 2
    assert "budget" in result.note


def test_text_cycle_empty_corpus_returns_note(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    backend = FixtureSearchBackend(str(empty))
    result = rs.run_text_cycle("q", backend, mock_gateway())
    assert result.text == "" and not result.sufficient
    assert "no documents" in result.note


def test_text_cycle_deduplicates_sources_across_rounds(tmp_path):
    backend = corpus(tmp_path)
    gw = mock_gateway({"rules": [
        {"match": "Summarize the following source", "responses": ["s"]},
        {"match": "Write the answer to the research question", "responses": ["d"]},
        {"match": "Decide whether the draft sufficiently answers",
         "responses": ["FAIL more", "PASS ok"]},
    ]})
    result = rs.run_text_cycle("Ada Lovelace program engine", backend, gw)
    urls = [u for _, u in result.sources]
    assert len(urls) == len(set(urls))


# -- merge and revise -------------------------------------------------------------------


def test_merge_passthrough_without_computed_findings():
    assert rs.merge_and_revise("S", [], "just the draft", mock_gateway()) == "just the draft"


def test_merge_requires_some_input():
    with pytest.raises(ValueError):
        rs.merge_and_revise("S", [], "", mock_gateway())


def test_merge_sends_computed_and_drafted_to_model():
    gw = mock_gateway({"rules": [
        {"match": "Merge the computed findings", "responses": ["merged body"]},
    ]})
    out = rs.merge_and_revise("S", ["mean: 1803.0"], "prose", gw)
    assert out == "merged body"
    assert "mean: 1803.0" in gw.chat_backend.calls[0]
    assert "prose" in gw.chat_backend.calls[0]


def test_revise_report_polishes_each_section():
    gw = mock_gateway({"rules": [
        {"match": "Polish the section", "responses": ["polished A", "polished B"]},
    ]})
    out = rs.revise_report(["raw A", "raw B"], gw)
    assert out == ["polished A", "polished B"]
    assert "raw A" in gw.chat_backend.calls[0] and "raw B" in gw.chat_backend.calls[0]
