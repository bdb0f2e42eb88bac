"""Regenerates kbqa_10.jsonl and kbqa_mock.json: 8 correct scripts, 2 wrong."""

from __future__ import annotations

import json
from pathlib import Path

CODE = """\
```python
print('ANSWERS:')
for o in search_results:
    for fact in (o.facts or []):
        key, _, value = fact.partition(': ')
        if key == '{predicate}':
            print(value)
```"""

WRONG_LITERAL = """\
```python
print('ANSWERS:')
if search_results:
    print('K2')
```"""

# (id, question, topic entity, triples, answers, predicate the script reads)
QUESTIONS = [
    ("q1", "Who directed Inception?", "Inception",
     [["Inception", "director", "Christopher Nolan"],
      ["Inception", "year", "2010"]],
     ["Christopher Nolan"], "director"),
    ("q2", "When was Inception released?", "Inception",
     [["Inception", "director", "Christopher Nolan"],
      ["Inception", "year", "2010"]],
     ["2010"], "year"),
    ("q3", "Who wrote Hamlet?", "Hamlet",
     [["Hamlet", "author", "William Shakespeare"]],
     ["William Shakespeare"], "author"),
    ("q4", "What is the capital of France?", "France",
     [["France", "capital", "Paris"], ["France", "continent", "Europe"]],
     ["Paris"], "capital"),
    ("q5", "Who founded Apple?", "Apple",
     [["Apple", "founder", "Steve Jobs"], ["Apple", "founder", "Steve Wozniak"]],
     ["Steve Jobs", "Steve Wozniak"], "founder"),
    ("q6", "What language is spoken in Brazil?", "Brazil",
     [["Brazil", "language", "Portuguese"]],
     ["Portuguese"], "language"),
    ("q7", "Who painted the Mona Lisa?", "Mona Lisa",
     [["Mona Lisa", "painter", "Leonardo da Vinci"]],
     ["Leonardo da Vinci"], "painter"),
    ("q8", "What is the boiling point of water?", "Water",
     [["Water", "boiling point", "100 C"]],
     ["100 C"], "boiling point"),
    # the last two scripts are wrong on purpose: one reads an absent
    # predicate, one prints an unrelated literal
    ("q9", "Who discovered penicillin?", "Penicillin",
     [["Penicillin", "discoverer", "Alexander Fleming"]],
     ["Alexander Fleming"], "year"),
    ("q10", "What is the tallest mountain?", "Earth",
     [["Earth", "tallest mountain", "Mount Everest"]],
     ["Mount Everest"], None),
]

if __name__ == "__main__":
    here = Path(__file__).parent
    rows = []
    rules = [{"match": "Decide whether the analysis results satisfy",
              "responses": ["PASS answer lines printed"]}]
    for qid, question, topic, triples, answers, predicate in QUESTIONS:
        rows.append(json.dumps({"id": qid, "question": question,
                                "topic_entity": topic, "triples": triples,
                                "answers": answers}, ensure_ascii=False))
        code = WRONG_LITERAL if predicate is None else CODE.format(predicate=predicate)
        rules.append({"match": question, "responses": [code]})
    (here / "kbqa_10.jsonl").write_text("\n".join(rows) + "\n", encoding="utf-8")
    (here / "kbqa_mock.json").write_text(
        json.dumps({"rules": rules, "default_response": ""}, indent=2,
                   ensure_ascii=False) + "\n", encoding="utf-8")
    print("wrote kbqa_10.jsonl and kbqa_mock.json")
