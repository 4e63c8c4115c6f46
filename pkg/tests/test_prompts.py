import json

import pytest

from ctikg.model import RawTriplet, builtin_ontology, Ontology, EntityType
from ctikg.prompts import (
    PLACEHOLDER,
    build_extraction_prompt,
    build_judge_prompt,
    build_relation_prompt,
    build_typing_prompt,
    estimate_tokens,
    load_template,
    relation_question,
)
from ctikg.retriever import builtin_demonstrations

MALONT = builtin_ontology("malont")


def test_templates_have_required_sections():
    for task in ("extraction", "typing", "relation", "judge"):
        sections = load_template(task)
        assert {"instruction", "query"} <= set(sections)


def test_extraction_structure():
    demos = builtin_demonstrations("extraction")[:2]
    parts = build_extraction_prompt(MALONT, demos, "Akira encrypts files.")
    text = parts.render()
    assert len(parts.demonstrations) == 2
    assert text.index("Example 1:") < text.index("Example 2:") < text.rindex("Akira encrypts files.")
    assert text.count("JSON array") >= 2  # format constraint stated up front and again before the query
    assert json.dumps(MALONT.prompt_types(), indent=2) in text
    assert "open-ended" in text
    assert text.endswith("Triplets:\n")


def test_extraction_closed_relations():
    o = Ontology("x", (EntityType("A"),), relation_types=("uses", "targets"))
    text = build_extraction_prompt(o, [], "r").render()
    assert '["uses", "targets"]' in text


def test_extraction_accepts_scored_pairs():
    d = builtin_demonstrations("extraction")[0]
    assert build_extraction_prompt(MALONT, [(d, 0.9)], "q").render() == build_extraction_prompt(MALONT, [d], "q").render()


def test_dollar_signs_in_report_survive():
    text = build_extraction_prompt(MALONT, [], "ransom of $5,000 ${x}").render()
    assert "ransom of $5,000 ${x}" in text


def test_typing_query_is_placeholder_array():
    triplets = [RawTriplet.of("Akira", "encrypts", "files"), RawTriplet.of("APT28", "uses", "Zebrocy")]
    parts = build_typing_prompt(MALONT, builtin_demonstrations("typing"), triplets)
    assert len(parts.demonstrations) == 8
    items = json.loads(parts.render().rsplit("Query:\n", 1)[1])
    assert [i["triplet"]["subject"] for i in items] == ["Akira", "APT28"]
    assert all(i["tagged_triplet"] == PLACEHOLDER for i in items)
    with pytest.raises(ValueError):
        build_typing_prompt(MALONT, [], [])


def test_relation_prompt_question():
    demos = builtin_demonstrations("relation")[:2]
    parts = build_relation_prompt("report body", demos, "the ransomware Trojan", "Akira")
    block = json.loads(parts.render().rsplit("Query:\n", 1)[1])
    assert block == {
        "context": "report body",
        "question": relation_question("the ransomware Trojan", "Akira"),
        "predicted_triple": PLACEHOLDER,
    }
    assert block["question"] == 'What is the relationship between "the ransomware Trojan" and "Akira"?'
    with pytest.raises(ValueError):
        build_relation_prompt("r", [], "Akira", "Akira")


def test_judge_prompt_mentions_both():
    text = build_judge_prompt(("a", "r", "b"), ("b", "r", "a")).render()
    assert '"subject": "a"' in text and '"subject": "b"' in text


def test_token_estimate():
    assert estimate_tokens("abcdefgh") == 2
    assert estimate_tokens("abcdefgh", "unknown-model") == 2
    parts = build_extraction_prompt(MALONT, [], "x")
    assert parts.estimate_tokens() == estimate_tokens(parts.render())
