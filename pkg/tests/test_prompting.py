from __future__ import annotations

import re

import pytest

from clinex.prompting import (
    CategoryDefinition,
    DefinitionSet,
    EmptyExamples,
    MissingDefinition,
    PromptError,
    PromptSpec,
    build_advanced_prompt,
    build_minimal_prompt,
    build_naive_prompt,
    load_definitions,
    minimal_template_hash,
    render_minimal_user_text,
)
from clinex.schema import (
    CATEGORY_NAMES,
    CATEGORY_ORDER,
    Category,
    ClinicalReport,
    StructuredReport,
    parse_model_output,
    serialize_report,
)

REPORT = ClinicalReport(id="r1", text="A 45-year-old man presented with chest discomfort.")


def example_pairs(n: int):
    return [
        (
            ClinicalReport(id=f"e{i}", text=f"Example patient number {i} presented with a cough."),
            StructuredReport.build({"age": str(30 + i), "signs_symptoms": "cough"}),
        )
        for i in range(n)
    ]


class TestDefinitions:
    def test_bundled_set_loads_and_covers_all_categories(self):
        definitions = load_definitions("en-v1")
        assert definitions.version == "en-v1"
        assert len(definitions.definitions) == 15
        for category in CATEGORY_ORDER:
            assert definitions.get(category).definition

    def test_content_hash_stable_and_sensitive(self):
        definitions = load_definitions("en-v1")
        assert definitions.content_hash == load_definitions("en-v1").content_hash
        modified = DefinitionSet(
            version=definitions.version,
            definitions=tuple(
                CategoryDefinition(d.category, d.definition + " x", d.scope_notes)
                for d in definitions.definitions
            ),
        )
        assert modified.content_hash != definitions.content_hash

    def test_incomplete_set_rejected(self):
        with pytest.raises(MissingDefinition):
            DefinitionSet(
                version="x",
                definitions=(CategoryDefinition(Category.AGE, "the age"),),
            )

    def test_empty_definition_rejected(self):
        with pytest.raises(PromptError):
            CategoryDefinition(Category.AGE, "   ")


class TestNaivePrompt:
    def test_contains_all_15_category_names_exactly_once(self):
        prompt = build_naive_prompt(REPORT)
        for name in CATEGORY_NAMES:
            occurrences = len(re.findall(rf"(?<![a-z_]){name}(?![a-z_])", prompt.user_text))
            assert occurrences == 1, name

    def test_report_text_verbatim(self):
        prompt = build_naive_prompt(REPORT)
        assert REPORT.text in prompt.user_text

    def test_no_definitions_or_examples(self):
        prompt = build_naive_prompt(REPORT)
        assert prompt.example_count == 0
        assert "definition" not in prompt.user_text.lower()
        assert "Example" not in prompt.user_text

    def test_deterministic(self):
        assert build_naive_prompt(REPORT) == build_naive_prompt(REPORT)


class TestAdvancedPrompt:
    def setup_method(self):
        self.definitions = load_definitions("en-v1")

    def test_examples_render_in_rank_order(self):
        pairs = example_pairs(3)
        prompt = build_advanced_prompt(REPORT, pairs, self.definitions)
        assert prompt.example_count == 3
        positions = [prompt.user_text.index(pair[0].text) for pair in pairs]
        assert positions == sorted(positions)
        assert prompt.user_text.index("Example 1:") < prompt.user_text.index("Example 2:")

    def test_all_definitions_appear_exactly_once(self):
        prompt = build_advanced_prompt(REPORT, example_pairs(1), self.definitions)
        for category in CATEGORY_ORDER:
            definition = self.definitions.get(category).definition
            assert prompt.user_text.count(definition) == 1

    def test_gold_rendered_via_canonical_serialization(self):
        pairs = example_pairs(2)
        prompt = build_advanced_prompt(REPORT, pairs, self.definitions)
        for _, gold in pairs:
            assert serialize_report(gold) in prompt.user_text

    def test_query_report_comes_after_examples(self):
        pairs = example_pairs(2)
        prompt = build_advanced_prompt(REPORT, pairs, self.definitions)
        assert prompt.user_text.index(pairs[-1][0].text) < prompt.user_text.index(REPORT.text)

    def test_byte_deterministic(self):
        pairs = example_pairs(2)
        a = build_advanced_prompt(REPORT, pairs, self.definitions)
        b = build_advanced_prompt(REPORT, pairs, self.definitions)
        assert a.user_text.encode() == b.user_text.encode()

    def test_empty_examples_rejected(self):
        with pytest.raises(EmptyExamples):
            build_advanced_prompt(REPORT, [], self.definitions)


class TestMinimalPrompt:
    def test_no_examples_or_definitions(self):
        prompt = build_minimal_prompt(REPORT)
        assert prompt.example_count == 0
        assert "definition" not in prompt.user_text.lower()

    def test_matches_shared_template(self):
        prompt = build_minimal_prompt(REPORT)
        assert prompt.user_text == render_minimal_user_text(REPORT.text)

    def test_deterministic(self):
        assert build_minimal_prompt(REPORT) == build_minimal_prompt(REPORT)

    def test_length_independent_of_corpus(self):
        assert len(build_minimal_prompt(REPORT).user_text) == len(
            build_minimal_prompt(ClinicalReport(id="r2", text=REPORT.text)).user_text
        )

    def test_template_hash_stable(self):
        assert minimal_template_hash() == minimal_template_hash()


class TestPromptSpecInvariants:
    def test_naive_with_examples_rejected(self):
        with pytest.raises(PromptError):
            PromptSpec(mode="naive", system_text="s", user_text="u", example_count=1)

    def test_advanced_without_examples_rejected(self):
        with pytest.raises(PromptError):
            PromptSpec(mode="advanced", system_text="s", user_text="u", example_count=0)

    def test_content_hash_differs_on_user_text(self):
        a = PromptSpec("naive", "s", "u1")
        b = PromptSpec("naive", "s", "u2")
        assert a.content_hash != b.content_hash


class TestOutputGrammarRoundTrip:
    """A compliant model that echoes an example's serialized gold must
    produce text the schema parser maps back to that gold exactly."""

    def test_prompted_serialization_parses_back(self):
        gold = StructuredReport.build(
            {"age": "45", "diagnosis": "myocardial infarction", "pharmacological_therapy": "aspirin; heparin"}
        )
        completion = serialize_report(gold)  # scripted compliant model
        assert parse_model_output(completion, mode="strict") == gold

    def test_each_mode_mentions_json_and_semicolons(self):
        definitions = load_definitions("en-v1")
        prompts = [
            build_naive_prompt(REPORT),
            build_advanced_prompt(REPORT, example_pairs(1), definitions),
            build_minimal_prompt(REPORT),
        ]
        for prompt in prompts:
            assert "JSON" in prompt.user_text
            assert "semicolon" in prompt.user_text
