from __future__ import annotations

from hypothesis import given, settings

from clinex.error_analysis import (
    MISSING,
    SPURIOUS,
    WRONGLY_CATEGORIZED,
    align_concepts,
    annotate_near_misses,
    classify_errors,
    errors_for_result,
    flag_icl_copies,
    normalize_concept,
    render_error_digest,
    sample_errors,
)
from clinex.inference import ExtractionResult
from clinex.schema import Category, StructuredReport, serialize_report

from conftest import report_strategy


def result_for(sample_id: str, parsed: StructuredReport | None, raw: str | None = None) -> ExtractionResult:
    return ExtractionResult(
        sample_id=sample_id,
        mode="naive",
        raw_completion=raw if raw is not None else (serialize_report(parsed) if parsed else "junk"),
        parsed=parsed,
        failure_kind=None if parsed is not None else "parse:no_object_found",
        failure_message=None if parsed is not None else "no JSON object in completion",
        attempts=1,
        prompt_hash="h",
    )


class TestAlignConcepts:
    def test_same_category_match(self):
        gold = StructuredReport.build({"diagnosis": "pneumonia"})
        pred = StructuredReport.build({"diagnosis": "pneumonia"})
        alignment = align_concepts(pred, gold)
        assert alignment.same_category_matches == ((Category.DIAGNOSIS, "pneumonia", "pneumonia"),)
        assert not alignment.cross_category_matches
        assert not alignment.unmatched_gold
        assert not alignment.unmatched_pred

    def test_cross_category_match(self):
        gold = StructuredReport.build({"diagnosis": "pneumonia"})
        pred = StructuredReport.build({"comorbidities": "pneumonia"})
        alignment = align_concepts(pred, gold)
        assert alignment.cross_category_matches == (
            (Category.DIAGNOSIS, Category.COMORBIDITIES, "pneumonia", "pneumonia"),
        )

    def test_normalization(self):
        gold = StructuredReport.build({"comorbidities": "Type 2  Diabetes"})
        pred = StructuredReport.build({"comorbidities": "type 2 diabetes"})
        alignment = align_concepts(pred, gold)
        assert len(alignment.same_category_matches) == 1

    def test_same_category_takes_priority_over_cross(self):
        gold = StructuredReport.build({"diagnosis": "sepsis"})
        pred = StructuredReport.build({"diagnosis": "sepsis", "comorbidities": "sepsis"})
        alignment = align_concepts(pred, gold)
        assert len(alignment.same_category_matches) == 1
        assert not alignment.cross_category_matches
        assert alignment.unmatched_pred == ((Category.COMORBIDITIES, "sepsis"),)

    def test_each_concept_consumed_once(self):
        gold = StructuredReport.build({"diagnosis": ["sepsis", "sepsis"]})
        pred = StructuredReport.build({"diagnosis": "sepsis"})
        alignment = align_concepts(pred, gold)
        assert len(alignment.same_category_matches) == 1
        assert alignment.unmatched_gold == ((Category.DIAGNOSIS, "sepsis"),)

    @given(report_strategy, report_strategy)
    @settings(max_examples=100, deadline=None)
    def test_conservation(self, pred, gold):
        alignment = align_concepts(pred, gold)
        total_gold = sum(len(concepts) for _cat, concepts in gold)
        total_pred = sum(len(concepts) for _cat, concepts in pred)
        assert (
            len(alignment.unmatched_gold)
            + len(alignment.same_category_matches)
            + len(alignment.cross_category_matches)
            == total_gold
        )
        assert (
            len(alignment.unmatched_pred)
            + len(alignment.same_category_matches)
            + len(alignment.cross_category_matches)
            == total_pred
        )


class TestClassifyErrors:
    def test_missing(self):
        gold = StructuredReport.build({"diagnosis": "pneumonia"})
        pred = StructuredReport.build({})
        records = classify_errors(align_concepts(pred, gold), "s1")
        assert len(records) == 1
        assert records[0].kind == MISSING
        assert records[0].category is Category.DIAGNOSIS
        assert records[0].sample_id == "s1"

    def test_wrongly_categorized_carries_both_categories(self):
        gold = StructuredReport.build({"diagnosis": "pneumonia"})
        pred = StructuredReport.build({"comorbidities": "pneumonia"})
        records = classify_errors(align_concepts(pred, gold))
        assert len(records) == 1
        assert records[0].kind == WRONGLY_CATEGORIZED
        assert records[0].category is Category.DIAGNOSIS
        assert records[0].target_category is Category.COMORBIDITIES

    def test_spurious(self):
        gold = StructuredReport.build({})
        pred = StructuredReport.build({"diagnosis": "dragon pox"})
        records = classify_errors(align_concepts(pred, gold))
        assert records[0].kind == SPURIOUS

    def test_perfect_prediction_yields_nothing(self):
        report = StructuredReport.build({"diagnosis": "sepsis", "age": "40"})
        assert classify_errors(align_concepts(report, report)) == []

    @given(report_strategy)
    @settings(max_examples=50, deadline=None)
    def test_self_alignment_is_error_free(self, report):
        assert classify_errors(align_concepts(report, report)) == []


class TestAnnotations:
    def test_near_miss_annotated_without_count_change(self):
        gold = StructuredReport.build({"diagnosis": "acute bacterial pneumonia"})
        pred = StructuredReport.build({"diagnosis": "bacterial pneumonia"})
        alignment = align_concepts(pred, gold)
        records = classify_errors(alignment)
        assert len(records) == 2  # one missing + one spurious
        annotated = annotate_near_misses(records, alignment)
        assert len(annotated) == len(records)
        assert {r.kind for r in annotated} == {MISSING, SPURIOUS}
        assert all("near-miss" in (r.note or "") for r in annotated)

    def test_icl_copy_flagged(self):
        gold = StructuredReport.build({})
        pred = StructuredReport.build({"diagnosis": "sepsis"})
        records = classify_errors(align_concepts(pred, gold))
        flagged = flag_icl_copies(records, ["Sepsis"])
        assert flagged[0].note == "copied from in-context learning examples"

    def test_icl_flag_leaves_unrelated_records_alone(self):
        gold = StructuredReport.build({"age": "4"})
        pred = StructuredReport.build({})
        records = classify_errors(align_concepts(pred, gold))
        assert flag_icl_copies(records, ["sepsis"]) == records


class TestSampleErrors:
    def _pairs(self, n_bad: int, n_good: int):
        pairs = []
        for i in range(n_bad):
            gold = StructuredReport.build({"diagnosis": f"condition {i}"})
            pairs.append((result_for(f"bad-{i}", StructuredReport.build({})), gold))
        for i in range(n_good):
            gold = StructuredReport.build({"diagnosis": f"condition {i}"})
            pairs.append((result_for(f"good-{i}", gold), gold))
        return pairs

    def test_exact_sample_when_enough(self):
        bundle = sample_errors(self._pairs(30, 5), n=20, seed=9)
        assert len(bundle.items) == 20
        assert bundle.shortfall == 0

    def test_same_seed_identical(self):
        pairs = self._pairs(25, 0)
        a = sample_errors(pairs, n=10, seed=4)
        b = sample_errors(pairs, n=10, seed=4)
        assert [i.sample_id for i in a.items] == [i.sample_id for i in b.items]

    def test_shortfall_note(self):
        bundle = sample_errors(self._pairs(5, 10), n=20, seed=4)
        assert len(bundle.items) == 5
        assert bundle.shortfall == 15
        assert "only 5" in bundle.note

    def test_parse_failures_count_as_all_missing(self):
        gold = StructuredReport.build({"diagnosis": ["a", "b"], "age": "4"})
        errors = errors_for_result(result_for("s", None, raw="no object here"), gold)
        assert len(errors) == 3
        assert all(e.kind == MISSING for e in errors)

    def test_digest_renders_groups(self):
        bundle = sample_errors(self._pairs(3, 0), n=3, seed=1)
        digest = render_error_digest(bundle)
        assert "missing (3)" in digest
        assert "diagnosis" in digest


class TestNormalize:
    def test_whitespace_collapse(self):
        assert normalize_concept("  Type 2\tDiabetes ") == "type 2 diabetes"
