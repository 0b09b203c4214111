from __future__ import annotations

import pytest
from hypothesis import strategies as st

from clinex.schema import CATEGORY_ORDER, StructuredReport

# Concepts: any nonempty text without the semicolon delimiter, already
# trimmed (build() trims anyway; pre-trimming keeps equality exact).
concept_strategy = (
    st.text(
        alphabet=st.characters(blacklist_characters=";", blacklist_categories=("Cs",)),
        min_size=1,
        max_size=30,
    )
    .map(str.strip)
    .filter(bool)
)

report_strategy = st.dictionaries(
    st.sampled_from(CATEGORY_ORDER),
    st.lists(concept_strategy, min_size=1, max_size=5),
    max_size=len(CATEGORY_ORDER),
).map(StructuredReport.build)


def pytest_runtest_logreport(report):
    """One visible pass/fail line per acceptance criterion."""
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    status = "PASS" if report.passed else ("SKIP" if report.skipped else "FAIL")
    print(f"\nACCEPTANCE {name}: {status}", flush=True)


@pytest.fixture
def tmp_corpus_path(tmp_path):
    return tmp_path / "corpus.jsonl"
