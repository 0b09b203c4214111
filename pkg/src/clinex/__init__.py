"""Clinical information extraction harness.

Drives chat-completion model endpoints through naive, retrieval-augmented
and minimal prompting setups, validates structured outputs against a
closed 15-category schema, and scores them with ROUGE, embedding-based
similarity and entity-level metrics.
"""

from clinex.schema import (
    CATEGORY_NAMES,
    CATEGORY_ORDER,
    Category,
    ClinicalReport,
    ParseFailure,
    SchemaError,
    StructuredReport,
    parse_model_output,
    serialize_report,
    split_concepts,
)

__version__ = "0.1.0"

__all__ = [
    "CATEGORY_NAMES",
    "CATEGORY_ORDER",
    "Category",
    "ClinicalReport",
    "ParseFailure",
    "SchemaError",
    "StructuredReport",
    "parse_model_output",
    "serialize_report",
    "split_concepts",
    "__version__",
]
