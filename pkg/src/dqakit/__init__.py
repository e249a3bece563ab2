"""Data quality assurance engine for EHR-style observation data.

Pipeline: ingest raw observation CSVs, resolve redundant source identifiers
into canonical data elements, apply a library of rules-based transformations
with a full audit log, run completeness/conformance/plausibility checks,
render deterministic quality reports, and round-trip clinician adjudication
decisions back into the pipeline.
"""

from .model import (
    CohortManifest,
    DataElement,
    DqaError,
    ElementCategory,
    ElementRegistry,
    ObservationRecord,
    ObservationStore,
)

__version__ = "0.1.0"

__all__ = [
    "CohortManifest",
    "DataElement",
    "DqaError",
    "ElementCategory",
    "ElementRegistry",
    "ObservationRecord",
    "ObservationStore",
    "__version__",
]
