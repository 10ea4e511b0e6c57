"""Privacy-preserving publication of search-log histograms."""

__version__ = "0.1.0"

from .searchlog import Histogram, ItemKind, SearchEntry, SearchLog, ingest_tsv, generate_synthetic
from .zealous import (
    SanitizedHistogram,
    ZealousPlan,
    plan_from_parameters,
    plan_indistinguishable,
    plan_probabilistic,
    sanitize,
)
from .anonymity import k_query_anonymize

__all__ = [
    "Histogram",
    "ItemKind",
    "SanitizedHistogram",
    "SearchEntry",
    "SearchLog",
    "ZealousPlan",
    "generate_synthetic",
    "ingest_tsv",
    "k_query_anonymize",
    "plan_from_parameters",
    "plan_indistinguishable",
    "plan_probabilistic",
    "sanitize",
]
