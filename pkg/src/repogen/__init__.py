"""Turn a research document into a runnable code repository.

The pipeline runs in three phases over a workspace directory: document
analysis into an implementation blueprint, memory-guided file-by-file code
generation (optionally augmented by reference repositories), and sandboxed
verification with iterative patching.
"""

from __future__ import annotations

from .blueprint import AlgorithmSchema, Blueprint, ConceptSchema, validate_blueprint
from .doc_index import ContentIndex, build_index, load_document, parse_document, query_index
from .gateway import LlmGateway
from .pipeline import PipelineConfig, load_config, resume, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "AlgorithmSchema",
    "Blueprint",
    "ConceptSchema",
    "ContentIndex",
    "LlmGateway",
    "PipelineConfig",
    "build_index",
    "load_config",
    "load_document",
    "parse_document",
    "query_index",
    "resume",
    "run_pipeline",
    "validate_blueprint",
]
