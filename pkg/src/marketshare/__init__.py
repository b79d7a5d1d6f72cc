"""Competitor pools, market-share regression and driver attribution for facilities."""
from .agreement import AnnotationSheet, annotation_agreement, load_annotation_sheet
from .competitors import Thresholds, partial_correlation
from .errors import MarketShareError
from .pipeline import PipelineConfig, run_pipeline

__version__ = "0.1.0"

__all__ = ["AnnotationSheet", "MarketShareError", "PipelineConfig", "Thresholds",
           "annotation_agreement", "load_annotation_sheet", "partial_correlation",
           "run_pipeline", "__version__"]
