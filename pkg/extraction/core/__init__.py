"""
Core infrastructure for chart extraction.

Vocabulary, geometry and record types, the immutable per-image context,
the abstract stage interfaces and the pipeline that drives them.
"""

from .context import StageContext
from .base_stage import BaseStage
from .pipeline import ExtractionPipeline, extract, batch_extract

__all__ = ['StageContext', 'BaseStage', 'ExtractionPipeline', 'extract', 'batch_extract']
