"""Annotation ingestion, dataset splits, synthetic charts and crop datasets."""
