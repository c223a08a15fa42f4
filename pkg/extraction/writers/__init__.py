"""Output writers for extraction results and evaluation reports."""
