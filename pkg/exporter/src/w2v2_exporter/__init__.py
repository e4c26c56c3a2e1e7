"""Offline wav2vec2 embedding exporter for the vadforge feature store."""

__version__ = "0.1.0"

from .exporter import ExportJob, ExportSummary, export, main
