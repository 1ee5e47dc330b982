from .export import ExportError, export_stats

__version__ = "0.1.0"
