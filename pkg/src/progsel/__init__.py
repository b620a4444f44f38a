"""Progress-estimator selection for query execution pipelines."""

__version__ = "0.1.0"
