"""Two-stage privacy-preserving synthetic data pipeline for study-activity records."""
