"""leukopipe: deterministic transfer-learning pipeline for binary
blood-smear cell classification (healthy hematologic vs leukemic)."""

__version__ = "0.1.0"
