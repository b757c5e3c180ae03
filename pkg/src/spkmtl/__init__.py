"""Speaker embedding training with auxiliary attribute tasks, plus the
verification (EER) and diarization (DER) evaluation stack."""

__version__ = "0.1.0"
