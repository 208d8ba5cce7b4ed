"""Teacher-student distillation and start-point fine-tuning for short-utterance
speaker verification, on synthetic data, in plain numpy."""

__version__ = "0.1.0"
