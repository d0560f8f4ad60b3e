"""Capsule-interleaved two-stream vision-language transformer with a
weakly supervised grounding evaluation suite and a synthetic shapes-VQA
harness for desk-scale end-to-end runs."""

__version__ = "0.1.0"
