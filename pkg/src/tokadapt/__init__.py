"""Weakly supervised personalized acoustic modeling.

Unsupervised multi-granularity acoustic-token discovery, a multi-task
phoneme/token network with an fDLR input transform, the three-stage
adaptation schedule, classic adaptation baselines, and a synthetic-corpus
experiment harness.
"""

__version__ = "0.1.0"
