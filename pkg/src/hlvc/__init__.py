"""Hierarchical multi-label video classification.

Layered label vocabularies, video feature normalization, a bidirectional
label-space inference network with exact analytic gradients, a one-vs-all
logistic regression baseline, ranking metrics, binary dataset shards, and
a command line pipeline tying them together.
"""

__version__ = "0.1.0"
