"""Semi-supervised domain generalisation on synthetic multi-domain data.

FixMatch-style training with uncertainty-guided pseudo-label selection
(MC-dropout certainty gate) and checkpoint model averaging, plus a
leave-one-domain-out experiment harness.
"""

__version__ = "0.1.0"
