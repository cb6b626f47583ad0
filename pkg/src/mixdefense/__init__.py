"""Two-layer attack-agnostic adversarial-example detection pipeline.

Layer 1 screens inputs statistically (noise-level scores of residual-filter
histograms); layer 2 checks surviving predictions semantically against a
class-conditional reconstruction through a learned metric. Subpackages:
data loading/synthesis, target classifier, attack generators, both defense
layers, pipeline composition, evaluation harness, and a CLI.
"""

__version__ = "0.1.0"
