"""crossim: signalized-intersection traffic generation, world-model training,
closed-loop rollout, and safety metrics."""

__version__ = "0.1.0"

FEATURE_LAYOUT_VERSION = 1
