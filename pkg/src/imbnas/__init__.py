"""Neural architecture search on class-imbalanced data.

Weight-sharing super-networks, evolutionary and differentiable search,
long-tailed splits with effective-number re-weighting, and the P0-P3
source-to-target rank adaptation procedures.
"""

__version__ = "0.1.0"
