"""Task-adaptive structured pruning of small vision transformers.

Devices summarize their local data as Gaussian mixture parameters; the
server assembles a per-device proxy dataset from a public pool, scores
feed-forward units and attention channels on it, allocates per-layer
budgets from layer divergence, prunes, and head-finetunes.
"""

__version__ = "0.1.0"
