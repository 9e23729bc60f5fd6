"""simreid: a similarity-learning re-identification engine.

Core package: seeded numerics, contrastive/triplet losses with exact
gradients, semi-hard mining, a from-scratch embedding network, Adam
training, individual-disjoint data splitting, Monte-Carlo mAP@k
evaluation and an open-set gallery census.  `simreid.service` exposes it
all over HTTP; `simreid.cli` is the thin client.
"""

__version__ = "0.1.0"
