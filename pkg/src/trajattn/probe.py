"""Counting probe for attention memory-scaling experiments.

Kernels that accept a probe report the number of scalar slots they allocate
for attention matrices (scores and their softmax) and for prototype-build
workspaces. The counts are exact functions of the input sizes, which is what
the scaling checks regress against: full attention grows as N^2, prototype
attention as N*R.
"""

from __future__ import annotations

from collections import defaultdict

__all__ = ["AllocProbe", "ATTN_MATRIX", "PROTO_BUILD"]

ATTN_MATRIX = "attn_matrix"
PROTO_BUILD = "proto_build"


class AllocProbe:
    def __init__(self):
        self.counts: dict[str, int] = defaultdict(int)

    def add(self, category: str, slots: int) -> None:
        self.counts[category] += int(slots)

    def total(self, category: str | None = None) -> int:
        if category is None:
            return sum(self.counts.values())
        return self.counts.get(category, 0)

    def __repr__(self):
        return f"AllocProbe({dict(self.counts)})"
