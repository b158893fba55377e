"""Disjoint-set forest with path compression and union by size."""
from __future__ import annotations

import numpy as np


class UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))
        self.size = [1] * n
        self.set_count = n

    def find(self, i: int) -> int:
        # iterative find, full path compression
        root = i
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[i] != root:
            self.parent[i], i = root, self.parent[i]
        return root

    def union(self, i: int, j: int) -> bool:
        """Merge the sets of i and j; returns True if they were distinct."""
        ri, rj = self.find(i), self.find(j)
        if ri == rj:
            return False
        if self.size[ri] < self.size[rj]:
            ri, rj = rj, ri
        self.parent[rj] = ri
        self.size[ri] += self.size[rj]
        self.set_count -= 1
        return True

    def roots(self) -> np.ndarray:
        """Fully compressed root per element."""
        return np.asarray([self.find(i) for i in range(len(self.parent))], dtype=np.int64)
