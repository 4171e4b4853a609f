"""Fixed-capacity FIFO caches for hidden states (h), projected outputs (z)
and fused input-output vectors (phi)."""
from __future__ import annotations

from collections import deque
from typing import Callable, Deque, List, Optional, Tuple

import numpy as np

Projector = Callable[[np.ndarray, np.ndarray], Tuple[np.ndarray, np.ndarray]]


class CacheSet:
    """Three aligned slot queues; each slot remembers the absolute step it was
    computed at. Γʰ may run one slot ahead of Γᶻ/Γᵖ inside a step."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("cache capacity must be positive")
        self.capacity = capacity
        self.h: Deque[Tuple[int, np.ndarray]] = deque()
        self.z: Deque[Tuple[int, np.ndarray]] = deque()
        self.p: Deque[Tuple[int, np.ndarray]] = deque()

    def __len__(self) -> int:
        return len(self.p)

    @property
    def h_times(self) -> List[int]:
        return [t for t, _ in self.h]

    @property
    def p_times(self) -> List[int]:
        return [t for t, _ in self.p]

    def phi_matrix(self) -> Optional[np.ndarray]:
        if not self.p:
            return None
        return np.array([v for _, v in self.p])

    def push_h(self, h: np.ndarray, time: int) -> None:
        if len(self.h) == self.capacity:
            self.h.popleft()
        self.h.append((time, np.array(h, copy=True)))

    def push_output(self, z: np.ndarray, phi: np.ndarray, time: int) -> None:
        if len(self.z) == self.capacity and len(self.p) == self.capacity:
            self.z.popleft()
            self.p.popleft()
        self.z.append((time, np.array(z, copy=True)))
        self.p.append((time, np.array(phi, copy=True)))

    def push(self, h: np.ndarray, z: np.ndarray, phi: np.ndarray, time: int) -> None:
        self.push_h(h, time)
        self.push_output(z, phi, time)

    def rebuild_after_revise(self, logits: np.ndarray, project: Projector) -> None:
        """Recompute Γᶻ and Γᵖ for every step held in Γʰ.

        ``logits[j - 1]`` are the reviser logits paired with step j; the
        current step t is the newest Γʰ slot and ``len(logits)`` must equal t.
        ``project`` maps stacked (h, logits) rows to stacked (z, phi) rows.
        """
        if not self.h:
            raise ValueError("nothing cached to rebuild from")
        t = self.h[-1][0]
        if len(logits) != t:
            raise ValueError(f"reviser produced {len(logits)} outputs for {t} buffered steps")
        times = [j for j, _ in self.h]
        zs, phis = project(np.array([h for _, h in self.h]), logits[[j - 1 for j in times]])
        self.z.clear()
        self.p.clear()
        for row, j in enumerate(times):
            self.z.append((j, zs[row]))
            self.p.append((j, phis[row]))

    def check_aligned(self) -> None:
        ht, pt = self.h_times, self.p_times
        zt = [t for t, _ in self.z]
        if zt != pt or ht != pt:
            raise AssertionError(f"cache misaligned: h={ht} z={zt} p={pt}")
        if len(ht) > self.capacity:
            raise AssertionError("cache over capacity")
        if ht and ht != list(range(ht[0], ht[0] + len(ht))):
            raise AssertionError(f"cache times not contiguous: {ht}")
