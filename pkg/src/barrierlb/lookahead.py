"""Short-horizon workload predictions used by the Balance-Future policies.

A window of length ``H + 1`` covers the step about to execute (``h = 0``)
and the next ``H`` steps.  Entries after a request's predicted completion
are zero.  No future arrivals and no refills of vacated slots are assumed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

MODES = ("perfect", "truncated", "noisy")

_NEVER = np.iinfo(np.int64).max // 4


@dataclass
class Lookahead:
    """Workload oracle visible to the scheduler.

    ``perfect``: true profiles and true completion steps.

    ``truncated``: a completion is visible only when at most ``depth`` steps
    remain; otherwise the request is assumed to keep running and its
    workload is extrapolated past the true end with the last increment.

    ``noisy``: each request gets a fixed predicted length
    ``round(o + N(0, sigma))`` clamped to ``>= 1``; remaining steps are
    clamped at 0 and workloads past the true end are extrapolated.
    """

    mode: str = "perfect"
    sigma: float = 0.0
    depth: Optional[int] = None
    seed: int = 0
    _pred: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown lookahead mode {self.mode!r}")
        if self.sigma < 0:
            raise ValueError("noise sigma must be >= 0")
        if self.depth is not None and self.depth < 0:
            raise ValueError("truncation depth must be >= 0")

    def predicted_length(self, request) -> int:
        """Length the scheduler believes ``request`` has (noisy mode only differs)."""
        o = len(request.profile)
        if self.mode != "noisy" or self.sigma == 0:
            return o
        got = self._pred.get(request.id)
        if got is None:
            rng = np.random.default_rng([self.seed, request.id])
            got = max(1, int(round(o + rng.normal(0.0, self.sigma))))
            self._pred[request.id] = got
        return got

    def _visible_length(self, tau, length, plen, H):
        if self.mode != "truncated":
            return plen
        depth = H if self.depth is None else self.depth
        return np.where(length - tau <= depth, length, _NEVER)

    def slot_windows(self, buf, off, tau, length, plen, H: int) -> np.ndarray:
        """Predicted windows for arrays of slots; output has a trailing ``H+1`` axis.

        ``buf`` is a flat profile buffer whose entry 0 is a zero sentinel;
        a slot with ``length == 0`` is empty and predicts zeros.
        """
        h = np.arange(H + 1)
        j = tau[..., None] + h
        L = length[..., None]
        inside = j < L
        vals = buf[np.where(inside, off[..., None] + j, 0)]
        if self.mode == "perfect":
            return vals
        vis = self._visible_length(tau, length, plen, H)[..., None]
        last = off + np.maximum(length - 1, 0)
        prev = np.where(length >= 2, last - 1, last)
        slope = (buf[last] - buf[prev])[..., None]
        extrap = buf[last][..., None] + slope * (j - L + 1)
        vals = np.where(inside, vals, extrap)
        return np.where((j < vis) & (L > 0), vals, 0.0)

    def request_window(self, request, progress: int, H: int) -> np.ndarray:
        """Predicted workloads ``h = 0..H`` for one request after ``progress`` steps."""
        steps = request.profile.as_array()
        buf = np.concatenate([[0.0], steps])
        one = np.ones(1, dtype=np.int64)
        return self.slot_windows(
            buf, one, one * progress, one * len(steps),
            one * self.predicted_length(request), H)[0]
