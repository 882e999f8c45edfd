"""Sliding previous-3 -> next-3 window pairs over a scan's slice stack."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Volume
from .errors import ShapeError

CONTEXT = 3  # slices per stack
SPAN = 2 * CONTEXT


@dataclass(frozen=True, eq=False)
class WindowPair:
    input_stack: np.ndarray  # (3, H, W): slices i, i+1, i+2
    target_stack: np.ndarray  # (3, H, W): slices i+3, i+4, i+5
    start_index: int
    scan_id: str

    @property
    def target_start(self) -> int:
        return self.start_index + CONTEXT


def stack_channels(slices: Sequence[np.ndarray]) -> np.ndarray:
    """Stack three same-sized slices as channels, in the given order."""
    if len(slices) != CONTEXT:
        raise ShapeError(f"expected {CONTEXT} slices, got {len(slices)}")
    arrays = [np.asarray(s) for s in slices]
    shape = arrays[0].shape
    if len(shape) != 2 or any(a.shape != shape for a in arrays):
        raise ShapeError(f"slices must be 2-D with identical shapes, got {[a.shape for a in arrays]}")
    return np.stack(arrays, axis=0)


def unstack_channels(stack: np.ndarray) -> tuple[np.ndarray, ...]:
    if stack.ndim != 3 or stack.shape[0] != CONTEXT:
        raise ShapeError(f"expected a ({CONTEXT}, H, W) stack, got {stack.shape}")
    return tuple(stack[k] for k in range(CONTEXT))


def n_window_pairs(n_slices: int) -> int:
    return max(0, n_slices - (SPAN - 1))


def make_window_pairs(v: Volume) -> list[WindowPair]:
    """All stride-1 window pairs of ``v`` in ascending start order.

    Stacks are read-only views into the volume's pixel array.
    """
    px = v.pixels
    pairs = []
    for i in range(n_window_pairs(v.n_slices)):
        inp = px[i : i + CONTEXT]
        tgt = px[i + CONTEXT : i + SPAN]
        inp.flags.writeable = False
        tgt.flags.writeable = False
        pairs.append(WindowPair(inp, tgt, i, v.scan_id))
    return pairs


def pairs_to_arrays(pairs: Sequence[WindowPair]) -> tuple[np.ndarray, np.ndarray]:
    """Batch the pairs into ``(N, 3, H, W)`` input and target arrays."""
    if not pairs:
        raise ShapeError("no window pairs to batch")
    return np.stack([p.input_stack for p in pairs]), np.stack([p.target_stack for p in pairs])
