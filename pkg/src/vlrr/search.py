"""Greedy deep-to-shallow search over per-layer coupled ratios.

Starting from no sharing, the deepest layer's ratio is raised one grid step at
a time while the validation error keeps strictly decreasing. The first step
that fails to improve is rolled back and the cursor moves one layer shallower.
A layer whose ratio reaches the top of the grid is exhausted as well. The
search ends once the cursor has passed the first layer.
"""

from __future__ import annotations

from concurrent.futures import Executor
from dataclasses import dataclass, field
from typing import Callable, Sequence

GRID = (0.0, 0.25, 0.5, 0.75, 1.0)

Ratios = tuple[float, float, float]


@dataclass
class Trial:
    c: Ratios
    error: float
    accepted: bool
    layer: int | None  # 1-based layer whose ratio was raised; None for the start point


@dataclass
class GridSearchState:
    grid: tuple[float, ...] = GRID
    current: list[int] = field(default_factory=lambda: [0, 0, 0])  # grid indices
    cursor: int = 2  # 0-based layer index; starts at the deepest layer
    best_c: Ratios | None = None
    best_error: float = float("inf")
    history: list[Trial] = field(default_factory=list)

    def ratios(self, idx=None) -> Ratios:
        idx = self.current if idx is None else idx
        return tuple(self.grid[i] for i in idx)

    def next_proposal(self, cursor=None, current=None):
        """(layer, grid indices) of the next trial from ``cursor`` downward, or None."""
        cursor = self.cursor if cursor is None else cursor
        current = self.current if current is None else current
        while cursor >= 0:
            if current[cursor] + 1 < len(self.grid):
                idx = list(current)
                idx[cursor] += 1
                return cursor, idx
            cursor -= 1
        return None


def grid_search_coupled_ratios(
    train_eval_fn: Callable[[Ratios], float],
    grid: Sequence[float] = GRID,
    executor: Executor | None = None,
    speculate: int = 1,
):
    """Run the greedy search; returns ``(best ratios, best error, history)``.

    ``train_eval_fn`` maps ratios ``(c1, c2, c3)`` to a validation error. With an
    ``executor`` and ``speculate > 1``, the trial that would follow an accept
    and the one that would follow a rollback are submitted alongside the
    current one; the visited path and history are the same as the sequential
    run.
    """
    state = GridSearchState(tuple(grid))
    futures: dict[Ratios, object] = {}

    def submit(c: Ratios):
        if c not in futures:
            futures[c] = executor.submit(train_eval_fn, c) if executor else None
        return futures[c]

    def result(c: Ratios) -> float:
        fut = submit(c)
        return float(fut.result()) if fut is not None else float(train_eval_fn(c))

    start = state.ratios()
    err = result(start)
    state.history.append(Trial(start, err, True, None))
    state.best_c, state.best_error = start, err
    while True:
        prop = state.next_proposal()
        if prop is None:
            break
        layer, idx = prop
        c = state.ratios(idx)
        if executor is not None and speculate > 1:
            submit(c)
            after_accept = state.next_proposal(layer, idx)
            after_reject = state.next_proposal(layer - 1, state.current)
            for nxt in (after_accept, after_reject)[: speculate - 1]:
                if nxt is not None:
                    submit(state.ratios(nxt[1]))
        err = result(c)
        accepted = err < state.best_error
        state.history.append(Trial(c, err, accepted, layer + 1))
        if accepted:
            state.current = idx
            state.best_c, state.best_error = c, err
            state.cursor = layer
        else:
            state.cursor = layer - 1
    return state.best_c, state.best_error, state.history
