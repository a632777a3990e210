"""Perfect-maze generation, shortest-path solving and image rendering.

Grids are indexed ``(row, col)``. Cells whose row and column are both odd are
maze nodes; the cells between two nodes are the walls that carving removes.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

from tacit.rng import Xoshiro256

Cell = tuple[int, int]

WHITE = (255, 255, 255)
BLACK = (0, 0, 0)
GREEN = (0, 255, 0)
RED = (255, 0, 0)
PALETTE = np.array([BLACK, WHITE, GREEN, RED], dtype=np.uint8)
_WALL, _PATH, _ENDPOINT, _SOLUTION = range(4)

DEFAULT_RESOLUTION = 64
MAX_SIZE = 63

# N, S, W, E; the random index is drawn against this order.
_STEPS = ((-1, 0), (1, 0), (0, -1), (0, 1))


class MazeError(ValueError):
    pass


class InvalidSizeError(MazeError):
    pass


class UnreachableExitError(MazeError):
    pass


class ResolutionError(MazeError):
    pass


@dataclass
class MazeGrid:
    size: int
    cells: np.ndarray  # bool (size, size), True = path
    entry: Cell = None  # type: ignore[assignment]
    exit: Cell = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.entry is None:
            self.entry = (1, 1)
        if self.exit is None:
            self.exit = (self.size - 2, self.size - 2)
        self.cells = np.asarray(self.cells, dtype=bool)
        if self.cells.shape != (self.size, self.size):
            raise MazeError(f"cells shape {self.cells.shape} does not match size {self.size}")

    def is_path(self, cell: Cell) -> bool:
        r, c = cell
        return 0 <= r < self.size and 0 <= c < self.size and bool(self.cells[r, c])

    def open_count(self) -> int:
        return int(self.cells.sum())


@dataclass
class SolutionPath:
    cells: list[Cell] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.cells)

    def interior(self) -> list[Cell]:
        """Cells drawn red: the path without its entry and exit."""
        return self.cells[1:-1]


@dataclass
class PairSample:
    input: np.ndarray  # uint8 (H, W, 3)
    target: np.ndarray  # uint8 (H, W, 3)
    size: int
    seed: int

    @property
    def resolution(self) -> int:
        return self.input.shape[0]


def check_size(size: int) -> None:
    if size % 2 == 0 or size < 5 or size > MAX_SIZE:
        raise InvalidSizeError(f"maze size must be odd and in [5, {MAX_SIZE}], got {size}")


def generate_maze(size: int, seed: int) -> MazeGrid:
    """Carve a perfect maze with randomized iterative-backtracking DFS.

    Deterministic in ``(size, seed)``: neighbors are listed in N, S, W, E
    order and one is picked with a single uniform draw from xoshiro256**.
    """
    check_size(size)
    rng = Xoshiro256(seed)
    cells = np.zeros((size, size), dtype=bool)
    # plain lists are several times faster than numpy indexing in this loop
    open_ = [[False] * size for _ in range(size)]
    open_[1][1] = True
    stack = [(1, 1)]
    hi = size - 2
    while stack:
        r, c = stack[-1]
        candidates = []
        for dr, dc in _STEPS:
            nr, nc = r + 2 * dr, c + 2 * dc
            if 1 <= nr <= hi and 1 <= nc <= hi and not open_[nr][nc]:
                candidates.append((dr, dc))
        if candidates:
            dr, dc = candidates[rng.below(len(candidates))]
            open_[r + dr][c + dc] = True
            open_[r + 2 * dr][c + 2 * dc] = True
            stack.append((r + 2 * dr, c + 2 * dc))
        else:
            stack.pop()
    cells[:] = open_
    return MazeGrid(size, cells)


def solve_maze(grid: MazeGrid) -> SolutionPath:
    """Shortest entry-to-exit path by breadth-first search."""
    if not grid.is_path(grid.entry) or not grid.is_path(grid.exit):
        raise UnreachableExitError("entry or exit is not a path cell")
    parent: dict[Cell, Cell | None] = {grid.entry: None}
    queue = deque([grid.entry])
    while queue:
        cur = queue.popleft()
        if cur == grid.exit:
            break
        r, c = cur
        for dr, dc in _STEPS:
            nxt = (r + dr, c + dc)
            if nxt not in parent and grid.is_path(nxt):
                parent[nxt] = cur
                queue.append(nxt)
    if grid.exit not in parent:
        raise UnreachableExitError(f"exit {grid.exit} unreachable from entry {grid.entry}")
    path = []
    node: Cell | None = grid.exit
    while node is not None:
        path.append(node)
        node = parent[node]
    path.reverse()
    return SolutionPath(path)


def cell_index(resolution: int, size: int) -> np.ndarray:
    """Logical row/column shown at each pixel row/column (nearest neighbor)."""
    return (np.arange(resolution) * size) // resolution


def render_maze(
    grid: MazeGrid, path: SolutionPath | None = None, resolution: int = DEFAULT_RESOLUTION
) -> np.ndarray:
    """Render to an RGB ``uint8`` image of shape ``(resolution, resolution, 3)``.

    Entry and exit stay green even when a solution path is overlaid.
    """
    if resolution < grid.size:
        raise ResolutionError(f"resolution {resolution} < maze size {grid.size} would drop cells")
    codes = np.where(grid.cells, _PATH, _WALL).astype(np.uint8)
    if path is not None:
        for r, c in path.cells:
            codes[r, c] = _SOLUTION
    for r, c in (grid.entry, grid.exit):
        codes[r, c] = _ENDPOINT
    idx = cell_index(resolution, grid.size)
    return PALETTE[codes[np.ix_(idx, idx)]]


def path_pixel_mask(cells: list[Cell], size: int, resolution: int) -> np.ndarray:
    """Boolean ``(resolution, resolution)`` mask of pixels covering ``cells``."""
    marked = np.zeros((size, size), dtype=bool)
    for r, c in cells:
        marked[r, c] = True
    idx = cell_index(resolution, size)
    return marked[np.ix_(idx, idx)]


def generate_pair(size: int, seed: int, resolution: int = DEFAULT_RESOLUTION) -> PairSample:
    grid = generate_maze(size, seed)
    path = solve_maze(grid)
    return PairSample(
        input=render_maze(grid, None, resolution),
        target=render_maze(grid, path, resolution),
        size=size,
        seed=seed,
    )
