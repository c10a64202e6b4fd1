"""Genetic jigsaw solver for reassembling leaked image tiles.

Tiles arrive in unknown order; the only signal is that adjacent tiles of
the source image have similar edges. Fitness of an arrangement is the sum
of squared intensity differences across all interior edges (lower is
better). The solver is a generational GA whose crossover grows a child
from one seed tile outward, preferring placements both parents agree on,
then best-buddy placements suggested by one parent, then the greedy
cheapest edge - so assembled substructures survive into children instead
of being torn apart by positional crossover.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

# directions: placed tile -> candidate slot
_DIRS = ((0, 1), (1, 0), (0, -1), (-1, 0))  # right, down, left, up


@dataclass
class GaParams:
    population: int = 300
    generations: int = 100
    elite_frac: float = 0.05
    mutation_rate: float = 0.02
    stall_generations: int = 15
    tournament: int = 3


@dataclass
class EdgeCosts:
    right: np.ndarray  # right[i, j] = cost of j sitting right of i
    down: np.ndarray   # down[i, j] = cost of j sitting below i

    def of(self, d: int) -> np.ndarray:
        # left/up are the transposed relations
        return (self.right, self.down, self.right.T, self.down.T)[d]


def edge_costs(tiles: Sequence[np.ndarray]) -> EdgeCosts:
    n = len(tiles)
    rights = np.stack([np.asarray(t, dtype=np.float64)[:, -1] for t in tiles])
    lefts = np.stack([np.asarray(t, dtype=np.float64)[:, 0] for t in tiles])
    bottoms = np.stack([np.asarray(t, dtype=np.float64)[-1, :] for t in tiles])
    tops = np.stack([np.asarray(t, dtype=np.float64)[0, :] for t in tiles])
    right = ((rights[:, None, :] - lefts[None, :, :]) ** 2).sum(axis=2)
    down = ((bottoms[:, None, :] - tops[None, :, :]) ** 2).sum(axis=2)
    return EdgeCosts(right, down)


def fitness(arrangement: np.ndarray, costs: EdgeCosts) -> float:
    a = arrangement
    return float(costs.right[a[:, :-1], a[:, 1:]].sum()
                 + costs.down[a[:-1, :], a[1:, :]].sum())


def _neighbor_map(arrangement: np.ndarray) -> dict:
    """(tile, direction) -> neighboring tile, for one parent arrangement."""
    h, w = arrangement.shape
    out = {}
    for r in range(h):
        for c in range(w):
            t = int(arrangement[r, c])
            for d, (dr, dc) in enumerate(_DIRS):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w:
                    out[(t, d)] = int(arrangement[rr, cc])
    return out


def _best_buddies(costs: EdgeCosts) -> dict:
    """(tile, direction) -> tile, when both sides prefer each other most."""
    out = {}
    for d in range(4):
        m = costs.of(d)
        fwd = m.argmin(axis=1)
        back = m.argmin(axis=0)
        for i, j in enumerate(fwd.tolist()):
            if back[j] == i:
                out[(i, d)] = j
    return out


class _Growth:
    """Kernel-growing child under a fixed output bounding box."""

    def __init__(self, n: int, grid_h: int, grid_w: int):
        self.n = n
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.pos: dict = {}        # tile -> (r, c), relative coordinates
        self.cells: dict = {}      # (r, c) -> tile
        self.min_r = self.max_r = self.min_c = self.max_c = 0

    def place(self, tile: int, rc: tuple) -> None:
        self.pos[tile] = rc
        self.cells[rc] = tile
        r, c = rc
        self.min_r = min(self.min_r, r)
        self.max_r = max(self.max_r, r)
        self.min_c = min(self.min_c, c)
        self.max_c = max(self.max_c, c)

    def slot_ok(self, rc: tuple) -> bool:
        r, c = rc
        if rc in self.cells:
            return False
        return (max(self.max_r, r) - min(self.min_r, r) < self.grid_h
                and max(self.max_c, c) - min(self.min_c, c) < self.grid_w)

    def frontier(self) -> list:
        """(slot, anchor tile, direction anchor->slot), deterministic order."""
        out = []
        seen = set()
        for tile, (r, c) in self.pos.items():
            for d, (dr, dc) in enumerate(_DIRS):
                rc = (r + dr, c + dc)
                if rc not in seen and self.slot_ok(rc):
                    seen.add(rc)
                    out.append((rc, tile, d))
        out.sort(key=lambda e: (e[0], e[2]))
        return out

    def to_grid(self) -> np.ndarray:
        grid = np.zeros((self.grid_h, self.grid_w), dtype=np.int64)
        for (r, c), t in self.cells.items():
            grid[r - self.min_r, c - self.min_c] = t
        return grid


def _preference_order(costs: EdgeCosts) -> list:
    """Per direction, rows of tile indices sorted by rising edge cost."""
    return [np.argsort(costs.of(d), axis=1, kind="stable") for d in range(4)]


def _crossover(pa: np.ndarray, pb: np.ndarray, costs: EdgeCosts,
               buddies: dict, prefer: list, rng: random.Random) -> np.ndarray:
    h, w = pa.shape
    n = h * w
    na, nb = _neighbor_map(pa), _neighbor_map(pb)
    child = _Growth(n, h, w)
    child.place(rng.randrange(n), (0, 0))
    used = set(child.pos)

    while len(used) < n:
        frontier = child.frontier()
        agreed = []
        suggested = []
        for rc, anchor, d in frontier:
            va, vb = na.get((anchor, d)), nb.get((anchor, d))
            if va is not None and va == vb and va not in used:
                agreed.append((rc, va))
            bb = buddies.get((anchor, d))
            if bb is not None and bb not in used and (va == bb or vb == bb):
                suggested.append((rc, bb))
        if agreed:
            rc, t = agreed[rng.randrange(len(agreed))]
        elif suggested:
            rc, t = suggested[rng.randrange(len(suggested))]
        else:
            best = None
            for rc, anchor, d in frontier:
                row = prefer[d][anchor]
                for t in row.tolist():
                    if t not in used:
                        key = (costs.of(d)[anchor, t], t, rc)
                        if best is None or key < best[0]:
                            best = (key, rc, t)
                        break
            _, rc, t = best
        child.place(t, rc)
        used.add(t)
    return child.to_grid()


def _mutate(arr: np.ndarray, rate: float, rng: random.Random) -> None:
    h, w = arr.shape
    n = h * w
    flat = arr.reshape(-1)
    for i in range(n):
        if rng.random() < rate:
            j = rng.randrange(n)
            flat[i], flat[j] = flat[j], flat[i]


@dataclass
class JigsawResult:
    arrangement: np.ndarray
    fitness: float
    history: list = field(repr=False, default_factory=list)
    generations_run: int = 0


def solve(tiles: Sequence[np.ndarray], grid_w: int, grid_h: int,
          params: Optional[GaParams] = None, seed: int = 0) -> JigsawResult:
    """Arrange tiles on a grid_h x grid_w grid by edge compatibility."""
    params = params or GaParams()
    n = len(tiles)
    if n != grid_w * grid_h:
        raise ValueError(f"{n} tiles cannot fill a {grid_w}x{grid_h} grid")
    if n == 1:
        return JigsawResult(np.zeros((1, 1), dtype=np.int64), 0.0, [0.0], 0)

    costs = edge_costs(tiles)
    buddies = _best_buddies(costs)
    prefer = _preference_order(costs)
    rng = random.Random(seed)

    def random_arrangement() -> np.ndarray:
        perm = list(range(n))
        rng.shuffle(perm)
        return np.array(perm, dtype=np.int64).reshape(grid_h, grid_w)

    pop = [random_arrangement() for _ in range(params.population)]
    scores = [fitness(a, costs) for a in pop]
    n_elite = max(1, int(params.population * params.elite_frac))
    history = []
    best_seen = min(scores)
    stall = 0
    gen = 0

    for gen in range(1, params.generations + 1):
        ranked = sorted(range(len(pop)), key=lambda i: (scores[i], i))
        elites = [pop[i] for i in ranked[:n_elite]]
        elite_scores = [scores[i] for i in ranked[:n_elite]]

        def pick_parent() -> np.ndarray:
            contenders = [rng.randrange(len(pop)) for _ in range(params.tournament)]
            return pop[min(contenders, key=lambda i: scores[i])]

        children = []
        while len(children) < params.population - n_elite:
            child = _crossover(pick_parent(), pick_parent(), costs, buddies,
                               prefer, rng)
            _mutate(child, params.mutation_rate, rng)
            children.append(child)

        pop = elites + children
        scores = elite_scores + [fitness(a, costs) for a in children]
        gen_best = min(scores)
        history.append(gen_best)
        if gen_best < best_seen - 1e-12:
            best_seen = gen_best
            stall = 0
        else:
            stall += 1
            if stall >= params.stall_generations:
                break

    best_i = min(range(len(pop)), key=lambda i: (scores[i], i))
    return JigsawResult(pop[best_i], scores[best_i], history, gen)


def neighbor_accuracy(arrangement: np.ndarray, source_of_tile: Sequence[int],
                      grid_w: int, grid_h: int) -> float:
    """Fraction of source-adjacent tile pairs placed adjacently, same way."""
    result_pos = {}
    for r in range(arrangement.shape[0]):
        for c in range(arrangement.shape[1]):
            src = source_of_tile[int(arrangement[r, c])]
            result_pos[src] = (r, c)
    good = total = 0
    for r in range(grid_h):
        for c in range(grid_w):
            s = r * grid_w + c
            for dr, dc, s2 in ((0, 1, s + 1), (1, 0, s + grid_w)):
                if c + dc >= grid_w or r + dr >= grid_h:
                    continue
                total += 1
                pr, pc = result_pos[s]
                if result_pos[s2] == (pr + dr, pc + dc):
                    good += 1
    return good / total
