"""Grid maps, clearance-inflated A*, simulated perception and plan scoring.

Cells are addressed ``(row, col)``; the first line of an ASCII map is row 0
and world coordinates of a cell are its centre:
``x = origin_x + (col + 0.5) * res``, ``y = origin_y + (row + 0.5) * res``.

Error delta is this package's own metric (the tables it mirrors never define
one): ``(agent final error + mean distance of agent waypoints from the
baseline polyline) - (baseline final error)``. Numbers are only comparable
within this package.
"""

from __future__ import annotations

import csv
import heapq
import io
import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path as FilePath
from typing import Any, Sequence

import numpy as np
from scipy import ndimage

from .sim import tether_feasible

SQRT2 = math.sqrt(2.0)
MOVES = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]
SUCCESS_RADIUS = 0.3


class MapFormatError(ValueError):
    pass


class Infeasible(Exception):
    """No path exists between start and goal."""


Cell = tuple[int, int]


@dataclass
class GridMap:
    occupancy: np.ndarray  # bool, shape (height, width)
    resolution: float = 1.0
    origin: tuple = (0.0, 0.0)
    start: Cell | None = None
    goal: Cell | None = None

    def __post_init__(self):
        self.occupancy = np.asarray(self.occupancy, dtype=bool)
        if self.occupancy.ndim != 2 or min(self.occupancy.shape) < 1:
            raise MapFormatError("map must be a non-empty 2D grid")
        if self.resolution <= 0:
            raise MapFormatError("resolution must be positive")

    @property
    def height(self) -> int:
        return self.occupancy.shape[0]

    @property
    def width(self) -> int:
        return self.occupancy.shape[1]

    def in_bounds(self, cell: Cell) -> bool:
        return 0 <= cell[0] < self.height and 0 <= cell[1] < self.width

    def free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and not self.occupancy[cell]

    def to_world(self, cell: Cell) -> tuple[float, float]:
        r, c = cell
        return (self.origin[0] + (c + 0.5) * self.resolution, self.origin[1] + (r + 0.5) * self.resolution)

    def to_cell(self, x: float, y: float) -> Cell:
        c = math.floor((x - self.origin[0]) / self.resolution)
        r = math.floor((y - self.origin[1]) / self.resolution)
        return (r, c)

    def occupied_at(self, x: float, y: float) -> bool:
        cell = self.to_cell(x, y)
        return self.in_bounds(cell) and bool(self.occupancy[cell])

    def bounds(self) -> tuple[tuple[float, float], tuple[float, float]]:
        return (
            (self.origin[0], self.origin[0] + self.width * self.resolution),
            (self.origin[1], self.origin[1] + self.height * self.resolution),
        )

    def inflate(self, clearance: int) -> "GridMap":
        if clearance <= 0:
            return GridMap(self.occupancy.copy(), self.resolution, self.origin, self.start, self.goal)
        r = int(clearance)
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        disc = (xx ** 2 + yy ** 2) <= r * r
        grown = ndimage.binary_dilation(self.occupancy, structure=disc)
        return GridMap(grown, self.resolution, self.origin, self.start, self.goal)

    def to_ascii(self) -> str:
        rows = []
        for r in range(self.height):
            line = []
            for c in range(self.width):
                if (r, c) == self.start:
                    line.append("S")
                elif (r, c) == self.goal:
                    line.append("G")
                else:
                    line.append("#" if self.occupancy[r, c] else ".")
            rows.append("".join(line))
        return "\n".join(rows)


def parse_ascii(text: str, resolution: float = 1.0) -> GridMap:
    lines = [ln.rstrip("\r") for ln in text.strip("\n").splitlines()]
    lines = [ln for ln in lines if ln.strip()]
    if not lines:
        raise MapFormatError("empty map")
    width = len(lines[0])
    occ = np.zeros((len(lines), width), dtype=bool)
    start = goal = None
    for r, line in enumerate(lines):
        if len(line) != width:
            raise MapFormatError(f"ragged row {r}: length {len(line)} != {width}")
        for c, ch in enumerate(line):
            if ch in "#O":
                occ[r, c] = True
            elif ch == "S":
                start = (r, c)
            elif ch == "G":
                goal = (r, c)
            elif ch != ".":
                raise MapFormatError(f"unknown glyph {ch!r} at row {r}, col {c}")
    return GridMap(occ, resolution, (0.0, 0.0), start, goal)


def _pgm_tokens(data: bytes):
    """Yield header tokens with their end offsets, skipping comments."""
    i, n = 0, len(data)
    while i < n:
        ch = data[i:i + 1]
        if ch == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < n and not data[j:j + 1].isspace() and data[j:j + 1] != b"#":
                j += 1
            yield data[i:j], j
            i = j


def parse_pgm(data: bytes, resolution: float = 1.0) -> GridMap:
    """8-bit P2/P5 image; a pixel is occupied iff its value is below 128."""
    tokens = _pgm_tokens(data)
    try:
        magic, _ = next(tokens)
        if magic not in (b"P2", b"P5"):
            raise MapFormatError(f"unsupported PGM magic {magic!r}")
        width = int(next(tokens)[0])
        height = int(next(tokens)[0])
        maxval_tok, end = next(tokens)
        maxval = int(maxval_tok)
    except (StopIteration, ValueError) as exc:
        raise MapFormatError(f"malformed PGM header: {exc}") from None
    if width < 1 or height < 1 or not 0 < maxval < 256:
        raise MapFormatError("malformed PGM header: bad dimensions or maxval")
    if magic == b"P5":
        raw = data[end + 1:end + 1 + width * height]
        if len(raw) != width * height:
            raise MapFormatError("PGM raster truncated")
        pixels = np.frombuffer(raw, dtype=np.uint8)
    else:
        vals = [int(tok) for tok, _ in tokens]
        if len(vals) < width * height:
            raise MapFormatError("PGM raster truncated")
        pixels = np.array(vals[: width * height])
    return GridMap(pixels.reshape(height, width) < 128, resolution)


def load_map(source: str | FilePath | bytes, resolution: float = 1.0) -> GridMap:
    """Load an ASCII grid or PGM image, given as a path, raw bytes or map text."""
    if isinstance(source, bytes):
        data = source
    elif isinstance(source, FilePath) or (isinstance(source, str) and "\n" not in source and FilePath(source).exists()):
        data = FilePath(source).read_bytes()
    elif isinstance(source, str) and "\n" not in source and source.endswith((".txt", ".map", ".pgm")):
        raise FileNotFoundError(source)
    else:
        data = source.encode()
    if data[:2] in (b"P2", b"P5"):
        return parse_pgm(data, resolution)
    try:
        text = data.decode("ascii")
    except UnicodeDecodeError:
        raise MapFormatError("map is neither PGM nor ASCII") from None
    return parse_ascii(text, resolution)


@dataclass
class Path:
    cells: list[Cell]
    waypoints: list[tuple[float, float]]
    length: float  # metres


@dataclass(frozen=True)
class TetherCheck:
    """AUV cells are admissible only if some ASV surface point is within reach."""

    length: float
    asv_points: tuple  # ((x, y), ...) candidate surface positions
    auv_depth: float = 0.0

    def admissible(self, xy: tuple[float, float]) -> bool:
        auv = (xy[0], xy[1], self.auv_depth)
        return any(tether_feasible((ax, ay, 0.0), auv, self.length) for ax, ay in self.asv_points)


def _neighbors(grid: np.ndarray, cell: Cell):
    h, w = grid.shape
    r, c = cell
    for dr, dc in MOVES:
        nr, nc = r + dr, c + dc
        if not (0 <= nr < h and 0 <= nc < w) or grid[nr, nc]:
            continue
        if dr and dc and (grid[r + dr, c] or grid[r, c + dc]):
            continue  # no corner cutting
        yield (nr, nc), (SQRT2 if dr and dc else 1.0)


def _octile(a: Cell, b: Cell) -> float:
    dr, dc = abs(a[0] - b[0]), abs(a[1] - b[1])
    return (SQRT2 - 1.0) * min(dr, dc) + max(dr, dc)


def astar(
    grid_map: GridMap,
    start: Cell,
    goal: Cell,
    clearance: int = 0,
    tether: TetherCheck | None = None,
) -> Path:
    inflated = grid_map.inflate(clearance)
    blocked = inflated.occupancy.copy()
    if tether is not None:
        for r in range(blocked.shape[0]):
            for c in range(blocked.shape[1]):
                if not blocked[r, c] and not tether.admissible(grid_map.to_world((r, c))):
                    blocked[r, c] = True
    for name, cell in (("start", start), ("goal", goal)):
        if not grid_map.in_bounds(cell) or blocked[cell]:
            raise Infeasible(f"{name} {cell} is not free after inflation")
    counter = itertools.count()
    g = {start: 0.0}
    parent: dict[Cell, Cell] = {}
    heap = [(_octile(start, goal), next(counter), start)]
    closed = set()
    while heap:
        _, _, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            cells = [cur]
            while cells[-1] in parent:
                cells.append(parent[cells[-1]])
            cells.reverse()
            return Path(cells, [grid_map.to_world(c) for c in cells], g[goal] * grid_map.resolution)
        closed.add(cur)
        for nb, step in _neighbors(blocked, cur):
            ng = g[cur] + step
            if ng < g.get(nb, math.inf) - 1e-12:
                g[nb] = ng
                parent[nb] = cur
                heapq.heappush(heap, (ng + _octile(nb, goal), next(counter), nb))
    raise Infeasible(f"no path from {start} to {goal}")


@dataclass(frozen=True)
class DetectorParams:
    jitter_sigma: float = 1.0
    dilation_prob: float = 0.2
    miss_prob: float = 0.1


def perceive_map(truth: GridMap, params: DetectorParams, seed: int) -> GridMap:
    """Simulated obstacle detection on a truth map.

    Obstacles are 8-connected occupied components. Each draws its miss,
    jitter and dilation variates in a fixed order whatever the parameters, so
    raising ``miss_prob`` at a fixed seed only removes more obstacles.
    """
    rng = np.random.default_rng(seed)
    labels, n = ndimage.label(truth.occupancy, structure=np.ones((3, 3), dtype=int))
    out = np.zeros_like(truth.occupancy)
    h, w = out.shape
    for k in range(1, n + 1):
        u_miss = rng.random()
        jitter = rng.normal(0.0, 1.0, 2) * params.jitter_sigma
        u_dil = rng.random()
        if u_miss < params.miss_prob:
            continue
        dr, dc = (int(v) for v in np.rint(jitter))
        comp = np.zeros_like(out)
        rows, cols = np.nonzero(labels == k)
        rows, cols = rows + dr, cols + dc
        keep = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        comp[rows[keep], cols[keep]] = True
        if u_dil < params.dilation_prob:
            comp = ndimage.binary_dilation(comp, structure=np.ones((3, 3), dtype=bool))
        out |= comp
    return GridMap(out, truth.resolution, truth.origin, truth.start, truth.goal)


@dataclass
class PlanFailure:
    reason: str


def _line_cells(a: Cell, b: Cell) -> list[Cell]:
    """Bresenham cells from a to b inclusive."""
    (r0, c0), (r1, c1) = a, b
    cells = []
    dr, dc = abs(r1 - r0), abs(c1 - c0)
    sr, sc = (1 if r1 >= r0 else -1), (1 if c1 >= c0 else -1)
    err = dc - dr
    r, c = r0, c0
    while True:
        cells.append((r, c))
        if (r, c) == (r1, c1):
            return cells
        e2 = 2 * err
        if e2 > -dr:
            err -= dr
            c += sc
        if e2 < dc:
            err += dc
            r += sr


def snap_to_free(grid_map: GridMap, x: float, y: float) -> Cell | None:
    target = grid_map.to_cell(x, y)
    free = np.argwhere(~grid_map.occupancy)
    if free.size == 0:
        return None
    d = (free[:, 0] - target[0]) ** 2 + (free[:, 1] - target[1]) ** 2
    i = int(np.argmin(d))
    return (int(free[i, 0]), int(free[i, 1]))


def straight_path(grid_map: GridMap, start: Cell, goal: Cell) -> Path:
    """Direct line between two cells, ignoring obstacles."""
    cells = _line_cells(start, goal)
    length = math.dist(grid_map.to_world(start), grid_map.to_world(goal))
    return Path(cells, [grid_map.to_world(c) for c in cells], length)


def agent_plan(
    perceived: GridMap,
    start: Cell,
    goal: Cell,
    constitution: Any = None,
    reasoner: Any = None,
    clearance: int | None = None,
) -> Path | PlanFailure:
    """Plan as the motion-planning agent would on its perceived map.

    The deterministic template backend runs A* on the perceived map. Any
    other backend proposes waypoints that go through the safety parser and
    are then snapped to free cells and joined by straight segments.
    """
    from .agent import ReasonerQuery, SafetyLimits, TemplateBackend, BackendFault, validate
    from .topics import default_registry

    if clearance is None:
        clearance = int(constitution.param("clearance_cells", 1)) if constitution is not None else 1
    if reasoner is None or isinstance(reasoner, TemplateBackend):
        try:
            return astar(perceived, start, goal, clearance)
        except Infeasible as exc:
            return PlanFailure(str(exc))

    sx, sy = perceived.to_world(start)
    gx, gy = perceived.to_world(goal)
    query = ReasonerQuery(
        system_text=constitution.render() if constitution is not None else "You are a motion planner.",
        context=(),
        user_content=json.dumps({"map": perceived.to_ascii(), "start": [sx, sy], "goal": [gx, gy]}),
        role="planner",
    )
    try:
        reply = reasoner.infer(query)
    except BackendFault as exc:
        return PlanFailure(f"backend fault: {exc}")
    (x0, x1), (y0, y1) = perceived.bounds()
    limits = SafetyLimits(max_speed=10.0, max_depth=100.0, workspace=((x0, x1), (y0, y1), (0.0, 100.0)))
    verdict = validate(reply.content, default_registry().get("waypoint_list"), limits)
    if verdict is not None:
        return PlanFailure(f"safety parser: {verdict.kind}: {verdict.detail}")
    points = json.loads(reply.content)["waypoints"]
    cells = [start]
    for wp in points:
        cell = snap_to_free(perceived, wp["x"], wp["y"])
        if cell is None:
            return PlanFailure("no free cell to snap to")
        if cell != cells[-1]:
            cells.append(cell)
    if cells[-1] != goal:
        cells.append(goal)
    dense: list[Cell] = [cells[0]]
    for a, b in zip(cells[:-1], cells[1:]):
        for cell in _line_cells(a, b)[1:]:
            if not perceived.free(cell):
                return PlanFailure(f"segment crosses occupied cell {cell}")
            dense.append(cell)
    length = sum(math.dist(perceived.to_world(a), perceived.to_world(b)) for a, b in zip(dense[:-1], dense[1:]))
    return Path(dense, [perceived.to_world(c) for c in dense], length)


@dataclass
class PlanEvaluation:
    success: bool
    final_error: float
    error_delta: float
    collided: bool = False


def swept_collision(path: Path, truth: GridMap, step: float | None = None) -> bool:
    step = step or truth.resolution / 4.0
    pts = path.waypoints
    if len(pts) == 1:
        return truth.occupied_at(*pts[0])
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(math.ceil(math.dist(a, b) / step)))
        for i in range(n + 1):
            s = i / n
            if truth.occupied_at(a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])):
                return True
    return False


def _point_segment_distance(p, a, b) -> float:
    ax, ay = a
    bx, by = b
    dx, dy = bx - ax, by - ay
    denom = dx * dx + dy * dy
    s = 0.0 if denom == 0 else max(0.0, min(1.0, ((p[0] - ax) * dx + (p[1] - ay) * dy) / denom))
    return math.hypot(p[0] - (ax + s * dx), p[1] - (ay + s * dy))


def corridor_deviation(path: Path, baseline: Path) -> float:
    """Mean distance of the path's waypoints from the baseline polyline."""
    base = baseline.waypoints
    segs = list(zip(base[:-1], base[1:])) or [(base[0], base[0])]
    return float(np.mean([min(_point_segment_distance(p, a, b) for a, b in segs) for p in path.waypoints]))


def evaluate(path: Path | PlanFailure | None, truth: GridMap, goal: tuple[float, float], baseline: Path) -> PlanEvaluation:
    base_err = math.dist(baseline.waypoints[-1], goal)
    if path is None or isinstance(path, PlanFailure):
        return PlanEvaluation(False, math.nan, math.nan)
    collided = swept_collision(path, truth)
    final_err = math.dist(path.waypoints[-1], goal)
    delta = (final_err + corridor_deviation(path, baseline)) - base_err
    return PlanEvaluation(not collided and final_err <= SUCCESS_RADIUS, final_err, delta, collided)


EVAL_COLUMNS = ["map_id", "trial", "backend", "success", "final_error_m", "error_delta_m"]


def evaluation_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=EVAL_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: row[k] for k in EVAL_COLUMNS})
    return buf.getvalue()
