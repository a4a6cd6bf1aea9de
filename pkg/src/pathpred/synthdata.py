"""Synthetic t-maze trajectory generator.

Five test conditions over a T-shaped junction (stem at the bottom, arms
left and right). Every trajectory follows a translated copy of the same
centerline: straight stem from its personal start offset, a circular
corner blend of radius corridor_width/2, then the arm, sampled at a fixed
arc-length spacing with iid Gaussian jitter per point. The depth walked
into the arm varies per trajectory by up to ``end_jitter``, so endpoints
fill a segment along each arm rather than a single point, while the step
count stays within a few ticks of the condition's nominal length.

Branch rules per condition:
    tmaze          coin flip, independent of everything observable
    heavy_left     biased coin (left_probability, default 2/3)
    dirbias        coin flip, but the stem is tilted toward the branch
    posbias_gap    start x drawn from two disjoint intervals; the interval
                   decides the branch deterministically
    posbias_nogap  start x uniform over the span; branch is a coin with
                   left probability following a logistic drop across x = 0
"""

import csv
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidSpec

CONDITIONS = ("tmaze", "heavy_left", "dirbias", "posbias_gap", "posbias_nogap")

_MAX_REJECTIONS = 1000


@dataclass
class Trajectory:
    """Ordered 2-D positions at fixed time increments (1 step = 1 tick)."""

    id: int
    points: np.ndarray  # (T, 2)

    @property
    def start_x(self) -> float:
        return float(self.points[0, 0])


@dataclass(frozen=True)
class TMazeSpec:
    condition: str = "tmaze"
    stem_length: float = 6.0
    arm_length: float = 4.5
    corridor_width: float = 1.5
    start_span: float = 1.5
    nominal_speed: float = 0.15
    noise_std: float = 0.05
    left_probability: float = 0.5
    gap_width: float = 1.0
    dir_tilt_deg: float = 10.0
    logistic_scale: float = 0.4
    end_jitter: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise InvalidSpec(f"unknown condition {self.condition!r}")
        for name in ("stem_length", "arm_length", "corridor_width", "start_span", "nominal_speed"):
            if getattr(self, name) <= 0:
                raise InvalidSpec(f"{name} must be positive")
        if self.noise_std < 0:
            raise InvalidSpec("noise_std must be >= 0")
        if not 0.0 <= self.left_probability <= 1.0:
            raise InvalidSpec("left_probability must lie in [0, 1]")
        if self.condition == "posbias_gap" and not 0.0 < self.gap_width < self.start_span:
            raise InvalidSpec("gap_width must lie in (0, start_span)")
        if self.logistic_scale <= 0:
            raise InvalidSpec("logistic_scale must be positive")
        if not 0.0 <= self.end_jitter < self.arm_length / 2.0:
            raise InvalidSpec("end_jitter must lie in [0, arm_length / 2)")

    @classmethod
    def for_condition(cls, condition: str, **overrides) -> "TMazeSpec":
        """Condition defaults: heavy_left biases the coin, posbias widens the span."""
        values = {"condition": condition}
        if condition == "heavy_left":
            values["left_probability"] = 2.0 / 3.0
        if condition in ("posbias_gap", "posbias_nogap"):
            values["start_span"] = 3.0
        values.update(overrides)
        return cls(**values)


@dataclass(frozen=True)
class Box:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def contains(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(points)
        return (
            (pts[:, 0] >= self.xmin)
            & (pts[:, 0] <= self.xmax)
            & (pts[:, 1] >= self.ymin)
            & (pts[:, 1] <= self.ymax)
        )


class _RoundedPath:
    """Polyline with circular blends at interior vertices.

    Arc-length parameterized; pieces alternate straight runs and arcs of
    the blend radius. Vertices where the direction does not change get no
    arc.
    """

    def __init__(self, vertices: np.ndarray, radius: float):
        vertices = np.asarray(vertices, dtype=np.float64)
        self.pieces = []  # (kind, length, data)
        dirs, seg_lens = [], []
        for i in range(len(vertices) - 1):
            delta = vertices[i + 1] - vertices[i]
            seg_len = float(np.linalg.norm(delta))
            dirs.append(delta / seg_len)
            seg_lens.append(seg_len)
        trims = [0.0] * len(vertices)
        arcs = {}
        for i in range(1, len(vertices) - 1):
            cos_t = float(np.clip(np.dot(dirs[i - 1], dirs[i]), -1.0, 1.0))
            turn = math.acos(cos_t)
            if turn < 1e-12:
                continue
            trims[i] = radius * math.tan(turn / 2.0)
            ccw = dirs[i - 1][0] * dirs[i][1] - dirs[i - 1][1] * dirs[i][0] > 0
            arcs[i] = (turn, ccw)
        for i in range(len(vertices) - 1):
            if seg_lens[i] < trims[i] + trims[i + 1] - 1e-12:
                raise InvalidSpec("corner blends overlap; geometry too tight for the radius")
        cursor = vertices[0]
        for i in range(len(vertices) - 1):
            run_end = vertices[i + 1] - dirs[i] * trims[i + 1]
            run_len = float(np.linalg.norm(run_end - cursor))
            if run_len > 1e-12:
                self.pieces.append(("line", run_len, (cursor.copy(), dirs[i].copy())))
            if i + 1 in arcs:
                turn, ccw = arcs[i + 1]
                normal = np.array([-dirs[i][1], dirs[i][0]]) if ccw else np.array([dirs[i][1], -dirs[i][0]])
                center = run_end + normal * radius
                self.pieces.append(("arc", radius * turn, (center, run_end - center, ccw, radius)))
                cursor = vertices[i + 1] + dirs[i + 1] * trims[i + 1]
            else:
                cursor = run_end
        self.total_length = float(sum(p[1] for p in self.pieces))

    def points_at(self, arcs: np.ndarray) -> np.ndarray:
        out = np.empty((arcs.shape[0], 2))
        offset = 0.0
        for idx, (kind, length, data) in enumerate(self.pieces):
            last = idx == len(self.pieces) - 1
            mask = (arcs >= offset - 1e-12) & ((arcs <= offset + length + 1e-12) if last else (arcs < offset + length))
            if mask.any():
                local = arcs[mask] - offset
                if kind == "line":
                    start, direction = data
                    out[mask] = start + np.outer(local, direction)
                else:
                    center, w0, ccw, radius = data
                    phi = local / radius * (1.0 if ccw else -1.0)
                    cos_p, sin_p = np.cos(phi), np.sin(phi)
                    out[mask, 0] = center[0] + cos_p * w0[0] - sin_p * w0[1]
                    out[mask, 1] = center[1] + sin_p * w0[0] + cos_p * w0[1]
            offset += length
        return out


def _centerline(spec: TMazeSpec, offset: float, branch: str, arm_len: float | None = None) -> _RoundedPath:
    """Centerline for one trajectory.

    tmaze / heavy_left: lanes merge into the stem axis well before the
    junction, so positions near the junction carry no branch information.
    dirbias: the whole stem is tilted toward the branch side.
    posbias_*: lanes stay at their start offset all the way up, so the
    absolute position encodes the lane (and for the gap condition, the
    branch).
    """
    if arm_len is None:
        arm_len = spec.arm_length
    sign = -1.0 if branch == "left" else 1.0
    top = spec.stem_length
    if spec.condition == "dirbias":
        tilt = math.radians(spec.dir_tilt_deg)
        junction_x = offset + sign * top * math.tan(tilt)
        vertices = [(offset, 0.0), (junction_x, top), (junction_x + sign * arm_len, top)]
    elif spec.condition in ("posbias_gap", "posbias_nogap"):
        vertices = [(offset, 0.0), (offset, top), (offset + sign * arm_len, top)]
    else:
        merge_y = top / 2.0
        vertices = [(offset, 0.0), (0.0, merge_y), (0.0, top), (sign * arm_len, top)]
    return _RoundedPath(np.array(vertices), spec.corridor_width / 2.0)


def left_branch_probability(spec: TMazeSpec, start_x: float) -> float:
    """Ground-truth probability that a trajectory starting at x turns left."""
    if spec.condition == "heavy_left":
        return spec.left_probability
    if spec.condition == "posbias_gap":
        if start_x <= -spec.gap_width / 2.0:
            return 1.0
        if start_x >= spec.gap_width / 2.0:
            return 0.0
        return 0.5
    if spec.condition == "posbias_nogap":
        return 1.0 / (1.0 + math.exp(start_x / spec.logistic_scale))
    return spec.left_probability if spec.condition == "tmaze" else 0.5


def _draw_start_and_branch(spec: TMazeSpec, rng: np.random.Generator):
    half = spec.start_span / 2.0
    if spec.condition == "posbias_gap":
        left_side = rng.random() < 0.5
        if left_side:
            return rng.uniform(-half, -spec.gap_width / 2.0), "left"
        return rng.uniform(spec.gap_width / 2.0, half), "right"
    offset = rng.uniform(-half, half)
    p_left = left_branch_probability(spec, offset)
    return offset, "left" if rng.random() < p_left else "right"


def _sample_trajectory(spec, traj_id, offset, branch, arm_len, regions, rng) -> Trajectory:
    line = _centerline(spec, offset, branch, arm_len)
    total = line.total_length
    n_pts = int(total // spec.nominal_speed) + 1
    if n_pts < 2:
        raise InvalidSpec("geometry too short for even two points at nominal_speed")
    arcs = np.arange(n_pts) * spec.nominal_speed
    clean = line.points_at(arcs)
    box = regions[0] if branch == "left" else regions[1]
    max_step = 3.0 * spec.nominal_speed
    for _attempt in range(_MAX_REJECTIONS):
        pts = clean + rng.normal(0.0, spec.noise_std, size=clean.shape)
        steps = np.linalg.norm(np.diff(pts, axis=0), axis=1)
        if steps.max() <= max_step and bool(box.contains(pts[-1:])[0]):
            return Trajectory(id=traj_id, points=pts)
    raise RuntimeError("rejection sampling failed; noise_std too large for the geometry")


def endpoint_regions(spec: TMazeSpec) -> tuple:
    """Bounding boxes of the noiseless endpoints, inflated by 4*noise_std.

    Returns (left_box, right_box). Endpoints are the last sampled point of
    each noiseless centerline, swept over the start span (restricted per
    branch for posbias_gap) and over the arm-depth jitter.
    """
    half = spec.start_span / 2.0
    if spec.condition == "posbias_gap":
        supports = {"left": (-half, -spec.gap_width / 2.0), "right": (spec.gap_width / 2.0, half)}
    else:
        supports = {"left": (-half, half), "right": (-half, half)}
    boxes = []
    pad = 4.0 * spec.noise_std
    for branch in ("left", "right"):
        ends = []
        lo, hi = supports[branch]
        for offset in np.linspace(lo, hi, 17):
            for jitter in np.linspace(-spec.end_jitter, spec.end_jitter, 9):
                line = _centerline(spec, float(offset), branch, spec.arm_length + float(jitter))
                n_pts = int(line.total_length // spec.nominal_speed) + 1
                last = line.points_at(np.array([(n_pts - 1) * spec.nominal_speed]))[0]
                ends.append(last)
        ends = np.array(ends)
        boxes.append(
            Box(
                xmin=float(ends[:, 0].min() - pad),
                xmax=float(ends[:, 0].max() + pad),
                ymin=float(ends[:, 1].min() - pad),
                ymax=float(ends[:, 1].max() + pad),
            )
        )
    return boxes[0], boxes[1]


def generate(spec: TMazeSpec, n: int, rng: np.random.Generator) -> list:
    """Generate ``n`` trajectories for the condition.

    Each trajectory uses its own child random stream, so generation is
    order-independent and reproducible. The rare trajectory whose noisy
    endpoint escapes its branch box (or that takes an over-long step) is
    rejection-resampled.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    regions = endpoint_regions(spec)
    streams = rng.spawn(n)
    out = []
    for i, stream in enumerate(streams):
        offset, branch = _draw_start_and_branch(spec, stream)
        arm_len = spec.arm_length + stream.uniform(-spec.end_jitter, spec.end_jitter)
        out.append(_sample_trajectory(spec, i, offset, branch, arm_len, regions, stream))
    return out


def branch_of(traj: Trajectory, regions: tuple) -> str:
    """Classify a trajectory by which endpoint box holds its last point."""
    if bool(regions[0].contains(traj.points[-1:])[0]):
        return "left"
    if bool(regions[1].contains(traj.points[-1:])[0]):
        return "right"
    return "none"


def select_evaluation_trajectories(dataset: list, count: int) -> list:
    """Pick ``count`` trajectories whose start x best matches an even grid.

    Greedy nearest assignment over the grid (each trajectory used once);
    the result is sorted by start x.
    """
    if count > len(dataset):
        raise ValueError("count exceeds dataset size")
    starts = np.array([t.start_x for t in dataset])
    lo, hi = float(starts.min()), float(starts.max())
    grid = np.linspace(lo, hi, count) if count > 1 else np.array([(lo + hi) / 2.0])
    available = np.ones(len(dataset), dtype=bool)
    chosen = []
    for target in grid:
        idx_avail = np.flatnonzero(available)
        best = idx_avail[np.argmin(np.abs(starts[idx_avail] - target))]
        available[best] = False
        chosen.append(dataset[best])
    chosen.sort(key=lambda t: t.start_x)
    return chosen


def write_dataset_csv(trajectories: list, path):
    """CSV rows: traj_id,step,x,y (meters, 6 decimal places)."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["traj_id", "step", "x", "y"])
        for traj in trajectories:
            for step, (x, y) in enumerate(traj.points):
                writer.writerow([traj.id, step, f"{x:.6f}", f"{y:.6f}"])


def read_dataset_csv(path) -> list:
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            rows.setdefault(int(row["traj_id"]), []).append(
                (int(row["step"]), float(row["x"]), float(row["y"]))
            )
    out = []
    for traj_id in sorted(rows):
        pts = sorted(rows[traj_id])
        out.append(Trajectory(id=traj_id, points=np.array([[x, y] for _, x, y in pts])))
    return out


def write_spec_json(spec: TMazeSpec, path, extra: dict | None = None):
    """Sidecar metadata recording the full generator spec."""
    payload = asdict(spec)
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_spec_json(path) -> TMazeSpec:
    with open(path) as fh:
        payload = json.load(fh)
    fields = {k: payload[k] for k in TMazeSpec.__dataclass_fields__ if k in payload}
    return TMazeSpec(**fields)
