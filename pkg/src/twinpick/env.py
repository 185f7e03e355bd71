"""Paired "real"/"twin" planar pick-and-insert environments.

The task: grasp a planar object and release it at a goal pose. Reward is
a sparse success indicator paid once, when the gripper opens with the
object inside the position/angle tolerances of the goal. The "real"
environment always runs with zero dynamics gap; a twin is the same
environment with a GapParams installed (observation noise, action scale
bias, grasp radius offset), so a zero-gap twin is bit-identical to the
real one under matching seeds.

The goal-position space is discretized into a grid of half-open cells.
Episodes are assigned to the cell containing the object's center at task
completion; the grid carries the in-distribution (A) / out-of-distribution
(B) split.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .geom import (
    TWO_PI,
    EEState,
    Pose,
    nearest_equivalent_angle,
    pose_between,
    pose_compose,
    pose_inverse,
    symmetric_angle_error,
    wrap_angle,
)

OBS_DIM = 11
ACTION_DIM = 4

# Analytic stand-in for a learned grasp predictor: a fixed small offset
# from the object frame to the gripper frame. Must stay within the
# grasp radius so closing at the offset pose attaches the object.
DEFAULT_GRASP_OFFSET = Pose(0.0, 0.02, 0.0)


class OutOfBoundsError(ValueError):
    """A pose that must lie inside the workspace does not."""


class EpisodeFinishedError(RuntimeError):
    """step() was called on an episode that already terminated."""


@dataclass(frozen=True)
class GapParams:
    """Twin/real dynamics mismatch. All-zero means dynamics-identical."""

    obs_noise_sigma: float = 0.0      # gaussian noise on observed object pose
    action_scale_bias: float = 0.0    # executed deltas scale by (1 + bias)
    grasp_radius_offset: float = 0.0  # additive offset on the attach radius

    def is_zero(self) -> bool:
        return (
            self.obs_noise_sigma == 0.0
            and self.action_scale_bias == 0.0
            and self.grasp_radius_offset == 0.0
        )


# Default twin/real mismatch used when a twin is built: chosen, not
# fitted; the harness sweeps around these values.
DEFAULT_TWIN_GAP = GapParams(
    obs_noise_sigma=0.005, action_scale_bias=0.05, grasp_radius_offset=-0.01
)


@dataclass(frozen=True)
class EnvConfig:
    workspace: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0)  # x0, y0, x1, y1
    grasp_radius: float = 0.06
    success_pos_tol: float = 0.03
    success_ang_tol: float = 0.2
    max_steps: int = 60
    max_step_xy: float = 0.05
    max_step_theta: float = 0.2
    object_symmetry: int = 6  # n-fold rotational symmetry (hexagonal block)
    # Where the object starts each episode (the block is picked from a
    # consistent staging area; episodes are classified by where it is
    # placed, not where it starts).
    pickup_zone: tuple[float, float, float, float] = (0.35, 0.15, 0.65, 0.35)
    gap: GapParams = field(default_factory=GapParams)
    seed: int = 0

    def __post_init__(self) -> None:
        x0, y0, x1, y1 = self.workspace
        side = min(x1 - x0, y1 - y0)
        if not (self.success_pos_tol < self.grasp_radius < side):
            raise ValueError("need success_pos_tol < grasp_radius < min workspace side")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if min(self.max_step_xy, self.max_step_theta) <= 0:
            raise ValueError("action limits must be strictly positive")

    @property
    def home(self) -> Pose:
        """Fixed end-effector reset pose: workspace center, zero heading."""
        x0, y0, x1, y1 = self.workspace
        return Pose(0.5 * (x0 + x1), 0.5 * (y0 + y1), 0.0)

    def contains(self, p: Pose) -> bool:
        x0, y0, x1, y1 = self.workspace
        return x0 <= p.x <= x1 and y0 <= p.y <= y1


@dataclass(frozen=True)
class Action:
    dx: float
    dy: float
    dtheta: float
    grip: int  # desired gripper state: 0 open, 1 closed


@dataclass(frozen=True)
class InitConfig:
    object_pose: Pose
    goal_pose: Pose


@dataclass
class State:
    """Environment state snapshot as observed by the agent.

    While holding, object_pose is rigidly attached to ee.pose via
    grasp_offset (the relative pose frozen at attach time).
    """

    ee: EEState
    object_pose: Pose
    holding: bool
    goal_pose: Pose
    step_count: int
    grasp_offset: Pose | None = None


def make_twin(real_cfg: EnvConfig, gap: GapParams, seed: int | None = None) -> EnvConfig:
    """Copy of real_cfg with the gap installed and an independent seed stream."""
    if seed is None:
        seed = int(np.random.SeedSequence(real_cfg.seed).spawn(1)[0].generate_state(1)[0])
    return replace(real_cfg, gap=gap, seed=seed)


@dataclass(frozen=True)
class RegionSpec:
    """Grid over goal-position space with the A/B cell split.

    Cells are half-open [lo, hi) in each axis, except that the top/right
    workspace border belongs to the last row/column.
    """

    rows: int
    cols: int
    workspace: tuple[float, float, float, float]
    region_a_cells: frozenset[tuple[int, int]]
    region_b_cells: frozenset[tuple[int, int]]

    def __post_init__(self) -> None:
        all_cells = {(r, c) for r in range(self.rows) for c in range(self.cols)}
        if self.region_a_cells & self.region_b_cells:
            raise ValueError("regions A and B must be disjoint")
        if self.region_a_cells | self.region_b_cells != all_cells:
            raise ValueError("regions A and B must cover the grid")

    @staticmethod
    def default(
        rows: int = 4,
        cols: int = 5,
        workspace: tuple[float, float, float, float] = (0.0, 0.0, 1.0, 1.0),
        a_cols: int | None = None,
    ) -> "RegionSpec":
        """A = left half of the columns (floor on odd widths), B = the rest."""
        if a_cols is None:
            a_cols = cols // 2
        a = frozenset((r, c) for r in range(rows) for c in range(cols) if c < a_cols)
        b = frozenset((r, c) for r in range(rows) for c in range(cols) if c >= a_cols)
        return RegionSpec(rows, cols, workspace, a, b)

    @property
    def cells(self) -> list[tuple[int, int]]:
        return [(r, c) for r in range(self.rows) for c in range(self.cols)]

    def cell_bounds(self, cell: tuple[int, int]) -> tuple[float, float, float, float]:
        r, c = cell
        x0, y0, x1, y1 = self.workspace
        w = (x1 - x0) / self.cols
        h = (y1 - y0) / self.rows
        return (x0 + c * w, y0 + r * h, x0 + (c + 1) * w, y0 + (r + 1) * h)

    def label(self, cell: tuple[int, int]) -> str:
        return "A" if cell in self.region_a_cells else "B"


def region_of(final_object_pose: Pose, spec: RegionSpec) -> tuple[tuple[int, int], str]:
    """Containing grid cell and its A/B label for a pose inside the workspace."""
    x0, y0, x1, y1 = spec.workspace
    p = final_object_pose
    if not (x0 <= p.x <= x1 and y0 <= p.y <= y1):
        raise OutOfBoundsError(f"pose ({p.x}, {p.y}) outside workspace {spec.workspace}")
    col = min(int((p.x - x0) / (x1 - x0) * spec.cols), spec.cols - 1)
    row = min(int((p.y - y0) / (y1 - y0) * spec.rows), spec.rows - 1)
    cell = (row, col)
    return cell, spec.label(cell)


def sample_init_in_cell(
    cfg: EnvConfig,
    spec: RegionSpec,
    cell: tuple[int, int],
    rng: np.random.Generator,
    goal_margin: float | None = None,
) -> InitConfig:
    """Canonical per-cell initial configuration.

    The goal position is uniform within the cell, inset by goal_margin
    (default success_pos_tol) so a placement within tolerance cannot leak
    into a neighboring cell; the object position is uniform within the
    pickup zone. Both headings are uniform.
    """
    if goal_margin is None:
        goal_margin = cfg.success_pos_tol
    gx0, gy0, gx1, gy1 = spec.cell_bounds(cell)
    gx = rng.uniform(gx0 + goal_margin, gx1 - goal_margin)
    gy = rng.uniform(gy0 + goal_margin, gy1 - goal_margin)
    gth = rng.uniform(-math.pi, math.pi)
    px0, py0, px1, py1 = cfg.pickup_zone
    ox = rng.uniform(px0, px1)
    oy = rng.uniform(py0, py1)
    oth = rng.uniform(-math.pi, math.pi)
    return InitConfig(Pose(ox, oy, oth), Pose(gx, gy, gth))


def observation(state: State, symmetry: int = 1) -> np.ndarray:
    """11-dim observation: ee pose, gripper, object and goal poses relative
    to the ee frame, holding flag.

    For a rotationally symmetric object the relative orientations are
    only defined modulo the symmetry sector, so they are reduced to the
    nearest-equivalent representative (the signed rotation still needed).
    """
    rel_obj = pose_between(state.ee.pose, state.object_pose)
    rel_goal = pose_between(state.ee.pose, state.goal_pose)
    period = TWO_PI / symmetry
    return np.array(
        [
            state.ee.pose.x,
            state.ee.pose.y,
            state.ee.pose.theta,
            float(state.ee.gripper),
            rel_obj.x,
            rel_obj.y,
            math.remainder(rel_obj.theta, period),
            rel_goal.x,
            rel_goal.y,
            math.remainder(rel_goal.theta, period),
            1.0 if state.holding else 0.0,
        ],
        dtype=np.float64,
    )


def observation_norm(cfg: EnvConfig) -> tuple[np.ndarray, np.ndarray]:
    """Fixed per-dimension observation statistics derived from the task
    geometry (not from data, so every training stage normalizes alike)."""
    x0, y0, x1, y1 = cfg.workspace
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    # Absolute position is scaled up relative to its physical range; the
    # support of the demonstrations in absolute coordinates is part of
    # what a policy learns here, and these statistics keep that signal.
    sx, sy = 0.15 * (x1 - x0), 0.15 * (y1 - y0)
    rel = 0.35 * max(x1 - x0, y1 - y0)
    ang = max(0.35, math.pi / cfg.object_symmetry)
    mean = np.array([cx, cy, 0.0, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5])
    std = np.array([sx, sy, 0.5, 0.5, rel, rel, ang, rel, rel, ang, 0.5])
    return mean, std


def action_to_vector(cfg: EnvConfig, a: Action, ee_theta: float) -> np.ndarray:
    """Learner-space action vector.

    Translation is expressed in the end-effector frame (matching the
    relative observation encoding, so the cloned feedback law is nearly
    linear) and normalized by the per-step limits; gripper maps to
    -1 (open) / +1 (closed).
    """
    c, s = math.cos(ee_theta), math.sin(ee_theta)
    return np.array(
        [
            (c * a.dx + s * a.dy) / cfg.max_step_xy,
            (-s * a.dx + c * a.dy) / cfg.max_step_xy,
            a.dtheta / cfg.max_step_theta,
            1.0 if a.grip else -1.0,
        ],
        dtype=np.float64,
    )


def vector_to_action(cfg: EnvConfig, v: np.ndarray, ee_theta: float) -> Action:
    """Clip a learner action vector and map it into an executable Action.

    The translational channels are clipped in the end-effector frame,
    rotated to the world frame, and re-clipped by the per-axis limits in
    step(). The gripper channel is continuous during learning and
    thresholded at zero at execution.
    """
    ax = float(np.clip(v[0], -1.0, 1.0)) * cfg.max_step_xy
    ay = float(np.clip(v[1], -1.0, 1.0)) * cfg.max_step_xy
    c, s = math.cos(ee_theta), math.sin(ee_theta)
    return Action(
        c * ax - s * ay,
        s * ax + c * ay,
        float(np.clip(v[2], -1.0, 1.0)) * cfg.max_step_theta,
        1 if v[3] > 0.0 else 0,
    )


class PlanarPickEnv:
    """Single-owner mutable environment instance.

    Ground truth is kept internally; the State returned by reset/step has
    the object pose perturbed by the configured observation noise. All
    randomness flows from one generator seeded by cfg.seed (or an
    explicit generator), so identical (seed, init, action sequence)
    produce identical trajectories.
    """

    def __init__(self, cfg: EnvConfig, rng: np.random.Generator | None = None):
        self.cfg = cfg
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self._truth: State | None = None
        self._done = True

    @property
    def truth(self) -> State:
        """Ground-truth state (no observation noise). Oracle use only."""
        if self._truth is None:
            raise RuntimeError("environment not reset")
        return self._truth

    @property
    def done(self) -> bool:
        return self._done

    def reset(self, init: InitConfig) -> State:
        if not self.cfg.contains(init.object_pose) or not self.cfg.contains(init.goal_pose):
            raise OutOfBoundsError(f"init poses must lie inside workspace {self.cfg.workspace}")
        self._truth = State(
            ee=EEState(self.cfg.home, 0),
            object_pose=init.object_pose,
            holding=False,
            goal_pose=init.goal_pose,
            step_count=0,
            grasp_offset=None,
        )
        self._done = False
        return self._observe()

    def step(self, action: Action) -> tuple[State, float, bool]:
        if self._done or self._truth is None:
            raise EpisodeFinishedError("episode already finished; call reset()")
        cfg = self.cfg
        st = self._truth

        scale = 1.0 + cfg.gap.action_scale_bias
        dx = float(np.clip(action.dx, -cfg.max_step_xy, cfg.max_step_xy)) * scale
        dy = float(np.clip(action.dy, -cfg.max_step_xy, cfg.max_step_xy)) * scale
        dth = float(np.clip(action.dtheta, -cfg.max_step_theta, cfg.max_step_theta)) * scale

        x0, y0, x1, y1 = cfg.workspace
        ee_pose = Pose(
            min(max(st.ee.pose.x + dx, x0), x1),
            min(max(st.ee.pose.y + dy, y0), y1),
            wrap_angle(st.ee.pose.theta + dth),
        )

        holding = st.holding
        grasp_offset = st.grasp_offset
        object_pose = st.object_pose
        if holding:
            object_pose = pose_compose(ee_pose, grasp_offset)

        grip = 1 if action.grip else 0
        reward = 0.0
        if grip == 1 and st.ee.gripper == 0 and not holding:
            attach_radius = cfg.grasp_radius + cfg.gap.grasp_radius_offset
            dist = math.hypot(object_pose.x - ee_pose.x, object_pose.y - ee_pose.y)
            if dist <= attach_radius:
                holding = True
                grasp_offset = pose_between(ee_pose, object_pose)
        elif grip == 0 and st.ee.gripper == 1 and holding:
            holding = False
            grasp_offset = None
            pos_err = math.hypot(
                object_pose.x - st.goal_pose.x, object_pose.y - st.goal_pose.y
            )
            ang_err = symmetric_angle_error(
                object_pose.theta - st.goal_pose.theta, cfg.object_symmetry
            )
            if pos_err <= cfg.success_pos_tol and ang_err <= cfg.success_ang_tol:
                reward = 1.0

        step_count = st.step_count + 1
        done = reward == 1.0 or step_count >= cfg.max_steps
        self._truth = State(
            ee=EEState(ee_pose, grip),
            object_pose=object_pose,
            holding=holding,
            goal_pose=st.goal_pose,
            step_count=step_count,
            grasp_offset=grasp_offset,
        )
        self._done = done
        return self._observe(), reward, done

    def _observe(self) -> State:
        st = self._truth
        sigma = self.cfg.gap.obs_noise_sigma
        obj = st.object_pose
        if sigma > 0.0:
            noise = self.rng.normal(0.0, sigma, size=3)
            obj = Pose(obj.x + noise[0], obj.y + noise[1], obj.theta + noise[2])
        return State(
            ee=st.ee,
            object_pose=obj,
            holding=st.holding,
            goal_pose=st.goal_pose,
            step_count=st.step_count,
            grasp_offset=st.grasp_offset,
        )


class ScriptedExpert:
    """Stateless waypoint expert: approach, grasp, carry, release.

    Pure feedback on the (observed) state, so it recovers from arbitrary
    mid-episode situations — including re-opening a closed empty gripper
    and compensating for a sloppy off-center grasp. Arrival tolerances
    adapt to the configured observation noise so the expert still settles
    and releases inside the success window on a noisy twin.
    """

    def __init__(
        self,
        cfg: EnvConfig,
        grasp_offset: Pose | None = None,
        close_tol: float | None = None,
        place_tol: float | None = None,
    ):
        self.cfg = cfg
        self.grasp_offset = grasp_offset if grasp_offset is not None else DEFAULT_GRASP_OFFSET
        self.pos_eps = min(max(1e-7, 3.0 * cfg.gap.obs_noise_sigma), 0.5 * cfg.success_pos_tol)
        self.ang_eps = min(max(1e-7, 3.0 * cfg.gap.obs_noise_sigma), 0.5 * cfg.success_ang_tol)
        # How close the approach must get before closing the gripper, and
        # how precisely the carry must align before opening; a
        # demonstrator may grasp off-center (the carry waypoint then
        # compensates with the actually attached offset) and releases
        # once safely inside the success window.
        self.close_tol = max(self.pos_eps, close_tol or 0.0)
        self.place_tol = max(self.pos_eps, place_tol or 0.0)
        # Within this range of a waypoint, recorded demos keep the
        # motion clean of injected jitter.
        self.slow_radius = 2.0 * cfg.max_step_xy

    def waypoint(self, state: State) -> Pose:
        """Current end-effector target.

        The object's target orientation is snapped to its nearest
        symmetry-equivalent before composing, so the arm never rotates
        farther than one symmetry sector and the composed position stays
        exact.
        """
        sym = self.cfg.object_symmetry
        if state.holding:
            rel = pose_between(state.ee.pose, state.object_pose)
            goal = state.goal_pose
            target_obj = Pose(
                goal.x,
                goal.y,
                nearest_equivalent_angle(goal.theta, state.object_pose.theta, sym),
            )
            return pose_compose(target_obj, pose_inverse(rel))
        obj = state.object_pose
        snapped = Pose(
            obj.x,
            obj.y,
            nearest_equivalent_angle(
                obj.theta, state.ee.pose.theta - self.grasp_offset.theta, sym
            ),
        )
        return pose_compose(snapped, self.grasp_offset)

    def act(self, state: State) -> Action:
        cfg = self.cfg
        if not state.holding and state.ee.gripper == 1:
            return Action(0.0, 0.0, 0.0, 0)  # empty closed gripper: open first
        target = self.waypoint(state)
        dx = target.x - state.ee.pose.x
        dy = target.y - state.ee.pose.y
        dth = wrap_angle(target.theta - state.ee.pose.theta)
        dist = math.hypot(dx, dy)
        pos_tol = self.place_tol if state.holding else self.close_tol
        arrived = dist <= pos_tol and abs(dth) <= self.ang_eps
        if arrived:
            return Action(0.0, 0.0, 0.0, 0 if state.holding else 1)
        tol = self.place_tol if state.holding else self.close_tol
        if tol > 2.0 * self.pos_eps:
            # Stop half a tolerance short of the anchor and trip the
            # gripper from the standoff; a trigger demonstrated at a
            # consistent radius is reproducible, one at a geometric point
            # is not.
            shrink = max(0.0, 1.0 - 0.5 * tol / dist)
            dx *= shrink
            dy *= shrink
        # Spread translation and rotation over the same number of steps so
        # both arrive together; legs stay uniformly spaced and the final
        # step lands exactly on the (possibly shrunk) waypoint.
        n = max(
            1,
            math.ceil(abs(dx) / cfg.max_step_xy - 1e-12),
            math.ceil(abs(dy) / cfg.max_step_xy - 1e-12),
            math.ceil(abs(dth) / cfg.max_step_theta - 1e-12),
        )
        grip = 1 if state.holding else 0
        return Action(dx / n, dy / n, dth / n, grip)
