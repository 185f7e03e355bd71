"""Twin demonstration synthesis by keyframe-anchored retargeting.

A single seed demonstration is split at its gripper transitions into
approach / grasp / transport / release keyframes. New demonstrations for
sampled initial and goal configurations are produced by composing the
object poses with the grasp offset to get new boundary end-effector
poses, retargeting each inter-keyframe segment independently, and
re-timing the result so every per-step delta respects the environment's
action limits. Every emitted demo must replay to success in a zero-gap
environment; generate_dataset enforces that gate with bounded
resampling.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import (
    DEFAULT_GRASP_OFFSET,
    Action,
    EnvConfig,
    InitConfig,
    PlanarPickEnv,
    RegionSpec,
    region_of,
    sample_init_in_cell,
)
from .geom import (
    DEGENERATE_SEED_TOL,
    DegenerateSeedError,
    EEState,
    Pose,
    Provenance,
    Trajectory,
    format_record,
    interp_angle,
    nearest_equivalent_angle,
    pose_compose,
    read_trajectory,
    retarget_trajectory,
    wrap_angle,
)


class MalformedSeedError(ValueError):
    """Seed demonstration lacks the required gripper transitions."""


class SynthesisInfeasibleError(RuntimeError):
    """Replay gate failed repeatedly for a requested cell."""

    def __init__(self, cell: tuple[int, int], attempts: int):
        super().__init__(
            f"could not synthesize a replayable demo for cell {cell} in {attempts} attempts"
        )
        self.cell = cell


class Phase(enum.Enum):
    PRE_GRASP = "pre_grasp"
    GRASP = "grasp"
    TRANSPORT = "transport"
    RELEASE = "release"


@dataclass(frozen=True)
class Keyframe:
    index: int
    ee_pose: Pose
    gripper: int
    phase: Phase


@dataclass(frozen=True)
class GraspSpec:
    """Object-frame to gripper-frame offset used for all grasps."""

    grasp_offset: Pose = DEFAULT_GRASP_OFFSET


@dataclass
class Demo:
    """A demonstration trajectory together with the episode it solves."""

    trajectory: Trajectory
    init: InitConfig
    cell: tuple[int, int] | None = None


def extract_keyframes(seed: Trajectory) -> list[Keyframe]:
    """Keyframes at trajectory start, the step before the gripper closes,
    the close step, and the open step, in canonical phase order."""
    grippers = [st.gripper for st in seed.states]
    close_idx = next(
        (i for i in range(1, len(grippers)) if grippers[i - 1] == 0 and grippers[i] == 1),
        None,
    )
    if close_idx is None:
        raise MalformedSeedError("seed has no gripper close transition")
    open_idx = next(
        (
            i
            for i in range(close_idx + 1, len(grippers))
            if grippers[i - 1] == 1 and grippers[i] == 0
        ),
        None,
    )
    if open_idx is None:
        raise MalformedSeedError("seed has no gripper open transition after closing")
    if close_idx - 1 <= 0:
        raise MalformedSeedError("seed closes its gripper on the first step")

    def kf(i: int, phase: Phase) -> Keyframe:
        st = seed.states[i]
        return Keyframe(i, st.pose, st.gripper, phase)

    return [
        kf(0, Phase.PRE_GRASP),
        kf(close_idx - 1, Phase.GRASP),
        kf(close_idx, Phase.TRANSPORT),
        kf(open_idx, Phase.RELEASE),
    ]


def grasp_pose_for(object_pose: Pose, spec: GraspSpec) -> Pose:
    """End-effector pose grasping an object at object_pose."""
    return pose_compose(object_pose, spec.grasp_offset)


def _deltas_within_limits(states: list[EEState], cfg: EnvConfig) -> bool:
    for prev, cur in zip(states, states[1:]):
        if (
            abs(cur.pose.x - prev.pose.x) > cfg.max_step_xy
            or abs(cur.pose.y - prev.pose.y) > cfg.max_step_xy
            or abs(wrap_angle(cur.pose.theta - prev.pose.theta)) > cfg.max_step_theta
        ):
            return False
    return True


def _resample_uniform(states: list[EEState], cfg: EnvConfig) -> list[EEState]:
    """Re-time a segment at uniform arc length so deltas fit the limits.

    The path and boundary states are preserved; interior states carry the
    segment's interior gripper value (transitions only occur at segment
    boundaries). Headings interpolate shortest-arc between the boundary
    headings, matching the retargeted heading profile.
    """
    pts = [st.pose for st in states]
    edge = [
        math.hypot(b.x - a.x, b.y - a.y) for a, b in zip(pts, pts[1:])
    ]
    total = sum(edge)
    rot = abs(wrap_angle(pts[-1].theta - pts[0].theta))
    m = max(
        len(states) - 1,
        math.ceil(total / cfg.max_step_xy - 1e-12),
        math.ceil(rot / cfg.max_step_theta - 1e-12),
    )
    out = [states[0]]
    interior_grip = states[0].gripper
    cum = 0.0
    i = 0
    for k in range(1, m):
        target = total * k / m
        while i < len(edge) - 1 and cum + edge[i] < target:
            cum += edge[i]
            i += 1
        frac = 0.0 if edge[i] == 0.0 else (target - cum) / edge[i]
        a, b = pts[i], pts[i + 1]
        pose = Pose(
            a.x + frac * (b.x - a.x),
            a.y + frac * (b.y - a.y),
            interp_angle(pts[0].theta, pts[-1].theta, k / m),
        )
        out.append(EEState(pose, interior_grip))
    out.append(states[-1])
    return out


def _map_segment(
    states: list[EEState], new_start: Pose, new_end: Pose, cfg: EnvConfig
) -> list[EEState]:
    """Retarget one inter-keyframe segment onto new boundary poses.

    A stationary segment (coincident old endpoints) can only be mapped to
    coincident new endpoints: every state is pinned to the new pose. A
    stretched segment whose scaled deltas exceed the action limits is
    re-timed at uniform arc length; an unstretched one keeps its states,
    so retargeting a seed onto itself is exact.
    """
    old_start, old_end = states[0].pose, states[-1].pose
    old_len = math.hypot(old_end.x - old_start.x, old_end.y - old_start.y)
    if old_len < DEGENERATE_SEED_TOL:
        new_len = math.hypot(new_end.x - new_start.x, new_end.y - new_start.y)
        if new_len >= DEGENERATE_SEED_TOL:
            raise DegenerateSeedError(
                "stationary seed segment cannot be stretched onto distinct endpoints"
            )
        return [EEState(new_end, st.gripper) for st in states]
    seg = Trajectory(states, Provenance.TWIN_SYNTH)
    mapped = retarget_trajectory(seg, new_start, new_end).states
    if _deltas_within_limits(mapped, cfg):
        return mapped
    return _resample_uniform(mapped, cfg)


def synthesize_demo(
    seed: Trajectory,
    grasp: GraspSpec,
    new_init: InitConfig,
    cfg: EnvConfig,
) -> Trajectory:
    """One synthetic demonstration for a new object/goal configuration.

    Boundary poses come from composing the new object and goal poses with
    the grasp offset; the approach and transport segments are retargeted
    independently between keyframes so the grasp-phase geometry survives
    exactly. Trailing states after the release keyframe ride along by a
    rigid translation.
    """
    if not (cfg.contains(new_init.object_pose) and cfg.contains(new_init.goal_pose)):
        from .env import OutOfBoundsError

        raise OutOfBoundsError("new init outside workspace")
    kfs = extract_keyframes(seed)
    start_kf, grasp_kf, lift_kf, release_kf = kfs
    # Snap object orientations to the symmetry-equivalent nearest the
    # previous stage before composing the boundary gripper poses, so the
    # synthesized arm never rotates farther than one symmetry sector.
    sym = cfg.object_symmetry
    obj = new_init.object_pose
    obj_s = Pose(
        obj.x,
        obj.y,
        nearest_equivalent_angle(obj.theta, cfg.home.theta - grasp.grasp_offset.theta, sym),
    )
    goal = new_init.goal_pose
    goal_s = Pose(
        goal.x, goal.y, nearest_equivalent_angle(goal.theta, obj_s.theta, sym)
    )
    new_grasp = grasp_pose_for(obj_s, grasp)
    new_release = grasp_pose_for(goal_s, grasp)

    states = seed.states
    approach = _map_segment(states[: grasp_kf.index + 1], states[0].pose, new_grasp, cfg)
    closing = _map_segment(
        states[grasp_kf.index : lift_kf.index + 1], new_grasp, new_grasp, cfg
    )
    transport = _map_segment(
        states[lift_kf.index : release_kf.index + 1], new_grasp, new_release, cfg
    )
    out = approach + closing[1:] + transport[1:]
    n_trail = len(states) - 1 - release_kf.index
    if n_trail > 0:
        # Trailing withdrawal is regenerated from the new release pose by
        # the same rule that produced the seed's, so the identity
        # retarget stays exact.
        out.extend(retreat_states(cfg, new_release, n_trail))
    return Trajectory(out, Provenance.TWIN_SYNTH, seed.task)


def retreat_states(cfg: EnvConfig, from_pose: Pose, n: int) -> list[EEState]:
    """Deterministic post-release withdrawal: n open-gripper states easing
    back toward the home pose. Never replayed (the episode ends at the
    release), but cloned so the policy learns to keep the gripper open
    around a placed object."""
    home = cfg.home
    out: list[EEState] = []
    cur = from_pose
    for _ in range(n):
        dx, dy = home.x - cur.x, home.y - cur.y
        d = math.hypot(dx, dy)
        step = min(0.8 * cfg.max_step_xy, d)
        if d > 1e-12:
            cur = Pose(cur.x + dx / d * step, cur.y + dy / d * step, cur.theta)
        out.append(EEState(cur, 0))
    return out


def actions_from_trajectory(traj: Trajectory) -> list[Action]:
    """Recover the per-step delta actions that reproduce a trajectory."""
    acts = []
    for prev, cur in zip(traj.states, traj.states[1:]):
        acts.append(
            Action(
                cur.pose.x - prev.pose.x,
                cur.pose.y - prev.pose.y,
                wrap_angle(cur.pose.theta - prev.pose.theta),
                cur.gripper,
            )
        )
    return acts


def replay_demo(cfg: EnvConfig, demo: Demo) -> bool:
    """Replay a demo's action sequence from its init; True on reward 1.

    The gate contract assumes a zero-gap config; callers pass one.
    """
    env = PlanarPickEnv(cfg)
    env.reset(demo.init)
    for act in actions_from_trajectory(demo.trajectory):
        _, reward, done = env.step(act)
        if done:
            return reward == 1.0
    return False


def generate_dataset(
    seed_demo: Demo,
    grasp: GraspSpec,
    cell_counts: dict[tuple[int, int], int],
    cfg: EnvConfig,
    spec: RegionSpec,
    rng: np.random.Generator,
    max_attempts: int = 10,
) -> list[Demo]:
    """Synthesize gated demos matching the requested per-cell counts.

    Inits are sampled uniformly within each requested cell; a demo that
    fails the zero-gap replay gate is resampled up to max_attempts times
    before the cell is declared infeasible. Output order is sorted by
    (cell, sample index) and depends only on the rng seed.
    """
    out: list[Demo] = []
    for cell in sorted(cell_counts):
        n = cell_counts[cell]
        if n < 0:
            raise ValueError(f"negative count for cell {cell}")
        if cell not in spec.region_a_cells and cell not in spec.region_b_cells:
            raise ValueError(f"cell {cell} outside the {spec.rows}x{spec.cols} grid")
        for _ in range(n):
            demo = None
            for _attempt in range(max_attempts):
                init = sample_init_in_cell(cfg, spec, cell, rng)
                candidate = Demo(
                    synthesize_demo(seed_demo.trajectory, grasp, init, cfg), init, cell
                )
                if replay_demo(cfg, candidate):
                    demo = candidate
                    break
            if demo is None:
                raise SynthesisInfeasibleError(cell, max_attempts)
            out.append(demo)
    return out


# --- dataset directory layout -------------------------------------------------


def demo_header_extra(demo: Demo) -> dict:
    o, g = demo.init.object_pose, demo.init.goal_pose
    extra = {
        "object": [o.x, o.y, o.theta],
        "goal": [g.x, g.y, g.theta],
    }
    if demo.cell is not None:
        extra["cell"] = list(demo.cell)
    return extra


def write_dataset(
    path: str | Path,
    demos: list[Demo],
    rng_seed: int,
    grasp: GraspSpec,
) -> None:
    """Write demos as trajectory files plus a manifest with per-cell counts."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    counts: dict[str, int] = {}
    for i, demo in enumerate(demos):
        key = "none" if demo.cell is None else f"{demo.cell[0]},{demo.cell[1]}"
        counts[key] = counts.get(key, 0) + 1
        lines = [_demo_header(demo)]
        lines.extend(
            format_record(t, st) for t, st in enumerate(demo.trajectory.states)
        )
        (root / f"demo_{i:04d}.traj").write_text("\n".join(lines) + "\n")
    manifest = {
        "n_demos": len(demos),
        "counts_per_cell": dict(sorted(counts.items())),
        "rng_seed": rng_seed,
        "grasp_offset": [
            grasp.grasp_offset.x,
            grasp.grasp_offset.y,
            grasp.grasp_offset.theta,
        ],
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _demo_header(demo: Demo) -> str:
    from .geom import format_header

    return format_header(demo.trajectory.provenance, demo.trajectory.task, demo_header_extra(demo))


def read_dataset(path: str | Path) -> list[Demo]:
    root = Path(path)
    demos = []
    for f in sorted(root.glob("demo_*.traj")):
        traj, header = read_trajectory(f)
        init = InitConfig(Pose(*header["object"]), Pose(*header["goal"]))
        cell = tuple(header["cell"]) if "cell" in header else None
        demos.append(Demo(traj, init, cell))
    return demos


def record_expert_demo(
    cfg: EnvConfig,
    init: InitConfig,
    grasp: GraspSpec | None = None,
    provenance: Provenance = Provenance.HUMAN_SEED,
    close_tol: float = 0.0,
    place_tol: float = 0.0,
    n_retreat: int = 6,
    action_noise: float = 0.0,
    rng: np.random.Generator | None = None,
    start_closed: bool = False,
    fumble_wander: int = 0,
    first_drop_tol: float = 0.0,
) -> Demo:
    """Roll the scripted expert in a zero-gap env and record the trajectory.

    Stands in for a human teleoperated demonstration. close_tol lets the
    demonstrator grasp off-center; action_noise jitters the executed
    motion (as teleoperation does) while the expert's feedback corrects
    it, widening the state coverage of the recorded data; n_retreat
    withdrawal states are appended after the release. start_closed
    records a fumble recovery: the trajectory opens on a closed empty
    gripper, which the expert releases before approaching (the fumble
    itself is not part of the recording). first_drop_tol > the success
    tolerance records a sloppy first placement that the demonstrator then
    corrects by re-grasping and nudging. Raises if the episode does not
    end in success.
    """
    from .env import Action, ScriptedExpert

    grasp = grasp or GraspSpec()
    env = PlanarPickEnv(cfg)
    state = env.reset(init)
    expert = ScriptedExpert(cfg, grasp.grasp_offset, close_tol=close_tol, place_tol=place_tol)
    if first_drop_tol > 0.0:
        expert = ScriptedExpert(
            cfg, grasp.grasp_offset, close_tol=close_tol, place_tol=first_drop_tol
        )
        fine_expert = ScriptedExpert(
            cfg, grasp.grasp_offset, close_tol=close_tol, place_tol=place_tol
        )
    if start_closed:
        # Unrecorded preamble: the operator drifts a little, then fumbles
        # the gripper shut. The recording starts at the fumbled state.
        for _ in range(fumble_wander if rng is not None else 0):
            state, _r, _d = env.step(
                Action(
                    rng.uniform(-cfg.max_step_xy, cfg.max_step_xy),
                    rng.uniform(-cfg.max_step_xy, cfg.max_step_xy),
                    rng.uniform(-cfg.max_step_theta, cfg.max_step_theta),
                    0,
                )
            )
        state, _r, _d = env.step(Action(0.0, 0.0, 0.0, 1))
        if env.truth.holding:
            raise ExpertEpisodeFailed("fumble drifted onto the object")
    states = [state.ee]
    success = False
    was_holding = False
    for _ in range(cfg.max_steps):
        if first_drop_tol > 0.0 and was_holding and not env.truth.holding:
            expert = fine_expert  # after the sloppy drop, place properly
        was_holding = env.truth.holding
        act = expert.act(env.truth)
        if action_noise > 0.0 and rng is not None:
            # Jitter only in transit; the settling phase near a waypoint
            # stays clean so grasp and release flips keep a full-step
            # margin from their neighbors.
            wp = expert.waypoint(env.truth)
            dist = math.hypot(wp.x - env.truth.ee.pose.x, wp.y - env.truth.ee.pose.y)
            if dist > expert.slow_radius:
                act = Action(
                    act.dx + rng.normal(0.0, action_noise * cfg.max_step_xy),
                    act.dy + rng.normal(0.0, action_noise * cfg.max_step_xy),
                    act.dtheta + rng.normal(0.0, action_noise * cfg.max_step_theta),
                    act.grip,
                )
        obs, reward, done = env.step(act)
        states.append(obs.ee)
        if done:
            success = reward == 1.0
            break
    if not success:
        raise ExpertEpisodeFailed("scripted expert failed to complete the episode")
    if n_retreat > 0:
        states.extend(retreat_states(cfg, states[-1].pose, n_retreat))
    return Demo(Trajectory(states, provenance), init)


class ExpertEpisodeFailed(RuntimeError):
    pass


def record_real_demos(
    cfg: EnvConfig,
    spec: RegionSpec,
    cell_counts: dict[tuple[int, int], int],
    rng: np.random.Generator,
    grasp: GraspSpec | None = None,
    close_jitter: float = 0.02,
    place_frac: float = 0.5,
    action_noise: float = 0.2,
    fumble_frac: float = 0.25,
    sloppy_frac: float = 0.0,
    max_attempts: int = 10,
) -> list[Demo]:
    """Expert-teleoperated demonstrations at sampled per-cell inits.

    Grasp sloppiness and motion jitter are drawn per demo, giving the
    cloning data varied attach offsets (with matching compensated release
    poses) and a tube of corrected states around the nominal paths; a
    fraction of recordings open on a fumbled closed gripper that the
    demonstrator releases first.
    """
    demos = []
    for cell in sorted(cell_counts):
        for _ in range(cell_counts[cell]):
            demo = None
            for _attempt in range(max_attempts):
                init = sample_init_in_cell(cfg, spec, cell, rng)
                tol = float(rng.uniform(0.2, 1.0)) * close_jitter
                home = cfg.home
                clear_of_home = (
                    math.hypot(init.object_pose.x - home.x, init.object_pose.y - home.y)
                    > cfg.grasp_radius + 0.02
                )
                fumble = bool(rng.uniform() < fumble_frac) and clear_of_home
                sloppy = bool(rng.uniform() < sloppy_frac)
                drop_tol = (
                    float(rng.uniform(1.2, 2.5)) * cfg.success_pos_tol if sloppy else 0.0
                )
                try:
                    demo = record_expert_demo(
                        cfg, init, grasp, Provenance.HUMAN_SEED,
                        close_tol=tol, place_tol=place_frac * cfg.success_pos_tol,
                        action_noise=action_noise, rng=rng, start_closed=fumble,
                        fumble_wander=int(rng.integers(0, 9)) if fumble else 0,
                        first_drop_tol=drop_tol,
                    )
                    break
                except ExpertEpisodeFailed:
                    continue
            if demo is None:
                raise ExpertEpisodeFailed(f"no successful demo for cell {cell}")
            demo.cell = cell
            demos.append(demo)
    return demos
