"""Planar rigid-body geometry and trajectory retargeting.

Poses are SE(2) triples (x, y, theta) with theta kept in (-pi, pi].
Trajectories are ordered end-effector states with a binary gripper
channel and a provenance label. Retargeting maps a seed trajectory onto
new start/end poses with a 2-D similarity transform (rotation + uniform
scale + translation) on positions and shortest-arc interpolation on
headings, parameterized by normalized arc length.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

TWO_PI = 2.0 * math.pi

# Seed trajectories whose endpoints are closer than this cannot anchor a
# similarity transform; far above float noise, far below any real motion.
DEGENERATE_SEED_TOL = 1e-6


class DegenerateSeedError(ValueError):
    """Seed trajectory endpoints coincide; the retarget map is underdetermined."""


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    t = math.remainder(theta, TWO_PI)
    if t <= -math.pi:
        t += TWO_PI
    return t


def _check_finite(*values: float) -> None:
    for v in values:
        if not math.isfinite(v):
            raise ValueError(f"non-finite pose component: {v!r}")


@dataclass(frozen=True)
class Pose:
    """Planar rigid pose. theta is normalized to (-pi, pi] on construction."""

    x: float
    y: float
    theta: float

    def __post_init__(self) -> None:
        _check_finite(self.x, self.y, self.theta)
        object.__setattr__(self, "theta", wrap_angle(self.theta))

    @staticmethod
    def identity() -> "Pose":
        return Pose(0.0, 0.0, 0.0)


IDENTITY = Pose.identity()


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Compose two planar poses a*b (apply b in a's frame)."""
    c, s = math.cos(a.theta), math.sin(a.theta)
    return Pose(
        a.x + c * b.x - s * b.y,
        a.y + s * b.x + c * b.y,
        a.theta + b.theta,
    )


def pose_inverse(p: Pose) -> Pose:
    """Inverse pose: pose_compose(p, pose_inverse(p)) is the identity."""
    c, s = math.cos(p.theta), math.sin(p.theta)
    return Pose(-(c * p.x + s * p.y), -(-s * p.x + c * p.y), -p.theta)


def pose_between(a: Pose, b: Pose) -> Pose:
    """Relative pose of b expressed in a's frame: inverse(a) * b."""
    return pose_compose(pose_inverse(a), b)


def interp_angle(a: float, b: float, s: float) -> float:
    """Shortest-arc interpolation from a toward b at fraction s in [0, 1]."""
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"interpolation fraction must be in [0, 1], got {s}")
    return wrap_angle(a + s * wrap_angle(b - a))


def symmetric_angle_error(delta: float, symmetry: int = 1) -> float:
    """Smallest angular error to any of `symmetry` equivalent orientations.

    An object with n-fold rotational symmetry (a hexagonal block has
    n = 6) is aligned when the error modulo 2*pi/n vanishes.
    """
    if symmetry < 1:
        raise ValueError("symmetry must be >= 1")
    period = TWO_PI / symmetry
    d = math.remainder(delta, period)
    return abs(d)


def nearest_equivalent_angle(target: float, reference: float, symmetry: int = 1) -> float:
    """The orientation equivalent to target (mod 2*pi/symmetry) closest to
    reference."""
    if symmetry < 1:
        raise ValueError("symmetry must be >= 1")
    period = TWO_PI / symmetry
    return wrap_angle(target + round((reference - target) / period) * period)


class Provenance(str, enum.Enum):
    HUMAN_SEED = "human_seed"
    TWIN_SYNTH = "twin_synth"
    TWIN_RL = "twin_rl"
    REAL_RL = "real_rl"
    INTERVENTION = "intervention"


@dataclass(frozen=True)
class EEState:
    """End-effector pose plus binary gripper channel (0 open, 1 closed)."""

    pose: Pose
    gripper: int

    def __post_init__(self) -> None:
        if self.gripper not in (0, 1):
            raise ValueError(f"gripper must be 0 or 1, got {self.gripper!r}")


@dataclass
class Trajectory:
    """Ordered end-effector states with a provenance label."""

    states: list[EEState]
    provenance: Provenance
    task: str = "pick_insert"

    def __post_init__(self) -> None:
        if len(self.states) < 2:
            raise ValueError("trajectory needs at least 2 states")

    def __len__(self) -> int:
        return len(self.states)

    @property
    def start(self) -> EEState:
        return self.states[0]

    @property
    def end(self) -> EEState:
        return self.states[-1]


def _arc_length_params(states: Sequence[EEState]) -> list[float]:
    """Normalized cumulative translational arc length per state.

    A stationary prefix/suffix keeps its parameter flat; a fully
    stationary trajectory is rejected upstream via the endpoint check.
    """
    cum = [0.0]
    for prev, cur in zip(states, states[1:]):
        step = math.hypot(cur.pose.x - prev.pose.x, cur.pose.y - prev.pose.y)
        cum.append(cum[-1] + step)
    total = cum[-1]
    if total <= 0.0:
        # Coincident endpoints are caught before this; a zero-length path
        # with distinct endpoints cannot occur.
        return [0.0] * len(cum)
    return [c / total for c in cum]


def retarget_trajectory(seed: Trajectory, new_start: Pose, new_end: Pose) -> Trajectory:
    """Map a seed trajectory onto new boundary poses.

    Positions go through the unique plane similarity taking the seed's
    (start, end) positions onto (new_start, new_end); treating points as
    complex numbers z, the map is z -> alpha*z + beta. Headings are
    interpolated shortest-arc between the new boundary headings at each
    state's normalized arc-length parameter. Gripper values are copied.
    """
    p0 = complex(seed.start.pose.x, seed.start.pose.y)
    p1 = complex(seed.end.pose.x, seed.end.pose.y)
    if abs(p1 - p0) < DEGENERATE_SEED_TOL:
        raise DegenerateSeedError(
            f"seed endpoints coincide within {DEGENERATE_SEED_TOL} m; cannot retarget"
        )
    q0 = complex(new_start.x, new_start.y)
    q1 = complex(new_end.x, new_end.y)
    alpha = (q1 - q0) / (p1 - p0)
    beta = q0 - alpha * p0

    params = _arc_length_params(seed.states)
    out: list[EEState] = []
    for st, s in zip(seed.states, params):
        z = alpha * complex(st.pose.x, st.pose.y) + beta
        theta = interp_angle(new_start.theta, new_end.theta, s)
        out.append(EEState(Pose(z.real, z.imag, theta), st.gripper))
    # Pin the boundary states to the requested poses exactly; interior
    # states already satisfy the map to float precision.
    out[0] = EEState(new_start, seed.start.gripper)
    out[-1] = EEState(new_end, seed.end.gripper)
    return Trajectory(out, seed.provenance, seed.task)


# --- trajectory file format -------------------------------------------------
#
# Line 1: JSON header with provenance and task tag (plus optional extras
# such as the episode's init poses). Following lines: one JSON record per
# step with fields t, x, y, theta, gripper (and optionally r, done for
# rollout logs). Floats are serialized with 17 significant digits, which
# round-trips doubles bit-exactly.


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def format_header(provenance: Provenance, task: str, extra: dict | None = None) -> str:
    head: dict = {"provenance": provenance.value, "task": task}
    if extra:
        head.update(extra)
    return json.dumps(head, separators=(", ", ": "))


def format_record(
    t: int, state: EEState, reward: float | None = None, done: bool | None = None
) -> str:
    parts = [
        f'"t": {int(t)}',
        f'"x": {_fmt(state.pose.x)}',
        f'"y": {_fmt(state.pose.y)}',
        f'"theta": {_fmt(state.pose.theta)}',
        f'"gripper": {state.gripper}',
    ]
    if reward is not None:
        parts.append(f'"r": {_fmt(reward)}')
    if done is not None:
        parts.append(f'"done": {"true" if done else "false"}')
    return "{" + ", ".join(parts) + "}"


def write_trajectory(path: str | Path, traj: Trajectory, extra: dict | None = None) -> None:
    lines = [format_header(traj.provenance, traj.task, extra)]
    lines.extend(format_record(t, st) for t, st in enumerate(traj.states))
    Path(path).write_text("\n".join(lines) + "\n")


def read_trajectory(path: str | Path) -> tuple[Trajectory, dict]:
    """Read a trajectory file; returns (trajectory, header dict)."""
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"empty trajectory file: {path}")
    header = json.loads(lines[0])
    states = []
    for line in lines[1:]:
        if not line.strip():
            continue
        rec = json.loads(line)
        states.append(EEState(Pose(rec["x"], rec["y"], rec["theta"]), int(rec["gripper"])))
    return (
        Trajectory(states, Provenance(header["provenance"]), header.get("task", "")),
        header,
    )
