"""Three-stage training pipeline.

Stage I: behavior cloning on mixed real + twin demonstrations.
Stage II: online RL in parallel twin environments, filling a twin replay
buffer with full episodes (successes, failures, recoveries).
Stage III: single real-environment RL seeded from the twin buffer, with
episode resets prioritized toward grid cells whose twin-estimated
success rate falls below a proficiency threshold, and a pluggable
intervener (scripted oracle or UI bridge) whose overrides are stored as
intervention-sourced transitions.

Policy-gradient data separation: stage II batches touch only demo pairs
and twin rollouts; stage III batches touch only real rollouts, the
transferred twin buffer, and interventions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .buffer import ReplayBuffer, Transition
from .env import (
    Action,
    EnvConfig,
    GapParams,
    InitConfig,
    PlanarPickEnv,
    RegionSpec,
    ScriptedExpert,
    State,
    action_to_vector,
    observation,
    observation_norm,
    sample_init_in_cell,
    vector_to_action,
)
from .geom import Pose, Provenance, wrap_angle
from .nets import (
    Adam,
    Critic,
    GaussianPolicy,
    LossWeights,
    TransitionBatch,
    il_loss_grad,
    joint_loss_grad,
    polyak_update,
    td_loss_grad,
)
from .synth import Demo

Cell = tuple[int, int]


class EmptyDatasetError(ValueError):
    """SFT was asked to train on an empty demo list."""


class InsufficientEpisodesError(RuntimeError):
    """The twin buffer cannot satisfy the requested transfer filter."""

    def __init__(self, wanted: str, n_success: int, n_fail: int):
        super().__init__(
            f"twin buffer cannot satisfy {wanted}: {n_success} success / {n_fail} failed episodes available"
        )
        self.n_success = n_success
        self.n_fail = n_fail


# --- success maps and reset targeting ------------------------------------


@dataclass
class SuccessMap:
    rows: int
    cols: int
    trials: dict[Cell, int]
    successes: dict[Cell, int]
    checkpoint_id: str = ""

    def sr(self, cell: Cell) -> float:
        k = self.trials.get(cell, 0)
        if k < 1:
            raise KeyError(f"cell {cell} was not evaluated")
        return self.successes.get(cell, 0) / k

    def mean_sr(self, cells=None) -> float:
        cells = list(self.trials) if cells is None else list(cells)
        return float(np.mean([self.sr(c) for c in cells]))


@dataclass(frozen=True)
class TargetSet:
    cells: frozenset[Cell]
    tau: float


def build_target_set(success_map: SuccessMap, tau: float) -> TargetSet:
    """Cells whose empirical success rate is strictly below tau."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must be in [0, 1]")
    cells = frozenset(c for c in success_map.trials if success_map.sr(c) < tau)
    return TargetSet(cells, tau)


def sample_reset(
    ts: TargetSet | None,
    eps_uniform: float,
    cfg: EnvConfig,
    spec: RegionSpec,
    rng: np.random.Generator,
    cells: list[Cell] | None = None,
) -> InitConfig:
    """Reset prioritized toward the target set.

    With probability 1 - eps_uniform a cell is drawn uniformly from the
    target set (from all allowed cells when the set is empty), otherwise
    uniformly from all allowed cells; the init is then sampled uniformly
    within the chosen cell.
    """
    allowed = spec.cells if cells is None else list(cells)
    targeted = [] if ts is None else [c for c in sorted(ts.cells) if c in set(allowed)]
    if targeted and rng.uniform() >= eps_uniform:
        cell = targeted[rng.integers(len(targeted))]
    else:
        cell = allowed[rng.integers(len(allowed))]
    return sample_init_in_cell(cfg, spec, cell, rng)


# --- actors ---------------------------------------------------------------


class PolicyActor:
    """Acts with the policy mean, optionally with exploration noise."""

    def __init__(self, policy: GaussianPolicy, rng: np.random.Generator | None = None):
        self.policy = policy
        self.rng = rng

    def __call__(self, obs: np.ndarray, state: State) -> np.ndarray:
        if self.rng is None:
            return self.policy.mean(obs[None])[0]
        return self.policy.sample(obs, self.rng)


class ExpertActor:
    """Scripted oracle wrapped in the actor interface."""

    def __init__(self, cfg: EnvConfig, grasp_offset: Pose | None = None):
        self.cfg = cfg
        self.expert = ScriptedExpert(cfg, grasp_offset)

    def __call__(self, obs: np.ndarray, state: State) -> np.ndarray:
        return action_to_vector(self.cfg, self.expert.act(state), state.ee.pose.theta)


class RandomActor:
    def __init__(self, cfg: EnvConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng

    def __call__(self, obs: np.ndarray, state: State) -> np.ndarray:
        return np.array(
            [
                self.rng.uniform(-self.cfg.max_step_xy, self.cfg.max_step_xy),
                self.rng.uniform(-self.cfg.max_step_xy, self.cfg.max_step_xy),
                self.rng.uniform(-self.cfg.max_step_theta, self.cfg.max_step_theta),
                self.rng.uniform(-1.0, 1.0),
            ]
        )


def rollout_episode(
    env: PlanarPickEnv, init: InitConfig, actor, max_steps: int | None = None
) -> tuple[bool, int]:
    """Run one episode; returns (success, steps)."""
    state = env.reset(init)
    steps = 0
    while not env.done:
        vec = actor(observation(state, env.cfg.object_symmetry), state)
        state, reward, done = env.step(vector_to_action(env.cfg, vec, state.ee.pose.theta))
        steps += 1
        if done:
            return reward == 1.0, steps
    return False, steps


def estimate_success_map(
    actor,
    twin_cfg: EnvConfig,
    spec: RegionSpec,
    rollouts_per_cell: int,
    seed: int,
    cells: list[Cell] | None = None,
    checkpoint_id: str = "",
) -> SuccessMap:
    """Per-cell empirical success rate of an actor, K rollouts per cell."""
    if rollouts_per_cell < 1:
        raise ValueError("rollouts_per_cell must be >= 1")
    cells = spec.cells if cells is None else list(cells)
    trials: dict[Cell, int] = {}
    successes: dict[Cell, int] = {}
    children = np.random.SeedSequence(seed).spawn(len(cells))
    for cell, child in zip(cells, children):
        rng = np.random.default_rng(child)
        env = PlanarPickEnv(replace(twin_cfg, seed=0), rng=np.random.default_rng(child.spawn(1)[0]))
        wins = 0
        for _ in range(rollouts_per_cell):
            init = sample_init_in_cell(twin_cfg, spec, cell, rng)
            ok, _steps = rollout_episode(env, init, actor)
            wins += int(ok)
        trials[cell] = rollouts_per_cell
        successes[cell] = wins
    return SuccessMap(spec.rows, spec.cols, trials, successes, checkpoint_id)


def eval_policy_grid(
    policy: GaussianPolicy,
    cfg: EnvConfig,
    spec: RegionSpec,
    rollouts_per_cell: int,
    seed: int,
    cells: list[Cell] | None = None,
) -> SuccessMap:
    """Deterministic (mean-action) grid evaluation in a zero-gap env."""
    return estimate_success_map(
        PolicyActor(policy), cfg, spec, rollouts_per_cell, seed, cells
    )


# --- interveners -----------------------------------------------------------


@dataclass
class InterventionEvent:
    episode_id: int
    start: int
    end: int
    actions: list[np.ndarray]
    source: str  # "oracle" or "human_ui"

    def __post_init__(self) -> None:
        if not self.start < self.end:
            raise ValueError("intervention must span at least one step")


@dataclass(frozen=True)
class TriggerConfig:
    """Oracle takeover rule.

    Fires when the end effector sits farther than delta from the expert's
    current waypoint for t_stall consecutive steps without making at
    least min_progress of approach per step, or when three quarters of
    the horizon passes without the task done (covering both failure
    shapes: never grasping, and holding without managing the release).
    """

    delta: float = 0.15
    t_stall: int = 8
    min_progress: float = 0.002
    holding_frac: float = 0.75


class NeverIntervene:
    source = "none"

    def begin_episode(self, episode_id: int) -> None:
        pass

    def __call__(self, state: State, policy_action: np.ndarray, t: int) -> np.ndarray | None:
        return None


class OracleIntervener:
    """Scripted-expert takeover driven by the stall/no-grasp trigger."""

    source = "oracle"

    def __init__(
        self,
        cfg: EnvConfig,
        trigger: TriggerConfig = TriggerConfig(),
        grasp_offset: Pose | None = None,
    ):
        self.cfg = cfg
        self.trigger = trigger
        self.expert = ScriptedExpert(cfg, grasp_offset)
        self._stall = 0
        self._prev_dist: float | None = None
        self.triggered = False

    def begin_episode(self, episode_id: int) -> None:
        self._stall = 0
        self._prev_dist = None
        self.triggered = False

    def __call__(self, state: State, policy_action: np.ndarray, t: int) -> np.ndarray | None:
        trig = self.trigger
        if not self.triggered:
            wp = self.expert.waypoint(state)
            dist = math.hypot(wp.x - state.ee.pose.x, wp.y - state.ee.pose.y)
            stalled = (
                dist > trig.delta
                and self._prev_dist is not None
                and dist >= self._prev_dist - trig.min_progress
            )
            self._stall = self._stall + 1 if stalled else 0
            self._prev_dist = dist
            if self._stall >= trig.t_stall:
                self.triggered = True
            elif state.step_count > trig.holding_frac * self.cfg.max_steps:
                self.triggered = True
        if self.triggered:
            return action_to_vector(self.cfg, self.expert.act(state), state.ee.pose.theta)
        return None


# --- learner ---------------------------------------------------------------


@dataclass
class Learner:
    """Joint-objective learner: TD critic updates plus the combined
    imitation + Q policy objective, with soft target updates.

    The imitation weight can anneal down (and the Q weight ramp up) over
    the run, shifting from offline anchoring toward online improvement.
    """

    policy: GaussianPolicy
    critic: Critic
    w: LossWeights
    lr: float = 3e-4
    eta_ramp_frac: float = 0.0
    beta_end_frac: float = 1.0
    total_updates_hint: int = 0
    policy_opt: Adam = None
    critic_opt: Adam = None
    updates: int = 0

    def __post_init__(self) -> None:
        if self.policy_opt is None:
            self.policy_opt = Adam(self.policy.n_params, lr=self.lr)
        if self.critic_opt is None:
            self.critic_opt = Adam(self.critic.q_net.n_params, lr=self.lr)

    def eta_scale(self) -> float:
        if self.eta_ramp_frac <= 0.0 or self.total_updates_hint <= 0:
            return 1.0
        ramp = self.eta_ramp_frac * self.total_updates_hint
        return min(1.0, self.updates / ramp)

    def beta_scale(self) -> float:
        if self.beta_end_frac >= 1.0 or self.total_updates_hint <= 0:
            return 1.0
        prog = min(1.0, self.updates / self.total_updates_hint)
        return 1.0 + (self.beta_end_frac - 1.0) * prog

    def update(
        self,
        il_batch: TransitionBatch | None,
        rl_batch: TransitionBatch | None,
        rng: np.random.Generator,
    ) -> dict:
        stats = {}
        if rl_batch is not None:
            eps_next = rng.standard_normal(rl_batch.a.shape)
            td, grad = td_loss_grad(self.critic, rl_batch, self.policy, self.w, eps_next)
            self.critic.q_net.set_flat(self.critic_opt.step(self.critic.q_net.get_flat(), grad))
            polyak_update(self.critic)
            stats["td"] = td
        eta_scale = self.eta_scale()
        beta_scale = self.beta_scale()
        use_q = rl_batch is not None and self.w.eta * eta_scale != 0.0
        eps = rng.standard_normal(rl_batch.a.shape) if use_q else None
        w = self.w if beta_scale == 1.0 else replace(self.w, beta=self.w.beta * beta_scale)
        loss, grad = joint_loss_grad(
            self.policy,
            self.critic,
            w,
            il_batch.s if il_batch is not None else None,
            il_batch.a if il_batch is not None else None,
            rl_batch.s if use_q else None,
            eps,
            eta_scale,
        )
        self.policy.set_flat(self.policy_opt.step(self.policy.get_flat(), grad))
        self.policy.clamp_log_std()
        self.updates += 1
        stats["joint"] = loss
        return stats


# --- stage I: SFT -----------------------------------------------------------


def demo_pairs(cfg: EnvConfig, demo: Demo) -> tuple[np.ndarray, np.ndarray]:
    """(observation, action-vector) pairs extracted from a demonstration.

    Object pose and holding flag are reconstructed by walking the
    trajectory's gripper transitions with the environment's attach
    kinematics (any number of grasp/release cycles), which matches an
    environment replay exactly and also covers post-release withdrawal
    states an episode replay would cut off.
    """
    from .geom import pose_between, pose_compose

    states = demo.trajectory.states
    obs, acts = [], []
    obj = demo.init.object_pose
    holding = False
    attach = None
    for t, (cur, nxt) in enumerate(zip(states, states[1:])):
        state = State(cur, obj, holding, demo.init.goal_pose, t)
        obs.append(observation(state, cfg.object_symmetry))
        acts.append(
            action_to_vector(
                cfg,
                Action(
                    nxt.pose.x - cur.pose.x,
                    nxt.pose.y - cur.pose.y,
                    wrap_angle(nxt.pose.theta - cur.pose.theta),
                    nxt.gripper,
                ),
                cur.pose.theta,
            )
        )
        if nxt.gripper == 1 and cur.gripper == 0 and not holding:
            dist = math.hypot(obj.x - nxt.pose.x, obj.y - nxt.pose.y)
            if dist <= cfg.grasp_radius:
                holding = True
                attach = pose_between(nxt.pose, obj)
        elif nxt.gripper == 0 and cur.gripper == 1 and holding:
            obj = pose_compose(nxt.pose, attach)
            holding = False
            attach = None
        if holding:
            obj = pose_compose(nxt.pose, attach)
    return np.array(obs), np.array(acts)


def demos_to_buffer(cfg: EnvConfig, demos: list[Demo], buf: ReplayBuffer) -> None:
    """Load demo pairs into a buffer as source-tagged imitation data."""
    for demo in demos:
        obs, acts = demo_pairs(cfg, demo)
        for s, a in zip(obs, acts):
            buf.push(Transition(s, a, 0.0, s, False, demo.trajectory.provenance))


def run_sft(
    demos: list[Demo],
    policy: GaussianPolicy,
    cfg: EnvConfig,
    epochs: int,
    lr: float = 1e-3,
    batch_size: int = 128,
    seed: int = 0,
    lr_decay: float = 0.1,
    weight_decay: float = 0.0,
) -> tuple[GaussianPolicy, list[float]]:
    """Behavior cloning on the merged demo set; returns per-epoch losses.

    The learning rate decays by a cosine schedule to lr_decay * lr over
    the run; decoupled weight decay applies to the mean net only (never
    the log-std). Observation statistics are frozen from this dataset.
    """
    if not demos:
        raise EmptyDatasetError("cannot run SFT on an empty dataset")
    pairs = [demo_pairs(cfg, d) for d in demos]
    S = np.concatenate([p[0] for p in pairs])
    A = np.concatenate([p[1] for p in pairs])
    policy.set_obs_norm(*observation_norm(cfg))
    rng = np.random.default_rng(seed)
    opt = Adam(policy.n_params, lr=lr)
    n_mean = policy.mean_net.n_params
    curve = []
    n = len(S)
    avg_flat = None
    avg_from = int(0.7 * epochs)
    for epoch in range(epochs):
        if epochs > 1:
            frac = epoch / (epochs - 1)
            opt.lr = lr * (lr_decay + (1.0 - lr_decay) * 0.5 * (1.0 + math.cos(math.pi * frac)))
        order = rng.permutation(n)
        losses = []
        for lo in range(0, n, batch_size):
            idx = order[lo : lo + batch_size]
            loss, grad = il_loss_grad(policy, S[idx], A[idx])
            flat = opt.step(policy.get_flat(), grad)
            if weight_decay > 0.0:
                flat[:n_mean] *= 1.0 - opt.lr * weight_decay
            policy.set_flat(flat)
            policy.clamp_log_std()
            losses.append(loss)
        curve.append(float(np.mean(losses)))
        if epoch >= avg_from:
            flat = policy.get_flat()
            avg_flat = flat if avg_flat is None else avg_flat + flat
    if avg_flat is not None:
        # Average the tail of the run; flattens minibatch jitter in the
        # final policy.
        policy.set_flat(avg_flat / (epochs - avg_from))
        policy.clamp_log_std()
    return policy, curve


# --- stage II: twin online RL ------------------------------------------------


@dataclass
class EpisodeRecord:
    episode_id: int
    cell: Cell
    init: InitConfig
    success: bool
    steps: int
    transitions: list[Transition]
    intervention_steps: int = 0
    region: str = ""


@dataclass
class TwinRLResult:
    policy: GaussianPolicy
    critic: Critic
    buffer: ReplayBuffer
    episodes: list[EpisodeRecord]
    eval_curve: list[tuple[int, float]]


def run_twin_rl(
    policy: GaussianPolicy,
    critic: Critic,
    twin_cfg: EnvConfig,
    spec: RegionSpec,
    demos: list[Demo],
    n_parallel: int,
    total_env_steps: int,
    w: LossWeights,
    seed: int = 0,
    lr: float = 3e-4,
    batch_size: int = 64,
    utd: int = 1,
    publish_every: int = 50,
    eta_ramp_frac: float = 0.0,
    beta_end_frac: float = 1.0,
    echo_successes: bool = True,
    eval_every: int = 0,
    eval_cfg: EnvConfig | None = None,
    cells: list[Cell] | None = None,
    buffer_capacity: int = 200_000,
) -> TwinRLResult:
    """Parallel twin rollouts with one learner update per collected step.

    Workers own one environment and one rng stream each and are stepped
    round-robin in worker order; the acting policy is a checkpoint copy
    refreshed every publish_every updates, so runs are reproducible for a
    fixed worker-stream assignment. Successful twin episodes join the
    demo-side imitation anchor (half of each imitation batch stays on
    the demonstrations).
    """
    if n_parallel < 1:
        raise ValueError("n_parallel must be >= 1")
    root = np.random.SeedSequence(seed)
    env_seeds, reset_seeds, act_seed, batch_seed, eval_seed = root.spawn(5)
    il_buf = ReplayBuffer(buffer_capacity)
    demos_to_buffer(replace(twin_cfg, gap=GapParams()), demos, il_buf)
    rl_buf = ReplayBuffer(buffer_capacity)
    learner = Learner(
        policy, critic, w, lr=lr, eta_ramp_frac=eta_ramp_frac,
        beta_end_frac=beta_end_frac, total_updates_hint=total_env_steps * utd,
    )
    act_rng = np.random.default_rng(act_seed)
    batch_rng = np.random.default_rng(batch_seed)

    workers = []
    for i, (es, rs) in enumerate(zip(env_seeds.spawn(n_parallel), reset_seeds.spawn(n_parallel))):
        env = PlanarPickEnv(twin_cfg, rng=np.random.default_rng(es))
        reset_rng = np.random.default_rng(rs)
        workers.append({"env": env, "reset_rng": reset_rng, "pending": [], "init": None, "cell": None})

    allowed = spec.cells if cells is None else list(cells)
    episodes: list[EpisodeRecord] = []
    eval_curve: list[tuple[int, float]] = []
    acting = policy.copy()
    steps = 0
    next_eval = eval_every if eval_every else None

    def reset_worker(wk) -> State:
        cell = allowed[wk["reset_rng"].integers(len(allowed))]
        init = sample_init_in_cell(twin_cfg, spec, cell, wk["reset_rng"])
        wk["init"], wk["cell"], wk["pending"] = init, cell, []
        return wk["env"].reset(init)

    states = [reset_worker(wk) for wk in workers]

    while steps < total_env_steps:
        for wi, wk in enumerate(workers):
            if steps >= total_env_steps:
                break
            obs = observation(states[wi], twin_cfg.object_symmetry)
            vec = acting.sample(obs, act_rng)
            action = vector_to_action(twin_cfg, vec, states[wi].ee.pose.theta)
            exec_vec = action_to_vector(twin_cfg, action, states[wi].ee.pose.theta)
            nxt, reward, done = wk["env"].step(action)
            tr = Transition(obs, exec_vec, reward, observation(nxt, twin_cfg.object_symmetry), done, Provenance.TWIN_RL)
            wk["pending"].append(tr)
            rl_buf.push(tr)
            states[wi] = nxt
            steps += 1

            for _ in range(utd):
                il_batch = (
                    il_buf.sample(batch_size, batch_rng, _twin_il_mix(il_buf))
                    if len(il_buf)
                    else None
                )
                rl_batch = rl_buf.sample(batch_size, batch_rng) if len(rl_buf) else None
                learner.update(il_batch, rl_batch, batch_rng)
                if learner.updates % publish_every == 0:
                    acting = policy.copy()

            if done:
                if reward == 1.0 and echo_successes:
                    for tr in wk["pending"]:
                        il_buf.push(tr)
                episodes.append(
                    EpisodeRecord(
                        len(episodes),
                        wk["cell"],
                        wk["init"],
                        reward == 1.0,
                        len(wk["pending"]),
                        list(wk["pending"]),
                        region=spec.label(wk["cell"]),
                    )
                )
                states[wi] = reset_worker(wk)

            if next_eval is not None and steps >= next_eval:
                cfg_eval = eval_cfg if eval_cfg is not None else twin_cfg
                sm = eval_policy_grid(
                    policy, cfg_eval, spec, 1, _child_seed(eval_seed, len(eval_curve)), allowed
                )
                eval_curve.append((steps, sm.mean_sr(allowed)))
                next_eval += eval_every

    return TwinRLResult(policy, critic, rl_buf, episodes, eval_curve)


def _twin_il_mix(il_buf: ReplayBuffer) -> dict[Provenance, float] | None:
    """Demonstrations keep half of each twin-stage imitation batch; the
    other half samples echoed successful twin rollouts."""
    counts = il_buf.counts()
    demo = {s: n for s, n in counts.items() if s in (Provenance.HUMAN_SEED, Provenance.TWIN_SYNTH) and n > 0}
    c_echo = counts.get(Provenance.TWIN_RL, 0)
    if c_echo == 0 or not demo:
        return None
    total = sum(demo.values())
    mix = {Provenance.TWIN_RL: 0.5}
    for s, n in demo.items():
        mix[s] = 0.5 * n / total
    return mix


def _child_seed(seedseq: np.random.SeedSequence, i: int) -> int:
    return int(np.random.SeedSequence((int(seedseq.generate_state(1)[0]), i)).generate_state(1)[0])


# --- twin -> real buffer transfer ---------------------------------------------


def transfer_buffer(
    episodes: list[EpisodeRecord],
    filter_kind: str,
    n_success: int | None = None,
    n_fail: int | None = None,
    capacity: int = 200_000,
) -> tuple[ReplayBuffer, list[EpisodeRecord]]:
    """Seed a fresh buffer with filtered twin episodes.

    filter_kind: "success_only" (all successes), "top_k_success"
    (n_success shortest successful episodes), or "mixed" (first n_success
    successes and n_fail failures in episode order). Episode transitions
    keep their twin provenance.
    """
    succ = [e for e in episodes if e.success]
    fail = [e for e in episodes if not e.success]
    if filter_kind == "success_only":
        chosen = succ
        if not chosen:
            raise InsufficientEpisodesError(filter_kind, len(succ), len(fail))
    elif filter_kind == "top_k_success":
        if n_success is None or len(succ) < n_success:
            raise InsufficientEpisodesError(f"top_{n_success}_success", len(succ), len(fail))
        chosen = sorted(succ, key=lambda e: (e.steps, e.episode_id))[:n_success]
    elif filter_kind == "mixed":
        n_success = n_success or 0
        n_fail = n_fail or 0
        if len(succ) < n_success or len(fail) < n_fail:
            raise InsufficientEpisodesError(
                f"mixed({n_success},{n_fail})", len(succ), len(fail)
            )
        chosen = succ[:n_success] + fail[:n_fail]
    else:
        raise ValueError(f"unknown transfer filter {filter_kind!r}")
    buf = ReplayBuffer(capacity)
    for ep in sorted(chosen, key=lambda e: e.episode_id):
        for tr in ep.transitions:
            buf.push(Transition(tr.s, tr.a, tr.r, tr.s_next, tr.done, Provenance.TWIN_RL))
    return buf, sorted(chosen, key=lambda e: e.episode_id)


# --- stage III: real-environment RL -------------------------------------------


@dataclass
class RealRLConfig:
    total_steps: int = 15_000
    tau: float = 0.8
    eps_uniform: float = 0.2
    guidance: bool = True
    refresh_every_episodes: int = 20
    map_rollouts_per_cell: int = 3
    eval_every: int = 1_000
    eval_rollouts_per_cell: int = 2
    batch_size: int = 64
    utd: int = 1
    real_mix_start: float = 0.5
    real_mix_end: float = 0.9
    anneal_transitions: int = 4_000
    # Successful real episodes also join the imitation anchor (standard
    # HiL practice; keeps well-mastered configurations from regressing).
    echo_successes: bool = True
    # Fraction of each imitation batch reserved for intervention data.
    intervention_frac: float = 0.5
    cells: list[Cell] | None = None
    eval_cells: list[Cell] | None = None
    buffer_capacity: int = 200_000


@dataclass
class RealRLResult:
    policy: GaussianPolicy
    critic: Critic
    episodes: list[EpisodeRecord]
    eval_curve: list[tuple[int, float]]
    events: list[InterventionEvent]
    steps: int

    def steps_to_sr(self, threshold: float) -> float:
        """First eval step reaching threshold; inf when never reached."""
        for step, sr in self.eval_curve:
            if sr >= threshold:
                return float(step)
        return math.inf

    def final_sr(self) -> float:
        return self.eval_curve[-1][1] if self.eval_curve else 0.0


def run_real_rl(
    policy: GaussianPolicy,
    critic: Critic,
    real_cfg: EnvConfig,
    twin_cfg: EnvConfig,
    spec: RegionSpec,
    seeded_buffer: ReplayBuffer | None,
    intervener,
    w: LossWeights,
    rl: RealRLConfig,
    seed: int = 0,
    lr: float = 3e-4,
    lr_end_frac: float = 0.3,
    eta_ramp_frac: float = 0.0,
    beta_end_frac: float = 1.0,
    batch_probe=None,
) -> RealRLResult:
    """Stage III: one real environment, twin-guided resets, interventions.

    The imitation anchor samples the transferred twin transitions and
    accumulated interventions; policy-gradient batches never touch the
    stage-I demo set. The twin is used only for success-map estimation.
    """
    root = np.random.SeedSequence(seed)
    env_seed, reset_seed, act_seed, batch_seed, map_seed, eval_seed = root.spawn(6)
    env = PlanarPickEnv(real_cfg, rng=np.random.default_rng(env_seed))
    reset_rng = np.random.default_rng(reset_seed)
    act_rng = np.random.default_rng(act_seed)
    batch_rng = np.random.default_rng(batch_seed)

    rl_buf = ReplayBuffer(rl.buffer_capacity)
    il_buf = ReplayBuffer(rl.buffer_capacity)
    seeded_count = 0
    if seeded_buffer is not None:
        for tr in seeded_buffer.all_transitions():
            rl_buf.push(tr)
            il_buf.push(tr)
            seeded_count += 1

    learner = Learner(
        policy, critic, w, lr=lr, eta_ramp_frac=eta_ramp_frac,
        beta_end_frac=beta_end_frac, total_updates_hint=rl.total_steps * rl.utd,
    )

    episodes: list[EpisodeRecord] = []
    events: list[InterventionEvent] = []
    eval_curve: list[tuple[int, float]] = []
    target_set: TargetSet | None = None
    steps = 0
    next_eval = rl.eval_every
    n_refresh = 0
    allowed = spec.cells if rl.cells is None else list(rl.cells)
    eval_cells = allowed if rl.eval_cells is None else list(rl.eval_cells)

    def real_count() -> int:
        return len(rl_buf) - min(seeded_count, len(rl_buf))

    while steps < rl.total_steps:
        if rl.guidance and len(episodes) % rl.refresh_every_episodes == 0:
            sm = estimate_success_map(
                PolicyActor(policy),
                twin_cfg,
                spec,
                rl.map_rollouts_per_cell,
                _child_seed(map_seed, n_refresh),
                allowed,
            )
            target_set = build_target_set(sm, rl.tau)
            n_refresh += 1
        init = sample_reset(
            target_set if rl.guidance else None,
            rl.eps_uniform if rl.guidance else 1.0,
            real_cfg,
            spec,
            reset_rng,
            allowed,
        )
        cell, _region = _cell_of(init, spec)
        state = env.reset(init)
        intervener.begin_episode(len(episodes))
        pending: list[Transition] = []
        over_start: int | None = None
        over_actions: list[np.ndarray] = []
        success = False
        t = 0
        while not env.done and steps < rl.total_steps:
            obs = observation(state, real_cfg.object_symmetry)
            vec = policy.sample(obs, act_rng)
            override = intervener(state, vec, t)
            if override is not None:
                exec_vec_raw, source = override, Provenance.INTERVENTION
                if over_start is None:
                    over_start = t
                over_actions.append(np.asarray(override, dtype=np.float64))
            else:
                if over_start is not None:
                    events.append(
                        InterventionEvent(len(episodes), over_start, t, over_actions, intervener.source)
                    )
                    over_start, over_actions = None, []
                exec_vec_raw, source = vec, Provenance.REAL_RL
            action = vector_to_action(real_cfg, exec_vec_raw, state.ee.pose.theta)
            exec_vec = action_to_vector(real_cfg, action, state.ee.pose.theta)
            nxt, reward, done = env.step(action)
            tr = Transition(obs, exec_vec, reward, observation(nxt, real_cfg.object_symmetry), done, source)
            pending.append(tr)
            rl_buf.push(tr)
            if source is Provenance.INTERVENTION:
                il_buf.push(tr)
            state = nxt
            steps += 1
            t += 1
            success = success or reward == 1.0

            frac = min(1.0, real_count() / max(1, rl.anneal_transitions))
            p_real = rl.real_mix_start + (rl.real_mix_end - rl.real_mix_start) * frac
            # Cosine learning-rate decay consolidates late training.
            prog = steps / rl.total_steps
            cur_lr = lr * (lr_end_frac + (1.0 - lr_end_frac) * 0.5 * (1.0 + math.cos(math.pi * prog)))
            learner.policy_opt.lr = cur_lr
            learner.critic_opt.lr = cur_lr
            for _ in range(rl.utd):
                il_batch = (
                    il_buf.sample(rl.batch_size, batch_rng, _il_mix(il_buf, rl.intervention_frac))
                    if len(il_buf)
                    else None
                )
                rl_batch = rl_buf.sample(rl.batch_size, batch_rng, _rl_mix(rl_buf, p_real)) if len(rl_buf) else None
                if batch_probe is not None:
                    batch_probe(il_batch, rl_batch)
                learner.update(il_batch, rl_batch, batch_rng)

            if steps >= next_eval:
                sm = eval_policy_grid(
                    policy,
                    real_cfg,
                    spec,
                    rl.eval_rollouts_per_cell,
                    _child_seed(eval_seed, len(eval_curve)),
                    eval_cells,
                )
                eval_curve.append((steps, sm.mean_sr(eval_cells)))
                next_eval += rl.eval_every

        if over_start is not None:
            events.append(
                InterventionEvent(len(episodes), over_start, t, over_actions, intervener.source)
            )
        if success and rl.echo_successes:
            for tr in pending:
                if tr.source is Provenance.REAL_RL:
                    il_buf.push(tr)
        episodes.append(
            EpisodeRecord(
                len(episodes),
                cell,
                init,
                success,
                t,
                pending,
                intervention_steps=sum(
                    1 for tr in pending if tr.source is Provenance.INTERVENTION
                ),
                region=spec.label(cell),
            )
        )
    return RealRLResult(policy, critic, episodes, eval_curve, events, steps)


def _cell_of(init: InitConfig, spec: RegionSpec) -> tuple[Cell, str]:
    from .env import region_of

    return region_of(init.goal_pose, spec)


def _rl_mix(buf: ReplayBuffer, p_real: float) -> dict[Provenance, float] | None:
    """Split the RL batch between real-side and seeded-twin sources,
    proportionally within each side; falls back to uniform when a side
    is empty."""
    counts = buf.counts()
    c_real = counts.get(Provenance.REAL_RL, 0)
    c_int = counts.get(Provenance.INTERVENTION, 0)
    c_twin = counts.get(Provenance.TWIN_RL, 0)
    real_side = c_real + c_int
    if real_side == 0 or c_twin == 0:
        return None
    mix = {Provenance.TWIN_RL: 1.0 - p_real}
    mix[Provenance.REAL_RL] = p_real * c_real / real_side
    mix[Provenance.INTERVENTION] = p_real * c_int / real_side
    return {k: v for k, v in mix.items() if v > 0.0}


def _il_mix(il_buf: ReplayBuffer, int_frac: float = 0.5) -> dict[Provenance, float] | None:
    """Imitation batches reserve a fixed fraction for corrective
    interventions regardless of how many self-cloned successes
    accumulate."""
    counts = il_buf.counts()
    c_int = counts.get(Provenance.INTERVENTION, 0)
    rest = {src: n for src, n in counts.items() if src is not Provenance.INTERVENTION and n > 0}
    if c_int == 0 or not rest:
        return None
    total_rest = sum(rest.values())
    mix = {Provenance.INTERVENTION: int_frac}
    for src, n in rest.items():
        mix[src] = (1.0 - int_frac) * n / total_rest
    return mix
