"""Double-DQN training of GA parameter-control policies.

The agent observes the normalized parent fitness fx/n and picks values for a
subset of (lambda_m, alpha, lambda_c, beta) on fixed grids, either from one
joint head over all value combinations (combinatorial) or one head per
controlled parameter (factored).  Parameters outside the controlled set fall
back to the square-root schedule defaults: lambda_m = round(sqrt(n/(n-fx))),
lambda_c = lambda_m, alpha = beta = 1.

Reward per iteration is the parent fitness gain minus the evaluations spent.
The adaptive_shift reward mode adds a constant, chosen once after warm-up so
that random behaviour averages to zero reward, to every stored and future
reward of the run.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .bitstrings import ContractViolationError, RngStream, Target, substream
from .engine import (
    GaState,
    IterationOutcome,
    ParameterSet,
    run_iteration,
)
from .nets import (
    AdamState,
    NetworkParams,
    NetworkSpec,
    adam_step,
    backward,
    forward,
    init_params,
)
from .policies import TablePolicy, _sqrt_lambda
from .stats import ErtSummary, evaluate_policy

LAMBDA_GRID: tuple[int, ...] = (1, 2, 4, 8, 16, 32, 64)
COEFF_GRID: tuple[float, ...] = tuple(float(v) for v in np.linspace(0.25, 2.0, 7))

PARAM_ORDER: tuple[str, ...] = ("lambda_m", "alpha", "lambda_c", "beta")

# stream tags under (master_seed, repetition)
_TAG_INIT, _TAG_ENV, _TAG_EXPLORE, _TAG_REPLAY, _TAG_EVAL, _TAG_REEVAL = range(6)


class TrainingDivergedError(RuntimeError):
    """Network parameters left the finite range during training."""


def encode_state(fx: int, n: int) -> np.ndarray:
    """State seen by the agent: the single component fx/n."""
    return np.array([fx / n], dtype=np.float64)


@dataclass(frozen=True)
class ActionCodec:
    """Maps between grid indices and ParameterSets.

    controlled lists the parameters under agent control, always in the
    canonical order (lambda_m, alpha, lambda_c, beta); lambda grids are
    LAMBDA_GRID, coefficient grids COEFF_GRID.  A combinatorial codec exposes
    one joint index, mixed-radix over the controlled dimensions with the
    first one most significant; a factored codec exposes one index per
    dimension.  decode resolves uncontrolled parameters from the square-root
    schedule defaults, which is why it needs (fx, n).
    """

    mode: str = "factored"
    controlled: tuple[str, ...] = PARAM_ORDER

    def __post_init__(self) -> None:
        if self.mode not in ("factored", "combinatorial"):
            raise ContractViolationError("mode must be factored or combinatorial")
        ordered = tuple(p for p in PARAM_ORDER if p in self.controlled)
        if not self.controlled or ordered != self.controlled:
            raise ContractViolationError(
                f"controlled must be a nonempty subset of {PARAM_ORDER} in that order"
            )

    def grids(self) -> tuple[tuple[float, ...], ...]:
        return tuple(
            LAMBDA_GRID if p in ("lambda_m", "lambda_c") else COEFF_GRID
            for p in self.controlled
        )

    @property
    def n_dims(self) -> int:
        return len(self.controlled)

    @property
    def joint_size(self) -> int:
        out = 1
        for g in self.grids():
            out *= len(g)
        return out

    def head_sizes(self) -> tuple[int, ...]:
        if self.mode == "combinatorial":
            return (self.joint_size,)
        return tuple(len(g) for g in self.grids())

    def joint_index(self, indices: Sequence[int]) -> int:
        grids = self.grids()
        if len(indices) != len(grids):
            raise ContractViolationError("one index per controlled dimension")
        j = 0
        for idx, grid in zip(indices, grids):
            if not (0 <= int(idx) < len(grid)):
                raise ContractViolationError(f"index {idx} out of range")
            j = j * len(grid) + int(idx)
        return j

    def split_joint(self, j: int) -> tuple[int, ...]:
        if not (0 <= j < self.joint_size):
            raise ContractViolationError(f"joint index {j} out of range")
        out = []
        for grid in reversed(self.grids()):
            out.append(j % len(grid))
            j //= len(grid)
        return tuple(reversed(out))

    def decode(self, indices: Sequence[int], fx: int, n: int) -> ParameterSet:
        """Grid values for controlled parameters, schedule defaults otherwise."""
        if not (0 <= fx < n):
            raise ContractViolationError("decode needs 0 <= fx < n")
        grids = self.grids()
        if len(indices) != len(grids):
            raise ContractViolationError("one index per controlled dimension")
        values = {}
        for p, grid, i in zip(self.controlled, grids, indices):
            if not (0 <= int(i) < len(grid)):
                raise ContractViolationError(f"index {i} out of range for {p}")
            values[p] = grid[int(i)]
        lam_m = int(values.get("lambda_m", _sqrt_lambda(fx, n)))
        alpha = float(values.get("alpha", 1.0))
        lam_c = int(values.get("lambda_c", lam_m))
        beta = float(values.get("beta", 1.0))
        return ParameterSet.create(n, lam_m, alpha, lam_c, beta)

    def encode(self, params: ParameterSet) -> tuple[int, ...]:
        """Per-dimension grid indices of an on-grid parameter set."""
        out = []
        for p, grid in zip(self.controlled, self.grids()):
            value = getattr(params, p)
            hits = [i for i, v in enumerate(grid) if math.isclose(v, value)]
            if not hits:
                raise ContractViolationError(f"{p}={value} is not on the grid")
            out.append(hits[0])
        return tuple(out)

    def network_spec(self, hidden: Sequence[int]) -> NetworkSpec:
        return NetworkSpec(input_dim=1, hidden=tuple(hidden), heads=self.head_sizes())


@dataclass(frozen=True)
class Transition:
    state: float
    action: tuple[int, ...]
    reward: float
    next_state: float
    terminal: bool

    def __post_init__(self) -> None:
        if not math.isfinite(self.reward):
            raise ContractViolationError("reward must be finite")


class ReplayBuffer:
    """Fixed-capacity ring buffer over transition columns.

    Uniform sampling with replacement over current contents; once full, each
    add overwrites the oldest entry.
    """

    def __init__(self, capacity: int, n_dims: int) -> None:
        if capacity < 1 or n_dims < 1:
            raise ContractViolationError("capacity and n_dims must be >= 1")
        self.capacity = capacity
        self.states = np.zeros(capacity, dtype=np.float64)
        self.actions = np.zeros((capacity, n_dims), dtype=np.int8)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.next_states = np.zeros(capacity, dtype=np.float64)
        self.terminals = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._head = 0

    def __len__(self) -> int:
        return self.size

    def add(
        self,
        state: float,
        action: Sequence[int],
        reward: float,
        next_state: float,
        terminal: bool,
    ) -> None:
        i = self._head
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.terminals[i] = terminal
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        """(states, actions, rewards, next_states, terminals) column arrays."""
        if self.size == 0:
            raise ContractViolationError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return (
            self.states[idx],
            self.actions[idx],
            self.rewards[idx],
            self.next_states[idx],
            self.terminals[idx],
        )


def reward_naive(evals_used: int, delta_f: int) -> float:
    """-E_t + delta_f_t: fitness gained minus evaluations spent.

    delta_f is the parent improvement, never negative (rejected offspring
    leave the parent unchanged).
    """
    return float(delta_f) - float(evals_used)


def compute_adaptive_bias(naive_rewards) -> float:
    """Shift that zero-centers the given rewards, clamped to be >= 0."""
    arr = np.asarray(naive_rewards, dtype=np.float64)
    if arr.size == 0:
        raise ContractViolationError("need at least one reward to pick the shift")
    return float(max(0.0, -arr.mean()))


def reward_shifted(evals_used: int, delta_f: int, bias: float) -> float:
    if bias < 0:
        raise ContractViolationError("bias must be >= 0")
    return reward_naive(evals_used, delta_f) + bias


def select_action(
    params: NetworkParams,
    codec: ActionCodec,
    state: np.ndarray,
    epsilon: float,
    rng: np.random.Generator,
) -> tuple[int, ...]:
    """Epsilon-greedy per-dimension indices; greedy ties go to the lowest index.

    With epsilon == 0 no randomness is consumed, so data collection under a
    frozen net is a deterministic function of the environment stream.
    """
    if epsilon > 0.0 and rng.random() < epsilon:
        return tuple(int(rng.integers(0, len(g))) for g in codec.grids())
    qs = forward(params, state.reshape(1, -1))
    if codec.mode == "combinatorial":
        return codec.split_joint(int(np.argmax(qs[0][0])))
    return tuple(int(np.argmax(q[0])) for q in qs)


def td_targets(
    online: NetworkParams,
    target: NetworkParams,
    batch,
    gamma: float,
    codec: ActionCodec,
) -> tuple[np.ndarray, np.ndarray]:
    """Double-Q targets: the online net picks the argmax, the target net values it.

    Returns (actions, targets), both (B, n_heads): the taken action index per
    head and its regression target y = r + gamma * Q_target(s', a*), with zero
    bootstrap on terminal transitions.  Cutoff truncations are stored
    non-terminal upstream, so they bootstrap normally.
    """
    states, actions, rewards, next_states, terminals = batch
    x_next = next_states.reshape(-1, 1)
    q_online = forward(online, x_next)
    q_target = forward(target, x_next)
    cont = 1.0 - terminals.astype(np.float64)
    rows = np.arange(len(states))

    if codec.mode == "combinatorial":
        joint = np.zeros(len(states), dtype=np.int64)
        for d, grid in enumerate(codec.grids()):
            joint = joint * len(grid) + actions[:, d].astype(np.int64)
        best = np.argmax(q_online[0], axis=1)
        targets = rewards + gamma * cont * q_target[0][rows, best]
        return joint.reshape(-1, 1), targets.reshape(-1, 1)

    acts = actions.astype(np.int64)
    targets = np.empty(acts.shape, dtype=np.float64)
    for d in range(codec.n_dims):
        best = np.argmax(q_online[d], axis=1)
        targets[:, d] = rewards + gamma * cont * q_target[d][rows, best]
    return acts, targets


def greedy_actions(
    params: NetworkParams, codec: ActionCodec, n: int
) -> np.ndarray:
    """(n, n_dims) greedy per-dimension indices for every fx in [0, n)."""
    states = (np.arange(n, dtype=np.float64) / n).reshape(-1, 1)
    qs = forward(params, states)
    if codec.mode == "combinatorial":
        return np.array(
            [codec.split_joint(int(j)) for j in np.argmax(qs[0], axis=1)],
            dtype=np.int64,
        )
    return np.column_stack([np.argmax(q, axis=1) for q in qs]).astype(np.int64)


def export_learned_policy(
    params: NetworkParams, codec: ActionCodec, n: int
) -> TablePolicy:
    """Greedy policy of the network as a lookup table over all fx in [0, n)."""
    per_dim = greedy_actions(params, codec, n)
    rows = []
    for fx in range(n):
        ps = codec.decode(per_dim[fx], fx, n)
        rows.append((ps.lambda_m, ps.alpha, ps.lambda_c, ps.beta))
    return TablePolicy(rows)


@dataclass(frozen=True)
class TrainConfig:
    """Training hyperparameters; field names double as the JSON config keys."""

    n: int = 100
    mode: str = "factored"
    controlled: tuple[str, ...] = PARAM_ORDER
    reward_mode: str = "adaptive_shift"
    gamma: float = 0.9998
    epsilon: float = 0.2
    buffer_capacity: int = 1_000_000
    warmup_transitions: int = 10_000
    batch_size: int = 2_048
    learning_rate: float = 0.001
    budget_steps: int = 200_000
    cutoff_factor: float = 0.8
    target_sync_period: int = 1_000
    eval_interval: int = 2_000
    eval_runs: int = 100
    reeval_runs: int = 1_000
    top_k: int = 5
    repetitions: int = 5
    hidden: tuple[int, ...] = (50, 50)

    def __post_init__(self) -> None:
        if self.n < 2:
            raise ContractViolationError("n must be >= 2")
        if self.reward_mode not in ("naive", "adaptive_shift"):
            raise ContractViolationError("reward_mode must be naive or adaptive_shift")
        if not (0.0 <= self.epsilon <= 1.0):
            raise ContractViolationError("epsilon must lie in [0, 1]")
        if not (0.0 < self.gamma < 1.0):
            raise ContractViolationError("gamma must lie in (0, 1)")
        if self.cutoff_factor <= 0.0 or self.learning_rate <= 0.0:
            raise ContractViolationError("cutoff_factor and learning_rate must be > 0")
        if min(self.buffer_capacity, self.warmup_transitions, self.batch_size,
               self.target_sync_period, self.eval_interval, self.eval_runs,
               self.reeval_runs, self.top_k, self.repetitions) < 1:
            raise ContractViolationError("counts must be positive")
        if self.budget_steps < 0:
            raise ContractViolationError("budget_steps must be >= 0")
        object.__setattr__(self, "controlled", tuple(self.controlled))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        self.codec()  # validates mode and controlled

    def codec(self) -> ActionCodec:
        return ActionCodec(self.mode, self.controlled)

    def cutoff(self) -> int:
        return int(round(self.cutoff_factor * self.n * self.n))


@dataclass(frozen=True)
class Checkpoint:
    step: int
    summary: ErtSummary
    params: NetworkParams


@dataclass(frozen=True)
class TrainingArtifact:
    """Everything one training repetition produced.

    best_* refer to the checkpoint whose re-evaluation (reeval_runs fresh
    seeds) had the lowest normalized ERT among the top_k checkpoints by
    first-pass evaluation.
    """

    config: TrainConfig
    master_seed: int
    repetition: int
    bias: float
    checkpoints: tuple[Checkpoint, ...]
    reevaluated: tuple[tuple[int, float], ...]
    best_step: int
    best_params: NetworkParams
    best_ert: float

    def learning_curve(self) -> tuple[tuple[int, float, float], ...]:
        """(step, normalized ERT, normalized std over successful runs) rows."""
        return tuple(
            (cp.step, cp.summary.normalized_ert, cp.summary.std / self.config.n)
            for cp in self.checkpoints
        )

    def best_table(self) -> TablePolicy:
        return export_learned_policy(
            self.best_params, self.config.codec(), self.config.n
        )


class _GaEnv:
    """One GA run at a time; caller resets on optimum or evaluation cutoff."""

    def __init__(self, n: int, cutoff: int, rng: np.random.Generator) -> None:
        self.n = n
        self.cutoff = cutoff
        self.target = Target.all_ones(n)
        self.rng = rng
        self.state: GaState = None  # type: ignore[assignment]
        self.reset()

    def reset(self) -> None:
        while True:
            bits = self.rng.integers(0, 2, size=self.n, dtype=np.uint8)
            fx = int(np.count_nonzero(bits))
            if fx < self.n:
                break
        self.state = GaState(self.n, bits, fx)

    def step(self, params: ParameterSet) -> tuple[IterationOutcome, bool, bool]:
        """(outcome, terminal, truncated); terminal wins if both trigger."""
        outcome = run_iteration(self.state, params, self.target, self.rng)
        terminal = self.state.fx == self.n
        truncated = not terminal and self.state.evaluations >= self.cutoff
        return outcome, terminal, truncated


def _eval_greedy(
    params: NetworkParams,
    config: TrainConfig,
    master_seed: int,
    prefix: tuple[int, ...],
    runs: int,
) -> ErtSummary:
    table = export_learned_policy(params, config.codec(), config.n)
    return evaluate_policy(
        table, config.n, runs, master_seed,
        cutoff=config.cutoff(), stream_prefix=prefix,
    )


def train(
    config: TrainConfig, master_seed: int, repetition: int = 0
) -> TrainingArtifact:
    """One training repetition, deterministic in (master_seed, repetition).

    Warm-up fills the buffer with uniform-random actions; under
    adaptive_shift the bias is then computed and the stored rewards
    relabeled.  Each subsequent environment step does one minibatch gradient
    update, with a hard target-network copy every target_sync_period updates
    and a greedy-policy evaluation every eval_interval steps.  A run whose
    budget never reaches the evaluation schedule (budget_steps == 0 included)
    evaluates once at its final step, so every artifact has at least one
    checkpoint.  The top_k checkpoints by evaluation ERT are re-evaluated on
    fresh seeds and the best becomes the artifact's policy.  Non-finite
    network parameters abort with TrainingDivergedError.
    """
    codec = config.codec()
    root = RngStream(master_seed, repetition)
    g_init = substream(root, _TAG_INIT)
    g_env = substream(root, _TAG_ENV)
    g_explore = substream(root, _TAG_EXPLORE)
    g_replay = substream(root, _TAG_REPLAY)

    online = init_params(codec.network_spec(config.hidden), g_init)
    target_net = online.copy()
    adam = AdamState.zeros_like(online)
    buffer = ReplayBuffer(config.buffer_capacity, codec.n_dims)
    env = _GaEnv(config.n, config.cutoff(), g_env)
    n = config.n

    for _ in range(config.warmup_transitions):
        fx0 = env.state.fx
        a = tuple(int(g_explore.integers(0, len(g))) for g in codec.grids())
        outcome, terminal, truncated = env.step(codec.decode(a, fx0, n))
        gain = max(0, outcome.delta_f)
        buffer.add(fx0 / n, a, reward_naive(outcome.evals_used, gain),
                   env.state.fx / n, terminal)
        if terminal or truncated:
            env.reset()

    bias = 0.0
    if config.reward_mode == "adaptive_shift":
        bias = compute_adaptive_bias(buffer.rewards[: buffer.size])
        buffer.rewards[: buffer.size] += bias

    checkpoints: list[Checkpoint] = []

    def run_eval(step: int) -> None:
        if not online.all_finite():
            raise TrainingDivergedError(
                f"non-finite network parameters at step {step}"
            )
        summary = _eval_greedy(
            online, config, master_seed,
            (repetition, _TAG_EVAL, step), config.eval_runs,
        )
        checkpoints.append(Checkpoint(step, summary, online.copy()))

    grad_steps = 0
    for step in range(1, config.budget_steps + 1):
        fx0 = env.state.fx
        a = select_action(online, codec, encode_state(fx0, n),
                          config.epsilon, g_explore)
        outcome, terminal, truncated = env.step(codec.decode(a, fx0, n))
        gain = max(0, outcome.delta_f)
        buffer.add(fx0 / n, a,
                   reward_shifted(outcome.evals_used, gain, bias),
                   env.state.fx / n, terminal)
        if terminal or truncated:
            env.reset()

        batch = buffer.sample(config.batch_size, g_replay)
        actions_mat, targets = td_targets(online, target_net, batch,
                                          config.gamma, codec)
        grads, _ = backward(online, batch[0].reshape(-1, 1), actions_mat, targets)
        adam_step(online, grads, adam, config.learning_rate)
        grad_steps += 1
        if grad_steps % config.target_sync_period == 0:
            if not online.all_finite():
                raise TrainingDivergedError(
                    f"non-finite network parameters at step {step}"
                )
            target_net.copy_from(online)
        if step % config.eval_interval == 0:
            run_eval(step)

    if not checkpoints:
        run_eval(config.budget_steps)

    ranked = sorted(checkpoints, key=lambda cp: (cp.summary.ert, cp.step))
    finalists = ranked[: config.top_k]
    reevals: list[tuple[int, float]] = []
    best_cp: Optional[Checkpoint] = None
    best_ert = math.inf
    for k, cp in enumerate(finalists):
        summary = _eval_greedy(
            cp.params, config, master_seed,
            (repetition, _TAG_REEVAL, k), config.reeval_runs,
        )
        reevals.append((cp.step, summary.normalized_ert))
        if best_cp is None or summary.normalized_ert < best_ert:
            best_ert = summary.normalized_ert
            best_cp = cp
    assert best_cp is not None

    return TrainingArtifact(
        config=config,
        master_seed=master_seed,
        repetition=repetition,
        bias=bias,
        checkpoints=tuple(checkpoints),
        reevaluated=tuple(reevals),
        best_step=best_cp.step,
        best_params=best_cp.params,
        best_ert=best_ert,
    )


def _train_one(args) -> TrainingArtifact:
    config, master_seed, rep = args
    return train(config, master_seed, repetition=rep)


def train_repetitions(
    config: TrainConfig,
    master_seed: int,
    repetitions: Optional[int] = None,
    parallel: int = 1,
) -> list[TrainingArtifact]:
    """Independent repetitions, deterministic regardless of parallel degree."""
    reps = config.repetitions if repetitions is None else repetitions
    if reps < 1:
        raise ContractViolationError("repetitions must be >= 1")
    jobs = [(config, master_seed, rep) for rep in range(reps)]
    if parallel > 1 and reps > 1:
        import multiprocessing as mp

        with mp.get_context("fork").Pool(min(parallel, reps)) as pool:
            return pool.map(_train_one, jobs)
    return [_train_one(j) for j in jobs]


def best_artifact(artifacts: Sequence[TrainingArtifact]) -> TrainingArtifact:
    """Lowest re-evaluated ERT wins; the earlier repetition breaks ties."""
    if not artifacts:
        raise ContractViolationError("need at least one artifact")
    best = artifacts[0]
    for art in artifacts[1:]:
        if art.best_ert < best.best_ert:
            best = art
    return best
