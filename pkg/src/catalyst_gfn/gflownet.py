"""Trajectory-balance training of the surface-construction policy.

Every state has a unique parent, so the backward policy is identically one and
the trajectory-balance residual of a trajectory ``tau`` ending in ``x`` is

    log_z + sum_t log P_F(a_t | s_t) - log R(x).
"""

from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .env import N_STAGES, Action, CrystalSurfaceSpec, CrystalSurfaceState, Stage, SurfaceEnv
from .policy import PolicyParams, masked_log_softmax, trunk

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = "catalyst-gfn-checkpoint/1"

_STAGES = tuple(Stage(t) for t in range(N_STAGES))

RewardFn = Callable[[Sequence[CrystalSurfaceSpec]], Sequence[float]]


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class Trajectory:
    steps: list  # (state, action, policy log-probability) for each of the 9 stages
    terminal: CrystalSurfaceState
    spec: CrystalSurfaceSpec
    reward: float = float("nan")
    behavior_log_probs: Optional[np.ndarray] = None
    # stage-major caches filled by the sampler; rebuilt from ``steps`` when missing
    features: Optional[np.ndarray] = field(default=None, repr=False)
    masks: Optional[list] = field(default=None, repr=False)

    @property
    def log_prob(self) -> float:
        return float(sum(lp for _, _, lp in self.steps))

    @property
    def actions(self) -> np.ndarray:
        return np.array([a.index for _, a, _ in self.steps])


@dataclass
class TrainerConfig:
    batch_size: int = 32
    n_steps: int = 5000
    lr: float = 1e-3
    lr_log_z: float = 1e-1
    hidden: int = 256
    seed: int = 0
    epsilon: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    log_every: int = 1

    def validate(self, prefix: str = "trainer") -> list:
        errors = []
        for name in ("batch_size", "n_steps", "hidden", "log_every"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                errors.append(f"{prefix}.{name}: must be a positive integer (got {v!r})")
        for name in ("lr", "lr_log_z", "adam_eps"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not v > 0:
                errors.append(f"{prefix}.{name}: must be positive (got {v!r})")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or not 0 <= v < 1:
                errors.append(f"{prefix}.{name}: must lie in [0, 1) (got {v!r})")
        if not isinstance(self.epsilon, (int, float)) or not 0 <= self.epsilon < 1:
            errors.append(f"{prefix}.epsilon: must lie in [0, 1) (got {self.epsilon!r})")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            errors.append(f"{prefix}.seed: must be a non-negative integer (got {self.seed!r})")
        return errors


# -- sampling ---------------------------------------------------------------


def new_params(env: SurfaceEnv, hidden: int, rng: np.random.Generator) -> PolicyParams:
    return PolicyParams.initialize(env.feature_dim, hidden, env.arities, rng)


def sample_batch(
    env: SurfaceEnv,
    params: PolicyParams,
    rng: np.random.Generator,
    batch_size: int,
    epsilon: float = 0.0,
) -> list:
    """Sample ``batch_size`` trajectories in lockstep.

    Actions come from ``(1 - epsilon) * policy + epsilon * uniform(enabled)``.
    ``steps`` record the policy's own log-probabilities; the mixture's are kept
    in ``behavior_log_probs``.
    """
    states = [env.initial_state()] * batch_size
    feats = np.zeros((N_STAGES, batch_size, env.feature_dim))
    masks, actions, logps, blogps, history = [], [], [], [], []
    for stage in _STAGES:
        x = feats[stage]
        for i, s in enumerate(states):
            env.encode_into(s, x[i])
        mask = np.stack([env.valid_actions(s) for s in states])
        logits = trunk(params, x) @ params.head_w[stage] + params.head_b[stage]
        logp = masked_log_softmax(logits, mask)
        p = np.exp(logp)
        if epsilon > 0:
            q = (1.0 - epsilon) * p + epsilon * mask / mask.sum(axis=1, keepdims=True)
        else:
            q = p
        cdf = np.cumsum(q, axis=1)
        cdf /= cdf[:, -1:]
        u = rng.random(batch_size)
        idx = (u[:, None] < cdf).argmax(axis=1)
        rows = np.arange(batch_size)
        masks.append(mask)
        actions.append(idx.tolist())
        logps.append(logp[rows, idx].tolist())
        blogps.append(np.log(q[rows, idx]))
        history.append(states)
        states = [env.apply(s, Action(stage, a)) for s, a in zip(states, idx.tolist())]
    out = []
    for i in range(batch_size):
        steps = [
            (history[t][i], Action(_STAGES[t], actions[t][i]), logps[t][i])
            for t in range(N_STAGES)
        ]
        out.append(
            Trajectory(
                steps=steps,
                terminal=states[i],
                spec=env.decode_terminal(states[i]),
                behavior_log_probs=np.array([blogps[t][i] for t in range(N_STAGES)]),
                features=feats[:, i, :].copy(),
                masks=[masks[t][i] for t in range(N_STAGES)],
            )
        )
    return out


def sample_trajectory(
    env: SurfaceEnv, params: PolicyParams, rng: np.random.Generator, epsilon: float = 0.0
) -> Trajectory:
    return sample_batch(env, params, rng, 1, epsilon)[0]


def trajectory_from_terminal(env: SurfaceEnv, terminal: CrystalSurfaceState, params: PolicyParams,
                             reward: float = float("nan")) -> Trajectory:
    """Rebuild the unique trajectory to ``terminal`` with its policy log-probabilities."""
    path = env.trajectory_to(terminal)
    steps = []
    for state, action in path:
        logits = trunk(params, env.encode(state)) @ params.head_w[state.stage] + params.head_b[state.stage]
        lp = masked_log_softmax(logits, env.valid_actions(state))[action.index]
        steps.append((state, action, float(lp)))
    return Trajectory(steps=steps, terminal=terminal, spec=env.decode_terminal(terminal), reward=reward)


def terminal_log_prob(env: SurfaceEnv, params: PolicyParams, terminal: CrystalSurfaceState) -> float:
    return trajectory_from_terminal(env, terminal, params).log_prob


# -- loss and gradient --------------------------------------------------------


def _batch_arrays(env: SurfaceEnv, trajectories: Sequence[Trajectory]):
    B = len(trajectories)
    feats = np.zeros((N_STAGES, B, env.feature_dim))
    masks = [np.zeros((B, a), dtype=bool) for a in env.arities]
    acts = np.zeros((N_STAGES, B), dtype=int)
    for i, tr in enumerate(trajectories):
        if len(tr.steps) != N_STAGES:
            raise ValueError(f"trajectory has {len(tr.steps)} steps, expected {N_STAGES}")
        for t, (state, action, _) in enumerate(tr.steps):
            acts[t, i] = action.index
        if tr.features is not None and tr.masks is not None:
            feats[:, i, :] = tr.features
            for t in range(N_STAGES):
                masks[t][i] = tr.masks[t]
        else:
            for t, (state, _, _) in enumerate(tr.steps):
                env.encode_into(state, feats[t, i])
                masks[t][i] = env.valid_actions(state)
    log_r = np.array([_log_reward(tr.reward) for tr in trajectories])
    return feats, masks, acts, log_r


def _log_reward(r: float) -> float:
    if not r > 0:
        raise ValueError(f"trajectory balance needs a strictly positive reward (got {r!r})")
    return math.log(r)


def _forward_batch(params: PolicyParams, feats, masks, acts, log_r):
    h = np.tanh(feats @ params.w1 + params.b1)  # (S, B, H)
    rows = np.arange(feats.shape[1])
    sum_logp = np.zeros(feats.shape[1])
    probs = []
    for t in range(N_STAGES):
        logits = h[t] @ params.head_w[t] + params.head_b[t]
        logp = masked_log_softmax(logits, masks[t])
        sum_logp += logp[rows, acts[t]]
        probs.append(np.exp(logp))
    delta = params.log_z + sum_logp - log_r
    return h, probs, delta


def residuals(env: SurfaceEnv, params: PolicyParams, trajectories: Sequence[Trajectory]) -> np.ndarray:
    """Per-trajectory balance residuals ``log_z + sum log P_F - log R``."""
    _, _, delta = _forward_batch(params, *_batch_arrays(env, trajectories))
    return delta


def tb_loss(env: SurfaceEnv, params: PolicyParams, trajectory: Trajectory) -> float:
    return float(residuals(env, params, [trajectory])[0] ** 2)


def batch_loss(env: SurfaceEnv, params: PolicyParams, trajectories: Sequence[Trajectory]) -> float:
    return float(np.mean(residuals(env, params, trajectories) ** 2))


def loss_and_gradient(env: SurfaceEnv, params: PolicyParams, trajectories: Sequence[Trajectory]):
    """Mean trajectory-balance loss over the batch and its gradient as a flat vector."""
    if not trajectories:
        raise ValueError("gradient needs a nonempty batch")
    feats, masks, acts, log_r = _batch_arrays(env, trajectories)
    return _loss_and_gradient_arrays(params, feats, masks, acts, log_r)


def _loss_and_gradient_arrays(params, feats, masks, acts, log_r):
    B = feats.shape[1]
    h, probs, delta = _forward_batch(params, feats, masks, acts, log_r)
    grad = PolicyParams.zeros(params.input_dim, params.hidden, params.arities)
    coef = 2.0 * delta / B
    rows = np.arange(B)
    dh = np.empty_like(h)
    for t in range(N_STAGES):
        # d logp[a] / d logits = onehot(a) - p ; masked entries have p = 0
        g = -probs[t]
        g[rows, acts[t]] += 1.0
        g *= coef[:, None]
        grad.head_w[t][...] = h[t].T @ g
        grad.head_b[t][...] = g.sum(axis=0)
        dh[t] = g @ params.head_w[t].T
    da = dh * (1.0 - h * h)
    grad.w1[...] = feats.reshape(-1, feats.shape[-1]).T @ da.reshape(-1, da.shape[-1])
    grad.b1[...] = da.sum(axis=(0, 1))
    grad.flat[-1] = coef.sum()
    return float(np.mean(delta**2)), grad.flat


def gradient(env: SurfaceEnv, params: PolicyParams, trajectories: Sequence[Trajectory]) -> np.ndarray:
    return loss_and_gradient(env, params, trajectories)[1]


# -- optimiser ------------------------------------------------------------------


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def learning_rates(params: PolicyParams, config: TrainerConfig) -> np.ndarray:
    lr = np.full(params.flat.size, float(config.lr))
    lr[params.log_z_index] = config.lr_log_z
    return lr


def adam_step(params: PolicyParams, grad: np.ndarray, state: AdamState, config: TrainerConfig):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.flat.shape or state.m.shape != params.flat.shape:
        raise ValueError("parameter, gradient and optimiser shapes differ")
    t = state.t + 1
    m = config.beta1 * state.m + (1.0 - config.beta1) * grad
    v = config.beta2 * state.v + (1.0 - config.beta2) * grad * grad
    m_hat = m / (1.0 - config.beta1**t)
    v_hat = v / (1.0 - config.beta2**t)
    step = learning_rates(params, config) * m_hat / (np.sqrt(v_hat) + config.adam_eps)
    return params.with_flat(params.flat - step), AdamState(m, v, t)


# -- training loop ------------------------------------------------------------------


@dataclass
class TrainerState:
    params: PolicyParams
    adam: AdamState
    rng: np.random.Generator
    step: int = 0


def init_trainer(env: SurfaceEnv, config: TrainerConfig) -> TrainerState:
    rng = np.random.default_rng(config.seed)
    params = new_params(env, config.hidden, rng)
    return TrainerState(params, AdamState.zeros(params.flat.size), rng, 0)


def train(
    env: SurfaceEnv,
    config: TrainerConfig,
    reward_fn: RewardFn,
    state: TrainerState | None = None,
    callback: Callable[[dict], None] | None = None,
):
    """Run ``config.n_steps`` trajectory-balance updates.

    Returns ``(trainer_state, log)`` where ``log`` lists ``{step, loss, log_z}``
    records every ``config.log_every`` steps.
    """
    errors = config.validate()
    if errors:
        raise ValueError("; ".join(errors))
    state = state or init_trainer(env, config)
    log = []
    params, adam, rng = state.params, state.adam, state.rng
    for step in range(state.step + 1, state.step + config.n_steps + 1):
        batch = sample_batch(env, params, rng, config.batch_size, config.epsilon)
        rewards = np.asarray(reward_fn([tr.spec for tr in batch]), dtype=np.float64)
        if rewards.shape != (len(batch),):
            raise ValueError("reward function returned the wrong number of values")
        for tr, r in zip(batch, rewards):
            tr.reward = float(r)
        loss, grad = loss_and_gradient(env, params, batch)
        if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDiverged(
                f"non-finite loss {loss!r} at step {step} (log_z={params.log_z!r}, "
                f"rewards min={rewards.min()!r} max={rewards.max()!r})"
            )
        params, adam = adam_step(params, grad, adam, config)
        if step % config.log_every == 0:
            rec = {"step": step, "loss": loss, "log_z": params.log_z}
            log.append(rec)
            if callback is not None:
                callback(rec)
    return TrainerState(params, adam, rng, state.step + config.n_steps), log


# -- exact oracle ---------------------------------------------------------------------


@dataclass
class Marginals:
    element_probs: dict
    log_z: float
    method: str

    def to_json(self) -> dict:
        return {"element_probs": self.element_probs, "log_z": self.log_z, "method": self.method}


def enumerate_marginals(
    env: SurfaceEnv,
    element_rewards: dict | None = None,
    reward_fn: RewardFn | None = None,
    chunk: int = 4096,
) -> Marginals:
    """Exact element marginal and log-partition of the reward-proportional target.

    With ``element_rewards`` (reward depends on element only) the state count
    factorizes: ``Z = (terminal states per element) * sum_e R(e)``. Otherwise
    every terminal state is enumerated and ``reward_fn`` evaluated on it; only
    feasible for reduced bin counts.
    """
    elements = env.config.elements
    if element_rewards is not None:
        r = np.array([float(element_rewards[e]) for e in elements])
        if np.any(r <= 0):
            raise ValueError("rewards must be strictly positive")
        total = r.sum()
        return Marginals(
            {e: float(v / total) for e, v in zip(elements, r)},
            math.log(env.terminal_states_per_element()) + math.log(total),
            "factorized",
        )
    if reward_fn is None:
        raise ValueError("need element_rewards or reward_fn")
    sums = {e: 0.0 for e in elements}
    buf = []

    def flush():
        values = reward_fn([s for s in buf])
        for spec, v in zip(buf, values):
            if not v > 0:
                raise ValueError(f"non-positive reward {v!r} for {spec}")
            sums[spec.element] += float(v)
        buf.clear()

    for terminal in env.iter_terminal_states():
        buf.append(env.decode_terminal(terminal))
        if len(buf) >= chunk:
            flush()
    if buf:
        flush()
    total = sum(sums.values())
    return Marginals({e: sums[e] / total for e in elements}, math.log(total), "exhaustive")


def exact_terminal_distribution(env: SurfaceEnv, params: PolicyParams) -> dict:
    """Probability of every terminal state under the policy, by enumerating P_F products."""
    return {t: math.exp(terminal_log_prob(env, params, t)) for t in env.iter_terminal_states()}


# -- checkpoints ----------------------------------------------------------------------------


def _encode_array(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _decode_array(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").astype(np.float64)


def checkpoint_to_json(state: TrainerState, trainer_config: TrainerConfig, extra: dict | None = None) -> dict:
    p = state.params
    arrays, pos = {}, 0
    for name, shape in PolicyParams.layout(p.input_dim, p.hidden, p.arities):
        n = int(np.prod(shape))
        arrays[name] = {"shape": list(shape), "data": _encode_array(p.flat[pos : pos + n])}
        pos += n
    rng_state = state.rng.bit_generator.state
    return {
        "version": CHECKPOINT_VERSION,
        "config": extra or {},
        "trainer": asdict(trainer_config),
        "policy": {"input_dim": p.input_dim, "hidden": p.hidden, "arities": list(p.arities)},
        "params": arrays,
        "optimizer": {"t": state.adam.t, "m": _encode_array(state.adam.m), "v": _encode_array(state.adam.v)},
        "rng": rng_state,
        "step": state.step,
    }


def checkpoint_from_json(obj: dict) -> tuple:
    """Return ``(TrainerState, TrainerConfig, config echo)``."""
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {obj.get('version')!r}")
    pol = obj["policy"]
    chunks = []
    for name, shape in PolicyParams.layout(pol["input_dim"], pol["hidden"], pol["arities"]):
        entry = obj["params"][name]
        if list(entry["shape"]) != list(shape):
            raise ValueError(f"checkpoint array {name} has shape {entry['shape']}, expected {list(shape)}")
        chunks.append(_decode_array(entry["data"]))
    params = PolicyParams(np.concatenate(chunks), pol["input_dim"], pol["hidden"], pol["arities"])
    opt = obj["optimizer"]
    adam = AdamState(_decode_array(opt["m"]), _decode_array(opt["v"]), int(opt["t"]))
    bit_gen = getattr(np.random, obj["rng"]["bit_generator"])()
    bit_gen.state = obj["rng"]
    config = TrainerConfig(**obj["trainer"])
    return TrainerState(params, adam, np.random.Generator(bit_gen), int(obj["step"])), config, obj.get("config", {})


def save_checkpoint(path, state: TrainerState, trainer_config: TrainerConfig, extra: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(checkpoint_to_json(state, trainer_config, extra), fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> tuple:
    with open(path) as fh:
        return checkpoint_from_json(json.load(fh))
