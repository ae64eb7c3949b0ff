"""Sensor-placement agent: a DQN that picks which unlabeled nodes to
instrument next.

The environment wraps (graph, partition, regressor checkpoint). Each step
moves one candidate node into the sensored set, fine-tunes the regressor
for a few epochs with the newly revealed label, and pays out the drop in
validation MSE as extrinsic reward. The Q-network scores
concat(state embedding, candidate embedding) pairs, so one set of weights
covers an arbitrary and shrinking action set; a frozen target copy
stabilizes TD bootstrapping. Exploration comes in three flavors: fixed
epsilon, decaying epsilon, and fixed epsilon plus a count-based novelty
bonus over sign-quantized state buckets.

Candidates are the unlabeled nodes outside val/test, so the evaluation
sets stay untouched while the agent shops for sensors.
"""

from __future__ import annotations

import enum
import json
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor, backward, no_grad
from .errors import (
    BudgetExhausted,
    BudgetTooLarge,
    EmptyBuffer,
    EmptyCandidateSet,
    InvalidAction,
    InvalidConfig,
    IoError,
    NonFiniteValue,
    WrongPolicyKind,
)
from .graph import NetworkGraph, SensorPartition, SplitAssignment, check_partition
from .model import (
    ModelConfig,
    clone_params,
    forward,
    graph_structure,
    init_params,
    mse_on,
    train,
    warm_finetune,
)


class PolicyKind(enum.Enum):
    Standard = "Standard"
    AdaptiveEpsilon = "AdaptiveEpsilon"
    Curiosity = "Curiosity"


@dataclass
class ExplorationPolicy:
    """Exploration schedule plus (for Curiosity) mutable visit counts.

    Standard keeps epsilon fixed; AdaptiveEpsilon decays it per global
    step; Curiosity uses the Standard epsilon and adds beta / sqrt(visits)
    for the state bucket reached after each placement.
    """

    kind: PolicyKind
    epsilon0: float = 1.0
    epsilon_decay: float = 0.995
    epsilon_min: float = 0.05
    beta: float = 0.1
    standard_epsilon: float = 0.1
    bucket_threshold: float = 0.1
    visit_counts: dict = field(default_factory=dict)

    def epsilon_at(self, step: int) -> float:
        if self.kind is PolicyKind.AdaptiveEpsilon:
            return max(self.epsilon_min, self.epsilon0 * self.epsilon_decay ** step)
        return self.standard_epsilon


@dataclass(frozen=True, eq=False)
class AgentState:
    """Mean regressor embedding over the sensored nodes, plus step count."""

    embedding: np.ndarray
    placements_made: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.embedding)):
            raise NonFiniteValue("agent state embedding is not finite")


@dataclass(frozen=True, eq=False)
class Transition:
    """One replayable step; embeddings are snapshots from choice time so
    TD targets stay computable after the model moves on."""

    state: AgentState
    action: int
    action_emb: np.ndarray
    reward: float
    next_state: AgentState
    next_candidates: np.ndarray
    next_candidate_embs: np.ndarray
    terminal: bool


class ReplayBuffer:
    """Bounded FIFO store of transitions with uniform sampling."""

    def __init__(self, capacity: int = 10000):
        if capacity < 1:
            raise InvalidConfig("replay capacity must be >= 1")
        self.capacity = capacity
        self.items: deque[Transition] = deque(maxlen=capacity)

    def push(self, transition: Transition) -> None:
        self.items.append(transition)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        if not self.items:
            raise EmptyBuffer("cannot sample from an empty replay buffer")
        size = min(batch_size, len(self.items))
        idx = rng.choice(len(self.items), size=size, replace=False)
        return [self.items[int(i)] for i in idx]

    def __len__(self) -> int:
        return len(self.items)


class QNet:
    """Two-layer scorer Q(s, a) = W2 relu(W1 concat(s, h_a) + b1) + b2,
    with a hard-copied target network synced every ``sync_period``
    td_update calls."""

    def __init__(self, emb_dim: int, hidden: int = 32, learning_rate: float = 1e-3,
                 sync_period: int = 25, seed: int = 0):
        if emb_dim < 1 or hidden < 1 or sync_period < 1:
            raise InvalidConfig("emb_dim, hidden and sync_period must be >= 1")
        rng = np.random.default_rng(seed)
        d_in = 2 * emb_dim
        sd1 = math.sqrt(2.0 / (d_in + hidden))
        sd2 = math.sqrt(2.0 / (hidden + 1))
        self.params: dict[str, Tensor] = {
            "W1": Tensor(rng.normal(0.0, sd1, size=(d_in, hidden)), requires_grad=True),
            "b1": Tensor(np.zeros((1, hidden)), requires_grad=True),
            "W2": Tensor(rng.normal(0.0, sd2, size=(hidden, 1)), requires_grad=True),
            "b2": Tensor(np.zeros((1, 1)), requires_grad=True),
        }
        self.target = {k: Tensor(v.data.copy()) for k, v in self.params.items()}
        self.opt = Adam(lr=learning_rate)
        self.sync_period = sync_period
        self.td_updates = 0
        self.sync_count = 0
        self.batch_rng = np.random.default_rng(seed + 1)


def _q_forward(params: dict[str, Tensor], x: Tensor) -> Tensor:
    h1 = ad.relu(ad.add(ad.matmul(x, params["W1"]), params["b1"]))
    return ad.add(ad.matmul(h1, params["W2"]), params["b2"])


class PlacementEnv:
    """Episodic environment over one (graph, partition, split, checkpoint).

    ``reset`` restores the starting partition and re-clones the pretrained
    regressor, so episodes are independent draws for the DQN. The env
    keeps ``last_val_loss`` equal to the val MSE of the current parameters
    at all times, and caches per-node embeddings for state construction.
    """

    def __init__(self, graph: NetworkGraph, partition: SensorPartition,
                 split: SplitAssignment, config: ModelConfig,
                 pretrained: dict[str, Tensor], budget: int,
                 finetune_epochs: int = 10):
        check_partition(graph, partition)
        if budget < 0:
            raise InvalidConfig("budget must be >= 0")
        if finetune_epochs < 0:
            raise InvalidConfig("finetune_epochs must be >= 0")
        n_candidates = len(partition.unlabeled - split.val - split.test)
        if budget > n_candidates:
            raise BudgetTooLarge(
                f"budget {budget} exceeds {n_candidates} placeable nodes"
            )
        self.graph = graph
        self.initial_partition = partition
        self.split = split
        self.config = config
        self.pretrained = pretrained
        self.budget = budget
        self.finetune_epochs = finetune_epochs
        self.structure = graph_structure(graph)
        self.reset()

    def reset(self) -> None:
        self.partition = self.initial_partition
        self.params = clone_params(self.pretrained)
        self.placements_made = 0
        self.last_extrinsic = 0.0
        self.last_intrinsic = 0.0
        self._refresh()

    def _refresh(self) -> None:
        with no_grad():
            fwd = forward(self.params, self.graph, self.config, self.structure)
        self.node_embs = fwd.node_emb.data.copy()
        y_hat = fwd.y_hat.data.reshape(-1)
        val_ids = sorted(self.split.val)
        train_ids = sorted(self.partition.train_ids)
        self.last_val_loss = mse_on(y_hat, self.graph.y, val_ids or train_ids)
        self._last_y_hat = y_hat

    def candidates(self) -> list[int]:
        return sorted(self.partition.unlabeled - self.split.val - self.split.test)

    def current_split(self) -> SplitAssignment:
        return SplitAssignment(train=self.partition.train_ids,
                               val=self.split.val, test=self.split.test)

    def test_mse(self) -> float:
        return mse_on(self._last_y_hat, self.graph.y, sorted(self.split.test))


# --------------------------------------------------------------------------
# Core operations
# --------------------------------------------------------------------------

def observe_state(env: PlacementEnv) -> AgentState:
    """Mean-pool cached node embeddings over the sensored (train) nodes."""
    ids = sorted(env.partition.train_ids)
    return AgentState(embedding=env.node_embs[ids].mean(axis=0),
                      placements_made=env.placements_made)


def q_values(qnet: QNet, state: AgentState, candidates: list[int],
             embeddings: np.ndarray, use_target: bool = False) -> np.ndarray:
    """Score each candidate; already-sensored nodes must not be passed in."""
    if len(candidates) == 0:
        raise EmptyCandidateSet("no candidates to score")
    cand = np.asarray(candidates, dtype=np.int64)
    x = np.concatenate(
        [np.broadcast_to(state.embedding, (cand.shape[0], state.embedding.shape[0])),
         embeddings[cand]],
        axis=1,
    )
    params = qnet.target if use_target else qnet.params
    with no_grad():
        out = _q_forward(params, Tensor(x))
    return out.data.reshape(-1)


def _greedy(qnet: QNet, state: AgentState, candidates: list[int],
            embeddings: np.ndarray) -> int:
    # candidates are sorted ascending, argmax takes the first maximum,
    # so ties fall to the lowest node id
    q = q_values(qnet, state, candidates, embeddings)
    return int(candidates[int(np.argmax(q))])


def bucket_of(state: AgentState, threshold: float) -> tuple:
    """Sign-quantize each embedding coordinate to {-1, 0, +1}."""
    e = state.embedding
    return tuple(np.where(e > threshold, 1, np.where(e < -threshold, -1, 0)).tolist())


def intrinsic_reward(policy: ExplorationPolicy, state: AgentState) -> float:
    """Count-based novelty bonus 1/sqrt(visits of this state's bucket)."""
    if policy.kind is not PolicyKind.Curiosity:
        raise WrongPolicyKind(f"intrinsic reward undefined for {policy.kind.name}")
    bucket = bucket_of(state, policy.bucket_threshold)
    count = policy.visit_counts.get(bucket, 0) + 1
    policy.visit_counts[bucket] = count
    return 1.0 / math.sqrt(count)


def step(env: PlacementEnv, action: int,
         policy: ExplorationPolicy | None = None) -> tuple[float, AgentState, bool]:
    """Place a sensor, fine-tune, and pay out the val-MSE drop.

    Reward is (L_prev - L_new) + beta * novelty when ``policy`` is a
    Curiosity policy, plain (L_prev - L_new) otherwise. The env stashes
    the two components as ``last_extrinsic`` / ``last_intrinsic``.
    """
    if env.placements_made >= env.budget:
        raise BudgetExhausted(f"budget of {env.budget} placements already used")
    if action not in env.partition.unlabeled or action in env.split.val or action in env.split.test:
        raise InvalidAction(f"node {action} is not a placement candidate")
    l_prev = env.last_val_loss
    env.partition = env.partition.with_new_sensor(action)
    env.params = warm_finetune(env.params, env.graph, env.current_split(),
                               env.finetune_epochs, env.config, env.structure)
    env.placements_made += 1
    env._refresh()
    next_state = observe_state(env)

    extrinsic = l_prev - env.last_val_loss
    intrinsic = 0.0
    if policy is not None and policy.kind is PolicyKind.Curiosity:
        intrinsic = intrinsic_reward(policy, next_state)
    env.last_extrinsic = extrinsic
    env.last_intrinsic = intrinsic
    beta = policy.beta if policy is not None else 0.0
    reward = extrinsic + beta * intrinsic
    terminal = env.placements_made >= env.budget
    return reward, next_state, terminal


def td_update(qnet: QNet, buffer: ReplayBuffer, batch_size: int = 32,
              gamma: float = 0.95, rng: np.random.Generator | None = None) -> float:
    """One Adam step on mean squared TD error over a uniform mini-batch.

    Targets use the frozen network: y = r + gamma * max_a' Q(s', a'; theta-),
    collapsing to y = r on terminal transitions. The target copy re-syncs
    automatically every ``qnet.sync_period`` calls.
    """
    if len(buffer) == 0:
        raise EmptyBuffer("td_update requires a non-empty buffer")
    batch = buffer.sample(batch_size, rng if rng is not None else qnet.batch_rng)

    targets = np.empty(len(batch))
    for i, t in enumerate(batch):
        if t.terminal or t.next_candidate_embs.shape[0] == 0:
            targets[i] = t.reward
        else:
            targets[i] = t.reward + gamma * _target_max(qnet, t)

    x = np.stack([np.concatenate([t.state.embedding, t.action_emb]) for t in batch])
    pred = _q_forward(qnet.params, Tensor(x))
    loss = ad.mean_reduce(ad.square(ad.sub(pred, Tensor(targets.reshape(-1, 1)))))
    loss_value = loss.item()
    grads = backward(loss)
    named = {k: grads[t] for k, t in qnet.params.items() if t in grads}
    qnet.params = qnet.opt.step(qnet.params, named)
    qnet.td_updates += 1
    if qnet.td_updates % qnet.sync_period == 0:
        sync_target(qnet)
    return loss_value


def _target_max(qnet: QNet, t: Transition) -> float:
    x = np.concatenate(
        [np.broadcast_to(t.next_state.embedding,
                         (t.next_candidate_embs.shape[0], t.next_state.embedding.shape[0])),
         t.next_candidate_embs],
        axis=1,
    )
    with no_grad():
        out = _q_forward(qnet.target, Tensor(x))
    return float(out.data.max())


def sync_target(qnet: QNet) -> None:
    """Hard copy theta -> theta-minus."""
    qnet.target = {k: Tensor(v.data.copy()) for k, v in qnet.params.items()}
    qnet.sync_count += 1


# --------------------------------------------------------------------------
# Episode loop
# --------------------------------------------------------------------------

@dataclass
class EpisodeResult:
    """Trace of one episode: choices, reward components, loss trajectory."""

    chosen: list
    rewards: list
    extrinsic: list
    intrinsic: list
    val_losses: list   # L_0 .. L_K, one more entry than steps
    epsilons: list
    sync_events: int
    final_val_mse: float
    final_test_mse: float
    gamma: float

    def to_dict(self) -> dict:
        return {
            "chosen": [int(a) for a in self.chosen],
            "rewards": [float(r) for r in self.rewards],
            "extrinsic": [float(r) for r in self.extrinsic],
            "intrinsic": [float(r) for r in self.intrinsic],
            "val_losses": [float(v) for v in self.val_losses],
            "epsilons": [float(e) for e in self.epsilons],
            "sync_events": self.sync_events,
            "final_val_mse": float(self.final_val_mse),
            "final_test_mse": float(self.final_test_mse),
            "gamma": float(self.gamma),
        }


def save_episodes(results: list[EpisodeResult], path) -> None:
    try:
        Path(path).write_text(
            json.dumps({"episodes": [r.to_dict() for r in results]}, indent=1),
            encoding="utf-8",
        )
    except OSError as exc:
        raise IoError(str(exc)) from exc


def train_agent(graph: NetworkGraph, partition: SensorPartition,
                split: SplitAssignment, budget: int,
                policy: ExplorationPolicy, episodes: int = 20, seed: int = 0,
                config: ModelConfig | None = None,
                pretrained: dict[str, Tensor] | None = None,
                finetune_epochs: int = 10, batch_size: int = 32,
                gamma: float = 0.95, buffer_capacity: int = 10000,
                q_hidden: int = 32, q_learning_rate: float = 1e-3,
                sync_period: int = 25,
                ) -> tuple[QNet, list[EpisodeResult]]:
    """Run ``episodes`` placement episodes and fit the Q-network online.

    Every episode resets the partition and the regressor checkpoint, rolls
    ``budget`` epsilon-greedy steps, stores transitions, and runs one TD
    update per step once the buffer holds a full batch. When no pretrained
    checkpoint is supplied, one is trained here first. ``policy`` is
    mutated in place (Curiosity visit counts); pass a fresh instance per
    run for reproducibility.
    """
    config = config if config is not None else ModelConfig()
    if pretrained is None:
        pretrained, _ = train(init_params(config, graph.d, graph.d_e),
                              graph, split, config)
    env = PlacementEnv(graph, partition, split, config, pretrained,
                       budget, finetune_epochs)
    qnet = QNet(emb_dim=config.hidden_dim, hidden=q_hidden,
                learning_rate=q_learning_rate, sync_period=sync_period, seed=seed)
    buffer = ReplayBuffer(buffer_capacity)
    rng = np.random.default_rng(seed)
    results: list[EpisodeResult] = []
    global_step = 0

    for _ep in range(episodes):
        env.reset()
        state = observe_state(env)
        chosen, rewards, ext, intr, eps_trace = [], [], [], [], []
        losses = [env.last_val_loss]
        syncs_before = qnet.sync_count
        for _t in range(budget):
            cands = env.candidates()
            eps = policy.epsilon_at(global_step)
            if rng.random() < eps:
                action = int(cands[int(rng.integers(len(cands)))])
            else:
                action = _greedy(qnet, state, cands, env.node_embs)
            action_emb = env.node_embs[action].copy()
            reward, next_state, terminal = step(env, action, policy)
            next_cands = np.asarray(env.candidates(), dtype=np.int64)
            buffer.push(Transition(
                state=state, action=action, action_emb=action_emb,
                reward=reward, next_state=next_state,
                next_candidates=next_cands,
                next_candidate_embs=env.node_embs[next_cands].copy(),
                terminal=terminal,
            ))
            if len(buffer) >= batch_size:
                td_update(qnet, buffer, batch_size, gamma)
            chosen.append(action)
            rewards.append(reward)
            ext.append(env.last_extrinsic)
            intr.append(env.last_intrinsic)
            losses.append(env.last_val_loss)
            eps_trace.append(eps)
            state = next_state
            global_step += 1
        results.append(EpisodeResult(
            chosen=chosen, rewards=rewards, extrinsic=ext, intrinsic=intr,
            val_losses=losses, epsilons=eps_trace,
            sync_events=qnet.sync_count - syncs_before,
            final_val_mse=env.last_val_loss, final_test_mse=env.test_mse(),
            gamma=gamma,
        ))
    return qnet, results


def final_placement(qnet: QNet, env: PlacementEnv, budget: int) -> list[int]:
    """Greedy rollout (epsilon = 0) from a fresh reset; returns the sensor
    list handed to evaluation."""
    env.reset()
    state = observe_state(env)
    chosen: list[int] = []
    for _ in range(budget):
        action = _greedy(qnet, state, env.candidates(), env.node_embs)
        _, state, _ = step(env, action, policy=None)
        chosen.append(action)
    return chosen
