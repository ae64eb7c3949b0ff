"""Placement agent: environment contract, Q-net updates, exploration, replay."""

import math

import numpy as np
import pytest

from volplace.agent import (
    AgentState,
    ExplorationPolicy,
    PlacementEnv,
    PolicyKind,
    QNet,
    ReplayBuffer,
    Transition,
    bucket_of,
    final_placement,
    intrinsic_reward,
    observe_state,
    q_values,
    save_episodes,
    step,
    sync_target,
    td_update,
    train_agent,
)
from volplace.errors import (
    BudgetExhausted,
    BudgetTooLarge,
    EmptyBuffer,
    EmptyCandidateSet,
    InvalidAction,
    WrongPolicyKind,
)
from volplace.graph import (
    ROAD_CLASSES,
    NetworkGraph,
    RoadEdge,
    RoadNode,
    SensorPartition,
    SplitAssignment,
    SyntheticConfig,
    generate_synthetic,
    make_partition,
    make_splits,
)
from volplace.model import ModelConfig, init_params, train

SMALL = ModelConfig(hidden_dim=8, gcn_layers=1, gat_heads=2, head_hidden=8,
                    edge_dim=4, learning_rate=5e-3, max_epochs=40, patience=40,
                    seed=0)


@pytest.fixture(scope="module")
def setup():
    g = generate_synthetic(SyntheticConfig(n_nodes=40, seed=3))
    p = make_partition(g, 0.25, seed=1)
    s = make_splits(g, p, seed=1)
    pre, _ = train(init_params(SMALL, g.d, g.d_e), g, s, SMALL)
    return g, p, s, pre


def make_env(setup, budget=6, finetune_epochs=3):
    g, p, s, pre = setup
    return PlacementEnv(g, p, s, SMALL, pre, budget, finetune_epochs)


def path_graph_setup():
    """8-node path with exactly one placement candidate (node 5)."""
    nodes = [RoadNode(i, np.array([float(i % 3)]), float(10 + i), ROAD_CLASSES[i % 6])
             for i in range(8)]
    edges = [RoadEdge(i, i + 1, np.array([1.0])) for i in range(7)]
    g = NetworkGraph(nodes, edges)
    p = SensorPartition(existing=frozenset(range(5)), new=frozenset(),
                        unlabeled=frozenset({5, 6, 7}))
    s = SplitAssignment(train=p.train_ids, val=frozenset({6}), test=frozenset({7}))
    return g, p, s


# --------------------------------------------------------------------------
# State observation and Q scoring
# --------------------------------------------------------------------------

def test_observe_state_single_train_node():
    g, _, _ = path_graph_setup()
    p = SensorPartition(existing=frozenset({2}), new=frozenset(),
                        unlabeled=frozenset(range(8)) - {2})
    s = SplitAssignment(train=frozenset({2}), val=frozenset({6}), test=frozenset({7}))
    env = PlacementEnv(g, p, s, SMALL, init_params(SMALL, g.d, g.d_e), budget=1)
    st = observe_state(env)
    assert np.array_equal(st.embedding, env.node_embs[2])
    assert st.placements_made == 0
    again = observe_state(env)
    assert np.array_equal(again.embedding, st.embedding)


def test_observe_state_mean_pools_train_set(setup):
    env = make_env(setup)
    st = observe_state(env)
    ids = sorted(env.partition.train_ids)
    assert np.allclose(st.embedding, env.node_embs[ids].mean(axis=0))


def zeroed_qnet(emb_dim=8, **kw):
    qnet = QNet(emb_dim=emb_dim, **kw)
    for t in qnet.params.values():
        t.data[:] = 0.0
    sync_target(qnet)
    return qnet


def test_q_values_zero_net_all_equal_tie_to_lowest_id(setup):
    env = make_env(setup)
    qnet = zeroed_qnet()
    st = observe_state(env)
    cands = env.candidates()
    q = q_values(qnet, st, cands, env.node_embs)
    assert q.shape == (len(cands),)
    assert np.all(q == q[0])
    assert cands[int(np.argmax(q))] == min(cands)
    # single candidate: selected regardless of score
    q1 = q_values(qnet, st, [cands[3]], env.node_embs)
    assert q1.shape == (1,)


def test_q_values_empty_candidates(setup):
    env = make_env(setup)
    with pytest.raises(EmptyCandidateSet):
        q_values(QNet(emb_dim=8), observe_state(env), [], env.node_embs)


def test_candidates_exclude_eval_sets_and_shrink(setup):
    env = make_env(setup)
    cands = env.candidates()
    assert set(cands).isdisjoint(env.split.val)
    assert set(cands).isdisjoint(env.split.test)
    assert set(cands) <= env.partition.unlabeled
    first = cands[0]
    step(env, first)
    assert first not in env.candidates()
    assert first in env.partition.new


# --------------------------------------------------------------------------
# Intrinsic reward and bucketing
# --------------------------------------------------------------------------

def fake_state(vec):
    return AgentState(embedding=np.array(vec, dtype=np.float64), placements_made=0)


def test_bucket_sign_quantization():
    st = fake_state([0.2, -0.05, -0.3, 0.05])
    assert bucket_of(st, 0.1) == (1, 0, -1, 0)


def test_intrinsic_visit_counting():
    pol = ExplorationPolicy(PolicyKind.Curiosity)
    st = fake_state([1.0, -1.0])
    assert intrinsic_reward(pol, st) == 1.0
    seen = [intrinsic_reward(pol, st) for _ in range(3)]
    assert seen[-1] == 0.5  # fourth visit -> 1/sqrt(4)
    assert all(a > b for a, b in zip([1.0] + seen, seen))  # strictly decreasing
    other = fake_state([-1.0, 1.0])
    assert intrinsic_reward(pol, other) == 1.0  # new bucket starts fresh


def test_intrinsic_wrong_policy_kind():
    with pytest.raises(WrongPolicyKind):
        intrinsic_reward(ExplorationPolicy(PolicyKind.Standard), fake_state([1.0]))


# --------------------------------------------------------------------------
# Environment stepping
# --------------------------------------------------------------------------

def test_step_reward_formula(setup):
    env = make_env(setup, budget=2, finetune_epochs=0)
    env.last_val_loss = 2.0
    env._refresh = lambda: setattr(env, "last_val_loss", 1.5)
    pol = ExplorationPolicy(PolicyKind.Curiosity, beta=0.1)
    reward, _, terminal = step(env, env.candidates()[0], pol)
    assert env.last_extrinsic == pytest.approx(0.5, abs=1e-12)
    assert env.last_intrinsic == 1.0
    assert reward == pytest.approx(0.6, abs=1e-12)
    assert terminal is False


def test_step_zero_finetune_gives_zero_extrinsic(setup):
    env = make_env(setup, budget=2, finetune_epochs=0)
    reward, _, _ = step(env, env.candidates()[0])
    assert env.last_extrinsic == 0.0
    assert reward == 0.0
    pol = ExplorationPolicy(PolicyKind.Curiosity, beta=0.1)
    reward2, _, _ = step(env, env.candidates()[0], pol)
    assert reward2 == pytest.approx(0.1 * env.last_intrinsic, abs=1e-12)


def test_step_updates_val_loss_invariant(setup):
    g, _, s, _ = setup
    env = make_env(setup, budget=1, finetune_epochs=3)
    step(env, env.candidates()[0])
    from volplace.model import mse_on, predict
    fresh = mse_on(predict(env.params, g, SMALL), g.y, sorted(s.val))
    assert env.last_val_loss == pytest.approx(fresh, abs=1e-12)


def test_step_errors_and_terminal(setup):
    env = make_env(setup, budget=2, finetune_epochs=0)
    labeled = sorted(env.partition.existing)[0]
    with pytest.raises(InvalidAction):
        step(env, labeled)
    with pytest.raises(InvalidAction):
        step(env, sorted(env.split.val)[0])
    _, _, t1 = step(env, env.candidates()[0])
    assert t1 is False
    _, _, t2 = step(env, env.candidates()[0])
    assert t2 is True
    with pytest.raises(BudgetExhausted):
        step(env, env.candidates()[0])


def test_env_budget_too_large(setup):
    g, p, s, pre = setup
    n_cands = len(p.unlabeled - s.val - s.test)
    with pytest.raises(BudgetTooLarge):
        PlacementEnv(g, p, s, SMALL, pre, budget=n_cands + 1)


# --------------------------------------------------------------------------
# TD updates and target sync
# --------------------------------------------------------------------------

def fab_transition(rng, dim=8, reward=1.0, terminal=False, n_next=3):
    return Transition(
        state=fake_state(rng.normal(size=dim)),
        action=0,
        action_emb=rng.normal(size=dim),
        reward=reward,
        next_state=fake_state(rng.normal(size=dim)),
        next_candidates=np.arange(n_next, dtype=np.int64),
        next_candidate_embs=rng.normal(size=(n_next, dim)),
        terminal=terminal,
    )


def q_of(qnet, t):
    return float(q_values(qnet, t.state, [0], t.action_emb.reshape(1, -1))[0])


def test_td_update_gamma_zero_targets_are_rewards():
    rng = np.random.default_rng(0)
    qnet = QNet(emb_dim=8, seed=1)
    buf = ReplayBuffer()
    trans = [fab_transition(rng, reward=float(i)) for i in range(6)]
    for t in trans:
        buf.push(t)
    expected = np.mean([(q_of(qnet, t) - t.reward) ** 2 for t in trans])
    loss = td_update(qnet, buf, batch_size=6, gamma=0.0)
    assert loss == pytest.approx(expected, rel=1e-12)


def test_td_update_zero_loss_leaves_params_unchanged():
    rng = np.random.default_rng(1)
    qnet = zeroed_qnet()
    qnet.params["b2"].data[:] = 5.0
    sync_target(qnet)
    buf = ReplayBuffer()
    for _ in range(4):
        buf.push(fab_transition(rng, reward=5.0, terminal=True))
    before = {k: v.data.copy() for k, v in qnet.params.items()}
    loss = td_update(qnet, buf, batch_size=4)
    assert loss == 0.0
    for k in before:
        assert np.array_equal(qnet.params[k].data, before[k])


def test_td_update_terminal_excludes_bootstrap():
    rng = np.random.default_rng(2)
    # constant net: Q = 5 everywhere under both theta and theta-minus
    qnet = zeroed_qnet()
    qnet.params["b2"].data[:] = 5.0
    sync_target(qnet)

    buf_t = ReplayBuffer()
    buf_t.push(fab_transition(rng, reward=1.0, terminal=True))
    assert td_update(qnet, buf_t, batch_size=1, gamma=0.95) == pytest.approx(16.0)

    qnet2 = zeroed_qnet()
    qnet2.params["b2"].data[:] = 5.0
    sync_target(qnet2)
    buf_n = ReplayBuffer()
    buf_n.push(fab_transition(rng, reward=1.0, terminal=False))
    # y = 1 + 0.95 * 5 = 5.75, loss = (5 - 5.75)^2
    assert td_update(qnet2, buf_n, batch_size=1, gamma=0.95) == pytest.approx(0.5625)


def test_td_update_empty_buffer():
    with pytest.raises(EmptyBuffer):
        td_update(QNet(emb_dim=4), ReplayBuffer())


def test_sync_target_hard_copy_and_period():
    rng = np.random.default_rng(3)
    qnet = QNet(emb_dim=8, seed=2, sync_period=3)
    init_target = {k: v.data.copy() for k, v in qnet.target.items()}
    buf = ReplayBuffer()
    for _ in range(8):
        buf.push(fab_transition(rng))

    td_update(qnet, buf, batch_size=4)
    # theta moved, theta-minus still the initialization
    assert not np.array_equal(qnet.params["W1"].data, init_target["W1"])
    for k in init_target:
        assert np.array_equal(qnet.target[k].data, init_target[k])

    sync_target(qnet)
    t = fab_transition(rng)
    live = q_values(qnet, t.state, [0], t.action_emb.reshape(1, -1))
    frozen = q_values(qnet, t.state, [0], t.action_emb.reshape(1, -1), use_target=True)
    assert np.allclose(live, frozen)

    # automatic syncs every sync_period td_updates (one manual sync so far)
    before = qnet.sync_count
    for _ in range(6):
        td_update(qnet, buf, batch_size=4)
    assert qnet.td_updates == 7
    assert qnet.sync_count - before == 2


# --------------------------------------------------------------------------
# Replay buffer
# --------------------------------------------------------------------------

def test_replay_fifo_eviction():
    rng = np.random.default_rng(4)
    buf = ReplayBuffer(capacity=5)
    trans = [fab_transition(rng, reward=float(i)) for i in range(8)]
    for t in trans:
        buf.push(t)
    assert len(buf) == 5
    assert list(buf.items) == trans[3:]  # oldest three evicted, order kept
    sample = buf.sample(3, np.random.default_rng(0))
    assert all(t in trans[3:] for t in sample)
    assert len(buf.sample(99, np.random.default_rng(0))) == 5


# --------------------------------------------------------------------------
# Exploration schedules
# --------------------------------------------------------------------------

def test_epsilon_schedules():
    ada = ExplorationPolicy(PolicyKind.AdaptiveEpsilon)
    assert ada.epsilon_at(0) == 1.0
    assert ada.epsilon_at(1) == pytest.approx(0.995)
    eps = [ada.epsilon_at(i) for i in range(1500)]
    assert all(a >= b for a, b in zip(eps, eps[1:]))
    assert all(e >= 0.05 for e in eps)
    assert eps[-1] == 0.05
    assert ExplorationPolicy(PolicyKind.Standard).epsilon_at(999) == 0.1
    assert ExplorationPolicy(PolicyKind.Curiosity).epsilon_at(999) == 0.1


# --------------------------------------------------------------------------
# Full training loop
# --------------------------------------------------------------------------

def test_train_agent_forced_single_candidate():
    g, p, s = path_graph_setup()
    qnet, results = train_agent(
        g, p, s, budget=1, policy=ExplorationPolicy(PolicyKind.Standard),
        episodes=1, seed=0, config=SMALL,
        pretrained=init_params(SMALL, g.d, g.d_e), finetune_epochs=1)
    assert len(results) == 1
    assert results[0].chosen == [5]
    assert len(results[0].rewards) == 1
    assert len(results[0].val_losses) == 2


def test_train_agent_traces_legal_and_telescoping(setup):
    g, p, s, pre = setup
    pol = ExplorationPolicy(PolicyKind.Curiosity)
    initial_candidates = p.unlabeled - s.val - s.test
    qnet, results = train_agent(
        g, p, s, budget=6, policy=pol, episodes=4, seed=0, config=SMALL,
        pretrained=pre, finetune_epochs=3, batch_size=8, sync_period=5)
    assert len(results) == 4
    for r in results:
        assert len(r.chosen) == len(set(r.chosen)) == 6
        assert set(r.chosen) <= initial_candidates
        assert len(r.val_losses) == 7
        assert abs(sum(r.extrinsic) - (r.val_losses[0] - r.val_losses[-1])) < 1e-9
        assert np.allclose(r.rewards,
                           np.array(r.extrinsic) + pol.beta * np.array(r.intrinsic))
        assert r.final_val_mse == r.val_losses[-1]
        assert r.gamma == 0.95
    assert sum(r.sync_events for r in results) == qnet.sync_count >= 1


def test_train_agent_standard_has_no_intrinsic(setup):
    g, p, s, pre = setup
    _, results = train_agent(
        g, p, s, budget=3, policy=ExplorationPolicy(PolicyKind.Standard),
        episodes=2, seed=0, config=SMALL, pretrained=pre, finetune_epochs=2)
    for r in results:
        assert all(x == 0.0 for x in r.intrinsic)
        assert r.rewards == r.extrinsic


def test_train_agent_deterministic(setup):
    g, p, s, pre = setup

    def run(seed):
        return train_agent(
            g, p, s, budget=4, policy=ExplorationPolicy(PolicyKind.Curiosity),
            episodes=3, seed=seed, config=SMALL, pretrained=pre,
            finetune_epochs=2, batch_size=8)[1]

    a, b = run(0), run(0)
    for ra, rb in zip(a, b):
        assert ra.chosen == rb.chosen
        assert ra.rewards == rb.rewards
        assert ra.val_losses == rb.val_losses
    c = run(1)
    assert any(ra.chosen != rc.chosen for ra, rc in zip(a, c))


def test_adaptive_epsilon_trace_spans_episodes(setup):
    g, p, s, pre = setup
    _, results = train_agent(
        g, p, s, budget=3, policy=ExplorationPolicy(PolicyKind.AdaptiveEpsilon),
        episodes=2, seed=0, config=SMALL, pretrained=pre, finetune_epochs=0)
    expected = [0.995 ** i for i in range(6)]
    got = results[0].epsilons + results[1].epsilons
    assert got == pytest.approx(expected)


def test_train_agent_budget_too_large(setup):
    g, p, s, pre = setup
    with pytest.raises(BudgetTooLarge):
        train_agent(g, p, s, budget=1000,
                    policy=ExplorationPolicy(PolicyKind.Standard),
                    episodes=1, config=SMALL, pretrained=pre)


def test_final_placement(setup):
    g, p, s, pre = setup
    pol = ExplorationPolicy(PolicyKind.Standard)
    qnet, _ = train_agent(g, p, s, budget=4, policy=pol, episodes=2, seed=0,
                          config=SMALL, pretrained=pre, finetune_epochs=2,
                          batch_size=8)
    env = PlacementEnv(g, p, s, SMALL, pre, budget=4, finetune_epochs=2)
    assert final_placement(qnet, env, 0) == []
    picks = final_placement(qnet, env, 4)
    assert len(picks) == len(set(picks)) == 4
    assert set(picks) <= p.unlabeled - s.val - s.test
    assert final_placement(qnet, env, 4) == picks  # greedy is deterministic


def test_save_episodes_json(setup, tmp_path):
    g, p, s, pre = setup
    _, results = train_agent(
        g, p, s, budget=2, policy=ExplorationPolicy(PolicyKind.Curiosity),
        episodes=1, seed=0, config=SMALL, pretrained=pre, finetune_epochs=0)
    out = tmp_path / "episodes.json"
    save_episodes(results, out)
    import json
    payload = json.loads(out.read_text())
    ep = payload["episodes"][0]
    assert set(ep) >= {"chosen", "rewards", "extrinsic", "intrinsic",
                       "val_losses", "epsilons", "sync_events",
                       "final_val_mse", "final_test_mse", "gamma"}
    assert ep["chosen"] == results[0].chosen


def test_state_embedding_must_be_finite():
    from volplace.errors import NonFiniteValue
    with pytest.raises(NonFiniteValue):
        AgentState(embedding=np.array([np.nan]), placements_made=0)
