"""Structured hinge, loss-augmented inference, Adam training, piecewise."""

import numpy as np
import pytest

from flowtrack.assoc import Assignment, GoldAssignment, build_graph
from flowtrack.features import BevConfig, FeatureConfig, FvConfig
from flowtrack.learning import (
    AdamState,
    TrainConfig,
    TrainInstance,
    hinge_gradient,
    hinge_loss,
    loss_augmented_solve,
    prepare_instances,
    train_end_to_end,
)
from flowtrack.scoring import ScorerConfig, init_model, score_graph
from flowtrack.solver import solve, solve_exhaustive

from helpers import make_detection, make_sequence, sequence_from_positions

SMALL_CFG = FeatureConfig(
    bev=BevConfig(rows=12, cols=16, cell_m=0.5, x_min=0.0, y_min=-3.0),
    fv=FvConfig(rows=10, cols=12),
    appearance_blocks=2,
    block_len=3,
)
SMALL_SCORER = ScorerConfig(det_hidden=4, bev_hidden=3, fv_hidden=3)


def _tiny_graph(positions, costs=None):
    seq = sequence_from_positions(positions)
    graph = build_graph(seq, (0, len(positions)))
    if costs is not None:
        graph = graph.with_costs(np.asarray(costs, dtype=float))
    return seq, graph


def _random_small_instance(rng, n_frames=2, per_frame=2):
    frames = []
    det_id = 0
    for f in range(n_frames):
        frame = []
        for i in range(per_frame):
            app = rng.uniform(0.0, 1.0, (2, 3))
            frame.append(make_detection(det_id, f, 3.0 + 0.4 * f + 1.6 * i,
                                        -1.0 + 1.1 * i, appearance=app))
            det_id += 1
        frames.append(frame)
    from flowtrack.core import EgoMotion
    seq = make_sequence(frames, ego=[EgoMotion(1.0, 0.1, 0.1)] * n_frames)
    graph = build_graph(seq, (0, n_frames))
    return seq, graph


def _feasible_gold(graph, rng):
    """Any feasible assignment works as a gold for solver-level tests."""
    probe = solve(graph.with_costs(rng.uniform(-1.0, 1.0, graph.n_vars)))
    return GoldAssignment(probe.assignment, 0)


def test_loss_augmented_zero_costs_zero_gold_maximizes_hamming():
    # theta = 0, gold = all zeros: augmentation pays +1 per activated
    # variable, so the best response activates as much as possible and the
    # augmented objective is the maximum feasible Hamming distance
    seq, graph = _tiny_graph([[(10.0, 0.0)], [(10.0, 0.0)]])
    theta = np.zeros(graph.n_vars)
    gold = Assignment(np.zeros(graph.n_vars, dtype=np.uint8))
    sol = loss_augmented_solve(graph, theta, gold)
    # oracle: exhaustive solve on the augmented costs
    oracle = solve_exhaustive(graph.with_costs(theta + 1.0))
    assert sol.objective == oracle.objective
    # two separate single-detection tracks activate det x2, new x2, end x2
    # = 6 variables, beating the linked chain's 5
    assert sol.objective == 6.0


def test_loss_augmented_keeps_confident_gold():
    # single detection with theta_det = 5: deactivating the gold triple
    # would gain 3 Hamming but lose 5 objective, so the argmax stays gold
    seq, graph = _tiny_graph([[(10.0, 0.0)]], costs=[5.0, 0.0, 0.0])
    gold = Assignment(np.array([1, 1, 1], dtype=np.uint8))
    sol = loss_augmented_solve(graph, graph.costs, gold)
    assert np.array_equal(sol.assignment.values, gold.values)
    assert sol.objective == pytest.approx(5.0)  # theta.y* + Hamming(=0)


def test_loss_augmented_matches_exhaustive_oracle_on_random_instances():
    rng = np.random.default_rng(77)
    for _ in range(40):
        seq, graph = _random_small_instance(rng)
        graph = graph.with_costs(rng.uniform(-2, 2, graph.n_vars))
        gold = _feasible_gold(graph, rng)
        sol = loss_augmented_solve(graph, graph.costs, gold.assignment)
        gold_values = gold.assignment.values.astype(float)
        augmented = graph.costs + (1.0 - 2.0 * gold_values)
        oracle = solve_exhaustive(graph.with_costs(augmented))
        expected = oracle.objective + float(gold_values.sum())
        assert sol.objective == expected


def test_loss_augmented_with_zero_hamming_weight_is_plain_solve():
    rng = np.random.default_rng(5)
    seq, graph = _random_small_instance(rng)
    graph = graph.with_costs(rng.uniform(-2, 2, graph.n_vars))
    gold = _feasible_gold(graph, rng)
    plain = solve(graph)
    augmented = loss_augmented_solve(graph, graph.costs, gold.assignment,
                                     hamming_weights=0.0)
    assert augmented.objective == plain.objective
    assert np.array_equal(augmented.assignment.values, plain.assignment.values)


def _instance_bundle(rng, model_std=0.1):
    from flowtrack.features import compute_graph_features

    seq, graph = _random_small_instance(rng)
    features = compute_graph_features(graph, seq, SMALL_CFG)
    gold = _feasible_gold(graph, rng)
    return TrainInstance(seq, graph, gold, features)


def test_hinge_terms_nonnegative_and_zero_iff_gold_argmax():
    rng = np.random.default_rng(31)
    model = init_model(rng, SMALL_CFG, SMALL_SCORER, init_std=0.1)
    for _ in range(15):
        inst = _instance_bundle(rng)
        batch = hinge_loss([inst], model, SMALL_CFG)
        term = batch.hinge_terms[0]
        assert term >= 0.0
        theta, _ = score_graph(model, inst.graph, inst.seq, SMALL_CFG,
                               features=inst.features)
        gold_values = inst.gold.assignment.values.astype(float)
        augmented = theta + (1.0 - 2.0 * gold_values)
        oracle = solve_exhaustive(inst.graph.with_costs(augmented))
        oracle_term = (oracle.objective + gold_values.sum()) - float(np.dot(theta, gold_values))
        assert term == pytest.approx(oracle_term, abs=1e-9)
        if term == 0.0:
            assert np.array_equal(batch.violators[0].values, inst.gold.assignment.values)


def test_hinge_dtheta_is_violator_minus_gold():
    rng = np.random.default_rng(32)
    model = init_model(rng, SMALL_CFG, SMALL_SCORER, init_std=0.1)
    insts = [_instance_bundle(rng) for _ in range(3)]
    batch = hinge_loss(insts, model, SMALL_CFG)
    assert batch.S > 0
    for inst, violator, dtheta in zip(insts, batch.violators, batch.dthetas):
        expected = violator.values.astype(float) - inst.gold.assignment.values.astype(float)
        assert np.array_equal(dtheta, expected)
        assert set(np.unique(dtheta)) <= {-1.0, 0.0, 1.0}


def test_gate_zeroes_updates_when_gold_is_safely_optimal():
    # one detection, huge positive det cost, gold active: margin beats any
    # Hamming gain, the batch sum is zero, and training must not move
    seq, graph = _tiny_graph([[(10.0, 0.0)]], costs=[8.0, 0.0, 0.0])
    det = seq.frames[0][0]
    frames = [[make_detection(0, 0, 4.0, 0.0, appearance=np.full((2, 3), 0.4))]]
    seq = make_sequence(frames)
    graph = build_graph(seq, (0, 1))
    from flowtrack.features import compute_graph_features

    features = compute_graph_features(graph, seq, SMALL_CFG)
    gold = GoldAssignment(Assignment(np.array([1, 1, 1], dtype=np.uint8)), 0)
    inst = TrainInstance(seq, graph, gold, features)

    rng = np.random.default_rng(4)
    model = init_model(rng, SMALL_CFG, SMALL_SCORER, init_std=1e-3)
    # force a confident detection score through the bias of the last layer
    model.det.layers[-1].biases[0] = 8.0
    model.theta_new[...] = 0.0
    model.theta_end[...] = 0.0

    batch = hinge_loss([inst], model, SMALL_CFG)
    assert batch.S == 0.0
    assert all(not d.any() for d in batch.dthetas)

    before = {name: t.copy() for name, t in model.parameters()}
    result = train_end_to_end([inst], TrainConfig(iterations=3, seed=1),
                              SMALL_CFG, SMALL_SCORER, model=model)
    for name, tensor in result.model.parameters():
        assert np.array_equal(tensor, before[name]), name


def test_zero_iteration_training_returns_initialization():
    rng = np.random.default_rng(9)
    insts = [_instance_bundle(rng)]
    cfg = TrainConfig(iterations=0, seed=123, init_std=1e-3)
    result = train_end_to_end(insts, cfg, SMALL_CFG, SMALL_SCORER)
    reference = init_model(np.random.default_rng(123), SMALL_CFG, SMALL_SCORER,
                           init_std=1e-3)
    for (n1, t1), (n2, t2) in zip(result.model.parameters(), reference.parameters()):
        assert n1 == n2
        assert np.array_equal(t1, t2)
    assert len(result.loss_trace) == 1


def test_training_is_deterministic():
    rng = np.random.default_rng(10)
    insts = [_instance_bundle(rng) for _ in range(4)]
    cfg = TrainConfig(iterations=12, batch_size=2, seed=7, init_std=0.01)
    r1 = train_end_to_end(insts, cfg, SMALL_CFG, SMALL_SCORER)
    r2 = train_end_to_end(insts, cfg, SMALL_CFG, SMALL_SCORER)
    assert r1.loss_trace == r2.loss_trace
    for (_, t1), (_, t2) in zip(r1.model.parameters(), r2.model.parameters()):
        assert np.array_equal(t1, t2)


def test_training_reduces_loss_on_tiny_batch():
    rng = np.random.default_rng(11)
    insts = [_instance_bundle(rng) for _ in range(3)]
    cfg = TrainConfig(iterations=60, batch_size=8, seed=3, init_std=1e-3)
    result = train_end_to_end(insts, cfg, SMALL_CFG, SMALL_SCORER,
                              adam=AdamState(lr=1e-2))
    assert result.loss_trace[-1] < result.loss_trace[0]


def _hinge_fd_check(seed, coords_per_tensor=5, step=1e-4, rtol=1e-3):
    rng = np.random.default_rng(seed)
    insts = [_instance_bundle(rng) for _ in range(2)]
    model = init_model(rng, SMALL_CFG, SMALL_SCORER, init_std=0.1)
    jitter_rng = np.random.default_rng(seed + 5000)
    jitters = [jitter_rng.uniform(-1e-6, 1e-6, inst.graph.n_vars) for inst in insts]

    batch = hinge_loss(insts, model, SMALL_CFG, theta_jitter=jitters)
    grad = hinge_gradient(batch, model)

    def loss() -> float:
        return hinge_loss(insts, model, SMALL_CFG, theta_jitter=jitters).S

    checked = 0
    for name, tensor in model.parameters():
        flat = tensor.reshape(-1)
        k = min(coords_per_tensor, flat.size)
        picks = rng.choice(flat.size, size=k, replace=False)
        for idx in picks:
            keep = flat[idx]
            flat[idx] = keep + step
            up = loss()
            flat[idx] = keep - step
            down = loss()
            flat[idx] = keep
            fd = (up - down) / (2 * step)
            an = float(grad.tensors[name].reshape(-1)[idx])
            denom = max(abs(fd), abs(an), 1e-6)
            assert abs(fd - an) / denom <= rtol, (
                f"seed {seed} {name}[{idx}]: fd={fd:.8g} analytic={an:.8g}")
            checked += 1
    assert checked > 20


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_hinge_gradient_matches_finite_differences(seed):
    _hinge_fd_check(seed)


def test_prepare_instances_windows_and_feature_slices():
    from flowtrack.datagen import ScenarioConfig, generate
    from flowtrack.features import compute_graph_features

    seq, gt_tracks, _ = generate(ScenarioConfig(n_vehicles=3, n_frames=9, seed=21,
                                                appearance_blocks=2, block_len=3))
    insts = prepare_instances([(seq, gt_tracks)], SMALL_CFG, window_len=4)
    assert insts
    for inst in insts:
        start, stop = inst.graph.window
        assert stop - start <= 4
        direct = compute_graph_features(inst.graph, inst.seq, SMALL_CFG)
        assert np.allclose(inst.features.app_sims, direct.app_sims)
        assert (inst.features.bev_products != direct.bev_products).nnz == 0
        assert (inst.features.fv_products != direct.fv_products).nnz == 0
