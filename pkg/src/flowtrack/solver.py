"""Exact maximization of cost . y over flow-feasible binary assignments.

The association LP is solved as a min-cost flow on a split-node network:
each detection j becomes a unit-capacity arc u_j -> v_j, entries come from
the source, exits go to the sink, and links join v_j -> u_k. Arc costs are
exact negations of the variable costs, so pushing unit flow along a
source->sink path activates one trajectory and min cost flow maximizes the
original objective.

Successive shortest paths (SSP): augment one unit along the current
shortest source->sink path while that path has negative cost. The first
pass runs Bellman-Ford (arcs can be very negative); later passes reuse
node potentials and a heap-based label-correcting search that stays exact
even when floating-point reduced costs dip marginally below zero, so no
tolerance enters the solver.

Tie-breaking is fixed and documented: arcs are scanned in a fixed
frame-major order, relaxations improve strictly, and equal-distance heap
entries pop by node id, so among equally short paths the one discovered
through the lowest-ordered arcs wins. The exhaustive oracle instead
returns the lexicographically smallest optimal vector; the two agree on
the objective value, which is what the equivalence guarantee is about.
"""

from __future__ import annotations

import heapq
import itertools
from dataclasses import dataclass

import numpy as np

from .assoc import Assignment, AssociationGraph, check_feasible
from .core import Trajectory, decode_trajectories
from .errors import DataFormatError, NumericalError


@dataclass(frozen=True, eq=False)
class FlowNetwork:
    """Split-node unit-capacity network; arc i realizes variable i."""

    n_nodes: int
    arc_src: np.ndarray     # int32, arc -> tail node
    arc_dst: np.ndarray     # int32, arc -> head node
    arc_cost: np.ndarray    # float64, exact negation of the variable cost
    scan_order: np.ndarray  # relaxation order, topological for the empty network

    SOURCE = 0
    SINK = 1

    @property
    def n_arcs(self) -> int:
        return len(self.arc_src)


def build_network(graph: AssociationGraph) -> FlowNetwork:
    """Arc i <-> variable i; node ids: source 0, sink 1, u_j = 2+2j, v_j = 3+2j."""
    layout = graph.layout
    n = layout.n_dets
    m = layout.n_vars
    src = np.empty(m, dtype=np.int32)
    dst = np.empty(m, dtype=np.int32)
    for j in range(n):
        u, v = 2 + 2 * j, 3 + 2 * j
        src[layout.det_var(j)], dst[layout.det_var(j)] = u, v
        src[layout.new_var(j)], dst[layout.new_var(j)] = FlowNetwork.SOURCE, u
        src[layout.end_var(j)], dst[layout.end_var(j)] = v, FlowNetwork.SINK
    for l, (j, k) in enumerate(layout.links):
        var = layout.link_var(l)
        src[var], dst[var] = 3 + 2 * j, 2 + 2 * k

    # Frame-major scan order (entry, detection, exit, outgoing links per
    # frame) is topological while no flow is present, so the first
    # Bellman-Ford pass settles in one sweep.
    by_frame: dict[int, list[int]] = {}
    for j, (f, _) in enumerate(layout.det_keys):
        by_frame.setdefault(f, []).append(j)
    order: list[int] = []
    links_from: dict[int, list[int]] = {}
    for l, (j, _) in enumerate(layout.links):
        links_from.setdefault(j, []).append(layout.link_var(l))
    for f in sorted(by_frame):
        for j in by_frame[f]:
            order.append(layout.new_var(j))
            order.append(layout.det_var(j))
            order.append(layout.end_var(j))
            order.extend(links_from.get(j, []))

    return FlowNetwork(
        n_nodes=2 + 2 * n,
        arc_src=src,
        arc_dst=dst,
        arc_cost=-graph.costs,
        scan_order=np.asarray(order, dtype=np.int32),
    )


@dataclass(frozen=True, eq=False)
class BellmanFordResult:
    dist: np.ndarray                      # shortest distance per node (inf if unreached)
    parent_arc: np.ndarray                # arc index entering each node (-1 at roots)
    parent_dir: np.ndarray                # +1 forward residual, -1 backward residual
    negative_cycle: list[int] | None      # arc indices forming a cycle, or None


def bellman_ford(network: FlowNetwork, source: int,
                 flow: np.ndarray | None = None) -> BellmanFordResult:
    """Exact shortest paths under negative arc costs on the residual network.

    `flow` selects residual direction per arc: 0 leaves the arc forward at
    its cost, 1 reverses it at the negated cost. Relaxation sweeps arcs in
    the fixed scan order with strict improvement and stops early once a
    sweep changes nothing; one extra sweep detects a negative cycle.
    """
    if flow is None:
        flow = np.zeros(network.n_arcs, dtype=np.uint8)
    dist = np.full(network.n_nodes, np.inf)
    dist[source] = 0.0
    parent_arc = np.full(network.n_nodes, -1, dtype=np.int64)
    parent_dir = np.zeros(network.n_nodes, dtype=np.int8)

    def sweep() -> int | None:
        changed = None
        for a in network.scan_order:
            if flow[a]:
                u, v, c = network.arc_dst[a], network.arc_src[a], -network.arc_cost[a]
                d = -1
            else:
                u, v, c = network.arc_src[a], network.arc_dst[a], network.arc_cost[a]
                d = 1
            du = dist[u]
            if du == np.inf:
                continue
            if du + c < dist[v]:
                dist[v] = du + c
                parent_arc[v] = a
                parent_dir[v] = d
                changed = int(v)
        return changed

    for _ in range(network.n_nodes - 1):
        if sweep() is None:
            return BellmanFordResult(dist, parent_arc, parent_dir, None)
    witness = sweep()
    if witness is not None:
        # Still relaxing after n-1 sweeps: the witness's parent chain leads
        # into a negative cycle. Walk n steps to land on it, then collect.
        def step_back(node: int) -> int:
            a = int(parent_arc[node])
            return int(network.arc_src[a] if parent_dir[node] > 0 else network.arc_dst[a])

        node = witness
        for _ in range(network.n_nodes):
            node = step_back(node)
        cycle: list[int] = []
        cur = node
        while True:
            cycle.append(int(parent_arc[cur]))
            cur = step_back(cur)
            if cur == node:
                break
        return BellmanFordResult(dist, parent_arc, parent_dir, cycle[::-1])
    return BellmanFordResult(dist, parent_arc, parent_dir, None)


def _residual_adjacency(network: FlowNetwork) -> list[list[list]]:
    """Mutable residual adjacency for the empty flow: adj[u] holds
    [head, arc, residual_cost, direction] entries."""
    adj: list[list[list]] = [[] for _ in range(network.n_nodes)]
    for a in range(network.n_arcs):
        adj[int(network.arc_src[a])].append(
            [int(network.arc_dst[a]), a, float(network.arc_cost[a]), 1])
    return adj


def _flip_arc(network: FlowNetwork, adj: list[list[list]], a: int, direction: int) -> None:
    """Move arc `a` to the other residual direction after an augmentation."""
    src, dst = int(network.arc_src[a]), int(network.arc_dst[a])
    cost = float(network.arc_cost[a])
    if direction > 0:   # was forward, now saturated: dst -> src at -cost
        tail, entry = src, [src, a, -cost, -1]
        head = dst
    else:               # was reversed, now empty again: src -> dst at +cost
        tail, entry = dst, [dst, a, cost, 1]
        head = src
    for i, e in enumerate(adj[tail]):
        if e[1] == a:
            del adj[tail][i]
            break
    adj[head].append(entry)


def _dijkstra_reduced(adj: list[list[list]], n_nodes: int,
                      potential: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Dijkstra on potential-reduced residual costs from the source.

    With exact arithmetic every reduced cost is nonnegative after a
    shortest-path potential update; in floats they can dip to ~-1e-16
    (zero-cost residual cycles are generic when costs are symmetric), so
    negatives are clamped to zero. The clamp only perturbs distances at
    rounding level; the caller re-derives each augmenting path's true
    cost by an exact sum before deciding anything.
    """
    dist = np.full(n_nodes, np.inf)
    dist[FlowNetwork.SOURCE] = 0.0
    parent_arc = np.full(n_nodes, -1, dtype=np.int64)
    parent_dir = np.zeros(n_nodes, dtype=np.int8)
    heap: list[tuple[float, int]] = [(0.0, FlowNetwork.SOURCE)]
    while heap:
        d, u = heapq.heappop(heap)
        if d > dist[u]:
            continue
        pu = potential[u]
        for v, a, c, direction in adj[u]:
            nd = d + max(c + pu - potential[v], 0.0)
            if nd < dist[v]:
                dist[v] = nd
                parent_arc[v] = a
                parent_dir[v] = direction
                heapq.heappush(heap, (nd, v))
    return dist, parent_arc, parent_dir


@dataclass(frozen=True, eq=False)
class Solution:
    """Optimal assignment, its objective (recomputed as costs . y), trajectories."""

    assignment: Assignment
    objective: float
    trajectories: list[Trajectory]


def _extract_assignment(graph: AssociationGraph, flow: np.ndarray) -> Solution:
    assignment = Assignment(flow.astype(np.uint8))
    objective = float(np.dot(graph.costs, assignment.values))
    trajectories = decode_trajectories(assignment, graph)
    return Solution(assignment, objective, trajectories)


def solve(graph: AssociationGraph) -> Solution:
    """Global maximizer of costs . y subject to flow conservation.

    Successive shortest paths with unit augmentations; keeps augmenting
    while the shortest source->sink path has negative (reduced-from-cost)
    value, i.e. while activating one more trajectory still gains
    objective. Deterministic for fixed input.
    """
    return _solve_with_trace(graph)[0]


def _solve_with_trace(graph: AssociationGraph) -> tuple[Solution, list[float]]:
    """solve() plus the per-augmentation path costs, for property checks."""
    costs = graph.costs
    if not np.all(np.isfinite(costs)):
        bad = int(np.flatnonzero(~np.isfinite(costs))[0])
        raise NumericalError(f"non-finite cost at variable {bad}")

    network = build_network(graph)
    flow = np.zeros(network.n_arcs, dtype=np.uint8)
    potential = np.zeros(network.n_nodes)
    adj = _residual_adjacency(network)
    path_costs: list[float] = []

    first = True
    while True:
        if first:
            # Arcs can be arbitrarily negative before any potential exists.
            res = bellman_ford(network, FlowNetwork.SOURCE, flow)
            if res.negative_cycle is not None:
                raise NumericalError("negative cycle in residual network before augmentation")
            dist, parent_arc, parent_dir = res.dist, res.parent_arc, res.parent_dir
            first = False
        else:
            dist, parent_arc, parent_dir = _dijkstra_reduced(adj, network.n_nodes, potential)

        if not np.isfinite(dist[FlowNetwork.SINK]):
            break

        # Walk the tree once to collect the path, then price it exactly on
        # the raw residual costs: stop and augment decisions never see the
        # clamped reduced values.
        path: list[tuple[int, int]] = []
        node = FlowNetwork.SINK
        while node != FlowNetwork.SOURCE:
            a = int(parent_arc[node])
            if a < 0:
                raise NumericalError("broken shortest-path tree during augmentation")
            direction = int(parent_dir[node])
            path.append((a, direction))
            node = int(network.arc_src[a] if direction > 0 else network.arc_dst[a])
        path_cost = float(sum(
            network.arc_cost[a] if direction > 0 else -network.arc_cost[a]
            for a, direction in path))
        if not path_cost < 0.0:
            break
        path_costs.append(path_cost)

        # Potential update: pi += reduced distances, with unreached nodes
        # pinned at the max finite label so arcs leaving them stay priced
        # nonnegative. (No residual arc enters an unreached node from the
        # reachable side, and augmentation only touches reachable nodes.)
        finite = np.isfinite(dist)
        filled = dist.copy()
        filled[~finite] = dist[finite].max() if finite.any() else 0.0
        potential = potential + filled

        for a, direction in path:
            if direction > 0:
                assert flow[a] == 0, "integrality violated: forward arc already saturated"
                flow[a] = 1
            else:
                assert flow[a] == 1, "integrality violated: backward arc carries no flow"
                flow[a] = 0
            _flip_arc(network, adj, a, direction)

    return _extract_assignment(graph, flow), path_costs


_EXHAUSTIVE_CAP = 25


def solve_exhaustive(graph: AssociationGraph) -> Solution:
    """Optimum by direct enumeration of the feasible set; test oracle.

    Feasible assignments are exactly: an active subset of detections plus,
    per adjacent frame pair, a partial matching among the active ones
    restricted to existing link variables (entry/exit values then follow).
    Enumerating those is equivalent to enumerating all binary vectors and
    filtering by check_feasible, which is also how this oracle is verified
    on tiny instances. Ties in the objective resolve to the
    lexicographically smallest optimal vector.
    """
    layout = graph.layout
    if layout.n_vars > _EXHAUSTIVE_CAP:
        raise DataFormatError(
            f"exhaustive oracle capped at {_EXHAUSTIVE_CAP} variables, got {layout.n_vars}"
        )
    costs = graph.costs
    n = layout.n_dets

    frames = sorted({f for f, _ in layout.det_keys})
    dets_in_frame = {f: [j for j, (fj, _) in enumerate(layout.det_keys) if fj == f]
                     for f in frames}
    links_between: dict[int, list[tuple[int, int, int]]] = {f: [] for f in frames[:-1]}
    for l, (j, k) in enumerate(layout.links):
        links_between[layout.det_keys[j][0]].append((l, j, k))

    def matchings(pair_links: list[tuple[int, int, int]],
                  active: frozenset[int]) -> list[list[tuple[int, int, int]]]:
        usable = [(l, j, k) for (l, j, k) in pair_links if j in active and k in active]
        sources = sorted({j for _, j, _ in usable})
        out: list[list[tuple[int, int, int]]] = []

        def rec(i: int, used_targets: frozenset[int], chosen: list[tuple[int, int, int]]):
            if i == len(sources):
                out.append(list(chosen))
                return
            rec(i + 1, used_targets, chosen)  # source stays unmatched
            for (l, j, k) in usable:
                if j == sources[i] and k not in used_targets:
                    chosen.append((l, j, k))
                    rec(i + 1, used_targets | {k}, chosen)
                    chosen.pop()

        rec(0, frozenset(), [])
        return out

    best_obj = 0.0
    best_vec = np.zeros(layout.n_vars, dtype=np.uint8)  # all-zero is always feasible
    best_key = best_vec.tobytes()

    for active_mask in range(1 << n):
        active = frozenset(j for j in range(n) if active_mask & (1 << j))
        base = sum(costs[layout.det_var(j)] + costs[layout.new_var(j)]
                   + costs[layout.end_var(j)] for j in active)
        per_pair = [matchings(links_between[f], active) for f in frames[:-1]]
        for combo in itertools.product(*per_pair):
            obj = base
            for pair_choice in combo:
                for (l, j, k) in pair_choice:
                    obj += (costs[layout.link_var(l)]
                            - costs[layout.end_var(j)] - costs[layout.new_var(k)])
            if obj < best_obj:
                continue
            vec = np.zeros(layout.n_vars, dtype=np.uint8)
            for j in active:
                vec[layout.det_var(j)] = 1
                vec[layout.new_var(j)] = 1
                vec[layout.end_var(j)] = 1
            for pair_choice in combo:
                for (l, j, k) in pair_choice:
                    vec[layout.link_var(l)] = 1
                    vec[layout.end_var(j)] = 0
                    vec[layout.new_var(k)] = 0
            key = vec.tobytes()
            if obj > best_obj or (obj == best_obj and key < best_key):
                best_obj = obj
                best_vec = vec
                best_key = key

    assignment = Assignment(best_vec)
    ok, violation = check_feasible(graph, assignment)
    assert ok, f"oracle produced infeasible assignment: {violation}"
    objective = float(np.dot(costs, assignment.values))
    trajectories = decode_trajectories(assignment, graph)
    return Solution(assignment, objective, trajectories)
