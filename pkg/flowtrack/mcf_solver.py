"""Exact min-cost flow inference by successive shortest paths.

Residual network: source S, sink T, and two nodes per detection (entry and
exit) joined by the detection arc. Every arc has unit capacity:

    S -> entry_i (c_in)   entry_i -> exit_i (c_det)   exit_i -> T (c_out)
    exit_i -> entry_j (c_link)

Costs may be negative, so potentials start from one label-correcting pass;
afterwards every augmentation uses Dijkstra on reduced costs and stops as
soon as the cheapest S -> T path no longer has negative true cost. The flow
amount (number of tracks) falls out of that stopping rule.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from flowtrack.common import SolverError
from flowtrack.detections_io import DetectionSet, Trajectory, TrajectorySet
from flowtrack.flow_graph import FlowGraph

SOURCE = 0
SINK = 1
# Augment only along paths cheaper than this; guards against rounding noise.
NEGATIVE_PATH_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class IntegerSolution:
    x: np.ndarray
    objective: float


class _Arc:
    """One directed arc of the residual network."""

    __slots__ = ("head", "cost", "cap", "rev", "var")

    def __init__(self, head: int, cost: float, cap: int, var: int) -> None:
        self.head = head
        self.cost = cost
        self.cap = cap
        self.rev: Optional["_Arc"] = None
        self.var = var  # index into x for forward arcs, -1 for reverse arcs


class _Residual:
    def __init__(self, node_count: int) -> None:
        self.adj: list[list[_Arc]] = [[] for _ in range(node_count)]

    def add_arc(self, tail: int, head: int, cost: float, var: int, used: bool = False) -> None:
        forward = _Arc(head, cost, 0 if used else 1, var)
        backward = _Arc(tail, -cost, 1 if used else 0, -1)
        forward.rev = backward
        backward.rev = forward
        self.adj[tail].append(forward)
        self.adj[head].append(backward)

    def label_correcting(self, source: int) -> list[float]:
        """Bellman-Ford distances from ``source`` over arcs with residual capacity.

        Returns -inf everywhere if a negative cycle is reachable.
        """
        n = len(self.adj)
        dist = [math.inf] * n
        dist[source] = 0.0
        for _ in range(n):
            changed = False
            for u in range(n):
                du = dist[u]
                if du == math.inf:
                    continue
                for arc in self.adj[u]:
                    if arc.cap > 0 and du + arc.cost < dist[arc.head]:
                        dist[arc.head] = du + arc.cost
                        changed = True
            if not changed:
                return dist
        return [-math.inf] * n

    def dijkstra(self, source: int, potential: list[float]) -> tuple[list[float], list[Optional[_Arc]]]:
        n = len(self.adj)
        dist = [math.inf] * n
        parent: list[Optional[_Arc]] = [None] * n
        dist[source] = 0.0
        heap = [(0.0, source)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            pu = potential[u]
            for arc in self.adj[u]:
                if arc.cap <= 0:
                    continue
                v = arc.head
                reduced = arc.cost + pu - potential[v]
                if reduced < 0.0:
                    reduced = 0.0
                nd = d + reduced
                if nd < dist[v]:
                    dist[v] = nd
                    parent[v] = arc
                    heapq.heappush(heap, (nd, v))
        return dist, parent


def _entry(i: int) -> int:
    return 2 + 2 * i


def _exit(i: int) -> int:
    return 3 + 2 * i


def _check_costs(graph: FlowGraph, costs: np.ndarray) -> np.ndarray:
    costs = np.asarray(costs, dtype=float)
    if costs.shape != (graph.m,):
        raise SolverError(f"cost vector has shape {costs.shape}, graph needs ({graph.m},)")
    if not np.all(np.isfinite(costs)):
        raise SolverError("cost vector contains non-finite entries")
    return costs


def _residual_network(graph: FlowGraph, costs: np.ndarray, x: np.ndarray | None = None) -> _Residual:
    n = graph.n
    net = _Residual(2 * n + 2)
    used = (lambda k: bool(x[k])) if x is not None else (lambda k: False)
    for i in range(n):
        net.add_arc(SOURCE, _entry(i), costs[graph.in_index(i)], graph.in_index(i), used(graph.in_index(i)))
        net.add_arc(_entry(i), _exit(i), costs[graph.det_index(i)], graph.det_index(i), used(graph.det_index(i)))
        net.add_arc(_exit(i), SINK, costs[graph.out_index(i)], graph.out_index(i), used(graph.out_index(i)))
    for k, (i, j) in enumerate(graph.links):
        idx = graph.link_index(k)
        net.add_arc(_exit(i), _entry(j), costs[idx], idx, used(idx))
    return net


def solve_min_cost_flow(graph: FlowGraph, costs: np.ndarray) -> IntegerSolution:
    costs = _check_costs(graph, costs)
    net = _residual_network(graph, costs)

    # The network is acyclic before the first augmentation, so this pass
    # always terminates with finite labels for every node.
    potential = net.label_correcting(SOURCE)
    potential = [p if math.isfinite(p) else 0.0 for p in potential]

    while True:
        dist, parent = net.dijkstra(SOURCE, potential)
        if dist[SINK] == math.inf:
            break
        path_cost = dist[SINK] + potential[SINK] - potential[SOURCE]
        if path_cost >= -NEGATIVE_PATH_TOL:
            break
        node = SINK
        while node != SOURCE:
            arc = parent[node]
            arc.cap -= 1
            arc.rev.cap += 1
            node = arc.rev.head
        for v, d in enumerate(dist):
            if d < math.inf:
                potential[v] += d

    x = np.zeros(graph.m, dtype=np.int64)
    for arcs in net.adj:
        for arc in arcs:
            if arc.var >= 0 and arc.cap == 0:
                x[arc.var] = 1
    return IntegerSolution(x=x, objective=float(costs @ x))


def residual_path_cost(graph: FlowGraph, costs: np.ndarray, solution: IntegerSolution) -> float:
    """Cheapest S -> T path cost in the residual network of ``solution``.

    Non-negative at an optimum; -inf signals a negative residual cycle.
    """
    costs = _check_costs(graph, costs)
    net = _residual_network(graph, costs, solution.x)
    return net.label_correcting(SOURCE)[SINK]


def _check_flow(graph: FlowGraph, x: np.ndarray) -> None:
    if x.shape != (graph.m,):
        raise SolverError(f"solution has shape {x.shape}, graph needs ({graph.m},)")
    if not np.all((x == 0) | (x == 1)):
        raise SolverError("solution is not a {0,1} flow")
    residual = graph.C @ x
    if np.any(residual != 0):
        worst = int(np.argmax(np.abs(residual)))
        raise SolverError(f"flow conservation violated at constraint row {worst}")


def extract_trajectories(
    graph: FlowGraph,
    solution: IntegerSolution,
    detections: DetectionSet | None = None,
    *,
    first_id: int = 0,
) -> TrajectorySet:
    """Decode each unit S -> T path into a trajectory, ids in discovery order."""
    x = np.asarray(solution.x)
    _check_flow(graph, x)
    n = graph.n
    sequence_id = detections.sequence_id if detections is not None else ""

    covered = np.zeros(n, dtype=bool)
    trajectories: list[Trajectory] = []
    for start in range(n):
        if not x[graph.in_index(start)]:
            continue
        path = [start]
        current = start
        while not x[graph.out_index(current)]:
            nxt = [graph.links[k][1] for k in graph.out_links[current] if x[graph.link_index(k)]]
            if len(nxt) != 1:
                raise SolverError(f"detection {current} has {len(nxt)} active outgoing links")
            current = nxt[0]
            path.append(current)
        for i in path:
            if covered[i]:
                raise SolverError(f"detection {i} lies on two paths")
            covered[i] = True
        trajectories.append(
            Trajectory(first_id + len(trajectories), tuple(graph.detections[i] for i in path))
        )

    active = x[graph.det_slice].astype(bool)
    if np.any(active != covered):
        raise SolverError("active detections are not partitioned by the decoded paths")
    return TrajectorySet(sequence_id, tuple(trajectories))
