"""Network-flow graph over a detection set.

Variable layout (fixed, shared by cost vectors, solutions and gradients):

    [ x_in (0..N) | x_det (N..2N) | x_out (2N..3N) | x_link (3N..M) ]

Conservation rows of C: row i is the "in" side of detection i
(x_in_i + sum of incoming links - x_det_i = 0), row N + i the "out" side
(x_out_i + sum of outgoing links - x_det_i = 0). Box constraints are
A x <= b with A = [I; -I], b = [1...1, 0...0].

A link i -> j exists when 0 < t(j) - t(i) <= max_frame_gap and, with pruning
on, the box centers are at most pruning_radius * mean box diagonal * gap apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg

from flowtrack.common import ConfigError, GraphError
from flowtrack.detections_io import BoundingBox, Detection, DetectionSet

DEFAULT_EDGE_EPSILON = 1e-3
# Interior-point construction gives up after this many halvings of the edge epsilon.
_MAX_HALVINGS = 60


@dataclass(frozen=True)
class GraphConfig:
    """Link rules. ``max_frame_gap`` is inclusive: detections 1 to max_frame_gap
    frames apart may be linked, so the default of 3 allows two missed frames.
    ``pruning_radius=None`` turns geometric pruning off."""

    max_frame_gap: int = 3
    pruning_radius: float | None = 2.0
    edge_epsilon: float = DEFAULT_EDGE_EPSILON

    def validate(self, prefix: str = "graph") -> None:
        if self.max_frame_gap < 1:
            raise ConfigError(f"{prefix}.max_frame_gap", "must be >= 1")
        if self.pruning_radius is not None and not self.pruning_radius > 0:
            raise ConfigError(f"{prefix}.pruning_radius", "must be > 0 or null")
        if not self.edge_epsilon > 0:
            raise ConfigError(f"{prefix}.edge_epsilon", "must be > 0")


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class FlowGraph:
    detections: tuple[Detection, ...]
    links: tuple[tuple[int, int], ...]
    config: GraphConfig
    C: np.ndarray
    B: np.ndarray
    x0: np.ndarray
    edge_epsilon: float
    in_links: tuple[tuple[int, ...], ...] = field(repr=False)
    out_links: tuple[tuple[int, ...], ...] = field(repr=False)

    @property
    def n(self) -> int:
        return len(self.detections)

    @property
    def m(self) -> int:
        return 3 * self.n + len(self.links)

    @property
    def in_slice(self) -> slice:
        return slice(0, self.n)

    @property
    def det_slice(self) -> slice:
        return slice(self.n, 2 * self.n)

    @property
    def out_slice(self) -> slice:
        return slice(2 * self.n, 3 * self.n)

    @property
    def link_slice(self) -> slice:
        return slice(3 * self.n, self.m)

    def in_index(self, i: int) -> int:
        return i

    def det_index(self, i: int) -> int:
        return self.n + i

    def out_index(self, i: int) -> int:
        return 2 * self.n + i

    def link_index(self, k: int) -> int:
        return 3 * self.n + k

    @cached_property
    def A(self) -> np.ndarray:
        eye = np.eye(self.m)
        return _frozen(np.vstack([eye, -eye]))

    @cached_property
    def b(self) -> np.ndarray:
        return _frozen(np.concatenate([np.ones(self.m), np.zeros(self.m)]))

    @cached_property
    def link_gaps(self) -> np.ndarray:
        return _frozen(
            np.array([self.detections[j].frame - self.detections[i].frame for i, j in self.links], dtype=np.int64)
        )

    def in_degree(self, i: int) -> int:
        return len(self.in_links[i])

    def out_degree(self, i: int) -> int:
        return len(self.out_links[i])


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.right, b.right) - max(a.left, b.left))
    iy = max(0.0, min(a.bottom, b.bottom) - max(a.top, b.top))
    inter = ix * iy
    if inter <= 0.0:
        return 0.0
    return inter / (a.area + b.area - inter)


def _linked(a: Detection, b: Detection, config: GraphConfig) -> bool:
    gap = b.frame - a.frame
    if not 0 < gap <= config.max_frame_gap:
        return False
    if config.pruning_radius is None:
        return True
    (ax, ay), (bx, by) = a.box.center, b.box.center
    distance = float(np.hypot(bx - ax, by - ay))
    mean_diagonal = 0.5 * (a.box.diagonal + b.box.diagonal)
    return distance <= config.pruning_radius * mean_diagonal * gap


def conservation_matrix(n: int, links: tuple[tuple[int, int], ...]) -> np.ndarray:
    m = 3 * n + len(links)
    C = np.zeros((2 * n, m))
    for i in range(n):
        C[i, i] = 1.0
        C[i, n + i] = -1.0
        C[n + i, 2 * n + i] = 1.0
        C[n + i, n + i] = -1.0
    for k, (i, j) in enumerate(links):
        C[n + i, 3 * n + k] = 1.0
        C[j, 3 * n + k] = 1.0
    return C


def null_space_basis(C: np.ndarray) -> np.ndarray:
    """Orthonormal basis of null(C) from a column-pivoted QR of C^T."""
    rows, m = C.shape
    if rows > m:
        raise GraphError(f"conservation matrix has more rows ({rows}) than variables ({m})")
    Q, R, _ = scipy.linalg.qr(C.T, mode="full", pivoting=True)
    diag = np.abs(np.diag(R)) if rows else np.zeros(0)
    tol = max(m, rows) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < rows:
        raise GraphError(f"conservation matrix is rank deficient ({rank} < {rows}); graph construction bug")
    return np.ascontiguousarray(Q[:, rows:])


def _interior_point(n: int, links, in_links, out_links, edge_epsilon: float) -> np.ndarray:
    if not edge_epsilon > 0:
        raise GraphError(f"edge epsilon must be positive, got {edge_epsilon}")
    max_degree = max((max(len(a), len(b)) for a, b in zip(in_links, out_links)), default=0)
    if edge_epsilon * max_degree >= 0.5:
        raise GraphError(
            f"edge epsilon {edge_epsilon:g} too large for node degree {max_degree}; "
            f"use a value below {0.5 / max_degree:g}"
        )
    x0 = np.empty(3 * n + len(links))
    x0[n:2 * n] = 0.5
    x0[3 * n:] = edge_epsilon
    for i in range(n):
        x0[i] = 0.5 - len(in_links[i]) * edge_epsilon
        x0[2 * n + i] = 0.5 - len(out_links[i]) * edge_epsilon
    return x0


def interior_point(graph: FlowGraph, edge_epsilon: float) -> np.ndarray:
    return _interior_point(graph.n, graph.links, graph.in_links, graph.out_links, edge_epsilon)


def build_graph(detections: DetectionSet | tuple[Detection, ...], config: GraphConfig | None = None) -> FlowGraph:
    config = config or GraphConfig()
    config.validate()
    dets = tuple(detections.detections if isinstance(detections, DetectionSet) else detections)
    if not dets:
        raise GraphError("cannot build a flow graph without detections")
    if any(a.frame > b.frame for a, b in zip(dets, dets[1:])):
        raise GraphError("detections must be sorted by frame")

    n = len(dets)
    links: list[tuple[int, int]] = []
    for i, a in enumerate(dets):
        for j in range(i + 1, n):
            b = dets[j]
            if b.frame - a.frame > config.max_frame_gap:
                break
            if _linked(a, b, config):
                links.append((i, j))
    links_t = tuple(links)

    in_links: list[list[int]] = [[] for _ in range(n)]
    out_links: list[list[int]] = [[] for _ in range(n)]
    for k, (i, j) in enumerate(links_t):
        out_links[i].append(k)
        in_links[j].append(k)
    in_t = tuple(tuple(v) for v in in_links)
    out_t = tuple(tuple(v) for v in out_links)

    C = conservation_matrix(n, links_t)
    B = null_space_basis(C)

    eps = config.edge_epsilon
    for _ in range(_MAX_HALVINGS):
        try:
            x0 = _interior_point(n, links_t, in_t, out_t, eps)
            break
        except GraphError:
            eps *= 0.5
    else:  # pragma: no cover - 2**-60 always satisfies any realistic degree
        raise GraphError("could not find a strictly interior starting point")

    return FlowGraph(
        detections=dets,
        links=links_t,
        config=config,
        C=_frozen(C),
        B=_frozen(B),
        x0=_frozen(x0),
        edge_epsilon=eps,
        in_links=in_t,
        out_links=out_t,
    )
