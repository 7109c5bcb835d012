"""Cost producers for the flow graph.

Every producer returns a length-M cost vector in the graph's variable layout.

Hand-crafted baselines
  handcrafted_A  c_det = log(1 - p), c_link = -log E(v, V_max) - (dt - 1) log B_rate
                 with E(v, V_max) = 1/2 + 1/2 erf((-v + V_max/2) / (V_max/4))
  handcrafted_B  c_det = alpha p, c_link = (1 - IoU) + beta (dt - 1) [+ gamma (1 - s)]
  Both use c_in = c_out = C.

Learned models share the unary part (constants for c_in and c_out, linear in
the confidence for c_det) and differ in the pairwise network over the pair
feature: linear, mlp1 (64), mlp2 (32, 32) or twostream (64, 64 per stream,
the second stream reading an auxiliary per-link vector, concatenated into a
final linear layer). Hidden units are rectified-linear, outputs linear.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.special

from flowtrack.common import ModelError, write_bytes, write_json
from flowtrack.detections_io import Detection
from flowtrack.flow_graph import FlowGraph, iou

ARCHITECTURES = ("handcrafted_A", "handcrafted_B", "linear", "mlp1", "mlp2", "twostream")
HANDCRAFTED = ("handcrafted_A", "handcrafted_B")
LEARNED = ("linear", "mlp1", "mlp2", "twostream")
HIDDEN_LAYERS = {"linear": (), "mlp1": (64,), "mlp2": (32, 32), "twostream": (64, 64)}

FEATURE_NAMES = ("d_left", "d_top", "d_width", "d_height", "conf_a", "conf_b", "d_time", "iou")
# Column count per feature set: "b" drops the IoU column, "bo" keeps it.
FEATURE_SETS = {"b": 7, "bo": 8}

FORMAT_VERSION = 1
P_MAX = 1.0 - 1e-6
# Floor on the motion likelihood E so -log E stays finite for very fast pairs.
E_MIN = 1e-12

DEFAULT_HANDCRAFTED_A = {"C": 0.5, "B_rate": 0.3, "V_max": 30.0}
DEFAULT_HANDCRAFTED_B = {"C": 1.0, "alpha": -3.0, "beta": 0.5, "gamma": 0.0}

UNARY_INIT = {"c_in": 0.5, "c_out": 0.5, "alpha": -0.5, "bias": 0.0}


# --------------------------------------------------------------------------- #
# Features
# --------------------------------------------------------------------------- #
@dataclass(frozen=True)
class PairFeature:
    d_left: float
    d_top: float
    d_width: float
    d_height: float
    conf_a: float
    conf_b: float
    d_time: float
    iou: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FEATURE_NAMES])


def pair_features(a: Detection, b: Detection, max_frame_gap: int) -> PairFeature:
    gap = b.frame - a.frame
    if not 0 < gap <= max_frame_gap:
        raise ModelError(f"pair frames {a.frame} -> {b.frame} outside (0, {max_frame_gap}]")
    scale = 0.5 * (a.box.height + b.box.height)
    return PairFeature(
        d_left=(b.box.left - a.box.left) / scale,
        d_top=(b.box.top - a.box.top) / scale,
        d_width=(b.box.width - a.box.width) / scale,
        d_height=(b.box.height - a.box.height) / scale,
        conf_a=a.confidence,
        conf_b=b.confidence,
        d_time=gap / max_frame_gap,
        iou=iou(a.box, b.box),
    )


@dataclass(frozen=True, eq=False)
class EdgeFeatures:
    """Everything the cost producers read about one graph."""

    confidences: np.ndarray  # (N,)
    pairs: np.ndarray  # (L, 8) pair features, FEATURE_NAMES order
    gaps: np.ndarray  # (L,) frame differences
    speeds: np.ndarray  # (L,) center distance per frame

    @property
    def n(self) -> int:
        return int(self.confidences.shape[0])

    @property
    def l(self) -> int:
        return int(self.pairs.shape[0])

    @property
    def m(self) -> int:
        return 3 * self.n + self.l


def _link_geometry(detections, links, max_frame_gap: int):
    pairs = np.zeros((len(links), len(FEATURE_NAMES)))
    gaps = np.zeros(len(links))
    speeds = np.zeros(len(links))
    for k, (i, j) in enumerate(links):
        a, b = detections[i], detections[j]
        pairs[k] = pair_features(a, b, max_frame_gap).as_array()
        gaps[k] = b.frame - a.frame
        (ax, ay), (bx, by) = a.box.center, b.box.center
        speeds[k] = math.hypot(bx - ax, by - ay) / gaps[k]
    return pairs, gaps, speeds


def edge_features(graph: FlowGraph) -> EdgeFeatures:
    pairs, gaps, speeds = _link_geometry(graph.detections, graph.links, graph.config.max_frame_gap)
    confidences = np.array([d.confidence for d in graph.detections])
    return EdgeFeatures(confidences, pairs, gaps, speeds)


GEOMETRY_AUX_DIM = 4


def geometric_aux(graph: FlowGraph) -> np.ndarray:
    """Built-in auxiliary link vector for the second stream.

    Columns: center speed over mean box diagonal, log height ratio, IoU and
    the normalized frame gap. Precomputed descriptors of any other length
    can be passed to model_forward instead.
    """
    out = np.zeros((len(graph.links), GEOMETRY_AUX_DIM))
    tau = graph.config.max_frame_gap
    for k, (i, j) in enumerate(graph.links):
        a, b = graph.detections[i], graph.detections[j]
        gap = b.frame - a.frame
        (ax, ay), (bx, by) = a.box.center, b.box.center
        diagonal = 0.5 * (a.box.diagonal + b.box.diagonal)
        out[k] = (
            math.hypot(bx - ax, by - ay) / (gap * diagonal),
            math.log(b.box.height / a.box.height),
            iou(a.box, b.box),
            gap / tau,
        )
    return out


def squash_scores(raw: np.ndarray) -> np.ndarray:
    """Map raw per-link classifier scores into [0, 1] with a logistic."""
    return scipy.special.expit(np.asarray(raw, dtype=float))


# --------------------------------------------------------------------------- #
# Hand-crafted baselines
# --------------------------------------------------------------------------- #
def _handcrafted_a_costs(confidences, gaps, speeds, C: float, b_rate: float, v_max: float) -> np.ndarray:
    if not 0.0 < b_rate < 1.0:
        raise ModelError(f"B_rate must be in (0, 1), got {b_rate}")
    if not v_max > 0.0:
        raise ModelError(f"V_max must be > 0, got {v_max}")
    n = confidences.shape[0]
    p = np.minimum(confidences, P_MAX)
    e = 0.5 + 0.5 * scipy.special.erf((-speeds + 0.5 * v_max) / (0.25 * v_max))
    link = -np.log(np.maximum(e, E_MIN)) - (gaps - 1.0) * math.log(b_rate)
    return np.concatenate([np.full(n, C), np.log1p(-p), np.full(n, C), link])


def _handcrafted_b_costs(confidences, ious, gaps, C, alpha, beta, gamma, link_scores) -> np.ndarray:
    n = confidences.shape[0]
    link = (1.0 - ious) + beta * (gaps - 1.0)
    if link_scores is not None:
        s = np.asarray(link_scores, dtype=float).reshape(-1)
        if s.shape != link.shape:
            raise ModelError(f"link scores have shape {s.shape}, expected {link.shape}")
        link = link + gamma * (1.0 - s)
    return np.concatenate([np.full(n, C), alpha * confidences, np.full(n, C), link])


def handcrafted_A(detections, links, params: Mapping[str, float] | None = None, *, max_frame_gap: int | None = None) -> np.ndarray:
    params = {**DEFAULT_HANDCRAFTED_A, **(params or {})}
    gap_bound = max_frame_gap or max((detections[j].frame - detections[i].frame for i, j in links), default=1)
    _, gaps, speeds = _link_geometry(detections, links, gap_bound)
    confidences = np.array([d.confidence for d in detections])
    return _handcrafted_a_costs(confidences, gaps, speeds, params["C"], params["B_rate"], params["V_max"])


def handcrafted_B(
    detections,
    links,
    params: Mapping[str, float] | None = None,
    link_scores: np.ndarray | None = None,
) -> np.ndarray:
    params = {**DEFAULT_HANDCRAFTED_B, **(params or {})}
    gaps = np.array([detections[j].frame - detections[i].frame for i, j in links], dtype=float)
    ious = np.array([iou(detections[i].box, detections[j].box) for i, j in links])
    confidences = np.array([d.confidence for d in detections])
    return _handcrafted_b_costs(
        confidences, ious, gaps, params["C"], params["alpha"], params["beta"], params["gamma"], link_scores
    )


# --------------------------------------------------------------------------- #
# Parameters
# --------------------------------------------------------------------------- #
@dataclass(frozen=True, eq=False)
class CostModelParams:
    architecture: str
    arrays: Mapping[str, np.ndarray]
    feature_set: str = "bo"

    def __post_init__(self) -> None:
        if self.architecture not in ARCHITECTURES:
            raise ModelError(f"unknown architecture {self.architecture!r}")
        if self.feature_set not in FEATURE_SETS:
            raise ModelError(f"unknown feature set {self.feature_set!r}")
        frozen = {}
        for name, value in self.arrays.items():
            arr = np.array(value, dtype=np.float64)
            arr.flags.writeable = False
            frozen[name] = arr
        object.__setattr__(self, "arrays", frozen)
        _check_shapes(self)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(self.arrays)

    @property
    def trainable(self) -> bool:
        return self.architecture in LEARNED

    @property
    def feature_dim(self) -> int:
        return FEATURE_SETS[self.feature_set]

    @property
    def aux_dim(self) -> int:
        return int(self.arrays["aux_W0"].shape[1]) if "aux_W0" in self.arrays else 0

    @property
    def parameter_count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def replace(self, arrays: Mapping[str, np.ndarray]) -> "CostModelParams":
        return CostModelParams(self.architecture, {**self.arrays, **arrays}, self.feature_set)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays.values()])

    def from_vector(self, vector: np.ndarray) -> "CostModelParams":
        vector = np.asarray(vector, dtype=float)
        if vector.shape != (self.parameter_count,):
            raise ModelError(f"parameter vector has shape {vector.shape}, expected ({self.parameter_count},)")
        arrays, offset = {}, 0
        for name, a in self.arrays.items():
            arrays[name] = vector[offset:offset + a.size].reshape(a.shape)
            offset += a.size
        return CostModelParams(self.architecture, arrays, self.feature_set)


def _expected_shapes(architecture: str, feature_dim: int, aux_dim: int) -> dict[str, tuple[int, ...]]:
    if architecture == "handcrafted_A":
        return {name: (1,) for name in DEFAULT_HANDCRAFTED_A}
    if architecture == "handcrafted_B":
        return {name: (1,) for name in DEFAULT_HANDCRAFTED_B}
    shapes: dict[str, tuple[int, ...]] = {name: (1,) for name in UNARY_INIT}
    hidden = HIDDEN_LAYERS[architecture]
    fan_in = feature_dim
    for layer, width in enumerate(hidden):
        shapes[f"W{layer}"] = (width, fan_in)
        shapes[f"b{layer}"] = (width,)
        fan_in = width
    if architecture == "twostream":
        fan_in = aux_dim
        for layer, width in enumerate(hidden):
            shapes[f"aux_W{layer}"] = (width, fan_in)
            shapes[f"aux_b{layer}"] = (width,)
            fan_in = width
        shapes["out_W"] = (1, 2 * hidden[-1])
        shapes["out_b"] = (1,)
    else:
        shapes[f"W{len(hidden)}"] = (1, fan_in)
        shapes[f"b{len(hidden)}"] = (1,)
    return shapes


def _check_shapes(params: CostModelParams) -> None:
    aux_dim = params.aux_dim
    if params.architecture == "twostream" and aux_dim < 1:
        raise ModelError("twostream parameters need an aux stream (aux_W0)")
    expected = _expected_shapes(params.architecture, params.feature_dim, aux_dim)
    if set(expected) != set(params.arrays):
        missing = sorted(set(expected) - set(params.arrays))
        extra = sorted(set(params.arrays) - set(expected))
        raise ModelError(f"{params.architecture} parameters: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if params.arrays[name].shape != shape:
            raise ModelError(f"{params.architecture} parameter {name} has shape {params.arrays[name].shape}, expected {shape}")


def init_params(
    architecture: str,
    *,
    feature_set: str = "bo",
    aux_dim: int = 0,
    seed: int = 0,
) -> CostModelParams:
    """Fresh parameters: uniform(+-1/sqrt(fan_in)) weights, zero biases."""
    if architecture in HANDCRAFTED:
        return handcrafted_params(architecture)
    if architecture not in LEARNED:
        raise ModelError(f"unknown architecture {architecture!r}")
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in _expected_shapes(architecture, FEATURE_SETS[feature_set], aux_dim).items():
        if name in UNARY_INIT:
            arrays[name] = np.array([UNARY_INIT[name]])
        elif len(shape) == 2:
            bound = 1.0 / math.sqrt(shape[1])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return CostModelParams(architecture, arrays, feature_set)


def handcrafted_params(architecture: str, values: Mapping[str, float] | None = None) -> CostModelParams:
    defaults = DEFAULT_HANDCRAFTED_A if architecture == "handcrafted_A" else DEFAULT_HANDCRAFTED_B
    if architecture not in HANDCRAFTED:
        raise ModelError(f"{architecture!r} is not a hand-crafted cost")
    values = dict(values or {})
    unknown = sorted(set(values) - set(defaults))
    if unknown:
        raise ModelError(f"unknown {architecture} parameters {unknown}")
    merged = {**defaults, **values}
    return CostModelParams(architecture, {k: np.array([float(v)]) for k, v in merged.items()})


# --------------------------------------------------------------------------- #
# Forward / backward
# --------------------------------------------------------------------------- #
@dataclass(eq=False)
class ForwardCache:
    params: CostModelParams
    features: EdgeFeatures
    inputs: list[np.ndarray] = field(default_factory=list)
    pre: list[np.ndarray] = field(default_factory=list)
    aux_inputs: list[np.ndarray] = field(default_factory=list)
    aux_pre: list[np.ndarray] = field(default_factory=list)
    joined: np.ndarray | None = None


def _relu(z: np.ndarray) -> np.ndarray:
    return np.maximum(z, 0.0)


def _stream(x: np.ndarray, params: CostModelParams, prefix: str, depth: int, inputs: list, pre: list) -> np.ndarray:
    h = x
    for layer in range(depth):
        inputs.append(h)
        z = h @ params[f"{prefix}W{layer}"].T + params[f"{prefix}b{layer}"]
        pre.append(z)
        h = _relu(z)
    return h


def model_forward(
    params: CostModelParams,
    features: EdgeFeatures,
    aux: np.ndarray | None = None,
) -> tuple[np.ndarray, ForwardCache]:
    cache = ForwardCache(params, features)
    p = features.confidences
    n, l = features.n, features.l

    if params.architecture == "handcrafted_A":
        costs = _handcrafted_a_costs(
            p, features.gaps, features.speeds,
            float(params["C"][0]), float(params["B_rate"][0]), float(params["V_max"][0]),
        )
        return costs, cache
    if params.architecture == "handcrafted_B":
        costs = _handcrafted_b_costs(
            p, features.pairs[:, FEATURE_NAMES.index("iou")], features.gaps,
            float(params["C"][0]), float(params["alpha"][0]), float(params["beta"][0]),
            float(params["gamma"][0]), aux,
        )
        return costs, cache

    x = features.pairs[:, :params.feature_dim]
    hidden = HIDDEN_LAYERS[params.architecture]
    h = _stream(x, params, "", len(hidden), cache.inputs, cache.pre)

    if params.architecture == "twostream":
        if aux is None:
            raise ModelError("twostream model needs auxiliary link features")
        aux = np.asarray(aux, dtype=float)
        if aux.shape != (l, params.aux_dim):
            raise ModelError(f"aux features have shape {aux.shape}, expected ({l}, {params.aux_dim})")
        h_aux = _stream(aux, params, "aux_", len(hidden), cache.aux_inputs, cache.aux_pre)
        joined = np.concatenate([h, h_aux], axis=1)
        cache.joined = joined
        link = (joined @ params["out_W"].T + params["out_b"])[:, 0]
    else:
        cache.inputs.append(h)
        last = len(hidden)
        link = (h @ params[f"W{last}"].T + params[f"b{last}"])[:, 0]

    costs = np.concatenate([
        np.full(n, params["c_in"][0]),
        params["alpha"][0] * p + params["bias"][0],
        np.full(n, params["c_out"][0]),
        link,
    ])
    return costs, cache


def _stream_backward(
    grad_h: np.ndarray, params: CostModelParams, prefix: str, inputs: list, pre: list, grads: dict
) -> None:
    for layer in reversed(range(len(pre))):
        grad_z = grad_h * (pre[layer] > 0.0)
        grads[f"{prefix}W{layer}"] = grad_z.T @ inputs[layer]
        grads[f"{prefix}b{layer}"] = grad_z.sum(axis=0)
        grad_h = grad_z @ params[f"{prefix}W{layer}"]


def model_backward(params: CostModelParams, cache: ForwardCache, dl_dc: np.ndarray) -> dict[str, np.ndarray]:
    """Reverse-mode gradients of L w.r.t. every learned parameter."""
    if cache.params is not params:
        raise ModelError("stale forward cache: parameters changed since model_forward")
    if not params.trainable:
        raise ModelError(f"{params.architecture} has no trainable parameters")
    features = cache.features
    n = features.n
    dl_dc = np.asarray(dl_dc, dtype=float)
    if dl_dc.shape != (features.m,):
        raise ModelError(f"dL/dc has shape {dl_dc.shape}, expected ({features.m},)")

    g_in, g_det, g_out, g_link = dl_dc[:n], dl_dc[n:2 * n], dl_dc[2 * n:3 * n], dl_dc[3 * n:]
    grads: dict[str, np.ndarray] = {
        "c_in": np.array([g_in.sum()]),
        "c_out": np.array([g_out.sum()]),
        "alpha": np.array([g_det @ features.confidences]),
        "bias": np.array([g_det.sum()]),
    }

    grad_out = g_link[:, None]
    if params.architecture == "twostream":
        grads["out_W"] = grad_out.T @ cache.joined
        grads["out_b"] = grad_out.sum(axis=0)
        grad_joined = grad_out @ params["out_W"]
        width = grad_joined.shape[1] // 2
        _stream_backward(grad_joined[:, :width], params, "", cache.inputs, cache.pre, grads)
        _stream_backward(grad_joined[:, width:], params, "aux_", cache.aux_inputs, cache.aux_pre, grads)
    else:
        last = len(cache.pre)
        grads[f"W{last}"] = grad_out.T @ cache.inputs[last]
        grads[f"b{last}"] = grad_out.sum(axis=0)
        grad_h = grad_out @ params[f"W{last}"]
        _stream_backward(grad_h, params, "", cache.inputs, cache.pre, grads)

    return {name: grads[name].reshape(params[name].shape) for name in params.names}


# --------------------------------------------------------------------------- #
# Persistence
# --------------------------------------------------------------------------- #
def params_summary(params: CostModelParams) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "architecture": params.architecture,
        "feature_set": params.feature_set,
        "parameter_count": params.parameter_count,
        "shapes": {name: list(a.shape) for name, a in params.arrays.items()},
        "scalars": {name: float(a.ravel()[0]) for name, a in params.arrays.items() if a.size == 1},
    }


def save_params(path: str, params: CostModelParams, *, root: str | None = None) -> str:
    """Write the .npz container plus a ``.json`` summary sidecar next to it."""
    buffer = io.BytesIO()
    np.savez(
        buffer,
        __format_version__=np.array(FORMAT_VERSION),
        __architecture__=np.array(params.architecture),
        __feature_set__=np.array(params.feature_set),
        **{f"param_{name}": a for name, a in params.arrays.items()},
    )
    written = write_bytes(path, buffer.getvalue(), root=root)
    stem = path[:-4] if path.endswith(".npz") else path
    write_json(stem + ".json", params_summary(params), root=root)
    return written


def load_params(path: str) -> CostModelParams:
    with np.load(path, allow_pickle=False) as data:
        version = int(data["__format_version__"])
        if version != FORMAT_VERSION:
            raise ModelError(f"{path}: parameter container version {version}, expected {FORMAT_VERSION}")
        architecture = str(data["__architecture__"])
        feature_set = str(data["__feature_set__"])
        arrays = {key[len("param_"):]: np.array(data[key], dtype=np.float64) for key in data.files if key.startswith("param_")}
    return CostModelParams(architecture, arrays, feature_set)
