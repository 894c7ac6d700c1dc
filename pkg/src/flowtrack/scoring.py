"""Learnable cost functions producing the objective coefficients.

A detection scorer maps per-detection features to a scalar activation
cost; a three-branch match scorer (weighted appearance-block similarity,
bird's-eye product branch, frontal-view product branch, fused by one
dense layer) prices each candidate link; entry and exit costs are learned
scalars broadcast over their variables.

Forward passes cache activations so `backward` can assemble the exact
gradient of any linear functional of the cost vector with respect to
every parameter. Hidden layers use relu (subgradient 0 at the kink),
outputs are linear.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .assoc import AssociationGraph
from .core import Detection, TrackSequence
from .errors import DataFormatError, NumericalError
from .features import FeatureConfig, GraphFeatures, compute_graph_features

_ACTIVATIONS = ("identity", "relu", "tanh")

# scale constants for the raw geometry features, keeping them O(1)
_DIST_SCALE = 10.0
_VOLUME_SCALE = 10.0
_AREA_SCALE = 1.0e4


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0.0).astype(np.float64)
    return 1.0 - np.tanh(z) ** 2


@dataclass(eq=False)
class DenseLayer:
    weights: np.ndarray   # (out, in)
    biases: np.ndarray    # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.weights.ndim != 2 or self.biases.shape != (self.weights.shape[0],):
            raise ValueError(
                f"inconsistent layer shapes {self.weights.shape} / {self.biases.shape}"
            )
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.biases))):
            raise ValueError("non-finite layer parameters")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    def forward(self, x):
        """x: (batch, in) dense or sparse; returns (preactivation, output)."""
        z = x @ self.weights.T + self.biases
        z = np.asarray(z)
        return z, _act(self.activation, z)


@dataclass(eq=False)
class DetScorer:
    """1-2 dense layers mapping detection features to one scalar."""

    layers: list[DenseLayer]

    def __post_init__(self):
        if not 1 <= len(self.layers) <= 2:
            raise ValueError("detection scorer takes 1 or 2 layers")
        if self.layers[-1].out_dim != 1:
            raise ValueError("detection scorer must end in a single output")


@dataclass(eq=False)
class MatchScorer:
    """Appearance block weights + two spatial branches + fusion layer."""

    appearance_weights: np.ndarray   # (blocks,)
    bev_branch: list[DenseLayer]
    fv_branch: list[DenseLayer]
    fusion: DenseLayer

    def __post_init__(self):
        self.appearance_weights = np.asarray(self.appearance_weights, dtype=np.float64)
        if self.appearance_weights.ndim != 1:
            raise ValueError("appearance weights must be a flat vector")
        for name, branch in (("bev", self.bev_branch), ("fv", self.fv_branch)):
            if not 1 <= len(branch) <= 2:
                raise ValueError(f"{name} branch takes 1 or 2 layers")
        expect = (len(self.appearance_weights)
                  + self.bev_branch[-1].out_dim + self.fv_branch[-1].out_dim)
        if self.fusion.in_dim != expect or self.fusion.out_dim != 1:
            raise ValueError(
                f"fusion layer must map {expect} -> 1, got "
                f"{self.fusion.in_dim} -> {self.fusion.out_dim}"
            )


@dataclass(eq=False)
class CostModel:
    """Everything learnable: detection scorer, match scorer, entry/exit scalars."""

    det: DetScorer
    link: MatchScorer
    theta_new: np.ndarray  # 0-d array so optimizer updates stay in place
    theta_end: np.ndarray

    def __post_init__(self):
        self.theta_new = np.asarray(self.theta_new, dtype=np.float64).reshape(())
        self.theta_end = np.asarray(self.theta_end, dtype=np.float64).reshape(())

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        """Canonical (name, tensor) list; checkpoint and optimizer order."""
        out: list[tuple[str, np.ndarray]] = []
        for i, layer in enumerate(self.det.layers):
            out.append((f"det.{i}.weights", layer.weights))
            out.append((f"det.{i}.biases", layer.biases))
        out.append(("link.appearance_weights", self.link.appearance_weights))
        for branch_name, branch in (("bev", self.link.bev_branch),
                                    ("fv", self.link.fv_branch)):
            for i, layer in enumerate(branch):
                out.append((f"link.{branch_name}.{i}.weights", layer.weights))
                out.append((f"link.{branch_name}.{i}.biases", layer.biases))
        out.append(("link.fusion.weights", self.link.fusion.weights))
        out.append(("link.fusion.biases", self.link.fusion.biases))
        out.append(("theta_new", self.theta_new))
        out.append(("theta_end", self.theta_end))
        return out

    def copy(self) -> "CostModel":
        det = DetScorer([DenseLayer(l.weights.copy(), l.biases.copy(), l.activation)
                         for l in self.det.layers])
        link = MatchScorer(
            self.link.appearance_weights.copy(),
            [DenseLayer(l.weights.copy(), l.biases.copy(), l.activation)
             for l in self.link.bev_branch],
            [DenseLayer(l.weights.copy(), l.biases.copy(), l.activation)
             for l in self.link.fv_branch],
            DenseLayer(self.link.fusion.weights.copy(),
                       self.link.fusion.biases.copy(), self.link.fusion.activation),
        )
        return CostModel(det, link, self.theta_new.copy(), self.theta_end.copy())


@dataclass(eq=False)
class Gradient:
    """Shape-congruent with CostModel.parameters()."""

    tensors: dict[str, np.ndarray]

    def __add__(self, other: "Gradient") -> "Gradient":
        return Gradient({k: self.tensors[k] + other.tensors[k] for k in self.tensors})


def zero_gradient(model: CostModel) -> Gradient:
    return Gradient({name: np.zeros_like(t) for name, t in model.parameters()})


@dataclass(frozen=True)
class ScorerConfig:
    det_hidden: int = 16
    bev_hidden: int = 16
    fv_hidden: int = 16


def truncated_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    """Normal(0, std) with samples beyond 2 std re-drawn."""
    out = rng.normal(0.0, std, size=shape)
    while True:
        bad = np.abs(out) > 2.0 * std
        if not bad.any():
            return out
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))


def det_input_dim(cfg: FeatureConfig) -> int:
    return cfg.appearance_blocks * cfg.block_len + 4


def init_model(rng: np.random.Generator, feature_cfg: FeatureConfig,
               scorer_cfg: ScorerConfig = ScorerConfig(),
               init_std: float = 1e-3) -> CostModel:
    """Fresh model with truncated-normal parameters everywhere."""
    def layer(out_dim, in_dim, activation):
        return DenseLayer(truncated_normal(rng, (out_dim, in_dim), init_std),
                          truncated_normal(rng, (out_dim,), init_std), activation)

    d_in = det_input_dim(feature_cfg)
    det = DetScorer([layer(scorer_cfg.det_hidden, d_in, "relu"),
                     layer(1, scorer_cfg.det_hidden, "identity")])
    n_bev = feature_cfg.bev.rows * feature_cfg.bev.cols
    n_fv = feature_cfg.fv.rows * feature_cfg.fv.cols
    link = MatchScorer(
        appearance_weights=truncated_normal(rng, (feature_cfg.appearance_blocks,), init_std),
        bev_branch=[layer(scorer_cfg.bev_hidden, n_bev, "relu")],
        fv_branch=[layer(scorer_cfg.fv_hidden, n_fv, "relu")],
        fusion=layer(1, feature_cfg.appearance_blocks + scorer_cfg.bev_hidden
                     + scorer_cfg.fv_hidden, "identity"),
    )
    return CostModel(det, link,
                     truncated_normal(rng, (), init_std),
                     truncated_normal(rng, (), init_std))


def detection_input(det: Detection) -> np.ndarray:
    """Concatenated appearance blocks plus scaled box geometry features:
    ground distance from ego, box volume, yaw, 2D box area."""
    b3, b2 = det.box3d, det.box2d
    geometry = np.array([
        np.hypot(b3.center_x, b3.center_y) / _DIST_SCALE,
        (b3.length * b3.width * b3.height) / _VOLUME_SCALE,
        b3.yaw,
        b2.area / _AREA_SCALE,
    ])
    return np.concatenate([det.appearance_flat, geometry])


@dataclass(eq=False)
class ScoreCache:
    """Activations retained by score_graph for the backward pass."""

    det_inputs: np.ndarray
    det_layers: list[tuple[np.ndarray, np.ndarray]]   # (layer input, preactivation)
    features: GraphFeatures
    bev_layers: list[tuple[object, np.ndarray]]
    fv_layers: list[tuple[object, np.ndarray]]
    app_part: np.ndarray
    fusion_in: np.ndarray
    theta: np.ndarray
    n_dets: int
    n_links: int


def _forward_branch(layers: list[DenseLayer], x):
    cache = []
    h = x
    for layer in layers:
        z, out = layer.forward(h)
        cache.append((h, z))
        h = out
    return h, cache


def score_graph(model: CostModel, graph: AssociationGraph, seq: TrackSequence,
                cfg: FeatureConfig,
                features: GraphFeatures | None = None) -> tuple[np.ndarray, ScoreCache]:
    """Fill the cost vector: detection scores, link scores, entry/exit scalars.

    `features` may carry precomputed grid products (training reuses them
    across iterations); otherwise they are computed here.
    """
    layout = graph.layout
    n, m = layout.n_dets, len(layout.links)
    dets = [seq.detection(det_id) for _, det_id in layout.det_keys]
    if dets and dets[0].appearance.shape != (cfg.appearance_blocks, cfg.block_len):
        raise DataFormatError(
            f"appearance shape {dets[0].appearance.shape} != configured "
            f"({cfg.appearance_blocks}, {cfg.block_len})"
        )
    if features is None:
        features = compute_graph_features(graph, seq, cfg)

    det_inputs = (np.stack([detection_input(d) for d in dets])
                  if dets else np.zeros((0, det_input_dim(cfg))))
    det_out, det_cache = _forward_branch(model.det.layers, det_inputs)
    theta_det = det_out[:, 0]
    if not np.all(np.isfinite(theta_det)):
        raise NumericalError("non-finite activation in detection scorer")

    app_part = features.app_sims * model.link.appearance_weights
    bev_out, bev_cache = _forward_branch(model.link.bev_branch, features.bev_products)
    fv_out, fv_cache = _forward_branch(model.link.fv_branch, features.fv_products)
    fusion_in = np.hstack([app_part, bev_out, fv_out]) if m else np.zeros(
        (0, model.link.fusion.in_dim))
    fusion_z, fusion_out = model.link.fusion.forward(fusion_in)
    theta_link = fusion_out[:, 0]
    if not np.all(np.isfinite(theta_link)):
        raise NumericalError("non-finite activation in match scorer")

    theta = np.zeros(layout.n_vars)
    for j in range(n):
        theta[layout.det_var(j)] = theta_det[j]
        theta[layout.new_var(j)] = float(model.theta_new)
        theta[layout.end_var(j)] = float(model.theta_end)
    for l in range(m):
        theta[layout.link_var(l)] = theta_link[l]

    cache = ScoreCache(det_inputs, det_cache, features, bev_cache, fv_cache,
                       app_part, fusion_in, theta, n, m)
    return theta, cache


def _backward_branch(layers: list[DenseLayer],
                     cache: list[tuple[object, np.ndarray]],
                     d_out: np.ndarray,
                     grads: dict[str, np.ndarray], prefix: str) -> None:
    """Accumulate layer gradients; inputs may be sparse matrices."""
    d_h = d_out
    for i in reversed(range(len(layers))):
        x, z = cache[i]
        dz = d_h * _act_grad(layers[i].activation, z)
        if sparse.issparse(x):
            dw = np.asarray((x.T @ dz).T)
        else:
            dw = dz.T @ x
        grads[f"{prefix}.{i}.weights"] += dw
        grads[f"{prefix}.{i}.biases"] += dz.sum(axis=0)
        if i > 0:
            d_h = dz @ layers[i].weights


def backward(model: CostModel, cache: ScoreCache, dtheta: np.ndarray) -> Gradient:
    """Exact gradient of dtheta . theta(params) with respect to every parameter."""
    dtheta = np.asarray(dtheta, dtype=np.float64)
    if dtheta.shape != cache.theta.shape:
        raise DataFormatError(
            f"dtheta shape {dtheta.shape} != theta shape {cache.theta.shape}"
        )
    n, m = cache.n_dets, cache.n_links
    grad = zero_gradient(model)
    g = grad.tensors

    d_det = dtheta[:n]
    d_new = dtheta[n:2 * n]
    d_end = dtheta[2 * n:3 * n]
    d_link = dtheta[3 * n:]

    g["theta_new"] += d_new.sum()
    g["theta_end"] += d_end.sum()

    if n:
        _backward_branch(model.det.layers, cache.det_layers,
                         d_det[:, None], g, "det")
    if m:
        dz_f = d_link[:, None]  # fusion output is linear
        g["link.fusion.weights"] += dz_f.T @ cache.fusion_in
        g["link.fusion.biases"] += dz_f.sum(axis=0)
        d_fusion_in = dz_f @ model.link.fusion.weights
        blocks = len(model.link.appearance_weights)
        bev_h = model.link.bev_branch[-1].out_dim
        d_app_part = d_fusion_in[:, :blocks]
        d_bev = d_fusion_in[:, blocks:blocks + bev_h]
        d_fv = d_fusion_in[:, blocks + bev_h:]
        g["link.appearance_weights"] += (d_app_part * cache.features.app_sims).sum(axis=0)
        _backward_branch(model.link.bev_branch, cache.bev_layers, d_bev, g, "link.bev")
        _backward_branch(model.link.fv_branch, cache.fv_layers, d_fv, g, "link.fv")
    return grad


# --- checkpoint format -------------------------------------------------------
#
# magic "DSMT" | version u32 LE | tensor count u32 LE
# per tensor:  name length u16 LE | name utf-8 | ndim u8 | dims u32 LE each
# then all tensor payloads in table order, float64 LE, row-major.

CHECKPOINT_MAGIC = b"DSMT"
CHECKPOINT_VERSION = 1


def model_to_bytes(model: CostModel) -> bytes:
    params = model.parameters()
    head = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(params))]
    body = []
    for name, tensor in params:
        encoded = name.encode("utf-8")
        head.append(struct.pack("<H", len(encoded)))
        head.append(encoded)
        head.append(struct.pack("<B", tensor.ndim))
        head.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        body.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    return b"".join(head + body)


def tensors_from_bytes(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataFormatError("not a model checkpoint (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise DataFormatError(f"unsupported checkpoint version {version}")
    offset = 12
    table: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, offset)
        offset += 4 * ndim
        table.append((name, shape))
    tensors: dict[str, np.ndarray] = {}
    for name, shape in table:
        size = int(np.prod(shape)) if shape else 1
        end = offset + 8 * size
        if end > len(blob):
            raise DataFormatError("truncated checkpoint payload")
        flat = np.frombuffer(blob[offset:end], dtype="<f8")
        tensors[name] = flat.reshape(shape).astype(np.float64)
        offset = end
    if offset != len(blob):
        raise DataFormatError("trailing bytes after checkpoint payload")
    return tensors


def model_from_tensors(tensors: dict[str, np.ndarray]) -> CostModel:
    """Rebuild a model from checkpoint tensors.

    Layer counts come from the names present; activations follow the
    fixed design (hidden relu, outputs identity).
    """
    def branch(prefix: str) -> list[DenseLayer]:
        layers = []
        i = 0
        while f"{prefix}.{i}.weights" in tensors:
            layers.append((tensors[f"{prefix}.{i}.weights"], tensors[f"{prefix}.{i}.biases"]))
            i += 1
        if not layers:
            raise DataFormatError(f"checkpoint missing tensors for {prefix}")
        built = []
        for i, (w, b) in enumerate(layers):
            last = i == len(layers) - 1
            built.append(DenseLayer(w, b, "identity" if last and w.shape[0] == 1 else "relu"))
        return built

    for key in ("link.appearance_weights", "theta_new", "theta_end",
                "link.fusion.weights", "link.fusion.biases"):
        if key not in tensors:
            raise DataFormatError(f"checkpoint missing tensor {key}")
    det = DetScorer(branch("det"))
    link = MatchScorer(
        tensors["link.appearance_weights"],
        branch("link.bev"),
        branch("link.fv"),
        DenseLayer(tensors["link.fusion.weights"], tensors["link.fusion.biases"], "identity"),
    )
    return CostModel(det, link, tensors["theta_new"], tensors["theta_end"])
