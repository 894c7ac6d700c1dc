"""End-to-end structured training and the piecewise baseline.

The structured loss maximizes the margin between the gold assignment and
every competing feasible assignment, weighted by how many variables they
disagree on. Its subgradient in cost space is (most-violating assignment
minus gold), found by running the exact solver on Hamming-augmented
costs; the chain rule through the scorers turns that into parameter
gradients, applied with Adam.

Piecewise training fits the same scorers as independent binary
classifiers (logistic loss) and picks the entry/exit scalars by a line
search maximizing accuracy on a validation split.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .assoc import (
    Assignment,
    AssociationGraph,
    GateConfig,
    GoldAssignment,
    build_graph,
    derive_gold,
)
from .core import BoxTrack, TrackSequence
from .errors import NumericalError
from .features import FeatureConfig, GraphFeatures, compute_graph_features
from .metrics import evaluate, trajectories_to_box_tracks
from .scoring import (
    CostModel,
    Gradient,
    ScoreCache,
    ScorerConfig,
    _backward_branch,
    _forward_branch,
    backward,
    init_model,
    score_graph,
    zero_gradient,
)
from .solver import Solution, solve


@dataclass(eq=False)
class AdamState:
    """Adam moments per parameter tensor; lr defaults to the paper setting."""

    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, model: CostModel, grad: Gradient) -> None:
        self.step_count += 1
        t = self.step_count
        for name, tensor in model.parameters():
            g = grad.tensors[name]
            if name not in self.m:
                self.m[name] = np.zeros_like(tensor)
                self.v[name] = np.zeros_like(tensor)
            self.m[name] = self.beta1 * self.m[name] + (1 - self.beta1) * g
            self.v[name] = self.beta2 * self.v[name] + (1 - self.beta2) * g * g
            m_hat = self.m[name] / (1 - self.beta1 ** t)
            v_hat = self.v[name] / (1 - self.beta2 ** t)
            tensor -= self.lr * m_hat / (np.sqrt(v_hat) + self.epsilon)


@dataclass(frozen=True)
class TrainConfig:
    window_len: int = 8
    batch_size: int = 8
    iterations: int = 200
    seed: int = 0
    init_std: float = 1e-3

    def __post_init__(self):
        if min(self.window_len, self.batch_size, self.iterations + 1) <= 0:
            raise ValueError("training config values must be positive")


@dataclass(eq=False)
class TrainInstance:
    """One temporal window ready for training: graph, gold, features."""

    seq: TrackSequence
    graph: AssociationGraph
    gold: GoldAssignment
    features: GraphFeatures


def slice_window_features(whole_graph: AssociationGraph, whole: GraphFeatures,
                          window_graph: AssociationGraph) -> GraphFeatures:
    """Reuse a sequence-level feature bundle for a window's link subset."""
    whole_rows = {(whole_graph.layout.det_keys[j], whole_graph.layout.det_keys[k]): l
                  for l, (j, k) in enumerate(whole_graph.layout.links)}
    rows = [whole_rows[(window_graph.layout.det_keys[j], window_graph.layout.det_keys[k])]
            for (j, k) in window_graph.layout.links]
    idx = np.asarray(rows, dtype=np.int64)
    return GraphFeatures(
        app_sims=whole.app_sims[idx],
        bev_products=whole.bev_products[idx],
        fv_products=whole.fv_products[idx],
    )


def prepare_instances(data: list[tuple[TrackSequence, list[BoxTrack]]],
                      feature_cfg: FeatureConfig,
                      window_len: int,
                      gate: GateConfig = GateConfig(),
                      iou_threshold: float = 0.5) -> list[TrainInstance]:
    """Cut sequences into non-overlapping windows with golds and features."""
    instances = []
    for seq, gt_tracks in data:
        whole_graph = build_graph(seq, (0, seq.n_frames), gate)
        whole_features = compute_graph_features(whole_graph, seq, feature_cfg)
        for start in range(0, seq.n_frames, window_len):
            stop = min(start + window_len, seq.n_frames)
            if stop - start < 2:
                continue
            graph = build_graph(seq, (start, stop), gate)
            if graph.layout.n_dets == 0:
                continue
            gold = derive_gold(graph, seq, gt_tracks, iou_threshold)
            features = slice_window_features(whole_graph, whole_features, graph)
            instances.append(TrainInstance(seq, graph, gold, features))
    return instances


_TYPE_ORDER = ("det", "new", "end", "link")


def _hamming_weight_vector(graph: AssociationGraph,
                           weights: float | dict[str, float]) -> np.ndarray:
    if isinstance(weights, dict):
        w = [float(weights.get(t, 1.0)) for t in _TYPE_ORDER]
    else:
        w = [float(weights)] * 4
    n = graph.layout.n_dets
    out = np.empty(graph.layout.n_vars)
    out[:n] = w[0]
    out[n:2 * n] = w[1]
    out[2 * n:3 * n] = w[2]
    out[3 * n:] = w[3]
    return out


def loss_augmented_solve(graph: AssociationGraph, theta: np.ndarray,
                         gold: Assignment,
                         hamming_weights: float | dict[str, float] = 1.0) -> Solution:
    """Most violating assignment: argmax of theta . y + weighted Hamming(y, gold).

    The Hamming term decomposes per variable as w_i * (1 - 2*gold_i) * y_i
    plus the constant sum(w_i * gold_i), so this is one more exact solve on
    augmented costs; the reported objective includes the constant.
    """
    w = _hamming_weight_vector(graph, hamming_weights)
    gold_values = gold.values.astype(np.float64)
    augmented = theta + w * (1.0 - 2.0 * gold_values)
    constant = float(np.dot(w, gold_values))
    sol = solve(graph.with_costs(augmented))
    objective = float(np.dot(augmented, sol.assignment.values)) + constant
    return Solution(sol.assignment, objective, sol.trajectories)


@dataclass(eq=False)
class HingeBatch:
    """One batch evaluation: per-instance terms and the summed gate value."""

    instances: list[TrainInstance]
    caches: list[ScoreCache]
    violators: list[Assignment]
    hinge_terms: list[float]
    dthetas: list[np.ndarray]
    S: float


def hinge_loss(instances: list[TrainInstance], model: CostModel,
               feature_cfg: FeatureConfig,
               theta_jitter: list[np.ndarray] | None = None) -> HingeBatch:
    """Structured hinge over a batch.

    Per instance the term is max over feasible y of
    Hamming(y, gold) + theta . (y - gold), always >= 0 since y = gold is
    feasible. The cost-space subgradient is (violator - gold) per
    instance, zeroed when the batch sum S is not positive (the gate fires
    only when every term is exactly zero). `theta_jitter` adds a fixed
    vector to each instance's costs; tests use it to detach argmax ties.
    """
    caches: list[ScoreCache] = []
    violators: list[Assignment] = []
    terms: list[float] = []
    dthetas: list[np.ndarray] = []
    for i, inst in enumerate(instances):
        theta, cache = score_graph(model, inst.graph, inst.seq, feature_cfg,
                                   features=inst.features)
        if theta_jitter is not None:
            theta = theta + theta_jitter[i]
        gold_values = inst.gold.assignment.values.astype(np.float64)
        sol = loss_augmented_solve(inst.graph, theta, inst.gold.assignment)
        term = sol.objective - float(np.dot(theta, gold_values))
        caches.append(cache)
        violators.append(sol.assignment)
        terms.append(term)
        dthetas.append(sol.assignment.values.astype(np.float64) - gold_values)
    S = float(sum(terms))
    if not S > 0.0:
        dthetas = [np.zeros_like(d) for d in dthetas]
    return HingeBatch(instances, caches, violators, terms, dthetas, S)


def hinge_gradient(batch: HingeBatch, model: CostModel) -> Gradient:
    grad = zero_gradient(model)
    for cache, dtheta in zip(batch.caches, batch.dthetas):
        if np.any(dtheta):
            grad = grad + backward(model, cache, dtheta)
    return grad


@dataclass(eq=False)
class TrainResult:
    model: CostModel
    loss_trace: list[float]
    log_lines: list[str]


def train_end_to_end(instances: list[TrainInstance], config: TrainConfig,
                     feature_cfg: FeatureConfig,
                     scorer_cfg: ScorerConfig = ScorerConfig(),
                     model: CostModel | None = None,
                     adam: AdamState | None = None,
                     log=None) -> TrainResult:
    """Structured training loop: score, solve augmented, backprop, Adam.

    Deterministic given the config seed (batch sampling and parameter
    init share one generator). The loss trace holds the batch loss before
    each update plus one final evaluation, so trace[0] is the initial
    loss and trace[-1] the loss after the last step.
    """
    rng = np.random.default_rng(config.seed)
    if model is None:
        model = init_model(rng, feature_cfg, scorer_cfg, config.init_std)
    if adam is None:
        adam = AdamState()

    def pick_batch() -> list[TrainInstance]:
        if len(instances) <= config.batch_size:
            return instances
        chosen = rng.choice(len(instances), size=config.batch_size, replace=False)
        return [instances[int(i)] for i in chosen]

    trace: list[float] = []
    log_lines: list[str] = []
    started = time.perf_counter()

    def record(iteration: int, loss: float) -> None:
        trace.append(loss)
        line = f"{iteration}\t{loss:.9g}\t{time.perf_counter() - started:.3f}"
        log_lines.append(line)
        if log is not None:
            log(line)

    for iteration in range(config.iterations):
        batch = hinge_loss(pick_batch(), model, feature_cfg)
        if not math.isfinite(batch.S):
            raise NumericalError(
                f"training diverged at iteration {iteration}; loss trace: {trace}"
            )
        record(iteration, batch.S)
        grad = hinge_gradient(batch, model)
        adam.step(model, grad)
    final = hinge_loss(pick_batch() if len(instances) > config.batch_size else instances,
                       model, feature_cfg)
    record(config.iterations, final.S)
    return TrainResult(model, trace, log_lines)


# --- piecewise baseline ------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _train_logistic_branch(layers, x, labels, prefix: str, lr: float,
                           epochs: int, balanced: bool = True) -> None:
    """Full-batch logistic regression on a dense-layer stack, in place."""
    labels = np.asarray(labels, dtype=np.float64)
    n = len(labels)
    weights = np.ones(n)
    if balanced and 0 < labels.sum() < n:
        pos_w = n / (2.0 * labels.sum())
        neg_w = n / (2.0 * (n - labels.sum()))
        weights = np.where(labels > 0, pos_w, neg_w)
    adam = AdamState(lr=lr)
    names = []
    fake_model_params = []
    for i, layer in enumerate(layers):
        names.append((f"{prefix}.{i}.weights", layer.weights))
        names.append((f"{prefix}.{i}.biases", layer.biases))
        fake_model_params.append(layer)

    class _Shim:
        def parameters(self):
            return names

    shim = _Shim()
    for _ in range(epochs):
        out, cache = _forward_branch(layers, x)
        p = _sigmoid(out[:, 0])
        dscore = (weights * (p - labels) / n)[:, None]
        grads = {name: np.zeros_like(t) for name, t in names}
        _backward_branch(layers, cache, dscore, grads, prefix)
        adam.step(shim, Gradient(grads))


def match_scorer_forward(model: CostModel, features: GraphFeatures) -> np.ndarray:
    """Link scores for a stack of pair features (no graph needed)."""
    app_part = features.app_sims * model.link.appearance_weights
    bev_out, _ = _forward_branch(model.link.bev_branch, features.bev_products)
    fv_out, _ = _forward_branch(model.link.fv_branch, features.fv_products)
    fused = np.hstack([app_part, bev_out, fv_out])
    _, out = model.link.fusion.forward(fused)
    return out[:, 0]


def fit_match_classifier(model: CostModel, features: GraphFeatures,
                            labels: np.ndarray, lr: float, epochs: int) -> None:
    """Binary same-track classifier on the match scorer, in place."""
    labels = np.asarray(labels, dtype=np.float64)
    n = len(labels)
    weights = np.ones(n)
    if 0 < labels.sum() < n:
        weights = np.where(labels > 0, n / (2 * labels.sum()), n / (2 * (n - labels.sum())))
    link = model.link
    names = [("link.appearance_weights", link.appearance_weights)]
    for bname, branch in (("bev", link.bev_branch), ("fv", link.fv_branch)):
        for i, layer in enumerate(branch):
            names.append((f"link.{bname}.{i}.weights", layer.weights))
            names.append((f"link.{bname}.{i}.biases", layer.biases))
    names.append(("link.fusion.weights", link.fusion.weights))
    names.append(("link.fusion.biases", link.fusion.biases))

    class _Shim:
        def parameters(self):
            return names

    adam = AdamState(lr=lr)
    blocks = len(link.appearance_weights)
    bev_h = link.bev_branch[-1].out_dim
    for _ in range(epochs):
        app_part = features.app_sims * link.appearance_weights
        bev_out, bev_cache = _forward_branch(link.bev_branch, features.bev_products)
        fv_out, fv_cache = _forward_branch(link.fv_branch, features.fv_products)
        fused = np.hstack([app_part, bev_out, fv_out])
        fusion_z, out = link.fusion.forward(fused)
        p = _sigmoid(out[:, 0])
        dscore = (weights * (p - labels) / n)[:, None]
        grads = {name: np.zeros_like(t) for name, t in names}
        grads["link.fusion.weights"] += dscore.T @ fused
        grads["link.fusion.biases"] += dscore.sum(axis=0)
        d_fused = dscore @ link.fusion.weights
        grads["link.appearance_weights"] += (d_fused[:, :blocks] * features.app_sims).sum(axis=0)
        _backward_branch(link.bev_branch, bev_cache, d_fused[:, blocks:blocks + bev_h],
                         grads, "link.bev")
        _backward_branch(link.fv_branch, fv_cache, d_fused[:, blocks + bev_h:],
                         grads, "link.fv")
        adam.step(_Shim(), Gradient(grads))


@dataclass(eq=False)
class ValBundle:
    """A validation sequence prepared for the entry/exit line search."""

    seq: TrackSequence
    gt_tracks: list[BoxTrack]
    graph: AssociationGraph
    features: GraphFeatures


LINE_SEARCH_GRID = (0.0, -0.25, -0.5, -1.0, -2.0, -4.0)


def train_piecewise(instances: list[TrainInstance],
                    val_bundles: list[ValBundle],
                    config: TrainConfig,
                    feature_cfg: FeatureConfig,
                    scorer_cfg: ScorerConfig = ScorerConfig(),
                    lr: float = 1e-5,
                    epochs: int = 300,
                    grid=LINE_SEARCH_GRID,
                    iou_threshold: float = 0.5) -> CostModel:
    """Conventional piecewise pipeline on the same window data.

    Detection scorer: logistic classifier, label = matched to ground
    truth. Match scorer: logistic classifier, label = same track (the
    gold link value). Entry/exit scalars: grid line search maximizing
    accuracy (MOTA) on the validation sequences.
    """
    from .scoring import detection_input  # local to avoid a wide import list

    rng = np.random.default_rng(config.seed)
    model = init_model(rng, feature_cfg, scorer_cfg, config.init_std)

    det_x, det_y = [], []
    app_rows, bev_rows, fv_rows, link_y = [], [], [], []
    for inst in instances:
        layout = inst.graph.layout
        gold = inst.gold.assignment.values
        for j in range(layout.n_dets):
            det_x.append(detection_input(inst.seq.detection(layout.det_keys[j][1])))
            det_y.append(int(gold[layout.det_var(j)]))
        if layout.links:
            app_rows.append(inst.features.app_sims)
            bev_rows.append(inst.features.bev_products)
            fv_rows.append(inst.features.fv_products)
            link_y.extend(int(gold[layout.link_var(l)]) for l in range(len(layout.links)))

    if det_x:
        _train_logistic_branch(model.det.layers, np.stack(det_x),
                               np.asarray(det_y), "det", lr, epochs)
    if link_y:
        stacked = GraphFeatures(
            app_sims=np.vstack(app_rows),
            bev_products=sparse.vstack(bev_rows, format="csr"),
            fv_products=sparse.vstack(fv_rows, format="csr"),
        )
        fit_match_classifier(model, stacked, np.asarray(link_y), lr, epochs)

    # line search the entry/exit scalars on full validation sequences
    scored = []
    for vb in val_bundles:
        theta, _ = score_graph(model, vb.graph, vb.seq, feature_cfg, features=vb.features)
        scored.append(theta)
    best = None
    for t_new in grid:
        for t_end in grid:
            mota = 0.0
            for vb, theta in zip(val_bundles, scored):
                layout = vb.graph.layout
                n = layout.n_dets
                adjusted = theta.copy()
                adjusted[n:2 * n] = t_new
                adjusted[2 * n:3 * n] = t_end
                sol = solve(vb.graph.with_costs(adjusted))
                hyp = trajectories_to_box_tracks(sol.trajectories, vb.seq)
                mota += evaluate(hyp, vb.gt_tracks, iou_threshold).mota
            if best is None or mota > best[0]:
                best = (mota, t_new, t_end)
    if best is not None:
        model.theta_new[...] = best[1]
        model.theta_end[...] = best[2]
    return model
