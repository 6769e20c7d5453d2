"""Training objectives: symmetric cross-modal infoNCE, graph optimal
transport (node Wasserstein + edge Gromov-Wasserstein), intra-modal
contrastive, and a cross-modal MSE ablation.

Every loss returns both its value and exact gradients with respect to the
embeddings it consumes.  The optimal-transport terms follow the envelope
convention: the transport plan (and the thresholded graph adjacency) is
treated as a constant of the backward pass, so gradients are taken at the
fixed optimal plan.  Finite-difference checks therefore hold the plan
fixed as well.

The node cost is the cosine distance between cross-stain patch embeddings.
The edge cost compares intra-graph cosine-similarity structure: with S_a
and S_b the edge-masked similarity matrices of the two graphs, a coupling
T pays sum_{j,j',m,m'} T[j,m] T[j',m'] (S_a[j,j'] - S_b[m,m'])^2.  The
squared form admits the standard factorised linearisation, so each mirror-
descent step costs three matrix products plus one Sinkhorn solve.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import encoder as enc
from .data import PatchEmbeddingBag, sample_patch_indices
from .numerics import Matrix, Rng, cosine_similarity_matrix, row_norms


class LossError(ValueError):
    pass


class SinkhornConvergenceError(RuntimeError):
    """Raised when the scaling loop ends with marginal violation > 1e-4."""

    def __init__(self, residual: float, iters: int):
        super().__init__(
            f"Sinkhorn did not converge: marginal violation {residual:.3e} "
            f"after {iters} iterations"
        )
        self.residual = residual


@dataclass
class ContrastiveConfig:
    temperature: float = 1e-3

    def validate(self):
        if not self.temperature > 0:
            raise LossError(f"temperature must be positive, got {self.temperature}")


@dataclass
class GotConfig:
    sample_size: int = 256
    gamma: float = 0.0
    sinkhorn_epsilon: float = 0.05
    sinkhorn_iters: int = 200
    threshold_step: float = 0.1
    gw_iters: int = 10
    # "raw" aligns the patch embeddings themselves; "pre_attention" aligns
    # the pre-attention features, which routes gradients into the encoder.
    node_features: str = "raw"

    def validate(self):
        bad = []
        if self.sample_size < 2:
            bad.append("sample_size")
        if not (0.0 <= self.gamma <= 1.0):
            bad.append("gamma")
        if not self.sinkhorn_epsilon > 0:
            bad.append("sinkhorn_epsilon")
        if self.sinkhorn_iters < 1:
            bad.append("sinkhorn_iters")
        if self.gw_iters < 1:
            bad.append("gw_iters")
        if self.node_features not in ("raw", "pre_attention"):
            bad.append("node_features")
        if bad:
            raise LossError(f"invalid GotConfig field(s): {', '.join(bad)}")


@dataclass
class StainGraph:
    """Sampled patch nodes plus a thresholded cosine-similarity adjacency."""

    nodes: Matrix
    edges: np.ndarray  # boolean, symmetric, zero diagonal
    node_indices: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.nodes.shape[0]

    def masked_similarity(self) -> Matrix:
        sim = cosine_similarity_matrix(self.nodes, self.nodes)
        return np.where(self.edges, sim, 0.0)


@dataclass
class TransportPlan:
    coupling: Matrix
    row_marginal: np.ndarray
    col_marginal: np.ndarray
    marginal_violation: float


@dataclass
class LossReport:
    total: float = 0.0
    info_nce: float = 0.0
    got_node: float = 0.0
    got_edge: float = 0.0
    intra: float = 0.0
    mse: float = 0.0
    per_stain: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# Global alignment


def info_nce(
    anchor: Matrix,
    stain_embs: list[Matrix],
    temperature: float,
) -> tuple[float, Matrix, list[Matrix]]:
    """Symmetric cross-modal contrastive loss over matched rows.

    Row b of `anchor` and of each stain matrix must come from the same
    case.  Similarity is the raw dot product of the (unnormalised)
    embeddings divided by `temperature`; the two softmax directions are
    averaged over 2B rows and over the stains.

    Returns (loss, grad wrt anchor, grads wrt each stain matrix).
    """
    if not temperature > 0:
        raise LossError(f"temperature must be positive, got {temperature}")
    anchor = np.asarray(anchor, dtype=np.float64)
    B = anchor.shape[0]
    if B < 1:
        raise LossError("empty batch")
    K = len(stain_embs)
    if K < 1:
        raise LossError("at least one stain matrix required")
    for k, e in enumerate(stain_embs):
        if e.shape != anchor.shape:
            raise LossError(
                f"stain {k} shape {e.shape} does not match anchor {anchor.shape}"
            )

    loss = 0.0
    g_anchor = np.zeros_like(anchor)
    g_stains = []
    idx = np.arange(B)
    for e in stain_embs:
        logits = (anchor @ e.T) / temperature
        # anchor -> stain direction
        lse1 = logsumexp(logits, axis=1)
        loss1 = float(np.sum(lse1 - logits[idx, idx]))
        # stain -> anchor direction (rows of logits.T)
        lse2 = logsumexp(logits, axis=0)
        loss2 = float(np.sum(lse2 - logits[idx, idx]))
        loss += (loss1 + loss2) / (2.0 * B)

        p = np.exp(logits - lse1[:, None])
        q = np.exp(logits - lse2[None, :])
        d_logits = (p - np.eye(B)) + (q - np.eye(B))
        d_logits /= 2.0 * B * K * temperature
        g_anchor += d_logits @ e
        g_stains.append(d_logits.T @ anchor)
    loss /= K
    return loss, g_anchor, g_stains


def mse_cross_modal(
    anchor: Matrix, stain_embs: list[Matrix]
) -> tuple[float, Matrix, list[Matrix]]:
    """Mean squared difference over all entries, averaged over stains."""
    anchor = np.asarray(anchor, dtype=np.float64)
    K = len(stain_embs)
    if K < 1:
        raise LossError("at least one stain matrix required")
    loss = 0.0
    g_anchor = np.zeros_like(anchor)
    g_stains = []
    scale = 1.0 / (K * anchor.size)
    for k, e in enumerate(stain_embs):
        if e.shape != anchor.shape:
            raise LossError(
                f"stain {k} shape {e.shape} does not match anchor {anchor.shape}"
            )
        diff = anchor - e
        loss += scale * float((diff * diff).sum())
        g_anchor += 2.0 * scale * diff
        g_stains.append(-2.0 * scale * diff)
    return loss, g_anchor, g_stains


# ---------------------------------------------------------------------------
# Local alignment: graphs and optimal transport


def build_stain_graph(
    bag: PatchEmbeddingBag | Matrix, cfg: GotConfig, rng: Rng
) -> StainGraph:
    """Sample nodes and connect pairs whose cosine similarity clears the
    dynamic threshold t = s_min + threshold_step * (s_max - s_min), where
    s_min/s_max range over off-diagonal pairwise similarities.

    When every off-diagonal similarity is identical the graph is fully
    connected rather than empty.
    """
    if isinstance(bag, PatchEmbeddingBag):
        n = min(cfg.sample_size, bag.n_patches)
        idx = sample_patch_indices(bag.n_patches, n, rng)
        nodes = bag.embeddings[idx]
    else:
        nodes = np.asarray(bag, dtype=np.float64)
        idx = None
        if nodes.shape[0] > cfg.sample_size:
            idx = sample_patch_indices(nodes.shape[0], cfg.sample_size, rng)
            nodes = nodes[idx]
    n = nodes.shape[0]
    if n < 1:
        raise LossError("cannot build a graph from an empty bag")
    sim = cosine_similarity_matrix(nodes, nodes)
    off = ~np.eye(n, dtype=bool)
    if n == 1:
        edges = np.zeros((1, 1), dtype=bool)
    else:
        s_min = sim[off].min()
        s_max = sim[off].max()
        if s_max == s_min:
            edges = off.copy()
        else:
            t = s_min + cfg.threshold_step * (s_max - s_min)
            edges = (sim > t) & off
    return StainGraph(nodes=nodes, edges=edges, node_indices=idx)


def _lse_rows(m: Matrix) -> np.ndarray:
    mx = m.max(axis=1)
    return mx + np.log(np.exp(m - mx[:, None]).sum(axis=1))


def _round_to_marginals(plan: Matrix, p: np.ndarray, q: np.ndarray) -> Matrix:
    """Project a near-feasible plan onto exact marginals (rank-1 correction)."""
    r = plan.sum(axis=1)
    plan = plan * np.minimum(p / np.maximum(r, 1e-300), 1.0)[:, None]
    c = plan.sum(axis=0)
    plan = plan * np.minimum(q / np.maximum(c, 1e-300), 1.0)[None, :]
    err_r = p - plan.sum(axis=1)
    err_c = q - plan.sum(axis=0)
    total = err_r.sum()
    if total > 0:
        plan = plan + np.outer(err_r, err_c) / total
    return plan


def _sinkhorn_log(
    cost: Matrix,
    p: np.ndarray,
    q: np.ndarray,
    epsilon: float,
    max_iters: int,
    stop_tol: float = 1e-9,
    round_plan: bool = True,
    warm: tuple[np.ndarray, np.ndarray] | None = None,
    check_every: int = 4,
) -> tuple[Matrix, float, int, tuple[np.ndarray, np.ndarray]]:
    """Log-domain Sinkhorn with epsilon scaling and final marginal rounding.

    Unless warm-start potentials are supplied, a short annealing phase
    shrinks a larger regulariser down to `epsilon` (essential for small
    epsilon); `max_iters` is the iteration budget at the target epsilon.
    Returns (plan, pre-rounding marginal violation, iterations, potentials).
    The returned plan has exact marginals up to float rounding when
    `round_plan` is set.
    """
    log_p = np.log(p)
    log_q = np.log(q)
    if warm is not None:
        f, g = warm[0].copy(), warm[1].copy()
    else:
        f = np.zeros_like(p)
        g = np.zeros_like(q)
        span = float(np.abs(cost).max())
        eps = span / 2.0
        while eps > epsilon * 1.0001:
            for _ in range(2):
                f = eps * (log_p - _lse_rows((g[None, :] - cost + f[:, None]) / eps)) + f
                g = eps * (log_q - _lse_rows(((f[:, None] - cost + g[None, :]) / eps).T)) + g
            eps /= 2.0

    violation = np.inf
    plan = None
    for it in range(1, max_iters + 1):
        f = epsilon * (log_p - _lse_rows((g[None, :] - cost + f[:, None]) / epsilon)) + f
        g = epsilon * (log_q - _lse_rows(((f[:, None] - cost + g[None, :]) / epsilon).T)) + g
        if it % check_every == 0 or it == max_iters:
            plan = np.exp((f[:, None] + g[None, :] - cost) / epsilon)
            violation = max(
                float(np.abs(plan.sum(axis=1) - p).max()),
                float(np.abs(plan.sum(axis=0) - q).max()),
            )
            if violation <= stop_tol:
                break
    if round_plan:
        plan = _round_to_marginals(plan, p, q)
    return plan, violation, it, (f, g)


def _check_convergence(violation: float, iters: int):
    if violation > 1e-4:
        raise SinkhornConvergenceError(violation, iters)


def _cosine_grad_pair(
    a: Matrix, b: Matrix, sim: Matrix, weight: Matrix
) -> tuple[Matrix, Matrix]:
    """Gradients of sum_{jm} weight[j,m] * cos(a_j, b_m) wrt a and b."""
    na = row_norms(a)
    nb = row_norms(b)
    a_hat = a / na[:, None]
    b_hat = b / nb[:, None]
    g_a = (weight @ b_hat - ((weight * sim).sum(axis=1))[:, None] * a_hat) / na[:, None]
    g_b = (weight.T @ a_hat - ((weight * sim).sum(axis=0))[:, None] * b_hat) / nb[:, None]
    return g_a, g_b


def wasserstein(
    nodes_a: Matrix, nodes_b: Matrix, cfg: GotConfig
) -> tuple[float, TransportPlan, Matrix, Matrix]:
    """Entropic Wasserstein distance under the cosine-distance ground cost.

    Marginals are uniform.  The reported cost is <T, C> without the entropy
    term; gradients are taken at the fixed plan (envelope rule).
    """
    a = np.asarray(nodes_a, dtype=np.float64)
    b = np.asarray(nodes_b, dtype=np.float64)
    if a.shape[0] < 1 or b.shape[0] < 1:
        raise LossError("wasserstein requires nonempty node sets")
    n_a, n_b = a.shape[0], b.shape[0]
    sim = cosine_similarity_matrix(a, b)
    cost_matrix = 1.0 - sim
    p = np.full(n_a, 1.0 / n_a)
    q = np.full(n_b, 1.0 / n_b)
    plan, violation, iters, _ = _sinkhorn_log(
        cost_matrix, p, q, cfg.sinkhorn_epsilon, cfg.sinkhorn_iters
    )
    _check_convergence(violation, iters)
    cost = float((plan * cost_matrix).sum())
    # d cost / d nodes with the plan held fixed: cost = sum T (1 - cos)
    g_cos_a, g_cos_b = _cosine_grad_pair(a, b, sim, plan)
    transport = TransportPlan(plan, p, q, _plan_violation(plan, p, q))
    return cost, transport, -g_cos_a, -g_cos_b


def _plan_violation(plan: Matrix, p: np.ndarray, q: np.ndarray) -> float:
    return max(
        float(np.abs(plan.sum(axis=1) - p).max()),
        float(np.abs(plan.sum(axis=0) - q).max()),
    )


def _gw_cost_and_linearisation(
    s_a: Matrix, s_b: Matrix, plan: Matrix
) -> tuple[float, Matrix]:
    r = plan.sum(axis=1)
    c = plan.sum(axis=0)
    const = ((s_a * s_a) @ r)[:, None] + ((s_b * s_b) @ c)[None, :]
    cross = s_a @ plan @ s_b.T
    lin = const - 2.0 * cross
    cost = float((lin * plan).sum())
    return cost, lin


def _gw_mirror_descent(
    s_a: Matrix,
    s_b: Matrix,
    p: np.ndarray,
    q: np.ndarray,
    plan0: Matrix,
    cfg: GotConfig,
    anneal: bool,
) -> tuple[float, Matrix, float, int]:
    """Projected entropic mirror descent on the quadratic edge objective.

    Each step linearises the objective at the current plan and re-solves
    the linear problem with one Sinkhorn pass (warm-started potentials).
    When `anneal` is set, the regulariser is first walked down from the
    cost scale to the target epsilon, which smooths the early landscape.
    """
    plan = plan0
    warm = None
    violation = 0.0
    iters = 0
    eps_target = cfg.sinkhorn_epsilon
    ladder = []
    if anneal:
        eps = float(max(np.abs(s_a).max(), np.abs(s_b).max(), 1e-12)) ** 2
        while eps > eps_target * 1.0001:
            ladder.append(eps)
            eps /= 2.0
    for eps in ladder:
        for _ in range(2):
            _, lin = _gw_cost_and_linearisation(s_a, s_b, plan)
            plan, violation, iters, warm = _sinkhorn_log(
                lin, p, q, eps, cfg.sinkhorn_iters, warm=warm
            )
    for _ in range(cfg.gw_iters):
        prev = plan
        _, lin = _gw_cost_and_linearisation(s_a, s_b, plan)
        plan, violation, iters, warm = _sinkhorn_log(
            lin, p, q, eps_target, cfg.sinkhorn_iters, warm=warm
        )
        if float(np.abs(plan - prev).max()) < 1e-12:
            break
    cost, _ = _gw_cost_and_linearisation(s_a, s_b, plan)
    return cost, plan, violation, iters


def gromov_wasserstein(
    graph_a: StainGraph, graph_b: StainGraph, cfg: GotConfig
) -> tuple[float, TransportPlan, Matrix, Matrix]:
    """Entropic Gromov-Wasserstein cost between two stain graphs.

    Solved by projected entropic mirror descent with an annealed
    regulariser, started from the product coupling.  The objective is
    nonconvex, so on tiny equal-size instances (n <= 4) the solver also
    seeds one descent per permutation coupling and keeps the best result;
    larger instances rely on annealing alone.  Gradients flow to the node
    embeddings through the edge-masked similarity matrices, with the plan
    and the adjacency held fixed (envelope rule).
    """
    if graph_a.n < 1 or graph_b.n < 1:
        raise LossError("gromov_wasserstein requires nonempty graphs")
    s_a = graph_a.masked_similarity()
    s_b = graph_b.masked_similarity()
    n_a, n_b = graph_a.n, graph_b.n
    p = np.full(n_a, 1.0 / n_a)
    q = np.full(n_b, 1.0 / n_b)

    starts = [np.outer(p, q)]
    if n_a == n_b and n_a <= 4:
        eye = np.eye(n_a)
        for perm in itertools.permutations(range(n_a)):
            vertex = eye[list(perm)] / n_a
            starts.append(0.9 * vertex + 0.1 * np.outer(p, q))

    best = None
    for plan0 in starts:
        result = _gw_mirror_descent(s_a, s_b, p, q, plan0, cfg, anneal=True)
        if best is None or result[0] < best[0]:
            best = result
    cost, plan, violation, iters = best
    _check_convergence(violation, iters)

    # dQ/dS_a[j,j'] = 2 (S_a[j,j'] r_j r_j' - (T S_b T^T)[j,j']), then masked.
    r = plan.sum(axis=1)
    c = plan.sum(axis=0)
    g_sa = 2.0 * (s_a * np.outer(r, r) - plan @ s_b @ plan.T)
    g_sb = 2.0 * (s_b * np.outer(c, c) - plan.T @ s_a @ plan)
    g_sa = np.where(graph_a.edges, g_sa, 0.0)
    g_sb = np.where(graph_b.edges, g_sb, 0.0)
    g_nodes_a = _cosine_grad_self(graph_a.nodes, g_sa)
    g_nodes_b = _cosine_grad_self(graph_b.nodes, g_sb)
    transport = TransportPlan(plan, p, q, _plan_violation(plan, p, q))
    return cost, transport, g_nodes_a, g_nodes_b


def _cosine_grad_self(x: Matrix, g_sim: Matrix) -> Matrix:
    """Gradient of sum_{j,j'} g_sim[j,j'] * cos(x_j, x_j') wrt x.

    The diagonal of g_sim must be zero (self-similarity carries no
    gradient; adjacency masks guarantee this upstream).
    """
    w = g_sim + g_sim.T
    nx = row_norms(x)
    x_hat = x / nx[:, None]
    sim = np.clip(x_hat @ x_hat.T, -1.0, 1.0)
    return (w @ x_hat - ((w * sim).sum(axis=1))[:, None] * x_hat) / nx[:, None]


def got_loss(
    anchor_graph: StainGraph,
    stain_graphs: list[StainGraph],
    cfg: GotConfig,
) -> tuple[float, dict]:
    """Graph optimal transport: gamma * sum_k node WD + (1-gamma) * sum_k edge GWD.

    Terms with zero weight are skipped (and reported as 0).  Returns the
    weighted total plus a details dict with per-term values, plans, and
    node-embedding gradients ("g_anchor" accumulates over stains).
    """
    if not stain_graphs:
        raise LossError("got_loss requires at least one stain graph")
    node_sum = 0.0
    edge_sum = 0.0
    g_anchor = np.zeros_like(anchor_graph.nodes)
    g_stains = [np.zeros_like(g.nodes) for g in stain_graphs]
    node_terms = []
    edge_terms = []
    plans = []
    for k, graph in enumerate(stain_graphs):
        entry = {}
        if cfg.gamma > 0.0:
            cost, plan, g_a, g_b = wasserstein(anchor_graph.nodes, graph.nodes, cfg)
            node_sum += cost
            node_terms.append(cost)
            g_anchor += cfg.gamma * g_a
            g_stains[k] += cfg.gamma * g_b
            entry["node"] = plan
        if cfg.gamma < 1.0:
            cost, plan, g_a, g_b = gromov_wasserstein(anchor_graph, graph, cfg)
            edge_sum += cost
            edge_terms.append(cost)
            g_anchor += (1.0 - cfg.gamma) * g_a
            g_stains[k] += (1.0 - cfg.gamma) * g_b
            entry["edge"] = plan
        plans.append(entry)
    total = cfg.gamma * node_sum + (1.0 - cfg.gamma) * edge_sum
    details = {
        "node_sum": node_sum,
        "edge_sum": edge_sum,
        "node_terms": node_terms,
        "edge_terms": edge_terms,
        "plans": plans,
        "g_anchor": g_anchor,
        "g_stains": g_stains,
    }
    return total, details


# ---------------------------------------------------------------------------
# Intra-modal alignment


def split_bag_views(n_patches: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """Random permutation split of patch indices into two disjoint halves."""
    if n_patches < 2:
        raise LossError("intra loss needs at least 2 patches per bag")
    perm = rng.permutation(n_patches)
    half = n_patches // 2
    return perm[:half], perm[half:]


def intra_loss(
    bags: list[Matrix],
    stain_indices: list[int],
    params: enc.EncoderParams,
    cfg: enc.EncoderConfig,
    rng: Rng,
    temperature: float,
    train: bool = False,
) -> tuple[float, dict[str, np.ndarray]]:
    """Contrastive alignment of two disjoint views of each bag.

    Every bag is split into two random disjoint halves, both halves are
    encoded with the shared encoder, and the resulting view pairs feed the
    symmetric contrastive loss with a single modality pair.  Returns the
    loss and its gradient with respect to the encoder parameters.
    """
    if len(bags) != len(stain_indices):
        raise LossError("bags and stain_indices must align")
    view1, view2 = [], []
    caches1, caches2 = [], []
    for x, stain_idx in zip(bags, stain_indices):
        i1, i2 = split_bag_views(x.shape[0], rng)
        for subset, views, caches in ((i1, view1, caches1), (i2, view2, caches2)):
            out, cache = enc.encode_forward(
                x[subset], stain_idx, params, cfg, train=train, rng=rng if train else None
            )
            views.append(out)
            caches.append(cache)
    v1 = np.vstack(view1)
    v2 = np.vstack(view2)
    loss, g_v1, g_v2_list = info_nce(v1, [v2], temperature)
    g_v2 = g_v2_list[0]
    grads = enc.zero_grads(params)
    for i, cache in enumerate(caches1):
        enc.backward_bag(cache, g_v1[i], params, cfg, grads)
    for i, cache in enumerate(caches2):
        enc.backward_bag(cache, g_v2[i], params, cfg, grads)
    return loss, grads
