"""The TIE-DGNN network.

All matrices act on row vectors from the right (``x @ W``), so a weight
stored as ``[in, out]`` maps ``in`` features to ``out`` features. Every
function here is batched: rows of the leading axis are independent items,
positions or sessions, and index arrays describe how they relate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import TrainConfig
from .graphs import EdgeKind, GlobalGraph, GraphError, build_session_graph
from .numerics import tensor as T
from .numerics.optim import init_gaussian
from .numerics.tensor import Tensor

GLOBAL_KINDS = ("in", "out", "io")
LOCAL_KINDS = ("in", "out", "io", "self")
PROB_CLAMP = 1e-12


def param_shapes(config: TrainConfig, num_items: int) -> dict[str, tuple[int, ...]]:
    d, K, dk, dp = config.d, config.K, config.dk, config.pos_dim
    D = dk + dp + 1
    shapes: dict[str, tuple[int, ...]] = {
        "item_table": (num_items, d),
        "chunk_W": (K, d, dk),
        "chunk_b": (K, dk),
    }
    for r in GLOBAL_KINDS:
        shapes[f"att_W_{r}"] = (D, D)
        shapes[f"att_q_{r}"] = (D,)
    shapes.update(
        {
            "pos_in": (config.epsilon, dp),
            "pos_out": (config.epsilon, dp),
            "pos_io": (dp,),
            "upd_W": (K, 2 * dk, dk),
            "res_Wp": (d, d),
            "res_Wq": (d, d),
            "res_Wf": (1, d),
        }
    )
    for r in LOCAL_KINDS:
        shapes[f"loc_W_{r}"] = (1, d)
    shapes.update(
        {
            "inter_W2": (K, 2 * dk, dk),
            "inter_b1": (K, dk),
            "inter_W3": (K, dk, dk),
            "inter_W4": (K, dk, dk),
            "inter_q": (K, dk),
            "inter_b2": (K, dk),
            "intra_W5": (2 * d, d),
            "intra_b3": (d,),
            "intra_W6": (d, d),
            "intra_W7": (d, d),
            "intra_q": (d,),
            "intra_b4": (d,),
            "pos_g": (config.max_len, dk),
            "pos_l": (config.max_len, d),
        }
    )
    return shapes


def init_params(config: TrainConfig, num_items: int, seed=None) -> dict[str, Tensor]:
    rng = np.random.default_rng(config.seed if seed is None else seed)
    return {
        name: Tensor(init_gaussian(shape, 0.0, config.init_std, rng), requires_grad=True, name=name)
        for name, shape in param_shapes(config, num_items).items()
    }


# index structures ------------------------------------------------------------


@dataclass
class NeighborEdges:
    """Global-graph edges feeding one GLDL layer, sorted by kind.

    ``dst`` indexes the rows being updated, ``src`` the rows of the previous
    layer, ``inst`` the session each edge belongs to.
    """

    dst: np.ndarray
    src: np.ndarray
    inst: np.ndarray
    kind: np.ndarray
    weight: np.ndarray
    mu: np.ndarray
    n_dst: int
    bounds: tuple[tuple[int, int], ...] = field(init=False)
    _pairs: tuple | None = field(init=False, default=None, repr=False)

    def __post_init__(self):
        edges = np.searchsorted(self.kind, np.arange(4))
        self.bounds = tuple((int(edges[r]), int(edges[r + 1])) for r in range(3))

    @property
    def n_edges(self) -> int:
        return len(self.dst)

    def source_pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Distinct ``(inst, src)`` pairs and, per edge, the index of its pair."""
        if self._pairs is None:
            key = self.inst * (int(self.src.max(initial=0)) + 1) + self.src
            uniq, first, inv = np.unique(key, return_index=True, return_inverse=True)
            self._pairs = (self.inst[first], self.src[first], inv.astype(np.int64))
        return self._pairs

    @classmethod
    def from_lists(cls, rows: Sequence[tuple[int, int, int, int, float, int]], n_dst: int) -> "NeighborEdges":
        """Build from ``(dst, src, inst, kind, weight, mu)`` tuples in any order."""
        arr = np.array(sorted(rows, key=lambda r: r[3]), dtype=np.float64).reshape(-1, 6)
        i = arr.astype(np.int64)
        return cls(i[:, 0], i[:, 1], i[:, 2], i[:, 3], arr[:, 4], i[:, 5], n_dst)


@dataclass
class BatchPlan:
    """Integer bookkeeping for a batch of session prefixes.

    Rows of every global layer start with the session nodes in the same
    order, so a row's own previous-layer state sits at the same index.
    """

    size: int
    node_item: np.ndarray
    node_inst: np.ndarray
    loc_center: np.ndarray
    loc_nbr: np.ndarray
    loc_kind: np.ndarray
    pos_node: np.ndarray
    pos_inst: np.ndarray
    pos_rev: np.ndarray
    base_items: np.ndarray
    base_index: np.ndarray
    layers: list[NeighborEdges]

    @property
    def n_nodes(self) -> int:
        return len(self.node_item)


def _expand_layer(inst: np.ndarray, item: np.ndarray, graph: GlobalGraph, num_items: int):
    indptr, nitem, nkind, nweight, nmu = graph.csr()
    known = item < graph.num_items
    safe = np.where(known, item, 0)
    deg = np.where(known, indptr[safe + 1] - indptr[safe], 0)
    total = int(deg.sum())
    dst = np.repeat(np.arange(len(item), dtype=np.int64), deg)
    col = np.repeat(indptr[safe], deg) + (np.arange(total) - np.repeat(np.cumsum(deg) - deg, deg))
    nbr, kind, weight, mu = nitem[col], nkind[col], nweight[col], nmu[col]
    e_inst = inst[dst]

    cur = inst * num_items + item
    wanted = e_inst * num_items + nbr
    extra = np.setdiff1d(wanted, cur)
    keys = np.concatenate([cur, extra])
    order = np.argsort(keys, kind="stable")
    src = order[np.searchsorted(keys[order], wanted)]

    by_kind = np.argsort(kind, kind="stable")
    edges = NeighborEdges(
        dst[by_kind], src[by_kind], e_inst[by_kind], kind[by_kind], weight[by_kind], mu[by_kind], len(item)
    )
    return edges, keys // num_items, keys % num_items


def plan_batch(prefixes: Sequence[Sequence[int]], graph: GlobalGraph, layers: int, num_items: int) -> BatchPlan:
    node_item: list[int] = []
    node_inst: list[int] = []
    centers, nbrs, kinds = [], [], []
    pos_node: list[int] = []
    pos_inst: list[int] = []
    pos_rev: list[int] = []
    for b, prefix in enumerate(prefixes):
        sg = build_session_graph(prefix)
        off = len(node_item)
        node_item.extend(sg.nodes)
        node_inst.extend([b] * len(sg.nodes))
        c, nb, k = sg.neighbor_view()
        centers.append(c + off)
        nbrs.append(nb + off)
        kinds.append(k)
        n = len(prefix)
        pos_node.extend(off + a for a in sg.alias)
        pos_inst.extend([b] * n)
        pos_rev.extend(range(n - 1, -1, -1))
    items = np.asarray(node_item, dtype=np.int64)
    if items.size and (items.min() < 0 or items.max() >= num_items):
        raise GraphError("session contains an item index outside the vocabulary")
    inst = np.asarray(node_inst, dtype=np.int64)

    plans: list[NeighborEdges] = []
    cur_inst, cur_item = inst, items
    for _ in range(layers):
        edges, cur_inst, cur_item = _expand_layer(cur_inst, cur_item, graph, num_items)
        plans.append(edges)
    plans.reverse()  # plans[l - 1] feeds layer l
    base_items, base_index = np.unique(cur_item, return_inverse=True)
    return BatchPlan(
        len(prefixes),
        items,
        inst,
        np.concatenate(centers),
        np.concatenate(nbrs),
        np.concatenate(kinds),
        np.asarray(pos_node, dtype=np.int64),
        np.asarray(pos_inst, dtype=np.int64),
        np.asarray(pos_rev, dtype=np.int64),
        base_items,
        base_index.reshape(-1),
        plans,
    )


# equation-level building blocks ---------------------------------------------


def chunk_embed(v, W, b) -> Tensor:
    """``[R, d]`` embeddings to ``[R, K, d/K]`` unit-norm factor chunks."""
    v, W, b = T.as_tensor(v), T.as_tensor(W), T.as_tensor(b)
    K, d, dk = W.shape
    pre = T.matmul(v.reshape(1, v.shape[0], d), W)  # [K, R, dk]
    act = T.sigmoid(pre) + b.reshape(K, 1, dk)
    return T.transpose(T.l2_normalize(act, axis=-1), (1, 0, 2))


def session_factor_preference(hs_pos, pos_inst: np.ndarray, n_sessions: int, K: int) -> Tensor:
    """Per-session mean of local embeddings, split into ``K`` slices."""
    hs_pos = T.as_tensor(hs_pos)
    d = hs_pos.shape[-1]
    return T.segment_mean(hs_pos, pos_inst, n_sessions).reshape(n_sessions, K, d // K)


def _scaled_weight(weight: np.ndarray, weight_scale: str) -> np.ndarray:
    return np.log1p(weight) if weight_scale == "log1p" else weight


def propagate_neighbors(
    prev_chunks,
    pref,
    edges: NeighborEdges,
    params: dict[str, Tensor],
    epsilon: int,
    slope: float = 0.2,
    weight_scale: str = "raw",
) -> tuple[Tensor, Tensor]:
    """Attention over typed global neighbors, per factor.

    Returns the summed neighbor message ``[n_dst, K, dk]`` and the attention
    weights ``[E, K]``, normalised within each (row, kind).
    """
    prev_chunks, pref = T.as_tensor(prev_chunks), T.as_tensor(pref)
    _, K, dk = prev_chunks.shape
    if edges.n_edges == 0:
        return Tensor(np.zeros((edges.n_dst, K, dk))), Tensor(np.zeros((0, K)))
    directional = edges.kind < EdgeKind.INOUT
    if np.any(directional & ((edges.mu < 1) | (edges.mu > epsilon))):
        raise GraphError(f"neighbor distance outside [1, {epsilon}]; graph file is corrupt")

    # the left projection depends only on the (session, source) pair, so it is
    # computed once per pair and the per-edge terms are fused in the kernel
    pair_inst, pair_src, pair_of_edge = edges.source_pairs()
    x = T.gather(pref, pair_inst) * T.gather(prev_chunks, pair_src)
    weight = _scaled_weight(edges.weight, weight_scale)
    parts = []
    for r, name in enumerate(GLOBAL_KINDS):
        lo, hi = edges.bounds[r]
        if lo == hi:
            continue
        W = params[f"att_W_{name}"]
        A = T.matmul(x, W[:dk])
        if name == "io":
            ptab = T.matmul(params["pos_io"].reshape(1, -1), W[dk + 1 :])
            pidx = np.zeros(hi - lo, dtype=np.int64)
        else:
            ptab = T.matmul(params[f"pos_{name}"], W[dk + 1 :])
            pidx = edges.mu[lo:hi] - 1
        parts.append(
            T.edge_attention_logits(
                A, W[dk], ptab, params[f"att_q_{name}"], pair_of_edge[lo:hi], weight[lo:hi], pidx, slope
            )
        )
    logits = parts[0] if len(parts) == 1 else T.concat(parts, axis=0)
    theta = T.segment_softmax(logits, edges.dst * 3 + edges.kind, 3 * edges.n_dst)
    message = T.weighted_gather_sum(theta, prev_chunks, edges.src, edges.dst, edges.n_dst)
    return message, theta


def factor_linear(x, W) -> Tensor:
    """Apply a separate ``[in, out]`` matrix to each factor of ``[R, K, in]``."""
    return T.transpose(T.matmul(T.transpose(x, (1, 0, 2)), W), (1, 0, 2))


def update_node(chunks, message, W) -> Tensor:
    """``relu([c_k || m_k] @ W_k)`` per factor; returns ``[R, K, dk]``."""
    return T.relu(factor_linear(T.concat([chunks, message], axis=-1), W))


def residual_fuse(h, h_prev, Wp, Wq, Wf) -> Tensor:
    """Gate the new layer output against the previous one with an unsquashed scalar."""
    h, h_prev = T.as_tensor(h), T.as_tensor(h_prev)
    gate = T.sigmoid(T.matmul(h, Wp) + T.matmul(h_prev, Wq))
    alpha = T.matmul(gate, T.transpose(Wf))
    return alpha * h + (1.0 - alpha) * h_prev


def factor_independence_loss(chunks) -> Tensor:
    """Mean over rows of the summed pairwise cosine between factor chunks."""
    chunks = T.as_tensor(chunks)
    R, K, _ = chunks.shape
    if K < 2 or R == 0:
        return Tensor(0.0)
    u = T.l2_normalize(chunks, axis=-1)
    gram = T.matmul(u, T.transpose(u, (0, 2, 1)))
    upper = np.triu(np.ones((K, K)), k=1)
    return T.sum_(gram * upper) / float(R)


def local_item_embed(h, center, nbr, kind, params: dict[str, Tensor], slope: float = 0.2) -> tuple[Tensor, Tensor]:
    """Edge-typed attention over session-graph neighbors, self loop included."""
    h = T.as_tensor(h)
    W = T.concat([params[f"loc_W_{r}"] for r in LOCAL_KINDS], axis=0)
    hi, hj = T.gather(h, center), T.gather(h, nbr)
    logits = T.leaky_relu(T.sum_(hi * hj * T.gather(W, kind), axis=-1, keepdims=True), slope)
    phi = T.segment_softmax(logits, center, h.shape[0])
    return T.segment_sum(phi * hj, center, h.shape[0]), phi.reshape(-1)


def session_embed(h_pos, pos_rev, pos_inst, n_sessions: int, params: dict[str, Tensor], mode: str) -> Tensor:
    """Position-aware soft attention pooling of per-position embeddings.

    ``inter`` takes ``[P, K, dk]`` global embeddings and pools each factor
    with its own weights; ``intra`` takes ``[P, d]`` local embeddings.
    Returns ``[n_sessions, d]``.
    """
    h_pos = T.as_tensor(h_pos)
    if mode == "inter":
        P, K, dk = h_pos.shape
        pos = T.gather(params["pos_g"], pos_rev).reshape(P, 1, dk) * np.ones((1, K, 1))
        fused = T.tanh(factor_linear(T.concat([h_pos, pos], axis=-1), params["inter_W2"]) + params["inter_b1"])
        mean = T.gather(T.segment_mean(h_pos, pos_inst, n_sessions), pos_inst)
        act = T.sigmoid(
            factor_linear(fused, params["inter_W3"]) + factor_linear(mean, params["inter_W4"]) + params["inter_b2"]
        )
        gamma = T.sum_(act * params["inter_q"], axis=-1, keepdims=True)  # [P, K, 1]
        pooled = T.segment_sum(gamma * h_pos, pos_inst, n_sessions)
        return pooled.reshape(n_sessions, K * dk)
    if mode == "intra":
        pos = T.gather(params["pos_l"], pos_rev)
        fused = T.tanh(T.matmul(T.concat([h_pos, pos], axis=-1), params["intra_W5"]) + params["intra_b3"])
        mean = T.gather(T.segment_mean(h_pos, pos_inst, n_sessions), pos_inst)
        act = T.sigmoid(T.matmul(fused, params["intra_W6"]) + T.matmul(mean, params["intra_W7"]) + params["intra_b4"])
        gamma = T.sum_(act * params["intra_q"], axis=-1, keepdims=True)
        return T.segment_sum(gamma * h_pos, pos_inst, n_sessions)
    raise ValueError(f"mode must be 'inter' or 'intra', got {mode!r}")


def corrupt_batch(S, seed) -> Tensor:
    """Shuffle rows, then columns, of a ``[B, d]`` batch (differentiably)."""
    S = T.as_tensor(S)
    B, d = S.shape
    if B < 2:
        raise ValueError("corruption needs at least two sessions in the batch")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    while True:
        rows, cols = rng.permutation(B), rng.permutation(d)
        if np.any(rows != np.arange(B)) or np.any(cols != np.arange(d)):
            break
    return T.gather(S, rows)[:, cols]


def contrastive_loss(s_g, s_l, s_g_corrupt) -> Tensor:
    pos = T.dot(s_g, s_l)
    neg = T.dot(s_g_corrupt, s_l)
    return T.mean(-T.log_sigmoid(pos) - T.log_sigmoid(1.0 - neg))


def predict_scores(S, item_table) -> tuple[Tensor, Tensor]:
    """Softmax over all items of ``S . v_i``; returns ``(probs, logits)``."""
    logits = T.matmul(S, T.transpose(item_table))
    return T.softmax(logits, axis=-1), logits


def classification_loss(probs, targets: np.ndarray, ce_mode: str = "binary") -> Tensor:
    probs = T.as_tensor(probs)
    onehot = np.zeros(probs.shape)
    onehot[np.arange(probs.shape[0]), np.asarray(targets, dtype=np.int64)] = 1.0
    p = T.clip(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)
    if ce_mode == "binary":
        per_row = T.sum_(onehot * T.log(p) + (1.0 - onehot) * T.log(1.0 - p), axis=-1)
    elif ce_mode == "multiclass":
        per_row = T.sum_(onehot * T.log(p), axis=-1)
    else:
        raise ValueError(f"unknown ce_mode {ce_mode!r}")
    return -T.mean(per_row)


def total_loss(probs, targets, l_cor, l_con, beta: float, lam: float, ce_mode: str = "binary") -> Tensor:
    """Classification loss plus weighted independence and contrastive terms."""
    return classification_loss(probs, targets, ce_mode) + beta * T.as_tensor(l_cor) + lam * T.as_tensor(l_con)


# the model ------------------------------------------------------------------


@dataclass
class ForwardContext:
    probs: Tensor
    logits: Tensor
    l_cor: Tensor
    s_g: Tensor
    s_l: Tensor
    local: Tensor
    local_weights: Tensor
    base_chunks: Tensor
    global_layers: list[Tensor]
    neighbor_weights: list[Tensor]
    plan: BatchPlan


class TIEDGNN:
    def __init__(self, config: TrainConfig, num_items: int, seed=None, params: dict[str, Tensor] | None = None):
        self.config = config
        self.num_items = num_items
        self.params = params if params is not None else init_params(config, num_items, seed)
        expected = param_shapes(config, num_items)
        for name, shape in expected.items():
            if name not in self.params or self.params[name].shape != shape:
                got = self.params[name].shape if name in self.params else None
                raise ValueError(f"parameter {name}: expected shape {shape}, got {got}")

    @property
    def param_list(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            arr = state[name]
            if arr.shape != p.shape:
                raise ValueError(f"parameter {name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = np.array(arr, dtype=np.float64)

    def plan(self, prefixes: Sequence[Sequence[int]], graph: GlobalGraph) -> BatchPlan:
        trimmed = [p[-self.config.max_len :] for p in prefixes]
        return plan_batch(trimmed, graph, self.config.L, self.num_items)

    def forward(self, prefixes, graph: GlobalGraph, rng: np.random.Generator | None = None, plan=None) -> ForwardContext:
        """Run the network; passing ``rng`` switches on dropout."""
        cfg, p = self.config, self.params
        plan = plan if plan is not None else self.plan(prefixes, graph)
        B, K, dk = plan.size, cfg.K, cfg.dk
        table = p["item_table"]

        base_nodes = T.gather(table, plan.node_item)
        local, local_w = local_item_embed(base_nodes, plan.loc_center, plan.loc_nbr, plan.loc_kind, p, cfg.leaky_slope)
        local_pos = T.gather(local, plan.pos_node)
        pref = session_factor_preference(local_pos, plan.pos_inst, B, K)

        base = chunk_embed(T.gather(table, plan.base_items), p["chunk_W"], p["chunk_b"])
        state = T.gather(base, plan.base_index)
        l_cor = factor_independence_loss(state[: plan.n_nodes])
        layers = [state]
        att = []
        for edges in plan.layers:
            R = edges.n_dst
            message, theta = propagate_neighbors(state, pref, edges, p, cfg.epsilon, cfg.leaky_slope, cfg.weight_scale)
            own = state[:R]
            h = update_node(own, message, p["upd_W"]).reshape(R, cfg.d)
            fused = residual_fuse(h, own.reshape(R, cfg.d), p["res_Wp"], p["res_Wq"], p["res_Wf"])
            state = fused.reshape(R, K, dk)
            layers.append(state)
            att.append(theta)

        global_pos = T.gather(state, plan.pos_node)
        s_g = session_embed(global_pos, plan.pos_rev, plan.pos_inst, B, p, "inter")
        s_l = session_embed(local_pos, plan.pos_rev, plan.pos_inst, B, p, "intra")
        S = T.dropout(s_g, cfg.dropout, rng) + T.dropout(s_l, cfg.dropout, rng)
        probs, logits = predict_scores(S, table)
        return ForwardContext(probs, logits, l_cor, s_g, s_l, local, local_w, base, layers, att, plan)

    def loss(self, ctx: ForwardContext, targets, rng: np.random.Generator | None = None) -> tuple[Tensor, dict]:
        """Joint objective for a forward pass. The contrastive term needs two or more sessions."""
        cfg = self.config
        l_con = Tensor(0.0)
        if cfg.lam > 0 and ctx.plan.size >= 2:
            l_con = contrastive_loss(ctx.s_g, ctx.s_l, corrupt_batch(ctx.s_g, rng if rng is not None else 0))
        lc = classification_loss(ctx.probs, targets, cfg.ce_mode)
        total = lc + cfg.beta * ctx.l_cor + cfg.lam * l_con
        return total, {"ce": lc.item(), "cor": ctx.l_cor.item(), "con": l_con.item()}

    def scores(self, prefixes, graph: GlobalGraph) -> np.ndarray:
        """Inference logits ``[B, N]``; ranking by these equals ranking by probability."""
        return self.forward(prefixes, graph).logits.data
