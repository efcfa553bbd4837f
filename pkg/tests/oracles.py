"""Straight-line reference implementations, one session at a time.

Plain numpy with explicit loops, written from the equations rather than
from the batched code in ``tiedgnn.model``. Parameters are the same
``{name: ndarray}`` mapping the model uses; matrices act on row vectors.
"""

from __future__ import annotations

import math

import numpy as np

KIND_NAMES = ("in", "out", "io", "self")


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def lrelu(x, slope=0.2):
    return np.where(x > 0, x, slope * x)


def softmax(xs):
    xs = np.asarray(xs, dtype=np.float64)
    e = np.exp(xs - xs.max())
    return e / e.sum()


def cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def chunk_embed(v, W, b):
    """One item vector ``[d]`` -> ``[K, dk]``."""
    K = W.shape[0]
    out = []
    for k in range(K):
        a = sigmoid(v @ W[k]) + b[k]
        out.append(a / math.sqrt(float(a @ a)))
    return np.array(out)


def preference(local_rows, K):
    """Mean of the per-position local embeddings, cut into K slices."""
    mean = np.mean(np.asarray(local_rows), axis=0)
    return mean.reshape(K, -1)


def neighbor_message(center_chunks, pref, neighbors, params, slope=0.2):
    """Per-kind attention over ``neighbors``: list of (chunks [K, dk], kind, weight, mu).

    Returns ``(message [K, dk], weights)`` where ``weights[i][k]`` belongs to
    the i-th neighbor.
    """
    K, dk = center_chunks.shape
    message = np.zeros((K, dk))
    weights = [np.zeros(K) for _ in neighbors]
    for r, name in enumerate(("in", "out", "io")):
        members = [i for i, nb in enumerate(neighbors) if nb[1] == r]
        if not members:
            continue
        W, q = params[f"att_W_{name}"], params[f"att_q_{name}"]
        for k in range(K):
            logits = []
            for i in members:
                chunks, _, w, mu = neighbors[i]
                pos = params["pos_io"] if name == "io" else params[f"pos_{name}"][mu - 1]
                x = np.concatenate([pref[k] * chunks[k], [w], pos])
                logits.append(float(q @ lrelu(x @ W, slope)))
            theta = softmax(logits)
            for t, i in zip(theta, members):
                weights[i][k] = t
                message[k] += t * neighbors[i][0][k]
    return message, weights


def update(chunks, message, W):
    K = chunks.shape[0]
    return np.array([np.maximum(np.concatenate([chunks[k], message[k]]) @ W[k], 0.0) for k in range(K)])


def residual(h, h_prev, Wp, Wq, Wf):
    gate = sigmoid(h @ Wp + h_prev @ Wq)
    alpha = float(gate @ Wf[0])
    return alpha * h + (1.0 - alpha) * h_prev


def independence(chunk_rows):
    """Mean over rows of the summed cosine over factor pairs."""
    total = 0.0
    for c in chunk_rows:
        K = c.shape[0]
        for a in range(K):
            for b in range(a + 1, K):
                total += cos(c[a], c[b])
    return total / len(chunk_rows)


def session_graph(prefix):
    """Unique nodes in first-seen order, alias per position, and per-node neighbor lists."""
    nodes, alias = [], []
    for x in prefix:
        if x not in nodes:
            nodes.append(x)
        alias.append(nodes.index(x))
    fwd = set()
    for a, b in zip(alias, alias[1:]):
        if a != b:
            fwd.add((a, b))
    nbrs = {u: [(u, 3)] for u in range(len(nodes))}
    for u in range(len(nodes)):
        for v in range(len(nodes)):
            if u == v:
                continue
            out, inn = (u, v) in fwd, (v, u) in fwd
            if out and inn:
                nbrs[u].append((v, 2))
            elif out:
                nbrs[u].append((v, 1))
            elif inn:
                nbrs[u].append((v, 0))
    return nodes, alias, nbrs


def local_embed(h_nodes, nbrs, params, slope=0.2):
    out, weights = [], []
    for u in range(len(h_nodes)):
        logits = []
        for v, kind in nbrs[u]:
            w = params[f"loc_W_{KIND_NAMES[kind]}"][0]
            logits.append(float(lrelu(np.sum(h_nodes[u] * h_nodes[v] * w), slope)))
        phi = softmax(logits)
        weights.append(phi)
        out.append(sum(p * h_nodes[v] for p, (v, _) in zip(phi, nbrs[u])))
    return np.array(out), weights


def inter_session(h_pos, params):
    """``h_pos``: [n, K, dk] in session order -> [K * dk]."""
    n, K, dk = h_pos.shape
    parts = []
    for k in range(K):
        mean = sum(h_pos[i, k] for i in range(n)) / n
        acc = np.zeros(dk)
        for i in range(n):
            p = params["pos_g"][n - 1 - i]
            fused = np.tanh(np.concatenate([h_pos[i, k], p]) @ params["inter_W2"][k] + params["inter_b1"][k])
            act = sigmoid(fused @ params["inter_W3"][k] + mean @ params["inter_W4"][k] + params["inter_b2"][k])
            acc += float(params["inter_q"][k] @ act) * h_pos[i, k]
        parts.append(acc)
    return np.concatenate(parts)


def intra_session(h_pos, params):
    n, d = h_pos.shape
    mean = sum(h_pos) / n
    acc = np.zeros(d)
    for i in range(n):
        p = params["pos_l"][n - 1 - i]
        fused = np.tanh(np.concatenate([h_pos[i], p]) @ params["intra_W5"] + params["intra_b3"])
        act = sigmoid(fused @ params["intra_W6"] + mean @ params["intra_W7"] + params["intra_b4"])
        acc += float(params["intra_q"] @ act) * h_pos[i]
    return acc


def log_sigmoid(x):
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def contrastive(s_g, s_l, s_g_tilde):
    total = 0.0
    for a, b, c in zip(s_g, s_l, s_g_tilde):
        total += -log_sigmoid(float(a @ b)) - log_sigmoid(1.0 - float(c @ b))
    return total / len(s_g)


def predict(S, item_table):
    return softmax([float(S @ v) for v in item_table])


def cross_entropy(probs_rows, targets, mode="binary", clamp=1e-12):
    total = 0.0
    for probs, y in zip(probs_rows, targets):
        row = 0.0
        for i, p in enumerate(probs):
            p = min(max(p, clamp), 1.0 - clamp)
            if i == y:
                row += math.log(p)
            elif mode == "binary":
                row += math.log(1.0 - p)
        total -= row
    return total / len(probs_rows)


def session_forward(prefix, graph, params, K, L, slope=0.2):
    """Full inference pass for one session.

    Returns a dict with the local embeddings, layer-1 chunks of the session
    nodes, both session embeddings and the prediction.
    """
    nodes, alias, nbrs = session_graph(list(prefix))
    table = params["item_table"]
    h_local, _ = local_embed(np.array([table[x] for x in nodes]), nbrs, params, slope)
    pos_local = np.array([h_local[a] for a in alias])
    pref = preference(pos_local, K)

    memo = {}

    def state(item, layer):
        key = (item, layer)
        if key in memo:
            return memo[key]
        if layer == 0:
            out = chunk_embed(table[item], params["chunk_W"], params["chunk_b"])
        else:
            prev = state(item, layer - 1)
            neighbors = []
            in_n, out_n, io_n = graph.neighbors(item)
            for group, r in ((in_n, 0), (out_n, 1), (io_n, 2)):
                for nb in group:
                    neighbors.append((state(nb.item, layer - 1), r, float(nb.weight), int(nb.mu)))
            if neighbors:
                msg, _ = neighbor_message(prev, pref, neighbors, params, slope)
            else:
                msg = np.zeros_like(prev)
            h = update(prev, msg, params["upd_W"]).reshape(-1)
            out = residual(h, prev.reshape(-1), params["res_Wp"], params["res_Wq"], params["res_Wf"]).reshape(prev.shape)
        memo[key] = out
        return out

    glob = np.array([state(nodes[a], L) for a in alias])
    s_g = inter_session(glob, params)
    s_l = intra_session(pos_local, params)
    probs = predict(s_g + s_l, table)
    return {
        "local": h_local,
        "chunks": [state(x, 0) for x in nodes],
        "s_g": s_g,
        "s_l": s_l,
        "probs": probs,
    }
