"""Graph update over detections: learned scalar edges, max-pooled inter-object
messages, a scene memory-cell bank and an edge memory-cell bank, fused per
node and iterated for T time steps.

For node i with feature f_i, one step computes

    e[i][j]  = relu(w_p . R(box_i, box_j)) * tanh(w_v . [f_i, f_j])   (j != i)
    m_i      = elementwise-max over j != i of e[i][j] * f_j
    h_s_i    = gru(scene_gru, x=scene_feature, h=f_i)
    h_e_i    = gru(edge_gru,  x=m_i,           h=f_i)
    f_i'     = fuse(h_s_i, h_e_i)        # mean (default), max, or concat

Edges are recomputed from the current features at every step; both banks take
the fused node state of the previous step as their hidden state. Ablation
arms drop one bank and use the remaining output alone.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import spatial_relation
from .memory_cell import create_gru_params, gru_backward, gru_forward, gru_params_from_store
from .numerics import init_param, relu, seed_for, tanh

POOLINGS = ("mean", "max", "concat")
MODES = ("both", "scene", "edge")

REL_DIM = 12


@dataclass
class SceneGraph:
    """Per-image graph: aligned node features and boxes plus one scene vector."""

    node_features: np.ndarray      # (n, d)
    boxes: list
    scene_feature: np.ndarray      # (d,)

    def __post_init__(self):
        self.node_features = np.asarray(self.node_features, dtype=np.float64)
        self.scene_feature = np.asarray(self.scene_feature, dtype=np.float64)
        if self.node_features.ndim != 2 or self.node_features.shape[0] != len(self.boxes):
            raise ValueError(
                f"graph: {len(self.boxes)} boxes but features of shape {self.node_features.shape}")

    @property
    def n(self):
        return self.node_features.shape[0]

    @property
    def dim(self):
        return self.node_features.shape[1]


@dataclass
class SinParams:
    scene_gru: object
    edge_gru: object
    w_p: object                 # (1, 12)
    w_v: object                 # (1, 2d)
    w_a: object = None          # (d, 2d), only under concat fusion

    @property
    def dim(self):
        return self.scene_gru.dim


def create_sin_params(store, d, seed, pooling="mean", prefix="sin"):
    """Register all inference-net weights under `prefix/` and return the view."""
    if pooling not in POOLINGS:
        raise ValueError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")
    scene = create_gru_params(store, f"{prefix}/scene_gru", d, seed)
    edge = create_gru_params(store, f"{prefix}/edge_gru", d, seed)
    # The relu in edge_weight is a hard gate: if w_p . R starts negative for
    # the bulk of box pairs, every edge is zero, no gradient reaches w_p, and
    # the relation path never recovers. Start it as a locality prior instead:
    # open for pairs within a couple of box widths (positive pull on receiver
    # width), closed at long range (negative pull on squared offsets), and let
    # training reshape it from there.
    w_p_init = np.zeros((1, REL_DIM))
    w_p_init[0, 0] = 0.5
    w_p_init[0, 8] = -0.4
    w_p_init[0, 9] = -0.4
    w_p = store.create(f"{prefix}/w_p", w_p_init)
    # Soft start for the appearance term as well: early messages are noise,
    # and large ones teach the rest of the net to slam the gate shut.
    w_v = store.create(f"{prefix}/w_v",
                       0.25 * init_param((1, 2 * d), seed_for(seed, f"{prefix}/w_v")))
    w_a = None
    if pooling == "concat":
        w_a = store.create(f"{prefix}/w_a", init_param((d, 2 * d), seed_for(seed, f"{prefix}/w_a")))
    return SinParams(scene_gru=scene, edge_gru=edge, w_p=w_p, w_v=w_v, w_a=w_a)


def sin_params_from_store(store, prefix="sin"):
    w_a = store[f"{prefix}/w_a"] if f"{prefix}/w_a" in store else None
    return SinParams(
        scene_gru=gru_params_from_store(store, f"{prefix}/scene_gru"),
        edge_gru=gru_params_from_store(store, f"{prefix}/edge_gru"),
        w_p=store[f"{prefix}/w_p"],
        w_v=store[f"{prefix}/w_v"],
        w_a=w_a,
    )


def edge_weight(p, box_i, box_j, f_i, f_j):
    """Influence of sender j on receiver i: a single scalar.

    relu gates the spatial term, tanh bounds the appearance term, so
    |e| <= relu(w_p . R).
    """
    rel = spatial_relation(box_i, box_j)
    spatial = relu(p.w_p.value @ rel)[0]
    visual = tanh(p.w_v.value @ np.concatenate([f_i, f_j]))[0]
    return float(spatial * visual)


def _relation_tensor(boxes):
    """All-pairs relation vectors, R[i, j] = spatial_relation(boxes[i], boxes[j])."""
    n = len(boxes)
    cx = np.array([b.cx for b in boxes])
    cy = np.array([b.cy for b in boxes])
    w = np.array([b.w for b in boxes])
    h = np.array([b.h for b in boxes])
    s = w * h
    dx = (cx[:, None] - cx[None, :]) / w[None, :]
    dy = (cy[:, None] - cy[None, :]) / h[None, :]
    rel = np.empty((n, n, REL_DIM), dtype=np.float64)
    rel[..., 0] = w[:, None]
    rel[..., 1] = h[:, None]
    rel[..., 2] = s[:, None]
    rel[..., 3] = w[None, :]
    rel[..., 4] = h[None, :]
    rel[..., 5] = s[None, :]
    rel[..., 6] = dx
    rel[..., 7] = dy
    rel[..., 8] = dx * dx
    rel[..., 9] = dy * dy
    rel[..., 10] = np.log(w[:, None] / w[None, :])
    rel[..., 11] = np.log(h[:, None] / h[None, :])
    return rel


@dataclass
class EdgeCache:
    rel: np.ndarray        # (n, n, 12)
    spatial_pos: np.ndarray  # bool (n, n): relu pre-activation > 0
    spatial: np.ndarray    # (n, n) relu output
    visual: np.ndarray     # (n, n) tanh output
    e: np.ndarray          # (n, n), zero diagonal


def _compute_edges(p, features, boxes):
    n = len(boxes)
    rel = _relation_tensor(boxes)
    lin_p = rel @ p.w_p.value[0]
    spatial = np.maximum(lin_p, 0.0)
    d = features.shape[1]
    vi = features @ p.w_v.value[0, :d]
    vj = features @ p.w_v.value[0, d:]
    visual = np.tanh(vi[:, None] + vj[None, :])
    e = spatial * visual
    np.fill_diagonal(e, 0.0)
    return EdgeCache(rel=rel, spatial_pos=lin_p > 0.0, spatial=spatial, visual=visual, e=e)


def compute_edges(p, g):
    """The full n x n edge matrix over ordered (receiver, sender) pairs.

    The diagonal is never used downstream and is held at zero.
    """
    return _compute_edges(p, g.node_features, g.boxes).e


def _edges_backward(p, cache, de, features):
    """Push gradient of the edge matrix back to w_p, w_v and the features."""
    de = np.array(de, dtype=np.float64)
    np.fill_diagonal(de, 0.0)
    d_spatial = de * cache.visual
    d_visual = de * cache.spatial
    dlin_p = d_spatial * cache.spatial_pos
    p.w_p.grad[0] += np.tensordot(dlin_p, cache.rel, axes=([0, 1], [0, 1]))
    dlin_v = d_visual * (1.0 - cache.visual * cache.visual)
    row = dlin_v.sum(axis=1)   # receiver-side sums
    col = dlin_v.sum(axis=0)   # sender-side sums
    d = features.shape[1]
    p.w_v.grad[0, :d] += features.T @ row
    p.w_v.grad[0, d:] += features.T @ col
    return np.outer(row, p.w_v.value[0, :d]) + np.outer(col, p.w_v.value[0, d:])


def integrate_messages(g, e, i):
    """Pooled incoming message for node i: per-coordinate max over the scaled
    sender features e[i][j] * f_j, j != i. A single-node graph gets zeros."""
    n = g.n
    if n == 1:
        return np.zeros(g.dim)
    scaled = e[i][:, None] * g.node_features    # (n, d)
    mask = np.ones(n, dtype=bool)
    mask[i] = False
    return scaled[mask].max(axis=0)


def _integrate_all(features, e):
    """Messages for every node at once; also returns the winning sender per
    coordinate (ties to the lowest sender index) for the backward pass."""
    n, d = features.shape
    if n == 1:
        return np.zeros((1, d)), np.full((1, d), -1, dtype=np.intp)
    scaled = e[:, :, None] * features[None, :, :]        # (n, n, d)
    idx = np.arange(n)
    scaled[idx, idx, :] = -np.inf
    senders = scaled.argmax(axis=1)                      # (n, d)
    msgs = np.take_along_axis(scaled, senders[:, None, :], axis=1)[:, 0, :]
    return msgs, senders


def _messages_backward(features, e, senders, dmsgs):
    """Subgradient of the per-coordinate max: everything routes to the
    winning sender."""
    n, d = features.shape
    de = np.zeros((n, n))
    dfeat = np.zeros((n, d))
    if n == 1:
        return de, dfeat
    recv = np.repeat(np.arange(n)[:, None], d, axis=1)
    coord = np.tile(np.arange(d), (n, 1))
    np.add.at(de, (recv, senders), dmsgs * features[senders, coord])
    np.add.at(dfeat, (senders, coord), dmsgs * e[recv, senders])
    return de, dfeat


@dataclass
class StepTape:
    features_in: np.ndarray
    scene_feature: np.ndarray
    scene_caches: list = None
    edge_caches: list = None
    edge_cache: EdgeCache = None
    msgs: np.ndarray = None
    senders: np.ndarray = None
    h_scene: np.ndarray = None
    h_edge: np.ndarray = None
    fused: np.ndarray = None
    pooling: str = "mean"
    mode: str = "both"


def _fuse(p, h_scene, h_edge, pooling):
    if pooling == "mean":
        return (h_scene + h_edge) / 2.0
    if pooling == "max":
        # ties resolve to the scene output
        return np.where(h_scene >= h_edge, h_scene, h_edge)
    if pooling == "concat":
        if p.w_a is None:
            raise ValueError("concat fusion configured without a w_a projection")
        return np.concatenate([h_scene, h_edge], axis=1) @ p.w_a.value.T
    raise ValueError(f"unknown pooling {pooling!r}; expected one of {POOLINGS}")


def sin_step_tape(p, g, pooling="mean", mode="both"):
    """One inference step; returns the updated graph and the tape for backward."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    feats = g.node_features
    n, d = feats.shape
    tape = StepTape(features_in=feats, scene_feature=g.scene_feature,
                    pooling=pooling, mode=mode)

    h_scene = h_edge = None
    if mode in ("both", "scene"):
        tape.scene_caches = []
        h_scene = np.empty((n, d))
        for i in range(n):
            h_scene[i], cache = gru_forward(p.scene_gru, g.scene_feature, feats[i])
            tape.scene_caches.append(cache)
        tape.h_scene = h_scene
    if mode in ("both", "edge"):
        tape.edge_cache = _compute_edges(p, feats, g.boxes)
        tape.msgs, tape.senders = _integrate_all(feats, tape.edge_cache.e)
        tape.edge_caches = []
        h_edge = np.empty((n, d))
        for i in range(n):
            h_edge[i], cache = gru_forward(p.edge_gru, tape.msgs[i], feats[i])
            tape.edge_caches.append(cache)
        tape.h_edge = h_edge

    if mode == "both":
        fused = _fuse(p, h_scene, h_edge, pooling)
    elif mode == "scene":
        fused = h_scene
    else:
        fused = h_edge
    tape.fused = fused
    out = SceneGraph(node_features=fused, boxes=g.boxes, scene_feature=g.scene_feature)
    return out, tape


def sin_step(p, g, pooling="mean", mode="both"):
    out, _ = sin_step_tape(p, g, pooling, mode)
    return out


def sin_infer(p, g, steps=2, pooling="mean", mode="both"):
    """Iterate sin_step `steps` times; steps=0 returns the graph unchanged."""
    out, _ = sin_infer_tapes(p, g, steps, pooling, mode)
    return out


def sin_infer_tapes(p, g, steps=2, pooling="mean", mode="both"):
    if steps < 0:
        raise ValueError("steps must be >= 0")
    tapes = []
    for _ in range(steps):
        g, tape = sin_step_tape(p, g, pooling, mode)
        tapes.append(tape)
    return g, tapes


def sin_backward(p, tapes, d_out_features):
    """Reverse-mode pass through all recorded steps.

    Accumulates parameter gradients into the store and returns
    (d_input_features, d_scene_feature).
    """
    dfeat = np.array(d_out_features, dtype=np.float64)
    if tapes and dfeat.shape != tapes[-1].fused.shape:
        raise ValueError(
            f"sin_backward: upstream grad shape {dfeat.shape} does not match "
            f"final features {tapes[-1].fused.shape}")
    dscene = None
    for tape in reversed(tapes):
        n, d = tape.features_in.shape
        if dscene is None:
            dscene = np.zeros(d)

        if tape.mode == "both":
            if tape.pooling == "mean":
                dh_scene = dfeat / 2.0
                dh_edge = dfeat / 2.0
            elif tape.pooling == "max":
                scene_won = tape.h_scene >= tape.h_edge
                dh_scene = dfeat * scene_won
                dh_edge = dfeat * ~scene_won
            else:
                cat = np.concatenate([tape.h_scene, tape.h_edge], axis=1)
                p.w_a.grad += dfeat.T @ cat
                dcat = dfeat @ p.w_a.value
                dh_scene, dh_edge = dcat[:, :d], dcat[:, d:]
        elif tape.mode == "scene":
            dh_scene, dh_edge = dfeat, None
        else:
            dh_scene, dh_edge = None, dfeat

        dfeat_in = np.zeros((n, d))
        if dh_scene is not None:
            for i in range(n):
                dx, dh = gru_backward(p.scene_gru, tape.scene_caches[i], dh_scene[i])
                dscene += dx
                dfeat_in[i] += dh
        if dh_edge is not None:
            dmsgs = np.empty((n, d))
            for i in range(n):
                dm, dh = gru_backward(p.edge_gru, tape.edge_caches[i], dh_edge[i])
                dmsgs[i] = dm
                dfeat_in[i] += dh
            de, dfeat_msg = _messages_backward(tape.features_in, tape.edge_cache.e,
                                               tape.senders, dmsgs)
            dfeat_in += dfeat_msg
            dfeat_in += _edges_backward(p, tape.edge_cache, de, tape.features_in)
        dfeat = dfeat_in
    if dscene is None:
        dscene = np.zeros(dfeat.shape[1] if dfeat.ndim == 2 else 0)
    return dfeat, dscene


def relation_report(e, kept):
    """For each kept node, the sender with the strongest edge into it.

    `kept` holds node indices (or objects with a roi_index attribute).
    Returns (node, partner, weight) triples; graphs with fewer than two nodes
    yield an empty report. Ties go to the lowest sender index.
    """
    e = np.asarray(e, dtype=np.float64)
    n = e.shape[0]
    if n < 2:
        return []
    report = []
    for item in kept:
        i = int(getattr(item, "roi_index", item))
        row = e[i].copy()
        row[i] = -np.inf
        j = int(np.argmax(row))
        report.append((i, j, float(e[i, j])))
    return report
