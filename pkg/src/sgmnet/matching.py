"""Graph matching: propagation, cross-graph interaction, update, gated aggregation, cosine score."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP2, Linear, Module
from .scene_graph import SceneGraph, StructureError
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class GmmConfig:
    node_dim: int = 128
    edge_dim: int = 64
    prop_hidden: int = 512
    prop_out: int = 512
    update_dim: int = 256
    use_propagation: bool = True
    use_interaction: bool = True

    @property
    def update_in(self) -> int:
        return self.node_dim + self.prop_out * self.use_propagation + self.node_dim * self.use_interaction


class GraphMatching(Module):
    """Parameters of the matcher.  Ablated configurations simply lack the
    corresponding slice of the update layer's input; the interaction step has
    no parameters of its own."""

    def __init__(self, rng: np.random.Generator, cfg: GmmConfig = GmmConfig()):
        self.cfg = cfg
        self.propagation = (MLP2(2 * cfg.node_dim + cfg.edge_dim, cfg.prop_hidden, cfg.prop_out, rng)
                            if cfg.use_propagation else None)
        self.update_layer = Linear(cfg.update_in, cfg.update_dim, rng)
        self.gate = Linear(2 * cfg.update_dim, 1, rng)

    # -- the four layers, usable on any leading batch shape ------------------------------

    def propagate(self, g: SceneGraph) -> Tensor:
        """Mean over n of MLP(e_m ‖ e_n ‖ d_mn) -> (..., M, prop_out).

        The output layer is affine, so averaging the hidden activations before
        it gives the same result with M× fewer rows through the second layer.
        """
        if self.propagation is None:
            raise StructureError("this matcher was built without a propagation layer")
        if g.edges.shape[-3] != g.nodes.shape[-2]:
            raise StructureError(f"node count {g.nodes.shape[-2]} disagrees with edges {g.edges.shape}")
        d = self.cfg.node_dim
        fc1 = self.propagation.fc1
        own = T.linear(g.nodes, fc1.weight[:d]) + fc1.bias
        nbr = T.linear(g.nodes, fc1.weight[d:2 * d])
        hidden = T.relu(T.expand_dims(own, -2) + T.expand_dims(nbr, -3) + T.linear(g.edges, fc1.weight[2 * d:]))
        return self.propagation.fc2(T.mean(hidden, axis=-2))

    @staticmethod
    def interact(nodes_a: Tensor, nodes_b: Tensor) -> tuple[Tensor, Tensor]:
        """Dot-product attention both ways; returns (cross_a, cross_b)."""
        if nodes_a.shape[-1] != nodes_b.shape[-1]:
            raise StructureError(f"node dims differ: {nodes_a.shape} vs {nodes_b.shape}")
        logits = T.matmul(nodes_a, nodes_b.T)
        cross_a = T.matmul(T.softmax(logits, axis=-1), nodes_b)
        cross_b = T.matmul(T.softmax(logits, axis=-2).T, nodes_a)
        return cross_a, cross_b

    def update(self, nodes: Tensor, intra: Tensor | None, cross: Tensor | None) -> Tensor:
        parts = [nodes]
        if self.cfg.use_propagation:
            parts.append(intra)
        if self.cfg.use_interaction:
            parts.append(cross)
        M = nodes.shape[-2]
        for p in parts:
            if p is None or p.shape[-2] != M:
                raise StructureError("update inputs disagree on node count or are missing")
        return T.relu(self.update_layer(T.concat(parts, axis=-1)))

    def aggregate(self, updated: Tensor) -> Tensor:
        """r = Σ_m σ(gate(u_m ‖ mean(u))) · u_m."""
        U = self.cfg.update_dim
        w = self.gate.weight
        mean_u = T.mean(updated, axis=-2, keepdims=True)
        z = T.linear(updated, w[:U]) + T.linear(mean_u, w[U:]) + self.gate.bias
        return T.tsum(T.sigmoid(z) * updated, axis=-2)

    # -- fused pairwise scoring ----------------------------------------------------------

    def base(self, g: SceneGraph) -> Tensor:
        """Update-layer contribution that depends on one graph only."""
        d, W = self.cfg.node_dim, self.update_layer.weight
        out = T.linear(g.nodes, W[:d]) + self.update_layer.bias
        if self.cfg.use_propagation:
            P = self.cfg.prop_out
            out = out + T.linear(self.propagate(g), W[d:d + P])
        return out

    def score_matrix(self, queries: SceneGraph, protos: SceneGraph) -> Tensor:
        """Similarity in [0, 1] for every (query, prototype) pair: (Q, M…) × (P, M…) -> (Q, P)."""
        return self.score_parts(queries.nodes, self.base(queries), protos.nodes, self.base(protos))

    def score_parts(self, q_nodes: Tensor, q_base: Tensor, p_nodes: Tensor, p_base: Tensor) -> Tensor:
        """``score_matrix`` from node embeddings and precomputed ``base`` terms."""
        if q_nodes.shape[-1] != p_nodes.shape[-1]:
            raise StructureError("query and prototype graphs have different node dims")
        pre_q = T.expand_dims(q_base, 1)  # Q,1,M,U
        pre_p = T.expand_dims(p_base, 0)  # 1,P,M,U
        if self.cfg.use_interaction:
            # the update layer is linear in the cross term, so project node embeddings
            # once per graph and mix the projections with the attention weights
            w_cross = self.update_layer.weight[self.cfg.update_in - self.cfg.node_dim:]
            proj_q = T.expand_dims(T.linear(q_nodes, w_cross), 1)
            proj_p = T.expand_dims(T.linear(p_nodes, w_cross), 0)
            logits = T.matmul(T.expand_dims(q_nodes, 1), T.expand_dims(p_nodes, 0).T)
            pre_q = pre_q + T.matmul(T.softmax(logits, axis=-1), proj_p)
            pre_p = pre_p + T.matmul(T.softmax(logits, axis=-2).T, proj_q)
        else:
            shape = (q_nodes.shape[0], p_nodes.shape[0]) + pre_q.shape[2:]
            pre_q, pre_p = T.broadcast_to(pre_q, shape), T.broadcast_to(pre_p, shape)
        r_q = self.aggregate(T.relu(pre_q))
        r_p = self.aggregate(T.relu(pre_p))
        return (T.cosine_similarity(r_q, r_p, axis=-1) + 1.0) * 0.5

    def match(self, g_a: SceneGraph, g_b: SceneGraph) -> Tensor:
        """Scalar similarity of two single graphs."""
        one = lambda g: SceneGraph(T.expand_dims(g.nodes, 0), T.expand_dims(g.edges, 0))  # noqa: E731
        return T.reshape(self.score_matrix(one(g_a), one(g_b)), ())

    def graph_representation(self, g: SceneGraph, other: SceneGraph) -> Tensor:
        """Graph-level vector r of ``g`` when matched against ``other`` (single graphs)."""
        intra = self.propagate(g) if self.cfg.use_propagation else None
        cross = self.interact(g.nodes, other.nodes)[0] if self.cfg.use_interaction else None
        return self.aggregate(self.update(g.nodes, intra, cross))


def match(g_a: SceneGraph, g_b: SceneGraph, gmm: GraphMatching) -> Tensor:
    return gmm.match(g_a, g_b)


def matching_weights(g_support: SceneGraph, g_query: SceneGraph) -> np.ndarray:
    """Row m: attention of support node m over query nodes (rows sum to 1)."""
    with no_grad():
        logits = T.matmul(g_support.nodes, g_query.nodes.T)
        return T.softmax(logits, axis=-1).data.copy()
