"""Scene-graph construction: spatial feature map -> node and edge embeddings.

Nodes are the local features of an object-encoded map (one per grid cell,
row-major), pushed through a node MLP.  The edge between cells m and n is an
MLP of ``l_m ‖ onehot(m) ‖ l_n ‖ onehot(n)``; all M² ordered pairs are kept,
self-edges included.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import MLP2, ConvBlock, Module
from .tensor import DimensionError, Tensor


@dataclass
class SceneGraph:
    nodes: Tensor  # (..., M, node_dim)
    edges: Tensor  # (..., M, M, edge_dim)

    def __post_init__(self):
        M = self.nodes.shape[-2]
        if self.edges.shape[-3:-1] != (M, M) or self.edges.shape[:-3] != self.nodes.shape[:-2]:
            raise StructureError(f"graph with nodes {self.nodes.shape} cannot carry edges {self.edges.shape}")

    @property
    def num_nodes(self) -> int:
        return self.nodes.shape[-2]

    @property
    def batch_shape(self) -> tuple[int, ...]:
        return self.nodes.shape[:-2]

    def __getitem__(self, idx) -> "SceneGraph":
        return SceneGraph(self.nodes[idx], self.edges[idx])

    def detach(self) -> "SceneGraph":
        return SceneGraph(self.nodes.detach(), self.edges.detach())


class StructureError(ValueError):
    pass


@dataclass(frozen=True)
class GcmConfig:
    channels: int = 256
    grid: tuple[int, int] = (4, 4)
    node_dim: int = 128
    edge_dim: int = 64
    hidden: int = 256

    @property
    def num_nodes(self) -> int:
        return self.grid[0] * self.grid[1]


class GraphConstruction(Module):
    def __init__(self, rng: np.random.Generator, cfg: GcmConfig = GcmConfig()):
        self.cfg = cfg
        C, M = cfg.channels, cfg.num_nodes
        self.encoder = ConvBlock(C, C, rng)
        self.node_mlp = MLP2(C, cfg.hidden, cfg.node_dim, rng)
        self.edge_mlp = MLP2(2 * C + 2 * M, cfg.hidden, cfg.edge_dim, rng)

    def local_features(self, spatial: Tensor) -> Tensor:
        """Object-encode (B, C, H, W) and flatten to (B, M, C), positions row-major."""
        C, (H, W) = self.cfg.channels, self.cfg.grid
        if spatial.ndim != 4 or spatial.shape[1:] != (C, H, W):
            raise DimensionError(f"graph construction expects (B, {C}, {H}, {W}) input, got {spatial.shape}")
        enc = self.encoder(spatial)
        return T.transpose(T.reshape(enc, (spatial.shape[0], C, H * W)), (0, 2, 1))

    def graph_from_local(self, local: Tensor, positions: np.ndarray | None = None) -> SceneGraph:
        """Nodes and edges from local features (B, M, C).

        ``positions[i]`` is the grid index whose one-hot accompanies row i
        (identity by default).  The first edge layer is evaluated as four
        block products, equal to multiplying the concatenated input.
        """
        C, M = self.cfg.channels, self.cfg.num_nodes
        if local.shape[-2:] != (M, C):
            raise DimensionError(f"expected local features (…, {M}, {C}), got {local.shape}")
        pos = np.arange(M) if positions is None else np.asarray(positions)
        nodes = self.node_mlp(local)
        w1 = self.edge_mlp.fc1.weight
        w_src, w_src_pos = w1[0:C], w1[C:C + M][pos]
        w_dst, w_dst_pos = w1[C + M:2 * C + M], w1[2 * C + M:][pos]
        src = T.linear(local, w_src) + w_src_pos
        dst = T.linear(local, w_dst) + w_dst_pos + self.edge_mlp.fc1.bias
        hidden = T.relu(T.expand_dims(src, -2) + T.expand_dims(dst, -3))
        edges = self.edge_mlp.fc2(hidden)
        return SceneGraph(nodes, edges)

    def forward(self, spatial: Tensor) -> SceneGraph:
        """Batched build: (B, C, H, W) -> graphs with nodes (B, M, node_dim), edges (B, M, M, edge_dim)."""
        return self.graph_from_local(self.local_features(spatial))


def build_graph(spatial, gcm: GraphConstruction) -> SceneGraph:
    """Single map (C, H, W) -> SceneGraph with nodes (M, node_dim) and edges (M, M, edge_dim)."""
    spatial = T.as_tensor(spatial)
    if spatial.ndim != 3:
        raise DimensionError(f"build_graph expects one (C, H, W) map, got {spatial.shape}")
    g = gcm(T.reshape(spatial, (1,) + spatial.shape))
    return g[0]


def prototype(support_features) -> np.ndarray:
    """Elementwise mean of a class's support maps."""
    feats = [np.asarray(f.data if isinstance(f, Tensor) else f, dtype=np.float32) for f in support_features]
    if not feats:
        raise ValueError("class prototype needs at least one support feature")
    shapes = {f.shape for f in feats}
    if len(shapes) != 1:
        raise DimensionError(f"support features disagree in shape: {sorted(shapes)}")
    return np.mean(np.stack(feats), axis=0, dtype=np.float64).astype(np.float32) if len(feats) > 1 else feats[0].copy()


def class_prototype_graph(support_features, gcm: GraphConstruction) -> SceneGraph:
    return build_graph(prototype(support_features), gcm)
