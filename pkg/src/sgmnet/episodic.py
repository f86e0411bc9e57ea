"""Episodes, meta-training with an MSE objective, and nearest-prototype evaluation.

Everything downstream of the frozen backbone works on cached spatial features:
``SplitFeatures`` holds one (C, 4, 4) map per image of a split.  Episodes index
into that cache, so the backbone runs once per split rather than once per episode.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import checkpoint, optim
from . import tensor as T
from .backbone import Conv5Backbone, extract_spatial
from .matching import GmmConfig, GraphMatching
from .nn import Module
from .optim import OptimizerState
from .scene_graph import GcmConfig, GraphConstruction, prototype
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1


class CapacityError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, message: str, episode_seed: tuple[int, ...], step: int):
        super().__init__(message)
        self.episode_seed = episode_seed
        self.step = step


# -- episodes ------------------------------------------------------------------------------

@dataclass(frozen=True)
class Episode:
    """One N-way K-shot task.  ``classes[k]`` is the split-level class id of episode class k;
    sample arrays index into the split, labels are episode class indices in [0, N)."""

    classes: np.ndarray
    support: np.ndarray
    support_labels: np.ndarray
    query: np.ndarray
    query_labels: np.ndarray

    @property
    def way(self) -> int:
        return len(self.classes)

    @property
    def shot(self) -> int:
        return len(self.support) // self.way


def sample_episode(labels, N: int, K: int, M_q: int, rng: np.random.Generator) -> Episode:
    """Draw N classes, then K support and M_q query samples per class, all without replacement."""
    labels = np.asarray(getattr(labels, "labels", labels))
    if N < 1 or K < 1 or M_q < 0:
        raise ValueError(f"invalid episode shape N={N}, K={K}, M_q={M_q}")
    class_ids, counts = np.unique(labels, return_counts=True)
    if len(class_ids) < N:
        raise CapacityError(f"split has {len(class_ids)} classes, episode needs {N} (short by {N - len(class_ids)})")
    need = K + M_q
    eligible = class_ids[counts >= need]
    if len(eligible) < N:
        worst = class_ids[np.argmin(counts)]
        raise CapacityError(f"only {len(eligible)} classes have {need} samples, episode needs {N}; "
                            f"class {int(worst)} has {int(counts.min())} (short by {need - int(counts.min())})")
    classes = rng.choice(eligible, size=N, replace=False)
    sup, qry = [], []
    for c in classes:
        picked = rng.choice(np.flatnonzero(labels == c), size=need, replace=False)
        sup.append(picked[:K])
        qry.append(picked[K:])
    return Episode(classes=classes,
                   support=np.concatenate(sup), support_labels=np.repeat(np.arange(N), K),
                   query=np.concatenate(qry), query_labels=np.repeat(np.arange(N), M_q))


def episode_rng(seed: int, *stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, *stream])


# -- cached features -----------------------------------------------------------------------

@dataclass
class SplitFeatures:
    spatial: np.ndarray  # (n, C, H, W)
    labels: np.ndarray

    @property
    def pooled(self) -> np.ndarray:
        return self.spatial.mean(axis=(-2, -1))

    def __len__(self) -> int:
        return len(self.labels)


def split_features(backbone: Conv5Backbone, split) -> SplitFeatures:
    return SplitFeatures(extract_spatial(backbone, split.images), np.asarray(split.labels))


def prototypes(spatial: np.ndarray, ep: Episode) -> np.ndarray:
    """(N, C, H, W) class prototypes of an episode's support set."""
    return np.stack([prototype(spatial[ep.support[ep.support_labels == k]]) for k in range(ep.way)])


# -- the matcher ---------------------------------------------------------------------------

class SGMNet(Module):
    """Graph construction followed by graph matching, on frozen backbone features."""

    def __init__(self, seed: int = 0, gcm: GcmConfig = GcmConfig(), gmm: GmmConfig = GmmConfig()):
        rng = np.random.default_rng([seed, 2])
        self.gcm = GraphConstruction(rng, gcm)
        self.gmm = GraphMatching(rng, gmm)

    @property
    def ablation(self) -> dict[str, bool]:
        return {"no_propagation": not self.gmm.cfg.use_propagation,
                "no_interaction": not self.gmm.cfg.use_interaction}

    def episode_scores(self, spatial: np.ndarray, ep: Episode) -> Tensor:
        """(N·M_q, N) similarity of every query to every class prototype.

        Prototype and query maps go through graph construction as one batch so
        that batch statistics (in training mode) are shared between them.
        """
        protos = prototypes(spatial, ep)
        graphs = self.gcm(Tensor(np.concatenate([protos, spatial[ep.query]])))
        N = ep.way
        return self.gmm.score_matrix(graphs[N:], graphs[:N])

    def graph_cache(self, spatial: np.ndarray, batch_size: int = 128) -> tuple[np.ndarray, np.ndarray]:
        """Eval-mode node embeddings and single-graph update terms for every map."""
        nodes, base = [], []
        with no_grad():
            for i in range(0, len(spatial), batch_size):
                g = self.gcm(Tensor(spatial[i:i + batch_size]))
                nodes.append(g.nodes.data)
                base.append(self.gmm.base(g).data)
        return np.concatenate(nodes), np.concatenate(base)


def matcher_state(model: SGMNet) -> dict[str, np.ndarray]:
    g, m = model.gcm.cfg, model.gmm.cfg
    state = {"matcher." + k: v for k, v in model.state_dict().items()}
    state["config.gcm"] = np.array([g.channels, *g.grid, g.node_dim, g.edge_dim, g.hidden], dtype=np.float32)
    state["config.gmm"] = np.array([m.node_dim, m.edge_dim, m.prop_hidden, m.prop_out, m.update_dim,
                                    m.use_propagation, m.use_interaction], dtype=np.float32)
    return state


def load_matcher(state: dict[str, np.ndarray]) -> SGMNet:
    try:
        c, gh, gw, nd, ed, hid = (int(v) for v in state["config.gcm"])
        mnd, med, ph, po, ud, up, ui = (int(v) for v in state["config.gmm"])
    except KeyError as exc:
        raise checkpoint.CheckpointError(f"not a matcher checkpoint: missing {exc.args[0]}") from None
    model = SGMNet(gcm=GcmConfig(c, (gh, gw), nd, ed, hid),
                   gmm=GmmConfig(mnd, med, ph, po, ud, bool(up), bool(ui)))
    model.load_state_dict(state, prefix="matcher.")
    return model.eval()


# -- evaluation ----------------------------------------------------------------------------

Scorer = Callable[[Episode], np.ndarray]


@dataclass
class EvalReport:
    accuracies: np.ndarray
    tie_count: int

    @property
    def episodes(self) -> int:
        return len(self.accuracies)

    @property
    def mean_acc(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def ci95(self) -> float:
        return ci95_half_width(self.accuracies)

    def metrics(self, seed: int, ablation: dict[str, bool] | None = None, **extra) -> dict:
        doc = {"schema_version": METRICS_SCHEMA_VERSION, "task": extra.pop("task", "5w1s"),
               "episodes": self.episodes, "mean_acc": self.mean_acc, "ci95": self.ci95,
               "tie_count": self.tie_count, "seed": seed,
               "no_propagation": False, "no_interaction": False}
        doc.update(ablation or {})
        doc.update(extra)
        return doc


def ci95_half_width(accuracies) -> float:
    """1.96·σ/√E with σ the population standard deviation of the per-episode accuracies."""
    acc = np.asarray(accuracies, dtype=np.float64)
    return float(1.96 * acc.std() / np.sqrt(len(acc)))


def metrics_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def run_episodes(scorer: Scorer, labels, N: int, K: int, M_q: int, episodes: int, seed: int,
                 stream: int = 0) -> EvalReport:
    """Score ``episodes`` episodes drawn from ``episode_rng(seed, stream, e)``.

    Prediction is the argmax score; ``np.argmax`` resolves ties to the lowest
    episode class index, and every query with a tied maximum is counted.
    """
    labels = np.asarray(labels)
    accs, ties = np.empty(episodes), 0
    for e in range(episodes):
        ep = sample_episode(labels, N, K, M_q, episode_rng(seed, stream, e))
        scores = np.asarray(scorer(ep))
        best = scores.max(axis=1, keepdims=True)
        ties += int(((scores == best).sum(axis=1) > 1).sum())
        accs[e] = np.mean(scores.argmax(axis=1) == ep.query_labels)
    return EvalReport(accs, ties)


EVAL_STREAM = 7


def sgmnet_scorer(model: SGMNet, feats: SplitFeatures) -> Scorer:
    """Eval-mode scorer; query graphs come from a per-split cache."""
    model.eval()
    nodes, base = model.graph_cache(feats.spatial)

    def score(ep: Episode) -> np.ndarray:
        with no_grad():
            if ep.shot == 1:
                order = ep.support[np.argsort(ep.support_labels, kind="stable")]
                p_nodes, p_base = Tensor(nodes[order]), Tensor(base[order])
            else:
                g = model.gcm(Tensor(prototypes(feats.spatial, ep)))
                p_nodes, p_base = g.nodes, model.gmm.base(g)
            return model.gmm.score_parts(Tensor(nodes[ep.query]), Tensor(base[ep.query]), p_nodes, p_base).data

    return score


def evaluate(model: SGMNet, feats: SplitFeatures, N: int = 5, K: int = 1, M_q: int = 15,
             episodes: int = 600, seed: int = 0) -> EvalReport:
    return run_episodes(sgmnet_scorer(model, feats), feats.labels, N, K, M_q, episodes, seed, EVAL_STREAM)


def baseline_scorer(feats: SplitFeatures, metric: str) -> Scorer:
    if metric not in ("euclidean", "cosine"):
        raise ValueError(f"unknown baseline metric {metric!r}")
    pooled = feats.pooled.astype(np.float64)

    def score(ep: Episode) -> np.ndarray:
        protos = np.stack([pooled[ep.support[ep.support_labels == k]].mean(axis=0) for k in range(ep.way)])
        q = pooled[ep.query]
        if metric == "euclidean":
            return -np.sqrt(((q[:, None, :] - protos[None]) ** 2).sum(-1))
        qn = np.linalg.norm(q, axis=1, keepdims=True)
        pn = np.linalg.norm(protos, axis=1, keepdims=True)
        return (q @ protos.T) / np.maximum(qn * pn.T, 1e-12)

    return score


def run_baseline(feats: SplitFeatures, metric: str = "cosine", N: int = 5, K: int = 1, M_q: int = 15,
                 episodes: int = 600, seed: int = 0) -> EvalReport:
    """Nearest pooled-feature prototype; consumes the same episode stream as ``evaluate``."""
    return run_episodes(baseline_scorer(feats, metric), feats.labels, N, K, M_q, episodes, seed, EVAL_STREAM)


# -- meta-training -------------------------------------------------------------------------

@dataclass
class MetaTrainConfig:
    way: int = 5
    shot: int = 1
    queries: int = 15
    epochs: int = 30
    episodes_per_epoch: int = 200
    learning_rate: float = 3e-4
    weight_decay: float = 5e-4
    val_episodes: int = 100
    val_queries: int = 15
    patience: int | None = None
    # step decay over epochs, same milestones as pre-training
    lr_decay: bool = False
    seed: int = 0
    use_propagation: bool = True
    use_interaction: bool = True
    gcm: GcmConfig = field(default_factory=GcmConfig)


@dataclass
class MetaHistory:
    epoch_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = -1.0


def one_hot_targets(ep: Episode) -> np.ndarray:
    return np.eye(ep.way, dtype=np.float32)[ep.query_labels]


def episode_loss(model: SGMNet, spatial: np.ndarray, ep: Episode) -> Tensor:
    """Mean over all (query, class) pairs of (s - y)²."""
    return T.mse(model.episode_scores(spatial, ep), one_hot_targets(ep))


def meta_train(train: SplitFeatures, val: SplitFeatures, cfg: MetaTrainConfig, model: SGMNet | None = None,
               backbone: Conv5Backbone | None = None) -> tuple[SGMNet, MetaHistory]:
    """Episodic Adam training of graph construction + matching; keeps the best-validation weights.

    The backbone only enters through the cached features.  When it is passed in,
    its parameter checksum is verified to be unchanged on exit.
    """
    if cfg.epochs < 1 or cfg.episodes_per_epoch < 1:
        raise ValueError("meta-training needs a positive episode budget")
    before = T.parameters_checksum(backbone.named_parameters().values()) if backbone is not None else None
    gmm_cfg = GmmConfig(node_dim=cfg.gcm.node_dim, edge_dim=cfg.gcm.edge_dim,
                        use_propagation=cfg.use_propagation, use_interaction=cfg.use_interaction)
    model = model or SGMNet(cfg.seed, cfg.gcm, gmm_cfg)
    params = model.named_parameters()
    if not model.gmm.cfg.use_propagation:
        # edges only feed propagation; without it the edge MLP is idle
        params = {k: v for k, v in params.items() if not k.startswith("gcm.edge_mlp.")}
    state = OptimizerState("adam", cfg.learning_rate, weight_decay=cfg.weight_decay)
    hist = MetaHistory()
    best_state, stale, step = None, 0, 0
    for epoch in range(cfg.epochs):
        if cfg.lr_decay:
            state.learning_rate = optim.step_decay_lr(cfg.learning_rate, epoch, cfg.epochs)
        model.train()
        t0, total = time.time(), 0.0
        for e in range(cfg.episodes_per_epoch):
            ep_seed = (cfg.seed, 1, epoch, e)
            ep = sample_episode(train.labels, cfg.way, cfg.shot, cfg.queries, episode_rng(*ep_seed))
            optim.zero_grad(params)
            loss = episode_loss(model, train.spatial, ep)
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite meta-training loss {value} at step {step} "
                                       f"(episode seed {ep_seed})", ep_seed, step)
            loss.backward()
            optim.step(params, state)
            total += value
            step += 1
        hist.epoch_loss.append(total / cfg.episodes_per_epoch)
        report = evaluate(model, val, cfg.way, cfg.shot, cfg.val_queries, cfg.val_episodes, seed=cfg.seed)
        hist.val_acc.append(report.mean_acc)
        log.info("meta-train epoch %d loss %.4f val acc %.4f (%.1fs)", epoch, hist.epoch_loss[-1],
                 report.mean_acc, time.time() - t0)
        if report.mean_acc > hist.best_val:
            hist.best_val, hist.best_epoch, stale = report.mean_acc, epoch, 0
            best_state = model.state_dict()
        else:
            stale += 1
            if cfg.patience is not None and stale >= cfg.patience:
                break
    model.load_state_dict(best_state)
    model.eval()
    if backbone is not None and T.parameters_checksum(backbone.named_parameters().values()) != before:
        raise RuntimeError("backbone parameters changed during meta-training")
    return model, hist
