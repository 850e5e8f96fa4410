"""Collaborative training across secondary users.

Three schemes share one loop:

* ``decoupled``: local SGD, then shallow layers averaged over all nodes and
  each band's deep block averaged over the nodes that observe that band;
* ``fedavg``: local SGD, then every parameter averaged over all nodes;
* ``standalone``: one node holding everyone's data with full observation.

All nodes start from the same parameter draw, and every averaged value is
written back to every node.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import metrics
from .neuralnet import (
    LrSchedule,
    ModelParams,
    NetConfig,
    backward,
    bce_loss,
    classify,
    cosine_lr,
    forward,
    init_params,
    sgd_step,
)

SCHEMES = ("standalone", "decoupled", "fedavg")


class TopologyError(ValueError):
    pass


@dataclass
class ObservationTopology:
    masks: np.ndarray  # (J, N_f), 1 where SU j observes band n

    def __post_init__(self):
        self.masks = np.asarray(self.masks, dtype=np.int8)
        if self.masks.ndim != 2 or self.masks.size == 0:
            raise TopologyError("masks must be a non-empty J x N_f matrix")
        if not np.isin(self.masks, (0, 1)).all():
            raise TopologyError("masks must be binary")
        uncovered = np.flatnonzero(self.masks.sum(axis=0) == 0)
        if len(uncovered):
            raise TopologyError(f"bands {uncovered.tolist()} are observed by no SU")
        idle = np.flatnonzero(self.masks.sum(axis=1) == 0)
        if len(idle):
            raise TopologyError(f"SUs {idle.tolist()} observe no band")

    @property
    def n_nodes(self):
        return self.masks.shape[0]

    @property
    def n_bands(self):
        return self.masks.shape[1]

    def observers(self, band):
        """Indices of the SUs observing ``band``, in node order."""
        return np.flatnonzero(self.masks[:, band])

    @classmethod
    def full(cls, n_nodes, n_bands):
        return cls(np.ones((n_nodes, n_bands), dtype=np.int8))

    @classmethod
    def contiguous_windows(cls, n_nodes, n_bands, rng, width=None, max_tries=1000):
        """Each SU sees a random contiguous window of ``width`` bands (default ceil(N_f/2)).

        Windows are redrawn until every band is covered.
        """
        width = math.ceil(n_bands / 2) if width is None else width
        if not 1 <= width <= n_bands:
            raise TopologyError(f"window width {width} out of range")
        for _ in range(max_tries):
            starts = rng.integers(0, n_bands - width + 1, size=n_nodes)
            masks = np.zeros((n_nodes, n_bands), dtype=np.int8)
            for j, s in enumerate(starts):
                masks[j, s:s + width] = 1
            if masks.sum(axis=0).all():
                return cls(masks)
        raise TopologyError(f"{n_nodes} windows of width {width} cannot cover {n_bands} bands")


@dataclass
class NodeState:
    index: int
    params: ModelParams
    x: np.ndarray  # normalised local training inputs (n, N_w, N_f)
    y: np.ndarray  # (n, N_f)
    mask: np.ndarray  # (N_f,)
    rng: np.random.Generator
    iteration: int = 0  # global SGD step counter for the learning-rate schedule


@dataclass
class TrainingConfig:
    rounds: int = 20
    epochs: int = 1
    batch_size: int = 32
    eta0: float = 0.05
    eta_min: float = 0.0

    def __post_init__(self):
        if self.rounds < 0 or self.epochs < 0:
            raise ValueError("rounds and epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        LrSchedule(self.eta0, self.eta_min, 1)

    def iterations_per_epoch(self, n_samples):
        return math.ceil(n_samples / self.batch_size)

    def schedule(self, n_samples):
        t_max = max(1, self.rounds * self.epochs * self.iterations_per_epoch(n_samples))
        return LrSchedule(self.eta0, self.eta_min, t_max)


@dataclass
class TrainingHistory:
    scheme: str
    records: list = field(default_factory=list)  # dicts: round, node, loss, accuracy, bytes
    evaluations: list = field(default_factory=list)  # per-round global test metrics

    def add(self, round_idx, node, loss, accuracy, bytes_exchanged):
        self.records.append({"round": round_idx, "node": node, "scheme": self.scheme,
                             "loss": loss, "accuracy": accuracy,
                             "bytes_exchanged": bytes_exchanged})

    def to_csv(self, path):
        cols = ["round", "node", "scheme", "loss", "accuracy", "bytes_exchanged"]
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(cols)
            for r in self.records:
                w.writerow([metrics.fmt(r[c]) for c in cols])


def spawn_streams(seed, n_nodes):
    """One stream for the shared initialisation plus one per node."""
    init_ss, *node_ss = np.random.SeedSequence(seed).spawn(n_nodes + 1)
    return np.random.default_rng(init_ss), [np.random.default_rng(s) for s in node_ss]


def init_nodes(net_cfg: NetConfig, topology: ObservationTopology, data, seed):
    """Build one node per SU, all starting from the same parameter draw.

    ``data`` is a list of ``(x, y)`` local training sets, one per node.
    """
    if not isinstance(topology, ObservationTopology):
        topology = ObservationTopology(topology)
    if len(data) != topology.n_nodes:
        raise TopologyError(f"{len(data)} local datasets for {topology.n_nodes} nodes")
    init_rng, node_rngs = spawn_streams(seed, topology.n_nodes)
    base = init_params(net_cfg, init_rng)
    return [NodeState(j, base.copy(), np.asarray(x, dtype=net_cfg.dtype), np.asarray(y),
                      topology.masks[j].copy(), node_rngs[j])
            for j, (x, y) in enumerate(data)]


def local_train(node: NodeState, schedule: LrSchedule, epochs=1, batch_size=32, trace=None):
    """``epochs`` passes of masked-loss minibatch SGD; returns the mean loss per observed entry.

    The step size follows the cosine schedule at the node's global iteration
    counter. Gradients are batch means of the summed per-sample loss. Pass a
    list as ``trace`` to collect the per-iteration losses.
    """
    n = len(node.x)
    if n == 0:
        raise ValueError(f"node {node.index} has no training data")
    losses = []
    n_obs = max(1, int(np.count_nonzero(node.mask)))
    for _ in range(epochs):
        order = node.rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            pred, cache = forward(node.params, node.x[idx], "train", band_mask=node.mask)
            losses.append(float(bce_loss(pred, node.y[idx], node.mask).sum()) / (len(idx) * n_obs))
            grads = backward(node.params, cache, node.y[idx], node.mask)
            eta = cosine_lr(min(node.iteration, schedule.t_max), schedule)
            sgd_step(node.params, grads, eta / len(idx))
            node.iteration += 1
    if trace is not None:
        trace.extend(losses)
    return float(np.mean(losses)) if losses else float("nan")


def node_mean(arrays):
    """Elementwise mean that is exact for identical inputs and independent of input order.

    Values are sorted per element and accumulated as offsets from the smallest.
    """
    stack = np.sort(np.stack(arrays), axis=0)
    ref = stack[0]
    return ref + (stack - ref).sum(axis=0) / len(arrays)


def average_shallow(nodes):
    """Global mean of the shallow block (weights and running stats), written to every node."""
    if not nodes:
        raise ValueError("no nodes to average")
    keys = nodes[0].params.shallow.keys()
    for nd in nodes[1:]:
        if nd.params.shallow.keys() != keys:
            raise ValueError("shallow blocks differ in structure")
    avg = {}
    for k in keys:
        arrs = [nd.params.shallow[k] for nd in nodes]
        if any(a.shape != arrs[0].shape for a in arrs):
            raise ValueError(f"shape mismatch in shallow parameter {k}")
        avg[k] = node_mean(arrs)
    for nd in nodes:
        nd.params.shallow = {k: v.copy() for k, v in avg.items()}
    return avg


def average_deep(nodes, topology: ObservationTopology):
    """Band-wise mean of deep blocks over that band's observers, written to every node."""
    out = []
    for n in range(topology.n_bands):
        members = [nodes[j] for j in topology.observers(n)]
        blk = {k: node_mean([nd.params.deep[n][k] for nd in members])
               for k in members[0].params.deep[n]}
        for nd in nodes:
            nd.params.deep[n] = {k: v.copy() for k, v in blk.items()}
        out.append(blk)
    return out


def average_all(nodes):
    """Classical FedAvg: every block averaged over every node."""
    average_shallow(nodes)
    return average_deep(nodes, ObservationTopology.full(len(nodes), len(nodes[0].params.deep)))


def bytes_per_round(scheme, params: ModelParams, topology: ObservationTopology):
    """Bytes uploaded by the nodes in one averaging round."""
    item = np.dtype(params.config.dtype).itemsize
    shallow = params.block_size("shallow") * item
    deep = params.block_size("deep") * item
    J = topology.n_nodes
    if scheme == "decoupled":
        return shallow * J + int(topology.masks.sum()) * deep
    if scheme == "fedavg":
        return (shallow + topology.n_bands * deep) * J
    return 0


def predict(params, x, batch_size=128):
    """Eval-mode probabilities for ``x``, computed in chunks."""
    out = [forward(params, x[i:i + batch_size], "eval")[0].probs
           for i in range(0, len(x), batch_size)]
    return np.concatenate(out, axis=0)


def evaluate(params, x, y, mask=None):
    """Test metrics of one model over all (sample, band) pairs where ``mask`` is set."""
    probs = predict(params, x)
    dec = classify(probs)
    m = np.ones(y.shape, dtype=bool)
    if mask is not None:
        m = np.broadcast_to(np.asarray(mask, bool), y.shape)
    loss = bce_loss(probs, y, m).sum() / max(1, np.count_nonzero(m))
    metrics.check_consistency(dec[m], y[m])
    return {"accuracy": metrics.accuracy(dec[m], y[m]), "pd": metrics.pd(dec[m], y[m]),
            "pfa": metrics.pfa(dec[m], y[m]), "mean_loss": float(loss), "probs": probs}


@dataclass
class RunSpec:
    """Everything a training run needs besides the scheme."""

    net: NetConfig
    training: TrainingConfig
    topology: ObservationTopology
    train_x: np.ndarray
    train_y: np.ndarray
    train_su: np.ndarray
    test_x: np.ndarray
    test_y: np.ndarray
    test_su: np.ndarray
    seed: int = 0


def _local_data(spec: RunSpec):
    return [(spec.train_x[spec.train_su == j], spec.train_y[spec.train_su == j])
            for j in range(spec.topology.n_nodes)]


def run_rounds(nodes, topology, training: TrainingConfig, scheme, test_x, test_y, test_su,
               history=None, first_round=1):
    """Synchronous rounds: every node trains locally, then one averaging barrier.

    Appends to ``history`` (a new one is created if omitted) and returns it.
    The model evaluated each round is node 0's, which after averaging holds
    the shared parameters for every band.
    """
    history = TrainingHistory(scheme) if history is None else history
    tc = training
    schedules = [tc.schedule(len(nd.x)) for nd in nodes]
    sent = bytes_per_round(scheme, nodes[0].params, topology)
    for i in range(first_round, first_round + tc.rounds):
        losses = [local_train(nd, s, tc.epochs, tc.batch_size) for nd, s in zip(nodes, schedules)]
        if scheme == "decoupled":
            average_shallow(nodes)
            average_deep(nodes, topology)
        elif scheme == "fedavg":
            average_all(nodes)
        elif scheme != "standalone":
            raise ValueError(f"unknown scheme {scheme!r}")
        ev = evaluate(nodes[0].params, test_x, test_y)
        history.evaluations.append({"round": i, **{k: v for k, v in ev.items() if k != "probs"},
                                    "bytes_exchanged": sent})
        dec = classify(ev["probs"])
        for nd, loss in zip(nodes, losses):
            rows = test_su == nd.index
            m = np.broadcast_to(nd.mask.astype(bool), test_y[rows].shape)
            acc = metrics.accuracy(dec[rows][m], test_y[rows][m]) if m.any() else float("nan")
            history.add(i, nd.index, loss, acc, sent)
    return history


def regroup(nodes, topology: ObservationTopology, data, seed):
    """New node set for a changed topology, e.g. after SUs join or leave.

    Every node of the new set starts from the current shared model (node 0's
    parameters), gets a fresh per-node stream from ``seed`` and a reset
    iteration counter, so the next :func:`run_rounds` call begins a new
    learning-rate schedule.
    """
    if not isinstance(topology, ObservationTopology):
        topology = ObservationTopology(topology)
    if len(data) != topology.n_nodes:
        raise TopologyError(f"{len(data)} local datasets for {topology.n_nodes} nodes")
    shared = nodes[0].params
    _, rngs = spawn_streams(seed, topology.n_nodes)
    dtype = shared.config.dtype
    return [NodeState(j, shared.copy(), np.asarray(x, dtype=dtype), np.asarray(y),
                      topology.masks[j].copy(), rngs[j])
            for j, (x, y) in enumerate(data)]


def _run_collaborative(spec: RunSpec, scheme):
    nodes = init_nodes(spec.net, spec.topology, _local_data(spec), spec.seed)
    history = run_rounds(nodes, spec.topology, spec.training, scheme,
                         spec.test_x, spec.test_y, spec.test_su)
    return nodes, history


def run_decoupled(spec: RunSpec):
    return _run_collaborative(spec, "decoupled")


def run_fedavg(spec: RunSpec):
    return _run_collaborative(spec, "fedavg")


def run_standalone(spec: RunSpec):
    """Centralised reference: one node trained on all SUs' data with every band labelled."""
    solo = RunSpec(spec.net, spec.training, ObservationTopology.full(1, spec.topology.n_bands),
                   spec.train_x, spec.train_y, np.zeros(len(spec.train_x), dtype=int),
                   spec.test_x, spec.test_y, np.zeros(len(spec.test_x), dtype=int), spec.seed)
    nodes, history = _run_collaborative(solo, "standalone")
    return nodes[0].params, history


RUNNERS = {"standalone": run_standalone, "decoupled": run_decoupled, "fedavg": run_fedavg}
