"""Two-layer GCN, GraphSAGE (mean aggregator) and single-head GAT.

Each architecture exposes ``init_params``, ``forward`` and ``backward``; the
backward pass returns gradients for every weight plus ``"X"``, the gradient
w.r.t. the input features, which the attack needs to reach trigger rows.
:class:`GNNClassifier` wraps them in a fit/predict estimator.
"""
from __future__ import annotations

import copy
import struct
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import numerics as nx
from .errors import GraphFormatError
from .validation import check_graph, check_nodes

LEAKY_SLOPE = 0.2


def glorot(rng, shape):
    limit = np.sqrt(6.0 / (shape[0] + shape[-1]))
    return rng.uniform(-limit, limit, size=shape)


def _dropout_mask(shape, p, rng):
    if p <= 0.0 or rng is None:
        return None
    return (rng.random(shape) >= p) / (1.0 - p)


class GCN:
    name = "gcn"
    param_names = ("W1", "W2")

    @staticmethod
    def init_params(d, h, k, rng):
        return {"W1": glorot(rng, (d, h)), "W2": glorot(rng, (h, k))}

    @staticmethod
    def forward(params, graph, x=None, dropout=0.0, rng=None):
        """``logits = Â relu(Â X W1) W2`` with optional hidden dropout."""
        a = graph.normalized_adjacency
        x = graph.features if x is None else x
        ax = nx.spmm(a, x)
        z1 = nx.matmul(ax, params["W1"])
        h = nx.relu_forward(z1)
        mask = _dropout_mask(h.shape, dropout, rng)
        hd = h if mask is None else h * mask
        ah = nx.spmm(a, hd)
        logits = nx.matmul(ah, params["W2"])
        cache = {"a": a, "ax": ax, "z1": z1, "h": h, "mask": mask, "ah": ah}
        return logits, cache

    @staticmethod
    def backward(params, cache, dlogits):
        a = cache["a"]
        dah, dw2 = nx.matmul_backward(cache["ah"], params["W2"], dlogits)
        dhd = nx.spmm(a.T, dah)
        dh = dhd if cache["mask"] is None else dhd * cache["mask"]
        dz1 = nx.relu_backward(cache["z1"], dh)
        dax, dw1 = nx.matmul_backward(cache["ax"], params["W1"], dz1)
        dx = nx.spmm(a.T, dax)
        return {"W1": dw1, "W2": dw2, "X": dx}

    @staticmethod
    def hidden(params, graph, x=None):
        x = graph.features if x is None else x
        return nx.relu_forward(nx.spmm(graph.normalized_adjacency, x) @ params["W1"])


class SAGE:
    name = "sage"
    param_names = ("W_self1", "W_neigh1", "W_self2", "W_neigh2")

    @staticmethod
    def init_params(d, h, k, rng):
        return {
            "W_self1": glorot(rng, (d, h)), "W_neigh1": glorot(rng, (d, h)),
            "W_self2": glorot(rng, (h, k)), "W_neigh2": glorot(rng, (h, k)),
        }

    @staticmethod
    def forward(params, graph, x=None, dropout=0.0, rng=None):
        m = graph.mean_adjacency
        x = graph.features if x is None else x
        mx = nx.spmm(m, x)
        z1 = x @ params["W_self1"] + mx @ params["W_neigh1"]
        h = nx.relu_forward(z1)
        mask = _dropout_mask(h.shape, dropout, rng)
        hd = h if mask is None else h * mask
        mh = nx.spmm(m, hd)
        logits = hd @ params["W_self2"] + mh @ params["W_neigh2"]
        return logits, {"m": m, "x": x, "mx": mx, "z1": z1, "mask": mask, "hd": hd, "mh": mh}

    @staticmethod
    def backward(params, cache, dlogits):
        m = cache["m"]
        g = {}
        g["W_self2"] = cache["hd"].T @ dlogits
        g["W_neigh2"] = cache["mh"].T @ dlogits
        dhd = dlogits @ params["W_self2"].T + nx.spmm(m.T, dlogits @ params["W_neigh2"].T)
        dh = dhd if cache["mask"] is None else dhd * cache["mask"]
        dz1 = nx.relu_backward(cache["z1"], dh)
        g["W_self1"] = cache["x"].T @ dz1
        g["W_neigh1"] = cache["mx"].T @ dz1
        g["X"] = dz1 @ params["W_self1"].T + nx.spmm(m.T, dz1 @ params["W_neigh1"].T)
        return g


def gat_layer_forward(x, w, a_src, a_dst, adj):
    """Single-head attention over N(v) ∪ {v}; ``adj`` is A + I in CSR."""
    dst = np.repeat(np.arange(adj.shape[0]), np.diff(adj.indptr))
    src = adj.indices
    z = x @ w
    s_src = z @ a_src
    s_dst = z @ a_dst
    raw = s_dst[dst] + s_src[src]
    e = nx.leaky_relu(raw, LEAKY_SLOPE)
    starts = adj.indptr[:-1]
    emax = np.maximum.reduceat(e, starts)
    ex = np.exp(e - emax[dst])
    alpha = ex / np.add.reduceat(ex, starts)[dst]
    att = adj.copy()
    att.data = alpha
    out = nx.spmm(att, z)
    return out, {"x": x, "z": z, "src": src, "dst": dst, "raw": raw, "alpha": alpha, "att": att, "starts": starts}


def gat_layer_backward(w, a_src, a_dst, cache, dout):
    z, src, dst, alpha = cache["z"], cache["src"], cache["dst"], cache["alpha"]
    dalpha = np.sum(dout[dst] * z[src], axis=1)
    dz = nx.spmm(cache["att"].T, dout)
    weighted = np.add.reduceat(alpha * dalpha, cache["starts"])
    de = alpha * (dalpha - weighted[dst])
    draw = nx.leaky_relu_backward(cache["raw"], de, LEAKY_SLOPE)
    n = z.shape[0]
    ds_dst = np.bincount(dst, draw, minlength=n)
    ds_src = np.bincount(src, draw, minlength=n)
    da_dst = z.T @ ds_dst
    da_src = z.T @ ds_src
    dz += np.outer(ds_dst, a_dst) + np.outer(ds_src, a_src)
    dx, dw = nx.matmul_backward(cache["x"], w, dz)
    return dx, dw, da_src, da_dst


class GAT:
    name = "gat"
    param_names = ("W1", "a_src1", "a_dst1", "W2", "a_src2", "a_dst2")

    @staticmethod
    def init_params(d, h, k, rng):
        return {
            "W1": glorot(rng, (d, h)), "a_src1": glorot(rng, (h, 1))[:, 0], "a_dst1": glorot(rng, (h, 1))[:, 0],
            "W2": glorot(rng, (h, k)), "a_src2": glorot(rng, (k, 1))[:, 0], "a_dst2": glorot(rng, (k, 1))[:, 0],
        }

    @staticmethod
    def forward(params, graph, x=None, dropout=0.0, rng=None):
        adj = graph.self_loop_adjacency
        x = graph.features if x is None else x
        z1, c1 = gat_layer_forward(x, params["W1"], params["a_src1"], params["a_dst1"], adj)
        h = nx.relu_forward(z1)
        mask = _dropout_mask(h.shape, dropout, rng)
        hd = h if mask is None else h * mask
        logits, c2 = gat_layer_forward(hd, params["W2"], params["a_src2"], params["a_dst2"], adj)
        return logits, {"c1": c1, "c2": c2, "z1": z1, "mask": mask}

    @staticmethod
    def backward(params, cache, dlogits):
        g = {}
        dhd, g["W2"], g["a_src2"], g["a_dst2"] = gat_layer_backward(
            params["W2"], params["a_src2"], params["a_dst2"], cache["c2"], dlogits)
        dh = dhd if cache["mask"] is None else dhd * cache["mask"]
        dz1 = nx.relu_backward(cache["z1"], dh)
        g["X"], g["W1"], g["a_src1"], g["a_dst1"] = gat_layer_backward(
            params["W1"], params["a_src1"], params["a_dst1"], cache["c1"], dz1)
        return g


ARCHS = {"gcn": GCN, "sage": SAGE, "gat": GAT}


def get_arch(name):
    try:
        return ARCHS[name.lower()]
    except KeyError:
        raise ValueError(f"unknown architecture {name!r}; expected one of {sorted(ARCHS)}") from None


class GNNClassifier(ClassifierMixin, BaseEstimator):
    """Transductive-style node classifier trained by full-batch Adam.

    ``fit`` reads labels from ``graph.labels`` (or ``labels``) on
    ``train_nodes`` and keeps the parameters from the epoch with the best
    accuracy on ``val_nodes``.
    """

    def __init__(self, arch="gcn", hidden=64, epochs=200, lr=0.01, weight_decay=5e-4,
                 dropout=0.5, n_classes=None, seed=0):
        self.arch = arch
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.weight_decay = weight_decay
        self.dropout = dropout
        self.n_classes = n_classes
        self.seed = seed

    def fit(self, graph, train_nodes, val_nodes=None, labels=None):
        check_graph(graph)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        labels = graph.labels if labels is None else np.asarray(labels)
        if labels is None:
            raise ValueError("no labels available")
        train_nodes = check_nodes(train_nodes, graph.num_nodes)
        if train_nodes.size == 0:
            raise ValueError("no labeled training nodes")
        if np.any(labels[train_nodes] < 0):
            raise ValueError("training node without a label")
        val_nodes = check_nodes([] if val_nodes is None else val_nodes, graph.num_nodes)
        val_nodes = val_nodes[labels[val_nodes] >= 0]

        arch = get_arch(self.arch)
        k = self.n_classes if self.n_classes is not None else int(labels[labels >= 0].max()) + 1
        rng = np.random.default_rng(self.seed)
        params = arch.init_params(graph.num_features, self.hidden, k, rng)
        names = list(arch.param_names)
        state = nx.AdamState(lr=self.lr)

        # snapshot key: validation accuracy, ties broken by lower validation loss
        best, best_key = None, (-1.0, -np.inf)
        self.curve_ = []
        for _ in range(self.epochs):
            logits, cache = arch.forward(params, graph, dropout=self.dropout, rng=rng)
            loss, probs = nx.softmax_xent_forward(logits, labels, train_nodes)
            grads = arch.backward(params, cache, nx.softmax_xent_backward(probs, labels, train_nodes))
            if self.weight_decay:
                for name in names:
                    grads[name] = grads[name] + self.weight_decay * params[name]
            nx.adam_step([params[n] for n in names], [grads[n] for n in names], state)
            if val_nodes.size:
                val_logits, _ = arch.forward(params, graph)
                acc = float(np.mean(val_logits[val_nodes].argmax(axis=1) == labels[val_nodes]))
                val_loss, _ = nx.softmax_xent_forward(val_logits, labels, val_nodes)
                key = (acc, -val_loss)
                if key > best_key:
                    best, best_key = copy.deepcopy(params), key
            else:
                acc = float("nan")
            self.curve_.append((loss, acc))
        self.params_ = best if best is not None else params
        self.n_classes_ = k
        self.classes_ = np.arange(k)
        self.best_val_accuracy_ = best_key[0] if best is not None else None
        return self

    def decision_function(self, graph, nodes=None):
        check_is_fitted(self, "params_")
        check_graph(graph, validate=False)
        logits, _ = get_arch(self.arch).forward(self.params_, graph)
        return logits if nodes is None else logits[check_nodes(nodes, graph.num_nodes)]

    def predict_proba(self, graph, nodes=None):
        return nx.softmax(self.decision_function(graph, nodes))

    def predict(self, graph, nodes=None):
        return self.decision_function(graph, nodes).argmax(axis=1)

    def score(self, graph, nodes, labels=None):
        labels = graph.labels if labels is None else np.asarray(labels)
        nodes = check_nodes(nodes, graph.num_nodes)
        return float(np.mean(self.predict(graph, nodes) == labels[nodes]))

    def save(self, path):
        save_model(self, path)


def train_model(arch, graph, split, **kwargs):
    """Fit a classifier on ``split.labeled_train`` with validation snapshotting."""
    return GNNClassifier(arch=arch, **kwargs).fit(graph, split.labeled_train, split.labeled_val)


MODEL_MAGIC = b"GDMW"
_ARCH_TAGS = {"gcn": b"GCN\0", "sage": b"SAGE", "gat": b"GAT\0"}


def save_model(model: GNNClassifier, path) -> None:
    """Checkpoint: magic, 4-byte arch tag, tensor count, (rows, cols) per
    tensor, then float32 weights in ``param_names`` order."""
    check_is_fitted(model, "params_")
    arch = get_arch(model.arch)
    tensors = [np.atleast_2d(model.params_[n].reshape(model.params_[n].shape[0], -1)) for n in arch.param_names]
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC + _ARCH_TAGS[arch.name])
        fh.write(struct.pack("<I", len(tensors)))
        for t in tensors:
            fh.write(struct.pack("<II", *t.shape))
        for t in tensors:
            fh.write(np.ascontiguousarray(t, dtype="<f4").tobytes())


def load_model(path) -> GNNClassifier:
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise GraphFormatError(f"{path}: unexpected EOF")
    if raw[:4] != MODEL_MAGIC:
        raise GraphFormatError(f"{path}: bad magic {raw[:4]!r}")
    tags = {v: k for k, v in _ARCH_TAGS.items()}
    if raw[4:8] not in tags:
        raise GraphFormatError(f"{path}: unknown arch tag {raw[4:8]!r}")
    arch = get_arch(tags[raw[4:8]])
    (count,) = struct.unpack_from("<I", raw, 8)
    if count != len(arch.param_names):
        raise GraphFormatError(f"{path}: expected {len(arch.param_names)} tensors, found {count}")
    offset = 12
    shapes = []
    for _ in range(count):
        if len(raw) < offset + 8:
            raise GraphFormatError(f"{path}: unexpected EOF")
        shapes.append(struct.unpack_from("<II", raw, offset))
        offset += 8
    params = {}
    for name, (r, c) in zip(arch.param_names, shapes):
        nbytes = 4 * r * c
        if len(raw) < offset + nbytes:
            raise GraphFormatError(f"{path}: unexpected EOF")
        t = np.frombuffer(raw, dtype="<f4", count=r * c, offset=offset).reshape(r, c).astype(np.float64)
        params[name] = t[:, 0] if name.startswith("a_") else t
        offset += nbytes
    h = params[arch.param_names[0]].shape[1]
    k = params["W_self2" if arch is SAGE else "W2"].shape[1]
    model = GNNClassifier(arch=arch.name, hidden=h, n_classes=k)
    model.params_ = params
    model.n_classes_ = k
    model.classes_ = np.arange(k)
    return model
