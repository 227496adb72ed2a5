"""Two-layer graph-convolutional classifier over the POI graph, in plain numpy.

Propagation uses the symmetric-normalized adjacency with self-loops,
Ahat = D^-1/2 (A + I) D^-1/2. Training is full-batch gradient descent with a
fixed step and early stopping on validation loss; everything is seeded, so a
fixed seed reproduces weights bit-for-bit at a fixed thread count. The hidden
layer activations are the node embeddings.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .placegraph import PlaceGraph
from .validation import ParameterError


def normalized_adjacency(n_nodes: int, edges: np.ndarray, weights: np.ndarray) -> sp.csr_matrix:
    """Ahat = D^-1/2 (A + I) D^-1/2 with symmetric weighted A."""
    if len(edges):
        i = np.concatenate([edges[:, 0], edges[:, 1]])
        j = np.concatenate([edges[:, 1], edges[:, 0]])
        w = np.concatenate([weights, weights])
    else:
        i = j = np.empty(0, dtype=np.int64)
        w = np.empty(0)
    i = np.concatenate([i, np.arange(n_nodes)])
    j = np.concatenate([j, np.arange(n_nodes)])
    w = np.concatenate([w, np.ones(n_nodes)])
    a = sp.coo_matrix((w, (i, j)), shape=(n_nodes, n_nodes)).tocsr()
    deg = np.asarray(a.sum(axis=1)).ravel()
    d_inv_sqrt = 1.0 / np.sqrt(deg)
    return sp.diags(d_inv_sqrt) @ a @ sp.diags(d_inv_sqrt)


def node_features(graph: PlaceGraph) -> np.ndarray:
    """Inputs that do not trivially encode the label: z-scored coordinates,
    log-degree, and the edge-weighted neighbor-category histogram (the node's
    own category is not a feature and self-loops do not enter the histogram)."""
    n = graph.n_nodes
    n_cat = len(graph.category_names)
    hist = np.zeros((n, n_cat))
    if graph.n_edges:
        e, w = graph.edges, graph.weights
        np.add.at(hist, (e[:, 0], graph.categories[e[:, 1]]), w)
        np.add.at(hist, (e[:, 1], graph.categories[e[:, 0]]), w)
    degree = hist.sum(axis=1)
    totals = np.where(degree > 0, degree, 1.0)
    hist = hist / totals[:, None]
    logdeg = np.log1p(degree)
    cols = [graph.xy[:, 0], graph.xy[:, 1], logdeg]
    feats = np.column_stack(cols)
    mu = feats.mean(axis=0)
    sd = feats.std(axis=0)
    sd[sd == 0] = 1.0
    return np.column_stack([(feats - mu) / sd, hist])


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def gcn_init_params(rng: np.random.Generator, d_in: int, hidden: int, n_classes: int) -> dict:
    return {
        "W1": glorot(rng, d_in, hidden),
        "b1": np.zeros(hidden),
        "W2": glorot(rng, hidden, n_classes),
        "b2": np.zeros(n_classes),
    }


def gcn_forward(a_hat, x: np.ndarray, params: dict):
    """Returns (hidden activations, logits)."""
    z1 = a_hat @ (x @ params["W1"]) + params["b1"]
    h1 = np.maximum(z1, 0.0)
    logits = a_hat @ (h1 @ params["W2"]) + params["b2"]
    return h1, logits


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> float:
    p = softmax(logits[mask])
    picked = p[np.arange(mask.sum()), labels[mask]]
    return float(-np.log(np.maximum(picked, 1e-300)).mean())


def gcn_loss_and_grad(a_hat, x: np.ndarray, labels: np.ndarray, mask: np.ndarray, params: dict):
    """Masked softmax cross-entropy and its analytic gradients."""
    ax = a_hat @ x
    z1 = ax @ params["W1"] + params["b1"]
    h1 = np.maximum(z1, 0.0)
    ah1 = a_hat @ h1
    logits = ah1 @ params["W2"] + params["b2"]
    p = softmax(logits)
    m = int(mask.sum())
    loss = cross_entropy(logits, labels, mask)

    d_logits = p.copy()
    d_logits[np.arange(len(labels)), labels] -= 1.0
    d_logits *= mask[:, None] / m
    grads = {
        "W2": ah1.T @ d_logits,
        "b2": d_logits.sum(axis=0),
    }
    dh1 = (a_hat @ d_logits) @ params["W2"].T  # a_hat is symmetric
    dz1 = dh1 * (z1 > 0)
    grads["W1"] = ax.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    return loss, grads


class GcnClassifier(BaseEstimator):
    """Two-layer GCN node classifier whose hidden layer is the embedding.

    Nodes are canonicalized by id internally, so permuting the input node
    order permutes the outputs identically for the same seed.

    Parameters
    ----------
    hidden_dim : int
        Embedding width (hidden layer size).
    lr : float
        Fixed gradient-descent step.
    max_epochs : int
    patience : int
        Early-stopping patience on validation loss.
    val_fraction : float
        Share of nodes held out for validation (split by seed).
    seed : int

    Attributes
    ----------
    embeddings_ : ndarray of shape (n_nodes, hidden_dim), aligned to the
        fitted graph's node order.
    val_accuracy_ : float
    params_ : dict of trained weights.
    classes_ : tuple of category names.
    """

    def __init__(self, hidden_dim: int = 32, lr: float = 0.5, max_epochs: int = 500,
                 patience: int = 30, val_fraction: float = 0.2, seed: int = 0):
        self.hidden_dim = hidden_dim
        self.lr = lr
        self.max_epochs = max_epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, graph: PlaceGraph, labels: np.ndarray | None = None):
        order = np.argsort(graph.node_ids, kind="stable")
        inverse = np.empty_like(order)
        inverse[order] = np.arange(len(order))

        y_in = graph.categories if labels is None else np.asarray(labels)
        n = graph.n_nodes
        if n < 5:
            raise ParameterError("graph too small to split for validation")
        pos = np.empty(n, dtype=np.int64)
        pos[order] = np.arange(n)
        if graph.n_edges:
            edges = np.sort(pos[graph.edges], axis=1)
            edge_order = np.lexsort((edges[:, 1], edges[:, 0]))
            edges, weights = edges[edge_order], graph.weights[edge_order]
        else:
            edges, weights = graph.edges, graph.weights
        canon = PlaceGraph(
            node_ids=graph.node_ids[order],
            categories=graph.categories[order],
            category_names=graph.category_names,
            xy=graph.xy[order],
            edges=edges,
            weights=weights,
            edge_type=graph.edge_type,
            scale=graph.scale,
        )
        y = y_in[order]
        x = node_features(canon)
        a_hat = normalized_adjacency(n, canon.edges, canon.weights)
        n_classes = len(graph.category_names)

        rng = np.random.default_rng(self.seed)
        perm = rng.permutation(n)
        n_val = max(1, int(round(n * self.val_fraction)))
        val_mask = np.zeros(n, dtype=bool)
        val_mask[perm[:n_val]] = True
        train_mask = ~val_mask

        params = gcn_init_params(rng, x.shape[1], self.hidden_dim, n_classes)
        best_val = np.inf
        best_params = {k: v.copy() for k, v in params.items()}
        since_best = 0
        history = []
        for epoch in range(self.max_epochs):
            loss, grads = gcn_loss_and_grad(a_hat, x, y, train_mask, params)
            if not np.isfinite(loss):
                raise RuntimeError(f"non-finite training loss at epoch {epoch}")
            for key in params:
                params[key] = params[key] - self.lr * grads[key]
            _, logits = gcn_forward(a_hat, x, params)
            val_loss = cross_entropy(logits, y, val_mask)
            history.append((loss, val_loss))
            if val_loss < best_val:
                best_val = val_loss
                best_params = {k: v.copy() for k, v in params.items()}
                since_best = 0
            else:
                since_best += 1
                if since_best >= self.patience:
                    break

        self.params_ = best_params
        h1, logits = gcn_forward(a_hat, x, best_params)
        pred = logits.argmax(axis=1)
        self.val_accuracy_ = float((pred[val_mask] == y[val_mask]).mean())
        self.train_accuracy_ = float((pred[train_mask] == y[train_mask]).mean())
        self.history_ = history
        self.classes_ = tuple(graph.category_names)
        self.n_epochs_ = len(history)
        self.embeddings_ = h1[inverse]
        self._predictions = pred[inverse]
        return self

    def predict(self, graph=None) -> np.ndarray:
        check_is_fitted(self, "params_")
        if graph is not None:
            raise ParameterError("transductive model: predictions exist only for the fitted graph")
        return self._predictions
