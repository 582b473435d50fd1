"""A small split MLP with hand-written backprop and last-layer gradient aggregation.

Layer k maps ``a_{k-1}`` to ``h_k = a_{k-1} W_k + c_k`` and ``a_k = act_k(h_k)``.
Clients own layers ``1..cut`` (one copy per client), the server owns the rest.
All backward passes are expressed over "virtual samples": rows of an input
trace paired with a top-layer delta and a scalar weight, so the aggregated,
unaggregated and reference paths share one routine.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .latency import aggregated_count


def _sigmoid(h):
    return 0.5 * (1.0 + np.tanh(0.5 * h))


ACTIVATIONS = {
    "identity": (lambda h: h, lambda h: np.ones_like(h)),
    "relu": (lambda h: np.maximum(h, 0.0), lambda h: (h > 0).astype(float)),
    "sigmoid": (_sigmoid, lambda h: _sigmoid(h) * (1.0 - _sigmoid(h))),
}

LOSSES = ("ce", "mse")


@dataclass
class Layer:
    W: np.ndarray
    c: np.ndarray
    act: str

    def copy(self):
        return Layer(self.W.copy(), self.c.copy(), self.act)


@dataclass
class BatchTrace:
    """Per-layer inputs and pre-activations for a batch (rows = samples)."""

    inputs: list
    pre: list

    @property
    def size(self):
        return self.inputs[0].shape[0]

    def rows(self, idx):
        return BatchTrace([a[idx] for a in self.inputs], [h[idx] for h in self.pre])


class SplitNet:
    """Per-client copies of the client stack plus one shared server stack."""

    def __init__(self, client_layers, server_layers):
        shapes = [[lay.W.shape for lay in stack] for stack in client_layers]
        if any(s != shapes[0] for s in shapes):
            raise ValueError("client stacks must have identical shapes")
        if client_layers[0][-1].W.shape[1] != server_layers[0].W.shape[0]:
            raise ValueError("cut interface width mismatch")
        self.clients = client_layers
        self.server = server_layers

    @classmethod
    def create(cls, dims, acts, cut, n_clients, seed=0):
        """``dims`` = [d, h1, ..., out]; ``acts`` has one entry per layer."""
        if len(acts) != len(dims) - 1:
            raise ValueError("need one activation per layer")
        if not 1 <= cut <= len(acts) - 1:
            raise ValueError("cut must leave at least one layer on each side")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        rng = np.random.default_rng(seed)
        layers = []
        for k, act in enumerate(acts):
            fan_in = dims[k]
            W = rng.standard_normal((dims[k], dims[k + 1])) * np.sqrt(2.0 / fan_in)
            c = np.zeros(dims[k + 1])
            layers.append(Layer(W, c, act))
        client = layers[:cut]
        return cls([[lay.copy() for lay in client] for _ in range(n_clients)], layers[cut:])

    @property
    def n_clients(self):
        return len(self.clients)

    @property
    def cut(self):
        return len(self.clients[0])

    def copy(self):
        return SplitNet([[lay.copy() for lay in stack] for stack in self.clients],
                        [lay.copy() for lay in self.server])

    def parameters(self):
        """Flat list of every parameter array (clients first, then server)."""
        out = []
        for stack in self.clients + [self.server]:
            for lay in stack:
                out += [lay.W, lay.c]
        return out

    def n_params(self):
        return sum(p.size for p in self.parameters())


# --- forward ------------------------------------------------------------------

def forward_stack(layers, X):
    a = np.asarray(X, dtype=float)
    inputs, pre = [], []
    for lay in layers:
        inputs.append(a)
        h = a @ lay.W + lay.c
        pre.append(h)
        a = ACTIVATIONS[lay.act][0](h)
    return a, BatchTrace(inputs, pre)


def client_forward(net: SplitNet, i, X):
    """Smashed data S_i (b x q) and the trace kept for client-side BP."""
    return forward_stack(net.clients[i], X)


def server_forward(net: SplitNet, S):
    """Server output for the stacked smashed data (device order ascending)."""
    return forward_stack(net.server, S)


# --- loss -----------------------------------------------------------------------

def _softmax(h):
    z = h - h.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _onehot(y, k):
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), np.asarray(y, dtype=int)] = 1.0
    return out


def sample_losses(out, pre, y, loss="ce"):
    """Per-sample loss from the last layer's output and pre-activation."""
    if loss == "ce":
        z = pre - pre.max(axis=1, keepdims=True)
        logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
        return -logp[np.arange(len(y)), np.asarray(y, dtype=int)]
    if loss == "mse":
        return 0.5 * np.sum((out - _onehot(y, out.shape[1])) ** 2, axis=1)
    raise ValueError(f"unknown loss {loss!r}")


def last_layer_gradients(trace: BatchTrace, out, y, loss="ce", act="identity"):
    """Per-sample d loss / d h_L (rows align with the batch).

    ``ce`` applies softmax to the last pre-activation, so the gradient is
    p - onehot(y); ``mse`` is 1/2 ||act(h_L) - onehot(y)||^2.
    """
    pre = trace.pre[-1]
    if loss == "ce":
        return _softmax(pre) - _onehot(y, pre.shape[1])
    if loss == "mse":
        return (out - _onehot(y, out.shape[1])) * ACTIVATIONS[act][1](pre)
    raise ValueError(f"unknown loss {loss!r}")


# --- aggregation ---------------------------------------------------------------

def aggregate_last_layer(grads, lambdas, phi):
    """Split per-client last-layer gradients into aggregated and untouched parts.

    ``grads`` is a list of (b x n_out) arrays, one per client, rows aligned by
    sample index.  Returns ``(z_bar, rest)`` with z_bar of shape (A x n_out),
    A = ceil(phi b), and ``rest`` the list of per-client (b - A) remainders.
    """
    b = grads[0].shape[0]
    if any(g.shape != grads[0].shape for g in grads):
        raise ValueError("every client must contribute b aligned gradients")
    A = aggregated_count(phi, b)
    lam = np.asarray(lambdas, dtype=float)
    z_bar = np.einsum("i,ijk->jk", lam, np.stack([g[:A] for g in grads]))
    return z_bar, [g[A:] for g in grads]


def server_coefficients(phi, batch, lambdas):
    """Weight of each virtual sample in the server gradient.

    Layout: A aggregated slots (1/b each), then for each client its b - A
    unaggregated slots (lambda_i / b each).
    """
    A = aggregated_count(phi, batch)
    parts = [np.full(A, 1.0 / batch)]
    for lam in lambdas:
        parts.append(np.full(batch - A, lam / batch))
    return np.concatenate(parts)


# --- backward ------------------------------------------------------------------

def backprop(layers, trace: BatchTrace, delta, coef):
    """Back-propagate per-row deltas at the top pre-activation.

    Returns ``(grads, d_input)``: per-layer ``(dW, dc)`` weighted by ``coef``,
    and the unweighted per-row gradient w.r.t. the stack's input.
    """
    coef = np.asarray(coef, dtype=float)
    grads = [None] * len(layers)
    for k in range(len(layers) - 1, -1, -1):
        wd = coef[:, None] * delta
        grads[k] = (trace.inputs[k].T @ wd, wd.sum(axis=0))
        d_in = delta @ layers[k].W.T
        if k > 0:
            delta = d_in * ACTIVATIONS[layers[k - 1].act][1](trace.pre[k - 1])
    return grads, d_in


def _concat_traces(traces):
    return BatchTrace([np.concatenate(x) for x in zip(*[t.inputs for t in traces])],
                      [np.concatenate(x) for x in zip(*[t.pre for t in traces])])


def _mean_trace(traces, lambdas, rows):
    lam = np.asarray(lambdas, dtype=float)
    inputs = [np.einsum("i,ijk->jk", lam, np.stack([t.inputs[k][rows] for t in traces]))
              for k in range(len(traces[0].inputs))]
    pre = [np.einsum("i,ijk->jk", lam, np.stack([t.pre[k][rows] for t in traces]))
           for k in range(len(traces[0].pre))]
    return BatchTrace(inputs, pre)


@dataclass
class ServerGrads:
    grads: list
    broadcast: np.ndarray  # A x q cut-layer gradients shared by every client
    unicast: list  # per client, (b - A) x q


def server_backward(net: SplitNet, traces, z_bar, rest, lambdas, phi, mode="mean"):
    """Server weight gradients and cut-layer gradients for every client.

    ``traces`` are the per-client server traces (each b rows, in sample
    order).  Aggregated slot j runs through Jacobians at the lambda-weighted
    mean of the clients' activations at index j (``mode="mean"``), or through
    each client's own activations with lambda-weighted re-averaging
    (``mode="per_client"``).
    """
    b = traces[0].size
    A = aggregated_count(phi, b)
    C = len(traces)
    lam = np.asarray(lambdas, dtype=float)
    unagg = [t.rows(slice(A, b)) for t in traces]
    if mode == "mean":
        agg_trace = [_mean_trace(traces, lam, slice(0, A))]
        agg_delta = [z_bar]
        agg_coef = [np.full(A, 1.0 / b)]
    elif mode == "per_client":
        agg_trace = [t.rows(slice(0, A)) for t in traces]
        agg_delta = [z_bar] * C
        agg_coef = [np.full(A, lam[i] / b) for i in range(C)]
    else:
        raise ValueError(f"unknown aggregation mode {mode!r}")
    trace = _concat_traces(agg_trace + unagg)
    delta = np.concatenate(agg_delta + list(rest))
    coef = np.concatenate(agg_coef + [np.full(b - A, lam[i] / b) for i in range(C)])
    grads, d_in = backprop(net.server, trace, delta, coef)
    n_agg = A * len(agg_trace)
    if mode == "mean":
        broadcast = d_in[:A]
    else:
        broadcast = np.einsum("i,ijk->jk", lam, d_in[:n_agg].reshape(C, A, d_in.shape[1]))
    tail = d_in[n_agg:]
    unicast = [tail[i * (b - A):(i + 1) * (b - A)] for i in range(C)]
    return ServerGrads(grads, broadcast, unicast)


def client_backward(net: SplitNet, i, trace: BatchTrace, broadcast, own):
    """Client i's weight gradients; all b paths weighted 1/b through its own trace."""
    layers = net.clients[i]
    dS = np.concatenate([broadcast, own])
    b = dS.shape[0]
    delta = dS * ACTIVATIONS[layers[-1].act][1](trace.pre[-1])
    grads, _ = backprop(layers, trace, delta, np.full(b, 1.0 / b))
    return grads


def apply_update(layers, grads, lr):
    for lay, (dW, dc) in zip(layers, grads):
        lay.W -= lr * dW
        lay.c -= lr * dc
