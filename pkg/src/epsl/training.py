"""Round-level training for vanilla SL, SFL, PSL, EPSL and phased EPSL."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .latency import FRAMEWORKS, as_fraction
from .splitnet import (ACTIVATIONS, SplitNet, aggregate_last_layer, apply_update, backprop, client_backward,
                       client_forward, forward_stack, last_layer_gradients, sample_losses,
                       server_backward, server_forward)


@dataclass(frozen=True)
class TrainConfig:
    phi: Fraction = Fraction(1, 2)
    eta_c: float = 1.5e-4
    eta_s: float = 1e-4
    loss: str = "ce"
    lambdas: tuple = None
    switch_epoch: int = 1
    mode: str = "mean"

    def weights(self, n_clients):
        if self.lambdas is None:
            return np.full(n_clients, 1.0 / n_clients)
        lam = np.asarray(self.lambdas, dtype=float)
        if lam.shape != (n_clients,) or np.any(lam <= 0) or not math.isclose(lam.sum(), 1.0):
            raise ValueError("lambdas must be positive, one per client, and sum to 1")
        return lam


def phase_phi(framework, config: TrainConfig, epoch):
    """Aggregation ratio used by ``framework`` during ``epoch`` (0-based)."""
    if framework in ("psl", "sfl", "vanilla_sl"):
        return Fraction(0)
    if framework == "epsl":
        return as_fraction(config.phi)
    if framework == "epsl_pt":
        return Fraction(1) if epoch < config.switch_epoch else Fraction(0)
    raise ValueError(f"unknown framework {framework!r}")


@dataclass
class RoundGradients:
    server: list
    clients: list
    loss: float


def round_gradients(net: SplitNet, batches, lambdas, phi, loss="ce", mode="mean"):
    """Server and per-client weight gradients of one parallel round (no update)."""
    C = net.n_clients
    lam = np.asarray(lambdas, dtype=float)
    smashed, client_traces = zip(*(client_forward(net, i, X) for i, (X, _) in enumerate(batches)))
    b = smashed[0].shape[0]
    out, trace = server_forward(net, np.concatenate(smashed))
    y_all = np.concatenate([y for _, y in batches])
    z = last_layer_gradients(trace, out, y_all, loss, net.server[-1].act)
    losses = sample_losses(out, trace.pre[-1], y_all, loss)
    per_client = [slice(i * b, (i + 1) * b) for i in range(C)]
    z_bar, rest = aggregate_last_layer([z[s] for s in per_client], lam, phi)
    srv = server_backward(net, [trace.rows(s) for s in per_client], z_bar, rest, lam, phi, mode)
    client_grads = [client_backward(net, i, client_traces[i], srv.broadcast, srv.unicast[i])
                    for i in range(C)]
    mean_loss = float(sum(lam[i] * losses[s].mean() for i, s in enumerate(per_client)))
    return RoundGradients(srv.grads, client_grads, mean_loss)


def epsl_round(net: SplitNet, batches, config: TrainConfig, phi):
    """One parallel round in place; returns the lambda-weighted mean batch loss."""
    g = round_gradients(net, batches, config.weights(net.n_clients), phi, config.loss,
                        config.mode)
    apply_update(net.server, g.server, config.eta_s)
    for i in range(net.n_clients):
        apply_update(net.clients[i], g.clients[i], config.eta_c)
    return g.loss


def average_clients(net: SplitNet, lambdas):
    for k in range(net.cut):
        W = sum(lam * stack[k].W for lam, stack in zip(lambdas, net.clients))
        c = sum(lam * stack[k].c for lam, stack in zip(lambdas, net.clients))
        for stack in net.clients:
            stack[k].W = W.copy()
            stack[k].c = c.copy()


def vanilla_round(net: SplitNet, batches, config: TrainConfig):
    """Devices train one after another on a single client model handed along."""
    model = [lay.copy() for lay in net.clients[0]]
    losses = []
    for X, y in batches:
        S, ctrace = forward_stack(model, X)
        out, strace = server_forward(net, S)
        z = last_layer_gradients(strace, out, y, config.loss, net.server[-1].act)
        losses.append(sample_losses(out, strace.pre[-1], y, config.loss).mean())
        b = len(y)
        sgrads, dS = backprop(net.server, strace, z, np.full(b, 1.0 / b))
        delta = dS * ACTIVATIONS[model[-1].act][1](ctrace.pre[-1])
        cgrads, _ = backprop(model, ctrace, delta, np.full(b, 1.0 / b))
        apply_update(net.server, sgrads, config.eta_s)
        apply_update(model, cgrads, config.eta_c)
    net.clients = [[lay.copy() for lay in model] for _ in net.clients]
    lam = config.weights(net.n_clients)
    return float(np.dot(lam, losses))


def train_round(framework, net: SplitNet, batches, config: TrainConfig, epoch=0):
    """Run one round of ``framework`` in place; returns (phi used, mean loss)."""
    if framework not in FRAMEWORKS:
        raise ValueError(f"unknown framework {framework!r}")
    if len(batches) != net.n_clients:
        raise ValueError("need one mini-batch per client")
    if len({len(y) for _, y in batches}) != 1:
        raise ValueError("mini-batch size must match across clients")
    phi = phase_phi(framework, config, epoch)
    if framework == "vanilla_sl":
        return phi, vanilla_round(net, batches, config)
    loss = epsl_round(net, batches, config, phi)
    if framework == "sfl":
        average_clients(net, config.weights(net.n_clients))
    return phi, loss


def evaluate(net: SplitNet, X, y, client=0, loss="ce"):
    """(accuracy, mean loss) of client ``client``'s model stacked with the server."""
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        raise ValueError("empty dataset")
    S, _ = client_forward(net, client, X)
    out, trace = server_forward(net, S)
    pred = np.argmax(trace.pre[-1] if loss == "ce" else out, axis=1)
    acc = float(np.mean(pred == np.asarray(y)))
    return acc, float(sample_losses(out, trace.pre[-1], y, loss).mean())


def evaluate_all(net: SplitNet, X, y, loss="ce"):
    """Accuracy and loss averaged over every client's model."""
    res = np.array([evaluate(net, X, y, i, loss) for i in range(net.n_clients)])
    return float(res[:, 0].mean()), float(res[:, 1].mean())


# --- data ----------------------------------------------------------------------

def make_dataset(n_train, n_test, dim, class_sep=1.0, seed=0):
    """Two Gaussian classes with means +-class_sep * u (u a random unit vector).

    Train and test sets share ``u``; returns ``(X, y, X_test, y_test)``.
    """
    rng = np.random.default_rng(seed)
    u = rng.standard_normal(dim)
    u /= np.linalg.norm(u)
    n = n_train + n_test
    y = rng.integers(0, 2, size=n)
    X = rng.standard_normal((n, dim)) + np.where(y[:, None] == 1, 1.0, -1.0) * class_sep * u
    return X[:n_train], y[:n_train], X[n_train:], y[n_train:]


def split_shards(X, y, n_clients, seed=0):
    """Shuffle, then deal equal contiguous shards (remainder dropped)."""
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(y))
    per = len(y) // n_clients
    if per == 0:
        raise ValueError("fewer samples than clients")
    return [(X[perm[i * per:(i + 1) * per]], y[perm[i * per:(i + 1) * per]])
            for i in range(n_clients)]


def epoch_batches(shards, batch, seed, epoch):
    """Per-round mini-batches for one epoch.

    Each client's shard is permuted by a seeded RNG; the last short batch wraps
    around to the start of the permutation so every round has b samples.
    """
    rng = np.random.default_rng([seed, 3, epoch])
    perms = [rng.permutation(len(y)) for _, y in shards]
    rounds = math.ceil(max(len(y) for _, y in shards) / batch)
    out = []
    for r in range(rounds):
        row = []
        for (X, y), p in zip(shards, perms):
            idx = np.take(p, np.arange(r * batch, (r + 1) * batch), mode="wrap")
            row.append((X[idx], y[idx]))
        out.append(row)
    return out
