"""Reverse-mode differentiation over dense float64 tensors.

The graph is rebuilt per example (define-by-run): every op appends one node
to an append-only tape, and backward walks the tape once in reverse
insertion order. The op set is deliberately small; it is exactly what the
sequence encoders, attention modules, and losses in this package need.
"""

from __future__ import annotations

import json
import math

import numpy as np

from .errors import CheckpointError, ContractError, DivergenceError, ShapeError

CHECKPOINT_VERSION = 1


class Tensor:
    """A dense float64 array plus an optional same-shape gradient buffer."""

    __slots__ = ("data", "grad", "name")

    def __init__(self, data, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def ensure_grad(self):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        return self.grad

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"


def constant(data):
    """Tensor wrapper for fixed (non-learned) values."""
    return Tensor(data)


def zeros(shape):
    return Tensor(np.zeros(shape))


class ParamSet:
    """Named, ordered collection of trainable tensors.

    Parameters are created with grad buffers already allocated, so an
    untouched parameter reports an exactly-zero gradient rather than a
    missing one.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name, shape, rng, fan_in=None):
        """Uniform init in [-1/sqrt(fan_in), +1/sqrt(fan_in)]."""
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        if fan_in is None:
            fan_in = shape[-1]
        bound = 1.0 / math.sqrt(fan_in)
        t = Tensor(rng.uniform(-bound, bound, size=shape), name=name)
        t.ensure_grad()
        self._params[name] = t
        return t

    def zeros(self, name, shape):
        if name in self._params:
            raise ContractError(f"duplicate parameter name {name!r}")
        t = Tensor(np.zeros(shape), name=name)
        t.ensure_grad()
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def state_hash(self):
        """Stable content hash of all parameter values."""
        import hashlib

        h = hashlib.sha256()
        for name, t in self._params.items():
            h.update(name.encode())
            h.update(t.data.tobytes())
        return h.hexdigest()


class _Node:
    __slots__ = ("op", "inputs", "out", "bwd")

    def __init__(self, op, inputs, out, bwd):
        self.op = op
        self.inputs = inputs
        self.out = out
        self.bwd = bwd


_LOG_FLOOR = 1e-300  # keeps log/backward finite if an activation saturates to 0/1


class Graph:
    """Append-only op tape. Insertion order is the topological order."""

    def __init__(self, check_finite=True):
        self.nodes: list[_Node] = []
        self.check_finite = check_finite

    def __len__(self):
        return len(self.nodes)

    # -- plumbing ---------------------------------------------------------

    def _record(self, op, inputs, out_data, bwd):
        if self.check_finite and not np.all(np.isfinite(out_data)):
            raise DivergenceError(f"non-finite output from op {op!r}")
        out = Tensor(out_data)
        self.nodes.append(_Node(op, inputs, out, bwd))
        return out

    def apply(self, op_kind, *inputs, **kwargs):
        """Dispatch an op by name; the canonical forward entry point."""
        fn = getattr(self, op_kind, None)
        if fn is None or op_kind.startswith("_") or not callable(fn):
            raise ContractError(f"unknown op kind {op_kind!r}")
        return fn(*inputs, **kwargs)

    def backward(self, loss, seed=1.0):
        """Populate grads of everything reachable from `loss`.

        Visits the tape exactly once in reverse insertion order; nodes with
        no path to the loss are skipped (their grads stay as-is).
        """
        if loss.shape != ():
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss.ensure_grad()
        loss.grad += seed
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.bwd(g)):
                if gi is not None:
                    t.ensure_grad()
                    t.grad += gi

    # -- elementwise ------------------------------------------------------

    def add(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"add: shapes {a.shape} vs {b.shape}")
        return self._record("add", (a, b), a.data + b.data, lambda g: (g, g))

    def add_n(self, tensors):
        if not tensors:
            raise ShapeError("add_n: empty input list")
        shape = tensors[0].shape
        for t in tensors[1:]:
            if t.shape != shape:
                raise ShapeError(f"add_n: shapes {shape} vs {t.shape}")
        out = tensors[0].data.copy()
        for t in tensors[1:]:
            out += t.data
        n = len(tensors)
        return self._record("add_n", tuple(tensors), out, lambda g: (g,) * n)

    def mul(self, a, b):
        if a.shape != b.shape:
            raise ShapeError(f"mul: shapes {a.shape} vs {b.shape}")
        return self._record(
            "mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data)
        )

    def scale(self, a, s):
        if s.shape != ():
            raise ShapeError(f"scale: scalar has shape {s.shape}")
        return self._record(
            "scale",
            (a, s),
            a.data * s.data,
            lambda g: (g * s.data, np.asarray(np.sum(g * a.data))),
        )

    def sigmoid(self, x):
        y = 1.0 / (1.0 + np.exp(-x.data))
        return self._record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))

    def tanh(self, x):
        y = np.tanh(x.data)
        return self._record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))

    def softmax(self, x):
        if x.data.ndim != 1:
            raise ShapeError(f"softmax: needs a vector, got shape {x.shape}")
        z = x.data - np.max(x.data)
        e = np.exp(z)
        y = e / np.sum(e)

        def bwd(g):
            return (y * (g - np.dot(g, y)),)

        return self._record("softmax", (x,), y, bwd)

    # -- reductions / contractions ----------------------------------------

    def dot(self, a, b):
        if a.data.ndim != 1 or a.shape != b.shape:
            raise ShapeError(f"dot: shapes {a.shape} vs {b.shape}")
        return self._record(
            "dot",
            (a, b),
            np.asarray(np.dot(a.data, b.data)),
            lambda g: (g * b.data, g * a.data),
        )

    def index(self, v, i):
        if v.data.ndim != 1:
            raise ShapeError(f"index: needs a vector, got shape {v.shape}")
        if not 0 <= i < v.data.shape[0]:
            raise ContractError(f"index {i} out of range for length {v.data.shape[0]}")

        def bwd(g):
            gi = np.zeros_like(v.data)
            gi[i] = g
            return (gi,)

        return self._record("index", (v,), np.asarray(v.data[i]), bwd)

    def matvec(self, a, x):
        if a.data.ndim != 2 or x.data.ndim != 1 or a.shape[1] != x.shape[0]:
            raise ShapeError(f"matvec: shapes {a.shape} vs {x.shape}")
        return self._record(
            "matvec",
            (a, x),
            a.data @ x.data,
            lambda g: (np.outer(g, x.data), a.data.T @ g),
        )

    def tmatvec(self, a, x):
        """a.T @ x for a of shape (m, n) and x of shape (m,)."""
        if a.data.ndim != 2 or x.data.ndim != 1 or a.shape[0] != x.shape[0]:
            raise ShapeError(f"tmatvec: shapes {a.shape} vs {x.shape}")
        return self._record(
            "tmatvec",
            (a, x),
            a.data.T @ x.data,
            lambda g: (np.outer(x.data, g), a.data @ g),
        )

    def weighted_sum(self, weights, vectors):
        """Sum of matrix rows weighted by a vector: vectors.T @ weights."""
        return self.tmatvec(vectors, weights)

    def matmat(self, a, b):
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmat: shapes {a.shape} vs {b.shape}")
        return self._record(
            "matmat",
            (a, b),
            a.data @ b.data,
            lambda g: (g @ b.data.T, a.data.T @ g),
        )

    def affine(self, w, x, b):
        if (
            w.data.ndim != 2
            or x.data.ndim != 1
            or b.data.ndim != 1
            or w.shape[1] != x.shape[0]
            or w.shape[0] != b.shape[0]
        ):
            raise ShapeError(f"affine: shapes {w.shape}, {x.shape}, {b.shape}")
        return self._record(
            "affine",
            (w, x, b),
            w.data @ x.data + b.data,
            lambda g: (np.outer(g, x.data), w.data.T @ g, g),
        )

    def sum_rows(self, m):
        if m.data.ndim != 2:
            raise ShapeError(f"sum_rows: needs a matrix, got shape {m.shape}")
        n = m.shape[0]
        return self._record(
            "sum_rows",
            (m,),
            m.data.sum(axis=0),
            lambda g: (np.tile(g, (n, 1)),),
        )

    def sum_groups(self, m, group_size):
        """Sum consecutive row groups: (k*g, d) -> (k, d)."""
        if m.data.ndim != 2 or m.shape[0] % group_size != 0:
            raise ShapeError(f"sum_groups: shape {m.shape} with group {group_size}")
        k = m.shape[0] // group_size
        d = m.shape[1]
        out = m.data.reshape(k, group_size, d).sum(axis=1)
        return self._record(
            "sum_groups",
            (m,),
            out,
            lambda g: (np.repeat(g, group_size, axis=0),),
        )

    def transpose(self, m):
        if m.data.ndim != 2:
            raise ShapeError(f"transpose: needs a matrix, got shape {m.shape}")
        return self._record("transpose", (m,), m.data.T.copy(), lambda g: (g.T,))

    def vec1(self, s):
        """Promote a scalar to a length-1 vector."""
        if s.shape != ():
            raise ShapeError(f"vec1: needs a scalar, got shape {s.shape}")
        return self._record(
            "vec1", (s,), s.data.reshape(1), lambda g: (np.asarray(g[0]),)
        )

    def repeat_row(self, v, n):
        """Tile a vector into n identical matrix rows."""
        if v.data.ndim != 1:
            raise ShapeError(f"repeat_row: needs a vector, got shape {v.shape}")
        return self._record(
            "repeat_row", (v,), np.tile(v.data, (n, 1)), lambda g: (g.sum(axis=0),)
        )

    def hconcat(self, a, b):
        """Concatenate two matrices along columns."""
        if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
            raise ShapeError(f"hconcat: shapes {a.shape} vs {b.shape}")
        split = a.shape[1]
        return self._record(
            "hconcat",
            (a, b),
            np.concatenate([a.data, b.data], axis=1),
            lambda g: (g[:, :split], g[:, split:]),
        )

    def rowdot(self, a, b):
        """Per-row dot product of two equal-shape matrices."""
        if a.data.ndim != 2 or a.shape != b.shape:
            raise ShapeError(f"rowdot: shapes {a.shape} vs {b.shape}")
        return self._record(
            "rowdot",
            (a, b),
            np.sum(a.data * b.data, axis=1),
            lambda g: (g[:, None] * b.data, g[:, None] * a.data),
        )

    # -- structure --------------------------------------------------------

    def concat(self, parts):
        for p in parts:
            if p.data.ndim != 1:
                raise ShapeError(f"concat: needs vectors, got shape {p.shape}")
        sizes = [p.shape[0] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def bwd(g):
            return tuple(np.split(g, splits))

        return self._record(
            "concat", tuple(parts), np.concatenate([p.data for p in parts]), bwd
        )

    def stack(self, parts):
        shape = parts[0].shape
        for p in parts:
            if p.data.ndim != 1 or p.shape != shape:
                raise ShapeError(f"stack: mismatched vector shapes {shape} vs {p.shape}")

        def bwd(g):
            return tuple(g[i] for i in range(len(parts)))

        return self._record(
            "stack", tuple(parts), np.stack([p.data for p in parts]), bwd
        )

    def gather_rows(self, table, ids):
        """Select rows of a (V, d) matrix by an int index array."""
        if table.data.ndim != 2:
            raise ShapeError(f"gather_rows: needs a matrix, got shape {table.shape}")
        idx = np.asarray(ids, dtype=np.intp)
        if idx.ndim != 1:
            raise ShapeError("gather_rows: ids must be a flat index list")
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise ContractError("gather_rows: index out of range")

        def bwd(g):
            gt = np.zeros_like(table.data)
            np.add.at(gt, idx, g)
            return (gt,)

        return self._record("gather_rows", (table,), table.data[idx], bwd)

    def add_rowvec(self, m, v):
        if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[1] != v.shape[0]:
            raise ShapeError(f"add_rowvec: shapes {m.shape} vs {v.shape}")
        return self._record(
            "add_rowvec",
            (m, v),
            m.data + v.data,
            lambda g: (g, g.sum(axis=0)),
        )

    # -- losses -----------------------------------------------------------

    def cross_entropy(self, probs, target, kind):
        """Cross-entropy over probabilities.

        kind="softmax": `probs` is a distribution, `target` an index;
        loss = -log p[target].
        kind="sigmoid": `probs` are per-unit activations in [0,1], `target`
        a 0/1 mask of the same length; loss sums -log p where the mask is 1
        and -log(1-p) where it is 0.
        """
        p = probs.data
        if p.ndim != 1:
            raise ShapeError(f"cross_entropy: needs a vector, got shape {probs.shape}")
        if kind == "softmax":
            t = int(target)
            if not 0 <= t < p.shape[0]:
                raise ContractError(
                    f"cross_entropy target {t} out of range for {p.shape[0]} classes"
                )
            val = -math.log(max(p[t], _LOG_FLOOR))

            def bwd(g):
                gp = np.zeros_like(p)
                gp[t] = -g / max(p[t], _LOG_FLOOR)
                return (gp,)

            return self._record("cross_entropy", (probs,), np.asarray(val), bwd)
        if kind == "sigmoid":
            mask = np.asarray(target, dtype=np.float64)
            if mask.shape != p.shape:
                raise ShapeError(
                    f"cross_entropy mask length {mask.shape} vs scores {p.shape}"
                )
            on = mask > 0.5
            pos = np.maximum(p, _LOG_FLOOR)
            neg = np.maximum(1.0 - p, _LOG_FLOOR)
            val = -(np.sum(np.log(pos[on])) + np.sum(np.log(neg[~on])))

            def bwd(g):
                gp = np.where(on, -1.0 / pos, 1.0 / neg)
                return (g * gp,)

            return self._record("cross_entropy", (probs,), np.asarray(val), bwd)
        raise ContractError(f"unknown cross_entropy kind {kind!r}")


def forward(graph, op_kind, inputs, **kwargs):
    """Free-function spelling of Graph.apply."""
    return graph.apply(op_kind, *inputs, **kwargs)


def backward(graph, loss, seed=1.0):
    """Free-function spelling of Graph.backward."""
    graph.backward(loss, seed=seed)


# -- optimizers -------------------------------------------------------------


def clip_grad_norm(params, max_norm):
    """Scale all grads so their global L2 norm is at most max_norm."""
    total = 0.0
    for _, t in params.items():
        total += float(np.sum(t.grad * t.grad))
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        factor = max_norm / norm
        for _, t in params.items():
            t.grad *= factor
    return norm


class Sgd:
    kind = "sgd"

    def __init__(self, lr, max_grad_norm=None):
        self.lr = lr
        self.max_grad_norm = max_grad_norm
        self.t = 0

    def step(self, params):
        for name, p in params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
        if self.max_grad_norm is not None:
            clip_grad_norm(params, self.max_grad_norm)
        self.t += 1
        for _, p in params.items():
            p.data -= self.lr * p.grad
            p.zero_grad()

    def state_dict(self):
        return {"kind": self.kind, "lr": self.lr, "t": self.t}

    def load_state_dict(self, state):
        self.t = int(state["t"])


class Adam:
    kind = "adam"

    def __init__(self, lr, eps=1e-8, beta1=0.9, beta2=0.999, max_grad_norm=None):
        self.lr = lr
        self.eps = eps
        self.beta1 = beta1
        self.beta2 = beta2
        self.max_grad_norm = max_grad_norm
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params):
        for name, p in params.items():
            if p.grad is None:
                raise ContractError(f"parameter {name!r} has no gradient")
        if self.max_grad_norm is not None:
            clip_grad_norm(params, self.max_grad_norm)
        self.t += 1
        b1c = 1.0 - self.beta1**self.t
        b2c = 1.0 - self.beta2**self.t
        for name, p in params.items():
            m = self.m.setdefault(name, np.zeros_like(p.data))
            v = self.v.setdefault(name, np.zeros_like(p.data))
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
            p.zero_grad()

    def state_dict(self):
        return {
            "kind": self.kind,
            "lr": self.lr,
            "eps": self.eps,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "t": self.t,
            "m": {k: v.tolist() for k, v in self.m.items()},
            "v": {k: v.tolist() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        self.t = int(state["t"])
        self.m = {k: np.asarray(v, dtype=np.float64) for k, v in state["m"].items()}
        self.v = {k: np.asarray(v, dtype=np.float64) for k, v in state["v"].items()}


def make_optimizer(kind, lr, eps=1e-8, max_grad_norm=None):
    if kind == "sgd":
        return Sgd(lr, max_grad_norm=max_grad_norm)
    if kind == "adam":
        return Adam(lr, eps=eps, max_grad_norm=max_grad_norm)
    raise ContractError(f"unknown optimizer kind {kind!r}")


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(path, params, optimizer=None, seed=None, extra=None):
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "seed": seed,
        "params": {
            name: {"shape": list(t.shape), "data": t.data.ravel().tolist()}
            for name, t in params.items()
        },
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "extra": extra or {},
    }
    with open(path, "w") as f:
        json.dump(payload, f)


def load_checkpoint(path, params, optimizer=None):
    try:
        with open(path) as f:
            payload = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload.get('format_version')!r}"
        )
    stored = payload["params"]
    for name, t in params.items():
        if name not in stored:
            raise CheckpointError(f"checkpoint missing parameter {name!r}")
        entry = stored[name]
        if tuple(entry["shape"]) != t.shape:
            raise CheckpointError(
                f"shape mismatch for {name!r}: checkpoint {tuple(entry['shape'])}, "
                f"model {t.shape}"
            )
        t.data = np.asarray(entry["data"], dtype=np.float64).reshape(t.shape)
        t.ensure_grad()
        t.zero_grad()
    unknown = set(stored) - set(params.names())
    if unknown:
        raise CheckpointError(f"checkpoint has unknown parameters {sorted(unknown)}")
    if optimizer is not None and payload.get("optimizer") is not None:
        if payload["optimizer"]["kind"] != optimizer.kind:
            raise CheckpointError(
                f"optimizer kind mismatch: checkpoint {payload['optimizer']['kind']!r}"
            )
        optimizer.load_state_dict(payload["optimizer"])
    return payload
