"""Reverse-mode automatic differentiation on dense float64 arrays.

A Tape records every primitive as it is evaluated; nodes are therefore
already in topological order and one reversed sweep implements the chain
rule. Scalars are 0-d arrays, vectors 1-d, matrices 2-d; there is no
broadcasting beyond bias-add.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np


class ShapeMismatch(ValueError):
    """Operands of a primitive do not fit together."""

    def __init__(self, op: str, lhs, rhs):
        self.op = op
        self.lhs = tuple(lhs)
        self.rhs = tuple(rhs)
        super().__init__(f"{op}: incompatible shapes {self.lhs} and {self.rhs}")


class NonScalarLoss(ValueError):
    """backward() was asked to start from a non-scalar node."""


class EmptyAttention(ValueError):
    """Attention over zero keys is undefined."""


@dataclass
class GradReverseConfig:
    """Negative gradient multiplier for the reversal pseudo-op."""

    lam: float = 1.3

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"gradient reversal multiplier must be >= 0, got {self.lam}")


class Tensor:
    """A value in the graph. Leaves are parameters or constants."""

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = self.name or ("param" if self.requires_grad else "const")
        return f"Tensor({tag}, shape={self.shape})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class Node:
    __slots__ = ("op", "inputs", "out", "fwd", "bwd")

    def __init__(self, op: str, inputs: Sequence[Tensor], out: Tensor,
                 fwd: Callable[[], np.ndarray], bwd: Callable[[np.ndarray], tuple]):
        self.op = op
        self.inputs = tuple(inputs)
        self.out = out
        self.fwd = fwd
        self.bwd = bwd


class Tape:
    """Ordered record of primitive evaluations, replayable and differentiable."""

    def __init__(self):
        self.nodes: list[Node] = []

    # -- machinery ---------------------------------------------------------

    def _emit(self, op: str, inputs: Sequence[Tensor], fwd, bwd) -> Tensor:
        out = Tensor(fwd(), requires_grad=any(t.requires_grad for t in inputs))
        self.nodes.append(Node(op, inputs, out, fwd, bwd))
        return out

    def recompute(self) -> None:
        """Re-evaluate every node from current leaf values, in record order."""
        for node in self.nodes:
            node.out.data = np.asarray(node.fwd(), dtype=np.float64)

    def forward_eval(self, node: Tensor) -> np.ndarray:
        """Recompute the tape and return the value held at `node`."""
        self.recompute()
        return node.data

    def backward(self, loss: Tensor, params: Mapping[str, Tensor] | None = None) -> dict[str, np.ndarray]:
        """One reverse sweep from a scalar loss.

        Returns a gradient per named parameter; parameters the loss does not
        reach get zeros.
        """
        if loss.data.shape != ():
            raise NonScalarLoss(f"loss must be scalar, got shape {loss.data.shape}")
        for node in self.nodes:
            node.out.grad = None
            for t in node.inputs:
                t.grad = None
        if params is not None:
            for p in params.values():
                p.grad = None
        loss.grad = np.ones((), dtype=np.float64)
        for node in reversed(self.nodes):
            g = node.out.grad
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.bwd(g)):
                if gi is None or not t.requires_grad:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi
        grads: dict[str, np.ndarray] = {}
        if params is not None:
            for name, p in params.items():
                if p.grad is None:
                    p.grad = np.zeros_like(p.data)
                grads[name] = p.grad
        return grads

    # -- primitive catalog ---------------------------------------------------

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape == b.shape:
            bwd = lambda g: (g, g)
        elif a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
            # bias-add, the one permitted broadcast
            bwd = lambda g: (g, g.sum(axis=0))
        else:
            raise ShapeMismatch("add", a.shape, b.shape)
        return self._emit("add", (a, b), lambda: a.data + b.data, bwd)

    def add_n(self, xs: Sequence[Tensor]) -> Tensor:
        if not xs:
            raise ValueError("add_n needs at least one input")
        shape = xs[0].shape
        for x in xs[1:]:
            if x.shape != shape:
                raise ShapeMismatch("add_n", shape, x.shape)
        return self._emit("add_n", xs,
                          lambda: sum(x.data for x in xs),
                          lambda g: tuple(g for _ in xs))

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.shape != b.shape:
            raise ShapeMismatch("mul", a.shape, b.shape)
        return self._emit("mul", (a, b), lambda: a.data * b.data,
                          lambda g: (g * b.data, g * a.data))

    def scale(self, a: Tensor, c: float) -> Tensor:
        c = float(c)
        return self._emit("scale", (a,), lambda: a.data * c, lambda g: (g * c,))

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != b.shape[0]:
            raise ShapeMismatch("matmul", a.shape, b.shape)

        def fwd():
            return a.data @ b.data

        if a.ndim == 2 and b.ndim == 2:
            bwd = lambda g: (g @ b.data.T, a.data.T @ g)
        elif a.ndim == 1 and b.ndim == 2:
            bwd = lambda g: (g @ b.data.T, np.outer(a.data, g))
        elif a.ndim == 2 and b.ndim == 1:
            bwd = lambda g: (np.outer(g, b.data), a.data.T @ g)
        else:  # 1-d @ 1-d -> scalar
            bwd = lambda g: (g * b.data, g * a.data)
        return self._emit("matmul", (a, b), fwd, bwd)

    def tanh(self, a: Tensor) -> Tensor:
        node = self._emit("tanh", (a,), lambda: np.tanh(a.data), None)
        self.nodes[-1].bwd = lambda g: (g * (1.0 - node.data * node.data),)
        return node

    def sigmoid(self, a: Tensor) -> Tensor:
        def fwd():
            x = a.data
            out = np.empty_like(x)
            pos = x >= 0
            out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
            ex = np.exp(x[~pos])
            out[~pos] = ex / (1.0 + ex)
            return out

        node = self._emit("sigmoid", (a,), fwd, None)
        self.nodes[-1].bwd = lambda g: (g * node.data * (1.0 - node.data),)
        return node

    def relu(self, a: Tensor) -> Tensor:
        return self._emit("relu", (a,), lambda: np.maximum(a.data, 0.0),
                          lambda g: (g * (a.data > 0.0),))

    def concat(self, xs: Sequence[Tensor]) -> Tensor:
        for x in xs:
            if x.ndim != 1:
                raise ShapeMismatch("concat", x.shape, ("1-d",))
        sizes = [x.shape[0] for x in xs]
        offsets = np.cumsum([0] + sizes)

        def bwd(g):
            return tuple(g[offsets[i]:offsets[i + 1]] for i in range(len(xs)))

        return self._emit("concat", xs, lambda: np.concatenate([x.data for x in xs]), bwd)

    def stack(self, xs: Sequence[Tensor]) -> Tensor:
        if not xs:
            raise ValueError("stack needs at least one row")
        d = xs[0].shape
        for x in xs:
            if x.ndim != 1 or x.shape != d:
                raise ShapeMismatch("stack", d, x.shape)
        return self._emit("stack", xs, lambda: np.stack([x.data for x in xs]),
                          lambda g: tuple(g[i] for i in range(len(xs))))

    def narrow(self, a: Tensor, start: int, stop: int) -> Tensor:
        """Contiguous slice along axis 0; keeps dimensionality."""
        if a.ndim not in (1, 2) or not (0 <= start <= stop <= a.shape[0]):
            raise ShapeMismatch("slice", a.shape, (start, stop))

        def bwd(g):
            full = np.zeros_like(a.data)
            full[start:stop] = g
            return (full,)

        return self._emit("slice", (a,), lambda: a.data[start:stop].copy(), bwd)

    def row(self, a: Tensor, i: int) -> Tensor:
        if a.ndim != 2 or not (0 <= i < a.shape[0]):
            raise ShapeMismatch("row", a.shape, (i,))

        def bwd(g):
            full = np.zeros_like(a.data)
            full[i] = g
            return (full,)

        return self._emit("row", (a,), lambda: a.data[i].copy(), bwd)

    def pick(self, a: Tensor, i: int) -> Tensor:
        """Scalar element of a vector."""
        if a.ndim != 1 or not (0 <= i < a.shape[0]):
            raise ShapeMismatch("pick", a.shape, (i,))

        def bwd(g):
            full = np.zeros_like(a.data)
            full[i] = g
            return (full,)

        return self._emit("pick", (a,), lambda: a.data[i].copy(), bwd)

    def softmax(self, a: Tensor) -> Tensor:
        if a.ndim != 1:
            raise ShapeMismatch("softmax", a.shape, ("1-d",))

        def fwd():
            z = a.data - a.data.max()
            e = np.exp(z)
            return e / e.sum()

        node = self._emit("softmax", (a,), fwd, None)
        self.nodes[-1].bwd = lambda g: (node.data * (g - np.dot(g, node.data)),)
        return node

    def log_softmax(self, a: Tensor) -> Tensor:
        if a.ndim != 1:
            raise ShapeMismatch("log_softmax", a.shape, ("1-d",))

        def fwd():
            z = a.data - a.data.max()
            return z - math.log(np.exp(z).sum())

        node = self._emit("log_softmax", (a,), fwd, None)
        self.nodes[-1].bwd = lambda g: (g - np.exp(node.data) * g.sum(),)
        return node

    def embedding(self, table: Tensor, ids: Sequence[int]) -> Tensor:
        if table.ndim != 2:
            raise ShapeMismatch("embedding", table.shape, ("2-d table",))
        idx = np.asarray(ids, dtype=np.int64)
        if idx.ndim != 1:
            raise ShapeMismatch("embedding", table.shape, idx.shape)
        if len(idx) and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise ValueError(f"embedding: id out of range for table with {table.shape[0]} rows")

        def bwd(g):
            full = np.zeros_like(table.data)
            np.add.at(full, idx, g)
            return (full,)

        return self._emit("embedding", (table,), lambda: table.data[idx].copy(), bwd)

    def sum(self, a: Tensor) -> Tensor:
        return self._emit("sum", (a,), lambda: np.asarray(a.data.sum()),
                          lambda g: (np.broadcast_to(g, a.shape).copy(),))

    def mean(self, a: Tensor) -> Tensor:
        n = a.data.size
        return self._emit("mean", (a,), lambda: np.asarray(a.data.mean()),
                          lambda g: (np.broadcast_to(g / n, a.shape).copy(),))

    def grad_reverse(self, a: Tensor, cfg: GradReverseConfig | float = GradReverseConfig()) -> Tensor:
        """Identity in the forward pass; scales the gradient by -lambda going back."""
        lam = cfg.lam if isinstance(cfg, GradReverseConfig) else float(cfg)
        if lam < 0:
            raise ValueError("gradient reversal multiplier must be >= 0")
        return self._emit("grad_reverse", (a,), lambda: a.data.copy(),
                          lambda g: ((-lam) * g,))

    def lstm_cell(self, x: Tensor, h: Tensor, c: Tensor,
                  w_ih: Tensor, w_hh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
        """Single fused LSTM step; returns (h_new, c_new). Gate order i,f,g,o."""
        hid = w_hh.shape[0]
        if (x.ndim != 1 or h.shape != (hid,) or c.shape != (hid,)
                or w_ih.shape != (x.shape[0], 4 * hid) or w_hh.shape != (hid, 4 * hid)
                or b.shape != (4 * hid,)):
            raise ShapeMismatch("lstm_cell", (x.shape, h.shape, c.shape),
                                (w_ih.shape, w_hh.shape, b.shape))
        cache: dict[str, np.ndarray] = {}

        def fwd():
            z = x.data @ w_ih.data + h.data @ w_hh.data + b.data
            i = 1.0 / (1.0 + np.exp(-z[:hid]))
            f = 1.0 / (1.0 + np.exp(-z[hid:2 * hid]))
            g_ = np.tanh(z[2 * hid:3 * hid])
            o = 1.0 / (1.0 + np.exp(-z[3 * hid:]))
            c_new = f * c.data + i * g_
            t = np.tanh(c_new)
            cache.update(i=i, f=f, g=g_, o=o, t=t)
            return np.concatenate([o * t, c_new])

        def bwd(gout):
            i, f, g_, o, t = cache["i"], cache["f"], cache["g"], cache["o"], cache["t"]
            gh, gc = gout[:hid], gout[hid:]
            do = gh * t
            dc = gc + gh * o * (1.0 - t * t)
            dz = np.concatenate([
                dc * g_ * i * (1.0 - i),
                dc * c.data * f * (1.0 - f),
                dc * i * (1.0 - g_ * g_),
                do * o * (1.0 - o),
            ])
            return (dz @ w_ih.data.T, dz @ w_hh.data.T, dc * f,
                    np.outer(x.data, dz), np.outer(h.data, dz), dz)

        out = self._emit("lstm_cell", (x, h, c, w_ih, w_hh, b), fwd, bwd)
        return self.narrow(out, 0, hid), self.narrow(out, hid, 2 * hid)

    def lstm_seq(self, x: Tensor, w_ih: Tensor, w_hh: Tensor, b: Tensor,
                 reverse: bool = False) -> Tensor:
        """LSTM over the rows of x from zero state; output row t is h_t.

        One node for the whole sequence: the forward pass caches per-step
        gates and the backward pass runs truncated-free BPTT over them.
        """
        hid = w_hh.shape[0]
        if (x.ndim != 2 or w_ih.shape != (x.shape[1], 4 * hid)
                or w_hh.shape != (hid, 4 * hid) or b.shape != (4 * hid,)):
            raise ShapeMismatch("lstm_seq", x.shape, (w_ih.shape, w_hh.shape, b.shape))
        cache: dict[str, np.ndarray] = {}

        def fwd():
            X = x.data
            n = X.shape[0]
            idxs = list(range(n - 1, -1, -1)) if reverse else list(range(n))
            Z_in = X @ w_ih.data + b.data
            I = np.empty((n, hid)); F = np.empty((n, hid))
            G = np.empty((n, hid)); O = np.empty((n, hid))
            C = np.empty((n, hid)); T = np.empty((n, hid))
            Hprev = np.empty((n, hid))
            out = np.empty((n, hid))
            h = np.zeros(hid)
            c = np.zeros(hid)
            for k, t in enumerate(idxs):
                z = Z_in[t] + h @ w_hh.data
                i = 1.0 / (1.0 + np.exp(-z[:hid]))
                f = 1.0 / (1.0 + np.exp(-z[hid:2 * hid]))
                g = np.tanh(z[2 * hid:3 * hid])
                o = 1.0 / (1.0 + np.exp(-z[3 * hid:]))
                Hprev[k] = h
                c = f * c + i * g
                t_c = np.tanh(c)
                h = o * t_c
                I[k], F[k], G[k], O[k], C[k], T[k] = i, f, g, o, c, t_c
                out[t] = h
            cache.update(I=I, F=F, G=G, O=O, C=C, T=T, Hprev=Hprev, idxs=idxs)
            return out

        def bwd(gout):
            X = x.data
            n = X.shape[0]
            I, F, G, O, C, T = (cache[k] for k in "IFGOCT")
            Hprev, idxs = cache["Hprev"], cache["idxs"]
            DZ = np.empty((n, 4 * hid))
            dX = np.zeros_like(X)
            dh = np.zeros(hid)
            dc = np.zeros(hid)
            for k in range(n - 1, -1, -1):
                t = idxs[k]
                dht = gout[t] + dh
                do = dht * T[k]
                dct = dc + dht * O[k] * (1.0 - T[k] * T[k])
                c_prev = C[k - 1] if k > 0 else np.zeros(hid)
                dz = np.concatenate([
                    dct * G[k] * I[k] * (1.0 - I[k]),
                    dct * c_prev * F[k] * (1.0 - F[k]),
                    dct * I[k] * (1.0 - G[k] * G[k]),
                    do * O[k] * (1.0 - O[k]),
                ])
                DZ[k] = dz
                dc = dct * F[k]
                dh = dz @ w_hh.data.T
                dX[t] = dz @ w_ih.data.T
            X_proc = X[idxs]
            return (dX, X_proc.T @ DZ, Hprev.T @ DZ, DZ.sum(axis=0))

        return self._emit("lstm_seq", (x, w_ih, w_hh, b), fwd, bwd)

    def hconcat(self, a: Tensor, b: Tensor) -> Tensor:
        """Column-wise concatenation of two matrices with equal row counts."""
        if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
            raise ShapeMismatch("hconcat", a.shape, b.shape)
        split = a.shape[1]
        return self._emit("hconcat", (a, b),
                          lambda: np.concatenate([a.data, b.data], axis=1),
                          lambda g: (g[:, :split], g[:, split:]))

    def dot_attention(self, query: Tensor, keys: Tensor, values: Tensor) -> tuple[Tensor, Tensor]:
        """Softmax(q . k_i) pooling of value rows; returns (context, weights)."""
        if keys.ndim != 2 or values.ndim != 2 or keys.shape[0] != values.shape[0]:
            raise ShapeMismatch("dot_attention", keys.shape, values.shape)
        if keys.shape[0] == 0:
            raise EmptyAttention("attention over an empty key set")
        if query.shape != (keys.shape[1],):
            raise ShapeMismatch("dot_attention", query.shape, keys.shape)
        scores = self.matmul(keys, query)
        weights = self.softmax(scores)
        context = self.matmul(weights, values)
        return context, weights


# -- parameters --------------------------------------------------------------


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    fan_in, fan_out = shape[0], shape[-1]
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class ParameterStore:
    """Named trainable tensors shared by every tape built over a model."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def uniform(self, name: str, rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
        return self.add(name, uniform_init(rng, shape))

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def values(self):
        return self._params.values()

    def names(self):
        return list(self._params)

    def entry_count(self) -> int:
        return sum(p.data.size for p in self._params.values())

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        extra = set(state) - set(self._params)
        if missing or extra:
            raise KeyError(f"checkpoint mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in state.items():
            p = self._params[name]
            if p.data.shape != np.shape(arr):
                raise ShapeMismatch("load_state", p.data.shape, np.shape(arr))
            p.data = np.array(arr, dtype=np.float64)


CHECKPOINT_MAGIC = "multinav-checkpoint 1"


def save_params(params: ParameterStore | Mapping[str, Tensor], path) -> None:
    """Text checkpoint: one name/shape line then hex float values (bit-exact)."""
    items = params.items()
    with open(path, "w") as fh:
        fh.write(CHECKPOINT_MAGIC + "\n")
        for name, t in items:
            shape = ",".join(str(d) for d in t.data.shape)
            fh.write(f"param {name} {shape}\n")
            fh.write(" ".join(float(v).hex() for v in t.data.reshape(-1)) + "\n")


def load_params(path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        header = fh.readline().rstrip("\n")
        if header != CHECKPOINT_MAGIC:
            raise ValueError(f"not a checkpoint file: {path}")
        out: dict[str, np.ndarray] = {}
        while True:
            line = fh.readline()
            if not line:
                break
            _, name, shape_s = line.rstrip("\n").split(" ")
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            vals = [float.fromhex(tok) for tok in fh.readline().split()]
            out[name] = np.array(vals, dtype=np.float64).reshape(shape)
    return out


# -- gradient oracle ----------------------------------------------------------


def finite_diff_check(tape: Tape, loss: Tensor, params: Mapping[str, Tensor],
                      eps: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    Perturbs every entry of every parameter, so keep it for small graphs.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    analytic = {k: v.copy() for k, v in tape.backward(loss, params).items()}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            tape.recompute()
            f_plus = float(loss.data)
            flat[j] = orig - eps
            tape.recompute()
            f_minus = float(loss.data)
            flat[j] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[name].reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, err)
    tape.recompute()
    return worst
