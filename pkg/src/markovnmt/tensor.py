"""numpy-backed tensors with reverse-mode autodiff.

Arrays are float32 by default (float64 is opt-in, used by the gradient
checker), rank 3 at most, and every forward op validates its output so a
NaN or Inf is reported at the op that produced it instead of ten layers
downstream. The graph is a plain DAG of Tensor nodes; ``backward()``
materializes a :class:`ComputationRecord` (topological node list) and walks
it once in reverse. Gradients accumulate across backward calls until
``zero_grad()``.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

# Additive fill for disallowed attention scores. Large enough that exp()
# underflows to exact zero for any realistic score scale; the masked softmax
# additionally zeroes disallowed weights outright, so masking is exact, not
# merely "very small".
MASK_FILL = -1e9

_FLOAT_DTYPES = (np.float32, np.float64)


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN or Inf."""


class GradientError(AssertionError):
    """Analytic and numeric gradients disagree beyond tolerance."""


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block. Use for inference paths."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float32)
    if arr.ndim > 3:
        raise ValueError(f"rank {arr.ndim} tensor not supported (max rank 3)")
    return arr


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by op '{op}'")


class Tensor:
    """A numpy array plus the graph edges needed for backprop.

    ``grad`` is lazily allocated and accumulates until ``zero_grad()``.
    ``parents`` and ``_backward`` are set only on op outputs recorded while
    gradients are enabled; leaves have an empty parent tuple.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        _check_finite(self.data, "leaf")
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> ComputationRecord:
        """Backpropagate from a scalar root; returns the record it walked."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        if not self.requires_grad:
            raise ValueError("backward() root does not require grad")
        record = ComputationRecord.trace(self)
        # Per-call flow map keeps repeated backward() calls linear: each call
        # adds exactly one more unit of gradient everywhere.
        flows: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(record.nodes):
            g = flows.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            if node._backward is not None:
                node._backward(g, flows)
        return record

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.data.shape}, dtype={self.data.dtype})"

    # operator sugar
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return total(self)


@dataclass
class ComputationRecord:
    """Topologically ordered nodes reachable from ``root``.

    Parents always precede children, so a single reverse walk sees every
    node after all of its consumers.
    """

    root: Tensor
    nodes: list[Tensor]

    @classmethod
    def trace(cls, root: Tensor) -> "ComputationRecord":
        nodes: list[Tensor] = []
        seen: set[int] = set()
        # iterative postorder; model graphs are deep enough to worry about
        # Python's recursion limit
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                nodes.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node.parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        return cls(root=root, nodes=nodes)

    def __len__(self) -> int:
        return len(self.nodes)


def _result(data: np.ndarray, op: str, parents: tuple[Tensor, ...], backward) -> Tensor:
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.parents = ()
    out._backward = None
    out.op = op
    out.requires_grad = False
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = parents
        out._backward = backward
    return out


def _flow(flows: dict[int, np.ndarray], t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    cur = flows.get(id(t))
    flows[id(t)] = g if cur is None else cur + g


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise add. ``b`` may broadcast as a trailing-axes pattern:
    a bias of shape (d,) or a per-position table of shape (n, d) against
    a batched (B, n, d) operand."""
    if b.data.shape != a.data.shape:
        ok = (
            b.data.shape == a.data.shape[-1:]
            or (a.data.ndim == 3 and b.data.shape == a.data.shape[1:])
        )
        if not ok:
            raise ValueError(f"add shapes {a.data.shape} and {b.data.shape} do not line up")
    out_data = a.data + b.data

    def backward(g, flows):
        _flow(flows, a, g)
        if b.data.shape == a.data.shape:
            _flow(flows, b, g)
        elif b.data.shape == a.data.shape[-1:]:
            _flow(flows, b, g.reshape(-1, b.data.shape[0]).sum(axis=0))
        else:
            _flow(flows, b, g.sum(axis=0))

    return _result(out_data, "add", (a, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise multiply, shapes must match exactly."""
    if a.data.shape != b.data.shape:
        raise ValueError(f"mul shapes {a.data.shape} and {b.data.shape} differ")
    out_data = a.data * b.data

    def backward(g, flows):
        _flow(flows, a, g * b.data)
        _flow(flows, b, g * a.data)

    return _result(out_data, "mul", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out_data = a.data * c

    def backward(g, flows):
        _flow(flows, a, g * c)

    return _result(out_data, "scale", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product for the rank patterns the models need:
    (m,p)@(p,q), (B,m,p)@(p,q), and (B,m,p)@(B,p,q)."""
    ra, rb = a.data.ndim, b.data.ndim
    if (ra, rb) not in ((2, 2), (3, 2), (3, 3)):
        raise ValueError(f"matmul ranks ({ra},{rb}) not supported")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dims {a.data.shape} @ {b.data.shape}")
    if (ra, rb) == (3, 3) and a.data.shape[0] != b.data.shape[0]:
        raise ValueError("batched matmul batch sizes differ")
    out_data = np.matmul(a.data, b.data)

    def backward(g, flows):
        if (ra, rb) == (2, 2):
            _flow(flows, a, g @ b.data.T)
            _flow(flows, b, a.data.T @ g)
        elif (ra, rb) == (3, 2):
            _flow(flows, a, np.matmul(g, b.data.T))
            p, q = b.data.shape
            _flow(flows, b, a.data.reshape(-1, p).T @ g.reshape(-1, q))
        else:
            _flow(flows, a, np.matmul(g, b.data.swapaxes(-1, -2)))
            _flow(flows, b, np.matmul(a.data.swapaxes(-1, -2), g))

    return _result(out_data, "matmul", (a, b), backward)


def transpose_last(a: Tensor) -> Tensor:
    """Swap the last two axes (rank 2 or 3)."""
    if a.data.ndim < 2:
        raise ValueError("transpose_last needs rank >= 2")
    out_data = np.ascontiguousarray(a.data.swapaxes(-1, -2))

    def backward(g, flows):
        _flow(flows, a, g.swapaxes(-1, -2))

    return _result(out_data, "transpose_last", (a,), backward)


def relu(a: Tensor) -> Tensor:
    out_data = np.maximum(a.data, 0)

    def backward(g, flows):
        _flow(flows, a, g * (a.data > 0))

    return _result(out_data, "relu", (a,), backward)


def softmax_masked(scores: Tensor, allow: np.ndarray | None) -> Tensor:
    """Row softmax over the last axis with exact masking.

    ``allow`` is a boolean array broadcastable to ``scores.shape`` (or None
    for all-allowed). Disallowed positions get a large negative additive
    shift *and* are explicitly zeroed after the exp, then rows renormalize
    over what is left, so a disallowed weight is exactly 0.0 and cannot leak
    value rows regardless of score magnitudes.
    """
    s = scores.data
    if allow is None:
        mask = np.ones(s.shape, dtype=bool)
    else:
        mask = np.broadcast_to(np.asarray(allow, dtype=bool), s.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("softmax_masked: some row has no allowed positions")
    shifted = np.where(mask, s, s + MASK_FILL)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    e = np.where(mask, e, 0.0)
    out_data = e / e.sum(axis=-1, keepdims=True)

    def backward(g, flows):
        w = out_data
        ds = w * (g - (g * w).sum(axis=-1, keepdims=True))
        _flow(flows, scores, np.where(mask, ds, 0.0))

    return _result(out_data, "softmax_masked", (scores,), backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.data.shape[-1]
    if gain.data.shape != (d,) or bias.data.shape != (d,):
        raise ValueError("layer_norm gain/bias must have shape (d,)")
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out_data = xhat * gain.data + bias.data

    def backward(g, flows):
        _flow(flows, gain, (g * xhat).reshape(-1, d).sum(axis=0))
        _flow(flows, bias, g.reshape(-1, d).sum(axis=0))
        dxhat = g * gain.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        _flow(flows, x, dx)

    return _result(out_data, "layer_norm", (x, gain, bias), backward)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Gather rows of ``table`` (V, d) by integer ids of shape (n,) or (B, n)."""
    ids = np.asarray(ids)
    if ids.ndim not in (1, 2):
        raise ValueError("embedding ids must be rank 1 or 2")
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError("embedding id out of range")
    out_data = table.data[ids]

    def backward(g, flows):
        dt = np.zeros_like(table.data)
        np.add.at(dt, ids, g)
        _flow(flows, table, dt)

    return _result(out_data, "embedding", (table,), backward)


def slice_last(a: Tensor, lo: int, hi: int) -> Tensor:
    """Slice [lo:hi] along the last axis."""
    if not (0 <= lo < hi <= a.data.shape[-1]):
        raise ValueError(f"slice_last bounds [{lo},{hi}) out of range")
    out_data = np.ascontiguousarray(a.data[..., lo:hi])

    def backward(g, flows):
        full = np.zeros_like(a.data)
        full[..., lo:hi] = g
        _flow(flows, a, full)

    return _result(out_data, "slice_last", (a,), backward)


def concat_last(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    if not parts:
        raise ValueError("concat_last of nothing")
    out_data = np.concatenate([p.data for p in parts], axis=-1)
    widths = [p.data.shape[-1] for p in parts]

    def backward(g, flows):
        off = 0
        for p, w in zip(parts, widths):
            _flow(flows, p, np.ascontiguousarray(g[..., off : off + w]))
            off += w

    return _result(out_data, "concat_last", tuple(parts), backward)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    out_data = a.data.reshape(shape)
    if out_data.ndim > 3:
        raise ValueError("reshape beyond rank 3")

    def backward(g, flows):
        _flow(flows, a, g.reshape(a.data.shape))

    return _result(np.ascontiguousarray(out_data), "reshape", (a,), backward)


def total(a: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    out_data = np.asarray(a.data.sum(), dtype=a.data.dtype)

    def backward(g, flows):
        _flow(flows, a, np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return _result(out_data, "total", (a,), backward)


def dropout(a: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: zero with prob p, scale survivors by 1/(1-p)."""
    if not 0.0 <= p < 1.0:
        raise ValueError("dropout rate must be in [0, 1)")
    if p == 0.0:
        return a
    keep = (rng.random(a.data.shape) >= p).astype(a.data.dtype)
    mask = keep / (1.0 - p)
    out_data = a.data * mask

    def backward(g, flows):
        _flow(flows, a, g * mask)

    return _result(out_data, "dropout", (a,), backward)


def cross_entropy(
    logits: Tensor,
    targets: np.ndarray,
    label_smoothing: float = 0.0,
    ignore_index: int | None = None,
) -> Tensor:
    """Mean smoothed negative log likelihood over non-ignored rows.

    ``logits`` is (N, V); ``targets`` is (N,) integer class ids. With
    smoothing eps the per-row target distribution is
    (1-eps) * onehot + eps/V, normalized locally over the vocabulary.
    Rows whose target equals ``ignore_index`` contribute nothing and do not
    count in the mean.

    Returns a scalar tensor.
    """
    if logits.data.ndim != 2:
        raise ValueError("cross_entropy expects (N, V) logits")
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError("label_smoothing must be in [0, 1)")
    targets = np.asarray(targets)
    if targets.shape != (logits.data.shape[0],):
        raise ValueError("targets must be (N,)")
    n, v = logits.data.shape
    keep = np.ones(n, dtype=bool) if ignore_index is None else targets != ignore_index
    n_keep = int(keep.sum())
    if n_keep == 0:
        raise ValueError("cross_entropy: every row is ignored")
    kept_targets = targets[keep]
    if kept_targets.min() < 0 or kept_targets.max() >= v:
        raise ValueError("cross_entropy target id out of range")

    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse  # (N, V)
    nll = -logp[np.arange(n), np.where(keep, targets, 0)]
    smooth = -logp.mean(axis=1)
    per_row = (1.0 - label_smoothing) * nll + label_smoothing * smooth
    out_data = np.asarray(per_row[keep].mean(), dtype=logits.data.dtype)

    def backward(g, flows):
        p = np.exp(logp)
        q = np.full((n, v), label_smoothing / v, dtype=logits.data.dtype)
        q[np.arange(n), np.where(keep, targets, 0)] += 1.0 - label_smoothing
        dlogits = (p - q) * (float(g) / n_keep)
        dlogits[~keep] = 0.0
        _flow(flows, logits, dlogits.astype(logits.data.dtype))

    return _result(out_data, "cross_entropy", (logits,), backward)


@dataclass
class GradCheckResult:
    """Outcome of a finite-difference gradient check."""

    per_param: list[float]  # max relative error per checked tensor
    max_rel_err: float
    worst_param: int
    n_elements: int

    def ok(self, tol: float) -> bool:
        return self.max_rel_err <= tol


def grad_check(
    f: Callable[[Sequence[Tensor]], Tensor],
    params: Sequence[Tensor],
    h: float = 1e-3,
) -> GradCheckResult:
    """Compare analytic gradients of ``f`` against central differences.

    ``f`` maps the parameter list to a scalar Tensor and must be a pure
    function of those tensors. Parameters are copied to float64 so the
    difference quotient is not drowned by float32 rounding; the op code
    paths exercised are the same ones training uses.
    """
    p64 = [Tensor(p.data.astype(np.float64), requires_grad=True) for p in params]
    loss = f(p64)
    if loss.data.size != 1:
        raise ValueError("grad_check objective must be scalar")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in p64]

    def eval_loss() -> float:
        with no_grad():
            return float(f(p64).data)

    per_param: list[float] = []
    total_elems = 0
    for p, a in zip(p64, analytic):
        flat = p.data.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = eval_loss()
            flat[i] = orig - h
            down = eval_loss()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            got = float(a.reshape(-1)[i])
            denom = max(abs(numeric), abs(got), 1e-8)
            worst = max(worst, abs(numeric - got) / denom)
        per_param.append(worst)
        total_elems += flat.size
    max_err = max(per_param) if per_param else 0.0
    return GradCheckResult(
        per_param=per_param,
        max_rel_err=max_err,
        worst_param=int(np.argmax(per_param)) if per_param else -1,
        n_elements=total_elems,
    )
