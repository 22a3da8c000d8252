"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records every operation applied to tensors that live on it;
``Tape.backward`` replays the records newest-first and accumulates exact
gradients for the registered leaves. Operations called on plain
constants (tensors without a tape) skip recording entirely, so the same
forward code serves both gradient computation and fast inference.

The op set is deliberately closed: elementwise arithmetic, matmul,
reductions, the nonlinearities the scoring pipeline needs, softmax,
L2 normalisation, gather/pick indexing and concatenation. Every op
accepts arbitrary leading batch dimensions, and elementwise ops follow
numpy broadcasting (gradients are summed back over broadcast axes).
"""

import numpy as np

# When true, every op asserts its result is finite. Costs a pass over
# each intermediate, so tests enable it and the hot paths leave it off.
CHECK_FINITE = False


class Tensor:
    """Dense float64 array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "node_id")

    def __init__(self, data, tape=None, node_id=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node_id = node_id

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def __repr__(self):
        tag = "" if self.tape is None else f", node={self.node_id}"
        return f"Tensor(shape={self.data.shape}{tag})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Tape:
    """Ordered record of tensor operations for one backward pass.

    Leaves are registered with :meth:`leaf`; every op whose operands
    touch this tape appends one record. Records are appended in
    execution order, which is a topological order of the graph, so the
    reverse walk sees each node's gradient complete before propagating
    it. Each record is visited exactly once.
    """

    def __init__(self):
        self._records = []      # (out_id, input_ids, backward_fn)
        self._leaf_shapes = {}  # node_id -> shape
        self._n_nodes = 0

    def _new_node(self) -> int:
        nid = self._n_nodes
        self._n_nodes += 1
        return nid

    def leaf(self, data) -> Tensor:
        """Register an input tensor whose gradient backward() reports."""
        t = Tensor(data, tape=self, node_id=self._new_node())
        self._leaf_shapes[t.node_id] = t.data.shape
        return t

    @property
    def num_records(self) -> int:
        return len(self._records)

    def backward(self, output: Tensor) -> dict:
        """Gradients of a scalar output w.r.t. every registered leaf.

        Returns a mapping ``node_id -> gradient array``; leaves the
        output does not depend on get exact zeros. Calling backward
        twice on the same tape repeats the identical walk.
        """
        if output.tape is not self or output.node_id is None:
            raise ValueError("backward: output does not live on this tape")
        if not self._records:
            raise ValueError("backward: tape is empty")
        if output.data.size != 1:
            raise ValueError(
                f"backward: output must be a scalar, got shape {output.data.shape}"
            )
        grads = {output.node_id: np.ones_like(output.data)}
        for out_id, in_ids, backward_fn in reversed(self._records):
            g = grads.get(out_id)
            if g is None:
                continue
            for in_id, gi in zip(in_ids, backward_fn(g)):
                if in_id is None or gi is None:
                    continue
                acc = grads.get(in_id)
                grads[in_id] = gi if acc is None else acc + gi
        return {
            nid: grads.get(nid, np.zeros(shape))
            for nid, shape in self._leaf_shapes.items()
        }


def _tape_of(tensors):
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise ValueError("operands live on different tapes")
    return tape


def _emit(op_name, inputs, out_data, make_backward):
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise FloatingPointError(f"{op_name}: non-finite values in result")
    tape = _tape_of(inputs)
    if tape is None:
        return Tensor(out_data)
    in_ids = tuple(t.node_id for t in inputs)
    needed = tuple(i is not None for i in in_ids)
    out = Tensor(out_data, tape, tape._new_node())
    tape._records.append((out.node_id, in_ids, make_backward(needed)))
    return out


def _broadcast_check(op_name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(
            f"{op_name}: shapes {a.shape} and {b.shape} do not broadcast"
        ) from None


def _unbroadcast(g, shape):
    """Sum a gradient back down to the shape of the broadcast operand."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a.data, b.data)
    ash, bsh = a.data.shape, b.data.shape

    def mk(needed):
        def backward(g):
            return (
                _unbroadcast(g, ash) if needed[0] else None,
                _unbroadcast(g, bsh) if needed[1] else None,
            )
        return backward

    return _emit("add", (a, b), a.data + b.data, mk)


def broadcast_add(x, bias) -> Tensor:
    """add() under its bias-application name, kept for call-site clarity."""
    return add(x, bias)


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("subtract", a.data, b.data)
    ash, bsh = a.data.shape, b.data.shape

    def mk(needed):
        def backward(g):
            return (
                _unbroadcast(g, ash) if needed[0] else None,
                _unbroadcast(-g, bsh) if needed[1] else None,
            )
        return backward

    return _emit("subtract", (a, b), a.data - b.data, mk)


def multiply(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("multiply", a.data, b.data)
    ad, bd = a.data, b.data

    def mk(needed):
        def backward(g):
            return (
                _unbroadcast(g * bd, ad.shape) if needed[0] else None,
                _unbroadcast(g * ad, bd.shape) if needed[1] else None,
            )
        return backward

    return _emit("multiply", (a, b), ad * bd, mk)


def scalar_multiply(x, c) -> Tensor:
    x = as_tensor(x)
    c = float(c)

    def mk(needed):
        def backward(g):
            return (g * c,)
        return backward

    return _emit("scalar_multiply", (x,), x.data * c, mk)


def matmul(a, b) -> Tensor:
    """Matrix product ``a @ b``.

    ``a`` may carry leading batch dimensions; ``b`` is a matrix (k, m)
    or a vector (k,). Both operands may be differentiated.
    """
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 1 or bd.ndim not in (1, 2):
        raise ValueError(f"matmul: unsupported operand ranks {ad.shape} @ {bd.shape}")
    if ad.shape[-1] != bd.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ, {ad.shape} @ {bd.shape}")

    def mk(needed):
        def backward(g):
            ga = gb = None
            if bd.ndim == 2:
                if needed[0]:
                    ga = g @ bd.T if ad.ndim > 1 else bd @ g
                if needed[1]:
                    if ad.ndim == 1:
                        gb = np.outer(ad, g)
                    else:
                        # contract away batch and row axes together
                        red = tuple(range(ad.ndim - 1))
                        gb = np.tensordot(ad, g, axes=(red, red))
            else:
                if needed[0]:
                    ga = g[..., None] * bd if ad.ndim > 1 else g * bd
                if needed[1]:
                    if ad.ndim == 1:
                        gb = g * ad
                    else:
                        red = tuple(range(g.ndim))
                        gb = np.tensordot(g, ad, axes=(red, red))
            return (ga, gb)
        return backward

    return _emit("matmul", (a, b), ad @ bd, mk)


def _norm_axes(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def reduce_sum(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    xs = x.data.shape
    axes = _norm_axes(axis, x.data.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def mk(needed):
        def backward(g):
            gg = g
            if axes is not None and not keepdims:
                gg = np.expand_dims(g, axes)
            return (np.broadcast_to(gg, xs).copy(),)
        return backward

    return _emit("sum", (x,), out, mk)


def reduce_mean(x, axis=None, keepdims=False) -> Tensor:
    x = as_tensor(x)
    xs = x.data.shape
    axes = _norm_axes(axis, x.data.ndim)
    if axes is None:
        count = x.data.size
    else:
        count = 1
        for ax in axes:
            count *= xs[ax]
    if count == 0:
        raise ValueError("mean: reduction over zero elements")
    out = x.data.mean(axis=axes, keepdims=keepdims)
    inv = 1.0 / count

    def mk(needed):
        def backward(g):
            gg = g
            if axes is not None and not keepdims:
                gg = np.expand_dims(g, axes)
            return (np.broadcast_to(gg * inv, xs).copy(),)
        return backward

    return _emit("mean", (x,), out, mk)


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data

    def mk(needed):
        def backward(g):
            return (g * (2.0 * xd),)
        return backward

    return _emit("square", (x,), xd * xd, mk)


def sqrt(x, floor=1e-10) -> Tensor:
    """Square root of ``x + floor``; the floor keeps the gradient finite at 0."""
    x = as_tensor(x)
    out = np.sqrt(x.data + floor)

    def mk(needed):
        def backward(g):
            return (g * (0.5 / out),)
        return backward

    return _emit("sqrt", (x,), out, mk)


def log(x, floor=1e-10) -> Tensor:
    """Natural log of ``x + floor``."""
    x = as_tensor(x)
    shifted = x.data + floor

    def mk(needed):
        def backward(g):
            return (g / shifted,)
        return backward

    return _emit("log", (x,), np.log(shifted), mk)


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)

    def mk(needed):
        def backward(g):
            return (g * out,)
        return backward

    return _emit("exp", (x,), out, mk)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)

    def mk(needed):
        def backward(g):
            return (g * (1.0 - out * out),)
        return backward

    return _emit("tanh", (x,), out, mk)


def relu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data

    def mk(needed):
        def backward(g):
            return (g * (xd > 0.0),)
        return backward

    return _emit("relu", (x,), np.maximum(xd, 0.0), mk)


def softmax(x, axis=-1) -> Tensor:
    x = as_tensor(x)
    if x.data.shape[axis] == 0:
        raise ValueError("softmax: empty axis")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def mk(needed):
        def backward(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return ((g - dot) * out,)
        return backward

    return _emit("softmax", (x,), out, mk)


def l2_normalize(x, axis=-1, eps=1e-24) -> Tensor:
    """Scale ``x`` to unit L2 norm along ``axis``.

    eps sits under the square root so the all-zero vector maps to zeros
    with a finite gradient instead of dividing by zero.
    """
    x = as_tensor(x)
    ss = (x.data * x.data).sum(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(ss + eps)
    out = x.data * inv

    def mk(needed):
        def backward(g):
            dot = (g * out).sum(axis=axis, keepdims=True)
            return ((g - out * dot) * inv,)
        return backward

    return _emit("l2_normalize", (x,), out, mk)


def gather(x, indices) -> Tensor:
    """Outer indexing along the last axis: ``out = x[..., indices]``.

    ``indices`` is an integer array; the result has shape
    ``x.shape[:-1] + indices.shape``. The same index may appear many
    times (framing with overlapping hops relies on this); the backward
    pass sums gradient contributions per source sample.
    """
    x = as_tensor(x)
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ValueError("gather: indices must be integers")
    n = x.data.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"gather: index out of range for axis of size {n}")
    out = x.data[..., idx]
    xs = x.data.shape
    flat_idx = np.ascontiguousarray(idx.reshape(-1))

    def mk(needed):
        def backward(g):
            gx = np.zeros(xs)
            if len(xs) > 1:
                lead = int(np.prod(xs[:-1]))
                g2 = g.reshape(lead, flat_idx.size)
                gx2 = gx.reshape(lead, n)
                # bincount is much faster than np.add.at for the large
                # overlapping-frame scatters on the attack hot path
                for row in range(lead):
                    gx2[row] = np.bincount(flat_idx, weights=g2[row], minlength=n)
            else:
                gx[:] = np.bincount(flat_idx, weights=g.reshape(-1), minlength=n)
            return (gx,)
        return backward

    return _emit("gather", (x,), out, mk)


def pick(x, indices) -> Tensor:
    """Select one element along the last axis per leading position.

    ``indices`` has shape ``x.shape[:-1]``; the result drops the last
    axis. Used to route gradients through data-dependent selections
    (median elements, true-class logits).
    """
    x = as_tensor(x)
    idx = np.asarray(indices)
    if idx.dtype.kind not in "iu":
        raise ValueError("pick: indices must be integers")
    xs = x.data.shape
    if idx.shape != xs[:-1]:
        raise ValueError(f"pick: indices shape {idx.shape} does not match {xs[:-1]}")
    n = xs[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"pick: index out of range for axis of size {n}")
    out = np.take_along_axis(x.data, idx[..., None], axis=-1)[..., 0]
    lead = int(np.prod(xs[:-1])) if len(xs) > 1 else 1
    flat_pos = np.arange(lead) * n + idx.reshape(-1)

    def mk(needed):
        def backward(g):
            gx = np.zeros(xs)
            gx.reshape(-1)[flat_pos] = g.reshape(-1)
            return (gx,)
        return backward

    return _emit("pick", (x,), out, mk)


def concat(tensors, axis=-1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat: need at least one tensor")
    ndim = ts[0].data.ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.data.ndim != ndim:
            raise ValueError(
                f"concat: rank mismatch, {ts[0].data.shape} vs {t.data.shape}"
            )
        for d in range(ndim):
            if d != ax and t.data.shape[d] != ts[0].data.shape[d]:
                raise ValueError(
                    f"concat: shapes {ts[0].data.shape} and {t.data.shape} "
                    f"differ off the concat axis"
                )
    out = np.concatenate([t.data for t in ts], axis=ax)
    sizes = [t.data.shape[ax] for t in ts]
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def mk(needed):
        def backward(g):
            pieces = []
            for i in range(len(sizes)):
                if not needed[i]:
                    pieces.append(None)
                    continue
                sl = (slice(None),) * ax + (slice(offsets[i], offsets[i + 1]),)
                pieces.append(g[sl].copy())
            return tuple(pieces)
        return backward

    return _emit("concat", tuple(ts), out, mk)


def finite_diff_gradient(fn, point, step=1e-4, coords=None):
    """Central-difference gradient of a scalar function of an array.

    The independent oracle for checking tape gradients: evaluates
    ``(fn(x + h e_i) - fn(x - h e_i)) / 2h`` per coordinate. ``coords``
    optionally restricts the probe to a list of flat indices (full
    gradients over long waveforms are expensive); the full gradient is
    returned in the shape of ``point`` when coords is None.
    """
    if step <= 0:
        raise ValueError("finite_diff_gradient: step must be positive")
    p = np.array(point, dtype=np.float64)
    flat = p.reshape(-1)
    idxs = range(flat.size) if coords is None else list(coords)
    out = np.zeros(len(idxs) if coords is not None else flat.size)
    for j, i in enumerate(idxs):
        orig = flat[i]
        flat[i] = orig + step
        fp = float(fn(p))
        flat[i] = orig - step
        fm = float(fn(p))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise ValueError(
                f"finite_diff_gradient: non-finite function value at coordinate {i}"
            )
        out[j] = (fp - fm) / (2.0 * step)
    return out if coords is not None else out.reshape(p.shape)
