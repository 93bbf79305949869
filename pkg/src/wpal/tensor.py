"""Small float64 tensor type with a reverse-mode differentiation tape.

Values are numpy arrays in row-major order; every differentiable operation
records its parents and a backward rule on the produced tensor, so calling
``backward()`` on a scalar loss fills the ``grad`` slot of every tracked
leaf reachable through the tape.
"""

import struct

import numpy as np

MAGIC_TENSOR = b"WPAL-TNSR\0"


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class FormatError(ValueError):
    """A serialized container is malformed."""


def _as_tensor(x):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _elementwise_shapes(a, b, op):
    # Equal shapes, or a true scalar (size 1) against anything.
    if a.data.shape == b.data.shape:
        return
    if a.data.size == 1 or b.data.size == 1:
        return
    raise ShapeError(f"{op}: shape mismatch {a.data.shape} vs {b.data.shape}")


def _reduce_to(grad, shape):
    # Undo scalar broadcasting: sum the upstream gradient back to `shape`.
    if grad.shape == shape:
        return grad
    return np.sum(grad).reshape(shape) if np.prod(shape, dtype=int) == 1 else grad


class Tensor:
    """A float64 array plus an optional gradient and its tape node.

    Tensors are immutable after forward construction except for ``grad``;
    leaves created with ``requires_grad=True`` receive gradients from
    ``backward()``. Gradients accumulate additively across fan-out and are
    cleared only by an explicit ``zero_grad()``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_op", "_parents", "_backward")

    # Make `ndarray <op> Tensor` defer to our reflected operators instead of
    # numpy's elementwise object path.
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def numpy(self):
        """Copy of the value, detached from the tape."""
        return self.data.copy()

    def accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    # -- tape construction ------------------------------------------------

    @staticmethod
    def _from_op(data, parents, op, backward):
        out = Tensor(data)
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._op = op
            out._parents = tuple(parents)
            out._backward = backward
        return out

    def backward(self):
        """Reverse-mode sweep from a scalar; fills leaf gradients."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.accumulate_grad(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)
                node.grad = None  # interior grads are transient

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        other = _as_tensor(other)
        _elementwise_shapes(self, other, "add")
        a, b = self, other
        out_data = a.data + b.data

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(_reduce_to(g, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(g, b.data.shape))

        return Tensor._from_op(out_data, (a, b), "add", bw)

    __radd__ = __add__

    def __sub__(self, other):
        other = _as_tensor(other)
        _elementwise_shapes(self, other, "sub")
        a, b = self, other
        out_data = a.data - b.data

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(_reduce_to(g, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(-g, b.data.shape))

        return Tensor._from_op(out_data, (a, b), "sub", bw)

    def __rsub__(self, other):
        return _as_tensor(other) - self

    def __mul__(self, other):
        other = _as_tensor(other)
        _elementwise_shapes(self, other, "mul")
        a, b = self, other
        out_data = a.data * b.data

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(_reduce_to(g * b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(g * a.data, b.data.shape))

        return Tensor._from_op(out_data, (a, b), "mul", bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _as_tensor(other)
        _elementwise_shapes(self, other, "div")
        a, b = self, other
        with np.errstate(divide="ignore", invalid="ignore"):
            out_data = a.data / b.data  # IEEE inf/nan; the training loop flags non-finite losses

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(_reduce_to(g / b.data, a.data.shape))
            if b.requires_grad:
                b.accumulate_grad(_reduce_to(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._from_op(out_data, (a, b), "div", bw)

    def __rtruediv__(self, other):
        return _as_tensor(other) / self

    def __neg__(self):
        a = self

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(-g)

        return Tensor._from_op(-a.data, (a,), "neg", bw)

    # -- linear algebra and reductions ------------------------------------

    def __matmul__(self, other):
        other = _as_tensor(other)
        a, b = self, other
        if a.data.ndim != 2 or b.data.ndim != 2:
            raise ShapeError(f"matmul: operands must be 2-D, got {a.data.shape} and {b.data.shape}")
        if a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(f"matmul: inner extents disagree, {a.data.shape} vs {b.data.shape}")
        out_data = a.data @ b.data

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g @ b.data.T)
            if b.requires_grad:
                b.accumulate_grad(a.data.T @ g)

        return Tensor._from_op(out_data, (a, b), "matmul", bw)

    def sum(self):
        a = self
        out_data = np.array(a.data.sum())

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(np.full_like(a.data, float(g)))

        return Tensor._from_op(out_data, (a,), "sum", bw)

    def log(self):
        a = self
        out_data = np.log(a.data)

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g / a.data)

        return Tensor._from_op(out_data, (a,), "log", bw)

    def clamp_min(self, floor):
        a = self
        out_data = np.maximum(a.data, floor)

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g * (a.data > floor))

        return Tensor._from_op(out_data, (a,), "clamp_min", bw)

    def reshape(self, shape):
        a = self
        out_data = a.data.reshape(shape)

        def bw(g):
            if a.requires_grad:
                a.accumulate_grad(g.reshape(a.data.shape))

        return Tensor._from_op(out_data, (a,), "reshape", bw)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def concat(tensors):
    """Concatenate 1-D tensors; gradient slices back to each input."""
    parts = [_as_tensor(t) for t in tensors]
    for p in parts:
        if p.data.ndim != 1:
            raise ShapeError(f"concat: expected 1-D parts, got shape {p.data.shape}")
    out_data = np.concatenate([p.data for p in parts])
    offsets = np.cumsum([0] + [p.data.size for p in parts])

    def bw(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if p.requires_grad:
                p.accumulate_grad(g[lo:hi])

    return Tensor._from_op(out_data, parts, "concat", bw)


# -- serialization ---------------------------------------------------------


def tensor_to_bytes(t):
    """WPAL-TNSR container: magic, u32 rank, u32 extents, little-endian f64."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)
    header = MAGIC_TENSOR + struct.pack("<I", arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.astype("<f8").tobytes(order="C")


def tensor_from_bytes(blob):
    if blob[: len(MAGIC_TENSOR)] != MAGIC_TENSOR:
        raise FormatError("bad tensor magic")
    off = len(MAGIC_TENSOR)
    if len(blob) < off + 4:
        raise FormatError("truncated tensor header")
    (rank,) = struct.unpack_from("<I", blob, off)
    off += 4
    if len(blob) < off + 4 * rank:
        raise FormatError("truncated tensor extents")
    shape = struct.unpack_from(f"<{rank}I", blob, off)
    off += 4 * rank
    count = int(np.prod(shape, dtype=np.int64)) if rank else 1
    if len(blob) != off + 8 * count:
        raise FormatError(f"tensor payload length mismatch for shape {shape}")
    data = np.frombuffer(blob, dtype="<f8", count=count, offset=off)
    return Tensor(data.reshape(shape).copy())


def save_tensor(t, path):
    with open(path, "wb") as fh:
        fh.write(tensor_to_bytes(t))


def load_tensor(path):
    with open(path, "rb") as fh:
        return tensor_from_bytes(fh.read())
