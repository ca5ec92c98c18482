"""Minimal dense-tensor math with reverse-mode differentiation.

Everything runs in float64.  The matrix product is routed through a custom
kernel whose per-element accumulation order depends only on the contracted
dimension, never on the batch size.  This makes every forward pass
*row-stable*: evaluating a batch of inputs is bitwise identical to evaluating
each row on its own, which the barrier model relies on to keep its batched and
scalar code paths interchangeable.  BLAS gemm does not have this property, so
``a @ b`` is deliberately avoided.
"""

import json
import struct
import zlib
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import CorruptCheckpoint, ShapeMismatch, StaleTape, VersionMismatch

try:
    from numba import njit

    @njit(cache=True)
    def _matmul_kernel(a, b):
        n, k = a.shape
        m = b.shape[1]
        out = np.zeros((n, m))
        for i in range(n):
            for l in range(k):
                ail = a[i, l]
                for j in range(m):
                    out[i, j] += ail * b[l, j]
        return out

    def _matmul_raw(a, b):
        return _matmul_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b))

except ImportError:  # pragma: no cover - numba is a declared dependency

    def _matmul_raw(a, b):
        # einsum without optimization uses the same l-sequential accumulation
        # per output element, so it is bit-compatible with the numba kernel.
        return np.einsum("ij,jk->ik", a, b, optimize=False)


# ---------------------------------------------------------------------------
# tape + variables


_ACTIVE_TAPE = None


class Tape:
    """Operation record of one forward pass.

    Nodes are appended in creation order; ``backward`` visits them in exact
    reverse order, so gradient accumulation is deterministic.
    """

    def __init__(self):
        self.nodes = []
        self._leaves = {}       # (id(store), name) -> Var
        self._stores = {}       # id(store) -> (store, version at recording)

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise RuntimeError("nested tapes are not supported")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def leaf(self, store, name):
        key = (id(store), name)
        var = self._leaves.get(key)
        if var is None:
            var = Var(store[name])
            var.param_name = name
            self._leaves[key] = var
            self._stores.setdefault(id(store), (store, store.version))
            self.nodes.append(var)
        return var


class Var:
    """A float64 array node in the computation graph."""

    __slots__ = ("data", "grad", "_parents", "_bwd", "param_name")

    def __init__(self, data):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self._parents = ()
        self._bwd = None
        self.param_name = None

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        return float(self.data)


def _as_var(x):
    return x if isinstance(x, Var) else Var(x)


def _node(data, parents, bwd):
    out = Var(data)
    tape = _ACTIVE_TAPE
    if tape is not None:
        out._parents = parents
        out._bwd = bwd
        tape.nodes.append(out)
    return out


def _accum(var, g):
    var.grad = g if var.grad is None else var.grad + g


# ---------------------------------------------------------------------------
# operations


def matmul(x, w):
    x, w = _as_var(x), _as_var(w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeMismatch(f"matmul {x.data.shape} @ {w.data.shape}")
    out_data = _matmul_raw(x.data, w.data)

    def bwd(g):
        _accum(x, _matmul_raw(g, w.data.T))
        _accum(w, _matmul_raw(x.data.T, g))

    return _node(out_data, (x, w), bwd)


def add_bias(x, b):
    x, b = _as_var(x), _as_var(b)
    if b.data.ndim != 1 or x.data.shape[-1] != b.data.shape[0]:
        raise ShapeMismatch(f"add_bias {x.data.shape} + {b.data.shape}")

    def bwd(g):
        _accum(x, g)
        _accum(b, np.sum(g, axis=0))

    return _node(x.data + b.data, (x, b), bwd)


def add(x, y):
    x, y = _as_var(x), _as_var(y)
    if x.data.shape != y.data.shape:
        raise ShapeMismatch(f"add {x.data.shape} + {y.data.shape}")

    def bwd(g):
        _accum(x, g)
        _accum(y, g)

    return _node(x.data + y.data, (x, y), bwd)


def sub(x, y):
    x, y = _as_var(x), _as_var(y)
    if x.data.shape != y.data.shape:
        raise ShapeMismatch(f"sub {x.data.shape} - {y.data.shape}")

    def bwd(g):
        _accum(x, g)
        _accum(y, -g)

    return _node(x.data - y.data, (x, y), bwd)


def mul(x, y):
    x, y = _as_var(x), _as_var(y)
    if x.data.shape != y.data.shape:
        raise ShapeMismatch(f"mul {x.data.shape} * {y.data.shape}")

    def bwd(g):
        _accum(x, g * y.data)
        _accum(y, g * x.data)

    return _node(x.data * y.data, (x, y), bwd)


def affine(x, scale, shift=0.0):
    """Elementwise scale * x + shift with float constants."""
    x = _as_var(x)

    def bwd(g):
        _accum(x, g * scale)

    return _node(x.data * scale + shift, (x,), bwd)


def relu(x):
    x = _as_var(x)
    out_data = np.maximum(x.data, 0.0)

    def bwd(g):
        _accum(x, g * (x.data > 0.0))

    return _node(out_data, (x,), bwd)


def sigmoid(x):
    x = _as_var(x)
    s = expit(x.data)

    def bwd(g):
        _accum(x, g * s * (1.0 - s))

    return _node(s, (x,), bwd)


def tanh(x):
    x = _as_var(x)
    t = np.tanh(x.data)

    def bwd(g):
        _accum(x, g * (1.0 - t * t))

    return _node(t, (x,), bwd)


def concat_cols(xs):
    xs = [_as_var(x) for x in xs]
    widths = [x.data.shape[1] for x in xs]
    offsets = np.cumsum([0] + widths)

    def bwd(g):
        for x, a, b in zip(xs, offsets[:-1], offsets[1:]):
            _accum(x, g[:, a:b])

    return _node(np.concatenate([x.data for x in xs], axis=1), tuple(xs), bwd)


def slice_cols(x, a, b):
    x = _as_var(x)

    def bwd(g):
        full = np.zeros_like(x.data)
        full[:, a:b] = g
        _accum(x, full)

    return _node(np.ascontiguousarray(x.data[:, a:b]), (x,), bwd)


def take_rows(x, idx):
    x = _as_var(x)
    idx = np.asarray(idx)

    def bwd(g):
        full = np.zeros_like(x.data)
        np.add.at(full, idx, g)
        _accum(x, full)

    return _node(x.data[idx], (x,), bwd)


def mean_all(x):
    x = _as_var(x)
    n = x.data.size
    if n == 0:
        raise ShapeMismatch("mean over an empty tensor")

    def bwd(g):
        _accum(x, np.full_like(x.data, float(g) / n))

    return _node(np.mean(x.data), (x,), bwd)


def sum_all(x):
    x = _as_var(x)

    def bwd(g):
        _accum(x, np.full_like(x.data, float(g)))

    return _node(np.sum(x.data), (x,), bwd)


# ---------------------------------------------------------------------------
# parameter store


class ParamStore:
    """Named float64 parameter tensors with per-tensor Adam moments.

    Iteration order is insertion order; every run builds parameters in the
    same sequence, which keeps optimizer updates and checkpoints deterministic.
    """

    def __init__(self):
        self._arrays = {}
        self._m = {}
        self._v = {}
        self.adam_t = 0
        self.version = 0

    def add(self, name, value):
        if name in self._arrays:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self._arrays[name] = arr
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)

    def __getitem__(self, name):
        return self._arrays[name]

    def __contains__(self, name):
        return name in self._arrays

    def names(self):
        return list(self._arrays)

    def moments(self, name):
        return self._m[name], self._v[name]

    def set_(self, name, value):
        """Overwrite a tensor in place (invalidates existing tapes)."""
        arr = self._arrays[name]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != arr.shape:
            raise ShapeMismatch(f"set {name}: {value.shape} != {arr.shape}")
        arr[...] = value
        self.version += 1

    def n_params(self):
        return sum(a.size for a in self._arrays.values())

    def copy(self):
        out = ParamStore()
        for name, arr in self._arrays.items():
            out.add(name, arr)
            out._m[name][...] = self._m[name]
            out._v[name][...] = self._v[name]
        out.adam_t = self.adam_t
        return out

    def slice(self, prefix):
        return ParamSlice(self, prefix)


@dataclass(frozen=True)
class ParamSlice:
    """A named sub-tree of a ParamStore (e.g. all ``lstm/...`` tensors)."""

    store: ParamStore
    prefix: str

    def name(self, suffix):
        return f"{self.prefix}/{suffix}"

    def var(self, suffix):
        name = self.name(suffix)
        tape = _ACTIVE_TAPE
        if tape is not None:
            return tape.leaf(self.store, name)
        return Var(self.store[name])


def backward(tape, output_grad=1.0, output=None):
    """Run reverse-mode accumulation over a recorded tape.

    Returns gradients for every parameter of the store(s) the tape touched,
    keyed by parameter name (zeros for parameters the pass never used).
    """
    for store, version in tape._stores.values():
        if store.version != version:
            raise StaleTape("parameters were mutated after the forward pass")
    if not tape.nodes:
        raise ValueError("empty tape")
    out = output if output is not None else tape.nodes[-1]
    g0 = np.asarray(output_grad, dtype=np.float64)
    if g0.shape not in (out.data.shape, ()):
        raise ShapeMismatch(f"output grad {g0.shape} vs output {out.data.shape}")
    for v in tape.nodes:
        v.grad = None
    out.grad = np.broadcast_to(g0, out.data.shape).copy()
    for v in reversed(tape.nodes):
        if v.grad is not None and v._bwd is not None:
            v._bwd(v.grad)
    grads = {}
    for store, _ in tape._stores.values():
        for name in store.names():
            grads[name] = np.zeros_like(store[name])
    for (_, name), leaf in tape._leaves.items():
        if leaf.grad is not None:
            grads[name] = leaf.grad
    return grads


def adam_step(store, grads, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Standard Adam update with bias correction; mutates and returns store."""
    store.adam_t += 1
    t = store.adam_t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in store.names():
        w = store._arrays[name]
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        g = np.asarray(g, dtype=np.float64)
        if g.shape != w.shape:
            raise ShapeMismatch(f"grad {name}: {g.shape} != {w.shape}")
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        w -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    store.version += 1
    return store


# ---------------------------------------------------------------------------
# layers


_ACTIVATIONS = {"relu": relu, "tanh": tanh, "sigmoid": sigmoid, "identity": None, None: None}


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input first) and hidden activation of a plain MLP."""

    sizes: tuple
    activation: str = "relu"
    output_activation: str = "identity"


def init_mlp(params: ParamSlice, spec: MlpSpec, rng):
    for i, (nin, nout) in enumerate(zip(spec.sizes[:-1], spec.sizes[1:])):
        bound = 1.0 / np.sqrt(nin)
        params.store.add(params.name(f"W{i}"), rng.uniform(-bound, bound, (nin, nout)))
        params.store.add(params.name(f"b{i}"), np.zeros(nout))


def mlp_forward(params: ParamSlice, x, spec: MlpSpec):
    x = _as_var(x)
    if x.data.ndim == 1:
        x = Var(x.data[None, :])
    if x.data.shape[1] != spec.sizes[0]:
        raise ShapeMismatch(f"mlp input width {x.data.shape[1]} != {spec.sizes[0]}")
    act = _ACTIVATIONS[spec.activation]
    n_layers = len(spec.sizes) - 1
    h = x
    for i in range(n_layers):
        h = add_bias(matmul(h, params.var(f"W{i}")), params.var(f"b{i}"))
        if i < n_layers - 1 and act is not None:
            h = act(h)
    out_act = _ACTIVATIONS[spec.output_activation]
    return out_act(h) if out_act is not None else h


def init_lstm(params: ParamSlice, d_in, hidden, rng):
    bx = 1.0 / np.sqrt(d_in)
    bh = 1.0 / np.sqrt(hidden)
    params.store.add(params.name("Wx"), rng.uniform(-bx, bx, (d_in, 4 * hidden)))
    params.store.add(params.name("Wh"), rng.uniform(-bh, bh, (hidden, 4 * hidden)))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate starts open
    params.store.add(params.name("b"), b)


def lstm_forward(params: ParamSlice, seq, hidden):
    """Run an LSTM over ``seq`` of shape (B, T, d) or (T, d); returns h_T.

    Gate order in the fused weight matrices is input, forget, candidate,
    output.  Initial hidden and cell states are zero.
    """
    data = seq.data if isinstance(seq, Var) else np.asarray(seq, dtype=np.float64)
    if data.ndim == 2:
        data = data[None, :, :]
    if data.ndim != 3:
        raise ShapeMismatch(f"lstm input must be (B, T, d), got {data.shape}")
    n_batch, n_steps, d_in = data.shape
    if n_steps < 1:
        raise ShapeMismatch("lstm needs at least one time step")
    wx = params.var("Wx")
    wh = params.var("Wh")
    b = params.var("b")
    if wx.data.shape[0] != d_in:
        raise ShapeMismatch(f"lstm input width {d_in} != {wx.data.shape[0]}")
    h = Var(np.zeros((n_batch, hidden)))
    c = Var(np.zeros((n_batch, hidden)))
    for t in range(n_steps):
        x_t = Var(np.ascontiguousarray(data[:, t, :])) if not isinstance(seq, Var) else slice_time(seq, t)
        pre = add_bias(add(matmul(x_t, wx), matmul(h, wh)), b)
        i_g = sigmoid(slice_cols(pre, 0, hidden))
        f_g = sigmoid(slice_cols(pre, hidden, 2 * hidden))
        g_c = tanh(slice_cols(pre, 2 * hidden, 3 * hidden))
        o_g = sigmoid(slice_cols(pre, 3 * hidden, 4 * hidden))
        c = add(mul(f_g, c), mul(i_g, g_c))
        h = mul(o_g, tanh(c))
    return h


def slice_time(x, t):
    """Select time step t from a (B, T, d) Var."""
    x = _as_var(x)

    def bwd(g):
        full = np.zeros_like(x.data)
        full[:, t, :] = g
        _accum(x, full)

    return _node(np.ascontiguousarray(x.data[:, t, :]), (x,), bwd)


# ---------------------------------------------------------------------------
# checkpoints


_CKPT_MAGIC = b"DCBFCKPT"
_CKPT_VERSION = 1


def save_params(store, extra=None):
    """Serialize a ParamStore (values + Adam moments) to bytes."""
    meta = {
        "names": [{"name": n, "shape": list(store[n].shape)} for n in store.names()],
        "adam_t": store.adam_t,
        "extra": extra,
    }
    meta_blob = json.dumps(meta, separators=(",", ":")).encode("utf-8")
    chunks = [struct.pack("<I", len(meta_blob)), meta_blob]
    for name in store.names():
        chunks.append(np.ascontiguousarray(store[name]).tobytes())
        m, v = store.moments(name)
        chunks.append(np.ascontiguousarray(m).tobytes())
        chunks.append(np.ascontiguousarray(v).tobytes())
    payload = b"".join(chunks)
    header = _CKPT_MAGIC + struct.pack("<HIQ", _CKPT_VERSION, zlib.crc32(payload), len(payload))
    return header + payload


def load_params(blob):
    """Inverse of save_params; returns (ParamStore, extra)."""
    if len(blob) < len(_CKPT_MAGIC) + 14 or blob[: len(_CKPT_MAGIC)] != _CKPT_MAGIC:
        raise CorruptCheckpoint("bad magic or truncated header")
    version, crc, length = struct.unpack_from("<HIQ", blob, len(_CKPT_MAGIC))
    if version != _CKPT_VERSION:
        raise VersionMismatch(f"unsupported checkpoint format version {version}")
    payload = blob[len(_CKPT_MAGIC) + 14:]
    if len(payload) != length or zlib.crc32(payload) != crc:
        raise CorruptCheckpoint("payload truncated or corrupted")
    try:
        (meta_len,) = struct.unpack_from("<I", payload, 0)
        meta = json.loads(payload[4: 4 + meta_len].decode("utf-8"))
        store = ParamStore()
        offset = 4 + meta_len
        for entry in meta["names"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            nbytes = count * 8
            arrays = []
            for _ in range(3):
                arrays.append(np.frombuffer(payload, np.float64, count, offset).reshape(shape).copy())
                offset += nbytes
            store.add(entry["name"], arrays[0])
            store._m[entry["name"]][...] = arrays[1]
            store._v[entry["name"]][...] = arrays[2]
        if offset != len(payload):
            raise CorruptCheckpoint("trailing bytes in checkpoint")
        store.adam_t = int(meta["adam_t"])
    except CorruptCheckpoint:
        raise
    except Exception as exc:
        raise CorruptCheckpoint(f"malformed checkpoint payload: {exc}") from exc
    return store, meta.get("extra")


def params_to_text(store):
    """Human-readable dump of parameter names, shapes and summary stats."""
    lines = [f"params: {len(store.names())} tensors, {store.n_params()} scalars, adam_t={store.adam_t}"]
    for name in store.names():
        a = store[name]
        lines.append(
            f"  {name}  shape={tuple(a.shape)}  mean={a.mean():+.6e}  std={a.std():.6e}"
            f"  min={a.min():+.6e}  max={a.max():+.6e}"
        )
    return "\n".join(lines)
