"""Dense float64 numerics for the rest of the package.

A small fully-connected network with hand-written reverse mode over a fixed
operation vocabulary (affine, pointwise activation, squared norm, sum, scalar
scale), a forward-over-reverse pass for gradients of input-gradient terms
(needed by the critic's gradient penalty), a bias-corrected Adam update, and a
text checkpoint format.

Conventions: arrays are numpy float64; a batch is the leading axis; weights
are stored so that a layer computes x @ W + b with W of shape (fan_in,
fan_out).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, List, Sequence, Tuple

import numpy as np

Array = np.ndarray

ACTIVATIONS = ("tanh", "silu")


def _sigmoid(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _act(name: str, z: Array) -> Array:
    if name == "tanh":
        return np.tanh(z)
    return z * _sigmoid(z)


def _act_d(name: str, z: Array) -> Array:
    """First derivative of the activation at z."""
    if name == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


def _act_dd(name: str, z: Array) -> Array:
    """Second derivative of the activation at z."""
    if name == "tanh":
        t = np.tanh(z)
        return -2.0 * t * (1.0 - t * t)
    s = _sigmoid(z)
    sd = s * (1.0 - s)
    sdd = sd * (1.0 - 2.0 * s)
    return 2.0 * sd + z * sdd


class Mlp:
    """Feed-forward net: hidden layers use `activation`, output layer is linear.

    layer_dims = (d_in, h_1, ..., h_L, d_out). With rng=None parameters are
    zero; otherwise weights draw from N(0, (init_scale/sqrt(fan_in))^2) and
    biases start at zero.
    """

    def __init__(self, layer_dims: Sequence[int], activation: str = "tanh",
                 rng: np.random.Generator | None = None, init_scale: float = 1.0):
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or any(d <= 0 for d in dims):
            raise ValueError(f"layer_dims must be >= 2 positive ints, got {layer_dims}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        self.layer_dims = dims
        self.activation = activation
        self.weights: List[Array] = []
        self.biases: List[Array] = []
        for din, dout in zip(dims[:-1], dims[1:]):
            if rng is None:
                w = np.zeros((din, dout))
            else:
                w = rng.normal(0.0, init_scale / np.sqrt(din), size=(din, dout))
            self.weights.append(w)
            self.biases.append(np.zeros(dout))

    @property
    def d_in(self) -> int:
        return self.layer_dims[0]

    @property
    def d_out(self) -> int:
        return self.layer_dims[-1]

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def params(self) -> List[Array]:
        """Parameter tensors in a fixed order [W0, b0, W1, b1, ...] (views)."""
        out: List[Array] = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def set_params(self, params: Sequence[Array]) -> None:
        mine = self.params()
        if len(mine) != len(params):
            raise ValueError(f"expected {len(mine)} tensors, got {len(params)}")
        for dst, src in zip(mine, params):
            if dst.shape != np.shape(src):
                raise ValueError(f"shape mismatch {dst.shape} vs {np.shape(src)}")
            dst[...] = src

    def copy(self) -> "Mlp":
        other = Mlp(self.layer_dims, self.activation)
        other.set_params(self.params())
        return other

    def _check_input(self, x: Array) -> Array:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(
                f"input must have shape (B, {self.d_in}), got {x.shape}")
        return x

    def forward(self, x: Array) -> Array:
        """x (B, d_in) -> (B, d_out)."""
        x = self._check_input(x)
        h = x
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i != last:
                h = _act(self.activation, h)
        return h

    def forward_cache(self, x: Array) -> Tuple[Array, dict]:
        """Forward keeping per-layer inputs and pre-activations for backward."""
        x = self._check_input(x)
        inputs = [x]      # input to layer i
        preacts = []      # z of hidden layer i (not the linear output layer)
        h = x
        last = self.n_layers - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            z = h @ w + b
            if i != last:
                preacts.append(z)
                h = _act(self.activation, z)
                inputs.append(h)
            else:
                h = z
        return h, {"inputs": inputs, "preacts": preacts}

    def backward(self, cache: dict, dy: Array) -> Tuple[List[Array], Array]:
        """Reverse pass: cotangent dy (B, d_out) -> (param grads, dx (B, d_in))."""
        inputs, preacts = cache["inputs"], cache["preacts"]
        grads = [np.zeros_like(p) for p in self.params()]
        d = np.asarray(dy, dtype=np.float64)
        last = self.n_layers - 1
        for i in range(last, -1, -1):
            if i != last:
                d = d * _act_d(self.activation, preacts[i])
            grads[2 * i] += inputs[i].T @ d
            grads[2 * i + 1] += d.sum(axis=0)
            d = d @ self.weights[i].T
        return grads, d


def forward(mlp: Mlp, x: Array) -> Array:
    return mlp.forward(x)


def grad_params(mlp: Mlp, x: Array, loss_fn: Callable[[Array], Tuple[float, Array]]
                ) -> Tuple[float, List[Array]]:
    """Gradient of a scalar loss of the batched output w.r.t. parameters.

    loss_fn(y) must return (scalar loss, dloss/dy of shape (B, d_out)).
    """
    y, cache = mlp.forward_cache(x)
    loss, dy = loss_fn(y)
    loss_arr = np.asarray(loss)
    if loss_arr.shape != ():
        raise ValueError(f"loss must be a scalar, got shape {loss_arr.shape}")
    dy = np.asarray(dy, dtype=np.float64)
    if dy.shape != y.shape:
        raise ValueError(f"cotangent shape {dy.shape} must match output {y.shape}")
    grads, _ = mlp.backward(cache, dy)
    return float(loss_arr), grads


def grad_input(mlp: Mlp, x: Array, cotangent: Array) -> Array:
    """Vector-Jacobian product w.r.t. the input.

    Returns rows d(cotangent_b . y_b)/dx_b, shape (B, d_in).
    """
    y, cache = mlp.forward_cache(x)
    cot = np.asarray(cotangent, dtype=np.float64)
    if cot.shape != y.shape:
        raise ValueError(f"cotangent shape {cot.shape} must match output {y.shape}")
    _, dx = mlp.backward(cache, cot)
    return dx


def jacobian(mlp: Mlp, x: Array) -> Array:
    """Per-sample Jacobian (B, d_out, d_in); intended for small d_out."""
    if mlp.d_out > 8:
        raise ValueError(f"full Jacobian limited to d_out <= 8, got {mlp.d_out}")
    x = mlp._check_input(x)
    B = x.shape[0]
    jac = np.empty((B, mlp.d_out, mlp.d_in))
    for i in range(mlp.d_out):
        cot = np.zeros((B, mlp.d_out))
        cot[:, i] = 1.0
        jac[:, i, :] = grad_input(mlp, x, cot)
    return jac


def jvp(mlp: Mlp, x: Array, tangent: Array) -> Array:
    """Per-sample Jacobian-vector product J_b @ tangent_b, shape (B, d_out)."""
    x = mlp._check_input(x)
    t = np.asarray(tangent, dtype=np.float64)
    if t.shape != x.shape:
        raise ValueError(f"tangent shape {t.shape} must match input {x.shape}")
    h, th = x, t
    last = mlp.n_layers - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ w + b
        tz = th @ w
        if i != last:
            h = _act(mlp.activation, z)
            th = _act_d(mlp.activation, z) * tz
        else:
            h, th = z, tz
    return th


def grad_params_jvp(mlp: Mlp, x: Array, tangent: Array, cot_out: Array
                    ) -> Tuple[Array, List[Array]]:
    """Parameter gradient of s = sum_b cot_out_b . (J_b @ tangent_b).

    J_b is the per-sample input Jacobian; tangent and cot_out are treated as
    constants. Forward-over-reverse: the dual (primal, tangent) forward pass is
    differentiated w.r.t. parameters, which needs the activation's second
    derivative. Returns (per-sample JVP (B, d_out), grads of s).
    """
    x = mlp._check_input(x)
    t = np.asarray(tangent, dtype=np.float64)
    if t.shape != x.shape:
        raise ValueError(f"tangent shape {t.shape} must match input {x.shape}")
    act = mlp.activation
    last = mlp.n_layers - 1
    # dual forward
    hs, ths, zs, tzs = [x], [t], [], []
    h, th = x, t
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        z = h @ w + b
        tz = th @ w
        zs.append(z)
        tzs.append(tz)
        if i != last:
            h = _act(act, z)
            th = _act_d(act, z) * tz
            hs.append(h)
            ths.append(th)
        else:
            h, th = z, tz
    out_jvp = th
    cot = np.asarray(cot_out, dtype=np.float64)
    if cot.shape != out_jvp.shape:
        raise ValueError(f"cot_out shape {cot.shape} must match output {out_jvp.shape}")
    # reverse through the dual graph; (dh, dth) are cotangents of (h, th)
    grads = [np.zeros_like(p) for p in mlp.params()]
    dh = np.zeros_like(out_jvp)
    dth = cot.copy()
    for i in range(last, -1, -1):
        if i != last:
            phi_d = _act_d(act, zs[i])
            phi_dd = _act_dd(act, zs[i])
            dz = dh * phi_d + dth * phi_dd * tzs[i]
            dtz = dth * phi_d
        else:
            dz = dh
            dtz = dth
        grads[2 * i] += hs[i].T @ dz + ths[i].T @ dtz
        grads[2 * i + 1] += dz.sum(axis=0)
        dh = dz @ mlp.weights[i].T
        dth = dtz @ mlp.weights[i].T
    return out_jvp, grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: List[Array] = field(default_factory=list)
    v: List[Array] = field(default_factory=list)


def adam_init(params: Sequence[Array], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                     m=[np.zeros_like(p) for p in params],
                     v=[np.zeros_like(p) for p in params])


def adam_step(state: AdamState, params: Sequence[Array], grads: Sequence[Array]
              ) -> Tuple[Sequence[Array], AdamState]:
    """One bias-corrected Adam update, in place on params."""
    if len(params) != len(state.m) or len(grads) != len(state.m):
        raise ValueError("params/grads do not match optimizer state")
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape:
            raise ValueError(f"grad shape {g.shape} does not match param {p.shape}")
        m[...] = b1 * m + (1.0 - b1) * g
        v[...] = b2 * v + (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def clip_global_norm(grads: Sequence[Array], max_norm: float) -> float:
    """Scale grads in place so their global l2 norm is at most max_norm.

    Returns the pre-clip norm.
    """
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g *= scale
    return total


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CKPT_MAGIC = "FDCKPT v1"


def save_checkpoint(path: str, mlp: Mlp) -> None:
    """Text format: magic line, 'dims... activation' line, then one line per
    weight row / bias vector in layer order, %.17g (round-trips exactly)."""
    lines = [CKPT_MAGIC,
             " ".join(str(d) for d in mlp.layer_dims) + " " + mlp.activation]
    for w, b in zip(mlp.weights, mlp.biases):
        for row in w:
            lines.append(" ".join("%.17g" % v for v in row))
        lines.append(" ".join("%.17g" % v for v in b))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_checkpoint(path: str) -> Mlp:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a {CKPT_MAGIC!r} checkpoint")
    head = lines[1].split()
    if len(head) < 3 or head[-1] not in ACTIVATIONS:
        raise ValueError(f"{path}: bad header line {lines[1]!r}")
    dims = [int(d) for d in head[:-1]]
    mlp = Mlp(dims, activation=head[-1])
    def parse(line_no: int, n: int) -> Array:
        vals = np.array([float(v) for v in lines[line_no].split()])
        if vals.size != n:
            raise ValueError(f"{path}: line {line_no + 1}: expected {n} values")
        return vals

    idx = 2
    for li, (din, dout) in enumerate(zip(dims[:-1], dims[1:])):
        w = np.empty((din, dout))
        for r in range(din):
            w[r] = parse(idx, dout)
            idx += 1
        b = parse(idx, dout)
        idx += 1
        mlp.weights[li][...] = w
        mlp.biases[li][...] = b
    return mlp
