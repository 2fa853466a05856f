"""Fully connected networks with exact spatial derivatives.

Evaluation propagates derivative bundles (value, gradient, Hessian, and the
gradient of the Laplacian) through every layer, so derivatives are exact up
to third order; no finite differencing and no tape.  The same machinery runs
in reverse for parameter gradients of losses built from those bundles.
"""

import os
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..errors import FormatError, UnsupportedError

if os.environ.get("ENRICHFEM_PURE_PYTHON"):
    from . import _bundle_ops_np as _ops
else:
    try:
        from . import _bundle_ops as _ops  # compiled twin, optional
    except ImportError:
        from . import _bundle_ops_np as _ops

_ACT_IDS = {"sine": _ops.SINE, "tanh": _ops.TANH}
_MAGIC = b"ENRFEMW1"
_FORMAT_VERSION = 1


def backend_name() -> str:
    """Which bundle-kernel implementation is active ("numpy" or "cython")."""
    return _ops.BACKEND


@dataclass(frozen=True)
class MlpConfig:
    """Architecture of a network over (x, mu) in R^d x R^p."""

    n_spatial: int
    n_param: int
    hidden: Sequence[int]
    activation: str = "tanh"
    n_fourier: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.activation not in _ACT_IDS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.n_spatial < 1 or self.n_param < 0 or self.n_fourier < 0:
            raise ValueError("invalid network dimensions")
        object.__setattr__(self, "hidden", tuple(int(w) for w in self.hidden))

    @property
    def n_input(self) -> int:
        # raw coordinates, parameters, then sin/cos features per spatial axis
        return self.n_spatial + self.n_param + 2 * self.n_fourier * self.n_spatial

    @property
    def widths(self) -> tuple:
        return (self.n_input, *self.hidden, 1)


@dataclass
class DerivativeBundle:
    """Network output with spatial derivatives at a batch of points.

    lap_gradient holds grad(Laplacian), the only third-order information the
    operators here ever need.  laplacian is stored directly when the Hessian
    is not available (some boundary compositions); otherwise use the trace.
    """

    value: np.ndarray
    gradient: Optional[np.ndarray] = None
    hessian: Optional[np.ndarray] = None
    lap_gradient: Optional[np.ndarray] = None
    laplacian: Optional[np.ndarray] = None

    def laplacian_values(self) -> np.ndarray:
        if self.laplacian is not None:
            return self.laplacian
        if self.hessian is None:
            raise ValueError("bundle carries no second-order information")
        return np.trace(self.hessian, axis1=1, axis2=2)


class MlpNetwork:
    """Weights of an MLP plus trainable Fourier frequencies."""

    def __init__(self, config: MlpConfig, weights, biases, freq_a, freq_b):
        self.config = config
        self.weights = [np.asarray(W, dtype=float) for W in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.freq_a = np.asarray(freq_a, dtype=float)
        self.freq_b = np.asarray(freq_b, dtype=float)
        widths = config.widths
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape != (widths[i + 1], widths[i]) or b.shape != (widths[i + 1],):
                raise ValueError(f"layer {i} shape mismatch")
        if self.freq_a.shape != (config.n_fourier,) or self.freq_b.shape != (
            config.n_fourier,
        ):
            raise ValueError("frequency vector shape mismatch")

    @property
    def n_weights(self) -> int:
        n = sum(W.size + b.size for W, b in zip(self.weights, self.biases))
        return n + self.freq_a.size + self.freq_b.size

    def pack(self) -> np.ndarray:
        """Flatten to a single vector: W1, b1, ..., WL, bL, freq_a, freq_b."""
        parts = []
        for W, b in zip(self.weights, self.biases):
            parts.append(W.ravel())
            parts.append(b)
        parts.append(self.freq_a)
        parts.append(self.freq_b)
        return np.concatenate(parts) if parts else np.zeros(0)

    def unpack(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=float)
        if vec.shape != (self.n_weights,):
            raise ValueError("parameter vector length mismatch")
        pos = 0
        for W, b in zip(self.weights, self.biases):
            W[...] = vec[pos : pos + W.size].reshape(W.shape)
            pos += W.size
            b[...] = vec[pos : pos + b.size]
            pos += b.size
        nf = self.freq_a.size
        self.freq_a[...] = vec[pos : pos + nf]
        self.freq_b[...] = vec[pos + nf : pos + 2 * nf]

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(
            self.config,
            [W.copy() for W in self.weights],
            [b.copy() for b in self.biases],
            self.freq_a.copy(),
            self.freq_b.copy(),
        )


def init_network(config: MlpConfig) -> MlpNetwork:
    """Seeded Glorot-uniform weights, zero biases, integer frequency ladder.

    Layer matrices are drawn in order from a generator seeded with
    config.seed, each uniform on +-sqrt(6 / (fan_in + fan_out)).
    """
    rng = np.random.default_rng(config.seed)
    widths = config.widths
    weights, biases = [], []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (n_in + n_out))
        weights.append(rng.uniform(-bound, bound, size=(n_out, n_in)))
        biases.append(np.zeros(n_out))
    ladder = np.arange(1, config.n_fourier + 1, dtype=float)
    return MlpNetwork(config, weights, biases, ladder, ladder.copy())


def _check_batch(net, x, mu):
    cfg = net.config
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.ndim != 2 or x.shape[1] != cfg.n_spatial:
        raise ValueError(
            f"expected spatial batch (n, {cfg.n_spatial}), got {x.shape}"
        )
    mu = np.asarray(mu, dtype=float)
    if cfg.n_param == 0:
        mu = np.zeros((x.shape[0], 0))
    elif mu.ndim == 1:
        if mu.shape[0] != cfg.n_param:
            raise ValueError(f"expected {cfg.n_param} parameters, got {mu.shape}")
        mu = np.broadcast_to(mu, (x.shape[0], cfg.n_param))
    elif mu.shape != (x.shape[0], cfg.n_param):
        raise ValueError(
            f"expected parameter batch (n, {cfg.n_param}), got {mu.shape}"
        )
    return x, mu


def _input_slots(net, x, mu, order):
    cfg = net.config
    n, d = x.shape
    n_in = cfg.n_input
    V0 = np.zeros((n, n_in))
    V0[:, :d] = x
    V0[:, d : d + cfg.n_param] = mu
    V1 = np.zeros((n, d, n_in))
    for c in range(d):
        V1[:, c, c] = 1.0
    V2 = np.zeros((n, d, d, n_in)) if order >= 2 else None
    V3 = np.zeros((n, d, n_in)) if order >= 3 else None
    if cfg.n_fourier:
        base = d + cfg.n_param
        _ops.fourier_forward(
            x,
            net.freq_a,
            net.freq_b,
            order,
            V0[:, base:],
            V1[:, :, base:],
            None if V2 is None else V2[:, :, :, base:],
            None if V3 is None else V3[:, :, base:],
        )
    return V0, V1, V2, V3


def _linear(W, b, V0, V1, V2, V3):
    Z0 = V0 @ W.T + b
    Z1 = V1 @ W.T
    Z2 = None if V2 is None else V2 @ W.T
    Z3 = None if V3 is None else V3 @ W.T
    return Z0, Z1, Z2, Z3


def _forward_slots(net, x, mu, order, keep_cache):
    act = _ACT_IDS[net.config.activation]
    slots = _input_slots(net, x, mu, order)
    cache = [slots] if keep_cache else None
    last = len(net.weights) - 1
    for i, (W, b) in enumerate(zip(net.weights, net.biases)):
        slots = _linear(W, b, *slots)
        if i < last:
            if keep_cache:
                cache.append(slots)
            slots = _ops.act_forward(act, *slots)
            if keep_cache:
                cache.append(slots)
    return slots, cache


def _slots_to_bundle(slots, order):
    Z0, Z1, Z2, Z3 = slots
    return DerivativeBundle(
        value=Z0[:, 0],
        gradient=Z1[:, :, 0],
        hessian=None if order < 2 else Z2[:, :, :, 0],
        lap_gradient=None if order < 3 else Z3[:, :, 0],
    )


def forward(net: MlpNetwork, x, mu=()) -> np.ndarray:
    """Network values at a batch of points; mu broadcasts over the batch."""
    x, mu = _check_batch(net, x, mu)
    slots, _ = _forward_slots(net, x, mu, order=1, keep_cache=False)
    return slots[0][:, 0]


def input_derivatives(net: MlpNetwork, x, mu=(), order: int = 2) -> DerivativeBundle:
    """Exact derivatives with respect to x up to `order` (at most 3)."""
    if order < 0 or order > 3:
        raise UnsupportedError(f"derivative order {order} not supported (max 3)")
    x, mu = _check_batch(net, x, mu)
    slots, _ = _forward_slots(net, x, mu, order=max(order, 1), keep_cache=False)
    bundle = _slots_to_bundle(slots, order)
    if order == 0:
        bundle.gradient = None
    return bundle


def _bundle_to_cotangent_slots(cot: DerivativeBundle, n, d, order):
    Zb0 = np.zeros((n, 1))
    Zb0[:, 0] = cot.value if cot.value is not None else 0.0
    Zb1 = np.zeros((n, d, 1))
    if cot.gradient is not None:
        Zb1[:, :, 0] = cot.gradient
    Zb2 = Zb3 = None
    if order >= 2:
        Zb2 = np.zeros((n, d, d, 1))
        if cot.hessian is not None:
            Zb2[:, :, :, 0] = cot.hessian
        if cot.laplacian is not None:
            for c in range(d):
                Zb2[:, c, c, 0] += cot.laplacian
    if order >= 3:
        Zb3 = np.zeros((n, d, 1))
        if cot.lap_gradient is not None:
            Zb3[:, :, 0] = cot.lap_gradient
    return Zb0, Zb1, Zb2, Zb3


def _accumulate_weight_grad(dW, db, Zb, V):
    Zb0, Zb1, Zb2, Zb3 = Zb
    V0, V1, V2, V3 = V
    w_out, w_in = dW.shape
    dW += Zb0.T @ V0
    dW += Zb1.reshape(-1, w_out).T @ V1.reshape(-1, w_in)
    if Zb2 is not None:
        dW += Zb2.reshape(-1, w_out).T @ V2.reshape(-1, w_in)
    if Zb3 is not None:
        dW += Zb3.reshape(-1, w_out).T @ V3.reshape(-1, w_in)
    db += Zb0.sum(axis=0)


def _linear_cotangent(W, Zb):
    Zb0, Zb1, Zb2, Zb3 = Zb
    return (
        Zb0 @ W,
        Zb1 @ W,
        None if Zb2 is None else Zb2 @ W,
        None if Zb3 is None else Zb3 @ W,
    )


def parameter_gradient(net: MlpNetwork, x, mu, evaluator, order: int = 2):
    """Gradient of a bundle-defined scalar with respect to all parameters.

    evaluator(bundle) must return (loss, cotangent_bundle) where the
    cotangent holds dloss/d(slot) arrays (None means zero).  Returns
    (loss, grad) with grad laid out like MlpNetwork.pack().
    """
    if order < 0 or order > 3:
        raise UnsupportedError(f"derivative order {order} not supported (max 3)")
    x, mu = _check_batch(net, x, mu)
    cfg = net.config
    n, d = x.shape
    act = _ACT_IDS[cfg.activation]

    # slots always carry the gradient; a value-only request strips it from
    # the bundle the evaluator sees
    slot_order = max(order, 1)
    slots, cache = _forward_slots(net, x, mu, slot_order, keep_cache=True)
    bundle = _slots_to_bundle(slots, order)
    if order == 0:
        bundle.gradient = None
    loss, cot = evaluator(bundle)

    dWs = [np.zeros_like(W) for W in net.weights]
    dbs = [np.zeros_like(b) for b in net.biases]
    Zb = _bundle_to_cotangent_slots(cot, n, d, slot_order)

    # cache layout: [input V, layer1 Z, layer1 V, layer2 Z, layer2 V, ..., last V_in]
    last = len(net.weights) - 1
    for i in range(last, -1, -1):
        V_in = cache[2 * i]
        _accumulate_weight_grad(dWs[i], dbs[i], Zb, V_in)
        Vb = _linear_cotangent(net.weights[i], Zb)
        if i > 0:
            Z_pre = cache[2 * i - 1]
            Zb = _ops.act_backward(act, *Z_pre, *Vb)
        else:
            Zb = Vb

    n_f = cfg.n_fourier
    if n_f:
        base = d + cfg.n_param
        Fb0 = Zb[0][:, base:]
        Fb1 = Zb[1][:, :, base:]
        Fb2 = None if Zb[2] is None else Zb[2][:, :, :, base:]
        Fb3 = None if Zb[3] is None else Zb[3][:, :, base:]
        da, db_ = _ops.fourier_backward(
            x, net.freq_a, net.freq_b, slot_order, Fb0, Fb1, Fb2, Fb3
        )
    else:
        da = np.zeros(0)
        db_ = np.zeros(0)

    parts = []
    for dW, db in zip(dWs, dbs):
        parts.append(dW.ravel())
        parts.append(db)
    parts.append(da)
    parts.append(db_)
    return loss, np.concatenate(parts)


def weights_to_bytes(net: MlpNetwork) -> bytes:
    """Binary form: magic, version, activation, dims, widths, float64 params."""
    cfg = net.config
    widths = cfg.widths
    header = struct.pack(
        "<8sIIIIII",
        _MAGIC,
        _FORMAT_VERSION,
        _ACT_IDS[cfg.activation],
        cfg.n_spatial,
        cfg.n_param,
        cfg.n_fourier,
        len(widths),
    )
    header += struct.pack(f"<{len(widths)}I", *widths)
    return header + net.pack().astype("<f8").tobytes()


def save_weights(net: MlpNetwork, path) -> None:
    with open(path, "wb") as f:
        f.write(weights_to_bytes(net))


def weights_from_bytes(raw: bytes, seed: int = 0) -> MlpNetwork:
    """Inverse of weights_to_bytes; malformed input raises FormatError."""
    head_fmt = "<8sIIIIII"
    head_size = struct.calcsize(head_fmt)
    if len(raw) < head_size:
        raise FormatError("weights file truncated in header")
    magic, version, act_id, n_spatial, n_param, n_fourier, n_widths = struct.unpack(
        head_fmt, raw[:head_size]
    )
    if magic != _MAGIC:
        raise FormatError("not a weights file (bad magic)")
    if version != _FORMAT_VERSION:
        raise FormatError(f"unsupported weights format version {version}")
    act_names = {v: k for k, v in _ACT_IDS.items()}
    if act_id not in act_names:
        raise FormatError(f"unknown activation id {act_id}")
    pos = head_size
    if len(raw) < pos + 4 * n_widths or n_widths < 2:
        raise FormatError("weights file truncated in width table")
    widths = struct.unpack(f"<{n_widths}I", raw[pos : pos + 4 * n_widths])
    pos += 4 * n_widths
    config = MlpConfig(
        n_spatial=n_spatial,
        n_param=n_param,
        hidden=widths[1:-1],
        activation=act_names[act_id],
        n_fourier=n_fourier,
        seed=seed,
    )
    if widths[0] != config.n_input or widths[-1] != 1:
        raise FormatError(
            f"width table {widths} inconsistent with dims "
            f"d={n_spatial}, p={n_param}, n_fourier={n_fourier}"
        )
    net = init_network(config)
    expected = net.n_weights
    body = raw[pos:]
    if len(body) != 8 * expected:
        raise FormatError(
            f"expected {8 * expected} parameter bytes, found {len(body)}"
        )
    net.unpack(np.frombuffer(body, dtype="<f8").astype(float))
    return net


def load_weights(path, seed: int = 0) -> MlpNetwork:
    with open(path, "rb") as f:
        return weights_from_bytes(f.read(), seed=seed)
