"""Gated recurrent cells (GRU/LSTM) and their convolutional variants.

Gate convention for the GRU, pinned here and in the tests:
h_t = (1 - z) * h_prev + z * h_tilde, so a closed update gate (z -> 0)
holds the previous state.  Pre-activations on the input-to-hidden and
hidden-to-hidden paths are normalized separately by recurrent batch
normalization before summing; the reset-gated candidate path U_h(r * h)
is left unnormalized.  Hidden states start at zero.

Recurrent batch normalization keeps separate running statistics per
timestep up to ``t_cap`` (statistics for t >= t_cap are shared) and
initializes the gain at 0.1.
"""

from __future__ import annotations

import numpy as np

from volforce import tensor as T
from volforce.tensor import Tensor

T_CAP_DEFAULT = 8
RECURRENT_GAMMA_INIT = 0.1


class RecurrentBatchNorm:
    """Batch normalization with per-timestep running statistics.

    gamma/beta are shared across timesteps; running mean/variance are kept
    per timestep for t < t_cap and in one shared slot for t >= t_cap.
    Statistics slots are preallocated so the buffer layout is fixed.
    """

    def __init__(self, channels: int, t_cap: int = T_CAP_DEFAULT,
                 momentum: float = 0.1, eps: float = 1e-3,
                 gamma_init: float = RECURRENT_GAMMA_INIT):
        self.channels = channels
        self.t_cap = t_cap
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.full(channels, gamma_init, dtype=T.default_dtype()),
                            requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=T.default_dtype()), requires_grad=True)
        self.running_mean = np.zeros((t_cap + 1, channels), dtype=np.float64)
        self.running_var = np.ones((t_cap + 1, channels), dtype=np.float64)

    def _slot(self, t: int) -> int:
        if t < 0:
            raise ValueError(f"timestep must be >= 0, got {t}")
        return min(t, self.t_cap)

    def __call__(self, x: Tensor, t: int, training: bool) -> Tensor:
        if x.shape[-1] != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {x.shape[-1]}")
        slot = self._slot(t)
        axes = tuple(range(x.ndim - 1))
        if training:
            if x.shape[0] < 2:
                raise ValueError("recurrent batch norm in training mode needs batch size >= 2")
            mu = T.tmean(x, axis=axes, keepdims=True)
            var = T.tmean((x - mu) ** 2.0, axis=axes, keepdims=True)
            m = self.momentum
            self.running_mean[slot] += m * (mu.data.reshape(-1) - self.running_mean[slot])
            self.running_var[slot] += m * (var.data.reshape(-1) - self.running_var[slot])
            xn = (x - mu) / T.sqrt(var + self.eps)
        else:
            shape = (1,) * (x.ndim - 1) + (self.channels,)
            mu = Tensor(self.running_mean[slot].reshape(shape))
            sd = Tensor(np.sqrt(self.running_var[slot] + self.eps).reshape(shape))
            xn = (x - mu) / sd
        return xn * self.gamma + self.beta

    def named_params(self, prefix: str = ""):
        yield prefix + "gamma", self.gamma
        yield prefix + "beta", self.beta

    def named_buffers(self, prefix: str = ""):
        yield prefix + "running_mean", self.running_mean
        yield prefix + "running_var", self.running_var


def _gate_weights(shapes: dict[str, tuple[int, ...]], init) -> dict[str, Tensor]:
    return {name: Tensor(init(shape), requires_grad=True) for name, shape in shapes.items()}


class _CellBase:
    """Shared plumbing: weight registry, BN registry, linear/conv gate maps."""

    gate_names: tuple[str, ...] = ()
    bn_names: tuple[str, ...] = ()

    def __init__(self, t_cap: int):
        self.weights: dict[str, Tensor] = {}
        self.bns: dict[str, RecurrentBatchNorm] = {}
        self.t_cap = t_cap

    def _apply(self, name: str, x: Tensor) -> Tensor:
        raise NotImplementedError

    def _make_bns(self, hidden: int):
        for name in self.bn_names:
            self.bns[name] = RecurrentBatchNorm(hidden, t_cap=self.t_cap)

    def named_params(self, prefix: str = ""):
        for name in self.gate_names:
            yield prefix + name, self.weights[name]
        for name in self.bn_names:
            yield from self.bns[name].named_params(prefix + "bn_" + name + ".")

    def named_buffers(self, prefix: str = ""):
        for name in self.bn_names:
            yield from self.bns[name].named_buffers(prefix + "bn_" + name + ".")

    def param_count(self) -> int:
        return sum(p.size for _, p in self.named_params())


class GRUCell(_CellBase):
    """Vector GRU step with recurrent batch normalization.

    z = sig(BN(W_z x) + BN(U_z h)); r = sig(BN(W_r x) + BN(U_r h));
    h~ = tanh(BN(W_h x) + U_h(r * h)); h_t = (1 - z) h_prev + z h~.
    """

    gate_names = ("w_z", "u_z", "w_r", "u_r", "w_h", "u_h")
    bn_names = ("wz", "uz", "wr", "ur", "wh")

    def __init__(self, in_size: int, hidden: int, init, t_cap: int = T_CAP_DEFAULT):
        super().__init__(t_cap)
        self.in_size = in_size
        self.hidden = hidden
        self.weights = _gate_weights({
            "w_z": (in_size, hidden), "u_z": (hidden, hidden),
            "w_r": (in_size, hidden), "u_r": (hidden, hidden),
            "w_h": (in_size, hidden), "u_h": (hidden, hidden),
        }, init)
        self._make_bns(hidden)

    def _apply(self, name: str, x: Tensor) -> Tensor:
        return T.matmul(x, self.weights[name])

    def initial_state(self, x_t: Tensor) -> Tensor:
        return Tensor.zeros(x_t.shape[:-1] + (self.hidden,))

    def step(self, x_t: Tensor, h_prev: Tensor, t: int, training: bool) -> Tensor:
        bn = self.bns
        z = T.sigmoid(bn["wz"](self._apply("w_z", x_t), t, training)
                      + bn["uz"](self._apply("u_z", h_prev), t, training))
        r = T.sigmoid(bn["wr"](self._apply("w_r", x_t), t, training)
                      + bn["ur"](self._apply("u_r", h_prev), t, training))
        cand = T.tanh(bn["wh"](self._apply("w_h", x_t), t, training)
                      + self._apply("u_h", r * h_prev))
        return (1.0 - z) * h_prev + z * cand


class LSTMCell(_CellBase):
    """Vector LSTM step with per-gate recurrent batch normalization.

    c_t = f * c_prev + i * g; h_t = o * tanh(c_t).
    """

    gate_names = ("w_i", "u_i", "w_f", "u_f", "w_o", "u_o", "w_g", "u_g")
    bn_names = ("wi", "ui", "wf", "uf", "wo", "uo", "wg", "ug")

    def __init__(self, in_size: int, hidden: int, init, t_cap: int = T_CAP_DEFAULT):
        super().__init__(t_cap)
        self.in_size = in_size
        self.hidden = hidden
        self.weights = _gate_weights({
            name: ((in_size if name.startswith("w") else hidden), hidden)
            for name in self.gate_names
        }, init)
        self._make_bns(hidden)

    def _apply(self, name: str, x: Tensor) -> Tensor:
        return T.matmul(x, self.weights[name])

    def initial_state(self, x_t: Tensor):
        shape = x_t.shape[:-1] + (self.hidden,)
        return (Tensor.zeros(shape), Tensor.zeros(shape))

    def step(self, x_t: Tensor, state, t: int, training: bool):
        h_prev, c_prev = state
        bn = self.bns

        def path(gate: str) -> Tensor:
            return (bn["w" + gate](self._apply("w_" + gate, x_t), t, training)
                    + bn["u" + gate](self._apply("u_" + gate, h_prev), t, training))

        i = T.sigmoid(path("i"))
        f = T.sigmoid(path("f"))
        o = T.sigmoid(path("o"))
        g = T.tanh(path("g"))
        c_t = f * c_prev + i * g
        return o * T.tanh(c_t), c_t


class ConvGRUCell(GRUCell):
    """GRU whose gate maps are SAME-padded convolutions over 2 or 3 spatial axes."""

    def __init__(self, in_channels: int, hidden: int, n_spatial: int, init,
                 k: int = 3, t_cap: int = T_CAP_DEFAULT):
        self.n_spatial = n_spatial
        self.k = k
        _CellBase.__init__(self, t_cap)
        self.in_size = in_channels
        self.hidden = hidden
        kern = (k,) * n_spatial
        self.weights = _gate_weights({
            name: kern + ((in_channels if name.startswith("w") else hidden), hidden)
            for name in self.gate_names
        }, init)
        self._make_bns(hidden)

    def _apply(self, name: str, x: Tensor) -> Tensor:
        from volforce.ops import conv_spatial
        if x.ndim != self.n_spatial + 2:
            raise ValueError(f"expected {self.n_spatial} spatial axes, got input {x.shape}")
        return conv_spatial(x, self.weights[name], stride=1)


class ConvLSTMCell(LSTMCell):
    """LSTM whose gate maps are SAME-padded convolutions over 2 or 3 spatial axes."""

    def __init__(self, in_channels: int, hidden: int, n_spatial: int, init,
                 k: int = 3, t_cap: int = T_CAP_DEFAULT):
        self.n_spatial = n_spatial
        self.k = k
        _CellBase.__init__(self, t_cap)
        self.in_size = in_channels
        self.hidden = hidden
        kern = (k,) * n_spatial
        self.weights = _gate_weights({
            name: kern + ((in_channels if name.startswith("w") else hidden), hidden)
            for name in self.gate_names
        }, init)
        self._make_bns(hidden)

    def _apply(self, name: str, x: Tensor) -> Tensor:
        from volforce.ops import conv_spatial
        if x.ndim != self.n_spatial + 2:
            raise ValueError(f"expected {self.n_spatial} spatial axes, got input {x.shape}")
        return conv_spatial(x, self.weights[name], stride=1)


def unroll(cell, x_seq: Tensor, h0=None, return_sequence: bool = False,
           training: bool = False):
    """Run a cell over [b, p, ...] input; gradients flow through all steps.

    Returns the last hidden state, or the stacked per-step hidden states
    when ``return_sequence`` is set.  LSTM cell states are threaded
    internally and not returned.
    """
    p = x_seq.shape[1]
    if p < 1:
        raise ValueError("sequence length must be >= 1")
    x0 = x_seq[:, 0]
    state = cell.initial_state(x0) if h0 is None else h0
    outputs = []
    for t in range(p):
        x_t = x_seq[:, t] if t > 0 else x0
        state = cell.step(x_t, state, t, training)
        if return_sequence:
            outputs.append(state[0] if isinstance(state, tuple) else state)
    if return_sequence:
        return T.stack(outputs, axis=1)
    return state[0] if isinstance(state, tuple) else state
