"""Shared encoder: CNN front end with 1/4 time downsampling, then a BiLSTM
stack. Its output feeds both decoder branches.

The CNN stage applies `cnn_layers` 1-d convolutions over time (kernel 3,
same padding, tanh) with a width-2 max-pool after layers 1 and 2 - exactly
two pooling stages, so T frames become ceil(ceil(T/2)/2) regardless of depth.

LSTM cell (gate order i, f, g, o):
    A  = x Wx + h Wh + b
    c' = sigmoid(A_f) * c + sigmoid(A_i) * tanh(A_g)
    h' = sigmoid(A_o) * tanh(c')

Parameters initialize uniform(-0.08, 0.08) from the seeded generator, with
+1.0 added to the forget-gate bias.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .rng import Pcg32

INIT_SCALE = 0.08


@dataclass
class EncoderConfig:
    cnn_layers: int = 2
    cnn_channels: int = 32
    bilstm_layers: int = 2
    cells_per_direction: int = 64
    input_dim: int = 80

    def __post_init__(self):
        if self.bilstm_layers < 1:
            raise ValueError("bilstm_layers must be >= 1")
        if self.cnn_layers < 2:
            raise ValueError("cnn_layers must be >= 2 (pooling sits after layers 1 and 2)")

    @property
    def output_dim(self) -> int:
        return 2 * self.cells_per_direction


def downsampled_length(t: int) -> int:
    return (((t + 1) // 2) + 1) // 2


def uniform_tensor(rng: Pcg32, shape, scale: float = INIT_SCALE) -> Tensor:
    n = int(np.prod(shape))
    data = np.array([rng.uniform(-scale, scale) for _ in range(n)]).reshape(shape)
    return Tensor(data, requires_grad=True)


def init_lstm_block(rng: Pcg32, din: int, h: int, prefix: str) -> dict[str, Tensor]:
    b = uniform_tensor(rng, (4 * h,))
    b.data[h:2 * h] += 1.0  # forget-gate bias
    return {f"{prefix}/wx": uniform_tensor(rng, (din, 4 * h)),
            f"{prefix}/wh": uniform_tensor(rng, (h, 4 * h)),
            f"{prefix}/b": b}


def init_encoder_params(config: EncoderConfig, rng: Pcg32) -> dict[str, Tensor]:
    params: dict[str, Tensor] = {}
    cin = config.input_dim
    for l in range(config.cnn_layers):
        params[f"enc/cnn{l}/w"] = uniform_tensor(rng, (3, cin, config.cnn_channels))
        params[f"enc/cnn{l}/b"] = uniform_tensor(rng, (config.cnn_channels,))
        cin = config.cnn_channels
    din = config.cnn_channels
    h = config.cells_per_direction
    for l in range(config.bilstm_layers):
        for d in ("f", "b"):
            params.update(init_lstm_block(rng, din, h, f"enc/rnn{l}/{d}"))
        din = 2 * h
    return params


def lstm_cell_step(x: Tensor, state: tuple[Tensor, Tensor], wx: Tensor,
                   wh: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """One LSTM step; x is (1, Din), state is ((1, H), (1, H))."""
    h_prev, c_prev = state
    pre = nm.add(nm.add(nm.matmul(x, wx), nm.matmul(h_prev, wh)), b)
    return _gate_step(pre, c_prev)


def _gate_step(pre: Tensor, c_prev: Tensor) -> tuple[Tensor, Tensor]:
    hsize = c_prev.shape[1]
    i = nm.sigmoid(nm.narrow(pre, 1, 0, hsize))
    f = nm.sigmoid(nm.narrow(pre, 1, hsize, hsize))
    g = nm.tanh(nm.narrow(pre, 1, 2 * hsize, hsize))
    o = nm.sigmoid(nm.narrow(pre, 1, 3 * hsize, hsize))
    c = nm.add(nm.mul(f, c_prev), nm.mul(i, g))
    h = nm.mul(o, nm.tanh(c))
    return h, c


def lstm_run(xs: Tensor, wx: Tensor, wh: Tensor, b: Tensor,
             reverse: bool = False) -> list[Tensor]:
    """Run an LSTM over a whole (T, Din) sequence from a zero state.

    The input projection for all steps is one matmul; each step then only
    touches the recurrent path. Returns the T hidden rows in input order."""
    t_len = xs.shape[0]
    hsize = wh.shape[0]
    xproj = nm.add(nm.matmul(xs, wx), b)  # (T, 4H)
    h = Tensor(np.zeros((1, hsize)))
    c = Tensor(np.zeros((1, hsize)))
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    out: list[Tensor | None] = [None] * t_len
    for t in order:
        pre = nm.add(nm.narrow(xproj, 0, t, 1), nm.matmul(h, wh))
        h, c = _gate_step(pre, c)
        out[t] = h
    return out  # type: ignore[return-value]


def bilstm_layer(xs: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    """(T, Din) -> (T, 2H): forward and backward passes concatenated per frame."""
    fwd = lstm_run(xs, params[f"{prefix}/f/wx"], params[f"{prefix}/f/wh"],
                   params[f"{prefix}/f/b"])
    bwd = lstm_run(xs, params[f"{prefix}/b/wx"], params[f"{prefix}/b/wh"],
                   params[f"{prefix}/b/b"], reverse=True)
    return nm.concat([nm.concat(fwd, axis=0), nm.concat(bwd, axis=0)], axis=1)


def encode(features: np.ndarray, params: dict[str, Tensor],
           config: EncoderConfig) -> Tensor:
    """Features (T, input_dim) -> encoded (T', 2*cells_per_direction)."""
    if features.ndim != 2 or features.shape[1] != config.input_dim:
        raise nm.ShapeError(
            f"encode: features of shape {features.shape}, expected (T, {config.input_dim})")
    if features.shape[0] < 1:
        raise ValueError("encode: empty feature sequence")
    x = Tensor(features)
    for l in range(config.cnn_layers):
        w = params[f"enc/cnn{l}/w"]
        if w.shape[1] != x.shape[1]:
            raise nm.ShapeError(
                f"encode: enc/cnn{l}/w expects {w.shape[1]} input channels, "
                f"got {x.shape[1]}")
        x = nm.tanh(nm.add(nm.conv1d_same(x, w), params[f"enc/cnn{l}/b"]))
        if l in (0, 1):
            x = nm.maxpool2_time(x)
    for l in range(config.bilstm_layers):
        x = bilstm_layer(x, params, f"enc/rnn{l}")
    return x
