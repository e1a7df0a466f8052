"""Temporal operators: LT²S sequence strengthening, self-attention over the
time axis, and the causal dilated convolution stack used as the TCN head.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import (BatchNormState, Tensor, batch_norm, concat, matmul,
                     pointwise_conv, softmax, temporal_conv)


@dataclass
class Lt2sParams:
    """Interior convolution of the LT²S reshaping; kernel width is fixed at
    3 so the two endpoint slices restore the original sequence length."""
    conv_w: Tensor
    conv_b: Tensor

    def __post_init__(self):
        if self.conv_w.shape[2] != 3:
            raise ValueError(
                f"LT2S kernel width must be 3, got {self.conv_w.shape[2]}")

    @classmethod
    def init(cls, channels: int, rng: np.random.Generator) -> "Lt2sParams":
        bound = 1.0 / np.sqrt(channels * 3)
        return cls(
            conv_w=Tensor(rng.uniform(-bound, bound,
                                      size=(channels, channels, 3)),
                          requires_grad=True),
            conv_b=Tensor(np.zeros(channels), requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.conv_w": self.conv_w, f"{prefix}.conv_b": self.conv_b}


def lt2s(x_low: Tensor, p: Lt2sParams, slope: float = 0.01) -> Tensor:
    """Long-term temporal strengthen.

    The interior of the sequence is replaced by an activated unpadded
    width-3 convolution (length T-2); the original first and last time
    slices are concatenated back so the output length is exactly T.
    """
    t_len = x_low.shape[3]
    if t_len < 3:
        raise ValueError(f"lt2s needs T >= 3, got T={t_len}")
    interior = temporal_conv(x_low, p.conv_w, p.conv_b, causal=False)
    interior = interior.leaky_relu(slope)
    return concat([x_low[:, :, :, 0:1], interior,
                   x_low[:, :, :, t_len - 1:t_len]], axis=3)


@dataclass
class AttentionParams:
    """Time-axis self-attention weights.

    v_p and b_p are (T, T); w_p is (N, C) and folds the node/feature axes
    away; tau1/tau2 are width-1 temporal convolutions (channel projections).
    The score batch norm keeps running moments so evaluation of a single
    window stays deterministic.
    """
    v_p: Tensor
    w_p: Tensor
    b_p: Tensor
    tau1_w: Tensor
    tau1_b: Tensor
    tau2_w: Tensor
    tau2_b: Tensor
    bn: BatchNormState

    @classmethod
    def init(cls, channels: int, n_nodes: int, t_len: int,
             rng: np.random.Generator) -> "AttentionParams":
        def uniform(*shape):
            bound = 1.0 / np.sqrt(shape[-1])
            return Tensor(rng.uniform(-bound, bound, size=shape),
                          requires_grad=True)

        return cls(
            v_p=uniform(t_len, t_len),
            w_p=uniform(n_nodes, channels),
            b_p=Tensor(np.zeros((t_len, t_len)), requires_grad=True),
            tau1_w=uniform(channels, channels),
            tau1_b=Tensor(np.zeros(channels), requires_grad=True),
            tau2_w=uniform(1, channels),
            tau2_b=Tensor(np.zeros(1), requires_grad=True),
            bn=BatchNormState((t_len, t_len)),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.v_p": self.v_p,
            f"{prefix}.w_p": self.w_p,
            f"{prefix}.b_p": self.b_p,
            f"{prefix}.tau1_w": self.tau1_w,
            f"{prefix}.tau1_b": self.tau1_b,
            f"{prefix}.tau2_w": self.tau2_w,
            f"{prefix}.tau2_b": self.tau2_b,
        }


def temporal_attention(x_t: Tensor, p: AttentionParams,
                       training: bool = False) -> Tensor:
    """Row-stochastic (B, T, T) attention map over the time axis.

    Logits: V_p . sigmoid(((x * tau1) W_p)(x * tau2) + b_p). The tau1 branch
    is reduced over channels by W_p into (B, T, N); the tau2 branch keeps a
    single channel as (B, N, T); their product contracts the node axis into
    (B, T, T). Scores go through batch norm then a time-axis softmax.
    """
    t_len = x_t.shape[3]
    if t_len != p.v_p.shape[0]:
        raise ValueError(
            f"sequence length {t_len} does not match attention side "
            f"{p.v_p.shape[0]}")
    if x_t.shape[2] != p.w_p.shape[0]:
        raise ValueError(
            f"node count {x_t.shape[2]} does not match W_p side {p.w_p.shape[0]}")

    a = pointwise_conv(x_t, p.tau1_w, p.tau1_b)            # (B,C,N,T)
    # reduce channels against W_p[n,c]: lhs[b,t,n] = sum_c a[b,c,n,t] W_p[n,c]
    lhs = (a * p.w_p.T.reshape(1, a.shape[1], a.shape[2], 1)).sum(axis=1)
    lhs = lhs.transpose(0, 2, 1)                           # (B,T,N)
    rhs = pointwise_conv(x_t, p.tau2_w, p.tau2_b)          # (B,1,N,T)
    rhs = rhs.reshape(rhs.shape[0], rhs.shape[2], rhs.shape[3])
    score = matmul(lhs, rhs) + p.b_p                       # (B,T,T)
    logits = matmul(p.v_p.reshape(1, t_len, t_len), score.sigmoid())
    return softmax(batch_norm(logits, p.bn, training), axis=-1)


def apply_attention(e: Tensor, x_s: Tensor) -> Tensor:
    """Contract the time axis of x_s against the attention map:
    out[b,c,n,t] = sum_t' e[b,t,t'] x_s[b,c,n,t']."""
    if e.shape[1] != x_s.shape[3]:
        raise ValueError(
            f"attention side {e.shape[1]} does not match time axis "
            f"{x_s.shape[3]}")
    et = e.transpose(0, 2, 1).reshape(e.shape[0], 1, e.shape[2], e.shape[1])
    return matmul(x_s, et)


@dataclass
class TcnParams:
    """Causal dilated convolution stack; dilations must double layer by
    layer so the receptive field grows geometrically."""
    layers: list[tuple[Tensor, Tensor, int]] = field(default_factory=list)

    def __post_init__(self):
        for i, (_, _, dilation) in enumerate(self.layers):
            if dilation != 2 ** i:
                raise ValueError(
                    f"layer {i} dilation must be {2 ** i}, got {dilation}")

    @classmethod
    def init(cls, channels: int, n_layers: int, kernel: int,
             rng: np.random.Generator) -> "TcnParams":
        layers = []
        for i in range(n_layers):
            bound = 1.0 / np.sqrt(channels * kernel)
            w = Tensor(rng.uniform(-bound, bound,
                                   size=(channels, channels, kernel)),
                       requires_grad=True)
            b = Tensor(np.zeros(channels), requires_grad=True)
            layers.append((w, b, 2 ** i))
        return cls(layers)

    @property
    def receptive_field(self) -> int:
        return 1 + sum(d * (w.shape[2] - 1) for w, _, d in self.layers)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, (w, b, _) in enumerate(self.layers):
            out[f"{prefix}.l{i}_w"] = w
            out[f"{prefix}.l{i}_b"] = b
        return out


def tcn_forward(x: Tensor, p: TcnParams, slope: float = 0.01) -> Tensor:
    """Stack of causal dilated temporal convolutions with leaky activations;
    a residual add follows each layer whose channel width is unchanged."""
    h = x
    for w, b, dilation in p.layers:
        y = temporal_conv(h, w, b, dilation=dilation, causal=True)
        y = y.leaky_relu(slope)
        h = y + h if w.shape[0] == w.shape[1] else y
    return h
