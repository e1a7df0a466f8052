"""Dynamic virtual graph construction and spectral-style graph convolution.

The virtual Laplacian L_v is generated from data instead of road topology:
a learned long-term trend term P_h P_h^T + P_b is combined with a
data-dependent connectivity term -X log(1 + X^T), squashed through a leaky
rectifier and scaled. Graph mixing then uses a Chebyshev polynomial of L_v.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, matmul, pointwise_conv


@dataclass
class DvglParams:
    """Learned trend matrices plus the scale/slope hyperparameters of the
    virtual Laplacian."""
    p_h: Tensor
    p_b: Tensor
    theta: float = 0.5
    activation_slope: float = 0.01

    def __post_init__(self):
        if self.theta <= 0:
            raise ValueError(f"theta must be positive, got {self.theta}")

    @classmethod
    def init(cls, n_nodes: int, rng: np.random.Generator,
             theta: float = 0.5, activation_slope: float = 0.01) -> "DvglParams":
        bound = 1.0 / np.sqrt(n_nodes)
        return cls(
            p_h=Tensor(rng.uniform(-bound, bound, size=(n_nodes, n_nodes)),
                       requires_grad=True),
            p_b=Tensor(rng.uniform(-bound, bound, size=(n_nodes, n_nodes)),
                       requires_grad=True),
            theta=theta,
            activation_slope=activation_slope,
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.p_h": self.p_h, f"{prefix}.p_b": self.p_b}


def trend_matrix(params: DvglParams) -> Tensor:
    """L_t = P_h P_h^T + P_b. The product term is symmetric positive
    semidefinite by construction; P_b carries the asymmetric remainder."""
    return matmul(params.p_h, params.p_h.T) + params.p_b


def connectivity_matrix(x_summary: Tensor) -> Tensor:
    """L_c = -X log(1 + X^T) for a nonnegative (N, T) traffic summary.

    Negative entries (which the sigmoid-activated summary never produces)
    are clamped to zero first; with x >= 0 both factors are nonnegative, so
    every entry of L_c is <= 0.
    """
    xc = x_summary.clamp_min(0.0)
    return -matmul(xc, xc.T.log1p())


def virtual_laplacian(l_t: Tensor, l_c: Tensor, theta: float = 0.5,
                      slope: float = 0.01) -> Tensor:
    """L_v = theta * leaky_rectifier(L_t + L_c)."""
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    return (l_t + l_c).leaky_relu(slope) * theta


def laplacian_update(l_v: Tensor, mode: str = "scalar_mean") -> Tensor:
    """Inter-block refresh: Mean(L_v) - L_v L_v^T.

    ``scalar_mean`` (default) broadcasts the grand mean of all entries;
    ``row_mean`` keeps one mean per row.
    """
    if mode == "scalar_mean":
        m = l_v.mean()
    elif mode == "row_mean":
        m = l_v.mean(axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown laplacian update mode: {mode!r}")
    return m - matmul(l_v, l_v.T)


@dataclass
class ChebyParams:
    """One (C_in, C_out) mixing matrix per Chebyshev order."""
    coeffs: list[Tensor] = field(default_factory=list)

    @classmethod
    def init(cls, order: int, c_in: int, c_out: int,
             rng: np.random.Generator) -> "ChebyParams":
        if order < 1:
            raise ValueError(f"Chebyshev order must be >= 1, got {order}")
        bound = 1.0 / np.sqrt(c_in * order)
        return cls([Tensor(rng.uniform(-bound, bound, size=(c_in, c_out)),
                           requires_grad=True) for _ in range(order)])

    @property
    def order(self) -> int:
        return len(self.coeffs)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.theta{k}": c for k, c in enumerate(self.coeffs)}


def rescale_laplacian(l_v: Tensor, mode: str = "rowsum") -> Tensor:
    """Bound the polynomial argument.

    ``rowsum`` divides by the max absolute row sum plus 1e-6 (differentiable
    infinity-norm bound on the spectral radius); ``none`` passes L_v through.
    """
    if mode == "rowsum":
        scale = l_v.abs().sum(axis=1).max() + 1e-6
        return l_v / scale
    if mode == "none":
        return l_v
    raise ValueError(f"unknown laplacian rescale mode: {mode!r}")


def _graph_apply(l_mat: Tensor, x: Tensor) -> Tensor:
    # out[b,c,i,t] = sum_j L[i,j] x[b,c,j,t], via transpose to put nodes last
    xt = x.transpose(0, 1, 3, 2)
    yt = matmul(xt, l_mat.T.reshape(1, 1, *l_mat.shape))
    return yt.transpose(0, 1, 3, 2)


def chebyshev_conv(l_v: Tensor, x: Tensor, params: ChebyParams,
                   rescale: str = "rowsum", slope: float = 0.01) -> Tensor:
    """K-order Chebyshev graph convolution with channel mixing.

    Computes leaky_rectifier(sum_k T_k(L~) x Theta_k) where T_0 = I,
    T_1 = L~, T_k = 2 L~ T_{k-1} - T_{k-2}, applied to (B, C_in, N, T)
    signals. ``x`` must carry as many nodes as L_v.
    """
    if x.ndim != 4:
        raise ValueError(f"expected (B, C, N, T) signal, got shape {x.shape}")
    if x.shape[2] != l_v.shape[0] or l_v.shape[0] != l_v.shape[1]:
        raise ValueError(
            f"node mismatch: laplacian {l_v.shape} vs signal {x.shape}")

    l_hat = rescale_laplacian(l_v, rescale)
    t_prev, t_curr = None, x                    # T_0 x = x
    acc = pointwise_conv(t_curr, params.coeffs[0].T)
    for k in range(1, params.order):
        if k == 1:
            t_next = _graph_apply(l_hat, x)     # T_1 x = L~ x
        else:
            t_next = _graph_apply(l_hat, t_curr) * 2.0 - t_prev
        acc = acc + pointwise_conv(t_next, params.coeffs[k].T)
        t_prev, t_curr = t_curr, t_next
    return acc.leaky_relu(slope)
