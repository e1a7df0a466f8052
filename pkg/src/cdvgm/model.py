"""End-to-end CDVGM forecaster assembly.

Forward path: feature transformation, virtual Laplacian construction,
a stack of combined spatio-temporal (CST) blocks with the inter-block
Laplacian refresh, and the two-branch fusion layer with a TCN or
convolutional prediction head.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import graph as gr
from . import temporal as tp
from .seeding import stream
from .tensor import (BatchNormState, Tensor, layer_norm, matmul,
                     pointwise_conv)

_HEAD_MODES = ("tcn", "conv")
_UPDATE_MODES = ("scalar_mean", "row_mean")
_FUSION_MODES = ("half_time", "full_copy")
_RESCALE_MODES = ("rowsum", "none")
_SUMMARY_MODES = ("first", "batch_mean")

# Paper protocol values; configs that deviate still run but are flagged.
_PAPER_PROTOCOL = {"t_in": 12, "t_out": 12, "cheby_k": 4}

CHECKPOINT_MAGIC = b"CDVGCKPT"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters. Defaults follow the published protocol
    where one is given (12-step horizon, Chebyshev order 4) and documented
    choices elsewhere (3 blocks, 64 channels, TCN head)."""

    n_nodes: int
    n_features: int
    t_in: int = 12
    t_out: int = 12
    n_blocks: int = 3
    channels: int = 64
    cheby_k: int = 4
    theta: float = 0.5
    leaky_slope: float = 0.01
    head_mode: str = "tcn"
    ts_enabled: bool = True
    tcn_enabled: bool = True
    laplacian_update_mode: str = "scalar_mean"
    fusion_split: str = "half_time"
    cheby_rescale: str = "rowsum"
    laplacian_summary: str = "first"
    tcn_layers: int = 2
    tcn_kernel: int = 3

    def __post_init__(self):
        if self.n_nodes < 1 or self.n_features < 1:
            raise ValueError("n_nodes and n_features must be >= 1")
        if self.n_blocks < 1:
            raise ValueError(f"n_blocks must be >= 1, got {self.n_blocks}")
        if self.cheby_k < 1:
            raise ValueError(f"cheby_k must be >= 1, got {self.cheby_k}")
        if self.channels < 1:
            raise ValueError(f"channels must be >= 1, got {self.channels}")
        if self.theta <= 0:
            raise ValueError(f"theta must be positive, got {self.theta}")
        if self.t_out < 1:
            raise ValueError(f"t_out must be >= 1, got {self.t_out}")
        if self.ts_enabled and self.t_in < 3:
            raise ValueError("t_in must be >= 3 when ts_enabled")
        if self.t_in < 1:
            raise ValueError(f"t_in must be >= 1, got {self.t_in}")
        if self.head_mode not in _HEAD_MODES:
            raise ValueError(f"head_mode must be one of {_HEAD_MODES}")
        if self.laplacian_update_mode not in _UPDATE_MODES:
            raise ValueError(
                f"laplacian_update_mode must be one of {_UPDATE_MODES}")
        if self.fusion_split not in _FUSION_MODES:
            raise ValueError(f"fusion_split must be one of {_FUSION_MODES}")
        if self.cheby_rescale not in _RESCALE_MODES:
            raise ValueError(f"cheby_rescale must be one of {_RESCALE_MODES}")
        if self.laplacian_summary not in _SUMMARY_MODES:
            raise ValueError(
                f"laplacian_summary must be one of {_SUMMARY_MODES}")
        if self.fusion_split == "half_time" and self.t_in % 2 != 0:
            raise ValueError(
                f"fusion_split=half_time needs an even t_in, got {self.t_in}")
        if self.tcn_layers < 1 or self.tcn_kernel < 1:
            raise ValueError("tcn_layers and tcn_kernel must be >= 1")

    @property
    def head_is_tcn(self) -> bool:
        return self.head_mode == "tcn" and self.tcn_enabled

    @property
    def fusion_time(self) -> int:
        """Time length entering the prediction head."""
        return self.t_in // 2 if self.fusion_split == "half_time" else self.t_in

    def non_paper_fields(self) -> list[str]:
        return [f"{k}={getattr(self, k)}" for k, v in _PAPER_PROTOCOL.items()
                if getattr(self, k) != v]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TransformParams:
    """Eq-style feature fusion: one projection to the hidden width for the
    block stack and one to a single channel for the Laplacian summary."""
    hidden_w: Tensor
    hidden_b: Tensor
    summary_w: Tensor
    summary_b: Tensor

    @classmethod
    def init(cls, n_features: int, channels: int,
             rng: np.random.Generator) -> "TransformParams":
        bound = 1.0 / np.sqrt(n_features)
        return cls(
            hidden_w=Tensor(rng.uniform(-bound, bound,
                                        size=(channels, n_features)),
                            requires_grad=True),
            hidden_b=Tensor(np.zeros(channels), requires_grad=True),
            summary_w=Tensor(rng.uniform(-bound, bound, size=(1, n_features)),
                             requires_grad=True),
            summary_b=Tensor(np.zeros(1), requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.hidden_w": self.hidden_w,
                f"{prefix}.hidden_b": self.hidden_b,
                f"{prefix}.summary_w": self.summary_w,
                f"{prefix}.summary_b": self.summary_b}


def feature_transform(x_input: Tensor, p: TransformParams,
                      summary_mode: str = "first") -> tuple[Tensor, Tensor]:
    """Sigmoid-activated channel projections of the raw input.

    Returns the (B, C, N, T) hidden representation for the block stack and
    the (N, T) single-channel summary consumed by the connectivity matrix.
    ``summary_mode`` picks the summary's batch reduction: the first element
    of the batch (default, per-step dynamics) or the batch mean.
    """
    if x_input.ndim != 4 or x_input.shape[1] != p.hidden_w.shape[1]:
        raise ValueError(
            f"expected (B, F={p.hidden_w.shape[1]}, N, T) input, "
            f"got shape {x_input.shape}")
    hidden = pointwise_conv(x_input, p.hidden_w, p.hidden_b).sigmoid()
    summary = pointwise_conv(x_input, p.summary_w, p.summary_b).sigmoid()
    if summary_mode == "batch_mean":
        summary = summary.mean(axis=0)
    else:
        summary = summary[0]
    return hidden, summary.reshape(x_input.shape[2], x_input.shape[3])


@dataclass
class CstBlockParams:
    """Weights of one combined spatio-temporal block."""
    cheby: gr.ChebyParams
    lt2s: tp.Lt2sParams | None
    attention: tp.AttentionParams
    agg_w: Tensor
    agg_b: Tensor
    norm_gamma: Tensor
    norm_beta: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "CstBlockParams":
        c = cfg.channels
        bound = 1.0 / np.sqrt(c)
        return cls(
            cheby=gr.ChebyParams.init(cfg.cheby_k, c, c, rng),
            lt2s=tp.Lt2sParams.init(c, rng) if cfg.ts_enabled else None,
            attention=tp.AttentionParams.init(c, cfg.n_nodes, cfg.t_in, rng),
            agg_w=Tensor(rng.uniform(-bound, bound, size=(c, c)),
                         requires_grad=True),
            agg_b=Tensor(np.zeros(c), requires_grad=True),
            norm_gamma=Tensor(np.ones((c, 1, 1)), requires_grad=True),
            norm_beta=Tensor(np.zeros((c, 1, 1)), requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = dict(self.cheby.named(f"{prefix}.cheby"))
        if self.lt2s is not None:
            out.update(self.lt2s.named(f"{prefix}.lt2s"))
        out.update(self.attention.named(f"{prefix}.attn"))
        out[f"{prefix}.agg_w"] = self.agg_w
        out[f"{prefix}.agg_b"] = self.agg_b
        out[f"{prefix}.norm_gamma"] = self.norm_gamma
        out[f"{prefix}.norm_beta"] = self.norm_beta
        return out


def cst_block(x_in: Tensor, l_v: Tensor, p: CstBlockParams, cfg: ModelConfig,
              training: bool = False) -> Tensor:
    """One binary-path block: Chebyshev spatial mixing on one path,
    (optional) LT²S plus time attention on the other, aggregation conv,
    residual add, channel layer norm."""
    x_high = x_low = x_in
    x_s = gr.chebyshev_conv(l_v, x_high, p.cheby,
                            rescale=cfg.cheby_rescale, slope=cfg.leaky_slope)
    x_t = tp.lt2s(x_low, p.lt2s, cfg.leaky_slope) if p.lt2s is not None else x_low
    a_x = tp.temporal_attention(x_t, p.attention, training)
    x_st = pointwise_conv(tp.apply_attention(a_x, x_s), p.agg_w, p.agg_b)
    return layer_norm(x_high + x_st, p.norm_gamma, p.norm_beta, norm_axes=(1,))


@dataclass
class FusionParams:
    """Two half-specific projections, the prediction head, and the output
    maps that collapse channels and stretch time to the horizon."""
    head_w: Tensor
    head_b: Tensor
    tail_w: Tensor
    tail_b: Tensor
    tcn: tp.TcnParams | None
    conv_w: Tensor | None
    conv_b: Tensor | None
    collapse_w: Tensor
    collapse_b: Tensor
    time_w: Tensor
    time_b: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, rng: np.random.Generator) -> "FusionParams":
        c = cfg.channels
        bound = 1.0 / np.sqrt(c)

        def pw():
            return (Tensor(rng.uniform(-bound, bound, size=(c, c)),
                           requires_grad=True),
                    Tensor(np.zeros(c), requires_grad=True))

        head_w, head_b = pw()
        tail_w, tail_b = pw()
        if cfg.head_is_tcn:
            tcn = tp.TcnParams.init(c, cfg.tcn_layers, cfg.tcn_kernel, rng)
            conv_w = conv_b = None
        else:
            tcn = None
            conv_w, conv_b = pw()
        t_fuse = cfg.fusion_time
        return cls(
            head_w=head_w, head_b=head_b, tail_w=tail_w, tail_b=tail_b,
            tcn=tcn, conv_w=conv_w, conv_b=conv_b,
            collapse_w=Tensor(rng.uniform(-bound, bound, size=(1, c)),
                              requires_grad=True),
            collapse_b=Tensor(np.zeros(1), requires_grad=True),
            time_w=Tensor(rng.uniform(-1.0 / np.sqrt(t_fuse),
                                      1.0 / np.sqrt(t_fuse),
                                      size=(t_fuse, cfg.t_out)),
                          requires_grad=True),
            time_b=Tensor(np.zeros(cfg.t_out), requires_grad=True),
        )

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.head_w": self.head_w, f"{prefix}.head_b": self.head_b,
               f"{prefix}.tail_w": self.tail_w, f"{prefix}.tail_b": self.tail_b}
        if self.tcn is not None:
            out.update(self.tcn.named(f"{prefix}.tcn"))
        if self.conv_w is not None:
            out[f"{prefix}.conv_w"] = self.conv_w
            out[f"{prefix}.conv_b"] = self.conv_b
        out[f"{prefix}.collapse_w"] = self.collapse_w
        out[f"{prefix}.collapse_b"] = self.collapse_b
        out[f"{prefix}.time_w"] = self.time_w
        out[f"{prefix}.time_b"] = self.time_b
        return out


def fusion_layer(x_st: Tensor, p: FusionParams, cfg: ModelConfig) -> Tensor:
    """Split the time axis (or duplicate it in full_copy mode), project each
    branch, sum, run the prediction head, then collapse channels to one and
    map the remaining time axis to the forecasting horizon."""
    t_len = x_st.shape[3]
    if cfg.fusion_split == "half_time":
        if t_len % 2 != 0:
            raise ValueError(f"half_time fusion needs even T, got {t_len}")
        half = t_len // 2
        head_in = x_st[:, :, :, :half]
        tail_in = x_st[:, :, :, half:]
    else:
        head_in = tail_in = x_st
    merged = (pointwise_conv(head_in, p.head_w, p.head_b)
              + pointwise_conv(tail_in, p.tail_w, p.tail_b))
    if p.tcn is not None:
        merged = tp.tcn_forward(merged, p.tcn, cfg.leaky_slope)
    else:
        merged = pointwise_conv(merged, p.conv_w, p.conv_b)
    flat = pointwise_conv(merged, p.collapse_w, p.collapse_b)
    flat = flat.reshape(flat.shape[0], flat.shape[2], flat.shape[3])
    return matmul(flat, p.time_w) + p.time_b


class CdvgmModel:
    """The assembled forecaster: owns parameters, batch-norm buffers, and
    the forward map from (B, F, N, T) windows to (B, N, T') predictions."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = int(seed)
        rng = stream(self.seed, "init")
        self.transform = TransformParams.init(config.n_features,
                                              config.channels, rng)
        self.dvgl = gr.DvglParams.init(config.n_nodes, rng,
                                       theta=config.theta,
                                       activation_slope=config.leaky_slope)
        self.blocks = [CstBlockParams.init(config, rng)
                       for _ in range(config.n_blocks)]
        self.fusion = FusionParams.init(config, rng)

    # -- parameter registry ----------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        """Insertion-ordered name -> Tensor map; the order is the canonical
        parameter order for optimizers and checkpoints."""
        out = dict(self.transform.named("transform"))
        out.update(self.dvgl.named("dvgl"))
        for i, block in enumerate(self.blocks):
            out.update(block.named(f"block{i}"))
        out.update(self.fusion.named("fusion"))
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for i, block in enumerate(self.blocks):
            out[f"block{i}.attn.bn.mean"] = block.attention.bn.running_mean
            out[f"block{i}.attn.bn.var"] = block.attention.bn.running_var
        return out

    def n_parameters(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def zero_grad(self) -> None:
        for t in self.parameters().values():
            t.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(
                f"parameter set mismatch: missing {sorted(missing)}, "
                f"unexpected {sorted(extra)}")
        for name, t in params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != t.data.shape:
                raise ValueError(
                    f"shape mismatch for {name}: checkpoint {value.shape} "
                    f"vs model {t.data.shape}")
            t.data = value.copy()

    # -- forward ----------------------------------------------------------------

    def _validate_input(self, x: Tensor) -> None:
        cfg = self.config
        if x.ndim != 4:
            raise ValueError(f"expected 4-D (B, F, N, T) input, got {x.shape}")
        b, f, n, t = x.shape
        if (f, n, t) != (cfg.n_features, cfg.n_nodes, cfg.t_in):
            raise ValueError(
                f"input shape {x.shape} does not match config "
                f"(F={cfg.n_features}, N={cfg.n_nodes}, T={cfg.t_in})")

    def block_laplacians(self, x: Tensor) -> list[np.ndarray]:
        """The L_v actually seen by each block, for export and audit."""
        _, laps = self.forward(x, training=False, collect_laplacians=True)
        return laps

    def forward(self, x: Tensor, training: bool = False,
                collect_laplacians: bool = False):
        self._validate_input(x)
        cfg = self.config
        hidden, summary = feature_transform(x, self.transform,
                                            cfg.laplacian_summary)
        l_v = gr.virtual_laplacian(gr.trend_matrix(self.dvgl),
                                   gr.connectivity_matrix(summary),
                                   theta=cfg.theta, slope=cfg.leaky_slope)
        laplacians = []
        h = hidden
        for i, block in enumerate(self.blocks):
            if collect_laplacians:
                laplacians.append(l_v.data.copy())
            h = cst_block(h, l_v, block, cfg, training)
            if i + 1 < len(self.blocks):
                l_v = gr.laplacian_update(l_v, cfg.laplacian_update_mode)
        out = fusion_layer(h, self.fusion, cfg)
        if collect_laplacians:
            return out, laplacians
        return out

    # -- checkpoint container -----------------------------------------------------

    def save(self, path, rng_state: dict | None = None) -> None:
        """Write a self-describing binary checkpoint: config header, named
        float64 parameter blobs, batch-norm buffers, optional RNG state."""
        params = {name: t.data for name, t in self.parameters().items()}
        buffers = self.buffers()
        with open(path, "wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(struct.pack("<H", CHECKPOINT_VERSION))
            header = json.dumps({"config": self.config.to_dict(),
                                 "seed": self.seed}).encode("utf-8")
            fh.write(struct.pack("<I", len(header)))
            fh.write(header)
            for group in (params, buffers):
                fh.write(struct.pack("<I", len(group)))
                for name, arr in group.items():
                    encoded = name.encode("utf-8")
                    fh.write(struct.pack("<H", len(encoded)))
                    fh.write(encoded)
                    fh.write(struct.pack("<B", arr.ndim))
                    for dim in arr.shape:
                        fh.write(struct.pack("<I", dim))
                    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            state = json.dumps(rng_state or {}).encode("utf-8")
            fh.write(struct.pack("<I", len(state)))
            fh.write(state)

    @classmethod
    def load(cls, path) -> tuple["CdvgmModel", dict]:
        """Rebuild a model from a checkpoint; returns (model, rng_state).
        Rejects wrong magic/version and any parameter set or shape drift."""
        with open(path, "rb") as fh:
            blob = fh.read()
        if blob[:8] != CHECKPOINT_MAGIC:
            raise ValueError(
                f"not a checkpoint file: magic {blob[:8]!r} != "
                f"{CHECKPOINT_MAGIC!r}")
        off = 8
        (version,) = struct.unpack_from("<H", blob, off)
        off += 2
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack_from("<I", blob, off)
        off += 4
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
        off += hlen

        def read_group(off):
            (count,) = struct.unpack_from("<I", blob, off)
            off += 4
            group = {}
            for _ in range(count):
                (nlen,) = struct.unpack_from("<H", blob, off)
                off += 2
                name = blob[off:off + nlen].decode("utf-8")
                off += nlen
                (ndim,) = struct.unpack_from("<B", blob, off)
                off += 1
                shape = []
                for _ in range(ndim):
                    (dim,) = struct.unpack_from("<I", blob, off)
                    off += 4
                    shape.append(dim)
                nbytes = int(np.prod(shape)) * 8 if shape else 8
                arr = np.frombuffer(blob[off:off + nbytes],
                                    dtype="<f8").reshape(shape)
                off += nbytes
                group[name] = arr.astype(np.float64)
            return group, off

        params, off = read_group(off)
        buffers, off = read_group(off)
        (slen,) = struct.unpack_from("<I", blob, off)
        off += 4
        rng_state = json.loads(blob[off:off + slen].decode("utf-8"))

        config = ModelConfig.from_dict(header["config"])
        model = cls(config, seed=header.get("seed", 0))
        model.load_state_arrays(params)
        model_buffers = model.buffers()
        if set(buffers) != set(model_buffers):
            raise ValueError("checkpoint batch-norm buffer set mismatch")
        for i, block in enumerate(model.blocks):
            block.attention.bn.running_mean = buffers[
                f"block{i}.attn.bn.mean"].copy()
            block.attention.bn.running_var = buffers[
                f"block{i}.attn.bn.var"].copy()
        return model, rng_state
