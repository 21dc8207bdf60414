"""Multi-level geometry bank construction.

A raw layer stack holds per-layer feature grids from a frozen multi-view
geometry encoder, one grid per selected encoder layer, all at the same
patch resolution. Bank construction normalizes each layer independently,
merges non-overlapping 2x2 token blocks (concatenation by default, so no
within-block structure is lost), and projects every layer through one shared
two-layer GELU perceptron into the token hidden space. The result is a bank
of aligned evidence grids with a quarter of the tokens and the model width.

The batched `_forward` / `_backward` pair below is what training and the
gradient suite use; `build_bank` is the single-stack entry point built on it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backends import kernels
from .errors import ConfigError, DimensionError, NumericError

SELECTION_STRATEGIES = ("first_half", "uniform", "latter_half", "explicit")
MERGE_MODES = ("concat", "mean")


@dataclass
class RawLayerStack:
    """Pre-alignment per-layer features on a patch grid.

    ``features`` has shape (num_layers, num_frames * grid_h * grid_w, d_geo),
    frame-major then row-major tokens. Non-patch tokens (camera, register)
    are assumed to be stripped at ingestion. Grid sides must be even so the
    2x2 merge is defined.
    """

    layer_indices: tuple[int, ...]
    num_frames: int
    grid_h: int
    grid_w: int
    features: np.ndarray

    def __post_init__(self):
        self.layer_indices = tuple(int(i) for i in self.layer_indices)
        if any(b <= a for a, b in zip(self.layer_indices, self.layer_indices[1:])):
            raise DimensionError("layer_indices must be strictly increasing")
        if self.num_frames < 1 or self.grid_h < 1 or self.grid_w < 1:
            raise DimensionError("frame count and grid dims must be >= 1")
        if self.grid_h % 2 or self.grid_w % 2:
            raise DimensionError(
                f"grid dims must be even for the 2x2 merge, "
                f"got {self.grid_h}x{self.grid_w}"
            )
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        expect = (
            len(self.layer_indices),
            self.num_frames * self.grid_h * self.grid_w,
            self.features.shape[-1] if self.features.ndim == 3 else -1,
        )
        if self.features.ndim != 3 or self.features.shape != expect:
            raise DimensionError(
                f"features shape {self.features.shape} does not match "
                f"{len(self.layer_indices)} layers x "
                f"{self.num_frames * self.grid_h * self.grid_w} tokens"
            )
        if not np.all(np.isfinite(self.features)):
            raise NumericError("raw layer features contain non-finite entries")

    @property
    def num_layers(self) -> int:
        return len(self.layer_indices)

    @property
    def d_geo(self) -> int:
        return self.features.shape[-1]

    @property
    def tokens_per_frame(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class GeometryBank:
    """Aligned, projected evidence grids at token resolution.

    ``layers`` has shape (num_layers, num_frames * grid_h * grid_w, d_model)
    where grid_h/grid_w are the post-merge sides (half the raw grid).
    """

    layer_indices: tuple[int, ...]
    num_frames: int
    grid_h: int
    grid_w: int
    layers: np.ndarray

    @property
    def num_layers(self) -> int:
        return len(self.layer_indices)

    @property
    def d_model(self) -> int:
        return self.layers.shape[-1]

    @property
    def tokens_per_frame(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def num_tokens(self) -> int:
        return self.layers.shape[1]


@dataclass
class BankParams:
    """Learnable bank parameters: one affine pair per layer plus the shared
    projector (two-layer perceptron, GELU, hidden width = output width)."""

    gamma: np.ndarray  # (num_layers, d_geo)
    beta: np.ndarray  # (num_layers, d_geo)
    w1: np.ndarray  # (merge_dim, d_model)
    b1: np.ndarray  # (d_model,)
    w2: np.ndarray  # (d_model, d_model)
    b2: np.ndarray  # (d_model,)
    eps: float = 1e-5
    merge: str = "concat"


def init_bank_params(
    num_layers: int,
    d_geo: int,
    d_model: int,
    rng: np.random.Generator,
    merge: str = "concat",
    eps: float = 1e-5,
) -> BankParams:
    """Unit-affine layer norms, Glorot-normal projector weights, zero biases."""
    if merge not in MERGE_MODES:
        raise ConfigError(f"merge must be one of {MERGE_MODES}, got {merge!r}")
    din = 4 * d_geo if merge == "concat" else d_geo
    s1 = np.sqrt(2.0 / (din + d_model))
    s2 = np.sqrt(2.0 / (d_model + d_model))
    return BankParams(
        gamma=np.ones((num_layers, d_geo)),
        beta=np.zeros((num_layers, d_geo)),
        w1=rng.normal(0.0, s1, size=(din, d_model)),
        b1=np.zeros(d_model),
        w2=rng.normal(0.0, s2, size=(d_model, d_model)),
        b2=np.zeros(d_model),
        eps=eps,
        merge=merge,
    )


def select_layers(
    num_encoder_layers: int,
    strategy: str,
    bank_size: int,
    explicit: "tuple[int, ...] | None" = None,
) -> tuple[int, ...]:
    """Pick the encoder layers that make up the bank.

    latter_half takes the deepest bank_size layers, first_half the shallowest,
    uniform partitions the encoder into bank_size contiguous blocks and takes
    the last layer of each block (always including the deepest layer).
    """
    if not 1 <= bank_size <= num_encoder_layers:
        raise ConfigError(
            f"bank_size must lie in [1, {num_encoder_layers}], got {bank_size}"
        )
    if strategy == "latter_half":
        return tuple(range(num_encoder_layers - bank_size, num_encoder_layers))
    if strategy == "first_half":
        return tuple(range(bank_size))
    if strategy == "uniform":
        return tuple(
            (j + 1) * num_encoder_layers // bank_size - 1 for j in range(bank_size)
        )
    if strategy == "explicit":
        if explicit is None:
            raise ConfigError("strategy 'explicit' requires an explicit layer list")
        sel = tuple(int(i) for i in explicit)
        if len(sel) != bank_size:
            raise ConfigError(
                f"explicit selection has {len(sel)} layers, expected {bank_size}"
            )
        if any(b <= a for a, b in zip(sel, sel[1:])):
            raise ConfigError("explicit selection must be strictly increasing")
        if sel[0] < 0 or sel[-1] >= num_encoder_layers:
            raise ConfigError(
                f"explicit selection out of range [0, {num_encoder_layers})"
            )
        return sel
    raise ConfigError(
        f"unknown selection strategy {strategy!r}; "
        f"expected one of {SELECTION_STRATEGIES}"
    )


def normalize_layer(z, gamma, beta, eps: float = 1e-5) -> np.ndarray:
    """Layer-norm every token's feature vector of one layer grid."""
    z = np.ascontiguousarray(z, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if z.ndim != 2:
        raise DimensionError("normalize_layer expects a 2-D (tokens, d_geo) grid")
    if gamma.shape != (z.shape[1],) or beta.shape != (z.shape[1],):
        raise DimensionError(
            f"affine length {gamma.shape} does not match grid dim {z.shape[1]}"
        )
    y, _, _ = kernels.layer_norm_fwd(z, gamma, beta, eps)
    return y


def spatial_merge_2x2(
    grid, num_frames: int, grid_h: int, grid_w: int, mode: str = "concat"
) -> np.ndarray:
    """Merge non-overlapping 2x2 token blocks, frame by frame.

    concat keeps the four sub-tokens in row-major block order (TL, TR, BL, BR)
    giving tokens of dim 4*d; mean averages them instead.
    """
    if mode not in MERGE_MODES:
        raise ConfigError(f"merge must be one of {MERGE_MODES}, got {mode!r}")
    grid = np.ascontiguousarray(grid, dtype=np.float64)
    if grid_h % 2 or grid_w % 2:
        raise DimensionError(f"grid dims must be even, got {grid_h}x{grid_w}")
    if grid.ndim != 2 or grid.shape[0] != num_frames * grid_h * grid_w:
        raise DimensionError(
            f"grid has {grid.shape[0]} rows, expected "
            f"{num_frames}*{grid_h}*{grid_w}"
        )
    d = grid.shape[1]
    x = grid.reshape(num_frames, grid_h // 2, 2, grid_w // 2, 2, d)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    out_tokens = num_frames * (grid_h // 2) * (grid_w // 2)
    if mode == "concat":
        return np.ascontiguousarray(x.reshape(out_tokens, 4 * d))
    return np.ascontiguousarray(x.reshape(out_tokens, 4, d).mean(axis=1))


def project_layer(merged, params: BankParams) -> np.ndarray:
    """Apply the shared projector token-wise."""
    merged = np.ascontiguousarray(merged, dtype=np.float64)
    if merged.ndim != 2 or merged.shape[1] != params.w1.shape[0]:
        raise DimensionError(
            f"merged token dim {merged.shape[-1]} does not match projector "
            f"input dim {params.w1.shape[0]}"
        )
    h = merged @ params.w1 + params.b1
    act, _ = kernels.gelu_fwd(h)
    return act @ params.w2 + params.b2


def build_bank(raw: RawLayerStack, params: BankParams) -> GeometryBank:
    """Normalize, merge, and project every layer of a raw stack."""
    if params.gamma.shape != (raw.num_layers, raw.d_geo):
        raise DimensionError(
            f"bank params shaped for {params.gamma.shape}, stack has "
            f"{raw.num_layers} layers of dim {raw.d_geo}"
        )
    din = 4 * raw.d_geo if params.merge == "concat" else raw.d_geo
    if params.w1.shape[0] != din:
        raise DimensionError(
            f"projector input dim {params.w1.shape[0]} does not match merged "
            f"token dim {din}"
        )
    out = []
    for l in range(raw.num_layers):
        z = normalize_layer(raw.features[l], params.gamma[l], params.beta[l], params.eps)
        m = spatial_merge_2x2(z, raw.num_frames, raw.grid_h, raw.grid_w, params.merge)
        out.append(project_layer(m, params))
    return GeometryBank(
        layer_indices=raw.layer_indices,
        num_frames=raw.num_frames,
        grid_h=raw.grid_h // 2,
        grid_w=raw.grid_w // 2,
        layers=np.stack(out, axis=0),
    )


# ---------------------------------------------------------------------------
# Batched fast path used by training and the gradient suite. Layout:
# features (B, L, N_raw, d_geo) -> bank (B, L, T, d_model), T tokens per
# sample after the merge.


@dataclass
class BankCache:
    xhat: np.ndarray  # (L, B, N_raw, d_geo), layer-major for contiguous slices
    inv_std: np.ndarray  # (L, B, N_raw)
    merged: np.ndarray  # (rows, merge_dim) with rows = B*L*T
    h: np.ndarray  # (rows, d_model) pre-activation
    act: np.ndarray  # (rows, d_model)
    cdf: np.ndarray  # (rows, d_model) gelu cdf, reused by the backward pass


def _merge_batch(y, num_frames, grid_h, grid_w, merge):
    """2x2 merge of a (B, N_raw, d) block -> (B, T, merge_dim)."""
    bsz, _, d = y.shape
    t_out = num_frames * (grid_h // 2) * (grid_w // 2)
    x = y.reshape(bsz, num_frames, grid_h // 2, 2, grid_w // 2, 2, d)
    x = x.transpose(0, 1, 2, 4, 3, 5, 6)
    if merge == "concat":
        return np.ascontiguousarray(x.reshape(bsz, t_out, 4 * d))
    return np.ascontiguousarray(x.reshape(bsz, t_out, 4, d).mean(axis=2))


def _unmerge_batch(dmerged, num_frames, grid_h, grid_w, d, merge):
    """Adjoint of `_merge_batch`: (B, T, merge_dim) -> (B, N_raw, d)."""
    bsz, t_out, _ = dmerged.shape
    if merge == "concat":
        x = dmerged.reshape(bsz, num_frames, grid_h // 2, grid_w // 2, 2, 2, d)
    else:
        x = np.broadcast_to(
            dmerged.reshape(bsz, t_out, 1, d) / 4.0, (bsz, t_out, 4, d)
        ).reshape(bsz, num_frames, grid_h // 2, grid_w // 2, 2, 2, d)
    x = x.transpose(0, 1, 2, 4, 3, 5, 6)
    return np.ascontiguousarray(x.reshape(bsz, num_frames * grid_h * grid_w, d))


def _forward(features, gamma, beta, w1, b1, w2, b2, num_frames, grid_h, grid_w,
             eps, merge):
    bsz, num_layers, n_raw, d_geo = features.shape
    t_out = num_frames * (grid_h // 2) * (grid_w // 2)
    d_model = w2.shape[1]
    # layer-major copy so every per-layer slice below is a contiguous view
    feats = np.ascontiguousarray(features.transpose(1, 0, 2, 3))
    xhat = np.empty_like(feats)
    inv_std = np.empty((num_layers, bsz, n_raw))
    merge_dim = w1.shape[0]
    merged = np.empty((bsz, num_layers, t_out, merge_dim))
    if merge == "concat":
        # 6-D view of the merged buffer so the transposed layout lands in one copy
        merged_view = merged.reshape(
            bsz, num_layers, num_frames, grid_h // 2, grid_w // 2, 2, 2, d_geo
        )
    for l in range(num_layers):
        y, xh, istd = kernels.layer_norm_fwd(
            feats[l].reshape(bsz * n_raw, d_geo), gamma[l], beta[l], eps
        )
        xhat[l] = xh.reshape(bsz, n_raw, d_geo)
        inv_std[l] = istd.reshape(bsz, n_raw)
        if merge == "concat":
            y6 = y.reshape(bsz, num_frames, grid_h // 2, 2, grid_w // 2, 2, d_geo)
            merged_view[:, l] = y6.transpose(0, 1, 2, 4, 3, 5, 6)
        else:
            merged[:, l] = _merge_batch(
                y.reshape(bsz, n_raw, d_geo), num_frames, grid_h, grid_w, merge
            )
    rows = merged.reshape(bsz * num_layers * t_out, merge_dim)
    h = rows @ w1 + b1
    act, cdf = kernels.gelu_fwd(h)
    bank = (act @ w2 + b2).reshape(bsz, num_layers, t_out, d_model)
    return bank, BankCache(
        xhat=xhat, inv_std=inv_std, merged=rows, h=h, act=act, cdf=cdf
    )


def _backward(dbank, cache: BankCache, gamma, w1, w2, num_frames, grid_h,
              grid_w, merge):
    bsz, num_layers, t_out, d_model = dbank.shape
    n_raw = cache.xhat.shape[2]
    d_geo = cache.xhat.shape[3]
    drows = np.ascontiguousarray(dbank.reshape(-1, d_model))
    dw2 = cache.act.T @ drows
    db2 = drows.sum(axis=0)
    dact = drows @ w2.T
    dh = kernels.gelu_bwd(cache.h, cache.cdf, dact)
    dw1 = cache.merged.T @ dh
    db1 = dh.sum(axis=0)
    dmerged = (dh @ w1.T).reshape(bsz, num_layers, t_out, -1)
    dgamma = np.zeros((num_layers, d_geo))
    dbeta = np.zeros((num_layers, d_geo))
    for l in range(num_layers):
        dy = _unmerge_batch(dmerged[:, l], num_frames, grid_h, grid_w,
                            d_geo, merge)
        dg, db = kernels.layer_norm_bwd_params(
            dy.reshape(bsz * n_raw, d_geo),
            cache.xhat[l].reshape(bsz * n_raw, d_geo),
        )
        dgamma[l] = dg
        dbeta[l] = db
    return {
        "bank.gamma": dgamma,
        "bank.beta": dbeta,
        "phi.w1": dw1,
        "phi.b1": db1,
        "phi.w2": dw2,
        "phi.b2": db2,
    }
