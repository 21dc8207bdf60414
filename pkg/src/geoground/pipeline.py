"""Composed forward/backward over the full grounding pipeline.

One differentiable map from named parameters to a scalar cross-entropy loss:
raw layer stacks -> per-layer norm -> 2x2 merge -> shared projector -> routing
-> masked top-K softmax -> evidence aggregation -> residual injection -> linear
probe. The backward pass produces gradients for every named parameter; raw
features and visual tokens are data and get no gradient.

Parameter names (fixed contract shared with the trainer and the CLI):
    bank.gamma, bank.beta, phi.w1, phi.b1, phi.w2, phi.b2,
    router.w, router.b, global_logits, w_out, probe.w, probe.b
Inactive parameters for a given mode/position keep zero gradients, so one
store layout serves every variant.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import bank as bank_mod
from .backends import kernels
from .errors import ConfigError, DataError, DimensionError
from .grounding import MODES, POSITIONS

PARAM_NAMES = (
    "bank.gamma",
    "bank.beta",
    "phi.w1",
    "phi.b1",
    "phi.w2",
    "phi.b2",
    "router.w",
    "router.b",
    "global_logits",
    "w_out",
    "probe.w",
    "probe.b",
)


@dataclass(frozen=True)
class HeadConfig:
    """Allocation mode, evidence budget, and injection position."""

    mode: str = "token_adaptive"
    top_k: int = 2
    position: str = "pre_reasoning"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.position not in POSITIONS:
            raise ConfigError(f"unknown position {self.position!r}")
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")


@dataclass(frozen=True)
class Geometry:
    """Shapes shared by every sample in a batch."""

    num_frames: int
    grid_h: int  # raw (pre-merge) grid sides
    grid_w: int

    @property
    def tokens_out(self) -> int:
        return self.num_frames * (self.grid_h // 2) * (self.grid_w // 2)


def init_params(
    num_layers: int,
    d_geo: int,
    d_model: int,
    num_classes: int,
    head: HeadConfig,
    rng: np.random.Generator,
    merge: str = "concat",
    router_init_scale: float = 1.0,
) -> dict[str, np.ndarray]:
    """Fresh parameter dict: unit affines, Glorot projector, random router and
    probe, zero bias, zero global logits, zero output projection.

    The router init is deliberately wide (scale / sqrt(d_model)): hard top-K
    masking passes no gradient to unselected layers, so initial selections
    must be diverse across tokens for every layer to stay reachable.
    """
    din = 4 * d_geo if merge == "concat" else d_geo
    probe_in = 2 * d_model if head.position == "decoder_fusion" else d_model
    return {
        "bank.gamma": np.ones((num_layers, d_geo)),
        "bank.beta": np.zeros((num_layers, d_geo)),
        "phi.w1": rng.normal(0.0, np.sqrt(2.0 / (din + d_model)), (din, d_model)),
        "phi.b1": np.zeros(d_model),
        "phi.w2": rng.normal(0.0, np.sqrt(1.0 / d_model), (d_model, d_model)),
        "phi.b2": np.zeros(d_model),
        "router.w": rng.normal(
            0.0, router_init_scale / np.sqrt(d_model), (d_model, num_layers)
        ),
        "router.b": np.zeros(num_layers),
        "global_logits": np.zeros(num_layers),
        "w_out": np.zeros((d_model, d_model)),
        "probe.w": rng.normal(0.0, 1.0 / np.sqrt(probe_in), (probe_in, num_classes)),
        "probe.b": np.zeros(num_classes),
    }


def to_bank_params(params: Mapping[str, np.ndarray], merge: str = "concat",
                   eps: float = 1e-5):
    """View a parameter dict as the bank module's parameter carrier."""
    return bank_mod.BankParams(
        gamma=params["bank.gamma"],
        beta=params["bank.beta"],
        w1=params["phi.w1"],
        b1=params["phi.b1"],
        w2=params["phi.w2"],
        b2=params["phi.b2"],
        eps=eps,
        merge=merge,
    )


def to_grounding_head(params: Mapping[str, np.ndarray], head: HeadConfig):
    """View a parameter dict as a grounding head."""
    from .grounding import GroundingHead

    return GroundingHead(
        router_w=params["router.w"],
        router_b=params["router.b"],
        w_out=params["w_out"],
        global_logits=params["global_logits"],
        mode=head.mode,
        top_k=head.top_k,
        position=head.position,
    )


@dataclass
class PipelineCache:
    bank_cache: bank_mod.BankCache
    bank: np.ndarray  # (B, L, T, D)
    visual_flat: np.ndarray  # (B*T, D)
    logits_r: np.ndarray | None  # routing logits (B*T, L) or (1, L) for global
    alpha: np.ndarray  # (B*T, L)
    selected: np.ndarray  # (B*T, k)
    evidence: np.ndarray  # (B*T, D)
    probe_in: np.ndarray  # (B*T, D or 2D)
    probs: np.ndarray | None  # (B*T, C)
    labels_flat: np.ndarray | None
    batch_shape: tuple[int, int]  # (B, T)


def _cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean token-level cross-entropy; returns (loss, probs)."""
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise DataError(
            f"label out of range [0, {logits.shape[1]}): "
            f"min={labels.min()}, max={labels.max()}"
        )
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    probs = np.exp(logits - lse)
    n = logits.shape[0]
    loss = float((lse[:, 0] - logits[np.arange(n), labels]).mean())
    return loss, probs


def forward(
    params: Mapping[str, np.ndarray],
    features: np.ndarray,  # (B, L, N_raw, d_geo)
    visual: np.ndarray,  # (B, T, D)
    labels: np.ndarray | None,  # (B, T) int
    geom: Geometry,
    head: HeadConfig,
    merge: str = "concat",
    eps: float = 1e-5,
):
    """Run the composed pipeline; returns (loss, probe_logits, cache).

    loss is None when labels is None (pure inference).
    """
    bsz, num_layers = features.shape[:2]
    t_out = geom.tokens_out
    if visual.shape[:2] != (bsz, t_out):
        raise DimensionError(
            f"visual tokens {visual.shape[:2]} do not match batch "
            f"{(bsz, t_out)} from the raw geometry"
        )
    d_model = visual.shape[2]
    bank, bank_cache = bank_mod._forward(
        features,
        params["bank.gamma"],
        params["bank.beta"],
        params["phi.w1"],
        params["phi.b1"],
        params["phi.w2"],
        params["phi.b2"],
        geom.num_frames,
        geom.grid_h,
        geom.grid_w,
        eps,
        merge,
    )
    v_flat = np.ascontiguousarray(visual.reshape(bsz * t_out, d_model))
    n_tok = v_flat.shape[0]

    mode = "uniform" if head.position == "input_fusion" else head.mode
    logits_r = None
    if mode == "token_adaptive":
        logits_r = v_flat @ params["router.w"] + params["router.b"]
        alpha, selected = kernels.topk_softmax_fwd(logits_r, head.top_k)
    elif mode == "global":
        logits_r = np.ascontiguousarray(params["global_logits"][None, :])
        a1, s1 = kernels.topk_softmax_fwd(logits_r, head.top_k)
        alpha = np.repeat(a1, n_tok, axis=0)
        selected = np.repeat(s1, n_tok, axis=0)
    else:
        alpha = np.full((n_tok, num_layers), 1.0 / num_layers)
        selected = np.tile(np.arange(num_layers, dtype=np.int64), (n_tok, 1))

    evidence = kernels.aggregate_fwd(np.ascontiguousarray(alpha), bank)
    if head.position == "decoder_fusion":
        probe_in = np.concatenate([v_flat, evidence], axis=1)
    else:
        probe_in = v_flat + evidence @ params["w_out"].T
    logits = probe_in @ params["probe.w"] + params["probe.b"]

    loss = None
    probs = None
    labels_flat = None
    if labels is not None:
        labels_flat = np.asarray(labels).reshape(-1)
        loss, probs = _cross_entropy(logits, labels_flat)
    cache = PipelineCache(
        bank_cache=bank_cache,
        bank=bank,
        visual_flat=v_flat,
        logits_r=logits_r,
        alpha=alpha,
        selected=selected,
        evidence=evidence,
        probe_in=probe_in,
        probs=probs,
        labels_flat=labels_flat,
        batch_shape=(bsz, t_out),
    )
    return loss, logits.reshape(bsz, t_out, -1), cache


def backward(
    params: Mapping[str, np.ndarray],
    cache: PipelineCache,
    geom: Geometry,
    head: HeadConfig,
    merge: str = "concat",
) -> dict[str, np.ndarray]:
    """Analytic gradients of the mean cross-entropy w.r.t. every parameter."""
    if cache.probs is None or cache.labels_flat is None:
        raise ConfigError("backward requires a forward pass with labels")
    bsz, t_out = cache.batch_shape
    n_tok = bsz * t_out
    d_model = cache.visual_flat.shape[1]

    dlogits = cache.probs.copy()
    dlogits[np.arange(n_tok), cache.labels_flat] -= 1.0
    dlogits /= n_tok

    dprobe_w = cache.probe_in.T @ dlogits
    dprobe_b = dlogits.sum(axis=0)
    dprobe_in = dlogits @ params["probe.w"].T

    dw_out = np.zeros_like(params["w_out"])
    if head.position == "decoder_fusion":
        devidence = dprobe_in[:, d_model:]
    else:
        # v' = v + g @ W_o^T
        dw_out = dprobe_in.T @ cache.evidence
        devidence = dprobe_in @ params["w_out"]

    dalpha, dbank = kernels.aggregate_bwd(
        np.ascontiguousarray(devidence),
        np.ascontiguousarray(cache.alpha),
        cache.bank,
    )

    drouter_w = np.zeros_like(params["router.w"])
    drouter_b = np.zeros_like(params["router.b"])
    dglobal = np.zeros_like(params["global_logits"])
    mode = "uniform" if head.position == "input_fusion" else head.mode
    if mode == "token_adaptive":
        dr = kernels.topk_softmax_bwd(dalpha, cache.alpha, cache.selected)
        drouter_w = cache.visual_flat.T @ dr
        drouter_b = dr.sum(axis=0)
    elif mode == "global":
        dr = kernels.topk_softmax_bwd(dalpha, cache.alpha, cache.selected)
        dglobal = dr.sum(axis=0)
    # uniform: constant weights, nothing to propagate

    grads = bank_mod._backward(
        dbank,
        cache.bank_cache,
        params["bank.gamma"],
        params["phi.w1"],
        params["phi.w2"],
        geom.num_frames,
        geom.grid_h,
        geom.grid_w,
        merge,
    )
    grads.update(
        {
            "router.w": drouter_w,
            "router.b": drouter_b,
            "global_logits": dglobal,
            "w_out": dw_out,
            "probe.w": dprobe_w,
            "probe.b": dprobe_b,
        }
    )
    return grads
