"""Token-adaptive evidence allocation and residual grounding.

Each token queries the bank through a linear router, keeps its top-K layers
(masked softmax over the kept logits, deterministic ties to the lowest layer
position), aggregates the kept layers into one evidence vector, and injects it
residually through a zero-initialized output projection — so the whole branch
starts as an identity map and only departs from it as the projection trains.

Three allocation modes cover the granularity ablation: ``token_adaptive``
(per-token routing), ``global`` (one learned logit vector shared by every
token), and ``uniform`` (flat 1/L weights, top_k ignored). Three positions
cover the injection ablation: ``pre_reasoning`` injects routed evidence into
the tokens before the downstream head, ``input_fusion`` injects the uniform
mean of the bank instead of routed evidence, and ``decoder_fusion`` leaves the
tokens untouched and defers the evidence to the head input by concatenation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backends import kernels
from .bank import GeometryBank
from .errors import ConfigError, DimensionError

MODES = ("token_adaptive", "global", "uniform")
POSITIONS = ("pre_reasoning", "input_fusion", "decoder_fusion")


@dataclass
class VisualTokens:
    """The (num_frames * tokens_per_frame) x d_model token matrix."""

    num_frames: int
    tokens_per_frame: int
    matrix: np.ndarray

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise DimensionError("visual tokens must be a 2-D matrix")
        if self.matrix.shape[0] != self.num_frames * self.tokens_per_frame:
            raise DimensionError(
                f"token matrix has {self.matrix.shape[0]} rows, expected "
                f"{self.num_frames}*{self.tokens_per_frame}"
            )

    @property
    def d_model(self) -> int:
        return self.matrix.shape[1]


@dataclass
class RoutingWeights:
    """Per-token logits, selected layer positions (descending preference),
    and the sparse normalized weights (nonzero only at selected)."""

    logits: np.ndarray  # (tokens, num_layers)
    selected: np.ndarray  # (tokens, k) int64
    weights: np.ndarray  # (tokens, num_layers)


@dataclass
class GroundingHead:
    """Router, output projection, and the allocation/position switches.

    ``w_out`` must start as zeros so grounding begins as an identity mapping;
    ``global_logits`` starts at zeros (a uniform preference) and is only used
    in global mode.
    """

    router_w: np.ndarray  # (d_model, num_layers)
    router_b: np.ndarray  # (num_layers,)
    w_out: np.ndarray  # (d_model, d_model)
    global_logits: np.ndarray  # (num_layers,)
    mode: str = "token_adaptive"
    top_k: int = 2
    position: str = "pre_reasoning"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.position not in POSITIONS:
            raise ConfigError(
                f"unknown position {self.position!r}; expected one of {POSITIONS}"
            )
        if self.top_k < 1:
            raise ConfigError(f"top_k must be >= 1, got {self.top_k}")

    @property
    def num_layers(self) -> int:
        return self.router_w.shape[1]


@dataclass
class GroundedTokens:
    """Grounded token matrix, same shape as the input tokens. ``evidence``
    carries the per-token aggregated evidence that produced it (consumed
    directly by the head in decoder_fusion)."""

    matrix: np.ndarray
    evidence: np.ndarray


def init_grounding_head(
    d_model: int,
    num_layers: int,
    rng: np.random.Generator,
    mode: str = "token_adaptive",
    top_k: int = 2,
    position: str = "pre_reasoning",
) -> GroundingHead:
    """Small random router, zero bias, zero output projection, zero globals."""
    return GroundingHead(
        router_w=rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(d_model, num_layers)),
        router_b=np.zeros(num_layers),
        w_out=np.zeros((d_model, d_model)),
        global_logits=np.zeros(num_layers),
        mode=mode,
        top_k=top_k,
        position=position,
    )


def route(tokens: VisualTokens, head: GroundingHead) -> np.ndarray:
    """Per-token layer-preference logits (token_adaptive path only)."""
    if tokens.d_model != head.router_w.shape[0]:
        raise DimensionError(
            f"token dim {tokens.d_model} does not match router input dim "
            f"{head.router_w.shape[0]}"
        )
    return tokens.matrix @ head.router_w + head.router_b


def sparse_allocate(logits, top_k: int) -> np.ndarray:
    """Masked softmax over the top_k largest logits of one token.

    Ties break to the lowest layer position; masked entries are exactly zero.
    """
    z = np.ascontiguousarray(logits, dtype=np.float64)
    if z.ndim != 1 or z.size < 1:
        raise DimensionError("sparse_allocate expects a non-empty logit vector")
    if top_k < 1:
        raise ConfigError(f"top_k must be >= 1, got {top_k}")
    alpha, _ = kernels.topk_softmax_fwd(z[None, :], top_k)
    return alpha[0]


def aggregate_evidence(alpha, bank: GeometryBank, token: int) -> np.ndarray:
    """Weighted sum of one token's bank entries using only nonzero weights."""
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.shape != (bank.num_layers,):
        raise DimensionError(
            f"alpha has length {alpha.shape}, bank has {bank.num_layers} layers"
        )
    if not 0 <= token < bank.num_tokens:
        raise IndexError(
            f"token index {token} out of range [0, {bank.num_tokens})"
        )
    g = np.zeros(bank.d_model)
    for l in np.nonzero(alpha)[0]:
        g += alpha[l] * bank.layers[l, token]
    return g


def residual_ground(v, g, w_out) -> np.ndarray:
    """v' = v + W_o @ g."""
    v = np.asarray(v, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    w_out = np.asarray(w_out, dtype=np.float64)
    if v.shape != g.shape or w_out.shape != (v.size, v.size):
        raise DimensionError(
            f"incompatible shapes: v {v.shape}, g {g.shape}, W_o {w_out.shape}"
        )
    return v + w_out @ g


def _routing_for(matrix: np.ndarray, head: GroundingHead, num_layers: int):
    """RoutingWeights for a token matrix under the head's allocation mode."""
    n = matrix.shape[0]
    if head.mode == "token_adaptive":
        logits = matrix @ head.router_w + head.router_b
        alpha, selected = kernels.topk_softmax_fwd(logits, head.top_k)
    elif head.mode == "global":
        logits_row = np.ascontiguousarray(head.global_logits[None, :])
        a1, s1 = kernels.topk_softmax_fwd(logits_row, head.top_k)
        logits = np.repeat(logits_row, n, axis=0)
        alpha = np.repeat(a1, n, axis=0)
        selected = np.repeat(s1, n, axis=0)
    elif head.mode == "uniform":
        logits = np.zeros((n, num_layers))
        alpha = np.full((n, num_layers), 1.0 / num_layers)
        selected = np.tile(np.arange(num_layers, dtype=np.int64), (n, 1))
    else:
        raise ConfigError(f"unknown mode {head.mode!r}")
    return RoutingWeights(logits=logits, selected=selected, weights=alpha)


def ground_tokens(
    tokens: VisualTokens, bank: GeometryBank, head: GroundingHead
) -> tuple[GroundedTokens, RoutingWeights]:
    """Route, allocate, aggregate, and inject evidence for every token.

    pre_reasoning injects the mode's routed evidence through W_o;
    input_fusion injects the uniform bank mean through W_o instead (its
    routing weights are reported as uniform, which is what the evidence
    used); decoder_fusion returns the tokens unchanged and hands the routed
    evidence to the downstream head via ``GroundedTokens.evidence``.
    """
    if tokens.matrix.shape[0] != bank.num_tokens:
        raise DimensionError(
            f"token count {tokens.matrix.shape[0]} does not match bank token "
            f"count {bank.num_tokens}"
        )
    if tokens.d_model != bank.d_model:
        raise DimensionError(
            f"token dim {tokens.d_model} does not match bank dim {bank.d_model}"
        )
    if head.mode not in MODES:
        raise ConfigError(f"unknown mode {head.mode!r}; expected one of {MODES}")
    if head.position not in POSITIONS:
        raise ConfigError(
            f"unknown position {head.position!r}; expected one of {POSITIONS}"
        )
    layers = np.ascontiguousarray(bank.layers)[None]  # one-sample batch
    if head.position == "input_fusion":
        routing = _routing_for(tokens.matrix, _uniform_head(head), bank.num_layers)
    else:
        routing = _routing_for(tokens.matrix, head, bank.num_layers)
    evidence = kernels.aggregate_fwd(np.ascontiguousarray(routing.weights), layers)
    if head.position == "decoder_fusion":
        grounded = tokens.matrix.copy()
    else:
        grounded = tokens.matrix + evidence @ head.w_out.T
    return GroundedTokens(matrix=grounded, evidence=evidence), routing


def _uniform_head(head: GroundingHead) -> GroundingHead:
    return GroundingHead(
        router_w=head.router_w,
        router_b=head.router_b,
        w_out=head.w_out,
        global_logits=head.global_logits,
        mode="uniform",
        top_k=head.top_k,
        position=head.position,
    )
