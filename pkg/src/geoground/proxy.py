"""Synthetic routed-evidence task and training harness.

The task encodes the premise that different tokens need different evidence
layers. Every token has a role, visible in its visual features (a one-hot
block plus noise), and a label that is written *only* into the raw geometry
features of the token's 2x2 block at the role's signal layer; everywhere else
the geometry is Gaussian noise, and the visual tokens carry no label
information at all. A linear probe over the grounded tokens therefore scores
above chance only through the grounding path, and scores well only when the
allocation mechanism finds each role's signal layer.

Two variants:

* ``single`` — label one-hot in channels [0, num_classes) of the signal
  layer assigned to the token's role (role -> layer map is injective).
* ``pair`` — the label's two bits are written as +-1 latents into two fixed
  distinct layers (channel 0 of each), so the four-way label is linearly
  decodable only when both layers are aggregated; one layer alone caps
  accuracy at 50%.

Training optimizes bank affines, the shared projector, the router/global
logits, the output projection, and the probe with Adam; the raw geometry
features stay frozen, mirroring a frozen upstream encoder.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import pipeline
from .bank import RawLayerStack
from .errors import ConfigError, DataError, TrainingError
from .grounding import VisualTokens
from .numerics import ParamStore, adam_update
from .pipeline import Geometry, HeadConfig

VARIANTS = ("single", "pair")


@dataclass(frozen=True)
class ProxyConfig:
    """Task geometry, signal placement, and optimizer settings.

    The ``paper_*`` fields record the full-scale training settings of the
    source system for reference; the proxy defaults are desk-scale.
    """

    num_layers: int = 12
    num_frames: int = 2
    grid_h: int = 8
    grid_w: int = 8
    d_geo: int = 16
    d_model: int = 32
    num_roles: int = 4
    num_classes: int = 4
    signal_layers: tuple[int, ...] = (2, 5, 8, 11)
    role_probs: tuple[float, ...] = (0.4, 0.4, 0.1, 0.1)
    variant: str = "single"
    pair_layers: tuple[int, int] = (3, 8)
    noise_std: float = 1.0
    role_noise_std: float = 0.1
    train_samples: int = 256
    test_samples: int = 64
    batch_size: int = 16
    steps: int = 2000
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    ln_eps: float = 1e-5
    merge: str = "concat"
    paper_lr: float = 1e-5
    paper_batch_size: int = 64
    paper_frames: int = 8
    paper_top_k: int = 2

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.num_layers < 1:
            raise ConfigError("num_layers must be >= 1")
        if self.grid_h % 2 or self.grid_w % 2 or self.grid_h < 2 or self.grid_w < 2:
            raise ConfigError("grid sides must be even and >= 2")
        if self.num_frames < 1:
            raise ConfigError("num_frames must be >= 1")
        if len(self.signal_layers) != self.num_roles:
            raise ConfigError(
                f"signal_layers has {len(self.signal_layers)} entries for "
                f"{self.num_roles} roles"
            )
        if len(set(self.signal_layers)) != len(self.signal_layers):
            raise ConfigError("signal_layers must be injective (no repeats)")
        if any(not 0 <= l < self.num_layers for l in self.signal_layers):
            raise ConfigError(
                f"signal_layers out of range [0, {self.num_layers})"
            )
        if len(self.role_probs) != self.num_roles:
            raise ConfigError(
                f"role_probs has {len(self.role_probs)} entries for "
                f"{self.num_roles} roles"
            )
        if any(p <= 0 for p in self.role_probs) or abs(sum(self.role_probs) - 1.0) > 1e-9:
            raise ConfigError("role_probs must be positive and sum to 1")
        if self.variant == "pair":
            a, b = self.pair_layers
            if a == b or not (0 <= a < self.num_layers and 0 <= b < self.num_layers):
                raise ConfigError("pair_layers must be two distinct valid layers")
            if self.num_classes != 4:
                raise ConfigError("pair variant encodes 2 bits; num_classes must be 4")
        if self.d_geo < max(self.num_classes, 1):
            raise ConfigError("d_geo must fit the signal channels")
        if self.d_model < self.num_roles:
            raise ConfigError("d_model must fit the role one-hot block")
        if self.noise_std < 0 or self.role_noise_std < 0:
            raise ConfigError("noise levels must be >= 0")
        if min(self.train_samples, self.test_samples, self.batch_size, self.steps) < 1:
            raise ConfigError("sample counts, batch size, and steps must be >= 1")
        if self.lr <= 0:
            raise ConfigError("lr must be > 0")

    @property
    def geometry(self) -> Geometry:
        return Geometry(self.num_frames, self.grid_h, self.grid_w)

    @property
    def tokens_per_sample(self) -> int:
        return self.geometry.tokens_out

    @property
    def signal_layer_map(self) -> dict[int, int]:
        return dict(enumerate(self.signal_layers))


@dataclass
class ProxySample:
    """One task instance in the public carrier types."""

    raw: RawLayerStack
    tokens: VisualTokens
    roles: np.ndarray
    labels: np.ndarray


@dataclass
class ProxyDataset:
    """Batched task instances (struct-of-arrays layout used by training)."""

    features: np.ndarray  # (S, L, N_raw, d_geo)
    visual: np.ndarray  # (S, T, d_model)
    roles: np.ndarray  # (S, T) int64
    labels: np.ndarray  # (S, T) int64
    num_frames: int
    grid_h: int
    grid_w: int

    def __len__(self) -> int:
        return self.features.shape[0]

    def sample(self, i: int) -> ProxySample:
        num_layers = self.features.shape[1]
        return ProxySample(
            raw=RawLayerStack(
                layer_indices=tuple(range(num_layers)),
                num_frames=self.num_frames,
                grid_h=self.grid_h,
                grid_w=self.grid_w,
                features=self.features[i].copy(),
            ),
            tokens=VisualTokens(
                num_frames=self.num_frames,
                tokens_per_frame=(self.grid_h // 2) * (self.grid_w // 2),
                matrix=self.visual[i].copy(),
            ),
            roles=self.roles[i].copy(),
            labels=self.labels[i].copy(),
        )


def _block_indices(cfg: ProxyConfig) -> np.ndarray:
    """Raw token indices of each merged token's 2x2 block, shape (T, 4)."""
    gh2, gw2 = cfg.grid_h // 2, cfg.grid_w // 2
    out = np.empty((cfg.tokens_per_sample, 4), dtype=np.int64)
    t = 0
    for f in range(cfg.num_frames):
        base_f = f * cfg.grid_h * cfg.grid_w
        for r in range(gh2):
            for c in range(gw2):
                top_left = base_f + (2 * r) * cfg.grid_w + 2 * c
                out[t] = (
                    top_left,
                    top_left + 1,
                    top_left + cfg.grid_w,
                    top_left + cfg.grid_w + 1,
                )
                t += 1
    return out


def _draw_dataset(cfg: ProxyConfig, n_samples: int, rng: np.random.Generator,
                  background: "np.ndarray | None" = None):
    t = cfg.tokens_per_sample
    n_raw = cfg.num_frames * cfg.grid_h * cfg.grid_w
    roles = rng.choice(cfg.num_roles, size=(n_samples, t), p=cfg.role_probs)
    labels = rng.integers(0, cfg.num_classes, size=(n_samples, t))
    visual = rng.normal(0.0, cfg.role_noise_std, size=(n_samples, t, cfg.d_model))
    s_idx, t_idx = np.meshgrid(
        np.arange(n_samples), np.arange(t), indexing="ij"
    )
    visual[s_idx, t_idx, roles] += 1.0
    if background is None:
        if cfg.variant == "pair":
            # redundant bank: every non-signal layer repeats one per-sample
            # noise field (marginally still unit-Gaussian x noise_std), so
            # aggregating many layers re-injects the same distractor instead
            # of averaging it away
            shared = rng.normal(0.0, cfg.noise_std, size=(n_samples, 1, n_raw, cfg.d_geo))
            features = np.broadcast_to(
                shared, (n_samples, cfg.num_layers, n_raw, cfg.d_geo)
            ).copy()
            for layer in cfg.pair_layers:
                features[:, layer] = rng.normal(
                    0.0, cfg.noise_std, size=(n_samples, n_raw, cfg.d_geo)
                )
        else:
            features = rng.normal(
                0.0, cfg.noise_std, size=(n_samples, cfg.num_layers, n_raw, cfg.d_geo)
            )
    else:
        if background.shape != (cfg.num_layers, n_raw, cfg.d_geo):
            raise ConfigError(
                f"background stack shape {background.shape} does not match the "
                f"task geometry {(cfg.num_layers, n_raw, cfg.d_geo)}"
            )
        features = np.broadcast_to(
            background[None], (n_samples,) + background.shape
        ).copy()
    blocks = _block_indices(cfg)
    si = s_idx[:, :, None]  # (S, T, 1) broadcast over the 4 block slots
    bi = blocks[None, :, :]
    if cfg.variant == "single":
        layer = np.asarray(cfg.signal_layers)[roles][:, :, None]
        onehot = np.eye(cfg.num_classes)[labels]  # (S, T, C)
        features[si, layer, bi, : cfg.num_classes] = onehot[:, :, None, :]
    else:
        a, b = cfg.pair_layers
        s0 = (2.0 * (labels & 1) - 1.0)[:, :, None]
        s1 = (2.0 * ((labels >> 1) & 1) - 1.0)[:, :, None]
        features[si, a, bi, 0] = s0
        features[si, b, bi, 0] = s1
    return ProxyDataset(
        features=features,
        visual=visual,
        roles=roles.astype(np.int64),
        labels=labels.astype(np.int64),
        num_frames=cfg.num_frames,
        grid_h=cfg.grid_h,
        grid_w=cfg.grid_w,
    )


def _streams(seed: int, n: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def generate_task(cfg: ProxyConfig, seed: int,
                  background: "np.ndarray | None" = None):
    """Deterministic (train, test) datasets from disjoint PRNG streams.

    ``background`` optionally replaces the Gaussian geometry background with a
    fixed stack (e.g. loaded from a .geobank file); signals are written on top
    of it per sample.
    """
    rng_train, rng_test, _, _ = _streams(seed, 4)
    return (
        _draw_dataset(cfg, cfg.train_samples, rng_train, background),
        _draw_dataset(cfg, cfg.test_samples, rng_test, background),
    )


def probe_loss(grounded_matrix, probe_w, probe_b, labels):
    """Mean token-level cross-entropy of a linear probe; returns (loss, logits)."""
    x = np.asarray(grounded_matrix, dtype=np.float64)
    logits = x @ np.asarray(probe_w) + np.asarray(probe_b)
    labels = np.asarray(labels).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise DataError(
            f"{labels.shape[0]} labels for {logits.shape[0]} tokens"
        )
    loss, _ = pipeline._cross_entropy(logits, labels)
    return loss, logits


@dataclass
class EvalMetrics:
    accuracy: float
    mean_loss: float
    layer_counts: np.ndarray  # selections per bank layer, sums to tokens*k
    layer_frequency: np.ndarray
    agreement: float
    degenerate_routing: bool


@dataclass
class TrainResult:
    config: ProxyConfig
    head: HeadConfig
    seed: int
    selection: tuple[int, ...]
    store: ParamStore
    loss_curve: np.ndarray
    initial_test_accuracy: float
    train_metrics: EvalMetrics
    test_metrics: EvalMetrics


def _signal_bank_positions(cfg: ProxyConfig, selection: Sequence[int]) -> np.ndarray:
    """Bank position of each role's signal layer; -1 when not in the bank."""
    pos = {layer: i for i, layer in enumerate(selection)}
    if cfg.variant == "single":
        return np.array(
            [pos.get(l, -1) for l in cfg.signal_layers], dtype=np.int64
        )
    return np.array([pos.get(l, -1) for l in cfg.pair_layers], dtype=np.int64)


def evaluate(
    params,
    dataset: ProxyDataset,
    head: HeadConfig,
    cfg: ProxyConfig,
    selection: "tuple[int, ...] | None" = None,
) -> EvalMetrics:
    """Pure evaluation: accuracy, loss, routing statistics, agreement.

    Agreement is the fraction of tokens whose top-1 selected layer is the
    signal layer of the token's role (for the pair variant: is one of the two
    signal layers). Runs whose routing logits are constant per token (e.g. a
    zero-initialized router under the deterministic tie rule) are flagged as
    degenerate since their selections carry no preference information.
    """
    selection = tuple(selection) if selection else tuple(range(cfg.num_layers))
    feats = dataset.features[:, list(selection)]
    loss, logits, cache = pipeline.forward(
        params,
        feats,
        dataset.visual,
        dataset.labels,
        cfg.geometry,
        head,
        merge=cfg.merge,
        eps=cfg.ln_eps,
    )
    pred = logits.reshape(-1, logits.shape[-1]).argmax(axis=1)
    accuracy = float((pred == dataset.labels.reshape(-1)).mean())
    num_bank_layers = len(selection)
    counts = np.bincount(cache.selected.ravel(), minlength=num_bank_layers)
    freq = counts / max(counts.sum(), 1)
    top1 = cache.selected[:, 0].reshape(dataset.labels.shape)
    sig_pos = _signal_bank_positions(cfg, selection)
    if cfg.variant == "single":
        agreement = float((top1 == sig_pos[dataset.roles]).mean())
    else:
        agreement = float(np.isin(top1, sig_pos[sig_pos >= 0]).mean())
    if cache.logits_r is None:
        degenerate = True  # uniform allocation: no preferences at all
    else:
        degenerate = bool(np.all(np.ptp(cache.logits_r, axis=1) == 0.0))
    return EvalMetrics(
        accuracy=accuracy,
        mean_loss=float(loss),
        layer_counts=counts,
        layer_frequency=freq,
        agreement=agreement,
        degenerate_routing=degenerate,
    )


def train(
    cfg: ProxyConfig,
    head: HeadConfig,
    seed: int,
    selection: "tuple[int, ...] | None" = None,
    background: "np.ndarray | None" = None,
) -> TrainResult:
    """Adam over minibatches of samples; deterministic given (cfg, head, seed).

    ``selection`` restricts the bank to a subset of the stack's layers
    (defaults to all). Raw geometry features are never updated.
    """
    selection = tuple(selection) if selection else tuple(range(cfg.num_layers))
    if any(not 0 <= l < cfg.num_layers for l in selection):
        raise ConfigError(f"selection out of range [0, {cfg.num_layers})")
    train_ds, test_ds = generate_task(cfg, seed, background)
    _, _, rng_init, rng_batch = _streams(seed, 4)
    params = pipeline.init_params(
        num_layers=len(selection),
        d_geo=cfg.d_geo,
        d_model=cfg.d_model,
        num_classes=cfg.num_classes,
        head=head,
        rng=rng_init,
        merge=cfg.merge,
    )
    store = ParamStore.from_params(params)
    initial_test = evaluate(store.params, test_ds, head, cfg, selection).accuracy

    feats = np.ascontiguousarray(train_ds.features[:, list(selection)])
    geom = cfg.geometry
    curve = np.empty(cfg.steps)
    n_train = len(train_ds)
    for step in range(cfg.steps):
        idx = rng_batch.integers(0, n_train, size=cfg.batch_size)
        loss, _, cache = pipeline.forward(
            store.params,
            np.ascontiguousarray(feats[idx]),
            np.ascontiguousarray(train_ds.visual[idx]),
            train_ds.labels[idx],
            geom,
            head,
            merge=cfg.merge,
            eps=cfg.ln_eps,
        )
        if not np.isfinite(loss):
            raise TrainingError(f"non-finite loss at step {step}", step=step)
        grads = pipeline.backward(store.params, cache, geom, head, merge=cfg.merge)
        store.set_grads(grads)
        adam_update(
            store, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps
        )
        store.zero_grads()
        curve[step] = loss
    return TrainResult(
        config=cfg,
        head=head,
        seed=seed,
        selection=selection,
        store=store,
        loss_curve=curve,
        initial_test_accuracy=initial_test,
        train_metrics=evaluate(store.params, train_ds, head, cfg, selection),
        test_metrics=evaluate(store.params, test_ds, head, cfg, selection),
    )
