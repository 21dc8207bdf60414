"""Fast invariant and gradient suites behind the CLI's `selftest` and
`gradcheck` subcommands.

The invariant checks are quick spot checks of the load-bearing contracts
(identity at init, sparse allocation, optimizer identity, serialization
round-trip); the pytest suite covers the same ground more thoroughly. The
gradient suite drives the independent finite-difference checker over the full
composed pipeline at small dims for every allocation mode and position.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass

import numpy as np

from . import geobank_io, pipeline
from .bank import RawLayerStack, build_bank, init_bank_params
from .errors import FormatError
from .grounding import (
    GroundedTokens,
    VisualTokens,
    ground_tokens,
    init_grounding_head,
    sparse_allocate,
)
from .numerics import GradCheckReport, ParamStore, adam_update, check_gradients
from .pipeline import Geometry, HeadConfig


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""


def _random_stack(rng, num_layers=6, num_frames=2, grid=4, d_geo=8):
    return RawLayerStack(
        layer_indices=tuple(range(num_layers)),
        num_frames=num_frames,
        grid_h=grid,
        grid_w=grid,
        features=rng.normal(size=(num_layers, num_frames * grid * grid, d_geo)),
    )


def _check_identity_at_init() -> CheckResult:
    rng = np.random.default_rng(7)
    worst = 0.0
    for draw in range(5):
        raw = _random_stack(rng)
        params = init_bank_params(raw.num_layers, raw.d_geo, d_model=12, rng=rng)
        bank = build_bank(raw, params)
        tokens = VisualTokens(
            num_frames=raw.num_frames,
            tokens_per_frame=(raw.grid_h // 2) * (raw.grid_w // 2),
            matrix=rng.normal(size=(bank.num_tokens, bank.d_model)),
        )
        for mode in ("token_adaptive", "global", "uniform"):
            for position in ("pre_reasoning", "input_fusion", "decoder_fusion"):
                head = init_grounding_head(
                    bank.d_model, bank.num_layers, rng, mode=mode,
                    top_k=2, position=position,
                )
                grounded, _ = ground_tokens(tokens, bank, head)
                worst = max(
                    worst, float(np.abs(grounded.matrix - tokens.matrix).max())
                )
    return CheckResult(
        "identity_at_init", worst == 0.0, f"max |V' - V| = {worst!r}"
    )


def _check_sparse_allocation() -> CheckResult:
    rng = np.random.default_rng(11)
    for _ in range(200):
        width = int(rng.integers(2, 16))
        k = int(rng.integers(1, width + 2))
        logits = rng.normal(size=width)
        alpha = sparse_allocate(logits, k)
        nnz = int((alpha > 0).sum())
        if nnz != min(k, width):
            return CheckResult(
                "sparse_allocation", False, f"nonzero count {nnz} != {min(k, width)}"
            )
        if abs(alpha.sum() - 1.0) > 1e-12:
            return CheckResult(
                "sparse_allocation", False, f"weights sum to {alpha.sum()!r}"
            )
    return CheckResult("sparse_allocation", True, "count and normalization hold")


def _check_adam_identity() -> CheckResult:
    rng = np.random.default_rng(3)
    store = ParamStore.from_params({"w": rng.normal(size=(4, 4))})
    before = store.params["w"].copy()
    adam_update(store, lr=0.1)
    same = np.array_equal(store.params["w"], before) and store.step == 1
    return CheckResult("adam_zero_grad_identity", same, "zero grads leave params")


def _check_geobank_roundtrip() -> CheckResult:
    rng = np.random.default_rng(5)
    raw = _random_stack(rng, num_layers=3, num_frames=1, grid=4, d_geo=5)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "t.geobank")
        geobank_io.write_geobank(path, raw)
        back = geobank_io.read_geobank(path)
        ok = np.array_equal(
            back.features, raw.features.astype(np.float32).astype(np.float64)
        )
        with open(path, "r+b") as fh:
            fh.seek(0)
            fh.write(b"XXXX")
        try:
            geobank_io.read_geobank(path)
            rejected = False
        except FormatError:
            rejected = True
    return CheckResult(
        "geobank_roundtrip",
        ok and rejected,
        "payload round-trips at 32-bit; corrupt magic rejected",
    )


def run_selftest() -> list[CheckResult]:
    return [
        _check_identity_at_init(),
        _check_sparse_allocation(),
        _check_adam_identity(),
        _check_geobank_roundtrip(),
    ]


# --- gradient suite ----------------------------------------------------------

GRADCHECK_DIMS = dict(num_layers=3, num_frames=1, grid=4, d_geo=4, d_model=6,
                      num_classes=4)


def _gradcheck_fixture(seed: int, head: HeadConfig):
    """Random small-dim fixture the finite-difference probe can actually
    measure.

    Two rejection rules: routing logits must be separated by much more than
    the probe's h so no perturbation crosses a selection boundary, and no
    true gradient coordinate may fall in (0, 2e-6) — central differences at
    h=1e-5 carry ~5e-11 of float64 roundoff, so gradients below ~1e-6 are
    unresolvable regardless of correctness (exact zeros are fine: parameters
    the loss never reads difference to exactly zero).
    """
    dims = GRADCHECK_DIMS
    geom = Geometry(dims["num_frames"], dims["grid"], dims["grid"])
    t_out = geom.tokens_out
    for attempt in range(64):
        rng = np.random.default_rng(
            np.random.SeedSequence((seed, attempt, 0xD1F5))
        )
        features = rng.normal(
            size=(2, dims["num_layers"], dims["num_frames"] * dims["grid"] ** 2,
                  dims["d_geo"])
        )
        visual = rng.normal(size=(2, t_out, dims["d_model"]))
        labels = rng.integers(0, dims["num_classes"], size=(2, t_out))
        params = pipeline.init_params(
            dims["num_layers"], dims["d_geo"], dims["d_model"],
            dims["num_classes"], head, rng,
        )
        # exercise every path: nonzero output projection, affines off identity
        params["w_out"] = rng.normal(0.0, 0.4, params["w_out"].shape)
        params["global_logits"] = rng.normal(0.0, 1.0, params["global_logits"].shape)
        params["bank.gamma"] += rng.normal(0.0, 0.1, params["bank.gamma"].shape)
        params["bank.beta"] += rng.normal(0.0, 0.1, params["bank.beta"].shape)
        params["router.b"] += rng.normal(0.0, 0.3, params["router.b"].shape)
        if not _logit_gaps_ok(params, features, visual, geom, head):
            continue
        if not _grads_measurable(params, features, visual, labels, geom, head):
            continue
        return params, features, visual, labels, geom
    raise RuntimeError("could not draw a measurable gradcheck fixture")


def _grads_measurable(params, features, visual, labels, geom, head,
                      floor=2e-6):
    _, _, cache = pipeline.forward(params, features, visual, labels, geom, head)
    grads = pipeline.backward(params, cache, geom, head)
    for g in grads.values():
        mags = np.abs(np.asarray(g)).ravel()
        if np.any((mags > 0.0) & (mags < floor)):
            return False
    return True


def _logit_gaps_ok(params, features, visual, geom, head, min_gap=1e-3):
    if head.mode == "uniform" or head.position == "input_fusion":
        return True
    if head.mode == "global":
        logits = params["global_logits"][None, :]
    else:
        v = visual.reshape(-1, visual.shape[-1])
        logits = v @ params["router.w"] + params["router.b"]
    k = min(head.top_k, logits.shape[1])
    srt = np.sort(logits, axis=1)[:, ::-1]
    if k == logits.shape[1]:
        return True
    return bool((srt[:, k - 1] - srt[:, k] >= min_gap).all())


def run_gradcheck(
    seeds=range(5),
    modes=("token_adaptive", "global", "uniform"),
    positions=("pre_reasoning", "input_fusion", "decoder_fusion"),
    top_k: int = 2,
    h: float = 1e-5,
    tol: float = 1e-5,
) -> list[tuple[str, GradCheckReport]]:
    """Finite-difference checks of the composed pipeline, one report per
    (mode, position, seed)."""
    reports = []
    for mode in modes:
        for position in positions:
            head = HeadConfig(mode=mode, top_k=top_k, position=position)
            for seed in seeds:
                params, features, visual, labels, geom = _gradcheck_fixture(
                    seed, head
                )
                store = ParamStore.from_params(params)

                def fn(s, _f=features, _v=visual, _l=labels, _g=geom, _h=head):
                    loss, _, cache = pipeline.forward(
                        s.params, _f, _v, _l, _g, _h
                    )
                    grads = pipeline.backward(s.params, cache, _g, _h)
                    return loss, grads

                report = check_gradients(fn, store, h=h, tol=tol)
                reports.append((f"{mode}/{position}/seed{seed}", report))
    return reports
