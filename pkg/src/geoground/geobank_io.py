"""Bit-exact serialization of raw layer stacks and diagnostic exports.

``.geobank`` layout (all integers little-endian unsigned 32-bit):

    offset  field
    0       magic "GEOB"
    4       version (== 1)
    8       num_layers
    12      first_layer_index
    16      num_frames
    20      grid_h
    24      grid_w
    28      d_geo
    32      dtype code (0 == IEEE-754 32-bit little-endian)
    36      reserved (== 0)
    40      payload: layer-major, frame-major, row-major tokens,
            channel-contiguous float32

Values are stored at 32-bit precision and up-cast to the package's 64-bit
internal precision on read; the down-cast on write is the only lossy step.
Version 1 carries no checksum — corruption detection is limited to
structural validation (sizes, ranges, parity), which the reader performs
before touching the payload.

The format addresses layers as one contiguous run (first index + count), so
stacks with gaps in their layer indices are not representable.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .bank import GeometryBank, RawLayerStack
from .errors import ConfigError, DimensionError, FormatError
from .grounding import RoutingWeights

MAGIC = b"GEOB"
VERSION = 1
DTYPE_F32 = 0
HEADER = struct.Struct("<4sIIIIIIIII")
HEADER_SIZE = HEADER.size  # 40 bytes

HEATMAP_KINDS = ("avg_layer_index", "roi_similarity", "layer_histogram")


def write_geobank(path, raw: RawLayerStack) -> None:
    """Write a raw layer stack; payload is down-cast to float32."""
    first = raw.layer_indices[0]
    if raw.layer_indices != tuple(range(first, first + raw.num_layers)):
        raise FormatError(
            "geobank v1 stores one contiguous layer run; got indices "
            f"{raw.layer_indices}"
        )
    header = HEADER.pack(
        MAGIC,
        VERSION,
        raw.num_layers,
        first,
        raw.num_frames,
        raw.grid_h,
        raw.grid_w,
        raw.d_geo,
        DTYPE_F32,
        0,
    )
    payload = np.ascontiguousarray(raw.features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.tobytes())


def read_geobank(path) -> RawLayerStack:
    """Read and validate a ``.geobank`` file; payload up-cast to float64."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < HEADER_SIZE:
        raise FormatError(
            f"header truncated: expected {HEADER_SIZE} bytes, got {len(blob)}"
        )
    (magic, version, num_layers, first, num_frames, grid_h, grid_w, d_geo,
     dtype_code, reserved) = HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}, expected {VERSION}")
    if dtype_code != DTYPE_F32:
        raise FormatError(f"unknown dtype code {dtype_code}")
    if reserved != 0:
        raise FormatError(f"reserved header field must be 0, got {reserved}")
    if min(num_layers, num_frames, grid_h, grid_w, d_geo) < 1:
        raise FormatError(
            "all header dims must be >= 1, got "
            f"layers={num_layers} frames={num_frames} "
            f"grid={grid_h}x{grid_w} d_geo={d_geo}"
        )
    if grid_h % 2 or grid_w % 2:
        raise FormatError(f"grid dims must be even, got {grid_h}x{grid_w}")
    expected = num_layers * num_frames * grid_h * grid_w * d_geo * 4
    actual = len(blob) - HEADER_SIZE
    if actual != expected:
        raise FormatError(
            f"payload size mismatch: expected {expected} bytes, got {actual}"
        )
    values = np.frombuffer(blob, dtype="<f4", offset=HEADER_SIZE).astype(np.float64)
    return RawLayerStack(
        layer_indices=tuple(range(first, first + num_layers)),
        num_frames=num_frames,
        grid_h=grid_h,
        grid_w=grid_w,
        features=values.reshape(num_layers, num_frames * grid_h * grid_w, d_geo),
    )


@dataclass
class HeatmapGrid:
    """Per-frame value grids for the diagnostic exports.

    For the spatial kinds ``values`` has shape (num_frames, grid_h, grid_w);
    the layer histogram uses a single (1, 1, num_layers) row of counts.
    """

    kind: str
    values: np.ndarray

    @property
    def num_frames(self) -> int:
        return self.values.shape[0]


def avg_layer_index_heatmap(
    routing: RoutingWeights,
    layer_indices,
    num_frames: int,
    grid_h: int,
    grid_w: int,
) -> HeatmapGrid:
    """Mean encoder-layer index of each token's selected layers, on the grid."""
    ids = np.asarray(layer_indices, dtype=np.float64)
    n_tokens = num_frames * grid_h * grid_w
    if routing.selected.shape[0] != n_tokens:
        raise DimensionError(
            f"routing covers {routing.selected.shape[0]} tokens, grid has "
            f"{n_tokens}"
        )
    means = ids[routing.selected].mean(axis=1)
    return HeatmapGrid(
        kind="avg_layer_index",
        values=means.reshape(num_frames, grid_h, grid_w),
    )


def roi_similarity_heatmap(
    bank: GeometryBank, layer: int, query_token: int
) -> HeatmapGrid:
    """Cosine similarity of one token's layer feature against every token of
    the same layer. Zero vectors get similarity 0."""
    if not 0 <= layer < bank.num_layers:
        raise DimensionError(f"layer {layer} out of range [0, {bank.num_layers})")
    if not 0 <= query_token < bank.num_tokens:
        raise IndexError(
            f"token index {query_token} out of range [0, {bank.num_tokens})"
        )
    grid = bank.layers[layer]
    q = grid[query_token]
    qn = np.linalg.norm(q)
    norms = np.linalg.norm(grid, axis=1)
    denom = qn * norms
    sims = np.zeros(bank.num_tokens)
    ok = denom > 0
    sims[ok] = (grid[ok] @ q) / denom[ok]
    sims = np.clip(sims, -1.0, 1.0)
    return HeatmapGrid(
        kind="roi_similarity",
        values=sims.reshape(bank.num_frames, bank.grid_h, bank.grid_w),
    )


def layer_selection_histogram(
    routing: RoutingWeights, num_layers: int
) -> HeatmapGrid:
    """Selection counts per bank layer; sums to tokens * top_k."""
    counts = np.bincount(routing.selected.ravel(), minlength=num_layers)
    return HeatmapGrid(
        kind="layer_histogram",
        values=counts.astype(np.float64).reshape(1, 1, num_layers),
    )


def export_heatmap(kind: str, **inputs) -> HeatmapGrid:
    """Dispatch to the kind-specific heatmap builder."""
    if kind == "avg_layer_index":
        return avg_layer_index_heatmap(
            inputs["routing"],
            inputs["layer_indices"],
            inputs["num_frames"],
            inputs["grid_h"],
            inputs["grid_w"],
        )
    if kind == "roi_similarity":
        return roi_similarity_heatmap(
            inputs["bank"], inputs["layer"], inputs["query_token"]
        )
    if kind == "layer_histogram":
        return layer_selection_histogram(inputs["routing"], inputs["num_layers"])
    raise ConfigError(
        f"unknown heatmap kind {kind!r}; expected one of {HEATMAP_KINDS}"
    )


def write_heatmap_csv(grid: HeatmapGrid, path) -> None:
    """Plain CSV (frame blocks stacked vertically) plus a .meta.txt sidecar."""
    path = str(path)
    frames, rows, cols = grid.values.shape
    with open(path, "w") as fh:
        for f in range(frames):
            for r in range(rows):
                fh.write(",".join(repr(v) for v in grid.values[f, r]) + "\n")
    vmin = float(grid.values.min())
    vmax = float(grid.values.max())
    with open(path + ".meta.txt", "w") as fh:
        fh.write(f"kind = {grid.kind}\n")
        fh.write(f"num_frames = {frames}\n")
        fh.write(f"grid_h = {rows}\n")
        fh.write(f"grid_w = {cols}\n")
        fh.write("layout = frame blocks stacked vertically, row-major\n")
        fh.write(f"value_min = {vmin!r}\n")
        fh.write(f"value_max = {vmax!r}\n")
