"""Drives a layer stack over a frame sequence with fixed-length GOPs.

The first frame of every GOP is a key frame: all layer caches reset and
every layer runs its dense path. Remaining frames run prediction plus
residual compensation layer by layer. Optionally a plain-convolution
pipeline runs alongside to report per-frame output deviation; it never
feeds back into the pipeline.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .ledger import FlopsLedger
from .layer import MotionCompLayer
from .motion import MotionParams
from .tensors import FeatureMap, ensure_feature_map


@dataclass(frozen=True)
class GopConfig:
    """Sequence-level controls. ``gop_length=1`` degenerates to all-key
    processing. ``motion`` overrides layer search params: one value for all
    layers or one per layer. ``oracle`` doubles compute for error stats."""

    gop_length: int = 12
    motion: MotionParams | Sequence[MotionParams] | None = None
    oracle: bool = False

    def __post_init__(self):
        if self.gop_length < 1:
            raise ValueError(f"gop_length must be >= 1, got {self.gop_length}")


def segment(frame_count: int, gop_length: int) -> list[int]:
    """Key-frame indices {0, L, 2L, ...} below frame_count."""
    if frame_count < 1:
        raise ValueError(f"frame_count must be >= 1, got {frame_count}")
    if gop_length < 1:
        raise ValueError(f"gop_length must be >= 1, got {gop_length}")
    return list(range(0, frame_count, gop_length))


class Network:
    """Ordered stack of motion-compensated layers."""

    def __init__(self, layers: Sequence[MotionCompLayer]):
        if not layers:
            raise ValueError("network needs at least one layer")
        for a, b in zip(layers, layers[1:]):
            if a.spec.out_channels != b.spec.in_channels:
                raise ValueError(
                    f"adjacent layers incompatible: {a.spec.out_channels} out vs "
                    f"{b.spec.in_channels} in"
                )
        self.layers = list(layers)

    def __len__(self) -> int:
        return len(self.layers)

    def reset_all(self) -> None:
        for layer in self.layers:
            layer.reset()

    def plain_forward(self, x: FeatureMap, ledger: FlopsLedger | None = None) -> FeatureMap:
        """Dense pipeline output for one frame; no cache side effects."""
        for layer in self.layers:
            x = layer.dense_forward(x, ledger)
        return x

    @classmethod
    def from_json(cls, path) -> "Network":
        """Load a network description: {"layers": [{"weights": ..., "params":
        {...}}, ...]}. Relative weight paths resolve against the JSON file."""
        path = Path(path)
        desc = json.loads(path.read_text())
        layers = []
        for entry in desc["layers"]:
            weights = Path(entry["weights"])
            if not weights.is_absolute():
                weights = path.parent / weights
            params = dict(entry.get("params", {}))
            for extra in ("post_scale", "post_shift", "compensate"):
                if extra in entry:
                    params[extra] = entry[extra]
            layers.append(MotionCompLayer.from_files(weights, params))
        return cls(layers)


@dataclass
class LayerFrameRecord:
    """Exact cost and match statistics for one layer on one frame."""

    frame: int
    layer: int
    is_key: bool
    flops: dict[str, int]
    pred_bytes: int
    kernel_size: int
    stride: int
    padding: int
    in_channels: int
    out_channels: int
    out_h: int
    out_w: int
    search_range: int
    positions: int
    matched: Optional[int] = None
    demoted: int = 0
    nnz_total: int = 0
    block_size: int = 0
    alpha: Optional[float] = None
    beta: Optional[float] = None
    # match ratio as the search saw it, before out-of-grid demotions
    search_alpha: Optional[float] = None

    @property
    def conv_flops(self) -> int:
        """Dense cost of this layer at these dims (the baseline unit)."""
        return 2 * self.kernel_size**2 * self.in_channels * self.out_channels * self.out_h * self.out_w


@dataclass
class RunResult:
    outputs: list[np.ndarray]
    ledger: FlopsLedger
    records: list[LayerFrameRecord]
    key_indices: list[int]
    baseline_total: int
    oracle_max_abs: Optional[list[float]] = None
    oracle_mean_abs: Optional[list[float]] = None


def _apply_motion_overrides(net: Network, config: GopConfig) -> None:
    if config.motion is None:
        return
    if isinstance(config.motion, MotionParams):
        for layer in net.layers:
            layer.params = config.motion
        return
    if len(config.motion) != len(net.layers):
        raise ValueError(
            f"{len(config.motion)} motion param blocks for {len(net.layers)} layers"
        )
    for layer, mp in zip(net.layers, config.motion):
        layer.params = mp


def run_sequence(net: Network, frames: Iterable[FeatureMap], config: GopConfig) -> RunResult:
    """Process frames in order, returning outputs, exact ledgers per
    frame/layer, and (in oracle mode) per-frame output deviation."""
    _apply_motion_overrides(net, config)
    ledger = FlopsLedger()
    records: list[LayerFrameRecord] = []
    outputs: list[np.ndarray] = []
    oracle_max: list[float] = []
    oracle_mean: list[float] = []
    expected_shape = None
    baseline_per_frame = 0
    frame_count = 0

    for t, frame in enumerate(frames):
        try:
            x = ensure_feature_map(frame, channels=net.layers[0].spec.in_channels, name=f"frame {t}")
        except ValueError as exc:
            raise ValueError(f"frame {t}: {exc}") from exc
        if expected_shape is None:
            expected_shape = x.shape
            h, w = x.shape[1], x.shape[2]
            for layer in net.layers:
                baseline_per_frame += layer.spec.conv_flops(h, w)
                h, w = layer.spec.out_shape(h, w)
        elif x.shape != expected_shape:
            raise ValueError(
                f"frame {t}: shape {x.shape} drifted from {expected_shape}"
            )
        frame_count += 1

        is_key = (t % config.gop_length) == 0
        if is_key:
            net.reset_all()
        for li, layer in enumerate(net.layers):
            sub = FlopsLedger()
            in_h, in_w = x.shape[1], x.shape[2]
            out_h, out_w = layer.spec.out_shape(in_h, in_w)
            try:
                x = layer.forward_key(x, sub) if is_key else layer.forward_nonkey(x, sub)
            except ValueError as exc:
                raise ValueError(f"frame {t}, layer {li}: {exc}") from exc
            rec = LayerFrameRecord(
                frame=t,
                layer=li,
                is_key=is_key,
                flops=sub.counts(),
                pred_bytes=sub.pred_bytes_moved,
                kernel_size=layer.spec.kernel_size,
                stride=layer.spec.stride,
                padding=layer.spec.padding,
                in_channels=layer.spec.in_channels,
                out_channels=layer.spec.out_channels,
                out_h=out_h,
                out_w=out_w,
                search_range=layer.params.search_range,
                positions=out_h * out_w,
            )
            if not is_key and layer.last_stats is not None:
                st = layer.last_stats
                rec.matched = st.matched
                rec.demoted = st.demoted
                rec.nnz_total = st.nnz_total
                rec.block_size = st.block_size
                rec.alpha = st.alpha
                rec.beta = st.beta
                rec.search_alpha = st.search_alpha
            records.append(rec)
            ledger.merge(sub)
        outputs.append(x)

        if config.oracle:
            ref = net.plain_forward(ensure_feature_map(frame))
            diff = np.abs(outputs[-1].astype(np.float64) - ref.astype(np.float64))
            oracle_max.append(float(diff.max()))
            oracle_mean.append(float(diff.mean()))

    if frame_count == 0:
        raise ValueError("empty frame sequence")
    return RunResult(
        outputs=outputs,
        ledger=ledger,
        records=records,
        key_indices=segment(frame_count, config.gop_length),
        baseline_total=baseline_per_frame * frame_count,
        oracle_max_abs=oracle_max if config.oracle else None,
        oracle_mean_abs=oracle_mean if config.oracle else None,
    )
