"""One motion-compensated convolution layer.

Key frames run the dense convolution and cache both the input and the
(pre-activation) output. Non-key frames search the cached input, copy
matched outputs from the cached output map, add the convolution of the
sparse residual, and fall back to dense per-position convolution where
no usable match exists. The activation, when configured, is applied after
reconstruction so the next layer always sees true post-activation
features; the cache keeps pre-activation values because only those
decompose linearly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .ledger import FlopsLedger
from .motion import MotionField, MotionParams, search
from .tensors import (
    ConvSpec,
    FeatureMap,
    conv2d,
    ensure_feature_map,
    load_weights,
    unfold_blocks,
)


def _identity(x: np.ndarray) -> np.ndarray:
    return x.copy()


def _relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def _leaky_relu(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0.0, x, np.float32(0.1) * x)


ACTIVATIONS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "none": _identity,
    "relu": _relu,
    "leaky_relu": _leaky_relu,
}


class LayerError(ValueError):
    """Contract violation in layer usage (missing cache, shape drift)."""


@dataclass
class LayerCache:
    """Previous frame's layer input and pre-activation output."""

    prev_input: np.ndarray
    prev_output: np.ndarray


@dataclass
class NonKeyStats:
    """Cost-relevant outcome of one non-key forward pass.

    ``matched``/``nnz_total`` count positions that were actually served by
    prediction plus residual compensation; positions demoted to the dense
    path (out-of-grid prediction) count as unmatched here even if the
    search matched them.
    """

    positions: int
    matched: int
    demoted: int
    nnz_total: int
    block_size: int
    search_alpha: float

    @property
    def alpha(self) -> float:
        return self.matched / self.positions

    @property
    def beta(self) -> float:
        if self.matched == 0:
            return 0.0
        return self.nnz_total / (self.matched * self.block_size)


class MotionCompLayer:
    """Stateful per-layer operator; frames must arrive in temporal order."""

    def __init__(
        self,
        spec: ConvSpec,
        params: MotionParams | None = None,
        activation: str = "none",
        post_scale=None,
        post_shift=None,
        compensate: bool = True,
    ):
        self.spec = spec
        self.params = params if params is not None else MotionParams()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}; choose from {sorted(ACTIVATIONS)}")
        self.activation = activation
        self.post_scale = self._channel_vec(post_scale, "post_scale")
        self.post_shift = self._channel_vec(post_shift, "post_shift")
        # Ablation switch: with compensation off, matched positions are pure
        # predictions and residuals are never convolved.
        self.compensate = compensate
        self.cache: Optional[LayerCache] = None
        self.last_stats: Optional[NonKeyStats] = None

    def _channel_vec(self, v, name: str) -> Optional[np.ndarray]:
        if v is None:
            return None
        arr = np.asarray(v, dtype=np.float32)
        if arr.shape != (self.spec.out_channels,):
            raise ValueError(f"{name} must have shape ({self.spec.out_channels},), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError(f"{name} contains non-finite values")
        return arr

    @classmethod
    def from_files(cls, weights_path, params) -> "MotionCompLayer":
        """Build from a weights file plus a JSON parameter block (path or
        dict) with keys search_range, threshold, early_stop_density,
        match_max_density, activation."""
        spec = load_weights(weights_path)
        if not isinstance(params, dict):
            params = json.loads(Path(params).read_text())
        motion_keys = {"search_range", "threshold", "early_stop_density", "match_max_density"}
        mp = MotionParams(**{k: params[k] for k in motion_keys if k in params})
        return cls(
            spec=spec,
            params=mp,
            activation=params.get("activation", "none"),
            post_scale=params.get("post_scale"),
            post_shift=params.get("post_shift"),
            compensate=params.get("compensate", True),
        )

    def _affine(self, linear: np.ndarray) -> np.ndarray:
        if self.post_scale is not None:
            linear = linear * self.post_scale[:, None, None]
        if self.post_shift is not None:
            linear = linear + self.post_shift[:, None, None]
        return linear

    def _activate(self, linear: np.ndarray) -> np.ndarray:
        return ACTIVATIONS[self.activation](linear)

    def reset(self) -> None:
        """Drop the cache; the next frame must be a key frame. Idempotent."""
        self.cache = None
        self.last_stats = None

    def forward_key(self, x: FeatureMap, ledger: FlopsLedger) -> FeatureMap:
        """Dense convolution; refreshes the cache with this frame."""
        x = ensure_feature_map(x, channels=self.spec.in_channels)
        linear = self._affine(conv2d(x, self.spec, ledger, category="key"))
        self.cache = LayerCache(prev_input=x.copy(), prev_output=linear)
        self.last_stats = None
        return self._activate(linear)

    def dense_forward(self, x: FeatureMap, ledger: FlopsLedger | None = None) -> FeatureMap:
        """Plain convolution path with no cache side effects (oracle runs)."""
        return self._activate(self._affine(conv2d(x, self.spec, ledger, category="key")))

    def forward_nonkey(
        self,
        x: FeatureMap,
        ledger: FlopsLedger,
        field: MotionField | None = None,
    ) -> FeatureMap:
        """Predict from the cached reference output and compensate residuals.

        Matched positions copy the cached output at the vector-displaced grid
        position (a free copy in the FLOPs model) and add the sparse residual
        convolution; no bias is re-added there because the prediction already
        carries it. Unmatched positions, and matched positions whose
        prediction would fall outside the output grid, are computed densely
        with bias and charged as unmatched work. ``field`` overrides the
        internal search (residuals must have been built against the cache).
        """
        if self.cache is None:
            raise LayerError("no cached reference; process a key frame first")
        x = ensure_feature_map(x, channels=self.spec.in_channels)
        if x.shape != self.cache.prev_input.shape:
            raise LayerError(
                f"input shape {x.shape} differs from cached reference "
                f"{self.cache.prev_input.shape}"
            )
        spec = self.spec
        h, w = x.shape[1], x.shape[2]
        out_h, out_w = spec.out_shape(h, w)
        if field is None:
            field = search(x, self.cache.prev_input, spec, self.params, ledger)
        elif (field.out_h, field.out_w) != (out_h, out_w):
            raise LayerError(
                f"motion field grid {(field.out_h, field.out_w)} does not match "
                f"output grid {(out_h, out_w)}"
            )
        s = spec.stride
        c_out = spec.out_channels
        bsz = spec.block_size

        src_i = np.arange(out_h)[:, None] + field.mv_dy // s
        src_j = np.arange(out_w)[None, :] + field.mv_dx // s
        in_grid = (src_i >= 0) & (src_i < out_h) & (src_j >= 0) & (src_j < out_w)
        served = field.matched & in_grid
        demoted = int(np.count_nonzero(field.matched & ~in_grid))

        out = np.empty((c_out, out_h, out_w), dtype=np.float32)

        mi, mj = np.nonzero(served)
        nnz_total = 0
        if mi.size:
            out[:, mi, mj] = self.cache.prev_output[:, src_i[mi, mj], src_j[mi, mj]]
            ledger.add_pred_bytes(4 * c_out * mi.size)
            if self.compensate:
                dense = np.zeros((mi.size, bsz), dtype=np.float32)
                k, k2 = spec.kernel_size, spec.kernel_size * spec.kernel_size
                for row in range(mi.size):
                    blk = field.residuals[(int(mi[row]), int(mj[row]))]
                    if blk.nnz:
                        flat = blk.channels * k2 + blk.dys * k + blk.dxs
                        dense[row, flat] = blk.values
                        nnz_total += blk.nnz
                contrib = dense @ spec.weights.reshape(c_out, -1).T
                if self.post_scale is not None:
                    contrib = contrib * self.post_scale
                out[:, mi, mj] += contrib.T
                ledger.charge("res", 2 * nnz_total * c_out)

        ui, uj = np.nonzero(~served)
        if ui.size:
            blocks = unfold_blocks(x, spec.kernel_size, s, spec.padding).reshape(-1, bsz)
            vals = blocks[ui * out_w + uj] @ spec.weights.reshape(c_out, -1).T
            if spec.bias is not None:
                vals = vals + spec.bias
            if self.post_scale is not None:
                vals = vals * self.post_scale
            if self.post_shift is not None:
                vals = vals + self.post_shift
            out[:, ui, uj] = vals.T
            ledger.charge("unmatched", 2 * bsz * c_out * ui.size)

        self.cache = LayerCache(prev_input=x.copy(), prev_output=out)
        self.last_stats = NonKeyStats(
            positions=out_h * out_w,
            matched=int(mi.size),
            demoted=demoted,
            nnz_total=nnz_total,
            block_size=bsz,
            search_alpha=field.alpha,
        )
        return self._activate(out)
