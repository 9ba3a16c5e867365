"""Deterministic synthetic sequences with known ground-truth motion.

Scene motion is expressed as the per-frame source displacement (dx, dy):
content now at pixel (y, x) sat at (y + dy, x + dx) one frame earlier, so
(dx, dy) is exactly the vector a correct block search should recover.
Textures are seeded high-entropy uniforms, keeping SAD minima unique so
recovery assertions are well posed.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .tensors import ConvSpec

KINDS = ("static", "global_translate", "block_translate", "noise_mix")


@dataclass(frozen=True)
class SceneSpec:
    kind: str
    height: int = 32
    width: int = 32
    channels: int = 3
    frame_count: int = 12
    seed: int = 0
    motion: tuple[int, int] = (0, 0)  # per-frame source displacement (dx, dy)
    noise_amplitude: float = 0.0
    block: tuple[int, int, int, int] = (0, 0, 8, 8)  # y0, x0, h, w

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown scene kind {self.kind!r}; choose from {KINDS}")
        if self.height < 1 or self.width < 1 or self.channels < 1 or self.frame_count < 1:
            raise ValueError("dims, channels and frame_count must be >= 1")
        if self.noise_amplitude < 0:
            raise ValueError("noise_amplitude must be >= 0")
        dx, dy = self.motion
        span = self.frame_count - 1
        if abs(dx) * span >= self.width or abs(dy) * span >= self.height:
            raise ValueError(
                f"motion {self.motion} over {self.frame_count} frames exceeds "
                f"frame dims {self.height}x{self.width}"
            )
        if self.kind == "block_translate":
            y0, x0, bh, bw = self.block
            if bh < 1 or bw < 1:
                raise ValueError("block dims must be >= 1")
            for t in range(self.frame_count):
                oy, ox = y0 - t * dy, x0 - t * dx
                if oy < 0 or ox < 0 or oy + bh > self.height or ox + bw > self.width:
                    raise ValueError(
                        f"block leaves the frame at frame {t}; shrink motion or frame_count"
                    )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        data = json.loads(text)
        for key in ("motion", "block"):
            if key in data and isinstance(data[key], list):
                data[key] = tuple(data[key])
        return cls(**data)


def _texture(rng: np.random.Generator, channels: int, h: int, w: int) -> np.ndarray:
    return rng.random((channels, h, w), dtype=np.float32)


def _shifted(tex: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """tex sampled at (y + dy, x + dx), zero where the index leaves the frame."""
    c, h, w = tex.shape
    out = np.zeros_like(tex)
    y_lo, y_hi = max(0, -dy), min(h, h - dy)
    x_lo, x_hi = max(0, -dx), min(w, w - dx)
    if y_lo < y_hi and x_lo < x_hi:
        out[:, y_lo:y_hi, x_lo:x_hi] = tex[:, y_lo + dy : y_hi + dy, x_lo + dx : x_hi + dx]
    return out


def generate(spec: SceneSpec) -> list[np.ndarray]:
    """Frames realizing the declared motion exactly (integer shifts, zero
    fill at exposed borders); identical specs give bit-identical output."""
    rng = np.random.default_rng(spec.seed)
    tex = _texture(rng, spec.channels, spec.height, spec.width)
    dx, dy = spec.motion
    frames: list[np.ndarray] = []

    if spec.kind == "static":
        frames = [tex.copy() for _ in range(spec.frame_count)]
    elif spec.kind == "global_translate":
        frames = [_shifted(tex, t * dy, t * dx) for t in range(spec.frame_count)]
    elif spec.kind == "block_translate":
        block_tex = rng.random(
            (spec.channels, spec.block[2], spec.block[3]), dtype=np.float32
        )
        y0, x0, bh, bw = spec.block
        for t in range(spec.frame_count):
            frame = tex.copy()
            oy, ox = y0 - t * dy, x0 - t * dx
            frame[:, oy : oy + bh, ox : ox + bw] = block_tex
            frames.append(frame)
    elif spec.kind == "noise_mix":
        # noise rides on top of the declared motion; motion (0, 0) degenerates
        # to a static scene with per-frame noise
        for t in range(spec.frame_count):
            base = _shifted(tex, t * dy, t * dx)
            noise = rng.uniform(
                -spec.noise_amplitude, spec.noise_amplitude, size=tex.shape
            ).astype(np.float32)
            frames.append(np.clip(base + noise, 0.0, 1.0))
    return frames


@dataclass
class GroundTruthMotion:
    """Expected search outcome for one non-key frame.

    ``mv`` is the uniform expected vector where one exists; block scenes
    provide per-position vectors instead. ``interior_mask`` restricts
    assertions to positions whose receptive fields stay clear of frame
    borders, fill regions, and (for block scenes) occlusion boundaries.
    """

    frame_index: int
    scene: SceneSpec
    mv: Optional[tuple[int, int]] = None  # (dx, dy)

    def mv_arrays(self, spec: ConvSpec, out_h: int, out_w: int) -> tuple[np.ndarray, np.ndarray]:
        """Per-position expected (dy, dx) arrays on the output grid."""
        dy = np.zeros((out_h, out_w), dtype=np.int32)
        dx = np.zeros((out_h, out_w), dtype=np.int32)
        if self.scene.kind in ("static", "global_translate", "noise_mix"):
            dx[:], dy[:] = self.mv
            return dy, dx
        # block scene: block positions move, the rest is static background
        mdx, mdy = self.scene.motion
        inside = self._block_position_mask(spec, out_h, out_w)
        dy[inside], dx[inside] = mdy, mdx
        return dy, dx

    def _field_bounds(self, spec: ConvSpec, out_h: int, out_w: int):
        k, s, p = spec.kernel_size, spec.stride, spec.padding
        i = np.arange(out_h)
        j = np.arange(out_w)
        y_first = i * s - p
        x_first = j * s - p
        return y_first, y_first + k - 1, x_first, x_first + k - 1

    def _block_position_mask(self, spec: ConvSpec, out_h: int, out_w: int) -> np.ndarray:
        t = self.frame_index
        y0, x0, bh, bw = self.scene.block
        mdx, mdy = self.scene.motion
        oy, ox = y0 - t * mdy, x0 - t * mdx
        y_lo, y_hi, x_lo, x_hi = self._field_bounds(spec, out_h, out_w)
        # field inside the block at t AND its match inside the block at t-1
        rows = (y_lo >= oy) & (y_hi <= oy + bh - 1)
        cols = (x_lo >= ox) & (x_hi <= ox + bw - 1)
        return rows[:, None] & cols[None, :]

    def interior_mask(self, spec: ConvSpec) -> np.ndarray:
        """Positions where exact recovery of the expected vector is forced."""
        h, w = self.scene.height, self.scene.width
        out_h, out_w = spec.out_shape(h, w)
        t = self.frame_index
        y_lo, y_hi, x_lo, x_hi = self._field_bounds(spec, out_h, out_w)

        if self.scene.kind in ("static", "noise_mix"):
            rows = (y_lo >= 0) & (y_hi <= h - 1)
            cols = (x_lo >= 0) & (x_hi <= w - 1)
            return rows[:, None] & cols[None, :]

        if self.scene.kind == "global_translate":
            mdx, mdy = self.scene.motion
            # live texture in the current frame, the matched read in-frame,
            # and no convolution padding inside the current block
            row_min = max(0, -mdy, -t * mdy)
            row_max = h - 1 - max(0, mdy, t * mdy)
            col_min = max(0, -mdx, -t * mdx)
            col_max = w - 1 - max(0, mdx, t * mdx)
            rows = (y_lo >= row_min) & (y_hi <= row_max)
            cols = (x_lo >= col_min) & (x_hi <= col_max)
            return rows[:, None] & cols[None, :]

        # block_translate: inside-block positions as computed above, plus
        # background positions whose fields avoid the block at both frames
        inside = self._block_position_mask(spec, out_h, out_w)
        y0, x0, bh, bw = self.scene.block
        mdx, mdy = self.scene.motion
        in_frame = ((y_lo >= 0) & (y_hi <= h - 1))[:, None] & ((x_lo >= 0) & (x_hi <= w - 1))[None, :]
        clear = in_frame.copy()
        for tt in (t, t - 1):
            oy, ox = y0 - tt * mdy, x0 - tt * mdx
            overlap_rows = (y_hi >= oy) & (y_lo <= oy + bh - 1)
            overlap_cols = (x_hi >= ox) & (x_lo <= ox + bw - 1)
            clear &= ~(overlap_rows[:, None] & overlap_cols[None, :])
        return inside | clear


def expected_motion(spec: SceneSpec, frame_index: int) -> GroundTruthMotion:
    """Ground truth the search should recover at interior positions of frame
    ``frame_index`` against frame ``frame_index - 1``. Refused for scenes
    without well-defined motion (noise above zero amplitude)."""
    if not 1 <= frame_index < spec.frame_count:
        raise ValueError(f"frame_index must be in [1, {spec.frame_count}), got {frame_index}")
    if spec.kind == "noise_mix" and spec.noise_amplitude > 0:
        raise ValueError("noise_mix scenes with nonzero amplitude have no ground-truth motion")
    if spec.kind in ("static", "noise_mix"):
        return GroundTruthMotion(frame_index, spec, mv=(0, 0))
    if spec.kind == "global_translate":
        return GroundTruthMotion(frame_index, spec, mv=spec.motion)
    return GroundTruthMotion(frame_index, spec, mv=None)


def random_conv_spec(
    rng: np.random.Generator,
    in_channels: int,
    out_channels: int,
    kernel_size: int = 3,
    stride: int = 1,
    padding: int | None = None,
    bias: bool = True,
) -> ConvSpec:
    """Seeded layer with uniform Glorot-scaled weights."""
    if padding is None:
        padding = kernel_size // 2
    fan_in = in_channels * kernel_size**2
    fan_out = out_channels * kernel_size**2
    bound = float(np.sqrt(6.0 / (fan_in + fan_out)))
    weights = rng.uniform(-bound, bound, size=(out_channels, in_channels, kernel_size, kernel_size))
    b = rng.uniform(-0.1, 0.1, size=out_channels) if bias else None
    return ConvSpec(weights=weights.astype(np.float32),
                    bias=None if b is None else b.astype(np.float32),
                    stride=stride, padding=padding)
