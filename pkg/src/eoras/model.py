"""End-to-end model: per-object front-view encoder, BEV branch, slot fusion
across frames in both directions, and a deconvolution decoder emitting full
and visible mask logits.

Each forward pass handles one (sequence, object) pair: the object identity
enters as a fourth input channel (the track-box indicator, or the visible
mask itself when input_mode="sg_visible_mask"). Ground-truth visible masks
are consumed only by the loss and by the SG input mode, never by the plain
prediction path.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError, UsageError
from .fusion import FusionDirection, TokenSet, TokenEmbedder, concat_streams
from .geometry import (BevCompressor, VoxelGridSpec, volume_sample_points,
                       volume_to_channels)
from .params import ParameterStore
from .rng import Rng
from .tensor import (Tensor, bilinear_sample_batch, concat, conv2d,
                     conv_transpose2d, gelu, matmul, mean_, mul_const, neg,
                     pow_const, reshape, sigmoid, softplus, sum_,
                     take_slice, transpose)

INPUT_MODES = ("box_channel", "sg_visible_mask")


@dataclass
class ModelConfig:
    image_size: int = 48
    encoder_channels: tuple = (16, 32, 64)   # widths of the three stride-2 blocks
    feature_channels: int = 64               # encoder output width
    d: int = 32                              # fusion token width
    n_slots: int = 8
    depth: int = 2                           # layers per fusion stack
    heads: int = 4
    ff_hidden: int = 64
    bev_input_channels: int = 8              # 1x1 reduction before volume sampling
    bev_hidden: int = 24
    bev_channels: int = 24
    grid_m: int = 16
    grid_n: int = 16
    grid_h: int = 8
    grid_width: tuple = (-4.0, 4.0)
    grid_depth: tuple = (0.5, 8.5)
    grid_height: tuple = (-2.0, 2.0)
    decoder_channels: tuple = (48, 24, 12)
    use_bev: bool = True
    use_temporal: bool = True
    use_bidirectional: bool = True
    input_mode: str = "box_channel"
    strict_ff: bool = False                  # drop the feed-forward residual

    def __post_init__(self):
        if self.image_size % 8:
            raise ConfigError(f"image_size {self.image_size} must be divisible by 8")
        if len(self.encoder_channels) != 3:
            raise ConfigError("encoder_channels must list the three stride-2 widths")
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {INPUT_MODES}")
        if self.d % self.heads:
            raise ConfigError(f"heads {self.heads} must divide d {self.d}")

    @property
    def feature_size(self) -> int:
        return self.image_size // 8

    def grid_spec(self) -> VoxelGridSpec:
        return VoxelGridSpec.regular(self.grid_m, self.grid_n, self.grid_h,
                                     self.grid_width, self.grid_depth, self.grid_height)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ModelConfig":
        raw = json.loads(text)
        for key in ("encoder_channels", "decoder_channels", "grid_width",
                    "grid_depth", "grid_height"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return ModelConfig(**raw)


@dataclass
class MaskPrediction:
    full_logits: np.ndarray      # [H, W]
    visible_logits: np.ndarray   # [H, W]
    object_id: int
    frame_index: int

    def full_mask(self) -> np.ndarray:
        return self.full_logits > 0.0

    def visible_mask(self) -> np.ndarray:
        return self.visible_logits > 0.0


def box_mask(box, size: int) -> np.ndarray:
    """Filled rectangle [H, W] from an inclusive (r0, c0, r1, c1) box; an
    absent box (lost track) gives an all-zero channel."""
    m = np.zeros((size, size))
    if box is not None:
        r0, c0, r1, c1 = box
        m[r0:r1 + 1, c0:c1 + 1] = 1.0
    return m


class ConvBlock:
    def __init__(self, store, name, cin, cout, k, stride, pad, rng):
        self.w = store.parameter(f"{name}.weight", (cout, cin, k, k), "fan_in_uniform", rng)
        self.b = store.parameter(f"{name}.bias", (cout, 1, 1), "zeros", rng)
        self.stride, self.pad = stride, pad

    def __call__(self, x: Tensor) -> Tensor:
        return conv2d(x, self.w, self.stride, self.pad) + self.b


class DeconvBlock:
    def __init__(self, store, name, cin, cout, k, stride, rng):
        self.w = store.parameter(f"{name}.weight", (cin, cout, k, k), "fan_in_uniform", rng,
                                 fan_in=cin * k * k)
        self.b = store.parameter(f"{name}.bias", (cout, 1, 1), "zeros", rng)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.w, self.stride, 0) + self.b


class FrontEncoder:
    """Three stride-2 conv blocks plus a linear head: [B,4,H,W] -> [B,c,H/8,W/8]."""

    def __init__(self, store: ParameterStore, cfg: ModelConfig, rng: Rng):
        e1, e2, e3 = cfg.encoder_channels
        self.blocks = [
            ConvBlock(store, "encoder.conv1", 4, e1, 3, 2, 1, rng),
            ConvBlock(store, "encoder.conv2", e1, e2, 3, 2, 1, rng),
            ConvBlock(store, "encoder.conv3", e2, e3, 3, 2, 1, rng),
        ]
        self.head = ConvBlock(store, "encoder.conv4", e3, cfg.feature_channels, 1, 1, 0, rng)

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = gelu(blk(x))
        return self.head(x)


class MaskDecoder:
    """Three x2 deconvolutions back to image resolution, then a 1x1 conv to
    two logit channels: 0 = full mask, 1 = visible mask."""

    def __init__(self, store: ParameterStore, cfg: ModelConfig, rng: Rng):
        c1, c2, c3 = cfg.decoder_channels
        self.blocks = [
            DeconvBlock(store, "decoder.deconv1", 2 * cfg.d, c1, 2, 2, rng),
            DeconvBlock(store, "decoder.deconv2", c1, c2, 2, 2, rng),
            DeconvBlock(store, "decoder.deconv3", c2, c3, 2, 2, rng),
        ]
        self.head = ConvBlock(store, "decoder.head", c3, 2, 1, 1, 0, rng)

    def __call__(self, x: Tensor) -> Tensor:
        for blk in self.blocks:
            x = gelu(blk(x))
        return self.head(x)


class AmodalNet:
    def __init__(self, cfg: ModelConfig, store: Optional[ParameterStore] = None,
                 seed: int = 0):
        self.cfg = cfg
        self.store = store if store is not None else ParameterStore()
        rng = Rng(seed)
        fs = cfg.feature_size
        self.encoder = FrontEncoder(self.store, cfg, rng)
        self.front_tokens = TokenEmbedder(self.store, "tokens.front", cfg.feature_channels,
                                          cfg.d, (fs, fs), rng)
        if cfg.use_bev:
            self.bev_reduce = ConvBlock(self.store, "bev.reduce", cfg.feature_channels,
                                        cfg.bev_input_channels, 1, 1, 0, rng)
            self.bev_compressor = BevCompressor(self.store, "bev.compress",
                                                cfg.bev_input_channels * cfg.grid_h,
                                                cfg.bev_hidden, cfg.bev_channels, rng)
            self.bev_tokens = TokenEmbedder(self.store, "tokens.bev", cfg.bev_channels,
                                            cfg.d, (cfg.grid_m, cfg.grid_n), rng)
        if cfg.use_temporal:
            self.fwd = FusionDirection(self.store, "fusion.fwd", cfg.d, cfg.n_slots,
                                       cfg.depth, cfg.heads, cfg.ff_hidden, rng,
                                       cfg.use_bev, cfg.strict_ff)
            if cfg.use_bidirectional:
                self.bwd = FusionDirection(self.store, "fusion.bwd", cfg.d, cfg.n_slots,
                                           cfg.depth, cfg.heads, cfg.ff_hidden, rng,
                                           cfg.use_bev, cfg.strict_ff)
        self.decoder = MaskDecoder(self.store, cfg, rng)
        self.grid = cfg.grid_spec()

    # ------------------------------------------------------------------
    def encode_front(self, frame: Tensor, hint: Tensor) -> Tensor:
        """Single-frame [3,H,W] + [1,H,W] -> [c, H/8, W/8]."""
        if frame.shape[1:] != hint.shape[1:]:
            raise ConfigError(f"frame {frame.shape} and hint {hint.shape} sizes differ")
        x = concat([frame, hint], axis=0)
        out = self.encoder(reshape(x, (1,) + x.shape))
        return reshape(out, out.shape[1:])

    def decode_masks(self, refined: Tensor, object_id: int = 0,
                     frame_index: int = 0) -> MaskPrediction:
        """Single-frame [2d, Hf, Wf] -> logits pair at image resolution."""
        out = self.decoder(reshape(refined, (1,) + refined.shape))
        return MaskPrediction(out.data[0, 0], out.data[0, 1], object_id, frame_index)

    # ------------------------------------------------------------------
    def _hints(self, seq, k: int) -> np.ndarray:
        T = seq.num_frames
        if k < 0 or k >= seq.num_objects:
            raise DataError(f"object {k} not present in sequence (K={seq.num_objects})")
        H = self.cfg.image_size
        if self.cfg.input_mode == "sg_visible_mask":
            return seq.visible_masks[:, k].astype(np.float64).reshape(T, 1, H, H)
        return np.stack([box_mask(seq.boxes[t][k], H) for t in range(T)]).reshape(T, 1, H, H)

    def _token_batch(self, feat: Tensor, embedder: TokenEmbedder) -> Tensor:
        """[B, c, H, W] -> [B, H*W, d] with positions added."""
        B, c, H, W = feat.shape
        flat = transpose(reshape(feat, (B, c, H * W)), (0, 2, 1))
        return matmul(flat, embedder.proj.w) + embedder.proj.b + embedder.pos

    def forward_logits_multi(self, seq, ks: list[int]) -> Tensor:
        """Pipeline for several objects at once: [K, T, 2, H, W] logits.
        The whole pass is batched over objects; only the hint channel
        differs between them."""
        cfg = self.cfg
        T = seq.num_frames
        H = cfg.image_size
        K = len(ks)
        if seq.frames.shape[-1] != H:
            raise ConfigError(f"sequence image size {seq.frames.shape[-1]} != model {H}")
        hints = np.stack([self._hints(seq, k) for k in ks])          # [K,T,1,H,W]
        frames = np.broadcast_to(seq.frames[None], (K, T, 3, H, H))
        x = np.concatenate([frames, hints], axis=2).reshape(K * T, 4, H, H)
        feat = self.encoder(Tensor(x))                                # [K*T, c, fs, fs]
        fs = cfg.feature_size

        if cfg.use_temporal:
            front_all = self._token_batch(feat, self.front_tokens)    # [K*T, Lf, d]
            front_all = reshape(front_all, (K, T, fs * fs, cfg.d))
            bev_all = None
            if cfg.use_bev:
                reduced = self.bev_reduce(feat)                       # [K*T, cb, fs, fs]
                uv = volume_sample_points(seq.intrinsics, self.grid, (H, H), (fs, fs))
                vol = bilinear_sample_batch(reduced, uv)              # [K*T, cb, m*n*h]
                vol = reshape(vol, (K * T, cfg.bev_input_channels,
                                    cfg.grid_m, cfg.grid_n, cfg.grid_h))
                stacked = volume_to_channels(vol, cfg.grid_h)         # [K*T, cb*h, m, n]
                bev_maps = self.bev_compressor(stacked)
                bev_all = self._token_batch(bev_maps, self.bev_tokens)
                bev_all = reshape(bev_all, (K, T, cfg.grid_m * cfg.grid_n, cfg.d))
            stream_frames = []
            for t in range(T):
                front_t = TokenSet(take_slice(front_all, (slice(None), t)),
                                   "front", (fs, fs))
                bev_t = (TokenSet(take_slice(bev_all, (slice(None), t)),
                                  "bev", (cfg.grid_m, cfg.grid_n))
                         if bev_all is not None else None)
                stream_frames.append((front_t, bev_t))
            fwd_refined = self.fwd.run_stream(stream_frames)
            if cfg.use_bidirectional:
                bwd_refined = self.bwd.run_stream(stream_frames, backward_time=True)
            else:
                bwd_refined = fwd_refined
            maps = concat_streams(fwd_refined, bwd_refined)           # T x [K, 2d, fs, fs]
            per_frame = [reshape(m, (K, 1, 2 * cfg.d, fs, fs)) for m in maps]
            dec_in = reshape(concat(per_frame, axis=1), (K * T, 2 * cfg.d, fs, fs))
        else:
            tokens = self._token_batch(feat, self.front_tokens)       # [K*T, Lf, d]
            m = reshape(transpose(tokens, (0, 2, 1)), (K * T, cfg.d, fs, fs))
            dec_in = concat([m, m], axis=1)

        out = self.decoder(dec_in)                                    # [K*T, 2, H, W]
        return reshape(out, (K, T, 2, H, H))

    def forward_logits(self, seq, k: int) -> Tensor:
        """Full pipeline for a single object: [T, 2, H, W] logits."""
        out = self.forward_logits_multi(seq, [k])
        return reshape(out, out.shape[1:])

    def forward_video(self, seq, object_index: Optional[int] = None) -> list[MaskPrediction]:
        """Predictions for one object, or for every object when index is None."""
        ks = list(range(seq.num_objects)) if object_index is None else [object_index]
        logits = self.forward_logits_multi(seq, ks).data
        preds: list[MaskPrediction] = []
        for i, k in enumerate(ks):
            for t in range(seq.num_frames):
                preds.append(MaskPrediction(logits[i, t, 0], logits[i, t, 1], k, t))
        return preds

    # ------------------------------------------------------------------
    def loss_on_sequence(self, seq, lam: float = 1.0, gamma: float = 2.0,
                         strict_sum: bool = False) -> Tensor:
        """Training loss over every object of one sequence: focal terms on
        the full-mask head plus lam times the visible-mask head, reduced as
        per-instance means (literal sums with strict_sum)."""
        ks = list(range(seq.num_objects))
        logits = self.forward_logits_multi(seq, ks)          # [K, T, 2, H, W]
        full = take_slice(logits, (slice(None), slice(None), 0))
        vis = take_slice(logits, (slice(None), slice(None), 1))
        gt_full = np.swapaxes(seq.full_masks, 0, 1).astype(np.float64)
        gt_vis = np.swapaxes(seq.visible_masks, 0, 1).astype(np.float64)
        lf = focal_instances(full, gt_full, gamma, strict_sum)
        lv = focal_instances(vis, gt_vis, gamma, strict_sum)
        return lf + mul_const(lv, lam)


def _check_binary(target: np.ndarray) -> None:
    if not np.all((target == 0) | (target == 1)):
        raise UsageError("focal loss targets must be binary {0,1}")


def focal_pixelwise(logits: Tensor, target: np.ndarray, gamma: float) -> Tensor:
    """Per-pixel focal terms, computed in the stable logit domain:
    with s = logit * (2y - 1), the term is sigmoid(-s)^gamma * softplus(-s)."""
    _check_binary(target)
    if logits.shape != target.shape:
        raise ConfigError(f"logits {logits.shape} vs target {target.shape}")
    signed = neg(mul_const(logits, 2.0 * target - 1.0))
    return pow_const(sigmoid(signed), gamma) * softplus(signed)


def focal_loss(logits: Tensor, target: np.ndarray, gamma: float = 2.0) -> Tensor:
    """Mean over pixels of the focal term (no class weighting)."""
    return mean_(focal_pixelwise(logits, target, gamma))


def focal_instances(logits: Tensor, target: np.ndarray, gamma: float,
                    strict_sum: bool) -> Tensor:
    """Reduce [..., H, W] per-pixel focal terms to a scalar: pixel means per
    leading instance, then a mean (default) or literal sum (strict)."""
    H, W = logits.shape[-2:]
    n = int(np.prod(logits.shape[:-2]))
    px = focal_pixelwise(logits, target, gamma)
    per_instance = mean_(reshape(px, (n, H * W)), axis=1)
    return sum_(per_instance) if strict_sum else mean_(per_instance)


def total_loss(logits: list[tuple[Tensor, Tensor]], gt_full: list[np.ndarray],
               gt_visible: list[np.ndarray], lam: float = 1.0, gamma: float = 2.0,
               strict_sum: bool = False) -> Tensor:
    """Loss over an explicit list of (full, visible) logit pairs, one per
    (frame, object) instance: full-mask terms plus lam times visible-mask
    terms, reduced as means over instances (sums when strict)."""
    if not (len(logits) == len(gt_full) == len(gt_visible)):
        raise UsageError("total_loss: prediction/target counts differ")
    fulls, viss = [], []
    for (fl, vl), gf, gv in zip(logits, gt_full, gt_visible):
        fulls.append(reshape(focal_loss(fl, gf, gamma), (1,)))
        viss.append(reshape(focal_loss(vl, gv, gamma), (1,)))
    lf = concat(fulls, axis=0)
    lv = concat(viss, axis=0)
    if strict_sum:
        return sum_(lf) + mul_const(sum_(lv), lam)
    return mean_(lf) + mul_const(mean_(lv), lam)
