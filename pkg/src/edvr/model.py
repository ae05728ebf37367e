"""EDVR network: extraction, PCD alignment, TSA fusion, reconstruction.

Clips are numpy arrays of shape (B, T, 3, H, W) in [0, 1] (a single clip may
be passed as (T, 3, H, W)). Frames are folded into the batch axis as
``b*T + t`` so per-frame work runs as one batched op; the folded tensor
(B*T, C, H, W) reshapes for free into (B, T*C, H, W), which is exactly the
channel concatenation the fusion convolution consumes.
"""
import dataclasses

import numpy as np

from . import tensor as T
from .deform import ModulatedDeformConv
from .nn import Conv2d, Module, ResidualBlock, lrelu, name_parameters, run_blocks
from .tensor import ShapeError


@dataclasses.dataclass
class EdvrConfig:
    n_frames: int = 5
    channels: int = 32
    pyramid_levels: int = 3
    extract_blocks: int = 5
    recon_blocks: int = 10
    scale: int = 4
    predeblur: bool = False
    hr_input: bool = False
    deform_groups: int = 1
    align: str = "pcd"  # pcd | single_dcn
    fusion: str = "tsa"  # tsa | concat
    identity_init: bool = False
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def center(self):
        return self.n_frames // 2

    @property
    def spatial_multiple(self):
        """Input H and W must be multiples of this."""
        return 16 if self.hr_input else 4

    def validate(self):
        if self.n_frames < 3 or self.n_frames % 2 == 0:
            raise ValueError(f"n_frames must be odd and >= 3, got {self.n_frames}")
        if self.pyramid_levels != 3:
            raise ValueError(f"pyramid_levels must be 3, got {self.pyramid_levels}")
        if self.scale not in (1, 4):
            raise ValueError(f"scale must be 1 or 4, got {self.scale}")
        if self.hr_input and self.scale != 1:
            raise ValueError("hr_input requires scale 1")
        if self.channels < 1 or self.channels % self.deform_groups:
            raise ValueError(f"channels {self.channels} not divisible by deform_groups {self.deform_groups}")
        if self.align not in ("pcd", "single_dcn"):
            raise ValueError(f"unknown align mode {self.align!r}")
        if self.fusion not in ("tsa", "concat"):
            raise ValueError(f"unknown fusion mode {self.fusion!r}")
        if self.extract_blocks < 0 or self.recon_blocks < 0:
            raise ValueError("block counts must be non-negative")


class OffsetHead(Module):
    """Zero-initialised conv emitting offsets (2KG channels) and modulation logits (KG)."""

    def __init__(self, rng, ch, taps, groups):
        self.n_off = 2 * taps * groups
        self.n_mod = taps * groups
        self.conv = Conv2d(rng, ch, self.n_off + self.n_mod, 3, init="zeros")

    def forward(self, feat):
        out = self.conv(feat)
        offsets = T.slice_channels(out, 0, self.n_off)
        modulation = T.sigmoid(T.slice_channels(out, self.n_off, self.n_off + self.n_mod))
        return offsets, modulation


class PreDeblur(Module):
    """Two-level pyramid with three residual blocks; C -> C, same size."""

    def __init__(self, rng, ch):
        self.down = Conv2d(rng, ch, ch, 3, stride=2)
        self.rb_l2 = ResidualBlock(rng, ch)
        self.rb_l1 = ResidualBlock(rng, ch)
        self.rb_out = ResidualBlock(rng, ch)

    def forward(self, x):
        l2 = self.rb_l2(lrelu(self.down(x)))
        return self.rb_out(self.rb_l1(x) + T.bilinear_resize(l2, 2))


class PyramidBuilder(Module):
    """Level l+1 = lrelu(conv(lrelu(strided_conv(level l)))); channels fixed."""

    def __init__(self, rng, ch, levels=3):
        self.down = [Conv2d(rng, ch, ch, 3, stride=2) for _ in range(levels - 1)]
        self.refine = [Conv2d(rng, ch, ch, 3) for _ in range(levels - 1)]

    def forward(self, feat):
        _, _, h, w = feat.shape
        f = 2 ** len(self.down)
        if h % f or w % f:
            raise ShapeError(f"feature pyramid: spatial size {h}x{w} not divisible by {f}")
        levels = [feat]
        for down, refine in zip(self.down, self.refine):
            levels.append(lrelu(refine(lrelu(down(levels[-1])))))
        return levels


def build_feature_pyramid(frame_features, builder):
    return builder(frame_features)


class PcdAlign(Module):
    """Pyramid, cascading and deformable alignment of one pyramid to another.

    Offsets predicted at a coarser level are bilinearly upsampled, doubled (one
    coarse pixel spans two fine ones), fed to the finer predictor, and also
    added to its output so each finer level predicts a correction.
    """

    def __init__(self, rng, ch, groups=1, levels=3):
        taps = 9
        self.levels = levels
        n_off = 2 * taps * groups
        self.off_conv1 = [Conv2d(rng, 2 * ch, ch, 3) for _ in range(levels)]
        # coarsest level has no upsampled offsets to consume
        self.off_conv2 = [Conv2d(rng, ch + (n_off if lv < levels - 1 else 0), ch, 3) for lv in range(levels)]
        self.heads = [OffsetHead(rng, ch, taps, groups) for _ in range(levels)]
        self.dcns = [ModulatedDeformConv(rng, ch, ch, 3, groups) for _ in range(levels)]
        self.fea_conv = [Conv2d(rng, 2 * ch, ch, 3) for _ in range(levels - 1)]
        self.cas_conv1 = Conv2d(rng, 2 * ch, ch, 3)
        self.cas_conv2 = Conv2d(rng, ch, ch, 3)
        self.cas_head = OffsetHead(rng, ch, taps, groups)
        self.cas_dcn = ModulatedDeformConv(rng, ch, ch, 3, groups)

    def forward(self, nbr, ref, diagnostics=None):
        if len(nbr) != self.levels or len(ref) != self.levels:
            raise ShapeError(f"pcd_align: expected {self.levels} pyramid levels, got {len(nbr)} and {len(ref)}")
        for a, b in zip(nbr, ref):
            if a.shape != b.shape:
                raise ShapeError(f"pcd_align: level shapes differ {a.shape} vs {b.shape}")
        offsets = feat = None
        for lv in reversed(range(self.levels)):
            h = lrelu(self.off_conv1[lv](T.concat_channels([nbr[lv], ref[lv]])))
            if offsets is None:
                h = lrelu(self.off_conv2[lv](h))
                delta, mod = self.heads[lv](h)
                offsets = delta
            else:
                up = T.scale(T.bilinear_resize(offsets, 2), 2.0)
                h = lrelu(self.off_conv2[lv](T.concat_channels([h, up])))
                delta, mod = self.heads[lv](h)
                offsets = delta + up
            aligned = self.dcns[lv](nbr[lv], offsets, mod)
            if feat is None:
                feat = lrelu(aligned)
            else:
                merged = self.fea_conv[lv](T.concat_channels([aligned, T.bilinear_resize(feat, 2)]))
                feat = lrelu(merged) if lv > 0 else merged
        if diagnostics is not None:
            diagnostics["offsets_l1"] = offsets.data
        h = lrelu(self.cas_conv1(T.concat_channels([feat, ref[0]])))
        h = lrelu(self.cas_conv2(h))
        delta, mod = self.cas_head(h)
        return lrelu(self.cas_dcn(feat, delta, mod))


def pcd_align(neighbor, reference, block, diagnostics=None):
    return block(neighbor, reference, diagnostics)


class SingleDcnAlign(Module):
    """Ablation baseline: one deformable conv at full feature resolution."""

    def __init__(self, rng, ch, groups=1):
        self.off_conv1 = Conv2d(rng, 2 * ch, ch, 3)
        self.off_conv2 = Conv2d(rng, ch, ch, 3)
        self.head = OffsetHead(rng, ch, 9, groups)
        self.dcn = ModulatedDeformConv(rng, ch, ch, 3, groups)

    def forward(self, nbr, ref, diagnostics=None):
        h = lrelu(self.off_conv1(T.concat_channels([nbr[0], ref[0]])))
        h = lrelu(self.off_conv2(h))
        offsets, mod = self.head(h)
        if diagnostics is not None:
            diagnostics["offsets_l1"] = offsets.data
        return lrelu(self.dcn(nbr[0], offsets, mod))


class SpatialAttention(Module):
    """Two-level mask pyramid; output = fused * 2*sigmoid(mask) + add.

    Both heads start at zero, so the block starts as the identity map.
    """

    def __init__(self, rng, ch):
        self.conv1 = Conv2d(rng, ch, ch, 3)
        self.down = Conv2d(rng, ch, ch, 3, stride=2)
        self.conv_l2 = Conv2d(rng, ch, ch, 3)
        self.merge = Conv2d(rng, 2 * ch, ch, 3)
        self.mask_head = Conv2d(rng, ch, ch, 3, init="zeros")
        self.add_head = Conv2d(rng, ch, ch, 3, init="zeros")

    def masks(self, fused):
        att = lrelu(self.conv1(fused))
        l2 = lrelu(self.conv_l2(lrelu(self.down(att))))
        att = lrelu(self.merge(T.concat_channels([att, T.bilinear_resize(l2, 2)])))
        return T.sigmoid(self.mask_head(att)), self.add_head(att)

    def forward(self, fused):
        mask, addend = self.masks(fused)
        return T.mul(fused, T.scale(mask, 2.0)) + addend


class TsaFusion(Module):
    """Temporal attention (embedded dot product), fusion conv, spatial attention."""

    def __init__(self, rng, ch, n_frames):
        self.theta = Conv2d(rng, ch, ch, 3)
        self.phi = Conv2d(rng, ch, ch, 3)
        self.fuse = Conv2d(rng, n_frames * ch, ch, 1)
        self.spatial = SpatialAttention(rng, ch)

    def temporal_attention(self, aligned, batch, n_frames, center):
        """Per-frame (B*T, 1, H, W) maps sigmoid(sum_c theta(F_i) * phi(F_ref))."""
        ref_idx = np.arange(batch) * n_frames + center
        emb_ref = self.phi(T.take_batch(aligned, ref_idx))
        emb_ref = T.take_batch(emb_ref, np.repeat(np.arange(batch), n_frames))
        return T.sigmoid(T.sum_channels(T.mul(self.theta(aligned), emb_ref)))

    def fuse_weighted(self, aligned, maps, batch):
        if maps.shape[0] != aligned.shape[0]:
            raise ShapeError(f"tsa_fuse: {maps.shape[0]} maps for {aligned.shape[0]} frames")
        _, c, h, w = aligned.shape
        weighted = T.mul(aligned, maps)
        stacked = T.reshape(weighted, (batch, -1, h, w))
        if stacked.shape[1] != self.fuse.weight.shape[1]:
            raise ShapeError(f"tsa_fuse: fusion conv expects {self.fuse.weight.shape[1]} channels, got {stacked.shape[1]}")
        return lrelu(self.fuse(stacked))

    def forward(self, aligned, batch, n_frames, center, diagnostics=None):
        maps = self.temporal_attention(aligned, batch, n_frames, center)
        if diagnostics is not None:
            _, _, h, w = maps.shape
            diagnostics["attention"] = maps.data.reshape(batch, n_frames, h, w)
        return self.spatial(self.fuse_weighted(aligned, maps, batch))


def temporal_attention(aligned, block, batch, n_frames, center):
    return block.temporal_attention(aligned, batch, n_frames, center)


def tsa_fuse(aligned, maps, block, batch):
    return block.fuse_weighted(aligned, maps, batch)


def spatial_attention(fused, block):
    return block(fused)


class ConcatFusion(Module):
    """Ablation baseline: plain 1x1 fusion of the concatenated aligned features."""

    def __init__(self, rng, ch, n_frames):
        self.fuse = Conv2d(rng, n_frames * ch, ch, 1)

    def forward(self, aligned, batch, n_frames, center, diagnostics=None):
        _, _, h, w = aligned.shape
        return lrelu(self.fuse(T.reshape(aligned, (batch, -1, h, w))))


class EDVR(Module):
    """Full restoration network for one configuration.

    Args:
        config (EdvrConfig): Architecture hyperparameters; ``config.seed``
            fixes the weight initialisation.
    """

    def __init__(self, config):
        config.validate()
        self.config = config
        rng = np.random.default_rng(config.seed)
        ch = config.channels
        if config.hr_input:
            self.conv_first = [Conv2d(rng, 3, ch, 3), Conv2d(rng, ch, ch, 3, stride=2), Conv2d(rng, ch, ch, 3, stride=2)]
        else:
            self.conv_first = [Conv2d(rng, 3, ch, 3)]
        self.extract = [ResidualBlock(rng, ch) for _ in range(config.extract_blocks)]
        self.predeblur = PreDeblur(rng, ch) if config.predeblur else None
        if config.align == "pcd":
            self.pyramid = PyramidBuilder(rng, ch, config.pyramid_levels)
            self.align = PcdAlign(rng, ch, config.deform_groups, config.pyramid_levels)
        else:
            self.pyramid = None
            self.align = SingleDcnAlign(rng, ch, config.deform_groups)
        if config.fusion == "tsa":
            self.fusion = TsaFusion(rng, ch, config.n_frames)
        else:
            self.fusion = ConcatFusion(rng, ch, config.n_frames)
        self.recon = [ResidualBlock(rng, ch) for _ in range(config.recon_blocks)]
        if config.scale == 4 or config.hr_input:
            self.upconv = [Conv2d(rng, ch, 4 * ch, 3), Conv2d(rng, ch, 4 * ch, 3)]
        else:
            self.upconv = []
        self.hr_conv = Conv2d(rng, ch, ch, 3)
        self.conv_last = Conv2d(rng, ch, 3, 3, init="zeros" if config.identity_init else "kaiming", scale=0.1)
        name_parameters(self)

    def check_input(self, clip):
        cfg = self.config
        if clip.ndim != 5 or clip.shape[2] != 3:
            raise ShapeError(f"edvr: clip must be (B, T, 3, H, W), got {clip.shape}")
        if clip.shape[1] != cfg.n_frames:
            raise ShapeError(f"edvr: clip has {clip.shape[1]} frames, model expects {cfg.n_frames}")
        m = cfg.spatial_multiple
        if clip.shape[3] % m or clip.shape[4] % m:
            raise ShapeError(f"edvr: frame size {clip.shape[3]}x{clip.shape[4]} must be a multiple of {m}")

    def extract_features(self, frames):
        feat = frames
        for conv in self.conv_first:
            feat = lrelu(conv(feat))
        feat = run_blocks(self.extract, feat)
        if self.predeblur is not None:
            feat = self.predeblur(feat)
        return feat

    def forward(self, clip, diagnostics=None):
        """Restore the centre frame of each clip.

        Args:
            clip (ndarray | Tensor): (B, T, 3, H, W) or (T, 3, H, W).
            diagnostics (dict | None): Filled with ``attention`` (B, T, h, w)
                and ``offsets_l1`` (B*T, 2KG, h, w) when given.

        Returns:
            Tensor: (B, 3, s*H, s*W).
        """
        dtype = self.conv_last.weight.dtype
        if isinstance(clip, T.Tensor):
            x = clip if clip.data.ndim == 5 else T.reshape(clip, (1,) + clip.shape)
        else:
            data = np.asarray(clip)
            x = T.Tensor((data[None] if data.ndim == 4 else data).astype(dtype, copy=False))
        self.check_input(x.data)
        cfg = self.config
        b, t, _, h, w = x.shape
        frames = T.reshape(x, (b * t, 3, h, w))
        ref_frame = T.take_batch(frames, np.arange(b) * t + cfg.center)

        feat = self.extract_features(frames)
        ref_idx = np.repeat(np.arange(b) * t + cfg.center, t)
        if self.pyramid is not None:
            nbr = self.pyramid(feat)
        else:
            nbr = [feat]
        ref = [T.take_batch(level, ref_idx) for level in nbr]
        aligned = self.align(nbr, ref, diagnostics)
        fused = self.fusion(aligned, b, t, cfg.center, diagnostics)

        out = run_blocks(self.recon, fused)
        for conv in self.upconv:
            out = lrelu(T.pixel_shuffle(conv(out), 2))
        out = self.conv_last(lrelu(self.hr_conv(out)))
        base = T.bilinear_resize(ref_frame, 4) if cfg.scale == 4 else ref_frame
        return out + base


def edvr_forward(clip, config, params=None, diagnostics=None):
    """Functional entry point: build (or reuse) a model and restore ``clip``."""
    model = params if isinstance(params, EDVR) else EDVR(config)
    if isinstance(params, dict):
        model.load_state_dict(params)
    return model(clip, diagnostics)
