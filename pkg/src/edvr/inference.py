"""Inference over frame sequences: padding, windowing, self-ensemble, two stages."""
import numpy as np

from . import tensor as T

# (hflip, rot180) pairs; each transform is its own inverse.
ENSEMBLE_TRANSFORMS = ((False, False), (True, False), (False, True), (True, True))


def _apply(a, hflip, rot180):
    if hflip:
        a = a[..., ::-1]
    if rot180:
        a = a[..., ::-1, ::-1]
    return np.ascontiguousarray(a)


def restore_clip(model, clip):
    """(T, 3, H, W) or (B, T, 3, H, W) numpy -> numpy output without recording a graph."""
    with T.no_grad():
        out = model(clip).data
    return out[0] if np.asarray(clip).ndim == 4 else out


def self_ensemble_infer(model, clip, restore=None):
    """Average of the restorations of four flipped/rotated copies of ``clip``.

    The four transforms (identity, horizontal flip, 180 degree rotation and
    their composition) form a group, so every output is mapped back with the
    same transform before averaging.
    """
    restore = restore or (lambda c: restore_clip(model, c))
    outs = [_apply(restore(_apply(clip, hf, r)), hf, r) for hf, r in ENSEMBLE_TRANSFORMS]
    return (outs[0] + outs[1] + outs[2] + outs[3]) / 4


def window_indices(n_total, n_frames):
    """Replicate-boundary windows: one index list per output frame."""
    half = n_frames // 2
    return [np.clip(np.arange(t - half, t + half + 1), 0, n_total - 1) for t in range(n_total)]


def pad_to_multiple(frames, multiple):
    """Reflect-pad the last two axes up to a multiple; returns (padded, (H, W))."""
    h, w = frames.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return frames, (h, w)
    pad = [(0, 0)] * (frames.ndim - 2) + [(0, ph), (0, pw)]
    mode = "reflect" if ph < h and pw < w else "edge"
    return np.pad(frames, pad, mode=mode), (h, w)


def restore_sequence(model, frames, ensemble=False, diagnostics=None):
    """Restore every frame of a (N, 3, H, W) sequence.

    Frames are reflect-padded to the model's spatial multiple and the output
    is cropped back. ``diagnostics``, when a list, receives one dict per
    output frame.
    """
    cfg = model.config
    padded, (h, w) = pad_to_multiple(np.asarray(frames, np.float32), cfg.spatial_multiple)
    s = cfg.scale
    outs = []
    for idx in window_indices(len(padded), cfg.n_frames):
        clip = padded[idx]
        if ensemble:
            out = self_ensemble_infer(model, clip)
        elif diagnostics is not None:
            diag = {}
            with T.no_grad():
                out = model(clip, diag).data[0]
            diagnostics.append(diag)
        else:
            out = restore_clip(model, clip)
        outs.append(out[:, :h * s, :w * s])
    return np.stack(outs)


def two_stage_infer(stage1, stage2, clips, ensemble=False):
    """Stage-1 restores every frame; stage-2 refines windows of stage-1 outputs.

    Args:
        stage1, stage2 (EDVR): Stage 2 must be a scale-1 model.
        clips (ndarray): (N, 3, H, W) degraded frames.

    Returns:
        ndarray: (N, 3, sH, sW) refined frames.
    """
    if stage2.config.scale != 1:
        raise ValueError("two_stage_infer: stage 2 must run at scale 1")
    first = clips if stage1 is None else restore_sequence(stage1, clips, ensemble)
    if len(first) < stage2.config.n_frames:
        raise ValueError(
            f"two_stage_infer: {len(first)} stage-1 frames cannot fill a {stage2.config.n_frames}-frame window")
    return restore_sequence(stage2, first, ensemble)
