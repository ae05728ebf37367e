"""Synthetic video clips with known motion.

Textures are analytic functions of continuous coordinates, so a translated
frame is rendered exactly rather than resampled. Frame ``i`` shows
``texture(y + dy_i, x + dx_i)``; aligning it to the reference therefore needs
a sampling offset of ``-d_i``.

Degradation tracks:

* ``sr_clean``: bicubic x4 downsampling.
* ``sr_blur``: Gaussian blur (sigma in [1, 2]) then bicubic x4.
* ``deblur_clean``: Gaussian blur (sigma in [1, 3]) at full resolution.
* ``deblur_comp``: blur plus coarse quantisation noise standing in for codec
  artefacts.
"""
import dataclasses
import math

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

TEXTURES = ("checker", "sinusoid", "random-smooth")
TRACKS = ("sr_clean", "sr_blur", "deblur_clean", "deblur_comp")
MAX_DISPLACEMENT = 8.0


@dataclasses.dataclass
class SynthClipSpec:
    texture: str = "sinusoid"
    displacements: list = dataclasses.field(default_factory=lambda: [(0.0, 0.0)] * 5)
    blur_sigma: float = 0.0
    downsample: int = 1
    noise: float = 0.0
    quant_step: float = 0.0
    height: int = 64
    width: int = 64

    @property
    def n_frames(self):
        return len(self.displacements)

    @property
    def center(self):
        return self.n_frames // 2

    def validate(self):
        if self.texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.texture!r}; expected one of {TEXTURES}")
        if self.n_frames % 2 == 0:
            raise ValueError(f"frame count must be odd, got {self.n_frames}")
        d = np.asarray(self.displacements, dtype=np.float64)
        if d.shape != (self.n_frames, 2):
            raise ValueError(f"displacements must be (frames, 2), got {d.shape}")
        if np.any(d[self.center] != 0):
            raise ValueError(f"reference frame displacement must be (0, 0), got {tuple(d[self.center])}")
        if np.abs(d).max() > MAX_DISPLACEMENT:
            raise ValueError(f"displacements must lie within +-{MAX_DISPLACEMENT} px")
        if self.downsample not in (1, 4):
            raise ValueError(f"downsample must be 1 or 4, got {self.downsample}")
        if self.height % self.downsample or self.width % self.downsample:
            raise ValueError("frame size must be divisible by the downsample factor")


class Texture:
    """Random analytic RGB texture; ``render`` evaluates it on a pixel grid."""

    def __init__(self, kind, rng):
        if kind not in TEXTURES:
            raise ValueError(f"unknown texture {kind!r}")
        self.kind = kind
        if kind == "checker":
            self.period = rng.uniform(8.0, 24.0)
            self.angle = rng.uniform(0, math.pi)
            self.phase = rng.uniform(0, 2 * math.pi, size=2)
            self.colors = rng.uniform(0.1, 0.9, size=(2, 3))
            return
        n = 4 if kind == "sinusoid" else 16
        if kind == "sinusoid":
            mag = rng.uniform(0.02, 0.15, size=n)
        else:
            mag = np.abs(rng.normal(0.0, 0.06, size=n))
        ang = rng.uniform(0, 2 * math.pi, size=n)
        self.freq = np.stack([mag * np.sin(ang), mag * np.cos(ang)], axis=1)
        self.phase = rng.uniform(0, 2 * math.pi, size=n)
        amp = rng.uniform(0.2, 1.0, size=(n, 3)) * rng.choice([-1.0, 1.0], size=(n, 3))
        self.amp = amp * (0.45 / np.abs(amp).sum(axis=0, keepdims=True))
        self.offset = rng.uniform(0.45, 0.55, size=3)

    def render(self, height, width, dy=0.0, dx=0.0):
        y = np.arange(height, dtype=np.float64)[:, None] + dy
        x = np.arange(width, dtype=np.float64)[None, :] + dx
        if self.kind == "checker":
            u = y * math.cos(self.angle) + x * math.sin(self.angle)
            v = -y * math.sin(self.angle) + x * math.cos(self.angle)
            k = 2 * math.pi / self.period
            s = np.tanh(4.0 * np.sin(k * u + self.phase[0]) * np.sin(k * v + self.phase[1]))
            a = 0.5 + 0.5 * s
            return (self.colors[0][:, None, None] * a + self.colors[1][:, None, None] * (1 - a))
        out = np.broadcast_to(self.offset[:, None, None], (3, height, width)).copy()
        for (fy, fx), ph, amp in zip(self.freq, self.phase, self.amp):
            wave = np.sin(2 * math.pi * (fy * y + fx * x) + ph)
            out += amp[:, None, None] * wave
        return out


def resize_bicubic(img, height, width):
    """Antialiased bicubic resize of a (C, H, W) float image via Pillow."""
    out = np.empty((img.shape[0], height, width), dtype=np.float64)
    for c in range(img.shape[0]):
        pil = Image.fromarray(np.ascontiguousarray(img[c], dtype=np.float32))
        out[c] = np.asarray(pil.resize((width, height), Image.Resampling.BICUBIC), dtype=np.float64)
    return out


def degrade(frame, spec, rng):
    out = frame
    if spec.blur_sigma > 0:
        out = gaussian_filter(out, sigma=(0, spec.blur_sigma, spec.blur_sigma), mode="reflect")
    if spec.downsample > 1:
        out = resize_bicubic(out, spec.height // spec.downsample, spec.width // spec.downsample)
    if spec.noise > 0:
        out = out + rng.normal(0.0, spec.noise, size=out.shape)
    if spec.quant_step > 0:
        out = np.round(out / spec.quant_step) * spec.quant_step
    return np.clip(out, 0.0, 1.0)


def render_sequence(spec, seed, texture=None):
    """All frames of a clip: (degraded (T,3,h,w), clean (T,3,H,W)) in float32."""
    spec.validate()
    rng = np.random.default_rng(seed)
    texture = texture or Texture(spec.texture, rng)
    clean, degraded = [], []
    for dy, dx in spec.displacements:
        frame = texture.render(spec.height, spec.width, dy, dx)
        clean.append(np.clip(frame, 0.0, 1.0))
        degraded.append(degrade(frame, spec, rng))
    return np.asarray(degraded, np.float32), np.asarray(clean, np.float32)


def generate_synth_clip(spec, seed):
    """Returns (input clip (T,3,h,w), clean reference target (3,H,W), displacements (T,2))."""
    degraded, clean = render_sequence(spec, seed)
    return degraded, clean[spec.center], np.asarray(spec.displacements, dtype=np.float64)


def random_displacements(rng, n_frames, max_disp=MAX_DISPLACEMENT, p_static=0.2):
    """Independent per-neighbour translations; magnitude uniform in [0, max_disp]."""
    d = np.zeros((n_frames, 2))
    for i in range(n_frames):
        if i == n_frames // 2 or rng.random() < p_static:
            continue
        mag = rng.uniform(0.0, max_disp)
        ang = rng.uniform(0, 2 * math.pi)
        d[i] = (mag * math.sin(ang), mag * math.cos(ang))
    return np.clip(d, -max_disp, max_disp)


def track_spec(track, rng, n_frames, patch, displacements=None, texture=None):
    """Draw a :class:`SynthClipSpec` for one of the four degradation tracks."""
    if track not in TRACKS:
        raise ValueError(f"unknown track {track!r}; expected one of {TRACKS}")
    if displacements is None:
        displacements = random_displacements(rng, n_frames)
    if texture is None:
        texture = TEXTURES[rng.integers(len(TEXTURES))]
    spec = SynthClipSpec(texture=texture, displacements=[tuple(d) for d in displacements],
                         height=patch, width=patch)
    if track == "sr_clean":
        spec.downsample = 4
    elif track == "sr_blur":
        spec.downsample = 4
        spec.blur_sigma = rng.uniform(1.0, 2.0)
    elif track == "deblur_clean":
        spec.blur_sigma = rng.uniform(1.0, 3.0)
    else:
        spec.blur_sigma = rng.uniform(1.0, 3.0)
        spec.quant_step = 8.0 / 255.0
        spec.noise = 2.0 / 255.0
    return spec


def make_batch(rng, track, batch, n_frames, patch):
    """(clips (B,T,3,h,w), targets (B,3,H,W), displacements (B,T,2))."""
    clips, targets, disps = [], [], []
    for _ in range(batch):
        spec = track_spec(track, rng, n_frames, patch)
        clip, target, d = generate_synth_clip(spec, int(rng.integers(2**31)))
        clips.append(clip)
        targets.append(target)
        disps.append(d)
    return np.stack(clips), np.stack(targets), np.stack(disps)


class SynthBatches:
    """Deterministic infinite stream of synthetic training batches."""

    def __init__(self, track, batch, n_frames, patch, seed):
        self.track = track
        self.batch = batch
        self.n_frames = n_frames
        self.patch = patch
        self.rng = np.random.default_rng(seed)

    def __iter__(self):
        return self

    def __next__(self):
        clips, targets, _ = make_batch(self.rng, self.track, self.batch, self.n_frames, self.patch)
        return clips, targets


def heldout_set(track, n_clips, n_frames, size, seed):
    """Held-out clips: list of (clip, target, displacements)."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_clips):
        spec = track_spec(track, rng, n_frames, size)
        out.append(generate_synth_clip(spec, int(rng.integers(2**31))))
    return out


def render_video(track, n_frames, height, width, seed, velocity=(0.5, 0.25), texture=None):
    """A long sequence under constant-velocity motion for one track.

    Unlike training clips, the accumulated displacement is unbounded; every
    frame is rendered analytically at ``t * velocity``.

    Returns:
        (ndarray, ndarray): degraded (N,3,h,w) and clean (N,3,H,W) float32.
    """
    rng = np.random.default_rng(seed)
    spec = track_spec(track, rng, 1, height, texture=texture)
    spec.width = width
    tex = Texture(spec.texture, rng)
    clean, degraded = [], []
    for i in range(n_frames):
        frame = tex.render(height, width, i * velocity[0], i * velocity[1])
        clean.append(np.clip(frame, 0.0, 1.0))
        degraded.append(degrade(frame, spec, rng))
    return np.asarray(degraded, np.float32), np.asarray(clean, np.float32)
