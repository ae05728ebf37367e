"""Desk-scale training runs shared by the acceptance suite and the README recipes.

Runs are cached on disk (checkpoint, loss curve, wall time) under a key built
from the run settings and a hash of the numerical source code, so that the
acceptance suite trains each configuration once. Set ``EDVR_FRESH=1`` to
ignore the cache.
"""
import ast
import dataclasses
import hashlib
import json
import os
import time

import numpy as np

from . import io
from . import tensor as T
from .inference import restore_clip, restore_sequence, self_ensemble_infer, two_stage_infer
from .metrics import psnr
from .model import EDVR, EdvrConfig
from .synth import TEXTURES, heldout_set, random_displacements, render_sequence, resize_bicubic, track_spec
from .training import TrainConfig, train

# Alignment and fusion ablation variants.
VARIANTS = {
    "model1": dict(align="single_dcn", fusion="concat"),
    "model3": dict(align="pcd", fusion="concat"),
    "model4": dict(align="pcd", fusion="tsa"),
}
NUMERIC_MODULES = ("tensor", "nn", "deform", "model", "synth", "training")
DEFAULT_CACHE = os.path.join(os.path.dirname(__file__), os.pardir, os.pardir, ".acceptance_cache")
HELDOUT_SEED = 10_000
DEBLUR_FRAMES = 9


def _strip_docstrings(tree):
    for node in ast.walk(tree):
        body = getattr(node, "body", None)
        if isinstance(body, list) and body and isinstance(body[0], ast.Expr) \
                and isinstance(body[0].value, ast.Constant) and isinstance(body[0].value.value, str):
            node.body = body[1:] or [ast.Pass()]
    return tree


def source_hash():
    """Hash of the numerical modules' code, ignoring comments and docstrings."""
    h = hashlib.sha256()
    here = os.path.dirname(__file__)
    for name in NUMERIC_MODULES:
        with open(os.path.join(here, name + ".py"), encoding="utf-8") as f:
            h.update(ast.dump(_strip_docstrings(ast.parse(f.read()))).encode())
    return h.hexdigest()[:16]


@dataclasses.dataclass
class RunRecord:
    model: EDVR
    losses: np.ndarray
    seconds: float
    cached: bool


class RunCache:
    def __init__(self, root=None, fresh=None):
        self.root = os.path.abspath(root or os.environ.get("EDVR_CACHE", DEFAULT_CACHE))
        self.fresh = bool(int(os.environ.get("EDVR_FRESH", "0"))) if fresh is None else fresh

    def _key(self, name, settings):
        blob = json.dumps(settings, sort_keys=True, default=str) + source_hash()
        return f"{name}-{hashlib.sha256(blob.encode()).hexdigest()[:12]}"

    def run(self, name, model_cfg, train_cfg, batches_fn=None):
        """Train (or load) one configuration; ``batches_fn`` overrides synthetic batches."""
        settings = {"model": dataclasses.asdict(model_cfg), "train": dataclasses.asdict(train_cfg)}
        base = os.path.join(self.root, self._key(name, settings))
        ckpt, meta_path = base + ".ckpt", base + ".json"
        model = EDVR(model_cfg)
        if not self.fresh and os.path.exists(ckpt) and os.path.exists(meta_path):
            io.load_checkpoint(ckpt, model)
            with open(meta_path, encoding="utf-8") as f:
                meta = json.load(f)
            return RunRecord(model, np.asarray(meta["losses"]), meta["seconds"], True)
        os.makedirs(self.root, exist_ok=True)
        start = time.perf_counter()
        losses, _ = train(model, train_cfg, batches=batches_fn() if batches_fn else None)
        seconds = time.perf_counter() - start
        io.save_checkpoint(ckpt, model)
        with open(meta_path, "w", encoding="utf-8") as f:
            json.dump({"settings": settings, "losses": losses, "seconds": seconds}, f)
        return RunRecord(model, np.asarray(losses), seconds, False)


def sr_configs(variant, seed=0, iters=2000, channels=32):
    model_cfg = EdvrConfig(channels=channels, seed=seed, **VARIANTS[variant])
    train_cfg = TrainConfig(iters=iters, seed=seed, track="sr_clean")
    return model_cfg, train_cfg


def run_sr(variant, seed=0, cache=None, iters=2000):
    cache = cache or RunCache()
    return cache.run(f"sr_{variant}_s{seed}", *sr_configs(variant, seed, iters))


def sr_heldout(n_clips=20, size=64, seed=HELDOUT_SEED):
    return heldout_set("sr_clean", n_clips, 5, size, seed)


def evaluate_psnr(model, clips, ensemble=False):
    """Per-clip RGB PSNR of the restored reference frame."""
    out = []
    for clip, target, _ in clips:
        pred = self_ensemble_infer(model, clip) if ensemble else restore_clip(model, clip)
        out.append(psnr(np.clip(pred, 0, 1), target))
    return np.asarray(out)


def bicubic_psnr(clips, scale=4):
    out = []
    for clip, target, _ in clips:
        ref = clip[len(clip) // 2]
        up = resize_bicubic(ref, ref.shape[1] * scale, ref.shape[2] * scale)
        out.append(psnr(np.clip(up, 0, 1), target))
    return np.asarray(out)


def attention_clips(n_clips=20, size=64, seed=HELDOUT_SEED + 1):
    """Held-out clips where frame 0 moves by 8 px and frame 1 is static.

    Returns (clip, target, displacements) triples.
    """
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_clips):
        d = random_displacements(rng, 5, p_static=0.0)
        ang = rng.uniform(0, 2 * np.pi)
        d[0] = (8.0 * np.sin(ang), 8.0 * np.cos(ang))
        d[1] = (0.0, 0.0)
        spec = track_spec("sr_clean", rng, 5, size, displacements=d)
        degraded, clean = render_sequence(spec, int(rng.integers(2**31)))
        out.append((degraded, clean[2], d))
    return out


def mean_attention(model, clip):
    """Spatial mean of each frame's temporal-attention map."""
    diag = {}
    with T.no_grad():
        model(clip, diag)
    return diag["attention"][0].mean(axis=(1, 2))


# ---------------------------------------------------------------------------
# two-stage deblurring


def deblur_configs(stage, seed=0, iters=2000, channels=32):
    if stage == 1:
        model_cfg = EdvrConfig(channels=channels, scale=1, hr_input=True, predeblur=True, seed=seed)
    else:
        model_cfg = EdvrConfig(channels=channels, scale=1, hr_input=True, recon_blocks=5,
                               identity_init=True, seed=seed + 1)
    return model_cfg, TrainConfig(iters=iters, seed=seed + stage - 1, track="deblur_clean")


def deblur_sequences(n_clips, size=64, seed=0, track="deblur_clean"):
    """Nine-frame blurred sequences: list of (degraded (9,3,H,W), clean reference (3,H,W))."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_clips):
        d = random_displacements(rng, DEBLUR_FRAMES, max_disp=4.0)
        spec = track_spec(track, rng, DEBLUR_FRAMES, size, displacements=d,
                          texture=TEXTURES[rng.integers(len(TEXTURES))])
        degraded, clean = render_sequence(spec, int(rng.integers(2**31)))
        out.append((degraded, clean[DEBLUR_FRAMES // 2]))
    return out


def stage2_pool(stage1, sequences):
    """Stage-1 outputs for the five central frames of each sequence, plus targets."""
    half = stage1.config.n_frames // 2
    c = DEBLUR_FRAMES // 2
    inputs, targets = [], []
    for degraded, clean in sequences:
        windows = np.stack([degraded[t - half:t + half + 1] for t in range(c - half, c + half + 1)])
        with T.no_grad():
            inputs.append(stage1(windows).data)
        targets.append(clean)
    return np.stack(inputs).astype(np.float32), np.stack(targets).astype(np.float32)


class PoolBatches:
    """Random mini-batches drawn from a fixed (inputs, targets) pool."""

    def __init__(self, pool, batch, seed):
        self.inputs, self.targets = pool
        self.batch = batch
        self.rng = np.random.default_rng(seed)

    def __iter__(self):
        return self

    def __next__(self):
        idx = self.rng.integers(len(self.inputs), size=self.batch)
        return self.inputs[idx], self.targets[idx]


def run_deblur(cache=None, seed=0, iters=2000, stage2_iters=1000, pool_clips=256):
    """Stage-1 on synthetic blur, then stage-2 on a pool of stage-1 outputs."""
    cache = cache or RunCache()
    s1 = cache.run(f"deblur_s1_s{seed}", *deblur_configs(1, seed, iters))
    model_cfg, train_cfg = deblur_configs(2, seed, stage2_iters)

    def batches():
        pool = stage2_pool(s1.model, deblur_sequences(pool_clips, seed=seed + 500))
        return PoolBatches(pool, train_cfg.batch, train_cfg.seed)

    s2 = cache.run(f"deblur_s2_s{seed}_from_{id_of(s1)}", model_cfg, train_cfg, batches)
    return s1, s2


def id_of(record):
    """Short content hash of a trained model (ties stage 2 to its stage 1)."""
    h = hashlib.sha256()
    for name, p in record.model.named_parameters():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()[:10]


def deblur_eval(stage1, stage2, sequences):
    """(stage-1 PSNR, two-stage PSNR) per sequence, on the central frame."""
    c = DEBLUR_FRAMES // 2
    s1, s2 = [], []
    for degraded, clean in sequences:
        first = restore_sequence(stage1, degraded)
        second = two_stage_infer(stage1, stage2, degraded)
        s1.append(psnr(np.clip(first[c], 0, 1), clean))
        s2.append(psnr(np.clip(second[c], 0, 1), clean))
    return np.asarray(s1), np.asarray(s2)


def train_all(cache=None, log=print):
    """Every run the acceptance suite needs, in the order the criteria use them."""
    cache = cache or RunCache()
    for variant, seed in [("model1", 0), ("model3", 0), ("model4", 0), ("model3", 1), ("model3", 2),
                          ("model4", 1), ("model4", 2)]:
        rec = run_sr(variant, seed, cache)
        log(f"{variant} seed={seed} seconds={rec.seconds:.0f} cached={rec.cached} "
            f"loss {rec.losses[:100].mean():.4f} -> {rec.losses[-100:].mean():.4f}")
    s1, s2 = run_deblur(cache)
    log(f"deblur stage1 seconds={s1.seconds:.0f} stage2 seconds={s2.seconds:.0f}")


if __name__ == "__main__":
    train_all(log=lambda line: print(line, flush=True))
