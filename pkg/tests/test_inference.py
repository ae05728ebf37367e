import numpy as np
import pytest

from edvr.inference import (ENSEMBLE_TRANSFORMS, pad_to_multiple, restore_clip, restore_sequence,
                            self_ensemble_infer, two_stage_infer, window_indices)
from edvr.model import EDVR, EdvrConfig

TINY = dict(channels=8, extract_blocks=1, recon_blocks=1)


def zero_trunk(**kw):
    model = EDVR(EdvrConfig(**TINY, **kw))
    for p in model.parameters():
        p.data[...] = 0.0
    return model


def test_window_bookkeeping():
    windows = window_indices(100, 5)
    assert len(windows) == 100
    assert list(windows[0]) == [0, 0, 0, 1, 2]
    assert list(windows[50]) == [48, 49, 50, 51, 52]
    assert list(windows[99]) == [97, 98, 99, 99, 99]
    assert all(w[2] == t for t, w in enumerate(windows))


def test_ensemble_is_mean_of_inverse_transformed_outputs(rng):
    model = EDVR(EdvrConfig(**TINY))
    clip = rng.uniform(0, 1, (5, 3, 8, 8)).astype(np.float32)
    outs = []
    for hflip, rot180 in ENSEMBLE_TRANSFORMS:
        c = clip[..., ::-1] if hflip else clip
        c = c[..., ::-1, ::-1] if rot180 else c
        o = restore_clip(model, np.ascontiguousarray(c))
        o = o[..., ::-1, ::-1] if rot180 else o
        outs.append(o[..., ::-1] if hflip else o)
    expected = (outs[0] + outs[1] + outs[2] + outs[3]) / 4
    np.testing.assert_array_equal(self_ensemble_infer(model, clip), expected)


def test_ensemble_of_equivariant_model_is_exact(rng):
    model = zero_trunk()
    for _ in range(5):
        clip = rng.uniform(0, 1, (5, 3, 8, 12)).astype(np.float32)
        np.testing.assert_array_equal(self_ensemble_infer(model, clip), restore_clip(model, clip))


def test_ensemble_of_constant_output_is_constant(rng):
    const = np.full((3, 16, 16), 0.25, np.float32)
    out = self_ensemble_infer(None, rng.uniform(0, 1, (5, 3, 4, 4)), restore=lambda c: const)
    np.testing.assert_array_equal(out, const)


def test_sequence_padding_and_cropping(rng):
    model = EDVR(EdvrConfig(**TINY))
    frames = rng.uniform(0, 1, (7, 3, 10, 14)).astype(np.float32)
    out = restore_sequence(model, frames)
    assert out.shape == (7, 3, 40, 56)
    padded, size = pad_to_multiple(frames, 4)
    assert padded.shape == (7, 3, 12, 16) and size == (10, 14)
    np.testing.assert_array_equal(padded[..., 10, :14], frames[..., 8, :])  # reflect
    tiny, _ = pad_to_multiple(np.ones((1, 3, 2, 2)), 4)
    assert tiny.shape == (1, 3, 4, 4) and np.all(tiny == 1)  # edge fallback
    assert pad_to_multiple(padded, 4)[0] is padded


def test_sequence_diagnostics_per_frame(rng):
    model = EDVR(EdvrConfig(**TINY))
    diags = []
    restore_sequence(model, rng.uniform(0, 1, (6, 3, 8, 8)), diagnostics=diags)
    assert len(diags) == 6
    assert diags[0]["attention"].shape == (1, 5, 8, 8)


def test_two_stage_with_identity_second_stage(rng):
    stage1 = EDVR(EdvrConfig(scale=1, hr_input=True, **TINY))
    stage2 = EDVR(EdvrConfig(scale=1, hr_input=True, identity_init=True, seed=1, **TINY))
    frames = rng.uniform(0, 1, (6, 3, 16, 16)).astype(np.float32)
    np.testing.assert_array_equal(two_stage_infer(stage1, stage2, frames), restore_sequence(stage1, frames))


def test_two_stage_validation(rng):
    stage2 = EDVR(EdvrConfig(scale=1, hr_input=True, **TINY))
    with pytest.raises(ValueError, match="5-frame window"):
        two_stage_infer(None, stage2, rng.uniform(0, 1, (3, 3, 16, 16)))
    with pytest.raises(ValueError, match="scale 1"):
        two_stage_infer(None, EDVR(EdvrConfig(**TINY)), rng.uniform(0, 1, (6, 3, 16, 16)))
    assert two_stage_infer(None, stage2, rng.uniform(0, 1, (5, 3, 16, 16))).shape == (5, 3, 16, 16)
