"""Exercises the extension module end to end on a tiny generated split."""

import math
import os
import tempfile

import ctxvad_py as cv


def main():
    assert cv.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    assert cv.anomaly_score(0.3, 0.1, 2.0, 1.0) == 2.0 * 0.3 + 0.1
    assert math.isclose(cv.lr_schedule(0, 10), 1.5e-4, abs_tol=1e-12)
    assert math.isclose(cv.lr_schedule(25, 10), 8.0e-5, abs_tol=1e-12)
    assert math.isclose(cv.lr_schedule(50, 10), 1e-5, abs_tol=1e-12)
    assert cv.normalize_per_video([1.0, 3.0]) == [0.0, 1.0]
    mask = cv.sample_mask(0.75, 3)
    assert len(mask) == 3 and mask == cv.sample_mask(0.75, 3)

    samples, labels = cv.generate("test", seed=1, videos=2)
    assert samples and set(labels) == {"test000", "test001"}
    s = samples[0]
    assert len(s.frames) == 5 * 3 * 32 * 32 and len(s.flow) == 2 * 32 * 32

    vit = cv.ContextVit(streams="masked,whole,partial", seed=0)
    terms = vit.losses(s, mask)
    assert math.isclose(terms["l_pred"], terms["l_masked"] + terms["l_whole"] + terms["l_partial"])
    cae = cv.MotionCae(seed=0)
    assert len(cae.reconstruct(s)) == len(s.flow)
    assert cae.flow_loss(s) >= 0.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "vit.ckpt")
        vit.save(path)
        again = cv.ContextVit.load(path)
        assert again.param_count == vit.param_count
        assert again.losses(s, mask) == terms

    try:
        cv.ContextVit(streams="sideways")
    except ValueError as e:
        assert "invalid_argument" in str(e)
    else:
        raise AssertionError("bad stream accepted")
    print(f"ok: {len(samples)} samples, ContextVit {vit.param_count} params, MotionCae {cae.param_count} params")


if __name__ == "__main__":
    main()
