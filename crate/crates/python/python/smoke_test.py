"""Exercises the vtdiff_py extension end to end on small inputs."""

import math
import random
import sys
import tempfile

import vtdiff_py as vt


def check(cond, what):
    if not cond:
        print(f"FAIL {what}")
        sys.exit(1)
    print(f"ok   {what}")


def main():
    sched = vt.NoiseSchedule()
    abar = sched.alpha_bars
    check(len(abar) == 1000 and all(a > b for a, b in zip(abar, abar[1:])), "alpha_bars decrease")
    check(len(sched.inference_timesteps) == 25, "25 inference steps")

    x0 = [0.5, -0.25, 1.0]
    eps = [0.1, 0.2, -0.3]
    t = 400
    out = sched.q_sample(x0, t, eps)
    a = sched.alpha_bar(t)
    want = [math.sqrt(a) * x + math.sqrt(1 - a) * e for x, e in zip(x0, eps)]
    check(all(abs(o - w) < 1e-5 for o, w in zip(out, want)), "q_sample closed form")

    # Exact noise predictor for a point mass at `target`.
    target = [0.3, -0.7]

    def eps_fn(x, t):
        a = sched.alpha_bar(t)
        return [(xi - math.sqrt(a) * c) / math.sqrt(1 - a) for xi, c in zip(x, target)]

    for sampler in ("pndm", "ddim"):
        end = sched.sample([1.2, -0.4], eps_fn, sampler=sampler)
        check(all(abs(e - c) < 1e-3 for e, c in zip(end, target)), f"{sampler} recovers a point mass")

    b = vt.frame_boundaries(4)
    check(b[0] == 0 and len(b) == 5 and b[-1] == round(4 * 16000 / 26), "frame boundaries")

    rng = random.Random(0)
    img = [[rng.random() for _ in range(16)] for _ in range(16)]
    check(abs(vt.ssim(img, img) - 1.0) < 1e-9, "ssim of identical frames")
    check(vt.psnr(img, img) == vt.PSNR_CAP_DB, "psnr of identical frames hits the cap")

    feats = [[rng.gauss(0, 1) for _ in range(4)] for _ in range(40)]
    shifted = [[v + 2.0 for v in row] for row in feats]
    check(abs(vt.fvd(feats, feats)) < 1e-6, "fvd of identical sets")
    check(abs(vt.fvd(feats, shifted) - 16.0) < 1e-6, "fvd of a pure shift")
    check(vt.kid(feats, shifted) > vt.kid(feats, feats), "kid grows with shift")

    loss = vt.contrastive_loss([[0.0, 0.0], [0.0, 0.0]], [[3.0, 4.0], [0.3, 0.4]], [True, False])
    check(abs(loss - (0.5 * 25 + 0.5 * 0.25)) < 1e-6, "contrastive loss")

    q, idx = vt.quantize([[0.9, 0.1], [-1.0, 0.2]], [[1.0, 0.0], [-1.0, 0.0]])
    check(idx == [0, 1] and q == [[1.0, 0.0], [-1.0, 0.0]], "quantize")

    cfg = vt.RunConfig.toy().with_seed(3)
    check(vt.RunConfig.from_toml(cfg.to_toml()).to_toml() == cfg.to_toml(), "config round trip")
    try:
        vt.RunConfig.from_toml("[train]\nlearning_rat = 1.0\n")
        check(False, "unknown config key rejected")
    except ValueError:
        check(True, "unknown config key rejected")

    frames, wave, controls = vt.toy_sample(0, cfg)
    check(len(frames) == len(controls) and len(wave) > 0, "toy sample")

    with tempfile.TemporaryDirectory() as tmp:
        ids = vt.generate_toy_dataset(tmp, 3, cfg)
        check(len(ids) == 3, "toy dataset written")

    print("smoke test passed")


if __name__ == "__main__":
    main()
