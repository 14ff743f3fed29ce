"""Smoke test for the egomotion Python bindings.

Build the extension first:

    cargo build --release -p egomotion-py --features extension-module

then run this script from the repository root. It looks for the built
library under target/release (or target/debug) unless egomotion_py is
already importable.
"""

import importlib.machinery
import importlib.util
import math
import os
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    try:
        import egomotion_py

        return egomotion_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        path = os.path.join(ROOT, "target", profile, "libegomotion_py.so")
        if os.path.exists(path):
            loader = importlib.machinery.ExtensionFileLoader("egomotion_py", path)
            spec = importlib.util.spec_from_file_location("egomotion_py", path, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("egomotion_py not built; see the module docstring")


def main():
    em = load_module()
    skel = em.Skeleton.humanoid22()
    assert skel.num_joints == 22
    assert skel.feature_width() == 217
    assert "walk-line" in em.ACTIVITIES

    takes = [em.Take.generate(s, a, 8.0, 10 + s, skel) for s in range(2) for a in em.ACTIVITIES[:2]]
    take = takes[0]
    assert len(take) == 80
    pose = take.trajectory()[0]
    assert len(pose) == 4 and pose[3] == [0.0, 0.0, 0.0, 1.0]

    gt = take.motion.positions(skel)
    assert em.mpjpe(gt, gt) == 0.0
    assert em.mpjpe_pa(gt, gt) < 1e-9

    model = em.Model.train(takes, "epochs = 50\nbatch_size = 4\nmax_steps = 4\nseed = 1\n")
    assert model.step == 4 and len(model.losses) == 4
    assert all(math.isfinite(x) for x in model.losses)

    rec = model.reconstruct(take, frames=40, seed=3, sample_steps=5)
    again = model.reconstruct(take, frames=40, seed=3, sample_steps=5)
    assert len(rec) == 40
    assert rec.positions(skel) == again.positions(skel)
    err = em.mpjpe(rec.positions(skel), gt[:40])
    assert math.isfinite(err)

    fc = model.forecast(take, observed=20, total=40, seed=3, sample_steps=5)
    assert fc.positions(skel)[:20] == model.reconstruct(take, frames=20, seed=3, sample_steps=5).positions(skel)

    gen = model.generate(take.image_features()[0], frames=30, seed=1, sample_steps=5)
    assert len(gen) == 30

    with tempfile.TemporaryDirectory() as d:
        model.save(os.path.join(d, "model.eem"))
        back = em.Model.load(os.path.join(d, "model.eem"))
        assert back.losses == model.losses
        rec.save(os.path.join(d, "rec.eem"))
        # containers store f32
        assert em.mpjpe(em.Motion.load(os.path.join(d, "rec.eem")).positions(skel), rec.positions(skel)) < 1e-5

    try:
        model.reconstruct(take, start=50, frames=40)
    except ValueError:
        pass
    else:
        raise AssertionError("out-of-range window accepted")

    print(f"smoke test ok (untrained reconstruction mpjpe {err:.3f} m)")


if __name__ == "__main__":
    main()
