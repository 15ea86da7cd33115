"""Smoke test for the selfpose_py extension.

Build it first:  pip install --no-build-isolation -e crates/python
Then run:        python python/smoke_test.py
"""

import math
import sys
import tempfile

import selfpose_py as sp


def close(a, b, tol=1e-9):
    return abs(a - b) <= tol


def main():
    topo = sp.Topology.quadruped()
    n = len(topo)
    assert n == 20 and len(topo.eval_subset) == 15

    r = sp.rotation(0.7, -0.2)
    for i in range(3):
        for j in range(3):
            dot = sum(r[i][k] * r[j][k] for k in range(3))
            assert close(dot, 1.0 if i == j else 0.0, 1e-12)

    prior = sp.generate_prior(4, topo, seed=3)
    assert len(prior) == 4 and len(prior[0]) == n
    y = prior[0]
    v = sp.lift(y, [0.1 * math.sin(j) for j in range(n)])
    back = sp.project(v)
    assert max(abs(a - b) for p, q in zip(y, back) for a, b in zip(p, q)) < 1e-12

    img = sp.render(y, topo, size=32, gamma=31.25)
    assert len(img) == 32 * 32 and 0.0 <= min(img) and max(img) <= 1.0

    report = sp.pck_report(prior, prior, topo)
    assert close(report["mean"], 100.0)
    assert close(sp.pa_mpjpe(v, v), 0.0, 1e-9)

    model = sp.Model.init(topo, seed=1, image_size=32)
    out = model.predict([img])
    assert len(out["poses2d"][0]) == n and len(out["poses3d"][0]) == n

    config = """
steps = 2
batch_size = 2
omega_warmup_steps = 1
n_train_images = 8
n_prior = 8
n_eval = 4
checkpoint_every = 2
validation_every = 2
[network]
image_size = 32
lifter_width = 32
[scene.render]
height = 32
width = 32
gamma = 31.25
"""
    with tempfile.TemporaryDirectory() as out_dir:
        ckpt = sp.train(out_dir, config)
        trained = sp.Model.load(ckpt, topo)
        assert trained.step == 2 and trained.image_size == 32

    assert sp.cli(["--help"]) == 0
    print("selfpose_py smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
