"""Smoke test for the rdm extension module."""

import json
import math
import os
import tempfile

import rdm


def check_manifolds():
    s2 = rdm.Manifold.sphere(2)
    assert (s2.ambient_dim, s2.intrinsic_dim) == (3, 2)
    x = s2.closest_point([0.0, 3.0, 4.0])
    assert s2.contains(x)
    v = s2.tangential_projection(x, [1.0, 1.0, 1.0])
    assert abs(sum(a * b for a, b in zip(x, v))) < 1e-12
    assert abs(s2.prior_log_density(x) + math.log(4 * math.pi)) < 1e-12
    so3 = rdm.Manifold.special_orthogonal(3)
    assert all(so3.contains(r) for r in so3.prior_sample(5, seed=1))
    try:
        rdm.Manifold.hyperboloid(2, curvature=1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("positive curvature accepted")


def check_target():
    t2 = rdm.Manifold.torus(2)
    spec = {
        "kind": "wrapped-gaussian-mixture",
        "components": [{"weight": 1.0, "mean": [1, 0, 1, 0], "scale": [0.5, 0.5]}],
    }
    target = rdm.Target(t2, json.dumps(spec))
    pts = target.sample(10, seed=3)
    assert len(pts) == 10 and all(t2.contains(p) for p in pts)
    assert math.isfinite(target.log_density(pts[0]))


def check_model():
    config = {
        "manifold": {"kind": "sphere", "dim": 2},
        "network": {"hidden_layers": 1, "hidden_width": 16},
        "train": {"learning_rate": 0.003, "steps": 20, "batch_size": 16, "seed": 0},
        "paths": {"horizon": 1.0, "n_steps": 10},
        "target": {
            "kind": "vmf-mixture",
            "components": [{"weight": 1.0, "mean": [0, 0, 1], "concentration": 3.0}],
        },
    }
    text = json.dumps(config)
    assert len(rdm.config_hash(text)) == 64
    model = rdm.Model.train(text, seed=7)
    s2 = model.manifold
    samples = model.sample(8, seed=2, lam=0.5)
    assert all(s2.contains(p) for p in samples)
    ll = model.log_likelihood([0.0, 0.0, 1.0])
    kel = model.kelbo([0.0, 0.0, 1.0], k=4, seed=1)
    elbo, se = model.elbo([[0.0, 0.0, 1.0]], n_mc=16, seed=1)
    assert all(math.isfinite(v) for v in (ll, kel, elbo, se))
    grid = model.density_grid("8x16")
    mass = sum(math.exp(l) * w for _, w, l in grid)
    assert abs(mass - 1.0) < 0.05, mass
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ck.json")
        model.save(path)
        again = rdm.Model.load(path)
        assert again.log_likelihood([0.0, 0.0, 1.0]) == ll
    try:
        model.sample(1, seed=0, lam=2.0)
    except ValueError:
        pass
    else:
        raise AssertionError("lambda > 1 accepted")


if __name__ == "__main__":
    check_manifolds()
    check_target()
    check_model()
    print("smoke test passed")
