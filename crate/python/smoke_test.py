"""Smoke test for the nerfmd Python extension.

Build and install first:

    pip install maturin
    cd crates/python && maturin build --release && pip install ../../target/wheels/nerfmd-*.whl

then run ``python python/smoke_test.py``.
"""

import json
import math
import pathlib
import tempfile

import nerfmd


def check_geometry():
    cam = nerfmd.Camera.look_at(32, 32, 1.0, [0.0, 0.0, 3.0], [0.0, 0.0, 0.0])
    origin, direction = cam.ray(16.0, 16.0)
    assert origin == [0.0, 0.0, 3.0]
    assert abs(direction[2] + 1.0) < 1e-9, direction
    p = cam.unproject(10.5, 20.5, 2.0)
    (x, y), z = cam.reproject(p)
    assert abs(x - 10.5) < 1e-6 and abs(y - 20.5) < 1e-6 and abs(z - 2.0) < 1e-6

    rect = nerfmd.MirrorPrimitive.rect([0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [1.0, 1.0])
    t, point, _ = rect.intersect([0.0, 0.0, 5.0], [0.0, 0.0, -1.0])
    assert abs(t - 5.0) < 1e-12 and max(abs(c) for c in point) < 1e-12
    assert rect.intersect([10.0, 0.0, 5.0], [0.0, 0.0, -1.0]) is None
    assert rect.coverage(cam, 16.0, 16.0) == 1.0
    assert nerfmd.reflect_direction([0.0, 0.0, -1.0], [0.0, 0.0, 1.0]) == [0.0, 0.0, 1.0]


def check_losses_and_field():
    assert nerfmd.p_schedule(0, 20, 50, 80) == 2.0
    assert nerfmd.p_schedule(20, 20, 50, 80) == 1.0
    assert nerfmd.p_schedule(80, 20, 50, 80) == 2.0
    assert abs(nerfmd.image_loss([[0.5, 0.0, 0.0]], [[0.0, 0.0, 0.0]], 2.0) - 0.25) < 1e-12

    field = nerfmd.RadianceField([-1.0] * 3, [1.0] * 3, trunk=[16, 16], color_width=16, seed=3)
    sigma, rgb = field.query([0.1, 0.2, 0.3], [0.0, 0.0, -1.0])
    assert sigma >= 0.0 and all(0.0 <= c <= 1.0 for c in rgb)
    color, depth, var = field.render_ray([0.0, 0.0, 0.9], [0.0, 0.0, -1.0], 0.1, 1.8)
    assert 0.1 <= depth <= 1.8 and var >= 0.0
    assert field.parameter_count > 0


def check_pipeline():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = pathlib.Path(tmp)
        scene = tmp / "scene.toml"
        scene.write_text("width = 16\nheight = 16\ntrain_views = 4\ntest_views = 2\nsupersample = 1\n")
        cfg = tmp / "cfg.toml"
        cfg.write_text(
            "[field]\ntrunk = [16, 16]\ncolor_width = 16\n"
            "[sampling]\ncoarse = 8\nfine = 8\npartner = 8\n"
            "[stage1]\niterations = 20\nbatch_rays = 64\n"
            "[stage2]\niterations = 10\nbatch_rays = 32\n"
        )
        assert nerfmd.generate(tmp / "data", seed=1, config=scene) == 6
        psnr = nerfmd.stage1(tmp / "data", tmp / "run", config=cfg)
        assert math.isfinite(psnr)
        manifest = json.loads(nerfmd.detect(tmp / "run"))
        assert "primitives" in manifest
        nerfmd.stage2(tmp / "run")
        report = json.loads(nerfmd.evaluate(tmp / "run", "test"))
        assert report["stage"] == 2 and len(report["views"]) == 2
        mean = sum(v["psnr"] for v in report["views"]) / 2
        assert abs(mean - report["mean"]["psnr"]) < 1e-9


if __name__ == "__main__":
    check_geometry()
    check_losses_and_field()
    check_pipeline()
    print("smoke test passed")
