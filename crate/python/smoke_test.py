"""Smoke test for the `narcan` extension module.

Build first:  pip install --no-build-isolation -e crates/python
Then run:     python python/smoke_test.py
"""

import tempfile
from pathlib import Path

import narcan


def main():
    assert narcan.Schedule.default().count_target_generations() == 224
    assert narcan.plan_segments(100, 3, 10) == [(0, 40), (30, 70), (60, 100)]
    w = dict(narcan.blend_weights(100, 3, 10, 34))
    assert abs(w[0] - 5 / 9) < 1e-12 and abs(w[1] - 4 / 9) < 1e-12

    video = narcan.Video.synthetic("homography", frames=6, size=24, seed=1)
    assert len(video) == 6 and video.width == 24

    config = {
        "total_iters": 300,
        "batch_pixels": 512,
        "use_residual": False,
        "lr_homography": 1e-3,
        "lr_canonical": 1e-2,
        "lr_decay": 0.1,
        "fields": {"pe_freqs_canonical": 5, "layers_f": [48, 48, 48]},
    }
    model = narcan.Model.fit(video, config)
    psnr = model.render().psnr(video)
    print(f"reconstruction PSNR {psnr:.2f} dB")
    assert psnr > 25.0

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Path(tmp) / "ckpt"
        model.save(str(ckpt))
        again = narcan.Model.load(str(ckpt))
        a, b = again.render_frame(2), model.render_frame(2)
        diff = max(abs(x - y) for ra, rb in zip(a, b) for pa, pb in zip(ra, rb) for x, y in zip(pa, pb))
        assert diff < 1e-4, diff
        written = again.export_canonical(str(Path(tmp) / "canonical.png"))
        assert Path(written[0]).with_suffix(".canonical.json").exists()

    report = video.consistency(video)
    assert report["psnr"] == 99.0

    try:
        narcan.plan_segments(10, 5, 8)
    except narcan.NarcanError as e:
        print(f"infeasible plan rejected: {e}")
    else:
        raise AssertionError("expected NarcanError")

    print("ok")


if __name__ == "__main__":
    main()
