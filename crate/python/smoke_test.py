"""Smoke test for the sslab Python module.

Build first, e.g. `maturin develop -m crates/py/Cargo.toml`, then run
`python python/smoke_test.py`.
"""

import os
import tempfile

import sslab


def main():
    img = sslab.synth_image(side=32, seed=1)
    assert len(img) == 32 * 32
    assert all(0.0 <= v <= 1.0 for v in img)

    oracle = sslab.Model.oracle()
    assert oracle.kind == "oracle"
    assert oracle.mse(img, vi=16, vq=32, seed=2) == 0.0
    assert oracle.reconstruct(img, n_tokens=4) == img

    ssm = sslab.Model.ssm(seed=0)
    assert ssm.kind == "ssm" and ssm.param_count > 0
    rec = ssm.reconstruct(img, n_tokens=64, seed=3)
    assert len(rec) == len(img)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.ckpt")
        ssm.save(path)
        again = sslab.Model.load(path)
        assert again.reconstruct(img, n_tokens=64, seed=3) == rec

    cfg = sslab.RunConfig.desk()
    cfg.set("train.batch", "4")
    assert "train.batch=4" in cfg.to_text()
    assert sslab.RunConfig(cfg.to_text()).to_text() == cfg.to_text()
    try:
        cfg.set("train.colour", "blue")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    print("sslab python smoke test passed")


if __name__ == "__main__":
    main()
