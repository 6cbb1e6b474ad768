"""Smoke test for the dasconv extension module.

Build and install first:
    pip install --no-build-isolation ./crates/py
then run:
    python python/smoke_test.py
"""

import json
import math
import os
import tempfile

import dasconv


def main():
    # tensors and conv2d: a 1x1 kernel of 2.0 doubles the input
    x = dasconv.Tensor((1, 1, 2, 3), [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    w = dasconv.Tensor((1, 1, 1, 1), [2.0])
    y = dasconv.conv2d(x, w)
    assert y.shape == (1, 1, 2, 3)
    assert y.tolist() == [2.0, 4.0, 6.0, 8.0, 10.0, 12.0]

    # dilated 3x3 with padding keeps the size
    k = dasconv.Tensor((1, 1, 3, 3), [1.0] * 9)
    z = dasconv.conv2d(dasconv.Tensor((1, 1, 5, 5), [1.0] * 25), k, dilation=2, padding=2)
    assert z.shape == (1, 1, 5, 5)
    assert z.tolist()[12] == 9.0

    assert math.isclose(dasconv.cosine_lr(0, 10, 1e-5, 1e-3), 1e-3, rel_tol=1e-12)
    assert math.isclose(dasconv.cosine_lr(10, 10, 1e-5, 1e-3), 1e-5, rel_tol=1e-12)
    assert abs(dasconv.effectiveness(3.77, 7.6, 6.32) - 67.77) <= 0.05

    per_class, mean = dasconv.miou([0, 0, 1, 1], [0, 1, 1, 1], 3)
    assert per_class[2] is None
    assert math.isclose(mean, (0.5 + 2 / 3) / 2)

    for op, err, ok in dasconv.gradcheck("conv2d", cases=2):
        assert ok, (op, err)

    model = dasconv.Model()
    assert model.param_count() == 7_586_641
    report = json.loads(model.audit_json())
    assert all(g["status"] == "pass" for g in report["gates"]), report["gates"]

    cfg = json.loads(model.config_json())
    cfg["input_hw"] = [32, 32]
    small = dasconv.Model(json.dumps(cfg))
    logits, labels = small.forward(dasconv.Tensor.zeros((1, 4, 32, 32)))
    assert logits.shape == (1, dasconv.NUM_CLASSES, 32, 32)
    assert len(labels) == 32 * 32 and max(labels) < dasconv.NUM_CLASSES

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "m.ckpt")
        small.save(path)
        again = dasconv.Model.load(path)
        assert again.forward(dasconv.Tensor.zeros((1, 4, 32, 32)))[1] == labels
        dasconv.synth(os.path.join(tmp, "corpus"), n=2, size=32)
        assert sorted(os.listdir(os.path.join(tmp, "corpus", "images", "rgb")))

    try:
        dasconv.Model('{"bogus": 1}')
    except ValueError:
        pass
    else:
        raise AssertionError("unknown config key accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
