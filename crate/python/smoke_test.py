"""Build the extension module and exercise it from Python.

    python3 python/smoke_test.py
"""

import json
import os
import shutil
import subprocess
import sys
import sysconfig
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def build():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "maskquant-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    lib = os.path.join(ROOT, "target", "release", "libmaskquant_py.so")
    dest = tempfile.mkdtemp(prefix="maskquant_py_")
    shutil.copy(lib, os.path.join(dest, "maskquant_py" + sysconfig.get_config_var("EXT_SUFFIX")))
    sys.path.insert(0, dest)


def main():
    build()
    import maskquant_py as mq

    assert mq.visibility_schedule(1, 8) == 0.875
    assert mq.prefix_len(64, 0.25) == 16
    masked = mq.simulate([[1, 2, 3, 4, 5, 6, 7, 8]], timesteps=4, mask_id=63, seed=3)
    assert len(masked) == 4
    assert masked == mq.simulate([[1, 2, 3, 4, 5, 6, 7, 8]], timesteps=4, mask_id=63, seed=3)

    w = [[0.5, -1.25, 2.0, 0.1], [-0.3, 0.7, -1.9, 1.1], [1.5, 0.2, -0.4, -0.8]]
    fit = mq.daq_fit(w, order=2)
    trace = fit.trace
    assert all(b <= a * (1 + 1e-9) for a, b in zip(trace, trace[1:])), trace
    assert abs(mq.proxy_loss(w, fit.dequantize()) - trace[-1]) < 1e-4 * max(1.0, trace[-1])
    print("daq_fit:", fit)

    sm = mq.SecondMoment(4)
    sm.accumulate([list(c) for c in zip(*w)])
    assert sm.count == 3
    d = sm.damped_inverse_diag()
    z = mq.importance_matrix(w, d)
    mask = mq.importance_mask(z)
    assert len(mask) == 3 and len(mask[0]) == 4

    assert mq.partition(4, 300, 128) == [(0, 128), (128, 256), (256, 300)]
    assert mq.allocate([float(i) for i in range(20)], 0.05) == [1] + [2] * 18 + [3]

    _, _, _, gb = mq.memory_estimate("llada8b-2bit")
    assert 3.1 <= gb <= 4.3, gb

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "w.qdt")
        mq.write_matrix(path, w)
        back = mq.read_matrix(path)
        assert all(abs(a - b) < 1e-6 for r, q in zip(w, back) for a, b in zip(r, q))
        report = json.loads(mq.run_pipeline(os.path.join(tmp, "run"), {"group_width": "8", "calib_sequences": "16"}))
        assert report["memory"]["estimate_matches_file"]
        assert all(layer["proxy_nonincreasing"] for layer in report["layers"])
        print("eval:", report["eval"])

    print("smoke test passed")


if __name__ == "__main__":
    main()
