"""Smoke test for the `ofb` extension module.

Build it with
    cargo build --release -p ofb-python --features extension-module
    cp target/release/libofb.so python/ofb.so
then run `python3 python/smoke_test.py` from the repository root.
"""

import json
import math
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import ofb  # noqa: E402


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    assert close(ofb.entropy([0.5, 0.5]), math.log(2))
    assert close(ofb.entropy([1.0, 0.0, 0.0]), 0.0)
    assert close(ofb.target_variance(4), 3 / 16)
    assert ofb.psi([0.5, 0.5]) > 300
    assert ofb.psi([0.0, 1.0]) < -300
    assert close(ofb.lambda_at(10, 0), 1.0) and close(ofb.lambda_at(10, 10), 0.0)
    assert close(ofb.budget_penalty(0.7, 0.5), 0.2)

    v = ofb.sparsity_scores([0.25, 0.75], [2, 4], [0.1, 0.9, 0.5, 0.3])
    assert [round(x, 12) for x in v] == [0.75, 1.0, 1.0, 0.75], v

    try:
        ofb.entropy([0.3, 0.3])
    except ValueError:
        pass
    else:
        raise AssertionError("non-simplex input accepted")

    t = json.loads(ofb.theorems(1000, [2, 4], 0))
    assert t["violations"] == [], t["violations"][:3]

    g = json.loads(ofb.gradcheck())
    bad = [e["name"] for e in g["entries"] if not e["passed"]]
    assert not bad, bad

    assert "trainer.tau" in ofb.default_config()
    print("python smoke test ok")


if __name__ == "__main__":
    main()
