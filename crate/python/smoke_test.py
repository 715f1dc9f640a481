"""Smoke test for the cdsedit extension module.

Build and install first:  pip install --no-build-isolation -e crates/py
"""

import json
import math
import sys
import tempfile
from pathlib import Path

import cdsedit

ROOT = Path(__file__).resolve().parent.parent


def check(cond, what):
    if not cond:
        print("FAIL", what)
        sys.exit(1)
    print("ok  ", what)


def main():
    demo = json.loads((ROOT / "fixtures" / "demo.json").read_text())
    engine = dict(demo["engine"], steps=120)

    sched = cdsedit.NoiseSchedule("scaled_linear", 1000, 0.00085, 0.012)
    check(abs(sched.alpha_bar(1) - 0.99915) < 1e-12, "alpha_bar(1) of the default schedule")
    check(cdsedit.plan_timesteps(5, 900, 100) == [900, 700, 500, 300, 100], "linear timestep plan")

    w = cdsedit.softmin_weights([[0.9], [0.1]], 1.0)
    check(abs(w[0][0] - 1 / (1 + math.exp(0.8))) < 1e-12, "softmin weights")
    check(abs(cdsedit.cosine([1, 1], [1, 0]) - 1 / math.sqrt(2)) < 1e-6, "patch cosine")

    t = cdsedit.LatentTensor((1, 1, 2), [2.0, -1.0])
    check(cdsedit.LatentTensor.from_cdst(t.to_cdst()) == t, "CDST round trip")
    zero = cdsedit.LatentTensor.zeros((1, 1, 2))
    check(cdsedit.cds_grad(t, zero, t, zero, eta=0.0) == cdsedit.dds_grad(t, zero), "eta=0 reduces to DDS")

    backend = cdsedit.Backend.analytic(demo["backend"]["analytic"], sched)
    check(backend.shape == (4, 16, 16), "analytic backend shape")
    adapters = [(a["id"], a["scale"]) for a in engine["target_adapters"]]
    src = backend.concept_mean("source")
    tgt = backend.concept_mean("target", adapters)
    eps = backend.guided_predict(src, 500, "target", "negative", 10.0, adapters[:1])
    check(eps.shape == src.shape, "guided prediction shape")

    edited, trace, grads = cdsedit.run_edit(backend, src, engine, record_gradients=True)
    check(len(trace) == 120 and len(grads) == 120, "trace and gradients per step")
    check(all(a["t"] > b["t"] for a, b in zip(trace, trace[1:])), "timesteps descend")
    ratio = edited.distance(tgt) / src.distance(tgt)
    check(ratio < 0.5, "edit moves toward the target concept (ratio %.3f)" % ratio)

    same = dict(engine, target_cond="source", target_adapters=[])
    unchanged, _, _ = cdsedit.run_edit(backend, src, same)
    check(unchanged == src, "identity edit is exact")

    rows = cdsedit.run_sweep(backend, src, "eta", [0.05, 1.0, 5.0], dict(engine, steps=60), tgt)
    dists = [r["dist_to_source"] for r in rows]
    check(dists == sorted(dists, reverse=True), "distance to source falls as eta grows")

    with tempfile.TemporaryDirectory() as d:
        path = str(Path(d) / "edited.cdst")
        edited.write(path)
        check(cdsedit.LatentTensor.read(path) == edited, "CDST file write/read")

    try:
        backend.predict(src, 500, "no-such-condition")
    except cdsedit.CdsError as e:
        check("no-such-condition" in str(e), "unknown condition raises CdsError")
    else:
        check(False, "unknown condition raises CdsError")

    print("smoke test passed")


if __name__ == "__main__":
    main()
