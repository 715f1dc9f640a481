"""Writes a recorded /predict request/response pair under fixtures/golden.

The response tensor is a fixed function of the request latent so the pair can
be regenerated byte-for-byte. Stdlib only.
"""

import base64
import json
import math
import struct
from pathlib import Path

C, H, W = 4, 8, 8
OUT = Path(__file__).resolve().parent.parent / "fixtures" / "golden"


def f32(x):
    return struct.unpack("<f", struct.pack("<f", x))[0]


def cdst(values):
    head = b"CDST" + struct.pack("<5I", 1, 3, C, H, W)
    return head + struct.pack("<%df" % len(values), *values)


def main():
    n = C * H * W
    latent = [f32(math.sin(0.1 * i)) for i in range(n)]
    eps = [f32(0.5 * v - 0.01 * (i % 7)) for i, v in enumerate(latent)]

    request = {
        "condition": "golden_src",
        "timestep": 500,
        "adapters": [{"id": "style_a", "scale": 0.8}],
        "latent": base64.b64encode(cdst(latent)).decode("ascii"),
    }
    response = {"eps": base64.b64encode(cdst(eps)).decode("ascii")}

    OUT.mkdir(parents=True, exist_ok=True)
    (OUT / "predict_request.json").write_text(json.dumps(request, indent=2) + "\n")
    (OUT / "predict_response.json").write_text(json.dumps(response, indent=2) + "\n")
    (OUT / "latent.cdst").write_bytes(cdst(latent))
    (OUT / "eps.cdst").write_bytes(cdst(eps))


if __name__ == "__main__":
    main()
