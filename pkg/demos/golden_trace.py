"""Dump per-layer integer activations and show they ignore thread count.

Run: python3 demos/golden_trace.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from intnet.calibration import geometric_bounds_for
from intnet.int_engine import forward_int
from intnet.pipeline import convert_network
from intnet.tensor import save_tensor
from intnet.toynets import residual_net


def main() -> None:
    out_dir = Path(sys.argv[1] if len(sys.argv) > 1 else "golden_trace")
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(2)
    net = residual_net(rng, size=16, skip_conv=True)
    model = convert_network(net, geometric_bounds_for(net, 0.5, 0.2)).model
    raw = rng.integers(0, 256, (1, *net.input_shape), dtype=np.uint8)

    _, _, single = forward_int(model, raw, threads=1, trace=True)
    _, _, multi = forward_int(model, raw, threads=8, tile_rows=3, trace=True)
    for lid in sorted(single):
        same = np.array_equal(single[lid], multi[lid])
        save_tensor(out_dir / f"{lid}.tensor", single[lid])
        print(f"{lid:6s} {str(single[lid].dtype):6s} {single[lid].shape}  identical across threads: {same}")
    print(f"trace written to {out_dir}/")


if __name__ == "__main__":
    main()
