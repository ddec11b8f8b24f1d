"""Equivalence PSNR as the activation bit-depth shrinks from 8 to 4.

Run: python3 demos/bit_depth_sweep.py
"""

import numpy as np

from intnet.calibration import geometric_bounds_for, scan_max_abs
from intnet.metrics import bit_depth_sweep
from intnet.quantizer import float_input
from intnet.toynets import random_images, vrcnn_net


def main() -> None:
    rng = np.random.default_rng(1)
    net = vrcnn_net(rng, size=64)
    calib = np.stack(random_images(rng, 8, net.input_shape))
    an = scan_max_abs(net, [float_input(calib, net.input_ratio)])
    bounds = geometric_bounds_for(net, 0.5, an)
    images = random_images(rng, 20, net.input_shape)

    sweep = bit_depth_sweep(net, bounds, images, (8, 7, 6, 5, 4))
    prev = None
    for bits, value in sweep.items():
        drop = "" if prev is None else f"  (drop {prev - value:.2f} dB)"
        print(f"{bits} bits: {value:6.2f} dB{drop}")
        prev = value


if __name__ == "__main__":
    main()
