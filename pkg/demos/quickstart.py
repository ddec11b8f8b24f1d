"""Convert a small random network to integers and check it against float.

Run: python3 demos/quickstart.py
"""

import numpy as np

from intnet.calibration import geometric_bounds_for
from intnet.metrics import equivalence_psnr, reference_network
from intnet.pipeline import PipelineConfig, convert_network
from intnet.serialize import dumps, size_breakdown
from intnet.toynets import random_images, vrcnn_net


def main() -> None:
    rng = np.random.default_rng(0)
    net = vrcnn_net(rng, size=32)
    bounds = geometric_bounds_for(net, a0=0.5, an=0.1)
    conv = convert_network(net, bounds, PipelineConfig(activation_bits=7))
    model = conv.model

    print("BReLU bounds (float) and their integer clip values:")
    for lid, rec in model.records.items():
        if rec.op == "brelu":
            print(f"  {lid:8s} h_rf={float(rec.h_rf):.4f}  h_i={int(rec.h_i[0])}  mul={int(rec.mul[0])}"
                  f"  shift={int(rec.shift[0])}")

    images = random_images(rng, 10, net.input_shape)
    value = equivalence_psnr(reference_network(net, bounds), model, images)
    print(f"float vs integer PSNR over 10 images: {value:.2f} dB")

    f, i = size_breakdown(dumps(net)), size_breakdown(dumps(model))
    print(f"weight bytes: float {f.weight_payload}, integer {i.weight_payload}")
    print(f"integer metadata share: {i.metadata_fraction:.2%} (tiny nets are mostly metadata)")


if __name__ == "__main__":
    main()
