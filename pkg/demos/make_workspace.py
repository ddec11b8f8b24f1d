"""Write a float model and a directory of images for trying the CLI.

Run: python3 demos/make_workspace.py [dir]
"""

import sys
from pathlib import Path

import numpy as np

from intnet.serialize import save_model
from intnet.toynets import random_images, vrcnn_net


def main() -> None:
    root = Path(sys.argv[1] if len(sys.argv) > 1 else "workspace")
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(3)
    net = vrcnn_net(rng, size=32)
    save_model(net, root / "vrcnn.fnet")
    for k, image in enumerate(random_images(rng, 12, net.input_shape)):
        np.save(root / "images" / f"{k:03d}.npy", image)
    print(f"wrote {root / 'vrcnn.fnet'} and 12 images under {root / 'images'}")


if __name__ == "__main__":
    main()
