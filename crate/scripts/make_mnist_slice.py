"""Build the 5,000-image MNIST slice used by the desk-scale run.

Source: the `mnist` npm package (src/digits/<d>.json, 28x28 floats in [0,1]).
Usage: python3 make_mnist_slice.py <path/to/mnist/package> <out_dir>
Images are interleaved by digit (500 per class) and quantized to bytes.
"""
import json
import struct
import sys

import numpy as np

PER_CLASS = 500


def main(pkg, out):
    per = [
        np.array(json.load(open(f"{pkg}/src/digits/{d}.json"))["data"], dtype=np.float64).reshape(-1, 784)
        for d in range(10)
    ]
    images, labels = [], []
    for i in range(PER_CLASS):
        for d in range(10):
            images.append(per[d][i])
            labels.append(d)
    pixels = np.clip(np.rint(np.stack(images) * 255.0), 0, 255).astype(np.uint8)
    n = len(images)
    with open(f"{out}/mnist-5k-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(pixels.tobytes())
    with open(f"{out}/mnist-5k-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(np.array(labels, dtype=np.uint8).tobytes())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
