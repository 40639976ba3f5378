"""Build the shipped lenet-small model and its digit image fixtures.

The handwritten digits bundled with scikit-learn (8x8, 1797 samples) are
upscaled to 20x20 and centred on a 28x28 canvas.  The last ``--holdout``
images become the IDX fixture set; the rest train the network with torch.
Weights are exported in the manifest format read by ``faultsim.cnn.load_model``.

    python3 scripts/make_lenet_small.py --seed 0
"""
import argparse
import logging
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from sklearn.datasets import load_digits

from faultsim.cnn import LENET_SMALL_LAYERS, Model, load_idx, reference_infer, save_model, write_idx

log = logging.getLogger("make_lenet_small")
DATA = Path(__file__).resolve().parents[1] / "src" / "faultsim" / "data"


def digits_28x28() -> tuple[np.ndarray, np.ndarray]:
    d = load_digits()
    x = torch.tensor(d.images, dtype=torch.float32)[:, None] / 16.0
    x = F.interpolate(x, size=(20, 20), mode="bilinear", align_corners=False)
    x = F.pad(x, (4, 4, 4, 4))
    pix = np.clip(np.rint(x.numpy()[:, 0] * 255), 0, 255).astype(np.uint8)
    return pix, d.target.astype(np.uint8)


class LeNetSmall(torch.nn.Module):
    def __init__(self):
        super().__init__()
        self.c1 = torch.nn.Conv2d(1, 4, 5)
        self.c2 = torch.nn.Conv2d(4, 8, 5)
        self.fc = torch.nn.Linear(8 * 4 * 4, 10)

    def forward(self, x):
        x = F.max_pool2d(F.relu(self.c1(x)), 2, 2)
        x = F.max_pool2d(F.relu(self.c2(x)), 2, 2)
        return self.fc(x.flatten(1))


def train(pix, labels, epochs: int, seed: int) -> LeNetSmall:
    torch.manual_seed(seed)
    net = LeNetSmall()
    x = torch.tensor(pix, dtype=torch.float32)[:, None] / 255.0
    y = torch.tensor(labels, dtype=torch.long)
    opt = torch.optim.Adam(net.parameters(), lr=3e-3)
    g = torch.Generator().manual_seed(seed)
    for ep in range(epochs):
        perm = torch.randperm(len(y), generator=g)
        for i in range(0, len(y), 64):
            idx = perm[i:i + 64]
            opt.zero_grad()
            loss = F.cross_entropy(net(x[idx]), y[idx])
            loss.backward()
            opt.step()
        log.info("epoch %d loss %.4f", ep, loss.item())
    return net


def export(net: LeNetSmall) -> Model:
    t = lambda p: p.detach().numpy().astype(np.float32).reshape(-1)  # noqa: E731
    weights = [t(net.c1.weight), None, None, t(net.c2.weight), None, None, t(net.fc.weight), None]
    biases = [t(net.c1.bias), None, None, t(net.c2.bias), None, None, t(net.fc.bias), None]
    return Model("lenet-small", (1, 28, 28), LENET_SMALL_LAYERS, weights, biases)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--holdout", type=int, default=200)
    ap.add_argument("--out", type=Path, default=DATA)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    pix, labels = digits_28x28()
    order = np.random.default_rng(args.seed).permutation(len(labels))
    pix, labels = pix[order], labels[order]
    tr, te = slice(0, -args.holdout), slice(-args.holdout, None)

    net = train(pix[tr], labels[tr], args.epochs, args.seed)
    model = export(net)

    (args.out / "lenet-small").mkdir(parents=True, exist_ok=True)
    (args.out / "digits").mkdir(parents=True, exist_ok=True)
    save_model(model, args.out / "lenet-small" / "lenet-small.json", "lenet-small.bin")
    img_path = args.out / "digits" / "test-images-idx3-ubyte"
    lab_path = args.out / "digits" / "test-labels-idx1-ubyte"
    write_idx(img_path, lab_path, pix[te], labels[te])

    ds = load_idx(img_path, lab_path)
    hits = sum(int(np.argmax(reference_infer(model, ds.image(i))) == ds.labels[i])
               for i in range(len(ds)))
    log.info("held-out accuracy (reference path): %d/%d", hits, len(ds))


if __name__ == "__main__":
    main()
