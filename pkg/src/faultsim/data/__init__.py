"""Bundled lenet-small weights and held-out digit images."""
from pathlib import Path

DATA_DIR = Path(__file__).resolve().parent
LENET_SMALL = DATA_DIR / "lenet-small" / "lenet-small.json"
DIGITS_IMAGES = DATA_DIR / "digits" / "test-images-idx3-ubyte"
DIGITS_LABELS = DATA_DIR / "digits" / "test-labels-idx1-ubyte"
