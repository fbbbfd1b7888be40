"""Fixture generators for golden files; run ``python tests/golden.py`` to regenerate."""
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from seqweather.data import SceneSpec, generate_scene
from seqweather.model import ArchDescriptor, SegmentationModel, forward_probs, to_tensor

GOLDEN_DIR = Path(__file__).parent / "golden"


def golden_probs() -> np.ndarray:
    """Probabilities of a seed-trained toy model on a held-out scene."""
    torch.manual_seed(123)
    model = SegmentationModel(ArchDescriptor((8, 8, 16), (8,), 5, 4, ()))
    opt = torch.optim.SGD(model.parameters(), lr=0.05, momentum=0.9)
    spec = SceneSpec(image_size=(32, 32))
    train = [generate_scene(spec, np.random.default_rng(s)) for s in range(4)]
    x = to_tensor(np.stack([t.image for t in train]))
    y = torch.from_numpy(np.stack([t.label for t in train]).astype(np.int64))
    for _ in range(25):
        loss = F.cross_entropy(model(x), y)
        opt.zero_grad()
        loss.backward()
        opt.step()
    held_out = generate_scene(spec, np.random.default_rng(99)).image
    return forward_probs(model, held_out)


if __name__ == "__main__":
    GOLDEN_DIR.mkdir(exist_ok=True)
    np.save(GOLDEN_DIR / "forward_probs.npy", golden_probs())
