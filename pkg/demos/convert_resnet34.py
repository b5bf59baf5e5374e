"""
Torchvision ResNet34 weights to a weight archive
================================================

The encoder reads torchvision parameter names from a PMWA archive, so the
conversion is a rename-free dump of the state dict. Needs torch and
torchvision, which the library itself never imports.

    python demos/convert_resnet34.py resnet34.pmwa            # ImageNet weights (download)
    python demos/convert_resnet34.py resnet34.pmwa local.pth  # a saved state dict
"""

import sys

import numpy as np

from pyramid_mamba.archive import read_archive, write_archive
from pyramid_mamba.blocks import ResNet34Encoder, resnet34_parameter_shapes

try:
    import torch
    import torchvision
except ImportError:
    sys.exit("this converter needs torch and torchvision")

out = sys.argv[1] if len(sys.argv) > 1 else "resnet34.pmwa"
if len(sys.argv) > 2:
    state = torch.load(sys.argv[2], map_location="cpu")
    source = sys.argv[2]
else:
    state = torchvision.models.resnet34(weights="IMAGENET1K_V1").state_dict()
    source = "torchvision IMAGENET1K_V1"

# keep only what the encoder consumes; the classifier head and counters are dropped
wanted = resnet34_parameter_shapes()
tensors = {k: state[k].detach().cpu().numpy().astype(np.float32) for k in wanted}
write_archive(out, tensors, {"source": source, "arch": "resnet34"})
print(f"wrote {len(tensors)} tensors to {out}")

# round trip through the encoder as a quick sanity check
weights, meta = read_archive(out)
feats = ResNet34Encoder(weights)(np.zeros((1, 3, 64, 64), dtype=np.float32))
print("feature shapes:", [f.shape for f in feats], "meta:", meta)
