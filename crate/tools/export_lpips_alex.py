"""Export LPIPS (AlexNet, v0.1) weights to a single safetensors file.

    python tools/export_lpips_alex.py $MATFUSE_WEIGHTS_DIR/lpips_alex.safetensors

Needs torchvision's pretrained AlexNet (downloaded on first use) and the
`lpips` package, which ships the linear heads.
"""
import sys

import lpips
import torch
from safetensors.torch import save_file

model = lpips.LPIPS(net="alex", pretrained=True, verbose=False).eval()
slices = [model.net.slice1, model.net.slice2, model.net.slice3, model.net.slice4, model.net.slice5]
tensors = {}
for k, (sl, idx) in enumerate(zip(slices, [0, 3, 6, 8, 10])):
    conv = getattr(sl, str(idx))
    tensors[f"features.{idx}.weight"] = conv.weight.detach().float().contiguous()
    tensors[f"features.{idx}.bias"] = conv.bias.detach().float().contiguous()
    tensors[f"lin{k}.model.1.weight"] = model.lins[k].model[-1].weight.detach().float().contiguous()
save_file(tensors, sys.argv[1])
