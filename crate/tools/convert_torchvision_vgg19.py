"""Convert torchvision VGG-19 weights into the artmap weight file layout.

torchvision normalizes inputs as (x - mean) / std with x in [0, 1]. artmap
feeds 255 * x - 255 * mean, so conv1_1 is rescaled by 1 / (255 * std) per
input channel and the file records mean = 255 * mean.

    python tools/convert_torchvision_vgg19.py --out vgg19.safetensors
    python tools/convert_torchvision_vgg19.py --state-dict vgg19.pth --out vgg19.safetensors
"""

import argparse
import hashlib

import torch
from safetensors.torch import save_file

MEAN = [0.485, 0.456, 0.406]
STD = [0.229, 0.224, 0.225]
BLOCKS = [2, 2, 4, 4, 4]


def layer_names():
    return [f"conv{b + 1}_{i + 1}" for b, n in enumerate(BLOCKS) for i in range(n)]


def load_features(state_dict_path):
    import torchvision

    if state_dict_path:
        model = torchvision.models.vgg19()
        model.load_state_dict(torch.load(state_dict_path, map_location="cpu"))
    else:
        model = torchvision.models.vgg19(weights=torchvision.models.VGG19_Weights.IMAGENET1K_V1)
    return model.features


def convert(features):
    convs = [m for m in features if isinstance(m, torch.nn.Conv2d)]
    names = layer_names()
    if len(convs) != len(names):
        raise SystemExit(f"expected {len(names)} conv layers, found {len(convs)}")
    tensors = {}
    for name, conv in zip(names, convs):
        w = conv.weight.detach().to(torch.float32).clone()
        if name == "conv1_1":
            scale = torch.tensor([1.0 / (255.0 * s) for s in STD]).view(1, 3, 1, 1)
            w = w * scale
        tensors[f"{name}.weight"] = w.contiguous()
        tensors[f"{name}.bias"] = conv.bias.detach().to(torch.float32).clone().contiguous()
    return tensors


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--state-dict", help="local torchvision vgg19 state dict")
    ap.add_argument("--out", required=True)
    args = ap.parse_args()

    tensors = convert(load_features(args.state_dict))
    metadata = {
        "format": "artmap-vgg19",
        "channel_order": "rgb",
        "mean_rgb": ",".join(repr(255.0 * m) for m in MEAN),
    }
    save_file(tensors, args.out, metadata=metadata)
    with open(args.out, "rb") as f:
        print(hashlib.sha256(f.read()).hexdigest(), args.out)


if __name__ == "__main__":
    main()
