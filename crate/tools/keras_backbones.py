#!/usr/bin/env python3
"""Keras bridge for the native backbones.

golden   Build each Keras backbone with the seeded synthetic weights used by
         the Rust `SeededWeights` provider and write pooled features for two
         fixed inputs. The Rust golden test compares against these files.

convert  Export published ImageNet weights to the safetensors layout read by
         `WeightSource::Checkpoint`. With `--seeded SEED` the seeded weights
         are exported instead, which checks the container layout offline.

    python tools/keras_backbones.py golden --out crates/core/tests/data/golden
    python tools/keras_backbones.py convert VGG16 --out vgg16.safetensors
"""

import argparse
import json
import math
import os
import sys

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")

import numpy as np

MASK = (1 << 64) - 1
GAMMA = 0x9E3779B97F4A7C15
BACKBONES = ["VGG16", "ResNet50V2", "EfficientNetB0"]
FORMAT = "retino-bench-backbone/1"
IMAGENET_STDDEV_RGB = [0.229, 0.224, 0.225]


def splitmix64(z):
    """Vectorised over uint64 arrays; wraps like the Rust version."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def fnv1a64(data):
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x00000100000001B3) & MASK
    return h


def keyed_uniform(seed, name, count):
    key = int(splitmix64(np.uint64((seed ^ fnv1a64(name.encode())) & MASK)))
    idx = np.arange(count, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = splitmix64(np.uint64(key) + idx * np.uint64(GAMMA))
    return (x >> np.uint64(40)).astype(np.float32) / np.float32(8388608.0) - np.float32(1.0)


def seeded_tensor(seed, name, shape):
    n = int(np.prod(shape))
    u = keyed_uniform(seed, name, n)
    role = name.rsplit("/", 1)[-1]
    if role in ("kernel", "depthwise_kernel"):
        fan_in = int(np.prod(shape[:-1])) if role == "kernel" else shape[0] * shape[1]
        v = u * np.float32(math.sqrt(6.0 / fan_in))
    elif role == "bias":
        v = np.float32(0.05) * u
    elif role == "gamma":
        v = np.float32(1.0) + np.float32(0.1) * u
    elif role in ("beta", "moving_mean"):
        v = np.float32(0.1) * u
    elif role == "moving_variance":
        v = np.float32(1.0) + np.float32(0.25) * u
    elif role == "mean":
        v = np.float32(0.45) + np.float32(0.05) * u
    elif role == "variance":
        v = np.float32(0.06) + np.float32(0.01) * u
    else:
        v = np.float32(0.1) * u
    return v.astype(np.float32).reshape(shape)


def build(name, weights):
    import keras

    ctor = getattr(keras.applications, name)
    return ctor(include_top=False, weights=weights, input_shape=(224, 224, 3), pooling="avg")


def preprocess(name, raw):
    x = raw.astype(np.float32).copy()
    if name == "VGG16":
        x = x[..., ::-1] - np.array([103.939, 116.779, 123.68], dtype=np.float32)
    elif name == "ResNet50V2":
        x = x / np.float32(127.5) - np.float32(1.0)
    return x


def variables(model):
    """(`layer/role`, variable) for every tensor the Rust side reads."""
    out = []
    for layer in model.layers:
        for var in layer.weights:
            role = var.path.rsplit("/", 1)[-1]
            if role == "count":
                continue
            # Keras 3 calls the depthwise weight `kernel`
            if type(layer).__name__ == "DepthwiseConv2D" and role == "kernel":
                role = "depthwise_kernel"
            out.append((f"{layer.name}/{role}", var))
    return out


def seeded_image(seed):
    u = keyed_uniform(seed, "golden/image", 224 * 224 * 3)
    return ((u + np.float32(1.0)) * np.float32(127.5)).reshape(224, 224, 3)


def seeded_model(name, seed):
    model = build(name, None)
    for key, var in variables(model):
        var.assign(seeded_tensor(seed, key, tuple(var.shape)))
    for layer in model.layers:
        # Normalization caches its statistics when built
        if hasattr(layer, "finalize_state"):
            layer.finalize_state()
    return model


def cmd_golden(args):
    os.makedirs(args.out, exist_ok=True)
    inputs = {"zeros": np.zeros((224, 224, 3), np.float32), "seeded": seeded_image(args.image_seed)}
    header = {"weights_seed": args.weights_seed, "image_seed": args.image_seed, "cases": []}
    for name in args.backbones:
        model = seeded_model(name, args.weights_seed)
        for label, raw in inputs.items():
            x = preprocess(name, raw)[None]
            feats = np.asarray(model(x, training=False))[0].astype("<f4")
            fname = f"{name}_{label}.f32"
            feats.tofile(os.path.join(args.out, fname))
            header["cases"].append({"backbone": name, "input": label, "file": fname, "len": int(feats.size)})
            print(f"{name} {label}: {feats.size} features, mean {feats.mean():.6f}", file=sys.stderr)
        outputs = [np.fromfile(os.path.join(args.out, f"{name}_{label}.f32"), "<f4") for label in inputs]
        spread = np.abs(outputs[0] - outputs[1]).max() / np.abs(outputs[1]).max()
        print(f"{name}: input sensitivity {spread:.3e}", file=sys.stderr)
    with open(os.path.join(args.out, "golden.json"), "w") as f:
        json.dump(header, f, indent=2)


def cmd_convert(args):
    from safetensors.numpy import save_file

    if args.seeded is None:
        model = build(args.backbone, "imagenet")
    else:
        model = seeded_model(args.backbone, args.seeded)
    tensors = {key: np.ascontiguousarray(np.asarray(var), dtype=np.float32) for key, var in variables(model)}
    if args.backbone == "EfficientNetB0" and args.seeded is None:
        tensors["input_rescale/scale"] = np.array([1.0 / math.sqrt(s) for s in IMAGENET_STDDEV_RGB], np.float32)
    meta = {"backbone": args.backbone, "format": FORMAT, "layer_order": json.dumps(list(tensors))}
    save_file(tensors, args.out, metadata=meta)
    print(f"wrote {len(tensors)} tensors to {args.out}", file=sys.stderr)


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("golden")
    g.add_argument("--out", required=True)
    g.add_argument("--weights-seed", type=int, default=7)
    g.add_argument("--image-seed", type=int, default=11)
    g.add_argument("--backbones", nargs="+", default=BACKBONES, choices=BACKBONES)
    c = sub.add_parser("convert")
    c.add_argument("backbone", choices=BACKBONES)
    c.add_argument("--out", required=True)
    c.add_argument("--seeded", type=int, default=None, metavar="SEED")
    args = p.parse_args()
    {"golden": cmd_golden, "convert": cmd_convert}[args.command](args)


if __name__ == "__main__":
    main()
