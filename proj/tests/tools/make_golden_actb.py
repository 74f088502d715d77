#!/usr/bin/env python3
"""Writes tests/data/golden_small.actb straight from the byte layout.

Deliberately independent of the C++ writer: struct + zlib only.
"""
import json
import struct
import sys
import zlib
from pathlib import Path

MODEL_ID = "toy-golden"
LAYER_COUNT = 4
HIDDEN = 8
HEADS = 2
LAYERS = [0, 2]
TOKENS = 3
LABELS = [0, 1, 2]  # visual_text, visual_background, prompt_text


def value(sample, layer, t, i, side):
    v = (sample + 1) * 0.5 + layer * 0.25 + t * 0.125 + i * 0.0625
    if i % 2:
        v = -v
    return v if side == 0 else v * 0.5


def block(sample, layer, side):
    body = struct.pack("<III", layer, TOKENS, HIDDEN)
    for t in range(TOKENS):
        for i in range(HIDDEN):
            body += struct.pack("<f", value(sample, layer, t, i, side))
    return body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)


def build():
    manifest = {
        "model_id": MODEL_ID,
        "layer_count": LAYER_COUNT,
        "hidden": HIDDEN,
        "head_count": HEADS,
        "capture_layers": LAYERS,
        "dtype": "float32",
        "endianness": "little",
        "split": "eval",
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    out = b"ACTB" + struct.pack("<I", 1) + struct.pack("<I", len(text)) + text
    samples = ["golden-0", "golden-1"]
    out += struct.pack("<Q", len(samples))
    for s, sid in enumerate(samples):
        out += struct.pack("<I", len(sid)) + sid.encode()
        out += struct.pack("<I", TOKENS) + b"".join(struct.pack("<I", p) for p in range(TOKENS))
        for side in (0, 1):
            out += struct.pack("<I", TOKENS) + bytes(LABELS)
            for layer in LAYERS:
                out += block(s, layer, side)
    return out


if __name__ == "__main__":
    target = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(__file__).resolve().parents[1] / "data" / "golden_small.actb"
    target.write_bytes(build())
    print(f"wrote {target} ({target.stat().st_size} bytes)")
