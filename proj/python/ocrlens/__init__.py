"""Python access to the ocrlens toy-model toolkit."""

import json

try:
    from . import _ocrlens as _core
except ImportError:  # build tree: the extension sits next to the package
    import _ocrlens as _core

OcrlensError = _core.OcrlensError
normalize_answer = _core.normalize_answer
canonical_spec = _core.canonical_spec
project_out = _core.project_out
load_directions = _core.load_directions


def match_answer(ground_truth, prediction):
    """(matched, flagged) for one prediction."""
    return _core.match_answer(ground_truth, prediction)


def normalized_match(ground_truth, prediction):
    return _core.match_answer(ground_truth, prediction)[0]


def generate_scenes(question="read_text", count=16, seed=0, text_probability=1.0):
    return json.loads(_core.generate_scenes(question, count, seed, text_probability))


def decode(scene, config=None, spec="baseline"):
    cfg = json.dumps(config) if config else ""
    return _core.decode(cfg, json.dumps(scene), spec)


def read_actb(path):
    manifest, samples = _core.read_actb(str(path))
    return json.loads(manifest), samples


def layer_sweep(config=None, layers=(), components=(3,), alphas=(1.0,), count=160, seed=0, report="json"):
    text = _core.layer_sweep(json.dumps(config) if config else "", list(layers), list(components),
                             list(alphas), count, seed, report)
    return json.loads(text) if report == "json" else text


__all__ = [
    "OcrlensError", "normalize_answer", "match_answer", "normalized_match", "canonical_spec",
    "project_out", "generate_scenes", "decode", "read_actb", "load_directions", "layer_sweep",
]
