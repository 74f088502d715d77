import json
import os
import pathlib

import numpy as np
import pytest

import ocrlens

DATA = pathlib.Path(os.environ.get("OCRLENS_TEST_DATA", pathlib.Path(__file__).parents[1] / "data"))


def test_match_fixture_agrees():
    cases = json.loads((DATA / "normalized_match_cases.json").read_text())
    for c in cases:
        assert ocrlens.match_answer(c["ground_truth"], c["prediction"]) == (c["matched"], c["flagged"]), c["note"]


def test_spec_canonical_and_errors():
    assert ocrlens.canonical_spec("pca_L6-6_pc3@alpha=1.0") == "pca_L6_pc3"
    with pytest.raises(ocrlens.OcrlensError) as info:
        ocrlens.canonical_spec("pca_L9-3_pc1")
    assert info.value.code == "RangeError"


def test_project_out_removes_component():
    out = ocrlens.project_out([3.0, 4.0, 5.0], [[1.0, 0.0, 0.0]], 1)
    assert out == [0.0, 4.0, 5.0]


def test_decode_reads_glyphs_and_ablation_breaks_it():
    scenes = ocrlens.generate_scenes("read_text", 6, seed=2)
    answers = [ocrlens.decode(s) for s in scenes]
    assert answers == [s["answer"] for s in scenes]
    broken = [ocrlens.decode(s, spec="heads:L6H0,L6H1,L6H2,L6H3") for s in scenes]
    assert broken != answers


def test_golden_actb_from_python():
    manifest, samples = ocrlens.read_actb(DATA / "golden_small.actb")
    assert manifest["model_id"] == "toy-golden"
    assert len(samples) == 2
    block = samples[1]["original"][2]
    assert block.shape == (3, 8)
    assert block.dtype == np.float32
    assert block[1, 3] == pytest.approx(-(1.0 + 0.5 + 0.125 + 0.1875))


def test_small_sweep_shape():
    r = ocrlens.layer_sweep(layers=[5, 6], components=[1], count=32, seed=1)
    assert r["kind"] == "layer_sweep"
    assert [p["layer"] for p in r["curve"]] == [5, 6]
    csv = ocrlens.layer_sweep(layers=[6], components=[1], count=32, seed=1, report="csv")
    assert csv.startswith("intervention,task,baseline,intervened,delta_pp,layer,N,alpha,seed\n")
