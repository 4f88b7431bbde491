# SPDX-License-Identifier: MIT OR Apache-2.0
"""End-to-end smoke test for the typolens_py extension.

Build the extension and put it on the path first:

    cargo build --release -p typolens-py --features extension-module
    cp target/release/libtypolens_py.so python/typolens_py.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import typolens_py as tl  # noqa: E402


def main():
    clean, typo = tl.gen_synthetic_dataset(n=60, seed=1)
    model, protos = tl.gen_planted_model(planted=[(1, 2)])
    print(model)
    assert len(clean) == len(typo) == 60
    assert protos.width == model.config["embed_dim"]

    out = model.forward(typo.image(0))
    for row in out["cls_attention"].values():
        assert abs(sum(row) - 1.0) < 1e-5

    scores = tl.typo_attention_score(model, typo)
    flat = [s for row in scores for s in row]
    best = max(range(len(flat)), key=flat.__getitem__)
    assert divmod(best, len(scores[0])) == (1, 2), scores

    control = clean.balanced_subset(0.05)
    build = tl.build_circuit(model, typo, control, protos)
    heads = [(h["layer"], h["head"]) for h in build["circuit"]["heads"]]
    assert heads[0] == (1, 2), heads

    base = tl.zero_shot(model, typo, protos)
    ablated = tl.zero_shot(model, typo, protos, ablate=heads)
    print(f"typo accuracy {base['acc_image']:.3f} -> {ablated['acc_image']:.3f}")
    assert ablated["acc_image"] > base["acc_image"]

    sweep = tl.alpha_sweep(model, heads, typo, protos, alphas=[0.0, 1.0])
    assert sweep[0]["mean_p_typo"] > sweep[-1]["mean_p_typo"]

    report = tl.sink_report(model, (1, 2), clean, typo)
    print(f"sink AUC {report['auc']:.3f}")
    assert report["auc"] > 0.99

    assert tl.roc_auc([0.1, 0.9], [False, True]) == 1.0
    dim, flat_var, _ = tl.intrinsic_dimensionality([[1.0, 0.0], [-1.0, 0.0], [2.0, 0.0]])
    assert (dim, flat_var) == (1, False)
    probs = tl.softmax_rows([[0.0, math.log(3.0)]])
    assert abs(probs[0][1] - 0.75) < 1e-6

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.safetensors")
        tl.export_dyslexic(model, heads, path)
        dys = tl.Model.load(path)
        assert sorted(dys.circuit) == sorted(heads)
        assert dys.model_hash == model.model_hash
        fixed = tl.zero_shot(dys, typo, protos)
        assert fixed["acc_image"] == ablated["acc_image"]

    print("smoke test passed")


if __name__ == "__main__":
    main()
