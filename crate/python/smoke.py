"""Smoke test for the pcam_py extension module.

Build and install the wheel first:

    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/pcam_py-*.whl

then run ``python python/smoke.py``. Exits non-zero on the first failure.
"""

import json
import math
import tempfile
from pathlib import Path

import pcam_py


def recipe(lr, epochs, optimizer, **extra):
    r = {
        "lr": lr,
        "momentum": 0.9,
        "weight_decay": 0.0,
        "epochs": epochs,
        "warmup_epochs": 0,
        "batch_size": 8,
        "seed": 0,
        "optimizer": optimizer,
    }
    r.update(extra)
    return json.dumps(r)


def main():
    data = pcam_py.SynthData.generate(
        seed=3, classes=4, train_per_class=12, test_per_class=3,
        image_size=16, patch_size=8, noise_level=2.0, distractors=1,
    )
    assert len(data) == 4 * 15
    assert data.count("train") == 48 and data.count("test") == 12
    image_id, label, pixels = data.sample("test", 0)
    assert len(pixels) == 16 * 16 * 3, len(pixels)
    assert sum(data.trait_mask("test", 0)) == 64
    assert json.loads(pcam_py.default_recipe("prompt"))["optimizer"] == "sgd"

    model = pcam_py.Model(seed=3, image_size=16, patch_size=8, classes=4,
                          layers=2, embed_dim=16, heads=2, mlp_dim=32)
    log = model.pretrain(data, recipe(0.01, 60, "adamw"))
    assert len(log["epochs"]) == 60
    assert len(model.logits(pixels)) == 4

    try:
        pcam_py.Prompts.train(model, data, "deep", recipe(0.1, 1, "sgd"))
    except ValueError as e:
        assert "frozen" in str(e), e
    else:
        raise AssertionError("prompt training accepted an unfrozen backbone")

    model.freeze()
    before = model.checksum()
    prompts, log = pcam_py.Prompts.train(
        model, data, "deep", recipe(0.1, 40, "sgd", prompt_init="mean_cls"))
    assert model.checksum() == before
    assert prompts.classes == 4 and prompts.variant == "deep"
    train_acc = prompts.accuracy(model, data, "train")
    print(f"prompt train accuracy {train_acc:.3f}")

    scores = prompts.scores(model, pixels)
    assert len(scores) == 4
    maps = prompts.attention(model, pixels, label)
    assert len(maps) == 2 and all(len(m) == 4 for m in maps)
    assert all(math.isclose(sum(m), 1.0, abs_tol=1e-12) for m in maps)
    ranking = prompts.trait_ranking(model, pixels)
    assert sorted(ranking["importance"]) == [0, 1]

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        model.save(tmp / "backbone.ckpt")
        prompts.save(tmp / "prompts.ckpt")
        m2 = pcam_py.Model.load(tmp / "backbone.ckpt")
        p2 = pcam_py.Prompts.load(tmp / "prompts.ckpt")
        assert m2.checksum() == before
        assert p2.scores(m2, pixels) == scores
        data.save(tmp / "data")
        again = pcam_py.SynthData.load(tmp / "data")
        assert again.sample("test", 0) == (image_id, label, pixels)

    print("smoke test passed")


if __name__ == "__main__":
    main()
