"""Shared fixtures.

The desk-scale backbone used by the learning tests is pretrained once per
session (about three minutes of CPU) and cached under pytest's cache
directory, keyed by the recipe, so repeated sessions skip the wait.  Tests
that only need tiny models build their own and never touch this fixture.
"""
import hashlib
import json

import pytest

# The desk recipe: two balanced synthetic sources, each cued by its own
# steering-slot row during pretraining.  Pair-match at segment size 3 is
# hard enough to need real token comparison but leaves the frozen model
# enough headroom for prompt adaptation to reach high test accuracy.
DESK_RECIPE = {
    "majority": {"n": 2048, "length": 12, "seed": 11},
    "pair_match": {"n": 2048, "length": 7, "vocab_size": 16, "seed": 12},
    "pretrain": {"steps": 2500, "lr": 5e-3, "seed": 0},
}


@pytest.fixture(scope="session")
def desk_backbone(request):
    """(model, source_accuracy_report) for the pretrained frozen backbone."""
    from accept.backbone import (
        BackboneConfig,
        BackboneModel,
        PretrainConfig,
        pretrain_backbone,
    )
    from accept.tasks import gen_task

    key = hashlib.sha256(
        json.dumps(DESK_RECIPE, sort_keys=True).encode()
    ).hexdigest()[:16]
    cache_dir = request.config.cache.mkdir(f"desk_backbone_{key}")
    report_path = cache_dir / "source_report.json"
    if (cache_dir / "arch.json").exists() and report_path.exists():
        model = BackboneModel.load(cache_dir)
        report = json.loads(report_path.read_text(encoding="utf-8"))
        return model, report

    config = BackboneConfig()
    maj = DESK_RECIPE["majority"]
    pm = DESK_RECIPE["pair_match"]
    datasets = [
        gen_task("majority", n=maj["n"], length=maj["length"],
                 vocab_size=config.vocab_size, seed=maj["seed"]),
        gen_task("pair-match", n=pm["n"], length=pm["length"],
                 vocab_size=pm["vocab_size"], seed=pm["seed"]),
    ]
    model, report = pretrain_backbone(
        config, datasets, PretrainConfig(**DESK_RECIPE["pretrain"])
    )
    model.save(cache_dir)
    report_path.write_text(json.dumps(report), encoding="utf-8")
    return model, report


@pytest.fixture(scope="session")
def desk_task():
    """Fresh pair-match instances, disjoint seeds from the pretrain mixture."""
    from accept.tasks import gen_task

    pm = DESK_RECIPE["pair_match"]
    train = gen_task("pair-match", n=1024, length=pm["length"],
                     vocab_size=pm["vocab_size"], seed=500)
    test = gen_task("pair-match", n=512, length=pm["length"],
                    vocab_size=pm["vocab_size"], seed=501, split="test")
    return train, test
