import hashlib
import json
import os
from dataclasses import replace

import pytest

from biqa.harness import (
    ExperimentConfig,
    ExperimentRunner,
    ExperimentState,
    HarnessError,
    load_config,
    reference_config,
    save_config,
    signature_of,
    subset_tag,
)
from biqa.rng import derive_seed
from biqa.scorer import ScorerConfig
from biqa.synthbench import BiasedDatasetConfig
from biqa.trainer import TrainConfig


def _tiny_config(master_seed=7):
    def ds(name, kinds, remap, n, size=20):
        return BiasedDatasetConfig(
            name=name,
            n_images=n,
            allowed_kinds=kinds,
            label_remap=remap,
            seed=derive_seed(master_seed, "data", name),
            image_size=size,
        )

    train = dict(
        batch_size=8,
        base_lr=1e-3,
        min_lr=1e-6,
        warmup_epochs=1,
        warmup_start_lr=1e-5,
        weight_decay=5e-4,
    )
    return ExperimentConfig(
        master_seed=master_seed,
        datasets=[
            ds("blurs", ("gaussian_blur",), "identity", 14),
            ds("noises", ("additive_noise",), "sqrt", 14),
        ],
        pool=ds("pool", ("gaussian_blur", "additive_noise"), "identity", 18),
        pair_ladder=[6, 20],
        ensemble_subsets=[["blurs"], ["noises"], ["blurs", "noises"]],
        scorer=ScorerConfig(patch_size=12, channels_in=1, conv_channels=(2, 3), hidden=4),
        stage1=TrainConfig(epochs=2, patches_per_image=2, **train),
        stage3=TrainConfig(epochs=2, patches_per_image=1, **train),
    )


def _tree_hashes(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in files:
            p = os.path.join(base, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


def test_subset_tag_and_signature():
    assert subset_tag(["b", "a"]) == "b+a"
    sig1 = signature_of({"a": 1, "b": [1, 2]})
    sig2 = signature_of({"b": [1, 2], "a": 1})
    assert sig1 == sig2  # canonical key order
    assert sig1 != signature_of({"a": 2, "b": [1, 2]})


def test_config_validation():
    cfg = _tiny_config()
    cfg.validate()
    bad = _tiny_config()
    bad.datasets = bad.datasets[:1]
    with pytest.raises(HarnessError, match="at least 2"):
        bad.validate()
    bad = _tiny_config()
    bad.datasets[1] = replace(bad.datasets[1], name="blurs")
    with pytest.raises(HarnessError, match="unique"):
        bad.validate()
    bad = _tiny_config()
    bad.datasets[0] = replace(bad.datasets[0], name="has space")
    with pytest.raises(HarnessError, match="separators"):
        bad.validate()
    bad = _tiny_config()
    bad.pool = replace(bad.pool, seed=bad.datasets[0].seed)
    with pytest.raises(HarnessError, match="pool seed"):
        bad.validate()
    bad = _tiny_config()
    bad.pair_ladder = [20, 6]
    with pytest.raises(HarnessError, match="increasing"):
        bad.validate()
    bad = _tiny_config()
    bad.pair_ladder = [10**6]
    with pytest.raises(HarnessError, match="exceeds"):
        bad.validate()
    bad = _tiny_config()
    bad.ensemble_subsets = [["nope"]]
    with pytest.raises(HarnessError, match="subset"):
        bad.validate()
    bad = _tiny_config()
    bad.scorer = ScorerConfig(patch_size=64, channels_in=1, conv_channels=(2,), hidden=2)
    with pytest.raises(HarnessError, match="patch_size"):
        bad.validate()
    bad = _tiny_config()
    bad.split_fraction = 1.0
    with pytest.raises(HarnessError, match="split_fraction"):
        bad.validate()


def test_config_roundtrip(tmp_path):
    cfg = _tiny_config()
    back = ExperimentConfig.from_dict(cfg.to_dict())
    assert back.to_dict() == cfg.to_dict()
    path = str(tmp_path / "config.json")
    save_config(cfg, path)
    assert load_config(path).to_dict() == cfg.to_dict()


def test_config_schema_guard():
    d = _tiny_config().to_dict()
    d["schema"] = 99
    with pytest.raises(HarnessError, match="schema"):
        ExperimentConfig.from_dict(d)


def test_with_master_seed_rederives_dataset_seeds():
    cfg = _tiny_config(7)
    moved = cfg.with_master_seed(8)
    assert moved.master_seed == 8
    assert moved.datasets[0].seed == derive_seed(8, "data", "blurs")
    assert moved.pool.seed == derive_seed(8, "data", "pool")
    assert moved.datasets[0].seed != cfg.datasets[0].seed


def test_reference_config_shape():
    cfg = reference_config(42)
    cfg.validate()
    assert cfg.dataset_names == ["blurset", "noiseset", "mixedset"]
    assert cfg.pair_ladder == [500, 5000]
    assert cfg.pool.n_images == 1000
    assert len(cfg.ensemble_subsets) == 4
    assert cfg.full_tag == "blurset+noiseset+mixedset"


def test_experiment_state_roundtrip(tmp_path):
    out = str(tmp_path)
    state = ExperimentState.load(out)
    target = tmp_path / "blob.bin"
    target.write_bytes(b"payload")
    digest = hashlib.sha256(b"payload").hexdigest()
    state.record("demo", "sig123", {"blob": {"path": "blob.bin", "sha256": digest}})
    state.save()
    again = ExperimentState.load(out)
    assert again.stage("demo")["signature"] == "sig123"
    assert again.outputs_ok("demo")
    target.write_bytes(b"tampered")
    assert not again.outputs_ok("demo")


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("run"))
    runner = ExperimentRunner(_tiny_config(), out, threads=1)
    summary = runner.run_all()
    return out, summary


def test_run_all_produces_reports(tiny_run):
    out, summary = tiny_run
    for rel in [
        "config.json",
        "state.json",
        "summary.json",
        "reports/cross-eval.json",
        "reports/ablation-pairs.json",
        "reports/ablation-ensemble.json",
    ]:
        assert os.path.exists(os.path.join(out, rel)), rel
    assert set(summary["models"]["stage1"]) == {"blurs", "noises"}
    report = json.load(open(os.path.join(out, "reports/cross-eval.json")))
    oracle = report["oracle_vs_qstar"]
    for cell in oracle:
        assert cell["srcc"] == pytest.approx(1.0, abs=1e-12)


def test_run_all_matrix_shape(tiny_run):
    out, _ = tiny_run
    report = json.load(open(os.path.join(out, "reports/cross-eval.json")))
    # rows: one per stage-1 scorer plus the fused model
    assert len(report["vs_qstar"]) == 3
    assert all(len(row) == 2 for row in report["vs_qstar"])
    assert len(report["vs_labels"]) == 3


def test_pair_manifests_are_nested(tiny_run):
    out, summary = tiny_run
    from biqa.pseudolabel import load_pair_manifest

    small_key = [k for k in summary["pairs"] if k.endswith(":n6")][0]
    big_key = [k for k in summary["pairs"] if k.endswith(":n20")][0]
    small = load_pair_manifest(os.path.join(out, summary["pairs"][small_key]["path"]))
    big = load_pair_manifest(os.path.join(out, summary["pairs"][big_key]["path"]))
    assert [(s.x_id, s.y_id) for s in big.samples[:6]] == [
        (s.x_id, s.y_id) for s in small.samples
    ]


def test_rerun_skips_and_preserves_bytes(tiny_run):
    out, _ = tiny_run
    before = _tree_hashes(out)
    runner = ExperimentRunner(_tiny_config(), out, threads=1)
    runner.run_all()
    assert _tree_hashes(out) == before


def test_threads_do_not_change_bytes(tiny_run, tmp_path):
    out, _ = tiny_run
    other = str(tmp_path / "threaded")
    ExperimentRunner(_tiny_config(), other, threads=3).run_all()
    a = _tree_hashes(out)
    b = _tree_hashes(other)
    assert a == b


def test_stale_artifact_refused_then_forced(tiny_run, tmp_path):
    out, _ = tiny_run
    # clone the run so this test cannot poison the shared fixture
    import shutil

    work = str(tmp_path / "clone")
    shutil.copytree(out, work)
    victim = None
    for f in os.listdir(os.path.join(work, "models")):
        if f.startswith("s1-"):
            victim = os.path.join(work, "models", f)
            break
    with open(victim, "ab") as fh:
        fh.write(b"junk")
    runner = ExperimentRunner(_tiny_config(), work, threads=1)
    with pytest.raises(HarnessError, match="--force"):
        runner.run_all()
    fixed = ExperimentRunner(_tiny_config(), work, threads=1, force=True)
    fixed.run_all()
    assert _tree_hashes(work) == _tree_hashes(out)


def test_different_master_seed_changes_models(tiny_run, tmp_path):
    out, _ = tiny_run
    other = str(tmp_path / "reseeded")
    ExperimentRunner(_tiny_config().with_master_seed(9), other, threads=1).run_all()
    ours = {f for f in os.listdir(os.path.join(out, "models"))}
    theirs = {f for f in os.listdir(os.path.join(other, "models"))}
    # content-addressed names: a different seed must change every digest
    assert ours.isdisjoint(theirs)
