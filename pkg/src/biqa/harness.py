"""End-to-end experiment orchestration.

Pipeline: generate biased synthetic datasets plus an unlabeled pool, train
one scorer per dataset, pseudo-label random pool pairs with the scorer
ensemble, train a final scorer on those pairs, then evaluate everything on
every dataset (against ground truth and against each dataset's own biased
labels), plus pair-count and ensemble-composition ablations.

Artifacts are content-addressed (the first 12 hex chars of the file's
sha256 appear in its name) and recorded in state.json per stage together
with a signature over that stage's configuration and input hashes. A
rerun with an unchanged signature verifies and reuses the artifacts; a
hash mismatch on a recorded artifact is refused rather than silently
recomputed (--force rebuilds). Every RNG stream is derived from the
experiment's master seed and a unit label, so any --threads setting
produces byte-identical outputs.

All paths inside state and reports are relative to the output directory.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .dataset import DatasetManifest, load_manifest, rescale_mos, split_dataset
from .metrics import (
    EvalReport,
    ScoredModel,
    cross_dataset_matrix,
    matrix_to_json,
    render_matrix_csv,
    srcc,
)
from .pseudolabel import (
    EnsembleSnapshot,
    PairManifest,
    build_pair_manifest,
    central_crop_store,
    load_pair_manifest,
    save_pair_manifest,
    score_pool,
)
from .rng import derive_seed
from .scorer import (
    ScorerConfig,
    ScorerParams,
    forward_batch,
    load_params,
    save_params,
    serialize_params,
)
from .synthbench import (
    KINDS,
    BiasedDatasetConfig,
    GroundTruth,
    gen_biased_dataset,
    load_ground_truth,
)
from .trainer import TrainConfig, train_pairwise, train_single

log = logging.getLogger("biqa.harness")

SCHEMA_VERSION = 1
_EVAL_BATCH = 256


class HarnessError(Exception):
    pass


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canon(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def signature_of(payload: dict) -> str:
    return sha256_bytes(_canon(payload).encode("utf-8"))


def subset_tag(names: list[str]) -> str:
    return "+".join(names)


@dataclass
class ExperimentConfig:
    """Everything a run needs; serialized as versioned JSON.

    The seed fields inside stage1/stage3 are ignored by the harness:
    per-unit training seeds are derived from master_seed and the unit
    name, so independent units keep isolated streams.
    """

    master_seed: int
    datasets: list[BiasedDatasetConfig]
    pool: BiasedDatasetConfig
    pair_ladder: list[int]
    ensemble_subsets: list[list[str]]
    scorer: ScorerConfig
    stage1: TrainConfig
    stage3: TrainConfig
    split_fraction: float = 0.8

    def validate(self) -> None:
        names = [d.name for d in self.datasets]
        if len(self.datasets) < 2:
            raise HarnessError("cross-dataset evaluation needs at least 2 datasets")
        if len(set(names)) != len(names) or self.pool.name in names:
            raise HarnessError("dataset/pool names must be unique")
        for name in names + [self.pool.name]:
            if not name or any(c in name for c in "+:/\\ "):
                raise HarnessError(f"name {name!r} has characters used as separators")
        if self.pool.seed in {d.seed for d in self.datasets}:
            raise HarnessError("pool seed must differ from every dataset seed")
        if not self.pair_ladder or sorted(set(self.pair_ladder)) != self.pair_ladder:
            raise HarnessError("pair_ladder must be strictly increasing and non-empty")
        capacity = self.pool.n_images * (self.pool.n_images - 1)
        if self.pair_ladder[-1] > capacity:
            raise HarnessError(
                f"largest rung {self.pair_ladder[-1]} exceeds the pool's "
                f"{capacity} ordered pairs"
            )
        if min(self.pair_ladder) < 1:
            raise HarnessError("pair counts must be positive")
        for subset in self.ensemble_subsets:
            if not subset or any(n not in names for n in subset):
                raise HarnessError(f"bad ensemble subset {subset!r}")
        if self.scorer.channels_in != 1:
            raise HarnessError("synthetic images are grayscale; channels_in must be 1")
        sizes = {d.image_size for d in self.datasets} | {self.pool.image_size}
        if any(self.scorer.patch_size > s for s in sizes):
            raise HarnessError("patch_size exceeds a generated image size")
        if not 0.0 < self.split_fraction < 1.0:
            raise HarnessError("split_fraction must be in (0, 1)")

    @property
    def dataset_names(self) -> list[str]:
        return [d.name for d in self.datasets]

    @property
    def full_tag(self) -> str:
        return subset_tag(self.dataset_names)

    def to_dict(self) -> dict:
        def ds(c: BiasedDatasetConfig) -> dict:
            return {
                "name": c.name,
                "n_images": c.n_images,
                "allowed_kinds": list(c.allowed_kinds),
                "label_remap": c.label_remap,
                "seed": c.seed,
                "image_size": c.image_size,
            }

        return {
            "schema": SCHEMA_VERSION,
            "master_seed": self.master_seed,
            "datasets": [ds(c) for c in self.datasets],
            "pool": ds(self.pool),
            "pair_ladder": list(self.pair_ladder),
            "ensemble_subsets": [list(s) for s in self.ensemble_subsets],
            "scorer": self.scorer.to_dict(),
            "stage1": self.stage1.to_dict(),
            "stage3": self.stage3.to_dict(),
            "split_fraction": self.split_fraction,
        }

    @staticmethod
    def from_dict(d: dict) -> "ExperimentConfig":
        if d.get("schema") != SCHEMA_VERSION:
            raise HarnessError(
                f"config schema {d.get('schema')!r}, expected {SCHEMA_VERSION}"
            )

        def ds(entry: dict) -> BiasedDatasetConfig:
            return BiasedDatasetConfig(
                name=str(entry["name"]),
                n_images=int(entry["n_images"]),
                allowed_kinds=tuple(entry["allowed_kinds"]),
                label_remap=str(entry["label_remap"]),
                seed=int(entry["seed"]),
                image_size=int(entry.get("image_size", 48)),
            )

        config = ExperimentConfig(
            master_seed=int(d["master_seed"]),
            datasets=[ds(e) for e in d["datasets"]],
            pool=ds(d["pool"]),
            pair_ladder=[int(n) for n in d["pair_ladder"]],
            ensemble_subsets=[list(s) for s in d["ensemble_subsets"]],
            scorer=ScorerConfig.from_dict(d["scorer"]),
            stage1=TrainConfig.from_dict(d["stage1"]),
            stage3=TrainConfig.from_dict(d["stage3"]),
            split_fraction=float(d.get("split_fraction", 0.8)),
        )
        config.validate()
        return config

    def with_master_seed(self, seed: int) -> "ExperimentConfig":
        """Re-derive every stochastic knob from a new master seed."""
        return replace(
            self,
            master_seed=seed,
            datasets=[
                replace(d, seed=derive_seed(seed, "data", d.name)) for d in self.datasets
            ],
            pool=replace(self.pool, seed=derive_seed(seed, "data", self.pool.name)),
        )


def reference_config(master_seed: int = 42) -> ExperimentConfig:
    """The pinned desk-scale configuration all end-to-end checks run."""

    def ds(name: str, kinds: tuple[str, ...], remap: str, n: int) -> BiasedDatasetConfig:
        return BiasedDatasetConfig(
            name=name,
            n_images=n,
            allowed_kinds=kinds,
            label_remap=remap,
            seed=derive_seed(master_seed, "data", name),
            image_size=48,
        )

    names = ["blurset", "noiseset", "mixedset"]
    train_common = dict(
        batch_size=32,
        base_lr=1e-3,
        min_lr=1e-8,
        warmup_epochs=2,
        warmup_start_lr=5e-7,
        weight_decay=5e-4,
    )
    return ExperimentConfig(
        master_seed=master_seed,
        datasets=[
            ds("blurset", ("gaussian_blur",), "identity", 300),
            ds("noiseset", ("additive_noise",), "sqrt", 300),
            ds("mixedset", ("gaussian_blur", "contrast_reduction"), "square", 300),
        ],
        pool=ds("pool", KINDS, "identity", 1000),
        pair_ladder=[500, 5000],
        ensemble_subsets=[[n] for n in names] + [names],
        scorer=ScorerConfig(
            patch_size=32, channels_in=1, conv_channels=(8, 16, 32), hidden=64
        ),
        stage1=TrainConfig(epochs=30, patches_per_image=10, **train_common),
        stage3=TrainConfig(epochs=10, patches_per_image=1, **train_common),
    )


def save_config(config: ExperimentConfig, path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(config.to_dict(), sort_keys=True, indent=1) + "\n")


def load_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return ExperimentConfig.from_dict(json.load(fh))


class ExperimentState:
    """state.json: per-stage signatures and produced artifact hashes."""

    def __init__(self, out_dir: str, data: dict | None = None):
        self.out_dir = out_dir
        self.path = os.path.join(out_dir, "state.json")
        self.data = data or {"schema": SCHEMA_VERSION, "stages": {}}

    @staticmethod
    def load(out_dir: str) -> "ExperimentState":
        path = os.path.join(out_dir, "state.json")
        if not os.path.exists(path):
            return ExperimentState(out_dir)
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if data.get("schema") != SCHEMA_VERSION:
            raise HarnessError(f"{path}: unsupported state schema")
        return ExperimentState(out_dir, data)

    def save(self) -> None:
        tmp = self.path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(self.data, sort_keys=True, indent=1) + "\n")
        os.replace(tmp, self.path)

    def stage(self, name: str) -> dict | None:
        return self.data["stages"].get(name)

    def record(self, name: str, signature: str, outputs: dict) -> None:
        self.data["stages"][name] = {"signature": signature, "outputs": outputs}
        self.save()

    def outputs_ok(self, name: str) -> bool:
        stage = self.stage(name)
        if stage is None:
            return False
        for entry in stage["outputs"].values():
            if "path" in entry:
                path = os.path.join(self.out_dir, entry["path"])
                if not os.path.exists(path) or sha256_file(path) != entry["sha256"]:
                    return False
            elif "tree" in entry:
                root = os.path.join(self.out_dir, entry["tree"])
                if not os.path.isdir(root) or _tree_digest(root) != entry["sha256"]:
                    return False
        return True


def _tree_digest(root: str) -> str:
    h = hashlib.sha256()
    for name in sorted(os.listdir(root)):
        path = os.path.join(root, name)
        if os.path.isfile(path):
            h.update(name.encode("utf-8"))
            h.update(b"\0")
            h.update(bytes.fromhex(sha256_file(path)))
    return h.hexdigest()


def _batched_scores(params: ScorerParams, crops: np.ndarray) -> np.ndarray:
    out = np.empty(len(crops))
    for lo in range(0, len(crops), _EVAL_BATCH):
        chunk = crops[lo : lo + _EVAL_BATCH]
        out[lo : lo + len(chunk)], _ = forward_batch(params, chunk)
    return out


class ExperimentRunner:
    def __init__(
        self,
        config: ExperimentConfig,
        out_dir: str,
        threads: int = 1,
        force: bool = False,
    ):
        config.validate()
        self.config = config
        self.out_dir = out_dir
        self.threads = max(1, int(threads))
        self.force = bool(force)
        os.makedirs(out_dir, exist_ok=True)
        for sub in ("data", "models", "pairs", "reports"):
            os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
        self.state = ExperimentState.load(out_dir)
        save_config(config, os.path.join(out_dir, "config.json"))
        self.manifests: dict[str, DatasetManifest] = {}
        self.truths: dict[str, GroundTruth] = {}
        self.s1_models: dict[str, dict] = {}
        self.pair_entries: dict[str, dict] = {}
        self.cdr_models: dict[str, dict] = {}
        self._dataset_digests: dict[str, str] = {}
        self._pool_store: dict | None = None
        self._eval_crops: dict | None = None
        self._done: set[str] = set()
        self._reports: dict[str, dict] = {}

    # ---- helpers -------------------------------------------------------

    def _map(self, fn, items: list):
        if self.threads == 1 or len(items) <= 1:
            return [fn(item) for item in items]
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(fn, items))

    def _stage_fresh(self, name: str, signature: str) -> bool:
        """True when the stage must run; raises on stale recorded outputs."""
        stage = self.state.stage(name)
        if self.force or stage is None or stage["signature"] != signature:
            return True
        if not self.state.outputs_ok(name):
            raise HarnessError(
                f"stage {name!r} artifacts do not match their recorded hashes; "
                "rerun with --force to rebuild"
            )
        log.info("stage %s: skipped (up to date)", name)
        return False

    def _verified(self, stage_name: str, label: str) -> dict:
        stage = self.state.stage(stage_name)
        if stage is None or label not in stage["outputs"]:
            raise HarnessError(f"missing artifact {label!r} from stage {stage_name!r}")
        entry = stage["outputs"][label]
        path = os.path.join(self.out_dir, entry["path"])
        if not os.path.exists(path) or sha256_file(path) != entry["sha256"]:
            raise HarnessError(f"artifact {entry['path']} is stale or missing")
        return entry

    def _dataset_digest(self, name: str) -> str:
        if name not in self._dataset_digests:
            data_dir = os.path.join(self.out_dir, "data")
            h = hashlib.sha256()
            for rel in (f"{name}.csv", f"{name}.truth.csv"):
                h.update(rel.encode("utf-8"))
                h.update(b"\0")
                h.update(bytes.fromhex(sha256_file(os.path.join(data_dir, rel))))
            h.update(bytes.fromhex(_tree_digest(os.path.join(data_dir, name))))
            self._dataset_digests[name] = h.hexdigest()
        return self._dataset_digests[name]

    def _pool_crops(self) -> dict:
        if self._pool_store is None:
            records = self.manifests[self.config.pool.name].records
            self._pool_store = central_crop_store(
                records, self.config.scorer.patch_size
            )
        return self._pool_store

    def _eval_crop_store(self) -> dict:
        if self._eval_crops is None:
            store = {}
            for name in self.config.dataset_names:
                store.update(
                    central_crop_store(
                        self.manifests[name].records, self.config.scorer.patch_size
                    )
                )
            self._eval_crops = store
        return self._eval_crops

    def _score_fn(self, params: ScorerParams):
        crops = self._eval_crop_store()

        def fn(records):
            return _batched_scores(params, np.stack([crops[r.id] for r in records]))

        return fn

    # ---- stages --------------------------------------------------------

    def run_data(self) -> None:
        if "data" in self._done:
            return
        config = self.config
        all_configs = list(config.datasets) + [config.pool]
        cfg_dict = config.to_dict()
        signature = signature_of(
            {"stage": "data", "configs": cfg_dict["datasets"] + [cfg_dict["pool"]]}
        )
        data_dir = os.path.join(self.out_dir, "data")
        if self._stage_fresh("data", signature):
            log.info("stage data: generating %d image sets", len(all_configs))
            self._map(lambda c: gen_biased_dataset(c, data_dir), all_configs)
            outputs = {}
            for c in all_configs:
                outputs[f"csv:{c.name}"] = {
                    "path": f"data/{c.name}.csv",
                    "sha256": sha256_file(os.path.join(data_dir, f"{c.name}.csv")),
                }
                outputs[f"truth:{c.name}"] = {
                    "path": f"data/{c.name}.truth.csv",
                    "sha256": sha256_file(
                        os.path.join(data_dir, f"{c.name}.truth.csv")
                    ),
                }
                outputs[f"images:{c.name}"] = {
                    "tree": f"data/{c.name}",
                    "sha256": _tree_digest(os.path.join(data_dir, c.name)),
                }
            self.state.record("data", signature, outputs)
        for c in all_configs:
            manifest = rescale_mos(load_manifest(os.path.join(data_dir, f"{c.name}.csv")))
            self.manifests[c.name] = manifest
            self.truths[c.name] = load_ground_truth(
                os.path.join(data_dir, f"{c.name}.truth.csv")
            )
        self._done.add("data")

    def run_stage1(self) -> dict[str, ScorerParams]:
        self.run_data()
        if "stage1" in self._done:
            return {n: e["params"] for n, e in self.s1_models.items()}
        config = self.config
        signature = signature_of(
            {
                "stage": "stage1",
                "master_seed": config.master_seed,
                "scorer": config.scorer.to_dict(),
                "train": {k: v for k, v in config.stage1.to_dict().items() if k != "seed"},
                "fraction": config.split_fraction,
                "inputs": {n: self._dataset_digest(n) for n in config.dataset_names},
            }
        )
        models_dir = os.path.join(self.out_dir, "models")
        if self._stage_fresh("stage1", signature):

            def unit(name: str) -> tuple[str, dict]:
                log.info("stage1: training scorer on %s", name)
                manifest = self.manifests[name]
                split = split_dataset(
                    manifest,
                    derive_seed(config.master_seed, "split", name),
                    config.split_fraction,
                )
                tcfg = replace(
                    config.stage1, seed=derive_seed(config.master_seed, "train1", name)
                )
                params = train_single(manifest, split, config.scorer, tcfg)
                blob = serialize_params(params)
                digest = sha256_bytes(blob)
                rel = f"models/s1-{name}-{digest[:12]}.bin"
                save_params(params, os.path.join(self.out_dir, rel))
                return name, {"params": params, "path": rel, "sha256": digest}

            results = self._map(unit, config.dataset_names)
            outputs = {}
            for name, entry in results:
                self.s1_models[name] = entry
                outputs[f"model:{name}"] = {
                    "path": entry["path"],
                    "sha256": entry["sha256"],
                }
            self.state.record("stage1", signature, outputs)
        else:
            for name in config.dataset_names:
                entry = self._verified("stage1", f"model:{name}")
                self.s1_models[name] = {
                    "params": load_params(os.path.join(self.out_dir, entry["path"])),
                    "path": entry["path"],
                    "sha256": entry["sha256"],
                }
        self._done.add("stage1")
        return {n: e["params"] for n, e in self.s1_models.items()}

    def _pair_units(self) -> list[tuple[str, int]]:
        config = self.config
        units = [(config.full_tag, n) for n in config.pair_ladder]
        n_max = config.pair_ladder[-1]
        for subset in config.ensemble_subsets:
            unit = (subset_tag(subset), n_max)
            if unit not in units:
                units.append(unit)
        return units

    def run_stage2(self) -> dict[str, dict]:
        self.run_stage1()
        if "stage2" in self._done:
            return self.pair_entries
        config = self.config
        pairs_seed = derive_seed(config.master_seed, "pairs")
        units = self._pair_units()
        signature = signature_of(
            {
                "stage": "stage2",
                "models": {n: self.s1_models[n]["sha256"] for n in config.dataset_names},
                "pool": self._dataset_digest(config.pool.name),
                "units": [[t, n] for t, n in units],
                "seed": pairs_seed,
            }
        )
        if self._stage_fresh("stage2", signature):
            log.info("stage2: scoring the pool with %d models", len(config.dataset_names))
            pool_manifest = self.manifests[config.pool.name]
            image_ids = sorted(r.id for r in pool_manifest.records)
            snapshot = EnsembleSnapshot.from_params(
                [self.s1_models[n]["params"] for n in config.dataset_names]
            )
            table = score_pool(snapshot, image_ids, self._pool_crops())
            by_name = dict(zip(config.dataset_names, table))
            prov_by_name = dict(zip(config.dataset_names, snapshot.provenance))
            outputs = {}
            tags = {tag for tag, _ in units}
            manifests_by_tag = {}
            for tag in sorted(tags):
                names = tag.split("+")
                manifests_by_tag[tag] = build_pair_manifest(
                    pool_manifest.name,
                    image_ids,
                    [by_name[n] for n in names],
                    [prov_by_name[n] for n in names],
                    max(n for t, n in units if t == tag),
                    pairs_seed,
                )
            for tag, n in units:
                full = manifests_by_tag[tag]
                manifest = PairManifest(
                    pool=full.pool,
                    n_pairs=n,
                    seed=full.seed,
                    ensemble=full.ensemble,
                    samples=full.samples[:n],
                )
                tmp = os.path.join(self.out_dir, "pairs", f".tmp-{tag}-n{n}.csv")
                save_pair_manifest(manifest, tmp)
                digest = sha256_file(tmp)
                rel = f"pairs/pairs-{tag}-n{n}-{digest[:12]}"
                os.replace(tmp, os.path.join(self.out_dir, rel + ".csv"))
                os.replace(
                    tmp[: -len(".csv")] + ".json",
                    os.path.join(self.out_dir, rel + ".json"),
                )
                key = f"{tag}:n{n}"
                outputs[f"pairs:{key}"] = {"path": rel + ".csv", "sha256": digest}
                outputs[f"pairs-meta:{key}"] = {
                    "path": rel + ".json",
                    "sha256": sha256_file(os.path.join(self.out_dir, rel + ".json")),
                }
                self.pair_entries[key] = {"path": rel + ".csv", "sha256": digest}
            self.state.record("stage2", signature, outputs)
        else:
            for tag, n in units:
                key = f"{tag}:n{n}"
                entry = self._verified("stage2", f"pairs:{key}")
                self.pair_entries[key] = dict(entry)
        self._done.add("stage2")
        return self.pair_entries

    def _load_pairs(self, key: str) -> PairManifest:
        entry = self.pair_entries[key]
        return load_pair_manifest(os.path.join(self.out_dir, entry["path"]))

    def run_stage3(self) -> dict[str, dict]:
        self.run_stage2()
        if "stage3" in self._done:
            return self.cdr_models
        config = self.config
        units = self._pair_units()
        signature = signature_of(
            {
                "stage": "stage3",
                "pairs": {f"{t}:n{n}": self.pair_entries[f"{t}:n{n}"]["sha256"] for t, n in units},
                "pool": self._dataset_digest(config.pool.name),
                "master_seed": config.master_seed,
                "scorer": config.scorer.to_dict(),
                "train": {k: v for k, v in config.stage3.to_dict().items() if k != "seed"},
            }
        )
        if self._stage_fresh("stage3", signature):
            store = self._pool_crops()

            def unit(tag_n: tuple[str, int]) -> tuple[str, dict]:
                tag, n = tag_n
                key = f"{tag}:n{n}"
                log.info("stage3: training pairwise scorer on %s", key)
                manifest = self._load_pairs(key)
                tcfg = replace(
                    config.stage3,
                    seed=derive_seed(config.master_seed, "train3", tag, f"n{n}"),
                )
                params = train_pairwise(manifest, store, config.scorer, tcfg)
                params.meta = {
                    "trained_on": config.pool.name,
                    "ensemble": tag,
                    "n_pairs": n,
                }
                blob = serialize_params(params)
                digest = sha256_bytes(blob)
                rel = f"models/cdr-{tag}-n{n}-{digest[:12]}.bin"
                save_params(params, os.path.join(self.out_dir, rel))
                return key, {"params": params, "path": rel, "sha256": digest}

            results = self._map(unit, units)
            outputs = {}
            for key, entry in results:
                self.cdr_models[key] = entry
                outputs[f"model:{key}"] = {
                    "path": entry["path"],
                    "sha256": entry["sha256"],
                }
            self.state.record("stage3", signature, outputs)
        else:
            for tag, n in units:
                key = f"{tag}:n{n}"
                entry = self._verified("stage3", f"model:{key}")
                self.cdr_models[key] = {
                    "params": load_params(os.path.join(self.out_dir, entry["path"])),
                    "path": entry["path"],
                    "sha256": entry["sha256"],
                }
        self._done.add("stage3")
        return self.cdr_models

    # ---- evaluation ----------------------------------------------------

    def _reference_cdr_key(self) -> str:
        return f"{self.config.full_tag}:n{self.config.pair_ladder[-1]}"

    def _qstar_manifests(self) -> list[DatasetManifest]:
        return [
            DatasetManifest(
                name=n,
                records=self.manifests[n].records,
                labels=dict(self.truths[n].qstar),
            )
            for n in self.config.dataset_names
        ]

    def _labeled_manifests(self) -> list[DatasetManifest]:
        return [self.manifests[n] for n in self.config.dataset_names]

    def _model_rows(self) -> list[ScoredModel]:
        rows = [
            ScoredModel(
                name=f"s1-{name}",
                trained_on=name,
                score_fn=self._score_fn(self.s1_models[name]["params"]),
            )
            for name in self.config.dataset_names
        ]
        cdr = self.cdr_models[self._reference_cdr_key()]
        rows.append(
            ScoredModel(
                name="cdr",
                trained_on=self.config.pool.name,
                score_fn=self._score_fn(cdr["params"]),
            )
        )
        return rows

    def _mean_srcc(self, params: ScorerParams) -> dict:
        """Mean ground-truth SRCC of one model across all datasets."""
        fn = self._score_fn(params)
        per_dataset = {}
        for manifest in self._qstar_manifests():
            preds = fn(manifest.records)
            truth = [manifest.labels[r.id] for r in manifest.records]
            per_dataset[manifest.name] = srcc(preds, truth)
        return {
            "per_dataset": per_dataset,
            "mean_srcc": float(np.mean(list(per_dataset.values()))),
        }

    def run_cross_eval(self) -> dict:
        self.run_stage3()
        if "cross-eval" in self._reports:
            return self._reports["cross-eval"]
        config = self.config
        cdr_key = self._reference_cdr_key()
        signature = signature_of(
            {
                "stage": "cross-eval",
                "models": {n: self.s1_models[n]["sha256"] for n in config.dataset_names}
                | {"cdr": self.cdr_models[cdr_key]["sha256"]},
                "datasets": {n: self._dataset_digest(n) for n in config.dataset_names},
            }
        )
        report_path = os.path.join(self.out_dir, "reports", "cross-eval.json")
        if not self._stage_fresh("cross-eval", signature):
            with open(report_path, encoding="utf-8") as fh:
                report = json.load(fh)
            self._reports["cross-eval"] = report
            return report
        log.info("cross-eval: scoring %d models on %d datasets",
                 len(config.dataset_names) + 1, len(config.dataset_names))
        rows = self._model_rows()
        vs_qstar = cross_dataset_matrix(rows, self._qstar_manifests())
        vs_labels = cross_dataset_matrix(rows, self._labeled_manifests())
        qstar_all = {}
        for name in config.dataset_names:
            qstar_all.update(self.truths[name].qstar)
        oracle = ScoredModel(
            name="oracle",
            trained_on="ground-truth",
            score_fn=lambda records: np.array([qstar_all[r.id] for r in records]),
        )
        oracle_row = cross_dataset_matrix([oracle], self._qstar_manifests())[0]
        aggregates = self._aggregates(vs_qstar)
        model_hashes = {
            f"s1-{n}": self.s1_models[n]["sha256"] for n in config.dataset_names
        }
        model_hashes["cdr"] = self.cdr_models[cdr_key]["sha256"]
        report = {
            "schema": SCHEMA_VERSION,
            "inputs": {
                "models": model_hashes,
                "datasets": {n: self._dataset_digest(n) for n in config.dataset_names},
            },
            "vs_qstar": matrix_to_json(vs_qstar),
            "vs_labels": matrix_to_json(vs_labels),
            "oracle_vs_qstar": [cell.to_dict() for cell in oracle_row],
            "aggregates": aggregates,
        }
        csv_qstar = os.path.join(self.out_dir, "reports", "cross-eval-qstar.csv")
        csv_labels = os.path.join(self.out_dir, "reports", "cross-eval-labels.csv")
        with open(csv_qstar, "w", encoding="utf-8") as fh:
            fh.write(render_matrix_csv(vs_qstar))
        with open(csv_labels, "w", encoding="utf-8") as fh:
            fh.write(render_matrix_csv(vs_labels))
        with open(report_path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(report, sort_keys=True, indent=1) + "\n")
        outputs = {
            "report": {"path": "reports/cross-eval.json", "sha256": sha256_file(report_path)},
            "csv-qstar": {"path": "reports/cross-eval-qstar.csv", "sha256": sha256_file(csv_qstar)},
            "csv-labels": {"path": "reports/cross-eval-labels.csv", "sha256": sha256_file(csv_labels)},
        }
        self.state.record("cross-eval", signature, outputs)
        self._reports["cross-eval"] = report
        return report

    def _aggregates(self, vs_qstar: list[list[EvalReport]]) -> dict:
        names = self.config.dataset_names
        out: dict = {"stage1": {}, "cdr": {}}
        for row in vs_qstar:
            cells = {c.dataset: c.srcc for c in row}
            mean_all = float(np.mean(list(cells.values())))
            if row[0].trained_on in names:
                diag = cells[row[0].trained_on]
                off = [v for k, v in cells.items() if k != row[0].trained_on]
                out["stage1"][row[0].model] = {
                    "diag_srcc": diag,
                    "offdiag_mean_srcc": float(np.mean(off)),
                    "mean_srcc": mean_all,
                }
            else:
                out["cdr"] = {"mean_srcc": mean_all, "per_dataset": cells}
        return out

    def run_ablation_paircount(self) -> dict:
        self.run_stage3()
        if "ablate-pairs" in self._reports:
            return self._reports["ablate-pairs"]
        config = self.config
        keys = [f"{config.full_tag}:n{n}" for n in config.pair_ladder]
        signature = signature_of(
            {
                "stage": "ablate-pairs",
                "models": {k: self.cdr_models[k]["sha256"] for k in keys},
                "datasets": {n: self._dataset_digest(n) for n in config.dataset_names},
            }
        )
        path = os.path.join(self.out_dir, "reports", "ablation-pairs.json")
        if not self._stage_fresh("ablate-pairs", signature):
            with open(path, encoding="utf-8") as fh:
                report = json.load(fh)
            self._reports["ablate-pairs"] = report
            return report
        rungs = []
        for n, key in zip(config.pair_ladder, keys):
            entry = self.cdr_models[key]
            rungs.append(
                {"n_pairs": n, "model": entry["sha256"]}
                | self._mean_srcc(entry["params"])
            )
        report = {
            "schema": SCHEMA_VERSION,
            "ensemble": config.full_tag,
            "rungs": rungs,
        }
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(report, sort_keys=True, indent=1) + "\n")
        self.state.record(
            "ablate-pairs",
            signature,
            {"report": {"path": "reports/ablation-pairs.json", "sha256": sha256_file(path)}},
        )
        self._reports["ablate-pairs"] = report
        return report

    def run_ablation_ensemble(self) -> dict:
        self.run_stage3()
        if "ablate-ensemble" in self._reports:
            return self._reports["ablate-ensemble"]
        config = self.config
        n_max = config.pair_ladder[-1]
        tags = [subset_tag(s) for s in config.ensemble_subsets]
        signature = signature_of(
            {
                "stage": "ablate-ensemble",
                "models": {t: self.cdr_models[f"{t}:n{n_max}"]["sha256"] for t in tags},
                "datasets": {n: self._dataset_digest(n) for n in config.dataset_names},
            }
        )
        path = os.path.join(self.out_dir, "reports", "ablation-ensemble.json")
        if not self._stage_fresh("ablate-ensemble", signature):
            with open(path, encoding="utf-8") as fh:
                report = json.load(fh)
            self._reports["ablate-ensemble"] = report
            return report
        subsets = []
        for subset, tag in zip(config.ensemble_subsets, tags):
            entry = self.cdr_models[f"{tag}:n{n_max}"]
            subsets.append(
                {"subset": list(subset), "tag": tag, "model": entry["sha256"]}
                | self._mean_srcc(entry["params"])
            )
        report = {"schema": SCHEMA_VERSION, "n_pairs": n_max, "subsets": subsets}
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(report, sort_keys=True, indent=1) + "\n")
        self.state.record(
            "ablate-ensemble",
            signature,
            {"report": {"path": "reports/ablation-ensemble.json", "sha256": sha256_file(path)}},
        )
        self._reports["ablate-ensemble"] = report
        return report

    def run_all(self) -> dict:
        cross = self.run_cross_eval()
        pairs_table = self.run_ablation_paircount()
        ensemble_table = self.run_ablation_ensemble()
        summary = {
            "schema": SCHEMA_VERSION,
            "config_sha256": sha256_bytes(_canon(self.config.to_dict()).encode()),
            "datasets": {n: self._dataset_digest(n) for n in self.config.dataset_names},
            "pool": self._dataset_digest(self.config.pool.name),
            "models": {
                "stage1": {
                    n: {"path": e["path"], "sha256": e["sha256"]}
                    for n, e in sorted(self.s1_models.items())
                },
                "cdr": {
                    k: {"path": e["path"], "sha256": e["sha256"]}
                    for k, e in sorted(self.cdr_models.items())
                },
            },
            "pairs": dict(sorted(self.pair_entries.items())),
            "cross_eval": cross,
            "ablation_pairs": pairs_table,
            "ablation_ensemble": ensemble_table,
        }
        path = os.path.join(self.out_dir, "summary.json")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(summary, sort_keys=True, indent=1) + "\n")
        log.info("experiment complete: %s", path)
        return summary
