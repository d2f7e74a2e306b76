"""Command line interface.

One subcommand per pipeline stage plus `run-experiment` for the whole
thing. Progress goes to stderr; with --json the only stdout bytes are a
single machine-readable JSON document. Exit codes: 0 success, 1 usage
error, 2 data or validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from .dataset import DatasetError, load_manifest, rescale_mos, split_dataset
from .harness import ExperimentRunner, HarnessError, load_config, reference_config
from .metrics import EvalReport, MetricError, ScoredModel, cross_dataset_matrix, \
    evaluate, matrix_to_json, render_matrix_csv, srcc
from .pseudolabel import (
    EnsembleSnapshot,
    PseudoLabelError,
    central_crop_store,
    generate_pair_manifest,
    load_pair_manifest,
    save_pair_manifest,
)
from .rng import derive_seed
from .scorer import ScorerConfig, ScorerError, load_params, params_digest, save_params
from .synthbench import BiasedDatasetConfig, SynthError, gen_biased_dataset
from .trainer import (
    NumericalError,
    TrainConfig,
    TrainerError,
    train_pairwise,
    train_single,
)

log = logging.getLogger("biqa.cli")

_DATA_ERRORS = (
    DatasetError,
    SynthError,
    ScorerError,
    TrainerError,
    PseudoLabelError,
    MetricError,
    HarnessError,
    OSError,
    ValueError,
    KeyError,
)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _read_json(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _dataset_config(d: dict) -> BiasedDatasetConfig:
    return BiasedDatasetConfig(
        name=str(d["name"]),
        n_images=int(d["n_images"]),
        allowed_kinds=tuple(d["allowed_kinds"]),
        label_remap=str(d["label_remap"]),
        seed=int(d["seed"]),
        image_size=int(d.get("image_size", 48)),
    )


def _scorer_config(path: str | None) -> ScorerConfig:
    if path is None:
        return ScorerConfig(patch_size=32, channels_in=1, conv_channels=(8, 16, 32))
    return ScorerConfig.from_dict(_read_json(path))


def _train_config(path: str | None, default: TrainConfig, seed: int | None) -> TrainConfig:
    cfg = default if path is None else TrainConfig.from_dict(_read_json(path))
    if seed is not None:
        cfg = TrainConfig.from_dict(cfg.to_dict() | {"seed": seed})
    return cfg


_STAGE1_DEFAULT = TrainConfig(epochs=30, base_lr=1e-3, patches_per_image=10)
_STAGE3_DEFAULT = TrainConfig(epochs=10, base_lr=1e-3, patches_per_image=1)


def _experiment_config(spec: str, seed: int | None):
    cfg = reference_config() if spec == "reference" else load_config(spec)
    if seed is not None:
        cfg = cfg.with_master_seed(seed)
    return cfg


def _scores_for(params, manifest) -> dict[str, float]:
    from .harness import _batched_scores

    crops = central_crop_store(manifest.records, params.config.patch_size)
    ids = [r.id for r in manifest.records]
    values = _batched_scores(params, np.stack([crops[i] for i in ids]))
    return dict(zip(ids, (float(v) for v in values)))


# ---- command handlers ----------------------------------------------------


def _cmd_synth_gen(args) -> dict:
    config = _dataset_config(_read_json(args.config))
    if args.seed is not None:
        config = BiasedDatasetConfig(
            name=config.name,
            n_images=config.n_images,
            allowed_kinds=config.allowed_kinds,
            label_remap=config.label_remap,
            seed=args.seed,
            image_size=config.image_size,
        )
    manifest, _ = gen_biased_dataset(config, args.out)
    log.info("wrote %d images under %s", len(manifest.records), args.out)
    return {
        "name": config.name,
        "n_images": len(manifest.records),
        "csv": os.path.join(args.out, f"{config.name}.csv"),
        "truth": os.path.join(args.out, f"{config.name}.truth.csv"),
    }


def _cmd_train_single(args) -> dict:
    manifest = rescale_mos(load_manifest(args.dataset))
    scorer_cfg = _scorer_config(args.scorer_config)
    train_cfg = _train_config(args.train_config, _STAGE1_DEFAULT, args.seed)
    split = split_dataset(manifest, derive_seed(train_cfg.seed, "split"))
    params = train_single(manifest, split, scorer_cfg, train_cfg)
    save_params(params, args.out)
    scores = _scores_for(params, manifest)
    test_srcc = srcc(
        [scores[i] for i in split.test_ids],
        [manifest.labels[i] for i in split.test_ids],
    )
    log.info("held-out SRCC %.4f on %d images", test_srcc, len(split.test_ids))
    return {
        "model": args.out,
        "digest": params_digest(params),
        "trained_on": manifest.name,
        "test_srcc": test_srcc,
        "n_test": len(split.test_ids),
    }


def _cmd_gen_pairs(args) -> dict:
    snapshot = EnsembleSnapshot.from_files(args.models)
    pool = load_manifest(args.pool)
    manifest = generate_pair_manifest(
        snapshot, pool, args.n_pairs, args.seed, keep_per_model=args.keep_per_model
    )
    save_pair_manifest(manifest, args.out)
    log.info("wrote %d pairs to %s", manifest.n_pairs, args.out)
    return {
        "pairs": args.out,
        "n_pairs": manifest.n_pairs,
        "pool": manifest.pool,
        "ensemble": list(manifest.ensemble),
    }


def _cmd_train_cdr(args) -> dict:
    pair_manifest = load_pair_manifest(args.pairs)
    images = load_manifest(args.images)
    scorer_cfg = _scorer_config(args.scorer_config)
    train_cfg = _train_config(args.train_config, _STAGE3_DEFAULT, args.seed)
    store = central_crop_store(images.records, scorer_cfg.patch_size)
    params = train_pairwise(pair_manifest, store, scorer_cfg, train_cfg)
    params.meta = {"trained_on": images.name, "n_pairs": pair_manifest.n_pairs}
    save_params(params, args.out)
    return {
        "model": args.out,
        "digest": params_digest(params),
        "trained_on": images.name,
        "n_pairs": pair_manifest.n_pairs,
    }


def _cmd_eval(args) -> dict:
    params = load_params(args.model)
    manifest = load_manifest(args.dataset)
    name = os.path.splitext(os.path.basename(args.model))[0]
    trained_on = str(params.meta.get("trained_on", "unknown"))
    scores = _scores_for(params, manifest)
    if args.splits:
        seed = args.seed if args.seed is not None else 0
        rows = []
        for i in range(args.splits):
            split = split_dataset(manifest, derive_seed(seed, "split", i))
            ids = split.test_ids
            rows.append(
                evaluate(
                    [scores[j] for j in ids],
                    [manifest.labels[j] for j in ids],
                    model=name,
                    trained_on=trained_on,
                    dataset=manifest.name,
                )
            )
        report = EvalReport(
            model=name,
            trained_on=trained_on,
            dataset=manifest.name,
            n=rows[0].n,
            srcc=float(np.median([r.srcc for r in rows])),
            plcc=float(np.median([r.plcc for r in rows])),
            raw_pearson=float(np.median([r.raw_pearson for r in rows])),
            betas=None,
            seed=seed,
        )
    else:
        ids = [r.id for r in manifest.records]
        report = evaluate(
            [scores[j] for j in ids],
            [manifest.labels[j] for j in ids],
            model=name,
            trained_on=trained_on,
            dataset=manifest.name,
        )
    log.info(
        "%s on %s: SRCC %.4f PLCC %.4f", name, manifest.name, report.srcc, report.plcc
    )
    return report.to_dict()


def _cmd_cross_eval(args) -> dict:
    loaded = [(path, load_params(path)) for path in args.models]
    patch_sizes = {p.config.patch_size for _, p in loaded}
    if len(patch_sizes) > 1:
        raise HarnessError("models disagree on patch size")
    patch = patch_sizes.pop()
    manifests = [load_manifest(path) for path in args.datasets]
    crops = {}
    for m in manifests:
        crops.update(central_crop_store(m.records, patch))
    from .harness import _batched_scores

    def row(path, params):
        def fn(records):
            return _batched_scores(params, np.stack([crops[r.id] for r in records]))

        return ScoredModel(
            name=os.path.splitext(os.path.basename(path))[0],
            trained_on=str(params.meta.get("trained_on", "unknown")),
            score_fn=fn,
        )

    matrix = cross_dataset_matrix([row(p, m) for p, m in loaded], manifests)
    if args.out_csv:
        with open(args.out_csv, "w", encoding="utf-8") as fh:
            fh.write(render_matrix_csv(matrix))
        log.info("wrote %s", args.out_csv)
    if not args.json:
        sys.stdout.write(render_matrix_csv(matrix))
    return {"matrix": matrix_to_json(matrix)}


def _cmd_ablate(args) -> dict:
    config = _experiment_config(args.config, args.seed)
    runner = ExperimentRunner(config, args.out, threads=args.threads, force=args.force)
    if args.axis == "pairs":
        return runner.run_ablation_paircount()
    return runner.run_ablation_ensemble()


def _cmd_run_experiment(args) -> dict:
    config = _experiment_config(args.config, args.seed)
    runner = ExperimentRunner(config, args.out, threads=args.threads, force=args.force)
    summary = runner.run_all()
    log.info("summary written to %s", os.path.join(args.out, "summary.json"))
    return summary


# ---- parser ----------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="biqa", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p: _Parser, seed_help: str) -> None:
        p.add_argument("--seed", type=int, default=None, help=seed_help)
        p.add_argument("--json", action="store_true", help="JSON result on stdout")

    p = sub.add_parser("synth-gen", help="generate one synthetic dataset")
    p.add_argument("--config", required=True, help="dataset config JSON")
    p.add_argument("--out", required=True, help="output directory")
    common(p, "override the config's generator seed")
    p.set_defaults(func=_cmd_synth_gen)

    p = sub.add_parser("train-single", help="train a scorer on one labeled dataset")
    p.add_argument("--dataset", required=True, help="dataset manifest CSV")
    p.add_argument("--scorer-config", default=None, help="scorer config JSON")
    p.add_argument("--train-config", default=None, help="training config JSON")
    p.add_argument("--out", required=True, help="model file to write")
    common(p, "override the training seed")
    p.set_defaults(func=_cmd_train_single)

    p = sub.add_parser("gen-pairs", help="pseudo-label random pool pairs")
    p.add_argument("--models", nargs="+", required=True, help="ensemble model files")
    p.add_argument("--pool", required=True, help="unlabeled pool manifest CSV")
    p.add_argument("--n-pairs", type=int, required=True)
    p.add_argument("--out", required=True, help="pair manifest CSV to write")
    p.add_argument("--keep-per-model", action="store_true",
                   help="keep per-model probability columns")
    common(p, "pair sampling seed (default 0)")
    p.set_defaults(func=_cmd_gen_pairs)

    p = sub.add_parser("train-cdr", help="train the final scorer on labeled pairs")
    p.add_argument("--pairs", required=True, help="pair manifest CSV")
    p.add_argument("--images", required=True, help="pool manifest CSV")
    p.add_argument("--scorer-config", default=None)
    p.add_argument("--train-config", default=None)
    p.add_argument("--out", required=True, help="model file to write")
    common(p, "override the training seed")
    p.set_defaults(func=_cmd_train_cdr)

    p = sub.add_parser("eval", help="score a dataset with one model")
    p.add_argument("--model", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--splits", type=int, default=0,
                   help="median metrics over this many random test splits")
    common(p, "base seed for --splits")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("cross-eval", help="models x datasets correlation matrix")
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--datasets", nargs="+", required=True)
    p.add_argument("--out-csv", default=None)
    common(p, "unused; accepted for flag uniformity")
    p.set_defaults(func=_cmd_cross_eval)

    p = sub.add_parser("ablate", help="run one ablation axis")
    p.add_argument("axis", choices=("pairs", "ensemble"))
    p.add_argument("--config", required=True, help='config JSON or "reference"')
    p.add_argument("--out", required=True, help="experiment directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--force", action="store_true")
    common(p, "override the experiment master seed")
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("run-experiment", help="full pipeline plus reports")
    p.add_argument("--config", required=True, help='config JSON or "reference"')
    p.add_argument("--out", required=True, help="experiment directory")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--force", action="store_true")
    common(p, "override the experiment master seed")
    p.set_defaults(func=_cmd_run_experiment)

    return parser


def dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    if not logging.getLogger().handlers:
        logging.basicConfig(
            stream=sys.stderr, level=logging.INFO, format="%(name)s: %(message)s"
        )
    try:
        payload = args.func(args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    if args.json:
        sys.stdout.write(json.dumps(payload, sort_keys=True) + "\n")
    return 0


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
