"""Ensemble pseudo-labels for ranked image pairs.

Every biased scorer rates every pool image once (on its fixed central
crop), the score difference of a pair becomes a probability through a
sigmoid, and the ensemble's mean probability is the pair's pseudo-label.
Scores are deliberately not renormalized across models: stage-1 training
already targets [0,1] labels, so per-model probabilities land inside
roughly [0.269, 0.731], softening extreme pairs on purpose.

Pairs are drawn without replacement from the n*(n-1) ordered-pair index
space by a keyed Feistel permutation with cycle walking, so pair lists
are uniform, duplicate-free, cheap at millions of pairs, and nested:
the first k pairs of a longer run equal the k-pair run for the same seed.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .dataset import DatasetManifest, ImageRecord, resize_short_side_and_center_crop
from .rng import MASK64, derive_seed, mix64
from .scorer import ScorerParams, forward_batch, load_params, params_digest
from .trainer import stable_sigmoid

_FEISTEL_ROUNDS = 4
_SCORE_BATCH = 256


class PseudoLabelError(Exception):
    pass


@dataclass(frozen=True)
class EnsembleMember:
    params: ScorerParams
    trained_on: str
    digest: str


@dataclass
class EnsembleSnapshot:
    members: list[EnsembleMember]

    def __post_init__(self):
        if not self.members:
            raise PseudoLabelError("ensemble needs at least one member")
        sizes = {m.params.config.patch_size for m in self.members}
        if len(sizes) != 1:
            raise PseudoLabelError(f"members disagree on patch size: {sorted(sizes)}")

    @property
    def patch_size(self) -> int:
        return self.members[0].params.config.patch_size

    @property
    def provenance(self) -> list[dict]:
        return [{"trained_on": m.trained_on, "digest": m.digest} for m in self.members]

    @staticmethod
    def from_params(params_list: list[ScorerParams]) -> "EnsembleSnapshot":
        members = [
            EnsembleMember(
                params=p,
                trained_on=str(p.meta.get("trained_on", "unknown")),
                digest=params_digest(p),
            )
            for p in params_list
        ]
        return EnsembleSnapshot(members)

    @staticmethod
    def from_files(paths: list[str]) -> "EnsembleSnapshot":
        return EnsembleSnapshot.from_params([load_params(p) for p in paths])


@dataclass(frozen=True)
class PairSample:
    x_id: str
    y_id: str
    p_r: float
    per_model: tuple[float, ...] | None = None


@dataclass
class PairManifest:
    pool: str
    n_pairs: int
    seed: int
    ensemble: list[dict]
    samples: list[PairSample]

    def validate(self) -> None:
        if self.n_pairs != len(self.samples):
            raise PseudoLabelError(
                f"n_pairs {self.n_pairs} != {len(self.samples)} samples"
            )
        seen = set()
        for s in self.samples:
            if s.x_id == s.y_id:
                raise PseudoLabelError(f"self-pair {s.x_id!r}")
            if not 0.0 < s.p_r < 1.0:
                raise PseudoLabelError(f"pair ({s.x_id}, {s.y_id}): p_r {s.p_r}")
            key = (s.x_id, s.y_id)
            if key in seen:
                raise PseudoLabelError(f"duplicate ordered pair {key}")
            seen.add(key)


def relative_prob(q_x: float, q_y: float) -> float:
    """Probability that X has higher quality than Y: sigmoid(q_x - q_y)."""
    return float(stable_sigmoid(np.float64(q_x) - np.float64(q_y)))


def ensemble_pseudolabel(per_model_probs) -> float:
    """Mean of the per-model probabilities (exactly rounded, so the
    result is independent of model order)."""
    probs = list(per_model_probs)
    if not probs:
        raise PseudoLabelError("no per-model probabilities")
    return math.fsum(probs) / len(probs)


def central_crop_store(
    records: list[ImageRecord], crop: int, short_side: int | None = None
) -> dict[str, np.ndarray]:
    """Fixed evaluation crop per image: optional short-side resize, then
    center crop. short_side=None keeps the native resolution."""
    store = {}
    for rec in records:
        side = short_side or min(rec.height, rec.width)
        patch = resize_short_side_and_center_crop(rec, side, crop)
        store[rec.id] = patch.pixels
    return store


def score_pool(
    snapshot: EnsembleSnapshot,
    image_ids: list[str],
    image_store: dict[str, np.ndarray],
) -> list[dict[str, float]]:
    """Score every image once per ensemble member; q[i][image_id]."""
    missing = [i for i in image_ids if i not in image_store]
    if missing:
        raise PseudoLabelError(f"missing images: {missing[:5]}")
    if not image_ids:
        raise PseudoLabelError("no images to score")
    crops = np.stack([image_store[i] for i in image_ids])
    table = []
    for member in snapshot.members:
        scores = np.empty(len(image_ids))
        for lo in range(0, len(image_ids), _SCORE_BATCH):
            chunk = crops[lo : lo + _SCORE_BATCH]
            scores[lo : lo + len(chunk)], _ = forward_batch(member.params, chunk)
        table.append({i: float(s) for i, s in zip(image_ids, scores)})
    return table


def _pair_from_index(k: int, n: int) -> tuple[int, int]:
    x, rem = divmod(k, n - 1)
    return x, rem if rem < x else rem + 1


def sample_pairs(
    image_ids: list[str], n_pairs: int, seed: int
) -> list[tuple[str, str]]:
    """First n_pairs of a keyed permutation of all ordered pairs."""
    ids = list(image_ids)
    n = len(ids)
    if n < 2:
        raise PseudoLabelError("need at least 2 images to form pairs")
    total = n * (n - 1)
    if not 1 <= n_pairs <= total:
        raise PseudoLabelError(
            f"n_pairs must be in [1, {total}] for {n} images, got {n_pairs}"
        )
    half = (max(total - 1, 1).bit_length() + 1) // 2
    mask = (1 << half) - 1
    keys = [derive_seed(seed, "feistel", r) for r in range(_FEISTEL_ROUNDS)]

    def permute(v: int) -> int:
        left, right = v >> half, v & mask
        for key in keys:
            left, right = right, left ^ (mix64((right + key) & MASK64) & mask)
        return (left << half) | right

    pairs = []
    for i in range(n_pairs):
        v = permute(i)
        while v >= total:
            v = permute(v)
        x, y = _pair_from_index(v, n)
        pairs.append((ids[x], ids[y]))
    return pairs


def build_pair_manifest(
    pool_name: str,
    image_ids: list[str],
    table: list[dict[str, float]],
    provenance: list[dict],
    n_pairs: int,
    seed: int,
    keep_per_model: bool = False,
) -> PairManifest:
    """Assemble a labeled manifest from precomputed per-model scores."""
    if len(table) != len(provenance) or not table:
        raise PseudoLabelError("score table and provenance lengths differ")
    samples = []
    for x_id, y_id in sample_pairs(image_ids, n_pairs, seed):
        per_model = tuple(relative_prob(q[x_id], q[y_id]) for q in table)
        samples.append(
            PairSample(
                x_id=x_id,
                y_id=y_id,
                p_r=ensemble_pseudolabel(per_model),
                per_model=per_model if keep_per_model else None,
            )
        )
    manifest = PairManifest(
        pool=pool_name,
        n_pairs=n_pairs,
        seed=seed,
        ensemble=list(provenance),
        samples=samples,
    )
    manifest.validate()
    return manifest


def generate_pair_manifest(
    snapshot: EnsembleSnapshot,
    pool: DatasetManifest,
    n_pairs: int,
    seed: int,
    keep_per_model: bool = False,
    short_side: int | None = None,
) -> PairManifest:
    """Stage 2 end to end: score the pool, sample pairs, label them."""
    image_ids = sorted(r.id for r in pool.records)
    store = central_crop_store(pool.records, snapshot.patch_size, short_side)
    table = score_pool(snapshot, image_ids, store)
    return build_pair_manifest(
        pool.name, image_ids, table, snapshot.provenance, n_pairs, seed, keep_per_model
    )


def _sidecar_path(csv_path: str) -> str:
    root, ext = os.path.splitext(csv_path)
    return (root if ext == ".csv" else csv_path) + ".json"


def save_pair_manifest(manifest: PairManifest, csv_path: str) -> None:
    """Write the `x_id,y_id,p_r` CSV and its JSON sidecar."""
    manifest.validate()
    with_models = all(s.per_model is not None for s in manifest.samples)
    n_models = len(manifest.samples[0].per_model) if with_models else 0
    header = "x_id,y_id,p_r"
    if with_models:
        header += "".join(f",p_r_{i + 1}" for i in range(n_models))
    lines = [header]
    for s in manifest.samples:
        row = f"{s.x_id},{s.y_id},{s.p_r!r}"
        if with_models:
            row += "".join(f",{p!r}" for p in s.per_model)
        lines.append(row)
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    sidecar = {
        "pool": manifest.pool,
        "n_pairs": manifest.n_pairs,
        "seed": manifest.seed,
        "ensemble": manifest.ensemble,
    }
    with open(_sidecar_path(csv_path), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(sidecar, sort_keys=True, indent=1) + "\n")


def load_pair_manifest(csv_path: str) -> PairManifest:
    sidecar_path = _sidecar_path(csv_path)
    if not os.path.exists(sidecar_path):
        raise PseudoLabelError(f"missing sidecar {sidecar_path}")
    with open(sidecar_path, encoding="utf-8") as fh:
        sidecar = json.load(fh)
    samples = []
    with open(csv_path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header[:3] != ["x_id", "y_id", "p_r"]:
            raise PseudoLabelError(f"{csv_path}: bad header {header[:3]}")
        with_models = len(header) > 3
        for line in fh:
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != len(header):
                raise PseudoLabelError(f"{csv_path}: ragged row {parts[:2]}")
            samples.append(
                PairSample(
                    x_id=parts[0],
                    y_id=parts[1],
                    p_r=float(parts[2]),
                    per_model=tuple(float(v) for v in parts[3:])
                    if with_models
                    else None,
                )
            )
    manifest = PairManifest(
        pool=str(sidecar["pool"]),
        n_pairs=int(sidecar["n_pairs"]),
        seed=int(sidecar["seed"]),
        ensemble=list(sidecar["ensemble"]),
        samples=samples,
    )
    manifest.validate()
    return manifest
