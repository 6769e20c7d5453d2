"""Case/bag data types, the on-disk embedding-bundle format, patch sampling,
and a synthetic multistain generator for desk-scale experiments.

A dataset is a list of cases.  Each case holds one anchor bag (stain index 0,
conventionally "HE") plus one bag per additional stain, all sharing the same
embedding width d.  Bags are float64 in memory; on disk they are stored as
little-endian float32, so every generated or ingested value is kept exactly
float32-representable to make save/load round-trips bit-exact.

Bundle layout::

    <bundle dir>/
      manifest.json                 # version, d, stain table, case list, provenance
      <case_id>.<stain>.bin         # magic 'MSEB', u32 version=1, u32 N, u32 d,
                                    # then N*d little-endian float32, row-major

All integers in the binary files are little-endian.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .numerics import Matrix, RNG_ALGORITHM, Rng, as_matrix, check_finite, make_rng

BUNDLE_MAGIC = b"MSEB"
BUNDLE_VERSION = 1

# Stain-name palette for synthetic datasets; index 0 is always the anchor.
_STAIN_NAMES = ["HE", "ER", "PR", "HER2", "KI67"]


class BundleError(Exception):
    """Base class for embedding-bundle I/O failures."""


class BadMagicError(BundleError):
    pass


class VersionMismatchError(BundleError):
    pass


class TruncatedFileError(BundleError):
    pass


class DimensionMismatchError(BundleError):
    pass


@dataclass(frozen=True)
class StainId:
    """A stain name plus its small-integer index; index 0 is the anchor."""

    name: str
    index: int


@dataclass
class PatchEmbeddingBag:
    """One stain's patch-embedding matrix (N x d) for one case."""

    stain: StainId
    embeddings: Matrix

    def __post_init__(self):
        self.embeddings = as_matrix(self.embeddings, "bag embeddings")
        if self.embeddings.shape[0] < 1:
            raise ValueError("bag must contain at least one patch")
        check_finite(self.embeddings, f"bag {self.stain.name}")

    @property
    def n_patches(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]


@dataclass
class MultistainCase:
    """An anchor bag plus the case's other stain bags and optional labels."""

    case_id: str
    anchor: PatchEmbeddingBag
    others: list[PatchEmbeddingBag]
    labels: dict[str, int] | None = None
    survival: tuple[float, bool] | None = None  # (time, event)

    def __post_init__(self):
        if self.anchor.stain.index != 0:
            raise ValueError(
                f"case {self.case_id}: anchor stain index must be 0, "
                f"got {self.anchor.stain.index}"
            )
        seen = {self.anchor.stain.index}
        for bag in self.others:
            if bag.stain.index in seen:
                raise ValueError(
                    f"case {self.case_id}: duplicate stain index {bag.stain.index}"
                )
            seen.add(bag.stain.index)
        if self.survival is not None and not self.survival[0] > 0:
            raise ValueError(f"case {self.case_id}: survival time must be positive")

    def bags(self) -> list[PatchEmbeddingBag]:
        return [self.anchor] + list(self.others)


@dataclass
class MultistainDataset:
    cases: list[MultistainCase]
    stains: list[StainId]
    d: int
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        for case in self.cases:
            for bag in case.bags():
                if bag.d != self.d:
                    raise DimensionMismatchError(
                        f"case {case.case_id} stain {bag.stain.name}: "
                        f"d={bag.d} differs from dataset d={self.d}"
                    )

    def __len__(self) -> int:
        return len(self.cases)


@dataclass
class SyntheticConfig:
    """Configuration of the synthetic multistain generator."""

    n_cases: int = 200
    K: int = 2
    d: int = 32
    latent_dim: int = 8
    patches_min: int = 64
    patches_max: int = 128
    signal_fraction: float = 0.3
    noise_sigma: float = 0.5
    n_classes: int = 2
    seed: int = 0

    def validate(self):
        checks = [
            ("n_cases", self.n_cases >= 1),
            ("K", 1 <= self.K <= len(_STAIN_NAMES) + 94),
            ("d", self.d >= 1),
            ("latent_dim", 1 <= self.latent_dim <= self.d),
            ("patches_min", self.patches_min >= 1),
            ("patches_max", self.patches_max >= self.patches_min),
            ("signal_fraction", 0.0 < self.signal_fraction <= 1.0),
            ("noise_sigma", self.noise_sigma >= 0.0),
            ("n_classes", self.n_classes >= 1),
        ]
        bad = [name for name, ok in checks if not ok]
        if bad:
            raise ValueError(f"invalid SyntheticConfig field(s): {', '.join(bad)}")


def stain_table(n_stains: int) -> list[StainId]:
    names = list(_STAIN_NAMES)
    while len(names) < n_stains:
        names.append(f"IHC{len(names)}")
    return [StainId(names[i], i) for i in range(n_stains)]


def _round_f32(a: np.ndarray) -> np.ndarray:
    # Keep in-memory values exactly float32-representable so that the f32
    # on-disk format round-trips bit-exactly.
    return a.astype(np.float32).astype(np.float64)


def sample_patch_indices(n_total: int, n: int, rng: Rng) -> np.ndarray:
    """Indices for drawing n patches from a bag of n_total.

    Without replacement when n_total >= n (distinct indices).  Otherwise
    random over-sampling: every index appears at least floor(n / n_total)
    times and the remainder is drawn without replacement, then the whole
    multiset is shuffled.
    """
    if n < 1:
        raise ValueError(f"sample size must be >= 1, got {n}")
    if n_total < 1:
        raise ValueError("cannot sample from an empty bag")
    if n_total >= n:
        return rng.choice(n_total, size=n, replace=False)
    reps = n // n_total
    idx = np.tile(np.arange(n_total), reps)
    rem = n - reps * n_total
    if rem:
        idx = np.concatenate([idx, rng.choice(n_total, size=rem, replace=False)])
    rng.shuffle(idx)
    return idx


def sample_patches(bag: PatchEmbeddingBag, n: int, rng: Rng) -> Matrix:
    """Draw n patch embeddings from a bag (over-sampling when the bag is small)."""
    idx = sample_patch_indices(bag.n_patches, n, rng)
    return bag.embeddings[idx]


def mean_pool(bag: PatchEmbeddingBag) -> np.ndarray:
    """Column-wise arithmetic mean of the bag; the simplest slide embedding."""
    if bag.n_patches < 1:
        raise ValueError("cannot mean-pool an empty bag")
    return bag.embeddings.mean(axis=0)


def synth_generate(cfg: SyntheticConfig) -> MultistainDataset:
    """Generate a deterministic synthetic multistain dataset.

    Per case, a latent code z ~ N(0, I) in latent_dim dimensions defines
    everything observable: the class label is the index of the nearest of
    n_classes fixed random centroids, the survival time is exp(z[0]) with
    25% random censoring, and each stain's bag contains a signal_fraction
    of patches equal to A_s z + noise_sigma * eps (A_s a fixed per-stain
    lift with orthonormal columns) among pure standard-normal distractors.
    """
    cfg.validate()
    rng = make_rng(cfg.seed)
    stains = stain_table(cfg.K + 1)

    centroids = rng.standard_normal((cfg.n_classes, cfg.latent_dim))
    lifts = []
    for _ in range(cfg.K + 1):
        g = rng.standard_normal((cfg.d, cfg.latent_dim))
        q, _ = np.linalg.qr(g)
        lifts.append(q)

    cases = []
    for i in range(cfg.n_cases):
        z = rng.standard_normal(cfg.latent_dim)
        dists = np.linalg.norm(centroids - z[None, :], axis=1)
        label = int(np.argmin(dists))

        t_true = float(np.exp(z[0]))
        event = bool(rng.random() >= 0.25)
        time = t_true if event else t_true * float(rng.uniform(0.05, 0.95))

        bags = []
        for s, stain in enumerate(stains):
            n_patches = int(rng.integers(cfg.patches_min, cfg.patches_max + 1))
            n_signal = max(1, int(round(cfg.signal_fraction * n_patches)))
            signal = lifts[s] @ z + cfg.noise_sigma * rng.standard_normal(
                (n_signal, cfg.d)
            )
            distract = rng.standard_normal((n_patches - n_signal, cfg.d))
            rows = np.vstack([signal, distract])
            rng.shuffle(rows)
            bags.append(PatchEmbeddingBag(stain, _round_f32(rows)))

        cases.append(
            MultistainCase(
                case_id=f"case{i:05d}",
                anchor=bags[0],
                others=bags[1:],
                labels={"class": label},
                survival=(time, event),
            )
        )

    provenance = {
        "generator": "synthetic-multistain",
        "rng_algorithm": RNG_ALGORITHM,
        "seed": cfg.seed,
        "config": {
            "n_cases": cfg.n_cases,
            "K": cfg.K,
            "d": cfg.d,
            "latent_dim": cfg.latent_dim,
            "patches_min": cfg.patches_min,
            "patches_max": cfg.patches_max,
            "signal_fraction": cfg.signal_fraction,
            "noise_sigma": cfg.noise_sigma,
            "n_classes": cfg.n_classes,
        },
    }
    return MultistainDataset(cases=cases, stains=stains, d=cfg.d, provenance=provenance)


def _write_bag(path: Path, bag: PatchEmbeddingBag):
    n, d = bag.embeddings.shape
    payload = bag.embeddings.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(BUNDLE_MAGIC)
        fh.write(struct.pack("<III", BUNDLE_VERSION, n, d))
        fh.write(payload)


def _read_bag(path: Path, stain: StainId, expect_d: int) -> PatchEmbeddingBag:
    raw = path.read_bytes()
    if len(raw) < 4 or raw[:4] != BUNDLE_MAGIC:
        raise BadMagicError(f"{path.name}: bad magic bytes")
    if len(raw) < 16:
        raise TruncatedFileError(f"{path.name}: header truncated")
    version, n, d = struct.unpack("<III", raw[4:16])
    if version != BUNDLE_VERSION:
        raise VersionMismatchError(
            f"{path.name}: version {version}, expected {BUNDLE_VERSION}"
        )
    if d != expect_d:
        raise DimensionMismatchError(
            f"{path.name}: d={d} differs from manifest d={expect_d}"
        )
    expect_bytes = 16 + 4 * n * d
    if len(raw) < expect_bytes:
        raise TruncatedFileError(
            f"{path.name}: expected {expect_bytes} bytes, found {len(raw)}"
        )
    flat = np.frombuffer(raw[16:expect_bytes], dtype="<f4")
    emb = flat.astype(np.float64).reshape(n, d)
    return PatchEmbeddingBag(stain, emb)


def save_bundle(dataset: MultistainDataset, path: str | Path) -> Path:
    """Write a dataset to an embedding-bundle directory; returns the path."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    case_entries = []
    for case in dataset.cases:
        entry = {
            "case_id": case.case_id,
            "stains": [bag.stain.name for bag in case.bags()],
            "labels": case.labels,
            "survival": None
            if case.survival is None
            else {"time": case.survival[0], "event": case.survival[1]},
        }
        case_entries.append(entry)
        for bag in case.bags():
            _write_bag(root / f"{case.case_id}.{bag.stain.name}.bin", bag)
    manifest = {
        "format": "multistain-embedding-bundle",
        "version": BUNDLE_VERSION,
        "d": dataset.d,
        "stains": [{"name": s.name, "index": s.index} for s in dataset.stains],
        "cases": case_entries,
        "provenance": dataset.provenance,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return root


def load_bundle(path: str | Path) -> MultistainDataset:
    """Read an embedding-bundle directory back into a dataset."""
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise BundleError(f"no manifest.json under {root}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("version") != BUNDLE_VERSION:
        raise VersionMismatchError(
            f"manifest version {manifest.get('version')}, expected {BUNDLE_VERSION}"
        )
    d = int(manifest["d"])
    stains = [StainId(s["name"], int(s["index"])) for s in manifest["stains"]]
    by_name = {s.name: s for s in stains}
    cases = []
    for entry in manifest["cases"]:
        case_id = entry["case_id"]
        bags = []
        for stain_name in entry["stains"]:
            stain = by_name.get(stain_name)
            if stain is None:
                raise BundleError(f"case {case_id}: unknown stain {stain_name}")
            bags.append(_read_bag(root / f"{case_id}.{stain_name}.bin", stain, d))
        bags.sort(key=lambda b: b.stain.index)
        survival = entry.get("survival")
        cases.append(
            MultistainCase(
                case_id=case_id,
                anchor=bags[0],
                others=bags[1:],
                labels=entry.get("labels"),
                survival=None
                if survival is None
                else (float(survival["time"]), bool(survival["event"])),
            )
        )
    return MultistainDataset(
        cases=cases, stains=stains, d=d, provenance=manifest.get("provenance", {})
    )
