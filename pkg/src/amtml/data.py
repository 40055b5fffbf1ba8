"""Synthetic datasets and the expert-teacher construction.

Generators are pure functions of their arguments (including ``seed``) and
emit float32 features so that the binary format round-trips bit-exactly.
"""
from dataclasses import dataclass

import numpy as np

from amtml.errors import DataError, GenerationError, SpecError
from amtml.formats import read_dataset, write_dataset  # noqa: F401  (re-exported)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise DataError(f"{len(self.features)} feature rows but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def shape(self):
        return tuple(self.features.shape[1:])

    def subset(self, idx):
        return Dataset(self.features[idx], self.labels[idx], self.num_classes)

    def with_labels(self, labels):
        return Dataset(self.features, labels, self.num_classes)

    def equals(self, other):
        return (
            self.num_classes == other.num_classes
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
            and np.array_equal(self.labels, other.labels)
        )


def gen_blobs(K, samples_per_class, dim, separation, noise, seed):
    """Gaussian clusters around seeded centers at least ``separation`` apart."""
    if K < 2:
        raise GenerationError(f"need at least 2 classes, got {K}")
    if separation <= 0:
        raise GenerationError(f"separation must be positive, got {separation}")
    rng = np.random.default_rng(seed)
    half = separation * max(1.0, K ** (1.0 / dim))
    centers = []
    for k in range(K):
        for _ in range(1000):
            c = rng.uniform(-half, half, size=dim)
            if all(np.linalg.norm(c - o) >= separation for o in centers):
                centers.append(c)
                break
        else:
            raise GenerationError(f"could not place center {k} with separation {separation} after 1000 attempts")
    centers = np.array(centers, dtype=np.float32)
    labels = np.repeat(np.arange(K), samples_per_class)
    feats = centers[labels] + np.float32(noise) * rng.standard_normal((len(labels), dim)).astype(np.float32)
    return Dataset(feats.astype(np.float32), labels, K)


def gen_tiny_images(K, samples_per_class, C, H, W, seed, noise=0.5):
    """Class-conditional sinusoidal textures, one frequency pair per class,
    with per-class random channel phases and additive Gaussian noise."""
    if min(C, H, W) < 1:
        raise GenerationError("C, H and W must all be >= 1")
    if K < 2:
        raise GenerationError(f"need at least 2 classes, got {K}")
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
    patterns = []
    for k in range(K):
        fx, fy = 1 + k % 3, k // 3
        phase = rng.uniform(0, 2 * np.pi, size=C)
        patterns.append(np.sin(2 * np.pi * (fx * xx + fy * yy)[None] + phase[:, None, None]))
    patterns = np.array(patterns)
    labels = np.repeat(np.arange(K), samples_per_class)
    jitter = rng.uniform(0.5, 1.5, size=(len(labels), 1, 1, 1))
    feats = patterns[labels] * jitter + noise * rng.standard_normal((len(labels), C, H, W))
    return Dataset(feats.astype(np.float32), labels, K)


def split(ds, n_test, seed):
    """Seeded shuffle, then the first ``n_test`` rows become the test split."""
    perm = np.random.default_rng(seed).permutation(len(ds))
    return ds.subset(np.sort(perm[n_test:])), ds.subset(np.sort(perm[:n_test]))


def val_split(ds, seed, fraction=0.1):
    """Deterministic 90/10 train/validation split."""
    n_val = max(1, int(round(len(ds) * fraction)))
    return split(ds, n_val, seed)


@dataclass
class ExpertSplitSpec:
    subsets: list
    noise: float = 1.0
    samples_per_class: int = 0
    min_gap: float = 0.20

    def validate(self, K):
        seen = set()
        for s in self.subsets:
            for c in s:
                if c in seen:
                    raise SpecError(f"class {c} appears in more than one subset")
                if not 0 <= c < K:
                    raise SpecError(f"class {c} outside [0, {K})")
                seen.add(c)
        if seen != set(range(K)):
            raise SpecError(f"subsets cover {sorted(seen)}, expected all of 0..{K - 1}")


def noisy_labels(ds, keep, noise, rng):
    """Replace the labels of examples outside class set ``keep`` with
    uniform random labels (a ``noise`` fraction of them)."""
    labels = ds.labels.copy()
    outside = ~np.isin(labels, list(keep))
    flip = outside & (rng.random(len(labels)) < noise)
    labels[flip] = rng.integers(0, ds.num_classes, size=int(flip.sum()))
    return labels


def subset_accuracy(model, ds, classes):
    from amtml.trainer import evaluate

    mask = np.isin(ds.labels, list(classes))
    if not mask.any():
        return float("nan")
    return evaluate(model, ds.subset(np.flatnonzero(mask)))


def make_expert_teachers(spec, base, arch, seed, epochs=30, batch_size=128, lr=0.05, check_gap=True):
    """Teacher t sees true labels on its class subset and noised labels
    elsewhere, so it is reliable only on that subset."""
    from amtml.adapter import TeacherBundle
    from amtml.trainer import train_teacher

    spec.validate(base.num_classes)
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(2 * len(spec.subsets))
    models, val_acc = [], []
    for t, keep in enumerate(spec.subsets):
        rng = np.random.default_rng(children[2 * t])
        noisy = base.with_labels(noisy_labels(base, keep, spec.noise, rng))
        model_seed = int(children[2 * t + 1].generate_state(1)[0])
        model, acc = train_teacher(
            arch, noisy, epochs, model_seed, batch_size=batch_size, lr=lr, clean_labels=base.labels
        )
        if check_gap and len(spec.subsets) > 1:
            others = [c for c in range(base.num_classes) if c not in keep]
            on, off = subset_accuracy(model, base, keep), subset_accuracy(model, base, others)
            if on - off < spec.min_gap:
                raise GenerationError(
                    f"teacher {t}: on-subset accuracy {on:.3f} vs off-subset {off:.3f} misses the {spec.min_gap:.2f} gap"
                )
        models.append(model)
        val_acc.append(acc)
    return TeacherBundle(models, val_acc)
