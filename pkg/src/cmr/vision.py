"""Image classification pipeline on banded (multi-channel) representations.

Stages: IDX ingestion, convolution-like block reshaping of each image into a
bands x positions matrix, a shared random ReLU uplift of the band dimension,
digit-pair task construction, and classification with the shared-mechanism
estimator against per-task baselines.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    InsufficientSamples,
    NotDivisible,
    ShapeMismatch,
    TruncatedFile,
)
from .estimator import estimate_a, estimate_gamma, ridge_solve, spectral_from_moments
from .experiments import fmt17
from .model import TaskDataset

IDX_IMAGE_MAGIC = 0x00000803  # uint8 payload, 3 dimensions
IDX_LABEL_MAGIC = 0x00000801  # uint8 payload, 1 dimension

RIDGE_GRID = tuple(10.0**k for k in range(-3, 4))


# ---------------------------------------------------------------------------
# IDX container I/O
# ---------------------------------------------------------------------------


def read_idx(path):
    """Parse a big-endian IDX file.

    Image files (magic 0x00000803) come back as (N, H, W) float arrays with
    pixel bytes divided by 255; label files (magic 0x00000801) come back as
    (N,) integer arrays.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 4:
        raise TruncatedFile(f"{path}: shorter than the 4-byte magic")
    magic = int.from_bytes(data[:4], "big")
    if magic == IDX_IMAGE_MAGIC:
        ndim = 3
    elif magic == IDX_LABEL_MAGIC:
        ndim = 1
    else:
        raise BadMagic(f"{path}: unrecognized magic 0x{magic:08x}")
    header = 4 + 4 * ndim
    if len(data) < header:
        raise TruncatedFile(f"{path}: header ends before {ndim} dimension fields")
    dims = [int.from_bytes(data[4 + 4 * k : 8 + 4 * k], "big") for k in range(ndim)]
    if any(d == 0 for d in dims):
        raise DimensionMismatch(f"{path}: zero-sized dimension in header {dims}")
    count = int(np.prod(dims))
    if len(data) < header + count:
        raise TruncatedFile(
            f"{path}: payload has {len(data) - header} bytes, header promises {count}"
        )
    payload = np.frombuffer(data, dtype=np.uint8, count=count, offset=header)
    if magic == IDX_IMAGE_MAGIC:
        return payload.reshape(dims).astype(float) / 255.0
    return payload.astype(np.int64)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write a uint8 (N, H, W) array as an IDX image file."""
    arr = np.asarray(images)
    if arr.ndim != 3 or arr.dtype != np.uint8:
        raise ShapeMismatch("images must be a uint8 (N, H, W) array")
    with open(path, "wb") as fh:
        fh.write(IDX_IMAGE_MAGIC.to_bytes(4, "big"))
        for d in arr.shape:
            fh.write(int(d).to_bytes(4, "big"))
        fh.write(arr.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    """Write an integer (N,) array as an IDX label file."""
    arr = np.asarray(labels)
    if arr.ndim != 1:
        raise ShapeMismatch("labels must be a 1-d array")
    with open(path, "wb") as fh:
        fh.write(IDX_LABEL_MAGIC.to_bytes(4, "big"))
        fh.write(int(arr.shape[0]).to_bytes(4, "big"))
        fh.write(arr.astype(np.uint8).tobytes())


# ---------------------------------------------------------------------------
# Block reshaping and the random nonlinear band uplift
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BandedImage:
    """One image as a bands x positions matrix over a square spatial grid."""

    bands: np.ndarray  # (B, P)
    spatial_side: int

    def __post_init__(self):
        if self.bands.ndim != 2 or self.bands.shape[1] != self.spatial_side**2:
            raise ShapeMismatch(
                f"bands {self.bands.shape} inconsistent with spatial side "
                f"{self.spatial_side}"
            )


def block_reshape(image, block: int) -> BandedImage:
    """Partition an image into non-overlapping block x block tiles.

    The output has block^2 bands (band index = position within the tile,
    row-major) over (H/block) x (W/block) spatial positions; the mapping is
    a bijection, inverted exactly by inverse_block_reshape.
    """
    img = np.asarray(image, dtype=float)
    if img.ndim != 2:
        raise ShapeMismatch(f"image must be 2-d, got shape {img.shape}")
    h, w = img.shape
    if block < 1 or h % block or w % block:
        raise NotDivisible(
            f"block {block} does not divide image sides {h} x {w}"
        )
    th, tw = h // block, w // block
    if th != tw:
        raise ShapeMismatch(f"tile grid {th} x {tw} must be square")
    tiles = img.reshape(th, block, tw, block)
    bands = tiles.transpose(1, 3, 0, 2).reshape(block * block, th * tw)
    return BandedImage(bands=bands, spatial_side=th)


def inverse_block_reshape(banded: BandedImage) -> np.ndarray:
    """Exact inverse of block_reshape."""
    n_bands, n_pos = banded.bands.shape
    block = int(round(np.sqrt(n_bands)))
    if block * block != n_bands:
        raise ShapeMismatch(f"band count {n_bands} is not a perfect square")
    side = banded.spatial_side
    tiles = banded.bands.reshape(block, block, side, side)
    return tiles.transpose(2, 0, 3, 1).reshape(side * block, side * block)


def block_reshape_batch(images, block: int) -> np.ndarray:
    """block_reshape over a stack of images; returns (N, block^2, P)."""
    imgs = np.asarray(images, dtype=float)
    if imgs.ndim != 3:
        raise ShapeMismatch(f"images must be (N, H, W), got {imgs.shape}")
    n, h, w = imgs.shape
    if block < 1 or h % block or w % block:
        raise NotDivisible(f"block {block} does not divide image sides {h} x {w}")
    th, tw = h // block, w // block
    if th != tw:
        raise ShapeMismatch(f"tile grid {th} x {tw} must be square")
    tiles = imgs.reshape(n, th, block, tw, block)
    return tiles.transpose(0, 2, 4, 1, 3).reshape(n, block * block, th * tw)


@dataclass(frozen=True)
class UpliftMap:
    """Shared random ReLU band uplift, fixed per experiment.

    projection entries are N(0, 1/B_raw), the bias is N(0, 1); one map is
    drawn per experiment and applied to every task, so the shared mechanism
    sees identical features everywhere.
    """

    projection: np.ndarray  # (B_out, B_raw)
    bias: np.ndarray  # (B_out,)
    seed: int

    @classmethod
    def create(cls, b_out: int, b_raw: int, seed: int) -> "UpliftMap":
        rng = np.random.default_rng(seed)
        projection = rng.standard_normal((b_out, b_raw)) / np.sqrt(b_raw)
        bias = rng.standard_normal(b_out)
        return cls(projection=projection, bias=bias, seed=seed)


def uplift(img: BandedImage, up: UpliftMap) -> BandedImage:
    """Rectified affine uplift of the band dimension at every position."""
    if up.projection.shape[1] != img.bands.shape[0]:
        raise ShapeMismatch(
            f"uplift expects {up.projection.shape[1]} bands, image has "
            f"{img.bands.shape[0]}"
        )
    out = np.maximum(up.projection @ img.bands + up.bias[:, None], 0.0)
    return BandedImage(bands=out, spatial_side=img.spatial_side)


def uplift_batch(bands, up: UpliftMap) -> np.ndarray:
    """uplift over a stack (N, B_raw, P) -> (N, B_out, P)."""
    arr = np.asarray(bands, dtype=float)
    if arr.ndim != 3 or up.projection.shape[1] != arr.shape[1]:
        raise ShapeMismatch(
            f"bands {arr.shape} inconsistent with uplift input width "
            f"{up.projection.shape[1]}"
        )
    return np.maximum(np.matmul(up.projection, arr) + up.bias[None, :, None], 0.0)


# ---------------------------------------------------------------------------
# Digit-pair tasks and the classification study
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PairTask:
    """One binary task: digit_a vs digit_b with disjoint train/test indices."""

    digit_a: int
    digit_b: int
    train_idx: np.ndarray
    test_idx: np.ndarray

    def __post_init__(self):
        if self.digit_a == self.digit_b:
            raise ShapeMismatch("a pair task needs two distinct digits")
        if np.intersect1d(self.train_idx, self.test_idx).size:
            raise ShapeMismatch("train and test indices overlap")


def all_digit_pairs() -> list[tuple[int, int]]:
    """The 45 unordered digit pairs."""
    return [(a, b) for a in range(10) for b in range(a + 1, 10)]


def make_pair_tasks(
    labels,
    pairs,
    t_train: int,
    t_test: int,
    rng: np.random.Generator,
) -> list[PairTask]:
    """Balanced train/test splits for each digit pair.

    Draws t_train/2 training and t_test/2 test samples per class, without
    replacement and disjoint, from the samples carrying each label.
    """
    labels = np.asarray(labels)
    if t_train % 2 or t_test % 2:
        raise InsufficientSamples("t_train and t_test must be even (balanced classes)")
    need = (t_train + t_test) // 2
    tasks = []
    for digit_a, digit_b in pairs:
        idx = {}
        for digit in (digit_a, digit_b):
            pool = np.flatnonzero(labels == digit)
            if pool.size < need:
                raise InsufficientSamples(
                    f"digit {digit} has {pool.size} samples, needs {need}"
                )
            idx[digit] = rng.choice(pool, size=need, replace=False)
        train = np.concatenate([idx[digit_a][: t_train // 2], idx[digit_b][: t_train // 2]])
        test = np.concatenate([idx[digit_a][t_train // 2 :], idx[digit_b][t_train // 2 :]])
        tasks.append(PairTask(digit_a, digit_b, train, test))
    return tasks


COV_SHRINK = 1e-3  # relative diagonal shrinkage before whitening image moments


def _shared_mechanism(dataset: TaskDataset, r: int, eig_floor: float | None):
    """Whitened spectral mechanism with covariance shrinkage.

    Rectified features leave dead bands (exact zeros on dark tiles), so the
    raw covariance estimate is rank deficient; a small relative diagonal
    shrinkage keeps the whitening well posed without touching the signal
    directions.
    """
    gamma_hat = estimate_gamma(dataset)
    a_hat = estimate_a(dataset)
    scale = float(np.trace(gamma_hat)) / gamma_hat.shape[0]
    gamma_reg = gamma_hat + COV_SHRINK * max(scale, 1e-300) * np.eye(gamma_hat.shape[0])
    return spectral_from_moments(gamma_reg, a_hat, r, eig_floor).w_hat


def _task_arrays(bands, labels, task: PairTask):
    """Centered train/test design stacks and +-1 labels for one task."""
    x_train = bands[task.train_idx]
    x_test = bands[task.test_idx]
    center = x_train.mean(axis=0)
    y_train = np.where(labels[task.train_idx] == task.digit_a, 1.0, -1.0)
    y_test = np.where(labels[task.test_idx] == task.digit_a, 1.0, -1.0)
    return x_train - center, y_train, x_test - center, y_test


def _projected_features(x, w):
    """vec(X^T w) per sample, plus an intercept column."""
    t = x.shape[0]
    feats = np.matmul(x.transpose(0, 2, 1), w).reshape(t, -1)
    return np.hstack([feats, np.ones((t, 1))])


def _flat_features(x):
    t = x.shape[0]
    return np.hstack([x.reshape(t, -1), np.ones((t, 1))])


def _accuracy(coef, feats, y) -> float:
    pred = feats @ coef
    return float(np.mean(np.where(pred >= 0, 1.0, -1.0) == y))


def classify_tasks(
    bands,
    labels,
    tasks: list[PairTask],
    r: int,
    method: str,
    ridge: float,
    eig_floor: float | None = None,
) -> np.ndarray:
    """Train the chosen method on each task and return per-task test accuracy.

    methods: "cmr" (one shared mechanism estimated from all tasks pooled,
    then a per-task regressor with intercept and ridge), "cmr1" (the same
    pipeline per task, no pooling), "frr" (per-task ridge on flat features).
    """
    if method not in ("cmr", "cmr1", "frr"):
        raise ShapeMismatch(f"unknown method {method!r}")
    prepared = [_task_arrays(bands, labels, task) for task in tasks]
    w_shared = None
    if method == "cmr":
        x_all = np.stack([p[0] for p in prepared])
        y_all = np.stack([p[1] for p in prepared])
        w_shared = _shared_mechanism(TaskDataset(x=x_all, y=y_all), r, eig_floor)
    accuracies = np.zeros(len(tasks))
    for k, (x_train, y_train, x_test, y_test) in enumerate(prepared):
        if method == "frr":
            f_train, f_test = _flat_features(x_train), _flat_features(x_test)
        else:
            if method == "cmr":
                w = w_shared
            else:
                single = TaskDataset(x=x_train[None], y=y_train[None])
                w = _shared_mechanism(single, r, eig_floor)
            f_train = _projected_features(x_train, w)
            f_test = _projected_features(x_test, w)
        coef = ridge_solve(f_train, y_train, ridge)
        accuracies[k] = _accuracy(coef, f_test, y_test)
    return accuracies


def calibrate_ridge(
    bands,
    labels,
    task: PairTask,
    r: int,
    method: str,
    grid=RIDGE_GRID,
    eig_floor: float | None = None,
) -> float:
    """Pick the ridge with the best held-out accuracy on a single task.

    The task's training half is split in two; ties prefer the smaller
    ridge. The chosen value is then frozen for the whole study.
    """
    x_train, y_train, _, _ = _task_arrays(bands, labels, task)
    t = x_train.shape[0]
    half = t // 2
    fit_idx = np.arange(half)
    val_idx = np.arange(half, t)
    if method == "frr":
        feats = _flat_features(x_train)
    else:
        # the mechanism from the fitting half only, so validation stays held out
        single = TaskDataset(x=x_train[fit_idx][None], y=y_train[fit_idx][None])
        w = _shared_mechanism(single, r, eig_floor)
        feats = _projected_features(x_train, w)
    best_ridge, best_acc = grid[0], -1.0
    for ridge in grid:
        coef = ridge_solve(feats[fit_idx], y_train[fit_idx], ridge)
        acc = _accuracy(coef, feats[val_idx], y_train[val_idx])
        if acc > best_acc:
            best_ridge, best_acc = ridge, acc
    return best_ridge


@dataclass
class AccuracyTable:
    """Per-method accuracy over repetitions and tasks."""

    method: str
    t_train: int
    pairs: list[tuple[int, int]]
    repetition_seeds: list[int]
    ridge: float
    accuracies: np.ndarray  # (repetitions, tasks)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.accuracies))


def run_pair_classification(
    bands,
    labels,
    pairs,
    t_train: int,
    r: int,
    method: str,
    repetition_seeds,
    t_test: int = 200,
    ridge: float | None = None,
    eig_floor: float | None = None,
) -> AccuracyTable:
    """Mean test accuracy of one method across random train/test repetitions.

    Each repetition rebuilds every task's balanced split from its own seed.
    When ridge is None it is calibrated once, on the first task of the first
    repetition, and frozen for everything else.
    """
    bands = np.asarray(bands, dtype=float)
    labels = np.asarray(labels)
    pairs = list(pairs)
    seeds = [int(s) for s in repetition_seeds]
    task_sets = [
        make_pair_tasks(labels, pairs, t_train, t_test, np.random.default_rng(seed))
        for seed in seeds
    ]
    if ridge is None:
        ridge = calibrate_ridge(bands, labels, task_sets[0][0], r, method, eig_floor=eig_floor)
    accuracies = np.stack(
        [
            classify_tasks(bands, labels, tasks, r, method, ridge, eig_floor)
            for tasks in task_sets
        ]
    )
    return AccuracyTable(
        method=method,
        t_train=t_train,
        pairs=pairs,
        repetition_seeds=seeds,
        ridge=float(ridge),
        accuracies=accuracies,
    )


def write_accuracy_csv(path, tables: list[AccuracyTable]) -> None:
    """Accuracy table CSV: one row per (method, repetition, task)."""
    lines = ["method,t_train,repetition,digit_a,digit_b,accuracy"]
    for table in tables:
        for rep in range(table.accuracies.shape[0]):
            for k, (a, b) in enumerate(table.pairs):
                lines.append(
                    f"{table.method},{table.t_train},{rep},{a},{b},"
                    f"{fmt17(table.accuracies[rep, k])}"
                )
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# Procedural digit corpus (desk-scale stand-in shipped as IDX files)
# ---------------------------------------------------------------------------

_DIGIT_GLYPHS = {
    0: ("01110", "10001", "10011", "10101", "11001", "10001", "01110"),
    1: ("00100", "01100", "00100", "00100", "00100", "00100", "01110"),
    2: ("01110", "10001", "00001", "00010", "00100", "01000", "11111"),
    3: ("11111", "00010", "00100", "00010", "00001", "10001", "01110"),
    4: ("00010", "00110", "01010", "10010", "11111", "00010", "00010"),
    5: ("11111", "10000", "11110", "00001", "00001", "10001", "01110"),
    6: ("00110", "01000", "10000", "11110", "10001", "10001", "01110"),
    7: ("11111", "00001", "00010", "00100", "01000", "01000", "01000"),
    8: ("01110", "10001", "10001", "01110", "10001", "10001", "01110"),
    9: ("01110", "10001", "10001", "01111", "00001", "00010", "01100"),
}


def _glyph_array(digit: int) -> np.ndarray:
    rows = _DIGIT_GLYPHS[digit]
    return np.array([[c == "1" for c in row] for row in rows], dtype=float)


def _box_blur(img: np.ndarray) -> np.ndarray:
    padded = np.pad(img, 1, mode="edge")
    out = np.zeros_like(img)
    for dr in range(3):
        for dc in range(3):
            out += padded[dr : dr + img.shape[0], dc : dc + img.shape[1]]
    return out / 9.0


def synthetic_digits(
    n_per_class: int,
    seed: int,
    side: int = 28,
    noise: float = 0.5,
    max_shift: int = 3,
) -> tuple[np.ndarray, np.ndarray]:
    """Procedurally rendered digit images in the usual 28 x 28 uint8 layout.

    Each sample upscales a 5 x 7 glyph, applies a random integer shift,
    brightness jitter, a soft blur and pixel noise. Deterministic given the
    seed; intended as an offline stand-in with the same file format and
    shapes as scanned-digit corpora.
    """
    rng = np.random.default_rng(seed)
    scale = side // 7
    images = np.zeros((10 * n_per_class, side, side), dtype=np.uint8)
    labels = np.zeros(10 * n_per_class, dtype=np.uint8)
    n = 0
    for digit in range(10):
        glyph = np.kron(_glyph_array(digit), np.ones((scale, scale)))
        gh, gw = glyph.shape
        row0 = (side - gh) // 2
        col0 = (side - gw) // 2
        for _ in range(n_per_class):
            canvas = np.zeros((side, side))
            dr, dc = rng.integers(-max_shift, max_shift + 1, size=2)
            # paste with clipping so shifts near the border stay in frame
            r_lo, c_lo = row0 + int(dr), col0 + int(dc)
            rd0, rd1 = max(r_lo, 0), min(r_lo + gh, side)
            cd0, cd1 = max(c_lo, 0), min(c_lo + gw, side)
            canvas[rd0:rd1, cd0:cd1] = glyph[rd0 - r_lo : rd1 - r_lo, cd0 - c_lo : cd1 - c_lo]
            brightness = rng.uniform(0.6, 1.0)
            img = _box_blur(canvas) * brightness
            img += noise * rng.standard_normal((side, side))
            images[n] = np.clip(img * 255.0, 0, 255).astype(np.uint8)
            labels[n] = digit
            n += 1
    return images, labels
