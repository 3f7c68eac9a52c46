"""
Embedding datasets: representation, normalization, file formats, and the
synthetic covariate-shift generator.

The generator realizes the matching-marginal setting: ID and OOD covariances
share a unit diagonal and differ only off the diagonal
(Sigma_OOD = Sigma_ID + E, diag(E) = 0), and both domains are labeled by
one fixed linear teacher so P(y|x) is shared.

EVDS binary layout (little-endian):
    "EVDS" | u16 version=1 | u32 n | u32 d | u32 C |
    n*d float64 features (row-major) | n u32 labels | u8 tag length | UTF-8 tag
"""

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ev_base import (
    BadMagic,
    DimensionMismatch,
    InfeasibleShift,
    LabelOutOfRange,
    NonFinite,
    RaggedRows,
    SingularCovariance,
    TruncatedFile,
    ValueVector,
    ZeroRow,
)
from specmath import covariance, jacobi_eigh


EVDS_MAGIC = b"EVDS"
EVDS_VERSION = 1
_HEADER = struct.Struct("<4sHIII")

ZERO_ROW_TOL = 1e-12
PSD_FLOOR = 1e-3
PSD_TARGET = 1.5e-3  # clip above the floor so diagonal rescaling keeps lambda_min >= floor
MAX_REPAIR_ROUNDS = 100
MAX_E_DISTORTION = 0.5


# ============================================================================
# Dataset
# ============================================================================

@dataclass
class EmbeddingDataset:
    """n x d embeddings with integer labels in [0, num_classes)."""
    features: np.ndarray
    labels: np.ndarray
    num_classes: int
    domain_tag: str = "id"

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64)
        if x.ndim != 2:
            raise DimensionMismatch(f"features must be n x d, got shape {x.shape}")
        y = np.array(self.labels).reshape(-1)
        if y.size and not np.issubdtype(y.dtype, np.integer):
            if not np.all(np.equal(np.mod(y, 1), 0)):
                raise LabelOutOfRange("labels must be integers")
        y = y.astype(np.int64)
        if x.shape[0] < 1:
            raise ValueError("dataset must contain at least one point")
        if y.shape[0] != x.shape[0]:
            raise DimensionMismatch(f"{x.shape[0]} feature rows but {y.shape[0]} labels")
        if not np.all(np.isfinite(x)):
            raise NonFinite("features contain non-finite values")
        if self.num_classes < 1:
            raise ValueError("num_classes must be at least 1")
        if y.min() < 0 or y.max() >= self.num_classes:
            raise LabelOutOfRange(f"labels must lie in [0, {self.num_classes}), got [{y.min()}, {y.max()}]")
        x.setflags(write=False)
        y.setflags(write=False)
        self.features = x
        self.labels = y
        self.num_classes = int(self.num_classes)

    @property
    def n(self) -> int:
        return int(self.features.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    def subset(self, indices: Sequence[int], domain_tag: Optional[str] = None) -> "EmbeddingDataset":
        idx = np.asarray(indices, dtype=np.intp)
        return EmbeddingDataset(self.features[idx], self.labels[idx], self.num_classes,
                                domain_tag or self.domain_tag)

    def concat(self, other: "EmbeddingDataset") -> "EmbeddingDataset":
        if other.d != self.d:
            raise DimensionMismatch(f"cannot concatenate d={self.d} with d={other.d}")
        return EmbeddingDataset(
            np.vstack([self.features, other.features]),
            np.concatenate([self.labels, other.labels]),
            max(self.num_classes, other.num_classes),
            self.domain_tag,
        )

    def with_labels(self, labels: np.ndarray) -> "EmbeddingDataset":
        return EmbeddingDataset(self.features, labels, self.num_classes, self.domain_tag)


def check_compatible(a: EmbeddingDataset, b: EmbeddingDataset) -> None:
    if a.d != b.d:
        raise DimensionMismatch(f"dimension {a.d} != {b.d}")


# ============================================================================
# Normalization
# ============================================================================

@dataclass
class NormalizationRecord:
    column_means: np.ndarray
    row_norm_applied: bool
    ridge_applied: float = 0.0
    row_norms: Optional[np.ndarray] = None


def center_rows(rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Subtract column means; returns (centered, means)."""
    x = np.asarray(rows, dtype=np.float64)
    means = x.mean(axis=0)
    return x - means, means


def normalize(raw: EmbeddingDataset, row_norm: bool = True) -> Tuple[EmbeddingDataset, NormalizationRecord]:
    """Row L2 normalization, then column centering."""
    if raw.n < 2:
        raise ValueError(f"normalize needs at least 2 rows, got {raw.n}")
    x = np.array(raw.features, dtype=np.float64)
    norms = None
    if row_norm:
        norms = np.linalg.norm(x, axis=1)
        small = np.flatnonzero(norms < ZERO_ROW_TOL)
        if small.size:
            raise ZeroRow(int(small[0]))
        x = x / norms[:, None]
    x, means = center_rows(x)
    out = EmbeddingDataset(x, raw.labels, raw.num_classes, raw.domain_tag)
    return out, NormalizationRecord(column_means=means, row_norm_applied=row_norm, row_norms=norms)


# ============================================================================
# File formats
# ============================================================================

PathLike = Union[str, Path]


def _format_for(path: Path, fmt: Optional[str]) -> str:
    if fmt:
        fmt = fmt.lower()
    else:
        fmt = "csv" if path.suffix.lower() == ".csv" else "evds"
    if fmt not in ("evds", "csv"):
        raise ValueError(f"unknown dataset format {fmt!r} (expected evds or csv)")
    return fmt


def encode_evds(dataset: EmbeddingDataset) -> bytes:
    tag = dataset.domain_tag.encode("utf-8")
    if len(tag) > 255:
        raise ValueError("domain tag longer than 255 bytes")
    parts = [
        _HEADER.pack(EVDS_MAGIC, EVDS_VERSION, dataset.n, dataset.d, dataset.num_classes),
        np.ascontiguousarray(dataset.features, dtype="<f8").tobytes(),
        np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes(),
        struct.pack("<B", len(tag)),
        tag,
    ]
    return b"".join(parts)


def decode_evds(blob: bytes) -> EmbeddingDataset:
    if len(blob) < len(EVDS_MAGIC) or blob[:4] != EVDS_MAGIC:
        raise BadMagic(f"not an EVDS file (magic {blob[:4]!r})")
    if len(blob) < _HEADER.size:
        raise TruncatedFile(_HEADER.size, len(blob))
    _, version, n, d, c = _HEADER.unpack_from(blob, 0)
    if version != EVDS_VERSION:
        raise BadMagic(f"unsupported EVDS version {version}")
    feat_bytes = 8 * n * d
    label_bytes = 4 * n
    fixed = _HEADER.size + feat_bytes + label_bytes + 1
    if len(blob) < fixed:
        raise TruncatedFile(fixed, len(blob))
    tag_len = blob[fixed - 1]
    if len(blob) < fixed + tag_len:
        raise TruncatedFile(fixed + tag_len, len(blob))
    offset = _HEADER.size
    features = np.frombuffer(blob, dtype="<f8", count=n * d, offset=offset).reshape(n, d)
    offset += feat_bytes
    labels = np.frombuffer(blob, dtype="<u4", count=n, offset=offset).astype(np.int64)
    if n and labels.max() >= c:
        raise LabelOutOfRange(f"label {int(labels.max())} outside [0, {c})")
    tag = blob[fixed:fixed + tag_len].decode("utf-8")
    return EmbeddingDataset(features.astype(np.float64), labels, c, tag)


def _write_csv(dataset: EmbeddingDataset, path: Path) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"f{j}" for j in range(dataset.d)] + ["label"])
        for row, label in zip(dataset.features, dataset.labels):
            writer.writerow([format(float(v), ".17g") for v in row] + [int(label)])


def _read_csv(path: Path, num_classes: Optional[int], domain_tag: str) -> EmbeddingDataset:
    with path.open("r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[-1].strip() != "label":
            raise ValueError(f"{path}: header must be f0,...,f{{d-1}},label")
        d = len(header) - 1
        expected = [f"f{j}" for j in range(d)]
        if [h.strip() for h in header[:-1]] != expected:
            raise ValueError(f"{path}: header must be f0,...,f{d - 1},label")
        rows, labels = [], []
        for line_no, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != d + 1:
                raise RaggedRows(f"{path}:{line_no}: expected {d + 1} fields, got {len(record)}")
            try:
                rows.append([float(v) for v in record[:-1]])
                label = float(record[-1])
            except ValueError as exc:
                raise ValueError(f"{path}:{line_no}: {exc}")
            if label != int(label) or label < 0:
                raise LabelOutOfRange(f"{path}:{line_no}: label {record[-1]!r} is not a non-negative integer")
            labels.append(int(label))
    if not rows:
        raise ValueError(f"{path}: no data rows")
    y = np.asarray(labels, dtype=np.int64)
    c = num_classes if num_classes is not None else int(y.max()) + 1
    if y.max() >= c:
        raise LabelOutOfRange(f"{path}: label {int(y.max())} outside [0, {c})")
    return EmbeddingDataset(np.asarray(rows, dtype=np.float64).reshape(len(rows), d), y, c, domain_tag)


def save(dataset: EmbeddingDataset, path: PathLike, fmt: Optional[str] = None) -> Path:
    path = Path(path)
    if _format_for(path, fmt) == "evds":
        path.write_bytes(encode_evds(dataset))
    else:
        _write_csv(dataset, path)
    return path


def load(path: PathLike, fmt: Optional[str] = None, num_classes: Optional[int] = None) -> EmbeddingDataset:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such dataset file: {path}")
    if _format_for(path, fmt) == "evds":
        return decode_evds(path.read_bytes())
    return _read_csv(path, num_classes, domain_tag=path.stem)


# ============================================================================
# Synthetic covariate shift
# ============================================================================

@dataclass
class ShiftSpec:
    n_id: int
    n_ood: int
    d: int
    num_classes: int = 2
    shift_strength: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.n_id < 2 or self.n_ood < 2:
            raise ValueError("n_id and n_ood must be at least 2")
        if self.d < 2:
            raise ValueError("d must be at least 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.shift_strength < 0:
            raise ValueError("shift_strength must be non-negative")


@dataclass
class ShiftCovariances:
    """Population covariances behind one generated pair."""
    sigma_id: np.ndarray
    sigma_ood: np.ndarray
    e_requested: np.ndarray
    repair_rounds: int
    e_distortion: float  # | ||E_eff||_F - ||E||_F | / ||E||_F

    @property
    def e_effective(self) -> np.ndarray:
        return self.sigma_ood - self.sigma_id


def _to_correlation(sigma: np.ndarray) -> np.ndarray:
    scale = np.sqrt(np.diag(sigma))
    out = sigma / np.outer(scale, scale)
    out = (out + out.T) / 2.0
    np.fill_diagonal(out, 1.0)
    return out


def _streams(seed: int) -> Dict[str, np.random.Generator]:
    names = ["sigma", "shift", "id", "ood", "teacher"]
    children = np.random.SeedSequence(seed).spawn(len(names))
    return {name: np.random.default_rng(child) for name, child in zip(names, children)}


def build_shift_covariances(spec: ShiftSpec) -> ShiftCovariances:
    rngs = _streams(spec.seed)
    d = spec.d

    a = rngs["sigma"].standard_normal((d, d))
    sigma_id = _to_correlation(a @ a.T / d + 0.1 * np.eye(d))

    e = np.zeros((d, d))
    iu = np.triu_indices(d, k=1)
    e[iu] = rngs["shift"].uniform(-spec.shift_strength, spec.shift_strength, size=iu[0].size)
    e = e + e.T

    sigma = sigma_id + e
    rounds = 0
    while True:
        values, vectors = jacobi_eigh(sigma)
        if values[-1] >= PSD_FLOOR:
            break
        if rounds == MAX_REPAIR_ROUNDS:
            raise InfeasibleShift(f"could not repair Sigma_OOD to lambda_min >= {PSD_FLOOR} "
                                  f"in {MAX_REPAIR_ROUNDS} rounds (s={spec.shift_strength})")
        clipped = (vectors * np.maximum(values, PSD_TARGET)) @ vectors.T
        sigma = _to_correlation((clipped + clipped.T) / 2.0)
        rounds += 1

    e_norm = float(np.linalg.norm(e))
    distortion = 0.0
    if e_norm > 0:
        distortion = abs(float(np.linalg.norm(sigma - sigma_id)) - e_norm) / e_norm
        if distortion > MAX_E_DISTORTION:
            raise InfeasibleShift(f"PSD repair changed ||E||_F by {distortion:.0%} "
                                  f"(limit {MAX_E_DISTORTION:.0%}); lower the shift strength")
    return ShiftCovariances(sigma_id=sigma_id, sigma_ood=sigma, e_requested=e,
                            repair_rounds=rounds, e_distortion=distortion)


def sample_gaussian(sigma: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    chol = np.linalg.cholesky(sigma)
    return rng.standard_normal((n, sigma.shape[0])) @ chol.T


def teacher_model(d: int, num_classes: int, rng: np.random.Generator):
    from valuers import SoftmaxModel

    return SoftmaxModel(weights=rng.standard_normal((num_classes, d)), bias=np.zeros(num_classes))


def synth_shift_pair(spec: ShiftSpec, normalize_output: bool = True):
    """
    Generate (id_set, ood_set, teacher) under the matching-marginal contract.

    With normalize_output=False the raw Gaussian samples are returned, which is
    what the covariance Monte-Carlo checks need.
    """
    cov = build_shift_covariances(spec)
    rngs = _streams(spec.seed)
    teacher = teacher_model(spec.d, spec.num_classes, rngs["teacher"])

    x_id = sample_gaussian(cov.sigma_id, spec.n_id, rngs["id"])
    x_ood = sample_gaussian(cov.sigma_ood, spec.n_ood, rngs["ood"])
    id_set = EmbeddingDataset(x_id, teacher.predict(x_id), spec.num_classes, "id")
    ood_set = EmbeddingDataset(x_ood, teacher.predict(x_ood), spec.num_classes, "ood")
    if normalize_output:
        id_set, _ = normalize(id_set)
        ood_set, _ = normalize(ood_set)
    return id_set, ood_set, teacher


def gaussian_dataset(n: int, d: int, num_classes: int = 2, seed: int = 0,
                     scales: Optional[Sequence[float]] = None, tag: str = "gaussian") -> EmbeddingDataset:
    """Centered Gaussian rows with per-axis scales, labeled by a random linear teacher."""
    rngs = _streams(seed)
    scale = np.ones(d) if scales is None else np.asarray(scales, dtype=np.float64)
    if scale.shape != (d,):
        raise DimensionMismatch(f"scales must have length {d}")
    x = rngs["id"].standard_normal((n, d)) * scale
    x, _ = center_rows(x)
    teacher = teacher_model(d, num_classes, rngs["teacher"])
    return EmbeddingDataset(x, teacher.predict(x), num_classes, tag)


def flip_labels(dataset: EmbeddingDataset, fraction: float, seed: int = 0) -> Tuple[EmbeddingDataset, np.ndarray]:
    """Move a random `fraction` of labels to a different class."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    if dataset.num_classes < 2:
        raise ValueError("label flipping needs at least 2 classes")
    rng = np.random.default_rng(seed)
    count = int(round(fraction * dataset.n))
    flipped = np.sort(rng.choice(dataset.n, size=count, replace=False))
    labels = dataset.labels.copy()
    offsets = rng.integers(1, dataset.num_classes, size=count)
    labels[flipped] = (labels[flipped] + offsets) % dataset.num_classes
    return dataset.with_labels(labels), flipped


def disjoint_split(dataset: EmbeddingDataset, sizes: Sequence[int], seed: int = 0) -> List[EmbeddingDataset]:
    """Random disjoint subsets of the given sizes."""
    if sum(sizes) > dataset.n:
        raise ValueError(f"requested {sum(sizes)} points from a dataset of {dataset.n}")
    perm = np.random.default_rng(seed).permutation(dataset.n)
    out, start = [], 0
    for size in sizes:
        out.append(dataset.subset(np.sort(perm[start:start + size])))
        start += size
    return out


# ============================================================================
# Reports
# ============================================================================

@dataclass
class PcaGapReport:
    var_top: float
    var_bottom: float
    group_size: int
    components: List[float] = field(default_factory=list)

    @property
    def gap(self) -> float:
        return self.var_top - self.var_bottom

    def as_dict(self) -> Dict[str, float]:
        return {"var_top": self.var_top, "var_bottom": self.var_bottom, "gap": self.gap,
                "group_size": self.group_size}


def pca_variance_gap(dataset: EmbeddingDataset, values: ValueVector, top_fraction: float = 0.5,
                     components: int = 3) -> PcaGapReport:
    """Total variance on the top principal components for top- vs bottom-valued groups."""
    if not 0.0 < top_fraction <= 0.5:
        raise ValueError("top_fraction must lie in (0, 0.5]")
    if len(values) != dataset.n:
        raise DimensionMismatch(f"{len(values)} scores for {dataset.n} points")
    x, _ = center_rows(dataset.features)
    cov = covariance(x)
    if cov.trace() <= 0.0:
        raise SingularCovariance(0.0, 1e-8)
    eigvals, eigvecs = jacobi_eigh(cov)
    k = min(components, dataset.d)
    proj = x @ eigvecs[:, :k]

    order = values.ranking()
    m = max(1, int(np.floor(top_fraction * dataset.n)))
    top, bottom = order[:m], order[-m:]
    return PcaGapReport(
        var_top=float(np.sum(np.var(proj[top], axis=0))),
        var_bottom=float(np.sum(np.var(proj[bottom], axis=0))),
        group_size=m,
        components=[float(v) for v in eigvals[:k]],
    )


@dataclass
class AlignmentReport:
    """How closely two domains satisfy the matching-marginal assumption."""
    diag_gap: float  # max |diag(S_a) - diag(S_b)|
    offdiag_gap: float  # ||offdiag(S_a - S_b)||_F
    mean_variance: float

    @property
    def ratio(self) -> float:
        return self.diag_gap / self.offdiag_gap if self.offdiag_gap > 0 else float("inf")

    def as_dict(self) -> Dict[str, float]:
        return {"diag_gap": self.diag_gap, "offdiag_gap": self.offdiag_gap,
                "mean_variance": self.mean_variance, "ratio": self.ratio}


def marginal_alignment(a: EmbeddingDataset, b: EmbeddingDataset) -> AlignmentReport:
    check_compatible(a, b)
    sa = covariance(center_rows(a.features)[0]).entries
    sb = covariance(center_rows(b.features)[0]).entries
    diff = sa - sb
    diag = np.diag(diff)
    off = diff - np.diag(diag)
    return AlignmentReport(
        diag_gap=float(np.max(np.abs(diag))),
        offdiag_gap=float(np.linalg.norm(off)),
        mean_variance=float((np.trace(sa) + np.trace(sb)) / (2 * a.d)),
    )
