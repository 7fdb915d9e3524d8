"""
dataset.py – DepthAug3D
Manifest ingestion, stratified K-fold plans with the rotating
test/validation schedule, and the synthetic volume generator used for
desk-scale runs.

Manifest format: tab-separated text with a header row
    id    path    label    cohort_tag
label is 0 (CN) or 1 (AD); the strings CN / AD are accepted too. Relative
paths resolve against the manifest's directory.
"""

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import expit

import config
from augment import SeededRng
from errors import DuplicateId, MissingFile, ParseError, TooFewSamples
from helpers import atomic_write_text, ensure_dir, mix_seed
from volume import Volume3D, normalize_intensity, read_volume, write_volume

logger = logging.getLogger(__name__)

CN, AD = 0, 1
CLASS_NAMES = {CN: 'CN', AD: 'AD'}
MANIFEST_COLUMNS = ['id', 'path', 'label', 'cohort_tag']


# ── Manifest ──────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class SampleRecord:
    id: str
    volume_path: Path
    label: int
    cohort_tag: str = ''


def _parse_label(raw: str, row: int) -> int:
    value = raw.strip().upper()
    if value in ('0', 'CN'):
        return CN
    if value in ('1', 'AD'):
        return AD
    raise ParseError(f"Row {row}: label must be 0/1 or CN/AD, got '{raw}'")


def load_manifest(path: Union[str, Path], check_files: bool = True) -> List[SampleRecord]:
    """
    Read and validate a manifest.

    Args:
        path:        Manifest file.
        check_files: Also require every referenced volume file to exist.

    Returns:
        Records in file order.

    Raises:
        MissingFile: If the manifest (or, with check_files, a volume) is missing.
        ParseError:  On unreadable tables, missing columns or bad labels.
        DuplicateId: If an id appears twice.
    """
    path = Path(path)
    if not path.exists():
        raise MissingFile(f"Manifest not found: {path}")
    try:
        frame = pd.read_csv(path, sep='\t', dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ParseError(f"Failed to parse manifest {path}: {e}")

    missing = [c for c in MANIFEST_COLUMNS[:3] if c not in frame.columns]
    if missing:
        raise ParseError(f"Manifest {path} lacks columns {missing}")
    if 'cohort_tag' not in frame.columns:
        frame['cohort_tag'] = ''

    duplicated = frame['id'][frame['id'].duplicated()]
    if len(duplicated):
        raise DuplicateId(f"Duplicate id '{duplicated.iloc[0]}' in {path}")

    records = []
    for row, item in enumerate(frame.itertuples(index=False), start=2):
        if not item.id.strip():
            raise ParseError(f"Row {row}: empty id")
        volume_path = Path(item.path)
        if not volume_path.is_absolute():
            volume_path = path.parent / volume_path
        if check_files and not volume_path.exists():
            raise MissingFile(f"Volume for '{item.id}' not found: {volume_path}")
        records.append(SampleRecord(item.id, volume_path, _parse_label(item.label, row), item.cohort_tag))

    logger.info("Loaded %d records from %s (%s)", len(records), path, class_totals(records))
    return records


def write_manifest(path: Union[str, Path], records: Sequence[SampleRecord]) -> None:
    """Write records as a manifest; paths are stored relative to its directory when possible."""
    path = Path(path)
    rows = []
    for r in records:
        try:
            stored = r.volume_path.resolve().relative_to(path.parent.resolve())
        except ValueError:
            stored = r.volume_path
        rows.append({'id': r.id, 'path': stored.as_posix(), 'label': r.label, 'cohort_tag': r.cohort_tag})
    frame = pd.DataFrame(rows, columns=MANIFEST_COLUMNS)
    atomic_write_text(path, frame.to_csv(sep='\t', index=False))


def class_totals(records: Sequence[SampleRecord]) -> Dict[str, int]:
    totals = {name: 0 for name in CLASS_NAMES.values()}
    for r in records:
        totals[CLASS_NAMES[r.label]] += 1
    return totals


def summarize_manifest(records: Sequence[SampleRecord]) -> pd.DataFrame:
    """CN / AD counts per cohort tag, with a Total row."""
    frame = pd.DataFrame({'cohort_tag': [r.cohort_tag for r in records],
                          'label': [CLASS_NAMES[r.label] for r in records]})
    table = pd.crosstab(frame['cohort_tag'], frame['label']).reindex(columns=['CN', 'AD'], fill_value=0)
    table.loc['Total'] = table.sum()
    table['Total'] = table['CN'] + table['AD']
    return table


def load_samples(records: Sequence[SampleRecord]) -> Dict[str, Tuple[Volume3D, int]]:
    """Read every record's volume; keyed by id."""
    return {r.id: (read_volume(r.volume_path), r.label) for r in records}


# ── Fold plans ────────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class FoldPlan:
    k: int
    seed: int
    assignments: Dict[str, int]
    labels: Dict[str, int]
    order: Tuple[str, ...] = field(default=())

    def fold_ids(self, fold: int) -> List[str]:
        """Ids of *fold* in manifest order."""
        return [i for i in self.order if self.assignments[i] == fold]

    def validation_fold(self, test_fold: int) -> int:
        return (test_fold + 1) % self.k

    @property
    def split_schedule(self) -> List[Tuple[int, int, Tuple[int, ...]]]:
        """(test, validation, training folds) for every rotation."""
        schedule = []
        for f in range(self.k):
            val = self.validation_fold(f)
            schedule.append((f, val, tuple(g for g in range(self.k) if g not in (f, val))))
        return schedule

    def fold_counts(self) -> pd.DataFrame:
        """Per-fold class counts (rows: folds, columns: CN, AD, Total)."""
        frame = pd.DataFrame({'fold': [self.assignments[i] for i in self.order],
                              'label': [CLASS_NAMES[self.labels[i]] for i in self.order]})
        table = (pd.crosstab(frame['fold'], frame['label'])
                 .reindex(index=range(self.k), columns=['CN', 'AD'], fill_value=0))
        table['Total'] = table['CN'] + table['AD']
        return table


def stratified_kfold(records: Sequence[SampleRecord], k: int = config.N_FOLDS, seed: int = 0) -> FoldPlan:
    """
    Per class (ascending label), shuffle the ids with one seeded stream and
    deal them round-robin to folds 0..k-1, so remainders land in the
    lowest-indexed folds and the last fold is the smallest.

    Raises:
        TooFewSamples: If some class has fewer than *k* members.
    """
    if k < 2:
        raise ValueError(f"k must be >= 2, got {k}")
    rng = SeededRng(seed)
    assignments: Dict[str, int] = {}

    for label in sorted({r.label for r in records}):
        ids = [r.id for r in records if r.label == label]
        if len(ids) < k:
            raise TooFewSamples(f"Class {CLASS_NAMES.get(label, label)} has {len(ids)} samples, need >= {k}")
        for position, index in enumerate(rng.permutation(len(ids))):
            assignments[ids[index]] = position % k

    plan = FoldPlan(k, seed, assignments, {r.id: r.label for r in records}, tuple(r.id for r in records))
    logger.debug("Fold plan (k=%d, seed=%d):\n%s", k, seed, plan.fold_counts())
    return plan


class Split(NamedTuple):
    train: List[str]
    val: List[str]
    test: List[str]


def materialize_split(plan: FoldPlan, test_fold: int) -> Split:
    """Test = fold f, validation = fold (f+1) mod k, training = the rest."""
    if not 0 <= test_fold < plan.k:
        raise ValueError(f"test_fold must be in 0..{plan.k - 1}, got {test_fold}")
    val_fold = plan.validation_fold(test_fold)
    train, val, test = [], [], []
    for sample_id in plan.order:
        fold = plan.assignments[sample_id]
        if fold == test_fold:
            test.append(sample_id)
        elif fold == val_fold:
            val.append(sample_id)
        else:
            train.append(sample_id)
    return Split(train, val, test)


def export_fold_plan(path: Union[str, Path], plan: FoldPlan) -> None:
    """Publishable id -> fold table."""
    frame = pd.DataFrame({
        'id': list(plan.order),
        'label': [plan.labels[i] for i in plan.order],
        'fold': [plan.assignments[i] for i in plan.order],
    })
    atomic_write_text(path, frame.to_csv(sep='\t', index=False))


# ── Synthetic cohort ─────────────────────────────────────────────────────────

# Head semi-axes and edge softness, in normalised [-1, 1] coordinates
_HEAD_AXES = (0.85, 0.8, 0.75)
_HEAD_EDGE = 0.04
_CAVITY_EDGE = 0.03


@dataclass(frozen=True)
class SyntheticSpec:
    dims: Tuple[int, int, int] = (32, 32, 25)
    n_per_class: Tuple[int, int] = (70, 70)
    cavity_radius: float = 0.25
    delta: float = 0.4
    noise_sigma: float = 0.1
    intensity_jitter: float = 0.05
    normalize: bool = True
    seed: int = 7

    def __post_init__(self):
        object.__setattr__(self, 'dims', tuple(int(n) for n in self.dims))
        object.__setattr__(self, 'n_per_class', tuple(int(n) for n in self.n_per_class))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError(f"dims must be three positive ints, got {self.dims}")
        if len(self.n_per_class) != 2 or min(self.n_per_class) < 0:
            raise ValueError(f"n_per_class must be two counts >= 0, got {self.n_per_class}")
        if self.noise_sigma < 0 or self.intensity_jitter < 0:
            raise ValueError("noise_sigma and intensity_jitter must be >= 0")
        if not 0 < self.cavity_radius < 1 or self.delta < 0:
            raise ValueError("cavity_radius must be in (0, 1) and delta >= 0")

    @classmethod
    def from_config(cls, section: Dict, **changes) -> 'SyntheticSpec':
        known = {k: section[k] for k in cls.__dataclass_fields__ if k in section}
        known.update(changes)
        return cls(**known)

    def to_dict(self) -> Dict:
        return asdict(self)


def _grid(dims: Sequence[int]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    axes = [(np.arange(n) - (n - 1) / 2.0) / (n / 2.0) for n in dims]
    return np.meshgrid(*axes, indexing='ij')


def cavity_region_mask(dims: Sequence[int], cavity_radius: float, delta: float) -> np.ndarray:
    """Shell between the CN cavity radius and the enlarged AD radius."""
    ux, uy, uz = _grid(dims)
    r = np.sqrt(ux ** 2 + uy ** 2 + uz ** 2)
    return (r >= cavity_radius) & (r < cavity_radius * (1.0 + delta))


def _synthetic_volume(spec: SyntheticSpec, label: int, rng: SeededRng) -> np.ndarray:
    ux, uy, uz = _grid(spec.dims)
    scale = rng.uniform(0.95, 1.05)
    ax, ay, az = (a * scale for a in _HEAD_AXES)
    head_r = np.sqrt((ux / ax) ** 2 + (uy / ay) ** 2 + (uz / az) ** 2)
    tissue = expit((1.0 - head_r) / _HEAD_EDGE)

    radius = spec.cavity_radius * (1.0 + spec.delta if label == AD else 1.0)
    cavity = expit((radius - np.sqrt(ux ** 2 + uy ** 2 + uz ** 2)) / _CAVITY_EDGE)

    gain = 1.0 + spec.intensity_jitter * rng.normal()
    data = tissue * (1.0 - cavity) * gain
    head = head_r < 1.0
    if spec.noise_sigma > 0:
        data = data + spec.noise_sigma * rng.normal(size=data.shape) * head
    data[~head] = 0.0
    return data


def generate_synthetic(spec: SyntheticSpec) -> List[Tuple[Volume3D, int]]:
    """
    Class 0: smooth ellipsoidal head with a central cavity. Class 1: same,
    with the cavity enlarged by *delta*. Noise is added inside the head only
    so the background stays exactly 0. Deterministic in spec.seed.
    """
    samples: List[Tuple[Volume3D, int]] = []
    for label, count in enumerate(spec.n_per_class):
        for i in range(count):
            rng = SeededRng(mix_seed(spec.seed, label, i))
            vol = Volume3D(_synthetic_volume(spec, label, rng), source_id=f"syn-{CLASS_NAMES[label]}-{i:04d}",
                           steps=('synthetic',))
            if spec.normalize:
                vol = normalize_intensity(vol)
            samples.append((vol, label))
    logger.info("Generated %d synthetic volumes %s (sigma=%.3f)", len(samples), spec.dims, spec.noise_sigma)
    return samples


def oracle_rule_accuracy(samples: Sequence[Tuple[Volume3D, int]], cavity_radius: float, delta: float) -> float:
    """
    Accuracy of the threshold rule "cavity-shell mean below the midpoint of
    the class means means AD".
    """
    if not samples:
        raise ValueError("oracle_rule_accuracy needs samples")
    mask = cavity_region_mask(samples[0][0].dims, cavity_radius, delta)
    means = np.array([vol.data[mask].mean() for vol, _ in samples])
    labels = np.array([label for _, label in samples])
    if len(set(labels.tolist())) < 2:
        return 1.0
    threshold = (means[labels == CN].mean() + means[labels == AD].mean()) / 2.0
    predicted = np.where(means < threshold, AD, CN)
    return float(np.mean(predicted == labels))


def write_synthetic_dataset(spec: SyntheticSpec, out_dir: Union[str, Path],
                            samples: Optional[Sequence[Tuple[Volume3D, int]]] = None) -> Path:
    """Write volumes under <out_dir>/volumes and a manifest; returns the manifest path."""
    out_dir = ensure_dir(out_dir)
    samples = generate_synthetic(spec) if samples is None else samples
    records = []
    for vol, label in samples:
        target = out_dir / 'volumes' / f"{vol.source_id}.dav"
        write_volume(target, vol)
        records.append(SampleRecord(vol.source_id, target, label, f"synthetic-{'x'.join(map(str, spec.dims))}"))
    manifest = out_dir / 'manifest.tsv'
    write_manifest(manifest, records)
    logger.info("Wrote synthetic dataset (%d volumes) to %s", len(records), out_dir)
    return manifest
