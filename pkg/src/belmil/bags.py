"""Bag data model, the binary bag format, synthetic bags and split protocol."""
from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"MILB"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIII")

# Norm of each class signature in the synthetic generator.
SIGNATURE_NORM = 3.0


class BagFormatError(ValueError):
    """Raised for malformed bag files or manifests."""


class SplitError(ValueError):
    """Raised when a manifest cannot be split as requested."""


@dataclass
class FeatureBag:
    bag_id: str
    patient_id: str
    label: int
    features: np.ndarray

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got shape {self.features.shape}")
        n, h = self.features.shape
        if n < 1 or h < 1:
            raise ValueError(f"bag {self.bag_id!r} is empty (shape {self.features.shape})")
        if self.label < 0:
            raise ValueError(f"negative label {self.label}")

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureBag):
            return NotImplemented
        return (
            self.bag_id == other.bag_id
            and self.patient_id == other.patient_id
            and self.label == other.label
            and self.features.shape == other.features.shape
            and self.features.tobytes() == other.features.tobytes()
        )


@dataclass
class ManifestEntry:
    bag_id: str
    patient_id: str
    label: int
    path: str
    n_instances: int | None = None


@dataclass
class DatasetManifest:
    class_count: int
    feature_width: int
    entries: list[ManifestEntry] = field(default_factory=list)
    root: Path | None = None

    def __post_init__(self):
        if self.class_count < 1 or self.feature_width < 1:
            raise BagFormatError("class_count and feature_width must be positive")
        seen = set()
        for e in self.entries:
            if e.bag_id in seen:
                raise BagFormatError(f"duplicate bag_id {e.bag_id!r}")
            seen.add(e.bag_id)
            if not 0 <= e.label < self.class_count:
                raise BagFormatError(f"bag {e.bag_id!r}: label {e.label} outside [0, {self.class_count})")

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.bag_id: e for e in self.entries}

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def load(self, entry: ManifestEntry) -> FeatureBag:
        bag = load_bag(
            self.resolve(entry),
            bag_id=entry.bag_id,
            patient_id=entry.patient_id,
            label=entry.label,
            feature_width=self.feature_width,
        )
        if entry.n_instances is not None and bag.n_instances != entry.n_instances:
            raise BagFormatError(
                f"bag {entry.bag_id!r}: manifest declares N={entry.n_instances}, file has {bag.n_instances}"
            )
        return bag

    def load_all(self, ids=None) -> dict[str, FeatureBag]:
        wanted = None if ids is None else set(ids)
        return {e.bag_id: self.load(e) for e in self.entries if wanted is None or e.bag_id in wanted}

    def to_json(self) -> dict:
        entries = []
        for e in self.entries:
            d = {"bag_id": e.bag_id, "patient_id": e.patient_id, "label": e.label, "path": e.path}
            if e.n_instances is not None:
                d["n_instances"] = e.n_instances
            entries.append(d)
        return {"class_count": self.class_count, "feature_width": self.feature_width, "entries": entries}

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, doc: dict, root=None) -> "DatasetManifest":
        try:
            entries = [
                ManifestEntry(
                    bag_id=str(e["bag_id"]),
                    patient_id=str(e["patient_id"]),
                    label=int(e["label"]),
                    path=str(e["path"]),
                    n_instances=e.get("n_instances"),
                )
                for e in doc["entries"]
            ]
            return cls(int(doc["class_count"]), int(doc["feature_width"]), entries, root)
        except (KeyError, TypeError) as exc:
            raise BagFormatError(f"malformed manifest: {exc}") from exc

    @classmethod
    def load_file(cls, path) -> "DatasetManifest":
        path = Path(path)
        doc = json.loads(path.read_text(encoding="utf-8"))
        return cls.from_json(doc, root=path.parent)


def encode_bag(features: np.ndarray) -> bytes:
    """Serialize a feature matrix to the MILB byte layout."""
    x = np.asarray(features)
    if x.ndim != 2:
        raise ValueError("features must be 2-D")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    n, h = x.shape
    return HEADER.pack(MAGIC, FORMAT_VERSION, n, h) + np.ascontiguousarray(x, dtype="<f4").tobytes()


def decode_bag(buf: bytes) -> np.ndarray:
    if len(buf) < HEADER.size:
        raise BagFormatError(f"file too short for header ({len(buf)} bytes)")
    magic, version, n, h = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BagFormatError(f"bad magic bytes {magic!r}")
    if version != FORMAT_VERSION:
        raise BagFormatError(f"unsupported format version {version}")
    need = n * h * 4
    have = len(buf) - HEADER.size
    if need > have:
        raise BagFormatError(f"truncated payload: header declares {n}x{h} ({need} bytes), file has {have}")
    if need < have:
        raise BagFormatError(f"trailing bytes after payload ({have - need})")
    x = np.frombuffer(buf, dtype="<f4", count=n * h, offset=HEADER.size).reshape(n, h)
    x = x.astype(np.float32)
    if n < 1 or h < 1:
        raise BagFormatError(f"empty bag {n}x{h}")
    if not np.all(np.isfinite(x)):
        raise BagFormatError("payload contains non-finite values")
    return x


def save_bag(bag: FeatureBag, path) -> None:
    data = encode_bag(bag.features)
    Path(path).write_bytes(data)


def load_bag(path, *, bag_id=None, patient_id=None, label=0, feature_width=None) -> FeatureBag:
    """Read a MILB file. Identity fields live in the manifest, so they are passed in."""
    path = Path(path)
    x = decode_bag(path.read_bytes())
    if feature_width is not None and x.shape[1] != feature_width:
        raise BagFormatError(f"{path}: feature width {x.shape[1]} != manifest width {feature_width}")
    return FeatureBag(
        bag_id=path.stem if bag_id is None else bag_id,
        patient_id=(path.stem if patient_id is None else patient_id),
        label=label,
        features=x,
    )


# --- synthetic data -------------------------------------------------------


@dataclass
class SynthConfig:
    class_count: int = 3
    bags_per_class: int = 50
    n_range: tuple[int, int] = (50, 200)
    H: int = 32
    witness_rate: float = 0.2
    noise_scale: float = 0.5
    bags_per_patient: int = 1

    def validate(self):
        if self.class_count < 2:
            raise ValueError("class_count must be at least 2")
        if self.H < self.class_count:
            raise ValueError("H must be >= class_count for orthogonal signatures")
        lo, hi = self.n_range
        if not 1 <= lo <= hi <= 10**5:
            raise ValueError(f"n_range {self.n_range} outside [1, 1e5]")
        if self.bags_per_class < 1 or self.bags_per_patient < 1:
            raise ValueError("bags_per_class and bags_per_patient must be positive")
        if not 0.0 <= self.witness_rate <= 1.0:
            raise ValueError("witness_rate must lie in [0, 1]")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be non-negative")


def class_signatures(class_count: int, width: int, rng: np.random.Generator) -> np.ndarray:
    """Pairwise orthogonal signature rows of norm SIGNATURE_NORM."""
    q, _ = np.linalg.qr(rng.standard_normal((width, width)))
    return SIGNATURE_NORM * q[:, :class_count].T


@dataclass
class SynthDataset:
    manifest: DatasetManifest
    bags: list[FeatureBag]
    signatures: np.ndarray
    witness_masks: dict[str, np.ndarray]


def synth_generate(config: SynthConfig, seed: int) -> SynthDataset:
    """Draw a labelled set of bags with a planted per-class witness signal.

    A ``witness_rate`` fraction of each bag's instances sit around the bag's
    class signature with isotropic noise ``noise_scale``; the rest come from a
    standard normal background shared by every class.
    """
    config.validate()
    rng = np.random.default_rng(seed)
    sig = class_signatures(config.class_count, config.H, rng)
    lo, hi = config.n_range
    bags, entries, masks = [], [], {}
    for c in range(config.class_count):
        for j in range(config.bags_per_class):
            bag_id = f"c{c}_b{j:05d}"
            patient_id = f"c{c}_p{j // config.bags_per_patient:05d}"
            n = int(rng.integers(lo, hi + 1))
            n_wit = int(round(config.witness_rate * n))
            if config.witness_rate > 0:
                n_wit = max(1, n_wit)
            x = rng.standard_normal((n, config.H))
            x[:n_wit] = sig[c] + config.noise_scale * rng.standard_normal((n_wit, config.H))
            order = rng.permutation(n)
            x = x[order]
            is_wit = order < n_wit
            bag = FeatureBag(bag_id, patient_id, c, x.astype(np.float32))
            bags.append(bag)
            masks[bag_id] = is_wit
            entries.append(ManifestEntry(bag_id, patient_id, c, f"bags/{bag_id}.milb", n))
    manifest = DatasetManifest(config.class_count, config.H, entries)
    return SynthDataset(manifest, bags, sig, masks)


def write_dataset(ds: SynthDataset, out_dir) -> Path:
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    for bag, entry in zip(ds.bags, ds.manifest.entries):
        save_bag(bag, out_dir / entry.path)
    ds.manifest.root = out_dir
    path = out_dir / "manifest.json"
    ds.manifest.save(path)
    return path


# --- splits ---------------------------------------------------------------


@dataclass
class SplitAssignment:
    fold_count: int
    test_ids: set[str]
    folds: list[tuple[set[str], set[str]]]
    seed: int | None = None

    def to_json(self) -> dict:
        return {
            "fold_count": self.fold_count,
            "seed": self.seed,
            "test_ids": sorted(self.test_ids),
            "folds": [{"train_ids": sorted(t), "validation_ids": sorted(v)} for t, v in self.folds],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "SplitAssignment":
        return cls(
            fold_count=int(doc["fold_count"]),
            test_ids=set(doc["test_ids"]),
            folds=[(set(f["train_ids"]), set(f["validation_ids"])) for f in doc["folds"]],
            seed=doc.get("seed"),
        )

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load_file(cls, path) -> "SplitAssignment":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _patient_key(seed: int, patient_id: str) -> str:
    return hashlib.sha256(f"{seed}:{patient_id}".encode("utf-8")).hexdigest()


def _apportion(counts: dict[int, int], total: int) -> dict[int, int]:
    """Largest-remainder split of ``total`` across classes in proportion to ``counts``."""
    n = sum(counts.values())
    quotas = {c: total * k / n for c, k in counts.items()}
    alloc = {c: int(np.floor(q)) for c, q in quotas.items()}
    rest = total - sum(alloc.values())
    for c in sorted(quotas, key=lambda c: (-(quotas[c] - alloc[c]), c))[:rest]:
        alloc[c] += 1
    return alloc


def _take(patients: list[tuple[str, int]], target: int) -> tuple[list[str], list[tuple[str, int]]]:
    """Greedily pick patients (in the given order) whose bag counts fit into ``target``."""
    taken, left, got = [], [], 0
    for pid, size in patients:
        if got < target and got + size <= target:
            taken.append(pid)
            got += size
        else:
            left.append((pid, size))
    return taken, left


def make_splits(manifest: DatasetManifest, test_ratio: float, fold_count: int, seed: int) -> SplitAssignment:
    """Patient-disjoint, class-stratified hold-out test set plus k validation folds.

    A patient's class is the most frequent label among its bags. With
    ``fold_count == 1`` the pool is split once, one fifth going to validation.
    """
    if not 0 <= test_ratio < 1:
        raise SplitError("test_ratio must lie in [0, 1)")
    if fold_count < 1:
        raise SplitError("fold_count must be positive")
    entries = sorted(manifest.entries, key=lambda e: e.bag_id)
    bags_of: dict[str, list[str]] = {}
    labels_of: dict[str, list[int]] = {}
    for e in entries:
        bags_of.setdefault(e.patient_id, []).append(e.bag_id)
        labels_of.setdefault(e.patient_id, []).append(e.label)
    by_class: dict[int, list[tuple[str, int]]] = {}
    for pid in sorted(bags_of):
        c = int(np.bincount(labels_of[pid]).argmax())
        by_class.setdefault(c, []).append((pid, len(bags_of[pid])))
    for c in by_class:
        by_class[c].sort(key=lambda t: (_patient_key(seed, t[0]), t[0]))
        if len(by_class[c]) < fold_count + 1:
            raise SplitError(
                f"class {c} has {len(by_class[c])} patients; need at least {fold_count + 1} to stratify"
            )

    class_bags = {c: sum(s for _, s in ps) for c, ps in by_class.items()}
    test_target = _apportion(class_bags, int(round(len(entries) * test_ratio)))
    test_pids, pool = [], {}
    for c, ps in by_class.items():
        taken, pool[c] = _take(ps, test_target[c])
        test_pids += taken

    def ids(pids):
        return {b for p in pids for b in bags_of[p]}

    pool_pids = [p for c in pool for p, _ in pool[c]]
    if fold_count == 1:
        pool_bags = {c: sum(s for _, s in ps) for c, ps in pool.items()}
        val_target = _apportion(pool_bags, int(round(sum(pool_bags.values()) / 5)))
        val_pids = []
        for c, ps in pool.items():
            taken, left = _take(ps, val_target[c])
            if not left:
                raise SplitError(f"class {c} has no patients left for training")
            val_pids += taken
        val = ids(val_pids)
        folds = [(ids(pool_pids) - val, val)]
    else:
        fold_pids: list[list[str]] = [[] for _ in range(fold_count)]
        fold_size = [0] * fold_count
        for c in sorted(pool):
            per_class = [0] * fold_count
            for pid, size in pool[c]:
                f = min(range(fold_count), key=lambda i: (per_class[i], fold_size[i], i))
                fold_pids[f].append(pid)
                per_class[f] += size
                fold_size[f] += size
        all_pool = ids(pool_pids)
        folds = []
        for f in range(fold_count):
            val = ids(fold_pids[f])
            folds.append((all_pool - val, val))
    return SplitAssignment(fold_count, ids(test_pids), folds, seed)


def check_split(manifest: DatasetManifest, split: SplitAssignment) -> None:
    """Raise SplitError if any split boundary is crossed by a bag or a patient."""
    pid = {e.bag_id: e.patient_id for e in manifest.entries}
    test_p = {pid[b] for b in split.test_ids}
    for i, (train, val) in enumerate(split.folds):
        if train & val or (train | val) & split.test_ids:
            raise SplitError(f"fold {i}: bag ids overlap across partitions")
        train_p, val_p = {pid[b] for b in train}, {pid[b] for b in val}
        if train_p & val_p or (train_p | val_p) & test_p:
            raise SplitError(f"fold {i}: a patient appears on both sides of a boundary")
