"""Four-stage image clustering pipeline.

extract descriptors -> vocabulary K-Means -> bag-of-words -> image K-Means,
then pick the image nearest each image-cluster centroid.
"""
import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import clustering as cl
from .clustering import StopRule
from .imaging import DESC_DIM, ExtractorParams, extract_descriptors, read_pgm


class PipelineError(Exception):
    pass


class ManifestError(PipelineError):
    pass


class SeedFileMissing(PipelineError):
    pass


class TooFewImages(PipelineError):
    pass


class NoDescriptors(PipelineError):
    pass


@dataclass(frozen=True)
class Metadata:
    lat: float
    lon: float
    orientation: float

    def __post_init__(self):
        vals = (self.lat, self.lon, self.orientation)
        if not all(math.isfinite(v) for v in vals):
            raise ManifestError("metadata must be finite")
        if not (-90 <= self.lat <= 90 and -180 <= self.lon <= 180 and 0 <= self.orientation < 360):
            raise ManifestError(f"metadata out of range: {vals}")


@dataclass(frozen=True)
class ImageRecord:
    image_id: int
    device_id: int
    path: Path
    meta: Metadata


@dataclass
class Manifest:
    records: list
    compute_rates: dict = field(default_factory=dict)
    links: list = field(default_factory=list)
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def device_ids(self):
        return sorted({r.device_id for r in self.records} | set(self.compute_rates))


def parse_manifest(doc, base_dir="."):
    base = Path(base_dir)
    try:
        records, rates, seen = [], {}, set()
        for dev in doc["devices"]:
            did = int(dev["device_id"])
            if "compute_rate" in dev:
                rates[did] = float(dev["compute_rate"])
            for im in dev["images"]:
                iid = int(im["image_id"])
                if iid in seen:
                    raise ManifestError(f"duplicate image_id {iid}")
                seen.add(iid)
                meta = Metadata(float(im["lat"]), float(im["lon"]), float(im["orientation"]))
                records.append(ImageRecord(iid, did, base / im["path"], meta))
        links = list(doc.get("links", []))
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestError(f"malformed manifest: {e!r}") from None
    return Manifest(records, rates, links, doc)


def load_manifest(path):
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from None
    return parse_manifest(doc, path.parent)


def dump_manifest(m: Manifest, base_dir="."):
    """Manifest back to its JSON document (paths relative to ``base_dir``)."""
    devices = {}
    for did in m.device_ids:
        dev = {"device_id": did}
        if did in m.compute_rates:
            dev["compute_rate"] = m.compute_rates[did]
        dev["images"] = []
        devices[did] = dev
    for r in m.records:
        devices[r.device_id]["images"].append({
            "image_id": r.image_id,
            "path": Path(r.path).relative_to(base_dir).as_posix() if base_dir else str(r.path),
            "lat": r.meta.lat, "lon": r.meta.lon, "orientation": r.meta.orientation,
        })
    doc = {"devices": list(devices.values())}
    if m.links:
        doc["links"] = m.links
    return doc


@dataclass
class PipelineConfig:
    k_vocab: int = 64
    k_img: int = 8
    extractor: ExtractorParams = field(default_factory=ExtractorParams)
    vocab_stop: StopRule = field(default_factory=StopRule.no_change)
    img_stop: StopRule = field(default_factory=StopRule.no_change)
    seeding: str = "random"  # random | metadata | file
    seed_file: str | None = None
    rng_seed: int = 0
    approx: bool = False

    def __post_init__(self):
        if self.seeding not in ("random", "metadata", "file"):
            raise ValueError(f"unknown seeding {self.seeding!r}")
        if self.seeding == "file" and not self.seed_file:
            raise ValueError("file seeding needs seed_file")
        if self.approx and self.k_vocab < 2:
            raise ValueError("approximate K-Means needs k_vocab >= 2")

    def to_dict(self):
        return {
            "k_vocab": self.k_vocab, "k_img": self.k_img,
            "extractor": asdict(self.extractor),
            "vocab_stop": self.vocab_stop.to_dict(), "img_stop": self.img_stop.to_dict(),
            "seeding": self.seeding, "seed_file": self.seed_file,
            "rng_seed": self.rng_seed, "approx": self.approx,
        }


@dataclass
class BowVector:
    counts: np.ndarray
    image_id: int


# ------------------------------------------------------------- stages

def pool(per_image):
    """Stack descriptor lists (one per image, in order) into an (n, 128) array."""
    rows = [d.values for descs in per_image for d in descs]
    if not rows:
        return np.empty((0, DESC_DIM))
    return np.vstack(rows).astype(np.float64)


def metadata_points(records):
    lat = np.array([r.meta.lat for r in records])
    lon = np.array([r.meta.lon for r in records])
    th = np.radians([r.meta.orientation for r in records])

    def standardize(v):
        sd = v.std()
        return (v - v.mean()) / sd if sd > 0 else v - v.mean()

    return np.column_stack([standardize(lat), standardize(lon), np.cos(th), np.sin(th)])


def metadata_seeds(records, per_image_descs, k_vocab):
    """Vocabulary seeds from clusters of capture metadata.

    Images are clustered on (lat, lon, cos heading, sin heading); each
    metadata cluster seeds one word at the mean of its images' descriptors.
    Shortfalls are filled by Forgy draws from the pooled descriptors.
    Returns ``(seeds, metadata_run)``.
    """
    if k_vocab < 1:
        raise ValueError("k_vocab must be >= 1")
    pooled = pool(per_image_descs)
    if len(pooled) == 0:
        raise NoDescriptors("no descriptors to seed from")
    X = metadata_points(records)
    k_meta = min(k_vocab, len(cl.unique_rows(X)))
    run = cl.lloyd(X, cl.seed_random(X, k_meta, 0), StopRule.no_change())

    seeds = []
    for j in range(k_meta):
        members = [per_image_descs[i] for i in np.flatnonzero(run.labels == j)]
        block = pool(members)
        if len(block):
            seeds.append(block.mean(axis=0))

    short = k_vocab - len(seeds)
    if short > 0:
        uniq = cl.unique_rows(pooled)
        taken = {s.tobytes() for s in seeds}
        order = cl.Xoshiro256(0).sample_indices(len(uniq), len(uniq))
        for i in order:
            if short == 0:
                break
            if uniq[i].tobytes() not in taken:
                seeds.append(uniq[i].copy())
                short -= 1
        if short:
            raise cl.NotEnoughDistinctPoints(f"cannot fill {k_vocab} vocabulary seeds")
    return np.vstack(seeds), run


def build_vocabulary(all_descs, cfg: PipelineConfig, seeds=None):
    """Stage 2. ``seeds`` overrides cfg seeding (used for metadata seeds)."""
    pts = cl.as_points(all_descs)
    if seeds is None:
        if cfg.seeding == "file":
            if not Path(cfg.seed_file).is_file():
                raise SeedFileMissing(cfg.seed_file)
            seeds = cl.read_seed_file(cfg.seed_file)
        elif cfg.seeding == "random":
            seeds = cl.seed_random(pts, cfg.k_vocab, cfg.rng_seed)
        else:
            raise PipelineError("metadata seeding needs precomputed seeds")
    run = (cl.approx_lloyd if cfg.approx else cl.lloyd)(pts, seeds, cfg.vocab_stop)
    return run.centroids, run


def vectorize(descs_of_image, vocab, image_id=0):
    vocab = cl.as_points(vocab, "vocabulary")
    k = vocab.shape[0]
    if not descs_of_image:
        return BowVector(np.zeros(k, dtype=np.int64), image_id)
    pts = np.vstack([getattr(d, "values", d) for d in descs_of_image]).astype(np.float64)
    labels, _ = cl.assign_step(pts, vocab)
    return BowVector(np.bincount(labels, minlength=k).astype(np.int64), image_id)


def cluster_images(bows, cfg: PipelineConfig, seeds=None):
    if len(bows) < cfg.k_img:
        raise TooFewImages(f"{len(bows)} images for k_img={cfg.k_img}")
    X = np.vstack([b.counts for b in bows]).astype(np.float64)
    if seeds is None:
        seeds = cl.seed_random(X, cfg.k_img, cfg.rng_seed)
    return cl.lloyd(X, seeds, cfg.img_stop)


def select_representatives(run, bows):
    """(cluster, image_id) of the member nearest each non-empty cluster's centroid."""
    X = np.vstack([b.counts for b in bows]).astype(np.float64)
    ids = np.array([b.image_id for b in bows])
    out = []
    for j, c in enumerate(run.centroids):
        members = np.flatnonzero(run.labels == j)
        if len(members) == 0:
            continue
        d = np.sqrt(((X[members] - c) ** 2).sum(axis=1))
        best = members[d == d.min()]
        out.append((j, int(ids[best].min())))
    return out


# --------------------------------------------------------- orchestration

@dataclass
class StageTiming:
    name: str
    wall_ms: float
    evaluations: int


@dataclass
class PipelineReport:
    stages: list
    vocabulary_run: dict
    image_run: dict
    representatives: list
    empty_clusters: list
    image_labels: dict
    descriptor_counts: dict
    config: dict
    overlap_vs_baseline: float | None = None

    def to_dict(self, wall_times=True):
        return {
            "rng_seed": self.config["rng_seed"],
            "config": self.config,
            "stages": [
                {"name": s.name, "wall_ms": s.wall_ms if wall_times else None,
                 "evaluations": s.evaluations}
                for s in self.stages
            ],
            "vocabulary_run": self.vocabulary_run,
            "image_run": self.image_run,
            "representatives": [{"cluster": c, "image_id": i} for c, i in self.representatives],
            "empty_clusters": self.empty_clusters,
            "image_labels": {str(k): v for k, v in self.image_labels.items()},
            "descriptor_counts": {str(k): v for k, v in self.descriptor_counts.items()},
            "overlap_vs_baseline": self.overlap_vs_baseline,
        }

    def to_json(self, wall_times=True):
        return json.dumps(self.to_dict(wall_times), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(
            stages=[StageTiming(s["name"], s["wall_ms"], s["evaluations"]) for s in d["stages"]],
            vocabulary_run=d["vocabulary_run"], image_run=d["image_run"],
            representatives=[(r["cluster"], r["image_id"]) for r in d["representatives"]],
            empty_clusters=d["empty_clusters"],
            image_labels={int(k): v for k, v in d["image_labels"].items()},
            descriptor_counts={int(k): v for k, v in d["descriptor_counts"].items()},
            config=d["config"], overlap_vs_baseline=d["overlap_vs_baseline"],
        )


@dataclass
class PipelineResult:
    """Report plus the in-memory artifacts behind it."""
    report: PipelineReport
    descriptors: list
    vocabulary: np.ndarray
    vocab_run: cl.ClusterRun
    bows: list
    image_run: cl.ClusterRun


def run_pipeline(manifest, cfg: PipelineConfig, baseline_labels=None):
    if not isinstance(manifest, Manifest):
        manifest = load_manifest(manifest)
    records = manifest.records
    if not records:
        raise ManifestError("manifest lists no images")
    stages = []

    def timed(name, fn, evals):
        t0 = time.perf_counter()
        out = fn()
        stages.append(StageTiming(name, (time.perf_counter() - t0) * 1e3, int(evals(out))))
        return out

    def extract():
        per_image = []
        for r in records:
            try:
                img = read_pgm(r.path)
            except OSError as e:
                raise ManifestError(f"cannot read image {r.path}: {e}") from None
            per_image.append((extract_descriptors(img, cfg.extractor, r.image_id),
                              _patch_pixels(img, cfg.extractor)))
        return per_image

    extracted = timed("extract", extract, lambda out: sum(px for _, px in out))
    per_image = [descs for descs, _ in extracted]
    pooled = pool(per_image)
    if len(pooled) == 0:
        raise NoDescriptors("no descriptors extracted from any image")

    seeds = None
    if cfg.seeding == "metadata":
        seeds, _ = timed("metadata_seed", lambda: metadata_seeds(records, per_image, cfg.k_vocab),
                         lambda out: out[1].evaluations)
    vocab, vrun = timed("vocabulary", lambda: build_vocabulary(pooled, cfg, seeds),
                        lambda out: out[1].evaluations)
    bows = timed("vectorize",
                 lambda: [vectorize(d, vocab, r.image_id) for d, r in zip(per_image, records)],
                 lambda out: len(pooled) * len(vocab))
    irun = timed("image_cluster", lambda: cluster_images(bows, cfg), lambda run: run.evaluations)

    reps = select_representatives(irun, bows)
    present = {c for c, _ in reps}
    labels = {r.image_id: int(l) for r, l in zip(records, irun.labels)}
    report = PipelineReport(
        stages=stages,
        vocabulary_run=vrun.summary(),
        image_run=dict(irun.summary(), labels=[int(x) for x in irun.labels]),
        representatives=reps,
        empty_clusters=[j for j in range(cfg.k_img) if j not in present],
        image_labels=labels,
        descriptor_counts={r.image_id: len(d) for r, d in zip(records, per_image)},
        config=cfg.to_dict(),
    )
    if baseline_labels is not None:
        report.overlap_vs_baseline = overlap_by_id(labels, baseline_labels, cfg.k_img)
    return PipelineResult(report, per_image, vocab, vrun, bows, irun)


def _patch_pixels(img, params):
    """Pixels whose gradient the extractor computes (stage-1 work unit)."""
    p, st = params.patch_size, params.stride
    if img.width < p or img.height < p:
        return 0
    return ((img.width - p) // st + 1) * ((img.height - p) // st + 1) * p * p


def overlap_by_id(a: dict, b: dict, k=None):
    """cluster_overlap of two {image_id: label} maps over the same images."""
    if set(a) != set(b):
        raise cl.LengthMismatch("labelings cover different images")
    ids = sorted(a)
    return cl.cluster_overlap([a[i] for i in ids], [b[i] for i in ids], k)
