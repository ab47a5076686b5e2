"""Mobile/cloud pipeline-shifting cost model.

A placement is a cut in [0, 4]: stages with index < cut run on the phones,
the rest in the cloud. Cost of a placement is mobile compute time plus cloud
compute time plus uplink transfer time.
"""
import csv
import io
import json
from dataclasses import dataclass, asdict, field

from .imaging import DESC_DIM

STAGES = ("extract", "vocab", "vectorize", "imgcluster")
N_CUTS = len(STAGES) + 1


class EmptySweep(ValueError):
    pass


@dataclass
class WorkloadProfile:
    work: dict  # stage -> operations
    raw_images_bytes: float
    descriptors_bytes: float
    vocabulary_bytes: float
    bow_bytes: float
    representative_image_bytes: float
    image_count: int

    def __post_init__(self):
        missing = set(STAGES) - set(self.work)
        if missing:
            raise ValueError(f"work missing stages {sorted(missing)}")
        sizes = (self.raw_images_bytes, self.descriptors_bytes, self.vocabulary_bytes,
                 self.bow_bytes, self.representative_image_bytes, self.image_count)
        if any(v < 0 for v in sizes) or any(self.work[s] < 0 for s in STAGES):
            raise ValueError("workload sizes must be non-negative")

    def cut_bytes(self, cut):
        return (self.raw_images_bytes,
                self.descriptors_bytes,
                self.descriptors_bytes + self.vocabulary_bytes,
                self.bow_bytes,
                0.0)[cut]


@dataclass
class RateModel:
    mobile_rate: float
    cloud_rate: float
    bandwidth: float
    uplink_latency: float = 0.0

    def __post_init__(self):
        if min(self.mobile_rate, self.cloud_rate, self.bandwidth) <= 0:
            raise ValueError("rates and bandwidth must be positive")
        if self.uplink_latency < 0:
            raise ValueError("uplink_latency must be non-negative")


@dataclass(frozen=True)
class PlacementConfig:
    cut: int
    f: float = 0.0

    def __post_init__(self):
        if self.cut not in range(N_CUTS):
            raise ValueError("cut must be one of 0..4")
        if not 0.0 <= self.f <= 1.0:
            raise ValueError("f must lie in [0, 1]")

    @property
    def vector(self):
        """Per-stage placement, 0 = mobile, 1 = cloud."""
        return [0 if s < self.cut else 1 for s in range(len(STAGES))]


@dataclass
class CostBreakdown:
    t_mobile: float
    t_cloud: float
    t_tx: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.t_mobile + self.t_cloud + self.t_tx


def evaluate_config(w: WorkloadProfile, p: PlacementConfig, r: RateModel) -> CostBreakdown:
    t_mobile = sum(w.work[s] for s in STAGES[:p.cut]) / r.mobile_rate
    t_cloud = sum(w.work[s] for s in STAGES[p.cut:]) / r.cloud_rate
    reps = p.f * w.image_count * w.representative_image_bytes
    t_tx = r.uplink_latency + w.cut_bytes(p.cut) / r.bandwidth + reps / r.bandwidth
    return CostBreakdown(t_mobile, t_cloud, t_tx)


@dataclass
class SweepRow:
    bandwidth: float
    totals: list
    argmin_cut: int


def sweep(w: WorkloadProfile, rates: RateModel, bandwidths, f=0.0):
    """Totals of all five cuts per bandwidth; ties go to the larger cut."""
    bandwidths = list(bandwidths)
    if not bandwidths:
        raise EmptySweep("no bandwidths to sweep")
    if any(b <= 0 for b in bandwidths) or bandwidths != sorted(bandwidths):
        raise ValueError("bandwidths must be positive and ascending")
    rows = []
    for b in bandwidths:
        r = RateModel(rates.mobile_rate, rates.cloud_rate, b, rates.uplink_latency)
        totals = [evaluate_config(w, PlacementConfig(c, f), r).total for c in range(N_CUTS)]
        best = min(range(N_CUTS), key=lambda c: (totals[c], -c))
        rows.append(SweepRow(b, totals, best))
    return rows


def log_grid(lo, hi, n):
    if n == 1:
        return [float(lo)]
    ratio = (hi / lo) ** (1.0 / (n - 1))
    return [float(lo * ratio ** i) for i in range(n)]


CSV_HEADER = ["bandwidth_bps", "cut0", "cut1", "cut2", "cut3", "cut4", "argmin_cut"]


def sweep_csv(rows) -> str:
    buf = io.StringIO()
    out = csv.writer(buf, lineterminator="\n")
    out.writerow(CSV_HEADER)
    for row in rows:
        out.writerow([repr(row.bandwidth)] + [repr(t) for t in row.totals] + [row.argmin_cut])
    return buf.getvalue()


def read_sweep_csv(text):
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header != CSV_HEADER:
        raise ValueError(f"unexpected header {header}")
    return [SweepRow(float(r[0]), [float(x) for x in r[1:6]], int(r[6])) for r in reader]


# ---------------------------------------------------------------- config

def load_config(path):
    """``(WorkloadProfile, RateModel)`` from a JSON file."""
    with open(path) as fh:
        doc = json.load(fh)
    return WorkloadProfile(**doc["workload"]), RateModel(**doc["rates"])


def dump_config(w: WorkloadProfile, r: RateModel, path):
    with open(path, "w") as fh:
        json.dump({"workload": asdict(w), "rates": asdict(r)}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def profile_from_pipeline(result, manifest, representative_image_bytes=None):
    """Workload measured from a finished pipeline run.

    Work is the stage evaluation counts; payloads follow the on-disk
    formats (PGM bytes, descriptor file records, f32 vocabulary, u32 BoW).
    """
    evals = {s.name: s.evaluations for s in result.report.stages}
    raw = sum(r.path.stat().st_size for r in manifest.records)
    n_desc = sum(len(d) for d in result.descriptors)
    k_vocab = len(result.vocabulary)
    n_img = len(manifest.records)
    return WorkloadProfile(
        work={
            "extract": evals["extract"],
            "vocab": evals["vocabulary"] + evals.get("metadata_seed", 0),
            "vectorize": evals["vectorize"],
            "imgcluster": evals["image_cluster"],
        },
        raw_images_bytes=raw,
        descriptors_bytes=16 + n_desc * (8 + 4 * DESC_DIM),
        vocabulary_bytes=4 * k_vocab * DESC_DIM,
        bow_bytes=n_img * 4 * k_vocab,
        representative_image_bytes=(representative_image_bytes
                                    if representative_image_bytes is not None
                                    else raw / max(n_img, 1)),
        image_count=n_img,
    )
