"""Measure the shipped placement workload from the overlapping dataset.

Work units are the pipeline's own evaluation counts; the rate model uses a
cloud ten times faster than the phone fleet.
"""
from pathlib import Path

from edgekmeans import placement
from edgekmeans.pipeline import PipelineConfig, load_manifest, run_pipeline

ROOT = Path(__file__).resolve().parents[1]
MOBILE_RATE = 1.0e6
CLOUD_RATE = 1.0e7

if __name__ == "__main__":
    manifest = load_manifest(ROOT / "data" / "overlapping" / "manifest.json")
    result = run_pipeline(manifest, PipelineConfig(rng_seed=0))
    work = placement.profile_from_pipeline(result, manifest)
    rates = placement.RateModel(MOBILE_RATE, CLOUD_RATE, bandwidth=1.0e6)
    out = ROOT / "src" / "edgekmeans" / "data" / "default_profile.json"
    placement.dump_config(work, rates, out)
    print(out)
    for row in placement.sweep(work, rates, placement.log_grid(1e4, 1e9, 11)):
        print(f"{row.bandwidth:10.3g}  argmin {row.argmin_cut}  " + "  ".join(f"{t:9.3f}" for t in row.totals))
