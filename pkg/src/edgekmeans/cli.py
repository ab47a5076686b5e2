"""Command-line entry point.

Exit status: 0 success, 1 usage error, 2 data or format error.
"""
import argparse
import json
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import clustering as cl
from . import distsim, placement
from .clustering import StopRule
from .datasets import PROFILES, write_dataset
from .imaging import ExtractorParams, ImagingError, extract_descriptors, read_pgm
from .pipeline import (Manifest, PipelineConfig, PipelineError, load_manifest, overlap_by_id,
                       pool, run_pipeline)

EXIT_USAGE = 1
EXIT_DATA = 2
DATA_ERRORS = (PipelineError, ImagingError, cl.ClusteringError, distsim.SimError,
               ValueError, OSError, KeyError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_stop(text):
    """``no-change``, ``fixed:N`` or ``epsilon:E`` (cap via ``:cap`` suffix, e.g. ``epsilon:1e-4:50``)."""
    parts = text.split(":")
    try:
        if parts[0] == "no-change":
            return StopRule.no_change(int(parts[1]) if len(parts) > 1 else cl.DEFAULT_CAP)
        if parts[0] == "fixed":
            return StopRule.fixed(int(parts[1]))
        if parts[0] == "epsilon":
            cap = int(parts[2]) if len(parts) > 2 else cl.DEFAULT_CAP
            return StopRule.eps(float(parts[1]), cap)
    except (IndexError, ValueError):
        pass
    raise argparse.ArgumentTypeError(f"bad stop rule {text!r}")


def parse_seeding(text):
    if text in ("random", "metadata"):
        return text, None
    if text.startswith("file:") and len(text) > 5:
        return "file", text[5:]
    raise argparse.ArgumentTypeError(f"bad seeding {text!r}")


def _write(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _dump(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _pipeline_config(args, **over):
    seeding, seed_file = args.seeding
    kw = dict(k_vocab=args.k_vocab, k_img=args.k_img,
              extractor=ExtractorParams(args.patch_size, args.stride, args.energy_threshold),
              vocab_stop=args.vocab_stop, img_stop=args.img_stop,
              seeding=seeding, seed_file=seed_file, rng_seed=args.rng_seed,
              approx=getattr(args, "approx", False))
    kw.update(over)
    return PipelineConfig(**kw)


def read_labels(path):
    """Labels from a pipeline report, a JSON list, or one integer per line."""
    text = Path(path).read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError:
        return [int(t) for t in text.split()]
    if isinstance(doc, dict):
        if "image_labels" in doc:
            return {int(k): int(v) for k, v in doc["image_labels"].items()}
        if "labels" in doc:
            return [int(v) for v in doc["labels"]]
        raise ValueError(f"{path}: no labels found")
    return [int(v) for v in doc]


# -------------------------------------------------------------- commands

def cmd_gen_dataset(args):
    path = write_dataset(args.profile, args.n_images, args.out, args.rng_seed)
    print(path)


def cmd_pipeline(args):
    cfg = _pipeline_config(args)
    baseline = None
    if args.baseline:
        baseline = read_labels(args.baseline)
        if not isinstance(baseline, dict):
            raise ValueError("--baseline must be a pipeline report")
    result = run_pipeline(load_manifest(args.manifest), cfg, baseline)
    out = Path(args.out)
    _write(out / "report.json", result.report.to_json())
    cl.write_seed_file(result.vocabulary, out / "vocabulary.txt")
    if result.report.overlap_vs_baseline is not None:
        print(f"overlap_vs_baseline {result.report.overlap_vs_baseline:.4f}")
    print(out / "report.json")


def _fleet(manifest: Manifest, per_image):
    rates = manifest.compute_rates
    ids_by_dev, lo = {}, 0
    for rec, descs in zip(manifest.records, per_image):
        ids_by_dev.setdefault(rec.device_id, []).extend(range(lo, lo + len(descs)))
        lo += len(descs)
    for did in manifest.device_ids:
        ids_by_dev.setdefault(did, [])
    return [distsim.DeviceSpec(did, rates.get(did, 1.0e6), np.array(ids, dtype=np.int64))
            for did, ids in sorted(ids_by_dev.items())]


def cmd_simulate(args):
    manifest = load_manifest(args.manifest)
    params = ExtractorParams(args.patch_size, args.stride, args.energy_threshold)
    per_image = [extract_descriptors(read_pgm(r.path), params, r.image_id) for r in manifest.records]
    pts = pool(per_image)
    seeding, seed_file = args.seeding
    if seeding == "random":
        seeds = cl.seed_random(pts, args.k_vocab, args.rng_seed)
    elif seeding == "file":
        seeds = cl.read_seed_file(seed_file)
    else:
        raise UsageError("simulate supports random or file seeding")
    fleet = _fleet(manifest, per_image)
    if args.bandwidth is not None:
        net = distsim.NetworkSpec.uniform([d.device_id for d in fleet], args.bandwidth, args.latency)
    else:
        net = distsim.NetworkSpec.from_json(manifest.links)
    rep = distsim.simulate(pts, seeds, args.vocab_stop, fleet, net, args.master)
    doc = rep.to_dict()
    doc.update(rng_seed=args.rng_seed, master=args.master,
               network=net.to_json(),
               fleet=[{"device_id": d.device_id, "compute_rate": d.compute_rate,
                       "points": len(d.local_point_ids)} for d in fleet])
    out = _write(Path(args.out) / "sim_report.json", _dump(doc))
    print(f"clock {rep.simulated_clock:.6f}s  bytes {rep.bytes_transferred}  iterations {rep.iterations}")
    print(out)


def default_profile_path():
    return resources.files("edgekmeans") / "data" / "default_profile.json"


def cmd_placement(args):
    out = Path(args.out)
    if args.measure:
        if not args.manifest:
            raise UsageError("--measure needs --manifest")
        manifest = load_manifest(args.manifest)
        result = run_pipeline(manifest, _pipeline_config(args))
        work = placement.profile_from_pipeline(result, manifest)
        _, rates = placement.load_config(args.config or default_profile_path())
    else:
        work, rates = placement.load_config(args.config or default_profile_path())
    if args.mobile_rate:
        rates.mobile_rate = args.mobile_rate
    if args.cloud_rate:
        rates.cloud_rate = args.cloud_rate
    if args.uplink_latency is not None:
        rates.uplink_latency = args.uplink_latency
    grid = placement.log_grid(args.bw_min, args.bw_max, args.points)
    rows = placement.sweep(work, rates, grid, args.f)
    out.mkdir(parents=True, exist_ok=True)
    placement.dump_config(work, rates, out / "profile.json")
    path = _write(out / "sweep.csv", placement.sweep_csv(rows))
    print(path)


def cmd_overlap(args):
    a, b = read_labels(args.a), read_labels(args.b)
    if isinstance(a, dict) != isinstance(b, dict):
        raise ValueError("cannot compare a report with a plain label list")
    value = overlap_by_id(a, b, args.k) if isinstance(a, dict) else cl.cluster_overlap(a, b, args.k)
    print(f"{value:.6f}")
    if args.out:
        _write(Path(args.out) / "overlap.json", _dump({"a": str(args.a), "b": str(args.b), "overlap": value}))


# ---------------------------------------------------------------- parser

def _add_pipeline_flags(p):
    p.add_argument("--seeding", type=parse_seeding, default=("random", None),
                   help="random | metadata | file:<seed file>")
    p.add_argument("--k-vocab", type=int, default=64)
    p.add_argument("--k-img", type=int, default=8)
    p.add_argument("--vocab-stop", type=parse_stop, default=StopRule.no_change(),
                   help="no-change | fixed:N | epsilon:E (default no-change)")
    p.add_argument("--img-stop", type=parse_stop, default=StopRule.no_change())
    p.add_argument("--patch-size", type=int, default=16)
    p.add_argument("--stride", type=int, default=16)
    p.add_argument("--energy-threshold", type=float, default=1.0)
    p.add_argument("--rng-seed", type=int, default=0)


def build_parser():
    ap = _Parser(prog="edgekmeans", description="Edge image-clustering pipeline experiments")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-dataset", help="write a synthetic PGM photo set and manifest")
    p.add_argument("--profile", choices=PROFILES, required=True)
    p.add_argument("--n-images", type=int, default=30)
    p.add_argument("--rng-seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("pipeline", help="run the four-stage pipeline")
    p.add_argument("--manifest", required=True)
    p.add_argument("--approx", action="store_true", help="approximate K-Means for the vocabulary")
    p.add_argument("--baseline", help="report to compute overlap_vs_baseline against")
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("simulate", help="simulate distributed vocabulary K-Means over the fleet")
    p.add_argument("--manifest", required=True)
    p.add_argument("--master", type=int, default=0)
    p.add_argument("--bandwidth", type=float, help="uniform link bandwidth (bytes/s), overrides manifest links")
    p.add_argument("--latency", type=float, default=0.0)
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("placement", help="sweep the mobile/cloud placement cost model")
    p.add_argument("--config", help="workload/rate JSON (default: shipped profile)")
    p.add_argument("--measure", action="store_true", help="measure the workload from a pipeline run")
    p.add_argument("--manifest")
    p.add_argument("--f", type=float, default=0.0)
    p.add_argument("--bw-min", type=float, default=1e4)
    p.add_argument("--bw-max", type=float, default=1e9)
    p.add_argument("--points", type=int, default=26)
    p.add_argument("--mobile-rate", type=float)
    p.add_argument("--cloud-rate", type=float)
    p.add_argument("--uplink-latency", type=float)
    p.add_argument("--out", required=True)
    _add_pipeline_flags(p)
    p.set_defaults(func=cmd_placement)

    p = sub.add_parser("overlap", help="cluster overlap of two label files")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--k", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_overlap)
    return ap


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except UsageError as e:
        print(f"edgekmeans: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as e:
        print(f"edgekmeans: error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
