"""Synthetic photo sets: PGM images plus a JSON manifest.

Each image belongs to one of ``N_CLASSES`` scene classes. A class owns a
few texture prototypes; a prototype fixes the gradient orientation of each
of the 4x4 cells of a patch, so descriptors of one prototype cluster
together. Metadata (GPS, heading) is tied to the class for the
``geo-correlated`` and ``overlapping`` profiles: two capture sites, four
headings per site.
"""
import json
import math
from pathlib import Path

import numpy as np

from .imaging import GrayImage, write_pgm
from .rng import Xoshiro256

PROFILES = ("blobs", "geo-correlated", "overlapping")
N_CLASSES = 8
N_DEVICES = 3
IMAGE_SIZE = 96
CELL = 4
PATCH = 16

# (lat, lon) of the two capture sites
SITES = [(40.7033, -74.0170), (40.7128, -74.0060)]
HEADINGS = [0.0, 90.0, 180.0, 270.0]
DEVICE_RATES = [2.26e6, 2.7e6, 1.9e6]

# per profile: prototypes per class, base prototypes shared by all classes
# (0 = independent), cells mutated from the base, pixel noise sigma, and the
# probability that a patch is drawn from another class
_KNOBS = {
    "blobs": dict(protos=3, shared=0, mutate=0, noise=4.0, stray=0.0),
    "geo-correlated": dict(protos=3, shared=0, mutate=0, noise=6.0, stray=0.1),
    "overlapping": dict(protos=4, shared=4, mutate=8, noise=35.0, stray=0.25),
}


def _prototypes(rng, knobs):
    n_cells = (PATCH // CELL) ** 2
    protos = []
    if knobs["shared"]:
        bases = [[rng.below(8) for _ in range(n_cells)] for _ in range(knobs["shared"])]
    for c in range(N_CLASSES):
        mine = []
        for p in range(knobs["protos"]):
            if knobs["shared"]:
                cells = list(bases[(c + p) % len(bases)])
                for i in rng.sample_indices(n_cells, knobs["mutate"]):
                    cells[i] = rng.below(8)
            else:
                cells = [rng.below(8) for _ in range(n_cells)]
            mine.append(cells)
        protos.append(mine)
    return protos


def render_patch(cells, rng, noise, slope=18.0):
    """Piecewise-linear ramps, one orientation per cell, plus Gaussian noise."""
    out = np.empty((PATCH, PATCH))
    n = PATCH // CELL
    half = (CELL - 1) / 2.0
    for ci, o in enumerate(cells):
        theta = math.radians(22.5 + 45.0 * o)
        cr, cc = divmod(ci, n)
        base = 128.0 + rng.uniform(-30.0, 30.0)
        for y in range(CELL):
            for x in range(CELL):
                ramp = (x - half) * math.cos(theta) + (y - half) * math.sin(theta)
                out[cr * CELL + y, cc * CELL + x] = base + slope * ramp + rng.normal(0.0, noise)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _metadata(profile, cls, rng):
    if profile == "blobs":
        lat = rng.uniform(40.700, 40.716)
        lon = rng.uniform(-74.020, -74.004)
        return lat, lon, rng.uniform(0.0, 360.0)
    site = SITES[cls // 4]
    heading = HEADINGS[cls % 4]
    lat = site[0] + rng.normal(0.0, 0.0004)
    lon = site[1] + rng.normal(0.0, 0.0004)
    return lat, lon, (heading + rng.normal(0.0, 8.0)) % 360.0


def generate(profile, n_images, rng_seed=0):
    """In-memory dataset: list of dicts with pixels, class and metadata."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}")
    knobs = _KNOBS[profile]
    rng = Xoshiro256(rng_seed)
    protos = _prototypes(rng, knobs)
    per_side = IMAGE_SIZE // PATCH
    images = []
    for i in range(n_images):
        cls = i % N_CLASSES
        pix = np.empty((IMAGE_SIZE, IMAGE_SIZE), dtype=np.uint8)
        for pr in range(per_side):
            for pc in range(per_side):
                src = cls
                if knobs["stray"] and rng.random() < knobs["stray"]:
                    src = rng.below(N_CLASSES)
                cells = protos[src][rng.below(len(protos[src]))]
                pix[pr * PATCH:(pr + 1) * PATCH, pc * PATCH:(pc + 1) * PATCH] = \
                    render_patch(cells, rng, knobs["noise"])
        lat, lon, heading = _metadata(profile, cls, rng)
        images.append(dict(image_id=i, device_id=i % N_DEVICES, cls=cls,
                           pixels=pix, lat=round(lat, 7), lon=round(lon, 7),
                           orientation=round(heading, 3)))
    return images


def default_links(master=0, bandwidth=1.0e6, latency=0.005):
    links = []
    for d in range(N_DEVICES):
        if d != master:
            links.append({"from": master, "to": d, "bandwidth_bps": bandwidth, "latency_s": latency})
            links.append({"from": d, "to": master, "bandwidth_bps": bandwidth, "latency_s": latency})
    return links


def write_dataset(profile, n_images, out_dir, rng_seed=0):
    """Write PGMs, ``manifest.json`` and ``truth.json``; return the manifest path."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    images = generate(profile, n_images, rng_seed)
    devices = [{"device_id": d, "compute_rate": DEVICE_RATES[d], "images": []}
               for d in range(N_DEVICES)]
    for im in images:
        rel = f"images/img_{im['image_id']:04d}.pgm"
        g = GrayImage(IMAGE_SIZE, IMAGE_SIZE, im["pixels"])
        (out / rel).write_bytes(write_pgm(g))
        devices[im["device_id"]]["images"].append({
            "image_id": im["image_id"], "path": rel,
            "lat": im["lat"], "lon": im["lon"], "orientation": im["orientation"],
        })
    manifest = {"profile": profile, "rng_seed": rng_seed, "devices": devices,
                "links": default_links()}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    truth = {"classes": [im["cls"] for im in images],
             "sites": [im["cls"] // 4 for im in images] if profile != "blobs" else None}
    (out / "truth.json").write_text(json.dumps(truth) + "\n")
    return out / "manifest.json"
