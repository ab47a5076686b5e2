"""Discrete-event simulation of master/worker K-Means over a phone fleet.

Each iteration the master unicasts the centroids to every device, each
device assigns its local points and returns per-cluster sums and counts,
and the master merges them after the last reply. Link cost is
``latency + bytes / bandwidth``; compute cost is
``local_points * k / compute_rate``; the merge itself takes no time.

Messages travelling over a device's link to itself (the master's own
shard) cost nothing and are not counted in ``bytes_transferred``.
"""
import heapq
import struct
from dataclasses import dataclass, field

import numpy as np

from . import clustering as cl
from .clustering import StopRule

HEADER = struct.Struct("<4sHHHHI")  # magic, version, k, d, iteration, reserved
WIRE_VERSION = 1
MAGIC_BROADCAST = b"DKMB"
MAGIC_PARTIAL = b"DKMP"
MAGIC_CONVERGED = b"DKMC"

# tie order for simultaneous events on the same device
BROADCAST_SENT, BROADCAST_RECV, COMPUTE_DONE, PARTIAL_RECV, MERGE_DONE, CONVERGED_SENT = range(6)
KIND_NAMES = ["broadcast_sent", "broadcast_received", "compute_done",
              "partial_received", "merge_done", "converged_sent"]


class SimError(Exception):
    pass


class PartitionError(SimError):
    pass


class IterationMismatch(SimError):
    pass


class NetworkError(SimError):
    pass


@dataclass
class DeviceSpec:
    device_id: int
    compute_rate: float
    local_point_ids: np.ndarray

    def __post_init__(self):
        if not self.compute_rate > 0:
            raise ValueError("compute_rate must be positive")
        self.local_point_ids = np.asarray(self.local_point_ids, dtype=np.int64)


@dataclass(frozen=True)
class Link:
    bandwidth: float
    latency: float = 0.0

    def __post_init__(self):
        if not (0 < self.bandwidth < float("inf")) or not (0 <= self.latency < float("inf")):
            raise ValueError(f"bad link {self}")


@dataclass
class NetworkSpec:
    links: dict = field(default_factory=dict)  # (src, dst) -> Link

    def transfer_time(self, src, dst, nbytes):
        if src == dst:
            return 0.0
        try:
            link = self.links[(src, dst)]
        except KeyError:
            raise NetworkError(f"no link {src} -> {dst}") from None
        return link.latency + nbytes / link.bandwidth

    @classmethod
    def uniform(cls, device_ids, bandwidth, latency=0.0):
        return cls({(a, b): Link(bandwidth, latency)
                    for a in device_ids for b in device_ids if a != b})

    @classmethod
    def from_json(cls, links):
        return cls({(int(l["from"]), int(l["to"])): Link(float(l["bandwidth_bps"]), float(l["latency_s"]))
                    for l in links})

    def to_json(self):
        return [{"from": a, "to": b, "bandwidth_bps": l.bandwidth, "latency_s": l.latency}
                for (a, b), l in sorted(self.links.items())]


@dataclass
class PartialSums:
    sums: np.ndarray
    counts: np.ndarray
    sender: int = 0
    iteration: int = 0
    labels: np.ndarray | None = field(default=None, repr=False)


# ------------------------------------------------------------ wire format

def broadcast_bytes(k, d):
    return HEADER.size + 4 * k * d


def partial_bytes(k, d):
    return HEADER.size + k * (4 * d + 4)


def converged_bytes():
    return HEADER.size


def _header(magic, k, d, iteration):
    return HEADER.pack(magic, WIRE_VERSION, k, d, iteration & 0xFFFF, 0)


def encode_broadcast(cents, iteration):
    k, d = cents.shape
    return _header(MAGIC_BROADCAST, k, d, iteration) + np.asarray(cents, "<f4").tobytes()


def encode_partial(part: PartialSums):
    k, d = part.sums.shape
    body = b"".join(np.asarray(s, "<f4").tobytes() + struct.pack("<I", int(c))
                    for s, c in zip(part.sums, part.counts))
    return _header(MAGIC_PARTIAL, k, d, part.iteration) + body


def encode_converged(k, d, iteration):
    return _header(MAGIC_CONVERGED, k, d, iteration)


def decode_header(data):
    magic, version, k, d, iteration, _ = HEADER.unpack_from(data)
    return magic, version, k, d, iteration


# ---------------------------------------------------------------- kernels

def local_partial(points_local, cents, sender=0, iteration=0):
    cents = cl.as_points(cents, "centroids")
    k, d = cents.shape
    pts = np.asarray(points_local, dtype=np.float64)
    if pts.size == 0:
        pts = np.empty((0, d))
    elif pts.ndim == 1:
        pts = pts[:, None]
    if pts.ndim != 2 or pts.shape[1] != d:
        raise cl.DimensionMismatch("local points and centroids differ in dimension")
    if len(pts) == 0:
        return PartialSums(np.zeros((k, d)), np.zeros(k, dtype=np.int64), sender, iteration,
                           np.empty(0, dtype=np.int64))
    labels, _ = cl.assign_step(pts, cents)
    sums, counts = cl._sums(pts, labels, k)
    return PartialSums(sums, counts, sender, iteration, labels)


def merge_partials(parts, prev):
    """Count-weighted merge; clusters nobody populated keep ``prev``."""
    prev = cl.as_points(prev, "prev")
    if not parts:
        return prev.copy()
    if len({p.iteration for p in parts}) > 1:
        raise IterationMismatch(sorted({p.iteration for p in parts}))
    sums = np.zeros_like(prev)
    counts = np.zeros(prev.shape[0], dtype=np.int64)
    for p in parts:
        if p.sums.shape != prev.shape:
            raise cl.DimensionMismatch("partial sums shape differs from centroids")
        sums += p.sums
        counts += p.counts
    out = prev.copy()
    nz = counts > 0
    out[nz] = sums[nz] / counts[nz, None]
    return out


# -------------------------------------------------------------- simulator

@dataclass
class SimReport:
    final_centroids: np.ndarray
    labels: np.ndarray
    simulated_clock: float
    timeline: list
    bytes_transferred: int
    iterations: int
    stop_reason: str

    def to_dict(self):
        return {
            "final_centroids": self.final_centroids.tolist(),
            "labels": self.labels.tolist(),
            "simulated_clock": self.simulated_clock,
            "bytes_transferred": self.bytes_transferred,
            "iterations": self.iterations,
            "stop_reason": self.stop_reason,
            "timeline": self.timeline,
        }


def check_partition(n, fleet):
    owners = np.zeros(n, dtype=np.int64)
    for dev in fleet:
        ids = dev.local_point_ids
        if len(ids) and (ids.min() < 0 or ids.max() >= n):
            raise PartitionError(f"device {dev.device_id} owns out-of-range points")
        np.add.at(owners, ids, 1)
    if np.any(owners != 1):
        bad = int(np.flatnonzero(owners != 1)[0])
        raise PartitionError(f"point {bad} owned by {owners[bad]} devices")


def simulate(pts, seeds, stop: StopRule, fleet, net: NetworkSpec, master=0):
    pts = cl.as_points(pts)
    cents = cl.as_points(seeds, "seeds").copy()
    cl._check_dims(pts, cents)
    n, d = pts.shape
    k = cents.shape[0]
    devices = {dev.device_id: dev for dev in fleet}
    if master not in devices:
        raise SimError(f"master {master} not in fleet")
    check_partition(n, fleet)
    order = sorted(devices)

    b_bytes, p_bytes, c_bytes = broadcast_bytes(k, d), partial_bytes(k, d), converged_bytes()
    queue, timeline, seq = [], [], 0
    state = {"bytes": 0, "iteration": 0, "parts": {}, "labels": {}, "cents": cents}

    def push(t, dev, kind, **info):
        nonlocal seq
        heapq.heappush(queue, (t, dev, kind, seq, info))
        seq += 1

    def send(t, src, dst, nbytes):
        if src != dst:
            state["bytes"] += nbytes
        return t + net.transfer_time(src, dst, nbytes)

    def start_iteration(t):
        state["iteration"] += 1
        state["parts"] = {}
        for w in order:
            push(t, master, BROADCAST_SENT, peer=w)

    start_iteration(0.0)
    clock, reason = 0.0, None
    while queue:
        t, dev, kind, _, info = heapq.heappop(queue)
        it = state["iteration"]
        timeline.append({"time": t, "device": dev, "event": KIND_NAMES[kind],
                         "iteration": it, "peer": info.get("peer")})
        if kind == BROADCAST_SENT:
            w = info["peer"]
            push(send(t, master, w, b_bytes), w, BROADCAST_RECV, peer=master)
        elif kind == BROADCAST_RECV:
            spec = devices[dev]
            part = local_partial(pts[spec.local_point_ids], state["cents"], dev, it)
            state["labels"][dev] = part.labels
            dt = len(spec.local_point_ids) * k / spec.compute_rate
            push(t + dt, dev, COMPUTE_DONE, part=part)
        elif kind == COMPUTE_DONE:
            push(send(t, dev, master, p_bytes), master, PARTIAL_RECV, peer=dev, part=info["part"])
        elif kind == PARTIAL_RECV:
            state["parts"][info["peer"]] = info["part"]
            if len(state["parts"]) == len(order):
                push(t, master, MERGE_DONE)
        elif kind == MERGE_DONE:
            parts = [state["parts"][w] for w in order]
            new = merge_partials(parts, state["cents"])
            shift = float(np.sqrt(((new - state["cents"]) ** 2).sum(axis=1)).max())
            state["cents"] = new
            clock = t
            reason = stop.check(it, shift)
            if reason:
                for w in order:
                    send(t, master, w, c_bytes)
                    push(t, master, CONVERGED_SENT, peer=w)
            else:
                start_iteration(t)

    labels = np.empty(n, dtype=np.int64)
    for w in order:
        labels[devices[w].local_point_ids] = state["labels"][w]
    return SimReport(state["cents"], labels, clock, timeline, state["bytes"],
                     state["iteration"], reason)


def fleet_from_sizes(sizes, rates=None, start_id=0):
    """Devices owning consecutive blocks of points, ``sizes[i]`` points each."""
    fleet, lo = [], 0
    for i, s in enumerate(sizes):
        rate = rates[i] if rates is not None else 1.0e6
        fleet.append(DeviceSpec(start_id + i, rate, np.arange(lo, lo + s)))
        lo += s
    return fleet
