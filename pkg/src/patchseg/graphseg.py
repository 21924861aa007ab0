"""Modularity-based graph partitioning and spatial segment splitting.

``louvain`` here is fully deterministic so identical inputs always produce
identical partitions: phase 1 scans nodes in ascending index order and
breaks gain ties toward the lowest community id; phase 2 aggregates
communities (ordered by their smallest original node) and recurses. No
random restarts, resolution fixed at 1.

Partitions are plain integer arrays mapping node -> community id, with ids
contiguous from 0. Communities are then cut into spatially connected
segments with 4-connectivity on the patch grid; a segment is valid when it
has strictly more than ``tau`` patches.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .affinity import PatchGraph
from .errors import DataError

# Cap on phase-1 passes; a pass either moves a node (strictly increasing Q)
# or terminates, so this never binds in practice.
_MAX_PASSES = 10_000


def modularity(g: PatchGraph, partition: np.ndarray) -> float:
    """Modularity Q of a partition: internal weight vs the degree-based
    random expectation, with m counting each undirected edge once."""
    part = np.asarray(partition, dtype=np.int64)
    if part.shape != (g.n,):
        raise ValueError(f"partition covers {part.shape} nodes, graph has {g.n}")
    if part.size and part.min() < 0:
        raise ValueError("negative community id")
    m = g.total_weight
    if m == 0:
        raise ValueError("modularity undefined for m = 0")
    ncomm = int(part.max()) + 1
    internal = np.zeros(ncomm, dtype=np.float64)
    for (u, v), w in g.edges.items():
        if part[u] == part[v]:
            internal[part[u]] += w
    tot = np.zeros(ncomm, dtype=np.float64)
    np.add.at(tot, part, g.degrees())
    return float(np.sum(internal / m - (tot / (2.0 * m)) ** 2))


def _insertion_gain(k_in: float, tot: float, k_node: float, m: float) -> float:
    """Modularity gain of inserting an isolated node into a community
    whose incident-weight total is ``tot``, given ``k_in`` weight from the
    node into that community."""
    return k_in / m - tot * k_node / (2.0 * m * m)


def _local_moving(
    adj: list[dict[int, float]],
    loops: list[float],
    m: float,
) -> tuple[list[int], bool]:
    """Phase 1: greedy node moves until a full pass changes nothing.

    Community ids are working labels (initial node indices); ties between
    equal gains resolve to the lowest id.
    """
    n = len(adj)
    k = [2.0 * loops[i] + sum(adj[i].values()) for i in range(n)]
    comm = list(range(n))
    tot = k.copy()
    moved_any = False
    for _ in range(_MAX_PASSES):
        moved_in_pass = False
        for u in range(n):
            cu = comm[u]
            neigh_w: dict[int, float] = {}
            for v, w in adj[u].items():
                c = comm[v]
                neigh_w[c] = neigh_w.get(c, 0.0) + w
            tot[cu] -= k[u]
            base = _insertion_gain(neigh_w.get(cu, 0.0), tot[cu], k[u], m)
            best_c = cu
            best_gain = 0.0
            for c in sorted(neigh_w):
                if c == cu:
                    continue
                gain = _insertion_gain(neigh_w[c], tot[c], k[u], m) - base
                if gain > best_gain:
                    best_gain = gain
                    best_c = c
            comm[u] = best_c
            tot[best_c] += k[u]
            if best_c != cu:
                moved_in_pass = True
                moved_any = True
        if not moved_in_pass:
            break
    return comm, moved_any


def _aggregate(
    adj: list[dict[int, float]],
    loops: list[float],
    comm: list[int],
    members: list[list[int]],
) -> tuple[list[dict[int, float]], list[float], list[list[int]]]:
    """Phase 2: collapse communities into super-nodes, summing inter-edges
    and turning internal weight into self-loops. Super-nodes are ordered by
    their smallest original member node."""
    groups: dict[int, list[int]] = {}
    for node, c in enumerate(comm):
        groups.setdefault(c, []).append(node)
    order = sorted(groups, key=lambda c: min(members[i][0] for i in groups[c]))
    remap = {c: idx for idx, c in enumerate(order)}
    new_n = len(order)
    new_members = [
        sorted(x for i in groups[c] for x in members[i]) for c in order
    ]
    new_adj: list[dict[int, float]] = [dict() for _ in range(new_n)]
    new_loops = [0.0] * new_n
    for c in order:
        for i in groups[c]:
            new_loops[remap[c]] += loops[i]
    for u in range(len(adj)):
        cu = remap[comm[u]]
        for v, w in adj[u].items():
            if v < u:
                continue
            cv = remap[comm[v]]
            if cu == cv:
                new_loops[cu] += w
            else:
                new_adj[cu][cv] = new_adj[cu].get(cv, 0.0) + w
                new_adj[cv][cu] = new_adj[cv].get(cu, 0.0) + w
    return new_adj, new_loops, new_members


def louvain(g: PatchGraph) -> np.ndarray:
    """Deterministic Louvain partition of ``g``.

    Returns node -> community id, ids contiguous from 0 and ordered by each
    community's smallest member node. Isolated nodes end up as singletons;
    an edgeless graph yields the all-singleton partition.
    """
    if g.n < 1:
        raise ValueError("graph has no nodes")
    if not g.edges:
        return np.arange(g.n, dtype=np.int64)
    m = g.total_weight
    adj = g.neighbors()
    loops = [0.0] * g.n
    members = [[i] for i in range(g.n)]
    prev_q = modularity(g, _members_to_partition(members, g.n))
    while True:
        comm, moved = _local_moving(adj, loops, m)
        if not moved:
            break
        adj, loops, members = _aggregate(adj, loops, comm, members)
        q = modularity(g, _members_to_partition(members, g.n))
        assert q >= prev_q - 1e-9, f"modularity decreased across phases: {prev_q} -> {q}"
        prev_q = q
    return _members_to_partition(members, g.n)


def _members_to_partition(members: list[list[int]], n: int) -> np.ndarray:
    part = np.empty(n, dtype=np.int64)
    for idx, mem in enumerate(members):
        part[mem] = idx
    return part


@dataclass
class Segment:
    """A spatially connected group of patches within one community."""

    segment_id: int
    patches: list[int]
    patch_count: int
    valid: bool
    label: int | None = None


@dataclass
class SegmentSet:
    image_id: str
    grid: tuple[int, int]
    segments: list[Segment] = field(default_factory=list)

    @property
    def num_valid(self) -> int:
        return sum(1 for s in self.segments if s.valid)


def split_components(
    partition: np.ndarray,
    grid: tuple[int, int],
    tau: int,
    image_id: str = "",
) -> SegmentSet:
    """Cut each community into 4-connected components on the patch grid.

    Segment ids are assigned by (community id, smallest patch index); a
    segment is valid iff its patch count exceeds ``tau``.
    """
    h_p, w_p = grid
    n = h_p * w_p
    part = np.asarray(partition, dtype=np.int64)
    if part.shape != (n,):
        raise ValueError(f"partition of {part.shape} does not cover grid {h_p}x{w_p}")
    by_comm: dict[int, list[int]] = {}
    for p in range(n):
        by_comm.setdefault(int(part[p]), []).append(p)
    visited = np.zeros(n, dtype=bool)
    segments: list[Segment] = []
    for c in sorted(by_comm):
        for start in by_comm[c]:
            if visited[start]:
                continue
            comp: list[int] = []
            queue = deque([start])
            visited[start] = True
            while queue:
                p = queue.popleft()
                comp.append(p)
                r, col = divmod(p, w_p)
                for q in (
                    p - w_p if r > 0 else -1,
                    p + w_p if r < h_p - 1 else -1,
                    p - 1 if col > 0 else -1,
                    p + 1 if col < w_p - 1 else -1,
                ):
                    if q >= 0 and not visited[q] and part[q] == c:
                        visited[q] = True
                        queue.append(q)
            comp.sort()
            segments.append(Segment(
                segment_id=len(segments),
                patches=comp,
                patch_count=len(comp),
                valid=len(comp) > tau,
            ))
    return SegmentSet(image_id=image_id, grid=(h_p, w_p), segments=segments)


def save_segments(segset: SegmentSet, path: str | Path) -> None:
    doc = {
        "image_id": segset.image_id,
        "grid": list(segset.grid),
        "segments": [
            {
                "segment_id": s.segment_id,
                "patches": s.patches,
                "patch_count": s.patch_count,
                "valid": s.valid,
                "label": s.label,
            }
            for s in segset.segments
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_segments(path: str | Path) -> SegmentSet:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"segments file is not valid JSON: {exc}") from exc
    try:
        segments = [
            Segment(
                segment_id=int(s["segment_id"]),
                patches=[int(p) for p in s["patches"]],
                patch_count=int(s["patch_count"]),
                valid=bool(s["valid"]),
                label=None if s.get("label") is None else int(s["label"]),
            )
            for s in doc["segments"]
        ]
        return SegmentSet(
            image_id=str(doc["image_id"]),
            grid=(int(doc["grid"][0]), int(doc["grid"][1])),
            segments=segments,
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise DataError(f"malformed segments file {path}: {exc}") from exc
