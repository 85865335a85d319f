"""Loop detection by keyframe proximity plus feature verification, and drift
correction by pose-graph optimization over all keyframe poses.

Edges store the measured relative transform T_a⁻¹·T_b between two keyframe
poses (sensor -> world). The error of an edge is the SE(3) logarithm of
Z⁻¹·T_a⁻¹·T_b, a 6-vector (omega, rho) with identity weight. The lowest
keyframe id is held fixed.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.sparse.csgraph import connected_components
from scipy.spatial.transform import Rotation

from src.slam.errors import DisconnectedGraph, IoError, TooFewMatches
from src.slam.features import Match, match_descriptors, ransac_rigid_filter
from src.slam.geometry import ORTHO_TOL, PoseSE3, RigidTransform, orthonormality_error, se3_log_batch, so3_exp
from src.slam.mapping import KeyFrame
from src.slam.optim import levenberg_marquardt
from src.slam.schemas import LoopConfig, MatchRansacConfig

log = logging.getLogger(__name__)

FD_STEP = 1e-6


@dataclass(frozen=True, eq=False)
class Edge:
    id_a: int
    id_b: int
    relative: PoseSE3


@dataclass(frozen=True, eq=False)
class PoseGraph:
    nodes: dict[int, PoseSE3]
    odometry_edges: tuple[Edge, ...] = ()
    loop_edges: tuple[Edge, ...] = ()

    def __post_init__(self):
        for e in self.edges:
            if e.id_a not in self.nodes or e.id_b not in self.nodes:
                raise ValueError(f"edge ({e.id_a}, {e.id_b}) references a missing node")

    @property
    def edges(self) -> tuple[Edge, ...]:
        return self.odometry_edges + self.loop_edges

    @property
    def anchor(self) -> int:
        return min(self.nodes)

    def add_keyframe(self, kf_id: int, pose: PoseSE3) -> PoseGraph:
        """Append a node, linked by an odometry edge to the previous newest node."""
        if kf_id in self.nodes:
            raise ValueError(f"node {kf_id} already in graph")
        nodes = {**self.nodes, kf_id: pose}
        if not self.nodes:
            return replace(self, nodes=nodes)
        prev = max(self.nodes)
        edge = Edge(prev, kf_id, self.nodes[prev].inverse() @ pose)
        return replace(self, nodes=nodes, odometry_edges=self.odometry_edges + (edge,))

    def with_poses(self, poses: dict[int, PoseSE3]) -> PoseGraph:
        return replace(self, nodes={k: poses.get(k, p) for k, p in self.nodes.items()})

    def is_connected(self) -> bool:
        ids = sorted(self.nodes)
        if len(ids) <= 1:
            return True
        index = {k: i for i, k in enumerate(ids)}
        a = [index[e.id_a] for e in self.edges]
        b = [index[e.id_b] for e in self.edges]
        adjacency = sparse.coo_matrix((np.ones(len(a)), (a, b)), shape=(len(ids), len(ids)))
        n_components, _ = connected_components(adjacency, directed=False)
        return n_components == 1

    def cost(self) -> float:
        if not self.edges:
            return 0.0
        problem = _GraphProblem(self)
        r = problem.residuals(problem.initial_state())
        return float(r @ r)


@dataclass(frozen=True, eq=False)
class LoopCandidate:
    query_id: int
    candidate_id: int
    matches: list[Match]
    relative: RigidTransform  # query sensor frame -> candidate sensor frame

    accepted = True

    @property
    def inliers(self) -> int:
        return len(self.matches)

    def edge(self) -> Edge:
        return Edge(self.candidate_id, self.query_id, self.relative)


@dataclass(frozen=True)
class LoopRejection:
    query_id: int
    candidate_id: int
    inliers: int
    reason: str

    accepted = False


def find_nearest_keyframes(graph: PoseGraph, query_id: int, dist_threshold_m: float,
                           exclusion: int) -> list[int]:
    """Keyframes within dist_threshold_m of the query, skipping its `exclusion` predecessors."""
    if query_id not in graph.nodes:
        raise KeyError(f"keyframe {query_id} not in graph")
    ids = np.array([k for k in sorted(graph.nodes) if k < query_id - exclusion], dtype=np.int64)
    if not len(ids):
        return []
    q = graph.nodes[query_id].translation
    dist = np.linalg.norm(np.stack([graph.nodes[k].translation for k in ids]) - q, axis=1)
    near = dist <= dist_threshold_m
    order = np.lexsort((ids[near], dist[near]))
    return [int(k) for k in ids[near][order]]


def verify_candidate(query: KeyFrame, candidate: KeyFrame,
                     cfg: LoopConfig = LoopConfig()) -> LoopCandidate | LoopRejection:
    matches = match_descriptors(query.descriptors, candidate.descriptors, cfg.ratio)
    if len(matches) < cfg.min_inliers:
        return LoopRejection(query.id, candidate.id, len(matches), "too few descriptor matches")
    ransac_cfg = MatchRansacConfig(iterations=cfg.iterations, inlier_dist_m=cfg.inlier_dist_m,
                                   seed=cfg.seed + query.id)
    try:
        inliers, relative = ransac_rigid_filter(query.features.points, candidate.features.points,
                                                matches, ransac_cfg)
    except TooFewMatches as exc:
        return LoopRejection(query.id, candidate.id, 0, str(exc))
    if len(inliers) < cfg.min_inliers:
        return LoopRejection(query.id, candidate.id, len(inliers), "too few RANSAC inliers")
    return LoopCandidate(query.id, candidate.id, inliers, relative)


# -- pose-graph optimization -------------------------------------------------

class _GraphProblem:
    """Flat-array view of a pose graph for the LM core."""

    def __init__(self, graph: PoseGraph):
        self.ids = sorted(graph.nodes)
        index = {k: i for i, k in enumerate(self.ids)}
        edges = graph.edges
        self.ea = np.array([index[e.id_a] for e in edges], dtype=np.int64)
        self.eb = np.array([index[e.id_b] for e in edges], dtype=np.int64)
        self.z_rot = np.stack([e.relative.rotation for e in edges])
        self.z_trans = np.stack([e.relative.translation for e in edges])
        self.rot0 = np.stack([graph.nodes[k].rotation for k in self.ids])
        self.trans0 = np.stack([graph.nodes[k].translation for k in self.ids])
        self.n_free = len(self.ids) - 1

    def initial_state(self):
        return self.rot0, self.trans0

    def _errors(self, ra, ta, rb, tb) -> np.ndarray:
        rel_rot = np.einsum("mji,mjk->mik", ra, rb)
        rel_trans = np.einsum("mji,mj->mi", ra, tb - ta)
        err_rot = np.einsum("mji,mjk->mik", self.z_rot, rel_rot)
        err_trans = np.einsum("mji,mj->mi", self.z_rot, rel_trans - self.z_trans)
        return se3_log_batch(err_rot, err_trans)

    def residuals(self, state) -> np.ndarray:
        rot, trans = state
        return self._errors(rot[self.ea], trans[self.ea], rot[self.eb], trans[self.eb]).ravel()

    def jacobian(self, state) -> sparse.coo_matrix:
        rot, trans = state
        ra, ta, rb, tb = rot[self.ea], trans[self.ea], rot[self.eb], trans[self.eb]
        m = len(self.ea)
        j_a = np.zeros((m, 6, 6))
        j_b = np.zeros((m, 6, 6))
        for d in range(6):
            step = np.zeros(6)
            step[d] = FD_STEP
            plus_r, minus_r = so3_exp(step[:3]), so3_exp(-step[:3])
            j_a[:, :, d] = (self._errors(ra @ plus_r, ta + step[3:], rb, tb)
                            - self._errors(ra @ minus_r, ta - step[3:], rb, tb)) / (2 * FD_STEP)
            j_b[:, :, d] = (self._errors(ra, ta, rb @ plus_r, tb + step[3:])
                            - self._errors(ra, ta, rb @ minus_r, tb - step[3:])) / (2 * FD_STEP)

        rows = 6 * np.arange(m)[:, None, None] + np.arange(6)[None, :, None]
        data, row_idx, col_idx = [], [], []
        for node, block in ((self.ea, j_a), (self.eb, j_b)):
            free = node > 0
            cols = 6 * (node[free] - 1)[:, None, None] + np.arange(6)[None, None, :]
            data.append(block[free].ravel())
            row_idx.append(np.broadcast_to(rows[free], block[free].shape).ravel())
            col_idx.append(np.broadcast_to(cols, block[free].shape).ravel())
        return sparse.coo_matrix(
            (np.concatenate(data), (np.concatenate(row_idx), np.concatenate(col_idx))),
            shape=(6 * m, 6 * self.n_free),
        )

    def retract(self, state, step):
        rot, trans = state
        rot, trans = rot.copy(), trans.copy()
        dp = step.reshape(-1, 6)
        rot[1:] = rot[1:] @ Rotation.from_rotvec(dp[:, :3]).as_matrix()
        trans[1:] += dp[:, 3:]
        return rot, trans


def optimize_pose_graph(graph: PoseGraph, max_iters: int = 50) -> tuple[PoseGraph, float, float]:
    """Returns the optimized graph and the (initial, final) cost."""
    if not graph.is_connected():
        raise DisconnectedGraph(f"pose graph with {len(graph.nodes)} nodes is not connected")
    if len(graph.nodes) < 2 or not graph.edges:
        return graph, 0.0, 0.0
    problem = _GraphProblem(graph)
    result = levenberg_marquardt(problem.initial_state(), problem.residuals, problem.jacobian,
                                 problem.retract, max_iters)
    rot, trans = result.state
    nodes = {}
    for i, k in enumerate(problem.ids):
        if i == 0 or result.accepted_steps == 0:
            nodes[k] = graph.nodes[k]
            continue
        pose = PoseSE3(rot[i], trans[i])
        nodes[k] = pose.orthonormalized() if orthonormality_error(pose.rotation) > ORTHO_TOL else pose
    log.info("[loop] pose graph: %d nodes, %d edges, cost %.6g -> %.6g (%d iterations)",
             len(nodes), len(graph.edges), result.initial_cost, result.final_cost, result.iterations)
    return replace(graph, nodes=nodes), result.initial_cost, result.final_cost


def add_loop_and_optimize(graph: PoseGraph, loop: LoopCandidate,
                          cfg: LoopConfig = LoopConfig()) -> PoseGraph:
    if loop.query_id not in graph.nodes or loop.candidate_id not in graph.nodes:
        raise KeyError(f"loop ({loop.candidate_id}, {loop.query_id}) endpoints not in graph")
    graph = replace(graph, loop_edges=graph.loop_edges + (loop.edge(),))
    optimized, _, _ = optimize_pose_graph(graph, cfg.max_iters)
    return optimized


def format_loop_line(result: LoopCandidate | LoopRejection) -> str:
    return f"{result.query_id} {result.candidate_id} {result.inliers} {int(result.accepted)}"


def write_loop_log(lines: list[str], path) -> None:
    try:
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
