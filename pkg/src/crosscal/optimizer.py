"""Global estimation of all sensor poses from per-sequence circle centers.

Every sensor pair that co-detects the board in a sequence contributes
residual terms: camera pairs compare projected 3D centers against the
other camera's 2D centers, LiDAR-camera pairs project the LiDAR centers,
and LiDAR pairs compare 3D centers directly. The reference sensor is
pinned to identity (gauge) and the rest solved by Levenberg-Marquardt on
the SE(3) tangent space with an analytic Jacobian.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import geometry
from .camera import CameraDetection
from .errors import (
    DegenerateCenters,
    DisconnectedGraph,
    NoReferenceObservations,
    SingularNormalEquations,
    SolverNotConverged,
    UnknownSensor,
)
from .geometry import Intrinsics, RigidTransform
from .lidar import LidarDetection
from .lm import levenberg_marquardt

log = logging.getLogger(__name__)


@dataclass(frozen=True, order=True)
class SensorId:
    kind: str  # "camera" | "lidar"
    index: int

    def __post_init__(self):
        if self.kind not in ("camera", "lidar"):
            raise ValueError(f"unknown sensor kind {self.kind!r}")

    def __str__(self):
        return f"{self.kind}{self.index}"


@dataclass(frozen=True)
class SequenceObservations:
    sequence: int
    observations: dict  # SensorId -> LidarDetection | CameraDetection


@dataclass(frozen=True)
class SolveParams:
    max_iter: int = 100
    lm_lambda_init: float = 1e-3
    gradient_tol: float = 1e-9
    camera_residual_weight: float | None = None  # default 1/fx per camera
    lidar_residual_weight: float = 1.0
    huber_delta: float | None = None
    include_camera_self_terms: bool = True


@dataclass(frozen=True)
class CalibrationProblem:
    sequences: tuple  # of SequenceObservations
    reference: SensorId
    sensors: tuple  # all SensorIds, display order (cameras then lidars)
    intrinsics: dict  # SensorId -> Intrinsics for cameras
    params: SolveParams = SolveParams()

    def display_name(self, sensor: SensorId) -> str:
        return f"S{self.sensors.index(sensor) + 1}"


@dataclass
class CalibrationResult:
    poses: dict  # SensorId -> RigidTransform (sensor frame -> reference B)
    problem: CalibrationProblem
    final_cost: float
    initial_cost: float
    iterations: int
    converged: bool
    gradient_norm: float
    cost_history: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def detection_centers(det) -> np.ndarray:
    """(4, 3) centers of either detection flavor, canonical order."""
    if isinstance(det, LidarDetection):
        return det.centers
    return det.centers_3d


def _check_centers(det, sensor, seq):
    c = detection_centers(det)
    centered = c - c.mean(axis=0)
    if np.linalg.matrix_rank(centered, tol=1e-9) < 2:
        raise DegenerateCenters(f"sensor {sensor} sequence {seq}: collinear centers")


def build_problem(
    detections,
    reference: SensorId,
    intrinsics: dict,
    params: SolveParams = SolveParams(),
) -> CalibrationProblem:
    """Assemble sequences into a connected co-visibility problem.

    Sequences with fewer than two detecting sensors are dropped with a
    warning; a disconnected sensor graph or an unobserved reference is an
    error.
    """
    kept = []
    for seq in detections:
        if len(seq.observations) < 2:
            log.warning("sequence %s has %d detection(s); dropped", seq.sequence, len(seq.observations))
            continue
        kept.append(seq)
    sensors = sorted({s for seq in kept for s in seq.observations})
    sensors = tuple(
        [s for s in sensors if s.kind == "camera"] + [s for s in sensors if s.kind == "lidar"]
    )
    if reference not in sensors:
        raise NoReferenceObservations(f"reference {reference} has no detections")
    # connectivity over co-detection edges
    comp = {s: s for s in sensors}

    def find(x):
        while comp[x] != x:
            comp[x] = comp[comp[x]]
            x = comp[x]
        return x

    for seq in kept:
        obs = sorted(seq.observations)
        for other in obs[1:]:
            comp[find(other)] = find(obs[0])
    groups = {}
    for s in sensors:
        groups.setdefault(find(s), []).append(s)
    if len(groups) > 1:
        raise DisconnectedGraph([sorted(map(str, g)) for g in groups.values()])
    return CalibrationProblem(tuple(kept), reference, sensors, dict(intrinsics), params)


def _kabsch(src: np.ndarray, dst: np.ndarray) -> RigidTransform:
    """Least-squares rigid alignment mapping src points onto dst."""
    sm, dm = src.mean(axis=0), dst.mean(axis=0)
    h = (src - sm).T @ (dst - dm)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    r = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(r, dm - r @ sm)


def estimate_pairwise(p: CalibrationProblem, a: SensorId, b: SensorId) -> RigidTransform:
    """Closed-form a->b transform from all shared center correspondences."""
    src, dst = [], []
    for seq in p.sequences:
        if a in seq.observations and b in seq.observations:
            _check_centers(seq.observations[a], a, seq.sequence)
            _check_centers(seq.observations[b], b, seq.sequence)
            src.append(detection_centers(seq.observations[a]))
            dst.append(detection_centers(seq.observations[b]))
    if not src:
        raise UnknownSensor(f"sensors {a} and {b} never co-detect")
    return _kabsch(np.concatenate(src), np.concatenate(dst))


def initial_guess(p: CalibrationProblem) -> dict:
    """Chain closed-form pairwise poses to the reference along a maximum
    co-detection spanning tree; reference pose is identity."""
    counts = {}
    for seq in p.sequences:
        obs = sorted(seq.observations)
        for i, a in enumerate(obs):
            for b in obs[i + 1 :]:
                counts[(a, b)] = counts.get((a, b), 0) + 1
    poses = {p.reference: RigidTransform.identity()}
    remaining = set(p.sensors) - {p.reference}
    while remaining:
        best = None
        for (a, b), n in counts.items():
            for known, new in ((a, b), (b, a)):
                if known in poses and new in remaining:
                    if best is None or n > best[0]:
                        best = (n, known, new)
        if best is None:  # unreachable for a connected problem
            raise DisconnectedGraph([sorted(map(str, poses)), sorted(map(str, remaining))])
        _, known, new = best
        t_new_known = estimate_pairwise(p, new, known)
        poses[new] = geometry.compose(poses[known], t_new_known)
        remaining.discard(new)
    return poses


def _terms(p: CalibrationProblem):
    """Enumerate residual terms once; reused by residual and Jacobian."""
    out = []
    sp = p.params
    for seq in p.sequences:
        cams = [s for s in p.sensors if s.kind == "camera" and s in seq.observations]
        lids = [s for s in p.sensors if s.kind == "lidar" and s in seq.observations]
        for j in cams:
            k = p.intrinsics[j]
            w = sp.camera_residual_weight if sp.camera_residual_weight is not None else 1.0 / k.fx
            obs2d = seq.observations[j].centers_2d
            for i in cams:
                if i == j and not sp.include_camera_self_terms:
                    continue
                out.append(("cam", seq.sequence, i, j, seq.observations[i].centers_3d, obs2d, k, w))
            for i in lids:
                out.append(("cam", seq.sequence, i, j, seq.observations[i].centers, obs2d, k, w))
        for a_idx, i in enumerate(lids):
            for j in lids[a_idx + 1 :]:
                out.append(
                    (
                        "lidar",
                        seq.sequence,
                        i,
                        j,
                        seq.observations[i].centers,
                        seq.observations[j].centers,
                        None,
                        sp.lidar_residual_weight,
                    )
                )
    return out


def _huber_scale(block: np.ndarray, delta):
    if delta is None:
        return 1.0
    n = float(np.linalg.norm(block))
    return 1.0 if n <= delta else np.sqrt(delta / n)


def residuals(p: CalibrationProblem, poses: dict, terms=None):
    """Stacked residual vector; behind-camera projections are capped at the
    image diagonal and counted in the returned flag total."""
    r, flags = _residuals_impl(p, poses, terms)
    return r, flags


def _residuals_impl(p: CalibrationProblem, poses, terms):
    if terms is None:
        terms = _terms(p)
    delta = p.params.huber_delta
    blocks = []
    flags = 0
    for kind, _seq, i, j, pts_i, obs_j, intr, w in terms:
        ti, tj = poses[i], poses[j]
        if kind == "lidar":
            block = w * (ti.apply(pts_i) - tj.apply(obs_j))
            blocks.append((block * _huber_scale(block, delta)).ravel())
            continue
        y = ti.apply(pts_i)  # centers in B
        q = geometry.invert(tj).apply(y)  # centers in camera j
        block = np.zeros((4, 2))
        diag = np.hypot(intr.width, intr.height)
        for kk in range(4):
            if q[kk, 2] <= 1e-9:
                block[kk] = w * diag / np.sqrt(2.0)
                flags += 1
            else:
                block[kk] = w * (
                    np.array(
                        [
                            intr.fx * q[kk, 0] / q[kk, 2] + intr.cx,
                            intr.fy * q[kk, 1] / q[kk, 2] + intr.cy,
                        ]
                    )
                    - obs_j[kk]
                )
        blocks.append((block * _huber_scale(block, delta)).ravel())
    return np.concatenate(blocks), flags


def jacobian(p: CalibrationProblem, poses: dict, terms=None) -> np.ndarray:
    """Analytic Jacobian w.r.t. left-multiplied tangent increments on every
    non-reference pose, ordered like p.sensors with the reference skipped."""
    if terms is None:
        terms = _terms(p)
    free = [s for s in p.sensors if s != p.reference]
    col = {s: 6 * k for k, s in enumerate(free)}
    n_rows = sum(8 if t[0] == "cam" else 12 for t in terms)
    jac = np.zeros((n_rows, 6 * len(free)))
    row = 0
    for kind, _seq, i, j, pts_i, obs_j, intr, w in terms:
        ti, tj = poses[i], poses[j]
        if kind == "lidar":
            yi, yj = ti.apply(pts_i), tj.apply(obs_j)
            for kk in range(4):
                bi = w * np.hstack([np.eye(3), -geometry.skew(yi[kk])])
                bj = -w * np.hstack([np.eye(3), -geometry.skew(yj[kk])])
                if i in col:
                    jac[row : row + 3, col[i] : col[i] + 6] = bi
                if j in col:
                    jac[row : row + 3, col[j] : col[j] + 6] = bj
                row += 3
            continue
        y = ti.apply(pts_i)
        rjt = tj.rotation.T
        q = (y - tj.translation) @ tj.rotation
        for kk in range(4):
            if q[kk, 2] <= 1e-9:
                row += 2
                continue
            x, yy, z = q[kk]
            dpi = np.array(
                [[intr.fx / z, 0.0, -intr.fx * x / z**2], [0.0, intr.fy / z, -intr.fy * yy / z**2]]
            )
            b = np.hstack([np.eye(3), -geometry.skew(y[kk])])
            core = w * dpi @ rjt @ b
            if i != j:
                if i in col:
                    jac[row : row + 2, col[i] : col[i] + 6] = core
                if j in col:
                    jac[row : row + 2, col[j] : col[j] + 6] = -core
            row += 2
    return jac


def resolve_circle_ordering(p: CalibrationProblem, poses: dict) -> CalibrationProblem:
    """Undo the square board's 4-fold order ambiguity per LiDAR detection by
    trying the 4 cyclic rotations and keeping the lowest-residual one."""
    new_seqs = []
    for seq in p.sequences:
        obs = dict(seq.observations)
        for sensor, det in seq.observations.items():
            if not isinstance(det, LidarDetection):
                continue
            others = {s: d for s, d in seq.observations.items() if s != sensor}
            best = (np.inf, 0)
            for shift in range(4):
                cand = replace(det, centers=np.roll(det.centers, -shift, axis=0))
                sub = SequenceObservations(seq.sequence, {**others, sensor: cand})
                subp = replace(p, sequences=(sub,))
                r, _ = residuals(subp, poses)
                cost = float(r @ r)
                if cost < best[0] - 1e-12:
                    best = (cost, shift)
            if best[1] != 0:
                obs[sensor] = replace(det, centers=np.roll(det.centers, -best[1], axis=0))
        new_seqs.append(SequenceObservations(seq.sequence, obs))
    return replace(p, sequences=tuple(new_seqs))


def solve(p: CalibrationProblem, sp: SolveParams | None = None) -> CalibrationResult:
    """Levenberg-Marquardt over all non-reference poses."""
    if sp is not None:
        p = replace(p, params=sp)
    poses0 = initial_guess(p)
    p = resolve_circle_ordering(p, poses0)
    terms = _terms(p)
    free = [s for s in p.sensors if s != p.reference]

    def res_fn(poses):
        return _residuals_impl(p, poses, terms)[0]

    def jac_fn(poses):
        return jacobian(p, poses, terms)

    def plus(poses, dx):
        out = dict(poses)
        for k, s in enumerate(free):
            out[s] = geometry.compose(geometry.exp_se3(dx[6 * k : 6 * k + 6]), poses[s])
        return out

    j0 = jac_fn(poses0)
    h0 = j0.T @ j0
    eig = np.linalg.eigvalsh(h0)
    if eig[0] < 1e-12 * max(eig[-1], 1.0):
        diag = np.diag(h0).reshape(-1, 6).sum(axis=1)
        suspects = [str(free[k]) for k in np.where(diag < 1e-9 * diag.max())[0]]
        raise SingularNormalEquations(suspects or [str(s) for s in free])

    res = levenberg_marquardt(
        poses0,
        res_fn,
        jac_fn,
        plus,
        max_iter=p.params.max_iter,
        lambda_init=p.params.lm_lambda_init,
        gradient_tol=p.params.gradient_tol,
    )
    _, flags = _residuals_impl(p, res.state, terms)
    meta = {
        "camera_residual_weight": p.params.camera_residual_weight or "1/fx per camera",
        "lidar_residual_weight": p.params.lidar_residual_weight,
        "huber_delta": p.params.huber_delta,
        "behind_camera_flags": flags,
    }
    result = CalibrationResult(
        res.state,
        p,
        res.cost,
        res.cost_history[0],
        res.iterations,
        res.converged,
        res.gradient_norm,
        res.cost_history,
        meta,
    )
    if not res.converged:
        raise SolverNotConverged(result)
    return result


def consistency_check(result: CalibrationResult, chain):
    """Compose pairwise transforms around a closed sensor loop; returns the
    (rotation deg, translation m) deviation from identity."""
    for s in chain:
        if s not in result.poses:
            raise UnknownSensor(str(s))
    loop = RigidTransform.identity()
    for a, b in zip(chain, chain[1:] + [chain[0]]):
        t_ab = geometry.compose(geometry.invert(result.poses[b]), result.poses[a])
        loop = geometry.compose(t_ab, loop)
    rot = np.rad2deg(geometry.rotation_angle(loop.rotation))
    return float(rot), float(np.linalg.norm(loop.translation))


def _pairwise_or_via(p: CalibrationProblem, a: SensorId, b: SensorId) -> RigidTransform:
    """Direct pairwise estimate, or composed through one shared sensor when a
    and b never co-detect (sparse datasets)."""
    try:
        return estimate_pairwise(p, a, b)
    except UnknownSensor:
        pass
    for c in p.sensors:
        if c in (a, b):
            continue
        try:
            return geometry.compose(estimate_pairwise(p, c, b), estimate_pairwise(p, a, c))
        except UnknownSensor:
            continue
    raise UnknownSensor(f"sensors {a} and {b} share no co-detections, even indirectly")


def consistency_check_pairwise(p: CalibrationProblem, chain):
    """Same loop but over independently estimated pairwise transforms, so
    the deviation is finite on noisy data."""
    loop = RigidTransform.identity()
    for a, b in zip(chain, chain[1:] + [chain[0]]):
        loop = geometry.compose(_pairwise_or_via(p, a, b), loop)
    rot = np.rad2deg(geometry.rotation_angle(loop.rotation))
    return float(rot), float(np.linalg.norm(loop.translation))


def reprojection_report(result: CalibrationResult, p: CalibrationProblem | None = None):
    """Per-sequence, per-pair Euclidean distances of the 4 centers mapped
    into the reference frame; rows (sequence, name_i, name_j, [4 floats])."""
    if p is None:
        p = result.problem
    rows = []
    for seq in p.sequences:
        present = [s for s in p.sensors if s in seq.observations]
        for a_idx, i in enumerate(present):
            for j in present[a_idx + 1 :]:
                ci = result.poses[i].apply(detection_centers(seq.observations[i]))
                cj = result.poses[j].apply(detection_centers(seq.observations[j]))
                dist = np.linalg.norm(ci - cj, axis=1)
                rows.append((seq.sequence, p.display_name(i), p.display_name(j), dist.tolist()))
    return rows
