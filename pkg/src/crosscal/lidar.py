"""Point-cloud board detection: filter, GICP, plane fit, occupancy grid and
circle refinement.

The stages are exposed individually (each is pure and independently
testable) and chained by detect_target_lidar. All randomized steps draw
from a generator seeded by LidarParams.rng_seed, so a full detection is
bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from . import geometry
from .errors import (
    DegenerateInput,
    EmptyAfterFilter,
    EmptyMatch,
    GridTooSmall,
    InconsistentCircles,
    LidarStageError,
    LowInlierRatio,
    NotConverged,
    NoVoidFound,
    PoorFit,
)
from .geometry import RigidTransform
from .target import TargetSpec, circle_centers_board, generate_mask_cloud


@dataclass(frozen=True)
class LidarParams:
    """Thresholds for the detection stages; lengths in meters."""

    h_min: float = 0.05
    d_min: float = 0.5
    d_max: float = 8.0
    gicp_max_iter: int = 64
    gicp_corr_dist: float = 0.5
    gicp_fitness_eps: float = 1e-3  # mean squared correspondence distance, m^2
    nn_delta: float = 0.1
    ransac_eps: float = 0.02
    ransac_iters: int = 500
    grid_res: int = 200  # cells per meter
    rng_seed: int = 0

    def __post_init__(self):
        if min(self.h_min + 1.0, self.d_min, self.d_max, self.nn_delta, self.ransac_eps) <= 0:
            raise ValueError("distances must be positive")
        if self.d_min >= self.d_max:
            raise ValueError("d_min must be < d_max")
        if self.grid_res < 1:
            raise ValueError("grid_res must be >= 1")


@dataclass(frozen=True)
class Plane:
    """ax + by + cz + d = 0 with unit (a, b, c)."""

    a: float
    b: float
    c: float
    d: float

    def normal(self):
        return np.array([self.a, self.b, self.c])

    def distances(self, pts):
        return np.abs(pts @ self.normal() + self.d)


@dataclass(frozen=True)
class OccupancyGrid:
    occupied: np.ndarray  # bool, indexed [i, j] along (x, y)
    origin: np.ndarray  # (2,) world xy of cell (0, 0) corner
    res: float  # cells per meter

    @property
    def cell(self):
        return 1.0 / self.res

    def cell_center(self, ij):
        return self.origin + (np.asarray(ij, dtype=float) + 0.5) * self.cell


@dataclass(frozen=True)
class LidarDetection:
    pose: RigidTransform  # board -> lidar, refined
    centers: np.ndarray  # (4, 3) lidar frame, canonical order
    fitness: float


def filter_cloud(cloud: np.ndarray, p: LidarParams) -> np.ndarray:
    """Ground / range gate: keep z >= h_min and d_min < ||p_xy|| <= d_max."""
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    rho = np.hypot(cloud[:, 0], cloud[:, 1])
    keep = (cloud[:, 2] >= p.h_min) & (rho > p.d_min) & (rho <= p.d_max)
    out = cloud[keep]
    if len(out) < 100:
        raise EmptyAfterFilter(f"{len(out)} points after filtering")
    return out


def _point_normals(pts: np.ndarray, tree: cKDTree, k: int = 20):
    """Unit normal per point from the 20-NN covariance (smallest eigenvector)."""
    k = min(k, len(pts))
    _, idx = tree.query(pts, k=k)
    nbrs = pts[idx]  # (n, k, 3)
    mean = nbrs.mean(axis=1, keepdims=True)
    d = nbrs - mean
    cov = np.einsum("nki,nkj->nij", d, d) / k
    _, v = np.linalg.eigh(cov)  # ascending eigenvalues
    return v[:, :, 0]


def _point_covariances(pts: np.ndarray, tree: cKDTree, k: int = 20, eps_cov: float = 1e-3):
    """Plane-regularized covariance per point: eigenvalues -> (eps, 1, 1).

    Equivalent to I - (1 - eps) n n^T with n the 20-NN plane normal.
    """
    n = _point_normals(pts, tree, k)
    return np.eye(3) - (1.0 - eps_cov) * np.einsum("ni,nj->nij", n, n)


def gicp_register(source, target, t_init: RigidTransform, p: LidarParams):
    """Plane-to-plane GICP; returns (transform source->target frame, fitness).

    The returned transform includes t_init. Fitness is the mean squared
    Euclidean distance of the matched correspondences after convergence.
    """
    source = np.asarray(source, dtype=float).reshape(-1, 3)
    target = np.asarray(target, dtype=float).reshape(-1, 3)
    if len(source) < 50 or len(target) < 50:
        raise DegenerateInput(f"GICP needs >= 50 points, got {len(source)}/{len(target)}")

    src_tree = cKDTree(source)
    tgt_tree = cKDTree(target)
    nrm_s = _point_normals(source, src_tree)
    nrm_t = _point_normals(target, tgt_tree)
    a_reg = 1.0 - 1e-3  # regularized covariance = I - a_reg * n n^T

    def matched(t):
        """NN correspondence state at t: Mahalanobis cost plus the pieces
        Gauss-Newton needs, so an accepted line-search probe can be reused
        as the next iteration's state without re-querying the tree.

        The combined covariance 2I - a(n1 n1^T + n2 n2^T) is inverted in
        closed form through its (n1 +/- n2) eigenbasis, which is much
        cheaper than stacking and inverting 3x3 matrices.
        """
        moved = t.apply(source)
        dists, idx = tgt_tree.query(moved, distance_upper_bound=p.gicp_corr_dist)
        valid = np.isfinite(dists)
        n_valid = int(valid.sum())
        if n_valid < 10:
            raise PoorFit(f"only {n_valid} GICP correspondences")
        ps = moved[valid]
        resid = ps - target[idx[valid]]  # (n, 3)
        n1 = nrm_t[idx[valid]]
        n2 = nrm_s[valid] @ t.rotation.T
        n2 = np.where((np.einsum("ni,ni->n", n1, n2) < 0)[:, None], -n2, n2)
        c = np.einsum("ni,ni->n", n1, n2)
        up = n1 + n2
        um = n1 - n2
        up /= np.maximum(np.linalg.norm(up, axis=1), 1e-12)[:, None]
        um /= np.maximum(np.linalg.norm(um, axis=1), 1e-12)[:, None]
        wp = 1.0 / (2.0 - a_reg * (1.0 + c)) - 0.5
        wm = 1.0 / (2.0 - a_reg * (1.0 - c)) - 0.5
        rp = np.einsum("ni,ni->n", up, resid)
        rm = np.einsum("ni,ni->n", um, resid)
        sq = np.einsum("ni,ni->n", resid, resid)
        cost = float((0.5 * sq + wp * rp**2 + wm * rm**2).mean())
        return cost, ps, resid, up, um, wp, wm, n_valid

    t_cur = t_init
    step_norm = np.inf
    state = matched(t_cur)
    for _ in range(p.gicp_max_iter):
        cost, ps, resid, up, um, wp, wm, n_valid = state
        # Gauss-Newton blocks for J_i = [I | -skew(p_i)] and
        # M_i = 0.5 I + wp up up^T + wm um um^T, expanded analytically so no
        # per-point 3x3 or 3x6 temporaries are materialized.
        a = np.cross(up, ps)
        b = np.cross(um, ps)
        h_tt = (
            0.5 * n_valid * np.eye(3)
            + np.einsum("n,ni,nj->ij", wp, up, up)
            + np.einsum("n,ni,nj->ij", wm, um, um)
        )
        h_tw = -(
            0.5 * geometry.skew(ps.sum(axis=0))
            + np.einsum("n,ni,nj->ij", wp, up, a)
            + np.einsum("n,ni,nj->ij", wm, um, b)
        )
        h_ww = (
            0.5 * ((ps**2).sum() * np.eye(3) - ps.T @ ps)
            + np.einsum("n,ni,nj->ij", wp, a, a)
            + np.einsum("n,ni,nj->ij", wm, b, b)
        )
        hess = np.block([[h_tt, h_tw], [h_tw.T, h_ww]])
        rp = (up * resid).sum(axis=1)
        rm = (um * resid).sum(axis=1)
        mr = 0.5 * resid + (wp * rp)[:, None] * up + (wm * rm)[:, None] * um
        grad = np.concatenate([mr.sum(axis=0), np.cross(ps, mr).sum(axis=0)])
        try:
            dx = np.linalg.solve(hess + 1e-9 * np.eye(6), -grad)
        except np.linalg.LinAlgError:
            raise NotConverged("singular GICP normal equations")
        # Line search on the re-matched cost. Correspondence sliding makes
        # unit Gauss-Newton steps shrink the in-plane error only gradually,
        # so extrapolate (double alpha while the cost keeps dropping); near
        # the optimum backtrack instead so the step can vanish.
        alpha, step_norm = 1.0, 0.0
        s1 = matched(geometry.compose(geometry.exp_se3(dx), t_cur))
        if s1[0] < cost:
            best = (s1, 1.0)
            while alpha < 256:
                s2 = matched(geometry.compose(geometry.exp_se3(2 * alpha * dx), t_cur))
                if s2[0] >= best[0][0]:
                    break
                alpha *= 2
                best = (s2, alpha)
            state, alpha = best
            t_cur = geometry.compose(geometry.exp_se3(alpha * dx), t_cur)
            step_norm = float(alpha * np.linalg.norm(dx))
        else:
            while alpha * np.linalg.norm(dx) >= 1e-7:
                alpha *= 0.5
                t_try = geometry.compose(geometry.exp_se3(alpha * dx), t_cur)
                s_try = matched(t_try)
                if s_try[0] < cost:
                    t_cur = t_try
                    state = s_try
                    step_norm = float(alpha * np.linalg.norm(dx))
                    break
        if step_norm < 1e-6:
            break
    if step_norm >= 1e-6:
        raise NotConverged(f"GICP step norm {step_norm:.2e} after {p.gicp_max_iter} iterations")
    moved = t_cur.apply(source)
    dists, _ = tgt_tree.query(moved, distance_upper_bound=p.gicp_corr_dist)
    valid = np.isfinite(dists)
    if not valid.any():
        raise PoorFit("no correspondences at convergence")
    fitness = float((dists[valid] ** 2).mean())
    if fitness >= p.gicp_fitness_eps:
        raise PoorFit(f"fitness {fitness:.3e} >= {p.gicp_fitness_eps:.3e}")
    return t_cur, fitness


def match_points(cloud: np.ndarray, model: np.ndarray, delta: float) -> np.ndarray:
    """Points of `cloud` with a model neighbor strictly closer than delta."""
    cloud = np.asarray(cloud, dtype=float).reshape(-1, 3)
    model = np.asarray(model, dtype=float).reshape(-1, 3)
    if len(model) == 0:
        raise DegenerateInput("empty model cloud")
    d, _ = cKDTree(model).query(cloud)
    out = cloud[d < delta]
    if len(out) < 50:
        raise EmptyMatch(f"{len(out)} matched points")
    return out


def _orient(n, d):
    """Canonical normal sign: c >= 0, ties broken by b >= 0 then a >= 0."""
    a, b, c = n
    flip = c < 0 or (c == 0 and (b < 0 or (b == 0 and a < 0)))
    return (-n, -d) if flip else (n, d)


def _fit_plane_lsq(pts):
    centroid = pts.mean(axis=0)
    _, _, vt = np.linalg.svd(pts - centroid, full_matrices=False)
    n = vt[-1]
    n = n / np.linalg.norm(n)
    d = -float(n @ centroid)
    n, d = _orient(n, d)
    return Plane(float(n[0]), float(n[1]), float(n[2]), float(d))


def ransac_plane(pts: np.ndarray, p: LidarParams, rng=None):
    """RANSAC plane segmentation; consensus plane is least-squares refit to
    its inliers and inliers recomputed against the refit plane."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    if len(pts) < 3:
        raise DegenerateInput(f"{len(pts)} points, need >= 3")
    if rng is None:
        rng = np.random.default_rng(p.rng_seed)
    best_count, best_normal, best_d = -1, None, None
    n_pts = len(pts)
    for _ in range(p.ransac_iters):
        i, j, k = rng.choice(n_pts, size=3, replace=False)
        v1, v2 = pts[j] - pts[i], pts[k] - pts[i]
        n = np.cross(v1, v2)
        norm = np.linalg.norm(n)
        if norm < 1e-12:
            continue
        n = n / norm
        d = -float(n @ pts[i])
        count = int((np.abs(pts @ n + d) < p.ransac_eps).sum())
        if count > best_count:
            best_count, best_normal, best_d = count, n, d
    if best_normal is None:
        raise DegenerateInput("all sampled triplets collinear")
    consensus = pts[np.abs(pts @ best_normal + best_d) < p.ransac_eps]
    if len(consensus) < 3:
        raise DegenerateInput("consensus set degenerate")
    plane = _fit_plane_lsq(consensus)
    inliers = pts[plane.distances(pts) < p.ransac_eps]
    if len(inliers) < 0.3 * n_pts:
        raise LowInlierRatio(f"{len(inliers)}/{n_pts} inliers")
    return plane, inliers


def normalize_plane(inliers: np.ndarray, pl: Plane):
    """Rotate so the plane normal maps to +z; returns (rotated points, R).

    Uses Rx(theta_x) @ Ry(theta_y) when the normal is far from vertical
    (|c| >= 0.1), otherwise the shortest rotation taking the normal to e_z.
    Either way R @ (a,b,c) = (0,0,1) to machine precision.
    """
    inliers = np.asarray(inliers, dtype=float).reshape(-1, 3)
    a, b, c = pl.a, pl.b, pl.c
    if abs(c) >= 0.1:
        theta_y = -np.arctan2(a, c)
        theta_x = np.arctan2(b, np.hypot(a, c))
        rot = geometry.rot_x(theta_x) @ geometry.rot_y(theta_y)
    else:
        n = pl.normal()
        ez = np.array([0.0, 0.0, 1.0])
        axis = np.cross(n, ez)
        s = np.linalg.norm(axis)
        cc = np.clip(float(n @ ez), -1.0, 1.0)
        if s < 1e-12:
            rot = np.eye(3) if cc > 0 else geometry.rot_x(np.pi)
        else:
            rot = geometry.rotation_exp(axis / s * np.arctan2(s, cc))
    xform = RigidTransform(rot, np.zeros(3))
    return inliers @ rot.T, xform


def build_occupancy(flat_pts: np.ndarray, res: float) -> OccupancyGrid:
    """Bin xy coordinates into a boolean grid padded by one cell."""
    flat_pts = np.asarray(flat_pts, dtype=float).reshape(-1, 3)
    if len(flat_pts) == 0:
        raise DegenerateInput("empty input cloud")
    cell = 1.0 / res
    lo = flat_pts[:, :2].min(axis=0) - cell
    hi = flat_pts[:, :2].max(axis=0) + cell
    nx = int(np.floor((hi[0] - lo[0]) * res)) + 1
    ny = int(np.floor((hi[1] - lo[1]) * res)) + 1
    occ = np.zeros((nx, ny), dtype=bool)
    ij = np.floor((flat_pts[:, :2] - lo) * res).astype(int)
    occ[ij[:, 0], ij[:, 1]] = True
    return OccupancyGrid(occ, lo, float(res))


def find_target_region(g: OccupancyGrid, board_size: float):
    """Top-left index (i*, j*) of the densest board-sized window."""
    s = max(int(round(board_size * g.res)), 1)
    nx, ny = g.occupied.shape
    if nx < s or ny < s:
        raise GridTooSmall(f"grid {nx}x{ny} smaller than {s}-cell window")
    c = np.zeros((nx + 1, ny + 1), dtype=np.int64)
    c[1:, 1:] = np.cumsum(np.cumsum(g.occupied, axis=0), axis=1)
    sums = c[s:, s:] - c[:-s, s:] - c[s:, :-s] + c[:-s, :-s]
    flat = int(np.argmax(sums))  # row-major: first max = smallest (i, j)
    return flat // sums.shape[1], flat % sums.shape[1]


def _disc_stencil(radius_cells: float):
    """Cells lying fully inside the circle (center within radius minus the
    cell circumradius). Boundary cells straddle the hole edge and alias the
    count as the mask shifts, which would pull the minimum off-center."""
    inner = max(radius_cells - np.sqrt(0.5) - 1e-9, 1.0)
    r = int(np.ceil(inner))
    di, dj = np.meshgrid(np.arange(-r, r + 1), np.arange(-r, r + 1), indexing="ij")
    mask = di**2 + dj**2 <= inner**2
    return di[mask], dj[mask]


def refine_circles(g: OccupancyGrid, window, spec: TargetSpec, preferred=None):
    """Hole centers in the grid (rotated-plane) frame, canonical order.

    Search is over integer cell displacements within +/-10 cells of the
    design offsets around the window center; the displacement minimizing
    occupied cells inside the circular mask wins, ties broken toward the
    smallest displacement. When `preferred` (continuous center estimates in
    the grid frame, e.g. from the registered board pose) is given, ties are
    instead broken toward it, and if its own cell attains the minimum the
    preferred point is returned unchanged so its sub-cell precision is kept.
    """
    i0, j0 = window
    s_cells = spec.board_width * g.res
    win_center = g.origin + (np.array([i0, j0], dtype=float) + s_cells / 2.0) * g.cell
    initial_centers = [win_center + np.array(o) for o in spec.circle_offsets]
    radius_cells = spec.circle_radius * g.res
    di, dj = _disc_stencil(radius_cells)
    mask_area = len(di)
    nx, ny = g.occupied.shape
    shifts = sorted(
        ((si, sj) for si in range(-10, 11) for sj in range(-10, 11)),
        key=lambda s: (s[0] * s[0] + s[1] * s[1], s),
    )
    centers = []
    for k, c0 in enumerate(initial_centers):
        ci, cj = np.floor((np.asarray(c0) - g.origin) * g.res).astype(int)
        counts = {}
        for si, sj in shifts:
            ii = ci + si + di
            jj = cj + sj + dj
            inside = (ii >= 0) & (ii < nx) & (jj >= 0) & (jj < ny)
            count = int(g.occupied[ii[inside], jj[inside]].sum())
            count += int(mask_area - inside.sum())  # off-grid counts as occupied
            counts[(si, sj)] = count
        best_count = min(counts.values())
        if best_count > 0.5 * mask_area:
            raise NoVoidFound(f"best mask occupancy {best_count}/{mask_area}")
        ties = [s for s in shifts if counts[s] == best_count]
        if preferred is None:
            si, sj = ties[0]  # smallest displacement
            centers.append(np.asarray(c0, dtype=float) + np.array([si, sj]) * g.cell)
            continue
        want = np.asarray(preferred[k], dtype=float)[:2]
        cell_of = lambda s: np.array([ci + s[0], cj + s[1]])
        pos_of = lambda s: g.origin + (cell_of(s) + 0.5) * g.cell
        si, sj = min(ties, key=lambda s: float(np.sum((pos_of(s) - want) ** 2)))
        want_cell = np.floor((want - g.origin) * g.res).astype(int)
        if np.array_equal(want_cell, cell_of((si, sj))):
            centers.append(want)
        else:
            centers.append(pos_of((si, sj)))
    return centers


def check_circle_geometry(centers_2d, spec: TargetSpec, tol: float = 0.06) -> None:
    """Reject refined centers whose pairwise distances deviate from the design
    pattern by more than tol. A center that latched onto the wrong void (e.g. a
    spurious occupancy gap near the board edge) lands 2+ circle radii off and
    would silently poison the global solve."""
    est = np.asarray(centers_2d, dtype=float)[:, :2]
    design = circle_centers_board(spec)[:, :2]
    for i in range(len(design)):
        for j in range(i + 1, len(design)):
            d_est = float(np.linalg.norm(est[i] - est[j]))
            d_ref = float(np.linalg.norm(design[i] - design[j]))
            if abs(d_est - d_ref) > tol:
                raise InconsistentCircles(
                    f"centers {i}-{j} distance {d_est:.3f} m vs design "
                    f"{d_ref:.3f} m (tol {tol} m)"
                )


def rough_board_pose(cloud: np.ndarray, p: LidarParams) -> RigidTransform:
    """Fallback board-pose guess when no operator initialization exists:
    centroid of the filtered cloud plus its PCA plane normal (oriented back
    toward the sensor). In-plane orientation is arbitrary, so downstream
    ordering resolution matters more when this path is used."""
    filtered = filter_cloud(cloud, p)
    centroid = filtered.mean(axis=0)
    _, _, vt = np.linalg.svd(filtered - centroid, full_matrices=False)
    z = vt[-1] / np.linalg.norm(vt[-1])
    if float(z @ centroid) > 0:  # board z should face the sensor
        z = -z
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(up, z)
    if np.linalg.norm(x) < 1e-6:
        x = np.cross(np.array([1.0, 0.0, 0.0]), z)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    return RigidTransform(np.column_stack([x, y, z]), centroid)


def detect_target_lidar(
    cloud: np.ndarray,
    spec: TargetSpec,
    t_init: RigidTransform,
    p: LidarParams,
    mask_pitch: float = 0.015,
) -> LidarDetection:
    """Full board detection: filter -> GICP -> match -> RANSAC -> normalize
    -> occupancy -> window -> circle refinement -> 3D lift."""
    mask = generate_mask_cloud(spec, mask_pitch)
    try:
        filtered = filter_cloud(cloud, p)
        t_refined, fitness = gicp_register(mask, filtered, t_init, p)
        matched = match_points(filtered, t_refined.apply(mask), p.nn_delta)
        plane, inliers = ransac_plane(matched, p)
        # Orient the fitted normal like the estimated board z so the grid
        # frame keeps the board's handedness.
        board_z = t_refined.rotation @ np.array([0.0, 0.0, 1.0])
        if float(plane.normal() @ board_z) < 0:
            plane = Plane(-plane.a, -plane.b, -plane.c, -plane.d)
        rotated, r_plane = normalize_plane(inliers, plane)
        # Undo the in-plane rotation so design offsets are axis-aligned.
        bx = r_plane.rotation @ (t_refined.rotation @ np.array([1.0, 0.0, 0.0]))
        yaw = np.arctan2(bx[1], bx[0])
        r_yaw = geometry.rot_z(-yaw)
        grid_rot = r_yaw @ r_plane.rotation
        grid_pts = inliers @ grid_rot.T
        grid = build_occupancy(grid_pts, p.grid_res)
        window = find_target_region(grid, spec.board_width)
        predicted = (t_refined.apply(circle_centers_board(spec))) @ grid_rot.T
        centers_2d = refine_circles(grid, window, spec, preferred=[c[:2] for c in predicted])
        check_circle_geometry(centers_2d, spec)
    except LidarStageError as e:
        raise type(e)(f"stage '{e.stage}': {e}") from e
    z0 = float(grid_pts[:, 2].mean())
    n = plane.normal()
    centers = []
    for c2 in centers_2d:
        pt = grid_rot.T @ np.array([c2[0], c2[1], z0])
        pt = pt - (float(n @ pt) + plane.d) * n  # snap exactly onto the plane
        centers.append(pt)
    return LidarDetection(t_refined, np.asarray(centers), fitness)
