"""Synthetic scenes with ground truth: ray-cast LiDAR clouds of the board
(with its holes) over a ground plane, and noisy camera corner detections.

Everything is deterministic given the scene seed; per-render generators are
derived from (seed, sequence, sensor) so renders are order-independent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import geometry
from .camera import CornerObservation
from .errors import InfeasibleLayout
from .geometry import Intrinsics, RigidTransform
from .optimizer import SensorId
from .target import TargetSpec, checker_corners_board, circle_centers_board


@dataclass(frozen=True)
class NoiseModel:
    lidar_sigma: float = 0.0  # range noise along the ray, meters
    pixel_sigma: float = 0.0  # corner noise, pixels
    dropout: float = 0.0  # corner dropout probability


@dataclass(frozen=True)
class ScanPattern:
    """Ideal spinning scanner: uniform azimuth/elevation ray grid."""

    az_res_deg: float = 0.2
    el_min_deg: float = -15.0
    el_max_deg: float = 15.0
    el_res_deg: float = 1.0
    max_range: float = 30.0


@dataclass(frozen=True)
class Scene:
    sensors: tuple  # ((SensorId, sensor->world pose), ...)
    intrinsics: dict  # SensorId -> Intrinsics (cameras only)
    board_poses: tuple  # board->world pose per sequence
    spec: TargetSpec
    noise: NoiseModel
    seed: int
    scan: ScanPattern = ScanPattern()

    def pose_of(self, sensor: SensorId) -> RigidTransform:
        for s, t in self.sensors:
            if s == sensor:
                return t
        raise KeyError(str(sensor))

    @property
    def sensor_ids(self):
        return [s for s, _ in self.sensors]


@dataclass(frozen=True)
class GroundTruth:
    sensor_poses: dict  # SensorId -> sensor->world
    board_poses: tuple
    spec: TargetSpec

    def relative(self, a: SensorId, b: SensorId) -> RigidTransform:
        """Exact a->b transform."""
        return geometry.compose(geometry.invert(self.sensor_poses[b]), self.sensor_poses[a])

    def centers_in_sensor(self, sensor: SensorId, sequence: int) -> np.ndarray:
        world = self.board_poses[sequence].apply(circle_centers_board(self.spec))
        return geometry.invert(self.sensor_poses[sensor]).apply(world)

    def board_in_sensor(self, sensor: SensorId, sequence: int) -> RigidTransform:
        return geometry.compose(
            geometry.invert(self.sensor_poses[sensor]), self.board_poses[sequence]
        )


def _rng(seed, *tags):
    return np.random.default_rng([seed & 0x7FFFFFFF, *tags])


_CAMERA_AXES = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])
# camera x -> world -y, camera y -> world -z, camera z -> world +x (looks +x)

_BOARD_BASE = np.array([[0.0, 0.0, -1.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
# board x -> world -y, board y -> world +z, board z -> world -x (faces sensors)


def default_intrinsics() -> Intrinsics:
    return Intrinsics(700.0, 700.0, 639.5, 359.5, 1280, 720)


def sensor_sees_board(scene_or_args, sensor=None, sequence=None, **_):
    scene = scene_or_args
    return _visible(
        scene.pose_of(sensor),
        sensor,
        scene.board_poses[sequence],
        scene.spec,
        scene.intrinsics.get(sensor),
        scene.scan,
    )


def _visible(t_sw, sensor, t_bw, spec, intr, scan):
    corners = np.array(
        [
            [sx * spec.board_width / 2, sy * spec.board_height / 2, 0.0]
            for sx in (-1, 1)
            for sy in (-1, 1)
        ]
        + [[0.0, 0.0, 0.0]]
    )
    pts_s = geometry.invert(t_sw).apply(t_bw.apply(corners))
    if sensor.kind == "camera":
        if np.any(pts_s[:, 2] <= 0.1):
            return False
        uv = np.stack(
            [
                intr.fx * pts_s[:, 0] / pts_s[:, 2] + intr.cx,
                intr.fy * pts_s[:, 1] / pts_s[:, 2] + intr.cy,
            ],
            axis=1,
        )
        return bool(
            np.all((uv[:, 0] >= 5) & (uv[:, 0] < intr.width - 5))
            and np.all((uv[:, 1] >= 5) & (uv[:, 1] < intr.height - 5))
        )
    rng_d = np.linalg.norm(pts_s, axis=1)
    el = np.rad2deg(np.arcsin(pts_s[:, 2] / np.maximum(rng_d, 1e-9)))
    return bool(
        np.all(rng_d < scan.max_range)
        and np.all(np.hypot(pts_s[:, 0], pts_s[:, 1]) < 7.9)  # inside the d_max gate
        and np.all(el > scan.el_min_deg + 0.5)
        and np.all(el < scan.el_max_deg - 0.5)
        and np.all(pts_s[:, 2] > 0.09)  # clears the h_min ground cut
    )


def make_scene(
    n_lidars: int = 2,
    m_cameras: int = 3,
    layout: str = "default",
    sequences: int = 20,
    spec: TargetSpec | None = None,
    noise: NoiseModel | None = None,
    seed: int = 0,
    scan: ScanPattern | None = None,
    board_range=(5.5, 6.8),
    board_bearing_deg: float = 40.0,
    board_z: float = 1.25,
    min_observers: int = 2,
    camera_intrinsics=None,
) -> Scene:
    """Deterministic scene: sensors near the origin, cameras fanned over the
    bearing arc the boards are sampled from. Spreading the boards over a wide
    arc is what makes sensor rotations observable; a narrow cone lets a
    rotation error trade against translation along the viewing direction.
    Every sequence is visible to at least `min_observers` sensors or
    InfeasibleLayout is raised."""
    if n_lidars + m_cameras < 2:
        raise InfeasibleLayout("need at least two sensors")
    if layout != "default":
        raise InfeasibleLayout(f"unknown layout {layout!r}")
    spec = spec or TargetSpec()
    noise = noise or NoiseModel()
    scan = scan or ScanPattern()
    rng = _rng(seed, 0)

    sensors = []
    intrinsics = {}
    for j in range(m_cameras):
        y = (j - (m_cameras - 1) / 2.0) * 0.8
        if m_cameras > 1:
            yaw = np.deg2rad((j / (m_cameras - 1) - 0.5) * 2 * 0.5 * board_bearing_deg)
        else:
            yaw = 0.0
        rot = geometry.rot_z(yaw) @ _CAMERA_AXES
        sid = SensorId("camera", j)
        sensors.append((sid, RigidTransform(rot, np.array([0.0, y, 1.2]))))
        if camera_intrinsics is not None:
            intrinsics[sid] = camera_intrinsics[j]
        else:
            intrinsics[sid] = default_intrinsics()
    for i in range(n_lidars):
        y = (i - (n_lidars - 1) / 2.0) * 1.0
        rot = geometry.rot_z(np.deg2rad(rng.uniform(-3, 3)))
        sensors.append((SensorId("lidar", i), RigidTransform(rot, np.array([0.2, y, 0.5]))))

    boards = []
    for s in range(sequences):
        ok = None
        for _ in range(300):
            bearing = np.deg2rad(rng.uniform(-board_bearing_deg, board_bearing_deg))
            dist = rng.uniform(*board_range)
            pos = np.array(
                [
                    dist * np.cos(bearing),
                    dist * np.sin(bearing),
                    board_z + rng.uniform(-0.05, 0.05),
                ]
            )
            # guarantee 8-20 deg of out-of-plane tilt: a fronto-parallel board
            # leaves the planar-PnP depth/tilt ambiguity ill-conditioned
            ux, uy = rng.uniform(-1, 1), rng.uniform(-1, 1)
            perturb = geometry.rotation_from_euler_xyz(
                np.sign(ux) * (8.0 + 12.0 * abs(ux)),
                np.sign(uy) * (8.0 + 12.0 * abs(uy)),
                rng.uniform(-20, 20),
            )
            facing = geometry.rot_z(bearing) @ _BOARD_BASE  # face back at the rig
            t_bw = RigidTransform(facing @ perturb, pos)
            seen = [
                sid
                for sid, t_sw in sensors
                if _visible(t_sw, sid, t_bw, spec, intrinsics.get(sid), scan)
            ]
            lidars_seen = sum(1 for sid in seen if sid.kind == "lidar")
            cams_seen = len(seen) - lidars_seen
            # Every LiDAR should capture every board (spinning scanners have
            # no azimuth limit) and at least one camera must anchor it.
            if (
                len(seen) >= min_observers
                and lidars_seen == n_lidars
                and (cams_seen >= 1 or m_cameras == 0)
            ):
                ok = t_bw
                break
        if ok is None:
            raise InfeasibleLayout(f"could not place a visible board for sequence {s}")
        boards.append(ok)
    return Scene(tuple(sensors), intrinsics, tuple(boards), spec, noise, seed, scan)


def render_lidar(scene: Scene, sensor: SensorId, sequence: int) -> np.ndarray:
    """Ray-cast cloud in the sensor frame: board plane (holes skipped) over
    the z=0 ground plane, nearest hit per ray, range noise applied."""
    if sensor.kind != "lidar":
        raise ValueError(f"{sensor} is not a lidar")
    scan = scene.scan
    t_sw = scene.pose_of(sensor)
    t_bw = scene.board_poses[sequence]
    az = np.deg2rad(np.arange(0.0, 360.0, scan.az_res_deg))
    el = np.deg2rad(np.arange(scan.el_min_deg, scan.el_max_deg + 1e-9, scan.el_res_deg))
    azg, elg = np.meshgrid(az, el, indexing="ij")
    dirs_s = np.stack(
        [np.cos(elg) * np.cos(azg), np.cos(elg) * np.sin(azg), np.sin(elg)], axis=-1
    ).reshape(-1, 3)
    dirs_w = dirs_s @ t_sw.rotation.T
    origin = t_sw.translation

    ranges = np.full(len(dirs_w), np.inf)

    # board plane
    n = t_bw.rotation[:, 2]
    denom = dirs_w @ n
    num = float((t_bw.translation - origin) @ n)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_hit = np.where(np.abs(denom) > 1e-12, num / denom, np.inf)
    cand = (t_hit > 0.05) & np.isfinite(t_hit)
    if cand.any():
        hits_w = origin + t_hit[cand, None] * dirs_w[cand]
        q = geometry.invert(t_bw).apply(hits_w)
        inside = (np.abs(q[:, 0]) <= scene.spec.board_width / 2) & (
            np.abs(q[:, 1]) <= scene.spec.board_height / 2
        )
        for ox, oy in scene.spec.circle_offsets:
            inside &= (q[:, 0] - ox) ** 2 + (q[:, 1] - oy) ** 2 > scene.spec.circle_radius**2
        idx = np.where(cand)[0][inside]
        ranges[idx] = t_hit[idx]

    # ground plane z = 0 (board occludes ground along the same ray)
    dz = dirs_w[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        t_g = np.where(dz < -1e-12, -origin[2] / dz, np.inf)
    ranges = np.minimum(ranges, np.where(t_g > 0.05, t_g, np.inf))

    valid = ranges <= scan.max_range
    r = ranges[valid]
    if scene.noise.lidar_sigma > 0:
        rng = _rng(scene.seed, 1, sequence, sensor.index)
        r = r + rng.normal(0.0, scene.noise.lidar_sigma, size=len(r))
    return r[:, None] * dirs_s[valid]


def render_camera(scene: Scene, sensor: SensorId, sequence: int):
    """Noisy checker-corner observations; corners outside the image or hit
    by dropout are omitted, ids preserved."""
    if sensor.kind != "camera":
        raise ValueError(f"{sensor} is not a camera")
    intr = scene.intrinsics[sensor]
    t_bc = geometry.compose(
        geometry.invert(scene.pose_of(sensor)), scene.board_poses[sequence]
    )
    rng = _rng(scene.seed, 2, sequence, sensor.index)
    out = []
    for cid, pt in checker_corners_board(scene.spec):
        p = t_bc.apply(pt)
        if p[2] <= 1e-3:
            continue
        uv = np.array([intr.fx * p[0] / p[2] + intr.cx, intr.fy * p[1] / p[2] + intr.cy])
        if scene.noise.pixel_sigma > 0:
            uv = uv + rng.normal(0.0, scene.noise.pixel_sigma, size=2)
        dropped = scene.noise.dropout > 0 and rng.random() < scene.noise.dropout
        if dropped:
            continue
        if not (0 <= uv[0] < intr.width and 0 <= uv[1] < intr.height):
            continue
        out.append(CornerObservation(cid, (float(uv[0]), float(uv[1]))))
    return out


def ground_truth(scene: Scene) -> GroundTruth:
    return GroundTruth({s: t for s, t in scene.sensors}, scene.board_poses, scene.spec)


def perturbed_board_init(
    scene: Scene, sensor: SensorId, sequence: int, trans_sigma=0.08, rot_sigma_deg=4.0
) -> RigidTransform:
    """Rough board->sensor initial pose: ground truth with a seeded
    perturbation, mimicking an operator-provided guess."""
    gt = ground_truth(scene).board_in_sensor(sensor, sequence)
    rng = _rng(scene.seed, 3, sequence, sensor.index)
    dw = rng.normal(0.0, np.deg2rad(rot_sigma_deg), size=3)
    dt = rng.normal(0.0, trans_sigma, size=3)
    # rotate about the board's own position so the perturbation stays local
    # (left-composing would sweep the distant board through range * angle)
    return RigidTransform(geometry.rotation_exp(dw) @ gt.rotation, gt.translation + dt)
