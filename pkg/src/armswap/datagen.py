"""Procedural 2-D renderer for two unpaired arm domains.

World coordinates are pixels with the origin at the bottom-left corner and
``y`` pointing up; pixel ``(row, col)`` has its center at
``(col + 0.5, H - row - 0.5)``.

Domain A is a 3-link orange arm with a parallel-jaw gripper, domain B a
2-link silver arm with a suction disc.  Every clip comes with exact masks and
a clean plate, and :func:`render_paired_oracle` re-renders a clip's motion
with the other arm for evaluation.
"""
from __future__ import annotations

import dataclasses
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InfeasibleTask, InvalidArgument
from .video import (
    DEFAULT_FPS,
    BackgroundVideo,
    MaskSequence,
    VideoTensor,
    load_frames,
    load_masks,
    save_frames,
    save_masks,
)

DATASET_VERSION = "1"
DOMAINS = ("A", "B")
TASKS = ("reach", "pick_lift")
GRIPPERS = {"A": "parallel_jaw", "B": "suction_disc"}
N_LINKS = {"A": 3, "B": 2}

IK_DAMPING = 0.1
IK_ITERATIONS = 50
MAX_JOINT_SPEED = 1.2  # rad / frame
LIGHT_DIR = np.array([-0.6, 0.8])

# background colour families per domain; arm palettes stay clear of them
_ENV_PALETTES = {
    "A": [(0.42, 0.36, 0.28), (0.30, 0.38, 0.26), (0.36, 0.30, 0.32)],
    "B": [(0.22, 0.30, 0.44), (0.26, 0.36, 0.40), (0.20, 0.26, 0.34)],
}
_ARM_PALETTES = {
    "A": [(0.96, 0.55, 0.12), (0.92, 0.48, 0.10), (0.98, 0.62, 0.20)],
    "B": [(0.80, 0.81, 0.84), (0.74, 0.76, 0.80), (0.86, 0.86, 0.88)],
}
_OBJECT_COLORS = [(0.85, 0.15, 0.15), (0.15, 0.65, 0.20), (0.95, 0.85, 0.15), (0.55, 0.20, 0.75)]


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: tuple
    start_position: tuple
    radius: float


@dataclass(frozen=True)
class SceneSpec:
    domain_id: str
    link_lengths: tuple
    link_widths: tuple
    arm_palette: tuple
    gripper_style: str
    base_anchor: tuple
    background_texture_seed: int
    object_spec: ObjectSpec
    frame_size: tuple
    rng_seed: int
    rest_pose: tuple = ()
    gripper_size: float = 3.0
    evaluation_only: bool = False
    env_domain: str = ""

    @property
    def n_links(self) -> int:
        return len(self.link_lengths)

    @property
    def reach(self) -> float:
        return float(sum(self.link_lengths))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        obj = d.pop("object_spec")
        obj = ObjectSpec(
            shape=obj["shape"],
            color=tuple(obj["color"]),
            start_position=tuple(obj["start_position"]),
            radius=obj["radius"],
        )
        tuples = ("link_lengths", "link_widths", "base_anchor", "frame_size", "rest_pose")
        for k in tuples:
            d[k] = tuple(d[k])
        d["arm_palette"] = tuple(tuple(c) for c in d["arm_palette"])
        return cls(object_spec=obj, **d)


@dataclass
class Trajectory:
    joint_angles: np.ndarray
    gripper_open: np.ndarray
    end_effector_path: np.ndarray
    task: str = "reach"

    @property
    def n_frames(self) -> int:
        return self.joint_angles.shape[0]

    @property
    def grasp_frame(self):
        closed = np.flatnonzero(~self.gripper_open)
        return int(closed[0]) if closed.size else None

    def to_dict(self) -> dict:
        return {
            "joint_angles": self.joint_angles.tolist(),
            "gripper_open": self.gripper_open.tolist(),
            "end_effector_path": self.end_effector_path.tolist(),
            "task": self.task,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(
            joint_angles=np.asarray(d["joint_angles"], dtype=np.float64),
            gripper_open=np.asarray(d["gripper_open"], dtype=bool),
            end_effector_path=np.asarray(d["end_effector_path"], dtype=np.float64),
            task=d.get("task", "reach"),
        )


@dataclass
class RenderedClip:
    video: VideoTensor
    masks: MaskSequence
    background: BackgroundVideo
    scene: SceneSpec
    trajectory: Trajectory
    arm_layer: np.ndarray | None = field(default=None, repr=False)

    @property
    def evaluation_only(self) -> bool:
        return self.scene.evaluation_only


# --------------------------------------------------------------------------
# scene specs


def _domain_rng(domain, seed, salt=0):
    return np.random.default_rng([int(seed), DOMAINS.index(domain), salt])


def make_scene_spec(domain: str, seed: int, frame_size=(64, 64)) -> SceneSpec:
    if domain not in DOMAINS:
        raise InvalidArgument(f"unknown domain {domain!r}")
    h, w = (int(v) for v in frame_size)
    if h < 32 or w < 32:
        raise InvalidArgument(f"frame size must be at least 32x32, got {h}x{w}")
    rng = _domain_rng(domain, seed)
    m = min(h, w)
    s = m / 64.0

    width = (4.0 if domain == "A" else 5.0) * s
    gripper = 3.0 * s
    base = (w / 2.0, h / 2.0)
    # link chain + gripper + half width must clear the frame from a centred base
    budget = m / 2.0 - 2.0 - gripper - width / 2.0
    total = budget * rng.uniform(0.9, 1.0)
    if domain == "A":
        props = np.array([0.40, 0.34, 0.26]) + rng.uniform(-0.03, 0.03, 3)
    else:
        props = np.array([0.5, 0.5]) + np.array([1, -1]) * rng.uniform(0.0, 0.03)
    lengths = tuple(float(v) for v in total * props / props.sum())

    pal = _ARM_PALETTES[domain][rng.integers(len(_ARM_PALETTES[domain]))]
    jitter = rng.uniform(-0.03, 0.03, 3)
    main = tuple(float(np.clip(c + j, 0.0, 1.0)) for c, j in zip(pal, jitter))
    joint = tuple(float(c * 0.55) for c in main)
    palette = (main, joint)

    if domain == "A":
        rest = (np.pi / 2 + rng.uniform(-0.15, 0.15), -0.7, -0.7)
    else:
        rest = (np.pi / 2 + rng.uniform(-0.15, 0.15), -1.2)

    obj_radius = 3.0 * s
    lift = 0.14 * h
    ref_reach = total
    for _ in range(1000):
        side = rng.choice([-1.0, 1.0])
        dx = side * rng.uniform(0.35, 0.75) * ref_reach
        dy = -rng.uniform(0.2, 0.6) * ref_reach
        d0 = np.hypot(dx, dy)
        d1 = np.hypot(dx, dy + lift)
        if 0.4 * ref_reach <= d0 <= 0.85 * ref_reach and 0.3 * ref_reach <= d1 <= 0.85 * ref_reach:
            break
    obj = ObjectSpec(
        shape=str(rng.choice(["cube", "ball"])),
        color=tuple(float(c) for c in _OBJECT_COLORS[rng.integers(len(_OBJECT_COLORS))]),
        start_position=(float(base[0] + dx), float(base[1] + dy)),
        radius=float(obj_radius),
    )
    return SceneSpec(
        domain_id=domain,
        link_lengths=lengths,
        link_widths=tuple([float(width)] * N_LINKS[domain]),
        arm_palette=palette,
        gripper_style=GRIPPERS[domain],
        base_anchor=base,
        background_texture_seed=int(rng.integers(2**31 - 1)),
        object_spec=obj,
        frame_size=(h, w),
        rng_seed=int(seed),
        rest_pose=tuple(float(a) for a in rest),
        gripper_size=float(gripper),
    )


# --------------------------------------------------------------------------
# kinematics


def forward_kinematics(spec: SceneSpec, angles) -> np.ndarray:
    """Joint positions (J+1) x 2, base first, for relative joint angles."""
    angles = np.asarray(angles, dtype=np.float64)
    pts = [np.asarray(spec.base_anchor, dtype=np.float64)]
    heading = 0.0
    for a, length in zip(angles, spec.link_lengths):
        heading += a
        pts.append(pts[-1] + length * np.array([np.cos(heading), np.sin(heading)]))
    return np.stack(pts)


def _jacobian(spec, angles):
    pts = forward_kinematics(spec, angles)
    tip = pts[-1]
    J = np.zeros((2, len(angles)))
    for k in range(len(angles)):
        r = tip - pts[k]
        J[:, k] = (-r[1], r[0])
    return J


def ik_dls(spec, target, init, damping=IK_DAMPING, iterations=IK_ITERATIONS):
    """Damped least-squares IK warm-started at ``init``."""
    theta = np.array(init, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    lam2 = damping**2
    for _ in range(iterations):
        err = target - forward_kinematics(spec, theta)[-1]
        if np.hypot(*err) < 1e-4:
            break
        J = _jacobian(spec, theta)
        theta += J.T @ np.linalg.solve(J @ J.T + lam2 * np.eye(2), err)
    return theta


def ik_two_link(spec, target, prev):
    """Closed-form 2-link IK; picks the elbow branch nearest ``prev``."""
    l1, l2 = spec.link_lengths
    d = np.asarray(target, dtype=np.float64) - np.asarray(spec.base_anchor)
    r2 = float(d @ d)
    c = (r2 - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    c = float(np.clip(c, -1.0, 1.0))
    best = None
    for sign in (1.0, -1.0):
        q2 = sign * np.arccos(c)
        q1 = np.arctan2(d[1], d[0]) - np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2))
        cand = np.array([q1, q2])
        # unwrap towards the previous solution for continuity
        cand = prev + (cand - prev + np.pi) % (2 * np.pi) - np.pi
        cost = np.abs(cand - prev).sum()
        if best is None or cost < best[0]:
            best = (cost, cand)
    return best[1]


def solve_ik(spec, target, prev):
    if spec.n_links == 2:
        return ik_two_link(spec, target, np.asarray(prev, dtype=np.float64))
    return ik_dls(spec, target, prev)


def _polar(v):
    return float(np.hypot(*v)), float(np.arctan2(v[1], v[0]))


def _ease(u):
    return 0.5 - 0.5 * np.cos(np.pi * np.clip(u, 0.0, 1.0))


def _follow_path(spec, path, init, tol):
    angles = []
    prev = np.asarray(init, dtype=np.float64)
    for p in path:
        # several warm-started passes help DLS near the workspace edge
        q = solve_ik(spec, p, prev)
        if spec.n_links > 2:
            for _ in range(3):
                if np.hypot(*(forward_kinematics(spec, q)[-1] - p)) < 1e-3:
                    break
                q = ik_dls(spec, p, q)
        resid = np.hypot(*(forward_kinematics(spec, q)[-1] - p))
        if resid > tol:
            raise InfeasibleTask(
                f"target ({p[0]:.1f}, {p[1]:.1f}) unreachable by domain {spec.domain_id} arm "
                f"(residual {resid:.2f} px)"
            )
        angles.append(q)
        prev = q
    return np.stack(angles)


def _check_speed(angles, limit=MAX_JOINT_SPEED):
    if len(angles) > 1:
        step = np.abs(np.diff(angles, axis=0)).max()
        if step > limit:
            raise InfeasibleTask(f"joint speed {step:.2f} rad/frame exceeds {limit}")


def _in_reach(spec, point):
    d = np.hypot(*(np.asarray(point) - np.asarray(spec.base_anchor)))
    inner = 0.0
    if spec.n_links == 2:
        inner = abs(spec.link_lengths[0] - spec.link_lengths[1])
    return inner <= d <= spec.reach


def sample_task_trajectory(spec: SceneSpec, n_frames: int, task: str, seed: int) -> Trajectory:
    if n_frames < 2:
        raise InvalidArgument("n_frames must be >= 2")
    if task not in TASKS:
        raise InvalidArgument(f"unknown task {task!r}")
    if task == "pick_lift" and n_frames < 3:
        raise InvalidArgument("pick_lift needs at least 3 frames")
    rng = np.random.default_rng([int(seed), 7])
    h = spec.frame_size[0]
    obj = np.asarray(spec.object_spec.start_position, dtype=np.float64)
    if not _in_reach(spec, obj):
        raise InfeasibleTask(
            f"object at distance {np.hypot(*(obj - spec.base_anchor)):.1f} px is outside "
            f"the arm's reach {spec.reach:.1f} px"
        )
    rest_pt = forward_kinematics(spec, spec.rest_pose)[-1]
    last = n_frames - 1
    if task == "reach":
        grasp = last
    else:
        frac = rng.uniform(0.5, 0.62)
        grasp = int(np.clip(round(frac * last), 1, last - 1))

    path = np.empty((n_frames, 2))
    gripper_open = np.ones(n_frames, dtype=bool)
    # approach in polar coordinates about the base so the path never cuts
    # through the base, where joint solutions flip
    base = np.asarray(spec.base_anchor, dtype=np.float64)
    r0, a0 = _polar(rest_pt - base)
    r1, a1 = _polar(obj - base)
    da = (a1 - a0 + np.pi) % (2 * np.pi) - np.pi
    speed = rng.uniform(0.9, 1.1)
    for i in range(grasp + 1):
        u = _ease(min(1.0, speed * i / grasp)) if i < grasp else 1.0
        r, a = (1 - u) * r0 + u * r1, a0 + u * da
        path[i] = base + r * np.array([np.cos(a), np.sin(a)])
    if task == "pick_lift":
        lift = 0.14 * h
        lifted = obj + np.array([0.0, lift])
        if not _in_reach(spec, lifted):
            raise InfeasibleTask("lift target outside reach")
        for i in range(grasp + 1, n_frames):
            u = _ease((i - grasp) / (last - grasp))
            path[i] = (1 - u) * obj + u * lifted
        gripper_open[grasp:] = False

    angles = _follow_path(spec, path, spec.rest_pose, tol=0.5)
    _check_speed(angles)
    ee = np.stack([forward_kinematics(spec, q)[-1] for q in angles])
    return Trajectory(angles, gripper_open, ee, task=task)


def object_path(spec: SceneSpec, traj: Trajectory) -> np.ndarray:
    """Object centre per frame; the object is welded to the gripper after grasp."""
    start = np.asarray(spec.object_spec.start_position, dtype=np.float64)
    path = np.repeat(start[None], traj.n_frames, axis=0)
    g = traj.grasp_frame
    if traj.task == "pick_lift" and g is not None:
        offset = start - traj.end_effector_path[g]
        path[g:] = traj.end_effector_path[g:] + offset
    return path


# --------------------------------------------------------------------------
# rasterisation


def _pixel_centres(h, w):
    cols, rows = np.meshgrid(np.arange(w), np.arange(h))
    return cols + 0.5, h - rows - 0.5


def _segment_coords(px, py, a, b):
    """Distance to segment ab and signed perpendicular offset per pixel."""
    ab = b - a
    L2 = float(ab @ ab) or 1e-12
    t = np.clip(((px - a[0]) * ab[0] + (py - a[1]) * ab[1]) / L2, 0.0, 1.0)
    qx, qy = a[0] + t * ab[0], a[1] + t * ab[1]
    dist = np.hypot(px - qx, py - qy)
    n = np.array([-ab[1], ab[0]]) / np.sqrt(L2)
    signed = (px - a[0]) * n[0] + (py - a[1]) * n[1]
    return dist, signed, n


def _shade(signed, half_width, normal):
    # single directional light: brighter on the lit side of a cylinder
    s = np.clip(signed / max(half_width, 1e-6), -1.0, 1.0)
    lit = float(normal @ LIGHT_DIR)
    return 0.78 + 0.22 * s * lit


def _environment(spec: SceneSpec) -> np.ndarray:
    """Static textured environment, 3 x H x W in [0, 1]."""
    from scipy.ndimage import gaussian_filter

    h, w = spec.frame_size
    rng = np.random.default_rng(spec.background_texture_seed)
    pal = _ENV_PALETTES[spec.env_domain or spec.domain_id]
    c0 = np.array(pal[rng.integers(len(pal))])
    c1 = np.array(pal[rng.integers(len(pal))]) * 0.8
    noise = gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 10, mode="wrap")
    noise /= np.abs(noise).max() + 1e-9
    ramp = np.linspace(0.0, 1.0, h)[:, None] * np.ones((1, w))
    # table edge below the arm base
    table_y = int(h * rng.uniform(0.55, 0.7))
    env = c0[:, None, None] * (1 - 0.35 * ramp) + c1[:, None, None] * 0.35 * ramp
    env = env + 0.06 * noise[None]
    env[:, table_y:, :] *= 0.85
    return np.clip(env, 0.0, 1.0)


def _draw_object(frame, spec, centre):
    h, w = spec.frame_size
    px, py = _pixel_centres(h, w)
    r = spec.object_spec.radius
    dx, dy = px - centre[0], py - centre[1]
    if spec.object_spec.shape == "ball":
        inside = dx * dx + dy * dy <= r * r
        shade = 0.8 + 0.2 * np.clip((-dx * LIGHT_DIR[0] * -1 + dy * LIGHT_DIR[1]) / r, -1, 1)
    else:
        inside = (np.abs(dx) <= r) & (np.abs(dy) <= r)
        shade = np.where(dy > 0, 1.0, 0.85)
    col = np.asarray(spec.object_spec.color)[:, None, None] * shade[None]
    frame[:] = np.where(inside[None], np.clip(col, 0, 1), frame)


def _rasterise_arm(spec: SceneSpec, angles, gripper_open: bool):
    """Arm colour layer (3 x H x W) and its exact binary support."""
    h, w = spec.frame_size
    px, py = _pixel_centres(h, w)
    main = np.asarray(spec.arm_palette[0])
    jcol = np.asarray(spec.arm_palette[1])
    colour = np.zeros((3, h, w))
    mask = np.zeros((h, w), dtype=bool)

    def paint(region, rgb, shade=None):
        nonlocal colour, mask
        val = rgb[:, None, None] * (1.0 if shade is None else shade[None])
        colour = np.where(region[None], val, colour)
        mask |= region

    pts = forward_kinematics(spec, angles)
    base = pts[0]
    # pedestal
    bw = spec.link_widths[0] * 1.1
    pedestal = (np.abs(px - base[0]) <= bw) & (py <= base[1]) & (py >= base[1] - 2.0 * bw)
    paint(pedestal, jcol * 1.2)
    for k in range(spec.n_links):
        half = spec.link_widths[k] / 2.0
        dist, signed, n = _segment_coords(px, py, pts[k], pts[k + 1])
        paint(dist <= half, main, _shade(signed, half, n))
    for k in range(spec.n_links):
        d = np.hypot(px - pts[k][0], py - pts[k][1])
        paint(d <= spec.link_widths[k] * 0.45, jcol)

    tip = pts[-1]
    heading = np.sum(angles)
    u = np.array([np.cos(heading), np.sin(heading)])
    n = np.array([-u[1], u[0]])
    g = spec.gripper_size
    if spec.gripper_style == "parallel_jaw":
        gap = g * (0.9 if gripper_open else 0.45)
        for side in (-1.0, 1.0):
            a = tip + side * gap * n
            b = a + g * u
            dist, _, _ = _segment_coords(px, py, a, b)
            paint(dist <= 0.75, jcol)
        dist, _, _ = _segment_coords(px, py, tip - gap * n, tip + gap * n)
        paint(dist <= 0.75, jcol)
    else:
        c = tip + 0.5 * g * u
        d = np.hypot(px - c[0], py - c[1])
        paint(d <= 0.5 * g + 0.6, jcol * 0.9 + 0.08)
        dist, _, _ = _segment_coords(px, py, tip + g * u - g * n, tip + g * u + g * n)
        paint(dist <= 0.7, main * 0.9)
    return np.clip(colour, 0.0, 1.0), mask


def _quantise(x):
    return np.rint(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def _compose(arm_scene: SceneSpec, traj: Trajectory, plates8, fps) -> RenderedClip:
    frames, masks, arms = [], [], []
    for i in range(traj.n_frames):
        plate8 = plates8[i]
        arm, mask = _rasterise_arm(arm_scene, traj.joint_angles[i], bool(traj.gripper_open[i]))
        arm8 = _quantise(arm)
        # arm pixels must differ from the plate so masks are recoverable from pixels
        same = mask[None] & (arm8 == plate8).all(axis=0, keepdims=True)
        arm8 = np.where(same & (arm8 < 255), arm8 + 1, np.where(same, arm8 - 1, arm8))
        arm8 = np.where(mask[None], arm8, 0).astype(np.uint8)
        frames.append(np.where(mask[None], arm8, plate8))
        masks.append(mask)
        arms.append(arm8)
    to_f = lambda xs: np.stack(xs).astype(np.float32) / 255.0  # noqa: E731
    return RenderedClip(
        video=VideoTensor(to_f(frames), fps=fps),
        masks=MaskSequence(np.stack(masks)),
        background=BackgroundVideo(to_f(plates8), fps=fps),
        scene=arm_scene,
        trajectory=traj,
        arm_layer=to_f(arms),
    )


def render_clip(spec: SceneSpec, traj: Trajectory) -> RenderedClip:
    if traj.joint_angles.shape[1] != spec.n_links:
        raise InvalidArgument(
            f"trajectory has {traj.joint_angles.shape[1]} joints, scene arm has {spec.n_links}"
        )
    env = _environment(spec)
    obj_path = object_path(spec, traj)
    plates = []
    for i in range(traj.n_frames):
        plate = env.copy()
        _draw_object(plate, spec, obj_path[i])
        plates.append(_quantise(plate))
    return _compose(spec, traj, plates, DEFAULT_FPS)


def retarget(clip_a: RenderedClip, spec_b: SceneSpec) -> Trajectory:
    """Make ``spec_b``'s arm follow ``clip_a``'s end-effector path."""
    path = clip_a.trajectory.end_effector_path
    for p in path:
        if not _in_reach(spec_b, p):
            raise InfeasibleTask(
                f"point ({p[0]:.1f}, {p[1]:.1f}) outside reach of arm {spec_b.domain_id}"
            )
    angles = _follow_path(spec_b, path, spec_b.rest_pose, tol=0.5)
    ee = np.stack([forward_kinematics(spec_b, q)[-1] for q in angles])
    src = clip_a.trajectory
    return Trajectory(angles, src.gripper_open.copy(), ee, task=src.task)


def render_paired_oracle(clip_a: RenderedClip, spec_b: SceneSpec) -> RenderedClip:
    """Render ``spec_b``'s arm doing ``clip_a``'s motion in ``clip_a``'s environment.

    The result is flagged evaluation-only and never belongs in a training set.
    """
    src = clip_a.scene
    if spec_b.domain_id == src.domain_id:
        raise InvalidArgument("paired oracle needs the other domain's arm")
    scene = dataclasses.replace(
        src,
        domain_id=spec_b.domain_id,
        env_domain=src.env_domain or src.domain_id,
        link_lengths=spec_b.link_lengths,
        link_widths=spec_b.link_widths,
        arm_palette=spec_b.arm_palette,
        gripper_style=spec_b.gripper_style,
        rest_pose=spec_b.rest_pose,
        gripper_size=spec_b.gripper_size,
        evaluation_only=True,
    )
    traj = retarget(clip_a, scene)
    plates8 = np.rint(clip_a.background.data * 255.0).astype(np.uint8)
    return _compose(scene, traj, list(plates8), clip_a.video.fps)


def swap_environment(clip: RenderedClip, plate: RenderedClip) -> RenderedClip:
    """``clip``'s arm and motion over ``plate``'s clean background.

    Training clips of one domain never show the other domain's environment;
    these composites break that correlation for models trained from scratch.
    Only training data is used, so no evaluation pair leaks in.
    """
    if clip.video.data.shape != plate.background.data.shape:
        raise InvalidArgument(
            f"clip {clip.video.data.shape} and plate {plate.background.data.shape} differ in shape")
    arm = clip.arm_layer if clip.arm_layer is not None else clip.video.data * clip.masks.data[:, None]
    m = clip.masks.data[:, None] > 0
    fps = clip.video.fps
    scene = dataclasses.replace(clip.scene, env_domain=plate.scene.env_domain or plate.scene.domain_id)
    return RenderedClip(
        video=VideoTensor(np.where(m, arm, plate.background.data).astype(np.float32), fps=fps),
        masks=clip.masks,
        background=BackgroundVideo(plate.background.data, fps=fps),
        scene=scene,
        trajectory=clip.trajectory,
        arm_layer=arm,
    )


def cross_environment_pairs(dataset_dirs):
    """``(clip_dir, plate_dir)`` pairs: each clip gets a clean plate from the next domain's folder.

    Pairing is by index, so it is deterministic and covers every clip once.
    Fewer than two folders give no pairs.
    """
    dirs = [Path(d) for d in dataset_dirs]
    if len(dirs) < 2:
        return []
    pairs = []
    for k, d in enumerate(dirs):
        clips, plates = list_clips(d), list_clips(dirs[(k + 1) % len(dirs)])
        if not plates:
            continue
        pairs += [(c, plates[i % len(plates)]) for i, c in enumerate(clips)]
    return pairs


# --------------------------------------------------------------------------
# on-disk datasets


def clip_seeds(seed: int, domain: str, index: int, split: str = "train") -> dict:
    """Scene / trajectory seeds and task for one clip, derived from the dataset seed."""
    salt = {"train": 0, "eval": 1}[split]
    state = np.random.SeedSequence([int(seed), DOMAINS.index(domain), int(index), salt])
    scene_seed, traj_seed, task_bit = (int(v) for v in state.generate_state(3))
    return {"scene_seed": scene_seed % (2**31), "traj_seed": traj_seed % (2**31),
            "task": TASKS[task_bit % 2]}


def generate_clip(domain, seeds: dict, n_frames, frame_size) -> RenderedClip:
    """Render one clip, retrying trajectory seeds that hit an infeasible draw."""
    for attempt in range(20):
        spec = make_scene_spec(domain, seeds["scene_seed"] + attempt, frame_size)
        try:
            traj = sample_task_trajectory(spec, n_frames, seeds["task"], seeds["traj_seed"] + attempt)
        except InfeasibleTask:
            continue
        return render_clip(spec, traj)
    raise InfeasibleTask(f"no feasible scene near seed {seeds['scene_seed']}")


def write_clip(clip: RenderedClip, folder: Path):
    folder = Path(folder)
    folder.mkdir(parents=True, exist_ok=True)
    save_frames(clip.video, folder, "frame")
    save_masks(clip.masks, folder, "mask")
    save_frames(clip.background, folder, "background")
    (folder / "trajectory.json").write_text(json.dumps(clip.trajectory.to_dict()))
    (folder / "scene.json").write_text(json.dumps(clip.scene.to_dict(), indent=1))


def read_clip(folder: Path, fps: int = DEFAULT_FPS) -> RenderedClip:
    folder = Path(folder)
    video = load_frames(folder, "frame", fps)
    masks = load_masks(folder, "mask")
    bkg = BackgroundVideo(load_frames(folder, "background", fps).data, fps=fps)
    scene = SceneSpec.from_dict(json.loads((folder / "scene.json").read_text()))
    traj = Trajectory.from_dict(json.loads((folder / "trajectory.json").read_text()))
    arm = video.data * masks.data[:, None]
    return RenderedClip(video, masks, bkg, scene, traj, arm_layer=arm)


def list_clips(domain_dir: Path) -> list[Path]:
    return sorted(p for p in Path(domain_dir).glob("clip_*") if p.is_dir())


def _prepare_dir(target: Path, force: bool):
    if target.exists() and any(target.iterdir()):
        if not force:
            raise FileExistsError(f"{target} is not empty; pass force=True to overwrite")
        shutil.rmtree(target)
    target.mkdir(parents=True, exist_ok=True)


def _update_manifest(root: Path, key: str, entry: dict):
    path = root / "manifest.json"
    manifest = json.loads(path.read_text()) if path.exists() else {}
    manifest.setdefault("version", DATASET_VERSION)
    manifest.setdefault("splits", {})[key] = entry
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))


def build_dataset(domain, n_clips, n_frames, frame_size, seed, root, *, fps=DEFAULT_FPS,
                  force=False) -> Path:
    """Write ``n_clips`` rendered clips of ``domain`` under ``root/<domain>``."""
    if domain not in DOMAINS:
        raise InvalidArgument(f"unknown domain {domain!r}")
    if n_clips < 1:
        raise InvalidArgument("n_clips must be >= 1")
    root = Path(root)
    target = root / domain
    _prepare_dir(target, force)
    clips = []
    for i in range(n_clips):
        seeds = clip_seeds(seed, domain, i)
        clip = generate_clip(domain, seeds, n_frames, frame_size)
        write_clip(clip, target / f"clip_{i:05d}")
        clips.append({"clip": f"clip_{i:05d}", **seeds})
    _update_manifest(root, domain, {
        "domain": domain, "n_clips": n_clips, "n_frames": n_frames,
        "frame_size": list(frame_size), "fps": fps, "seed": seed, "clips": clips,
    })
    return target


def build_eval_split(source_domain, n_clips, n_frames, frame_size, seed, root, *,
                     fps=DEFAULT_FPS, force=False) -> Path:
    """Held-out source clips plus their paired oracles in the other domain.

    Layout: ``root/eval/<src>/clip_*`` and ``root/eval/oracle_<tgt>/clip_*``.
    """
    if n_clips < 1:
        raise InvalidArgument("n_clips must be >= 1")
    target_domain = "B" if source_domain == "A" else "A"
    root = Path(root)
    src_dir = root / "eval" / source_domain
    ora_dir = root / "eval" / f"oracle_{target_domain}"
    _prepare_dir(src_dir, force)
    _prepare_dir(ora_dir, force)
    clips = []
    for i in range(n_clips):
        seeds = clip_seeds(seed, source_domain, i, split="eval")
        for attempt in range(20):
            s = dict(seeds, traj_seed=seeds["traj_seed"] + 1000 * attempt)
            clip = generate_clip(source_domain, s, n_frames, frame_size)
            spec_t = make_scene_spec(target_domain, s["scene_seed"], frame_size)
            try:
                oracle = render_paired_oracle(clip, spec_t)
            except InfeasibleTask:
                continue
            break
        else:
            raise InfeasibleTask(f"no retargetable eval clip for index {i}")
        write_clip(clip, src_dir / f"clip_{i:05d}")
        write_clip(oracle, ora_dir / f"clip_{i:05d}")
        clips.append({"clip": f"clip_{i:05d}", **s})
    _update_manifest(root, f"eval_{source_domain}", {
        "domain": source_domain, "oracle_domain": target_domain, "n_clips": n_clips,
        "n_frames": n_frames, "frame_size": list(frame_size), "fps": fps, "seed": seed,
        "clips": clips, "evaluation_only": True,
    })
    return src_dir
