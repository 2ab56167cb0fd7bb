"""Deterministic 2-D T-block pushing with keypoint observations.

The workspace is the unit square. A disk-shaped agent is driven toward a
commanded target position; when it overlaps the T-shaped block the block is
displaced along the contact normal and rotated by the torque of that
displacement about its centroid (quasi-static, frictionless contact).
Everything here is numpy and pure: ``step`` returns new state objects.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

# T geometry (unit workspace): bar on top of a stem.
BAR_W, BAR_H = 0.24, 0.06
STEM_W, STEM_H = 0.06, 0.18
_A_BAR, _A_STEM = BAR_W * BAR_H, STEM_W * STEM_H
AREA = _A_BAR + _A_STEM
_CY = (_A_BAR * (STEM_H + BAR_H / 2) + _A_STEM * STEM_H / 2) / AREA
# rectangles in the centroid frame: (xmin, ymin, xmax, ymax)
RECTS = np.array([
    [-BAR_W / 2, STEM_H - _CY, BAR_W / 2, STEM_H + BAR_H - _CY],
    [-STEM_W / 2, -_CY, STEM_W / 2, STEM_H - _CY],
])
# 8 outline vertices (counter-clockwise) + centroid = 9 keypoints
OUTLINE = np.array([
    [-STEM_W / 2, -_CY], [STEM_W / 2, -_CY], [STEM_W / 2, STEM_H - _CY], [BAR_W / 2, STEM_H - _CY],
    [BAR_W / 2, STEM_H + BAR_H - _CY], [-BAR_W / 2, STEM_H + BAR_H - _CY],
    [-BAR_W / 2, STEM_H - _CY], [-STEM_W / 2, STEM_H - _CY],
])
KEYPOINTS_LOCAL = np.vstack([OUTLINE, [[0.0, 0.0]]])
# second moment about the centroid per unit area (radius of gyration squared)
_I_BAR = _A_BAR * ((BAR_W**2 + BAR_H**2) / 12 + (STEM_H + BAR_H / 2 - _CY) ** 2)
_I_STEM = _A_STEM * ((STEM_W**2 + STEM_H**2) / 12 + (STEM_H / 2 - _CY) ** 2)
GYRATION2 = (_I_BAR + _I_STEM) / AREA

OBS_FRAME_DIM = 2 * len(KEYPOINTS_LOCAL) + 2  # 20
ACTION_DIM = 2


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    t = math.fmod(theta + math.pi, 2 * math.pi)
    if t <= 0:
        t += 2 * math.pi
    return t - math.pi


@dataclass(frozen=True)
class BlockPose:
    x: float
    y: float
    theta: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def keypoints(pose: BlockPose) -> np.ndarray:
    return KEYPOINTS_LOCAL @ rotation(pose.theta).T + np.array([pose.x, pose.y])


def outline(pose: BlockPose) -> np.ndarray:
    return OUTLINE @ rotation(pose.theta).T + np.array([pose.x, pose.y])


@dataclass(frozen=True)
class EnvConfig:
    agent_radius: float = 0.015
    max_speed: float = 0.03
    substeps: int = 4
    contact_iters: int = 3
    max_rotation: float = 0.15  # rad per substep
    coverage_threshold: float = 0.9
    max_steps: int = 300
    raster: int = 256
    goal: tuple[float, float, float] = (0.5, 0.5, math.pi / 4)
    init_angle_range: float = math.pi / 3
    init_margin: float = 0.22
    init_max_coverage: float = 0.1


@dataclass(frozen=True)
class EnvState:
    block: BlockPose
    agent: tuple[float, float]
    goal: BlockPose
    step_count: int = 0
    prev_frame: tuple[float, ...] | None = None


# -- coverage ------------------------------------------------------------------
_GRID_CACHE: dict[int, np.ndarray] = {}


def _pixel_centers(n: int) -> np.ndarray:
    if n not in _GRID_CACHE:
        _GRID_CACHE[n] = (np.arange(n) + 0.5) / n
    return _GRID_CACHE[n]


def rasterize(pose: BlockPose, n: int = 256) -> set[int] | np.ndarray:
    """Flat indices of n x n pixel centers inside the T at ``pose``."""
    c = _pixel_centers(n)
    r = 0.2  # circumradius bound of the T about its centroid
    ix = np.nonzero((c >= pose.x - r) & (c <= pose.x + r))[0]
    iy = np.nonzero((c >= pose.y - r) & (c <= pose.y + r))[0]
    if ix.size == 0 or iy.size == 0:
        return np.empty(0, dtype=np.int64)
    gx, gy = np.meshgrid(c[ix], c[iy], indexing="xy")
    # world -> body frame
    ct, st = math.cos(pose.theta), math.sin(pose.theta)
    dx, dy = gx - pose.x, gy - pose.y
    bx = ct * dx + st * dy
    by = -st * dx + ct * dy
    inside = np.zeros(bx.shape, dtype=bool)
    for x0, y0, x1, y1 in RECTS:
        inside |= (bx >= x0) & (bx < x1) & (by >= y0) & (by < y1)
    jy, jx = np.nonzero(inside)
    return iy[jy] * n + ix[jx]


def coverage(block: BlockPose, goal: BlockPose, n: int = 256, goal_pixels: np.ndarray | None = None) -> float:
    """Overlap area of the block T with the goal T, as a fraction of the goal raster."""
    gp = rasterize(goal, n) if goal_pixels is None else goal_pixels
    if gp.size == 0:
        return 0.0
    bp = rasterize(block, n)
    return float(np.intersect1d(gp, bp, assume_unique=True).size) / gp.size


# -- contact -------------------------------------------------------------------
def _rect_penetration(p: np.ndarray, rect: np.ndarray, radius: float):
    """Penetration (depth, outward normal, contact point) of a disk in body frame."""
    x0, y0, x1, y1 = rect
    q = np.array([min(max(p[0], x0), x1), min(max(p[1], y0), y1)])
    d = p - q
    dist = math.hypot(d[0], d[1])
    if dist > 1e-12:
        if dist >= radius:
            return 0.0, None, None
        return radius - dist, d / dist, q
    # centre inside the rectangle: exit through the nearest face
    gaps = [p[0] - x0, x1 - p[0], p[1] - y0, y1 - p[1]]
    k = int(np.argmin(gaps))
    normal = [np.array([-1.0, 0]), np.array([1.0, 0]), np.array([0, -1.0]), np.array([0, 1.0])][k]
    cp = p.copy()
    if k < 2:
        cp[0] = x0 if k == 0 else x1
    else:
        cp[1] = y0 if k == 2 else y1
    return radius + gaps[k], normal, cp


def contact(block: BlockPose, agent: np.ndarray, radius: float):
    """Deepest disk/T overlap in world frame: (depth, normal, contact point) or (0, None, None)."""
    rot = rotation(block.theta)
    p = rot.T @ (np.asarray(agent, dtype=float) - np.array([block.x, block.y]))
    best = (0.0, None, None)
    for rect in RECTS:
        depth, n, q = _rect_penetration(p, rect, radius)
        if depth > best[0]:
            best = (depth, n, q)
    depth, n, q = best
    if depth <= 0:
        return 0.0, None, None
    return depth, rot @ n, rot @ q + np.array([block.x, block.y])


def push_response(block: BlockPose, depth: float, normal: np.ndarray, point: np.ndarray,
                  max_rotation: float) -> BlockPose:
    """Quasi-static frictionless push resolving ``depth`` of penetration.

    An impulse ``j`` along -normal at ``point`` translates the block by ``j``
    and rotates it by (offset x impulse) / gyration^2; ``j`` is sized so the
    contact point recedes by ``depth`` along the normal.
    """
    push = -np.asarray(normal, dtype=float)
    off = np.asarray(point) - np.array([block.x, block.y])
    lever = off[0] * push[1] - off[1] * push[0]
    impulse = depth / (1.0 + lever * lever / GYRATION2)
    dtheta = float(np.clip(impulse * lever / GYRATION2, -max_rotation, max_rotation))
    return BlockPose(block.x + impulse * float(push[0]), block.y + impulse * float(push[1]),
                     wrap_angle(block.theta + dtheta))


# -- environment -----------------------------------------------------------------
def _frame(block: BlockPose, agent) -> np.ndarray:
    kp = keypoints(block).reshape(-1)
    return np.concatenate([kp, np.asarray(agent, dtype=float)]) * 2.0 - 1.0


def observe(state: EnvState) -> np.ndarray:
    """Two stacked frames (previous, current) of normalized keypoints + agent: shape (40,)."""
    cur = _frame(state.block, state.agent)
    prev = np.asarray(state.prev_frame) if state.prev_frame is not None else cur
    return np.concatenate([prev, cur]).astype(np.float32)


def action_to_workspace(action) -> np.ndarray:
    return (np.clip(np.asarray(action, dtype=float), -1.0, 1.0) + 1.0) / 2.0


def workspace_to_action(p) -> np.ndarray:
    return np.asarray(p, dtype=float) * 2.0 - 1.0


class PushTEnv:
    """Stateless dynamics with an :class:`EnvConfig`; states are immutable values."""

    def __init__(self, cfg: EnvConfig | None = None):
        self.cfg = cfg or EnvConfig()
        self.goal = BlockPose(*self.cfg.goal)
        self._goal_pixels = rasterize(self.goal, self.cfg.raster)

    def coverage(self, block: BlockPose) -> float:
        return coverage(block, self.goal, self.cfg.raster, self._goal_pixels)

    def reset(self, seed: int) -> tuple[EnvState, np.ndarray]:
        cfg = self.cfg
        rng = np.random.default_rng(seed)
        while True:
            m = cfg.init_margin
            bx, by = rng.uniform(m, 1 - m, size=2)
            th = wrap_angle(self.goal.theta + rng.uniform(-cfg.init_angle_range, cfg.init_angle_range))
            block = BlockPose(float(bx), float(by), th)
            if self.coverage(block) >= cfg.init_max_coverage:
                continue
            ax, ay = rng.uniform(0.05, 0.95, size=2)
            agent = (float(ax), float(ay))
            if contact(block, np.array(agent), cfg.agent_radius + 0.02)[0] > 0:
                continue
            state = EnvState(block, agent, self.goal, 0, None)
            return state, observe(state)

    def step(self, state: EnvState, action) -> tuple[EnvState, np.ndarray]:
        cfg = self.cfg
        target = action_to_workspace(action)
        agent = np.array(state.agent, dtype=float)
        delta = target - agent
        dist = math.hypot(delta[0], delta[1])
        if dist > cfg.max_speed:
            delta = delta * (cfg.max_speed / dist)
        block = state.block
        for _ in range(cfg.substeps):
            agent = np.clip(agent + delta / cfg.substeps, 0.0, 1.0)
            for _ in range(cfg.contact_iters):
                depth, normal, point = contact(block, agent, cfg.agent_radius)
                if depth <= 0:
                    break
                block = push_response(block, depth, normal, point, cfg.max_rotation)
            depth, normal, _ = contact(block, agent, cfg.agent_radius)
            if depth > 0:  # unresolved overlap: agent yields
                agent = np.clip(agent + depth * normal, 0.0, 1.0)
        new = EnvState(
            block=block,
            agent=(float(agent[0]), float(agent[1])),
            goal=state.goal,
            step_count=state.step_count + 1,
            prev_frame=tuple(_frame(state.block, state.agent)),
        )
        return new, observe(new)


# -- scripted expert --------------------------------------------------------------
def _push_faces():
    """Contact candidates on the T's convex-hull faces (body frame): points, outward normals."""
    top = STEM_H + BAR_H - _CY
    ends_y = STEM_H - _CY + BAR_H / 2
    pts, nrm = [], []
    for x in np.linspace(-BAR_W / 2 + 0.01, BAR_W / 2 - 0.01, 9):
        pts.append([x, top]); nrm.append([0.0, 1.0])
    for sgn in (-1.0, 1.0):
        pts.append([sgn * BAR_W / 2, ends_y]); nrm.append([sgn, 0.0])
    for x in (-STEM_W / 2 + 0.01, 0.0, STEM_W / 2 - 0.01):
        pts.append([x, -_CY]); nrm.append([0.0, -1.0])
    return np.array(pts), np.array(nrm)


_CONTACT_PTS, _CONTACT_NRM = _push_faces()
_HULL = OUTLINE[[0, 1, 3, 4, 5, 6]]  # CCW convex hull of the T


def _inflated_hull(offset: float, arc: int = 4) -> np.ndarray:
    """CCW convex polygon: the T hull grown by ``offset`` (corners rounded by ``arc`` segments)."""
    pts = []
    n = len(_HULL)
    for i in range(n):
        prev, cur, nxt = _HULL[i - 1], _HULL[i], _HULL[(i + 1) % n]
        e0, e1 = cur - prev, nxt - cur
        a0 = math.atan2(-e0[0], e0[1])  # outward normal angle of incoming edge
        a1 = math.atan2(-e1[0], e1[1])
        gap = (a1 - a0) % (2 * math.pi)
        for k in range(arc + 1):
            ang = a0 + gap * k / arc
            pts.append(cur + offset * np.array([math.cos(ang), math.sin(ang)]))
    return np.array(pts)


def _point_on_perimeter(poly: np.ndarray, s: float) -> np.ndarray:
    seg = np.roll(poly, -1, axis=0) - poly
    lengths = np.linalg.norm(seg, axis=1)
    s = s % lengths.sum()
    k = int(np.searchsorted(np.cumsum(lengths), s, side="right"))
    k = min(k, len(poly) - 1)
    start = np.concatenate([[0.0], np.cumsum(lengths)])[k]
    return poly[k] + seg[k] * ((s - start) / lengths[k])


def _perimeter_param(poly: np.ndarray, p: np.ndarray) -> tuple[float, float]:
    """(arc-length parameter of the closest boundary point, distance to it)."""
    seg = np.roll(poly, -1, axis=0) - poly
    lengths = np.linalg.norm(seg, axis=1)
    t = np.clip(np.einsum("ij,ij->i", p - poly, seg) / (lengths**2), 0.0, 1.0)
    proj = poly + seg * t[:, None]
    d = np.linalg.norm(proj - p, axis=1)
    k = int(np.argmin(d))
    return float(np.concatenate([[0.0], np.cumsum(lengths)])[k] + t[k] * lengths[k]), float(d[k])


def _inside_convex(poly: np.ndarray, p: np.ndarray, margin: float = 0.0) -> bool:
    seg = np.roll(poly, -1, axis=0) - poly
    rel = p - poly
    cross = seg[:, 0] * rel[:, 1] - seg[:, 1] * rel[:, 0]
    return bool(np.all(cross / np.linalg.norm(seg, axis=1) > margin))


def _segment_crosses(poly: np.ndarray, a: np.ndarray, b: np.ndarray, margin: float = 1e-4) -> bool:
    """Does segment a-b pass through the interior of convex ``poly`` (shrunk by ``margin``)?"""
    t0, t1 = 0.0, 1.0
    d = b - a
    seg = np.roll(poly, -1, axis=0) - poly
    for v, e in zip(poly, seg):
        nrm = np.array([e[1], -e[0]]) / np.linalg.norm(e)  # outward for CCW
        num = margin - float(nrm @ (a - v))  # inside half-plane: nrm.(p-v) < -margin
        den = float(nrm @ d)
        if abs(den) < 1e-15:
            if num < 0:
                return False
            continue
        t = num / den
        if den > 0:
            t1 = min(t1, t)
        else:
            t0 = max(t0, t)
        if t0 >= t1:
            return False
    return t1 - t0 > 1e-9


@dataclass
class ScriptedExpert:
    """Greedy hull-face pusher.

    Each call scores every candidate contact on the T's hull faces by the pose
    error left after a short simulated push there (plus a travel penalty),
    then either pushes through the chosen contact or walks around the
    inflated hull to its pre-contact point.
    """

    env: PushTEnv
    push_depth: float = 0.03
    angle_weight: float = 0.08
    approach_clearance: float = 0.012
    contact_tolerance: float = 0.006
    hysteresis: float = 0.002
    travel_cost: float = 0.03
    fracs: tuple = (1.0,)
    _current: int | None = field(default=None, repr=False)

    def reset(self) -> None:
        self._current = None

    def _error(self, block: BlockPose) -> float:
        g = self.env.goal
        return math.hypot(block.x - g.x, block.y - g.y) + self.angle_weight * abs(wrap_angle(block.theta - g.theta))

    def _push_size(self, err: float) -> float:
        return float(np.clip(0.8 * err, 0.002, self.push_depth))

    def _simulate(self, block: BlockPose, contacts: np.ndarray, depths: np.ndarray) -> np.ndarray:
        """Pose errors after pushing each (contact, depth) pair in 4 quasi-static substeps."""
        cfg, goal = self.env.cfg, self.env.goal
        rot = rotation(block.theta)
        c = _CONTACT_PTS[contacts] @ rot.T + np.array([block.x, block.y])
        push = -(_CONTACT_NRM[contacts] @ rot.T)
        x = np.full(len(contacts), block.x)
        y = np.full(len(contacts), block.y)
        th = np.full(len(contacts), block.theta)
        for _ in range(4):
            lever = (c[:, 0] - x) * push[:, 1] - (c[:, 1] - y) * push[:, 0]
            imp = depths / 4 / (1.0 + lever * lever / GYRATION2)
            th = th + np.clip(imp * lever / GYRATION2, -cfg.max_rotation, cfg.max_rotation)
            x = x + imp * push[:, 0]
            y = y + imp * push[:, 1]
        dth = np.abs((th - goal.theta + np.pi) % (2 * np.pi) - np.pi)
        return np.hypot(x - goal.x, y - goal.y) + self.angle_weight * dth

    def __call__(self, state: EnvState) -> np.ndarray:
        """Next commanded position, clipped to what the agent can reach in one step.

        The environment moves the agent the same way for the raw waypoint, but
        the clipped command gives smooth, learnable action chunks.
        """
        agent = np.array(state.agent)
        delta = self._waypoint(state) - agent
        dist = math.hypot(delta[0], delta[1])
        if dist > self.env.cfg.max_speed:
            delta *= self.env.cfg.max_speed / dist
        return workspace_to_action(np.clip(agent + delta, 0.0, 1.0))

    def _waypoint(self, state: EnvState) -> np.ndarray:
        cfg = self.env.cfg
        block = state.block
        agent = np.array(state.agent)
        centre = np.array([block.x, block.y])
        rot = rotation(block.theta)
        hull = _inflated_hull(cfg.agent_radius + self.approach_clearance) @ rot.T + centre
        err = self._error(block)
        s_agent, _ = _perimeter_param(hull, agent)
        if self.env.coverage(block) >= cfg.coverage_threshold + 0.03 or err < 0.004:
            return np.clip(_point_on_perimeter(hull, s_agent), 0.0, 1.0)
        dmax = self._push_size(err)
        perim = float(np.linalg.norm(np.roll(hull, -1, axis=0) - hull, axis=1).sum())
        pres = (_CONTACT_PTS + _CONTACT_NRM * (cfg.agent_radius + self.approach_clearance)) @ rot.T + centre
        n_c = len(pres)
        travel = np.empty(n_c)
        for j, pre in enumerate(pres):
            gap = abs(_perimeter_param(hull, pre)[0] - s_agent) % perim
            travel[j] = min(gap, perim - gap)
        fracs = np.asarray(self.fracs)
        after = self._simulate(block, np.repeat(np.arange(n_c), len(fracs)),
                               np.tile(fracs * dmax, n_c)).reshape(n_c, len(fracs))
        pick = np.argmin(after, axis=1)
        scores = after.min(axis=1) + self.travel_cost * travel
        best = int(np.argmin(scores))
        cur = self._current
        if cur is not None and self._in_corridor(agent, pres[cur], rot @ _CONTACT_NRM[cur]):
            if after[cur].min() < err - 0.1 * dmax * fracs[pick[cur]]:
                best = cur  # keep pushing while this contact still pays off
        elif cur is not None and scores[cur] <= scores[best] + self.hysteresis:
            best = cur
        self._current = best
        depth = float(fracs[pick[best]] * dmax)
        c = rot @ _CONTACT_PTS[best] + centre
        nrm = rot @ _CONTACT_NRM[best]
        pre = pres[best]
        if self._in_corridor(agent, pre, nrm):
            target = c + nrm * (cfg.agent_radius - depth)
            return np.clip(target, 0.0, 1.0)
        return np.clip(self._navigate(hull, agent, pre), 0.0, 1.0)

    def _in_corridor(self, agent: np.ndarray, pre: np.ndarray, nrm: np.ndarray) -> bool:
        rel = agent - pre
        along = float(rel @ nrm)
        perp = rel - along * nrm
        reach = self.env.cfg.agent_radius + self.approach_clearance
        return bool(np.linalg.norm(perp) < self.contact_tolerance and -reach < along < 0.01)

    def _navigate(self, hull: np.ndarray, agent: np.ndarray, goal_pt: np.ndarray) -> np.ndarray:
        """Waypoint toward ``goal_pt`` that walks around ``hull`` instead of through it."""
        step = self.env.cfg.max_speed
        s_agent, dist_hull = _perimeter_param(hull, agent)
        if _inside_convex(hull, agent, margin=0.002):
            # leave the hull through its nearest boundary point
            return _point_on_perimeter(hull, s_agent)
        if not _segment_crosses(hull, agent, goal_pt):
            return goal_pt
        s_goal, _ = _perimeter_param(hull, goal_pt)
        perim = float(np.linalg.norm(np.roll(hull, -1, axis=0) - hull, axis=1).sum())
        fwd = (s_goal - s_agent) % perim
        direction = 1.0 if fwd <= perim / 2 else -1.0
        if dist_hull > step:
            return _point_on_perimeter(hull, s_agent)
        return _point_on_perimeter(hull, s_agent + direction * min(step, min(fwd, perim - fwd)))


# -- rollouts ------------------------------------------------------------------
@dataclass
class RolloutResult:
    success: bool
    max_coverage: float
    steps_used: int
    trajectory: list = field(default_factory=list)


def expert_episode(env: PushTEnv, seed: int, max_steps: int | None = None):
    """Roll out the scripted expert; returns (observations, actions, RolloutResult)."""
    max_steps = max_steps or env.cfg.max_steps
    expert = ScriptedExpert(env)
    state, obs = env.reset(seed)
    observations, actions = [], []
    best = env.coverage(state.block)
    success = False
    for t in range(max_steps):
        act = expert(state)
        observations.append(obs)
        actions.append(act.astype(np.float32))
        state, obs = env.step(state, act)
        cov = env.coverage(state.block)
        best = max(best, cov)
        if cov >= env.cfg.coverage_threshold:
            success = True
            break
    return (np.array(observations, np.float32), np.array(actions, np.float32),
            RolloutResult(success, best, len(actions)))


# -- dataset file ------------------------------------------------------------------
MAGIC = b"LDPT"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


@dataclass
class Dataset:
    """Expert episodes: per-episode observation and action arrays."""

    observations: list[np.ndarray]
    actions: list[np.ndarray]
    horizon: int = 16

    def __post_init__(self):
        if len(self.observations) != len(self.actions):
            raise ValueError("observation/action episode counts differ")
        for o, a in zip(self.observations, self.actions):
            if len(o) != len(a):
                raise ValueError(f"episode length mismatch: {len(o)} obs vs {len(a)} actions")

    @property
    def obs_dim(self) -> int:
        return int(self.observations[0].shape[1]) if self.observations else 2 * OBS_FRAME_DIM

    @property
    def action_dim(self) -> int:
        return int(self.actions[0].shape[1]) if self.actions else ACTION_DIM

    def __len__(self) -> int:
        return len(self.observations)

    @property
    def n_samples(self) -> int:
        return sum(len(o) for o in self.observations)

    def samples(self) -> tuple[np.ndarray, np.ndarray]:
        """Every (observation, next-``horizon`` action chunk) pair; chunks pad with the last action."""
        obs, chunks = [], []
        for o, a in zip(self.observations, self.actions):
            n = len(a)
            idx = np.minimum(np.arange(n)[:, None] + np.arange(self.horizon)[None], n - 1)
            obs.append(o)
            chunks.append(a[idx])
        return (np.concatenate(obs).astype(np.float32), np.concatenate(chunks).astype(np.float32))


def write_dataset(path, data: Dataset) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, DATASET_VERSION, data.obs_dim, data.action_dim, data.horizon, len(data)))
        for o, a in zip(data.observations, data.actions):
            f.write(struct.pack("<I", len(o)))
            f.write(np.ascontiguousarray(o, dtype="<f4").tobytes())
            f.write(np.ascontiguousarray(a, dtype="<f4").tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated dataset header")
    magic, version, obs_dim, act_dim, horizon, n_ep = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise ValueError(f"unsupported dataset version {version}")
    off = _HEADER.size
    observations, actions = [], []
    for _ in range(n_ep):
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        no, na = n * obs_dim, n * act_dim
        if off + 4 * (no + na) > len(raw):
            raise ValueError("truncated dataset body")
        observations.append(np.frombuffer(raw, "<f4", no, off).reshape(n, obs_dim).astype(np.float32))
        off += 4 * no
        actions.append(np.frombuffer(raw, "<f4", na, off).reshape(n, act_dim).astype(np.float32))
        off += 4 * na
    if off != len(raw):
        raise ValueError("trailing bytes after last episode")
    return Dataset(observations, actions, horizon)


def generate_dataset(env: PushTEnv, n_episodes: int, seed: int = 0, horizon: int = 16,
                     successful_only: bool = True) -> tuple[Dataset, list[RolloutResult]]:
    """Expert demonstrations on seeds ``seed, seed+1, ...`` (failed episodes skipped if asked).

    Gives up with :class:`ValueError` after ``2 * n_episodes + 20`` attempts.
    """
    observations, actions, results = [], [], []
    s = seed
    while len(observations) < n_episodes:
        if len(results) >= 2 * n_episodes + 20:
            raise ValueError(f"expert succeeded on only {len(observations)} of {len(results)} episodes")
        o, a, res = expert_episode(env, s)
        s += 1
        results.append(res)
        if successful_only and not res.success:
            continue
        observations.append(o)
        actions.append(a)
    return Dataset(observations, actions, horizon), results


# -- closed-loop evaluation ----------------------------------------------------------
class Policy:
    """Batched policy interface: observations (n, obs_dim) -> action chunks (n, h, 2)."""

    def reset(self, n_envs: int) -> None:
        pass

    def __call__(self, obs: np.ndarray, states: Sequence[EnvState], env_ids: Sequence[int],
                 rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError


class RandomPolicy(Policy):
    def __init__(self, horizon: int = 16):
        self.horizon = horizon

    def __call__(self, obs, states, env_ids, rng):
        return rng.uniform(-1.0, 1.0, size=(len(obs), self.horizon, ACTION_DIM))


class ExpertPolicy(Policy):
    """The scripted expert as a one-action-chunk policy (one expert instance per env)."""

    def __init__(self, env: PushTEnv):
        self.env = env
        self._experts: list[ScriptedExpert] = []

    def reset(self, n_envs: int) -> None:
        self._experts = [ScriptedExpert(self.env) for _ in range(n_envs)]

    def __call__(self, obs, states, env_ids, rng):
        return np.stack([self._experts[i](s)[None] for i, s in zip(env_ids, states)])


@dataclass
class EvalResult:
    success_rate: float
    mean_max_coverage: float
    episodes: list[RolloutResult]

    def to_dict(self) -> dict:
        return {
            "success_rate": self.success_rate,
            "mean_max_coverage": self.mean_max_coverage,
            "episodes": [{"seed_offset": i, "success": r.success, "max_coverage": r.max_coverage,
                          "steps": r.steps_used} for i, r in enumerate(self.episodes)],
        }


def evaluate(policy: Policy, n_episodes: int, seed_base: int = 10_000, max_steps: int | None = None,
             action_exec_horizon: int = 8, env: PushTEnv | None = None,
             keep_trajectories: bool = False) -> EvalResult:
    """Receding-horizon rollouts on seeds ``seed_base + i``, with the policy batched across episodes.

    Each round queries the policy once for every unfinished episode, then
    executes the first ``action_exec_horizon`` actions of each chunk.
    """
    if n_episodes < 1:
        raise ValueError("n_episodes must be >= 1")
    env = env or PushTEnv()
    max_steps = max_steps or env.cfg.max_steps
    rng = np.random.default_rng(seed_base)
    policy.reset(n_episodes)
    states, obs = zip(*(env.reset(seed_base + i) for i in range(n_episodes)))
    states, obs = list(states), list(obs)
    best = [env.coverage(s.block) for s in states]
    done = [False] * n_episodes
    success = [False] * n_episodes
    trajs: list[list] = [[] for _ in range(n_episodes)]
    while True:
        active = [i for i in range(n_episodes) if not done[i]]
        if not active:
            break
        chunks = np.asarray(policy(np.stack([obs[i] for i in active]), [states[i] for i in active], active, rng))
        for row, i in enumerate(active):
            chunk = chunks[row]
            if keep_trajectories:
                trajs[i].append((obs[i], chunk))
            for act in chunk[:action_exec_horizon]:
                states[i], obs[i] = env.step(states[i], act)
                cov = env.coverage(states[i].block)
                best[i] = max(best[i], cov)
                if cov >= env.cfg.coverage_threshold:
                    success[i] = done[i] = True
                    break
                if states[i].step_count >= max_steps:
                    done[i] = True
                    break
    episodes = [RolloutResult(success[i], best[i], states[i].step_count, trajs[i]) for i in range(n_episodes)]
    return EvalResult(float(np.mean(success)), float(np.mean(best)), episodes)
