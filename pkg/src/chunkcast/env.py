"""Deterministic 2D T-block pushing environment with renderer, scripted
expert, and demonstration dataset generation.

Everything lives in the unit square with y growing downward (matching raster
rows). The block is a T-shaped union of two rectangles; the pusher is a
disc driven by absolute position targets at a capped speed. Contact is
quasi-static: when the pusher overlaps the block silhouette, the block
translates along the penetration direction and rotates by a torque term
proportional to the tangential lever arm. All arithmetic is plain float64
numpy, so identical seeds and action sequences reproduce trajectories
bit-for-bit.

The scripted expert greedily picks the pusher target whose simulated
one-step outcome best reduces pose error, from a fixed candidate fan plus
staging points behind the block. The demo generator rolls the expert,
records observation frames and action windows at the replanning stride, and
derives coarse waypoint ids by uniformly downsampling each window onto the
discretization grid.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .tensor import Rng

__all__ = [
    "EnvConfig",
    "EnvState",
    "PushEnv",
    "DemoSample",
    "Episode",
    "scripted_expert",
    "generate_demos",
    "save_demos",
    "load_demos",
    "export_demos_jsonl",
    "downsample_waypoints",
    "discretize_waypoints",
]


@dataclass(frozen=True)
class EnvConfig:
    """All dynamics and task constants; every length is in board units."""

    raster: int = 64
    pusher_radius: float = 0.035
    pusher_speed: float = 0.06  # max displacement per low-level step
    substeps: int = 4
    push_gain: float = 1.0  # fraction of penetration resolved per substep
    torque_gain: float = 8.0  # rad per unit torque (lever x penetration)
    # T silhouette: horizontal bar plus stem below it (y grows downward)
    bar_center: tuple[float, float] = (0.0, -0.12)
    bar_half: tuple[float, float] = (0.27, 0.075)
    stem_center: tuple[float, float] = (0.0, 0.09)
    stem_half: tuple[float, float] = (0.075, 0.135)
    goal_pose: tuple[float, float, float] = (0.5, 0.5, 0.0)
    success_iou: float = 0.9
    iou_grid: int = 128
    max_steps: int = 300
    reset_center_lo: float = 0.35
    reset_center_hi: float = 0.65

    @property
    def max_block_radius(self) -> float:
        corners = []
        for (cx, cy), (hx, hy) in ((self.bar_center, self.bar_half), (self.stem_center, self.stem_half)):
            corners.extend(
                math.hypot(cx + sx * hx, cy + sy * hy) for sx in (-1, 1) for sy in (-1, 1)
            )
        return max(corners)


@dataclass(frozen=True)
class EnvState:
    block_xy: tuple[float, float]
    block_theta: float
    pusher: tuple[float, float]
    steps: int = 0


def _wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.fmod(theta + math.pi, 2.0 * math.pi)
    if wrapped <= 0.0:
        wrapped += 2.0 * math.pi
    return wrapped - math.pi


def _rect_sdf_grad(px: float, py: float, hx: float, hy: float) -> tuple[float, float, float]:
    """Signed distance and gradient of an axis-aligned rectangle at origin."""
    qx, qy = abs(px) - hx, abs(py) - hy
    ox, oy = max(qx, 0.0), max(qy, 0.0)
    outside = math.hypot(ox, oy)
    if outside > 0.0:
        gx = (ox / outside) * (1.0 if px >= 0 else -1.0) if qx > 0 else 0.0
        gy = (oy / outside) * (1.0 if py >= 0 else -1.0) if qy > 0 else 0.0
        return outside, gx, gy
    # interior: distance to the nearest face
    if qx >= qy:
        return qx, (1.0 if px >= 0 else -1.0), 0.0
    return qy, 0.0, (1.0 if py >= 0 else -1.0)


class PushEnv:
    """Single-session deterministic environment instance."""

    def __init__(self, cfg: EnvConfig | None = None):
        self.cfg = cfg or EnvConfig()
        self.state: EnvState | None = None
        self._prev_frame: np.ndarray | None = None

    # -- geometry -----------------------------------------------------------

    def block_sdf_grad(self, state: EnvState, point) -> tuple[float, float, float]:
        """Signed distance of a world point to the block silhouette plus the
        world-frame outward gradient."""
        cfg = self.cfg
        ct, st = math.cos(state.block_theta), math.sin(state.block_theta)
        dx, dy = point[0] - state.block_xy[0], point[1] - state.block_xy[1]
        bx = ct * dx + st * dy
        by = -st * dx + ct * dy
        d1, g1x, g1y = _rect_sdf_grad(bx - cfg.bar_center[0], by - cfg.bar_center[1], *cfg.bar_half)
        d2, g2x, g2y = _rect_sdf_grad(bx - cfg.stem_center[0], by - cfg.stem_center[1], *cfg.stem_half)
        d, gx, gy = (d1, g1x, g1y) if d1 <= d2 else (d2, g2x, g2y)
        return d, ct * gx - st * gy, st * gx + ct * gy

    def _sdf_grid(self, pose_xy, theta: float, n: int) -> np.ndarray:
        """Vectorized silhouette signed distance on an n x n pixel-center grid."""
        cfg = self.cfg
        coords = (np.arange(n) + 0.5) / n
        xs, ys = np.meshgrid(coords, coords)  # xs: col -> x, ys: row -> y
        ct, st = math.cos(theta), math.sin(theta)
        dx, dy = xs - pose_xy[0], ys - pose_xy[1]
        bx = ct * dx + st * dy
        by = -st * dx + ct * dy

        def rect(cx, cy, hx, hy):
            qx = np.abs(bx - cx) - hx
            qy = np.abs(by - cy) - hy
            outside = np.hypot(np.maximum(qx, 0.0), np.maximum(qy, 0.0))
            inside = np.minimum(np.maximum(qx, qy), 0.0)
            return outside + inside

        return np.minimum(rect(*cfg.bar_center, *cfg.bar_half), rect(*cfg.stem_center, *cfg.stem_half))

    def silhouette(self, pose_xy, theta: float, n: int | None = None) -> np.ndarray:
        return self._sdf_grid(pose_xy, theta, n or self.cfg.iou_grid) <= 0.0

    def silhouette_iou(self, mask_a: np.ndarray, mask_b: np.ndarray) -> float:
        union = np.logical_or(mask_a, mask_b).sum()
        if union == 0:
            return 0.0
        return float(np.logical_and(mask_a, mask_b).sum() / union)

    # -- lifecycle ------------------------------------------------------------

    def reset(self, seed: int) -> EnvState:
        cfg = self.cfg
        rng = Rng(seed)
        lo, hi = cfg.reset_center_lo, cfg.reset_center_hi
        bx, by = rng.uniform((2,), lo, hi)
        theta = _wrap_angle(float(rng.uniform((), -math.pi, math.pi)) + math.pi * 1e-9)
        state = EnvState((float(bx), float(by)), float(theta), (0.0, 0.0), 0)
        for _ in range(64):  # rejection-sample a pusher spot clear of the block
            px, py = rng.uniform((2,), 0.08, 0.92)
            d, _gx, _gy = self.block_sdf_grad(state, (float(px), float(py)))
            if d > cfg.pusher_radius + 0.02:
                state = replace(state, pusher=(float(px), float(py)))
                break
        else:
            state = replace(state, pusher=(0.08, 0.08))
        self.state = state
        self._prev_frame = None
        return state

    def step(self, target) -> EnvState:
        if self.state is None:
            raise RuntimeError("step before reset")
        self._prev_frame = self.render(self.state)
        self.state = simulate_step(self.cfg, self.state, target, self)
        return self.state

    def success(self, state: EnvState | None = None) -> bool:
        state = state or self.state
        goal = self.cfg.goal_pose
        iou = self.silhouette_iou(
            self.silhouette(state.block_xy, state.block_theta),
            self.silhouette(goal[:2], goal[2]),
        )
        return iou >= self.cfg.success_iou

    # -- rendering ------------------------------------------------------------

    def render(self, state: EnvState | None = None) -> np.ndarray:
        """(raster, raster, 3) float32 image in [0, 1]."""
        state = state or self.state
        cfg = self.cfg
        n = cfg.raster
        img = np.ones((n, n, 3), dtype=np.float32)
        goal = self.cfg.goal_pose
        goal_mask = self._sdf_grid(goal[:2], goal[2], n) <= 0.0
        img[goal_mask] = (0.72, 0.93, 0.72)
        block_mask = self._sdf_grid(state.block_xy, state.block_theta, n) <= 0.0
        img[block_mask] = (0.28, 0.38, 0.78)
        coords = (np.arange(n) + 0.5) / n
        xs, ys = np.meshgrid(coords, coords)
        pusher_mask = np.hypot(xs - state.pusher[0], ys - state.pusher[1]) <= cfg.pusher_radius
        img[pusher_mask] = (0.85, 0.2, 0.2)
        return img

    def observation(self, state: EnvState | None = None) -> np.ndarray:
        """Two stacked frames, channel-concatenated: (6, raster, raster)."""
        state = state or self.state
        cur = self.render(state)
        prev = self._prev_frame if self._prev_frame is not None else cur
        stacked = np.concatenate([prev, cur], axis=-1)  # (H, W, 6)
        return np.ascontiguousarray(stacked.transpose(2, 0, 1))


def simulate_step(cfg: EnvConfig, state: EnvState, target, env: PushEnv) -> EnvState:
    """Pure transition function; `env` supplies the silhouette geometry."""
    tx = min(max(float(target[0]), 0.0), 1.0)
    ty = min(max(float(target[1]), 0.0), 1.0)
    px, py = state.pusher
    bx, by = state.block_xy
    theta = state.block_theta
    dx, dy = tx - px, ty - py
    dist = math.hypot(dx, dy)
    if dist > cfg.pusher_speed:
        scale = cfg.pusher_speed / dist
        dx, dy = dx * scale, dy * scale
    step_x, step_y = dx / cfg.substeps, dy / cfg.substeps
    for _ in range(cfg.substeps):
        px += step_x
        py += step_y
        probe = EnvState((bx, by), theta, (px, py), state.steps)
        d, gx, gy = env.block_sdf_grad(probe, (px, py))
        pen = cfg.pusher_radius - d
        if pen > 0.0:
            push = cfg.push_gain * pen
            bx -= gx * push
            by -= gy * push
            lever_x, lever_y = px - bx, py - by
            torque = lever_x * (-gy * push) - lever_y * (-gx * push)
            theta = _wrap_angle(theta + cfg.torque_gain * torque)
    bx = min(max(bx, 0.0), 1.0)
    by = min(max(by, 0.0), 1.0)
    return EnvState((bx, by), theta, (px, py), state.steps + 1)


# ---------------------------------------------------------------------------
# scripted expert
# ---------------------------------------------------------------------------


_ANGLE_TOL = 0.04  # switch to rotation fixes above this heading error (rad)


def _goal_errors(cfg: EnvConfig, state: EnvState) -> tuple[float, float]:
    gx, gy, gt = cfg.goal_pose
    d = math.hypot(state.block_xy[0] - gx, state.block_xy[1] - gy)
    e = _wrap_angle(state.block_theta - gt)
    return d, e


def _rotate(theta: float, x: float, y: float) -> tuple[float, float]:
    ct, st = math.cos(theta), math.sin(theta)
    return ct * x - st * y, st * x + ct * y


def _clip_board(x: float, y: float) -> tuple[float, float]:
    return min(max(x, 0.02), 0.98), min(max(y, 0.02), 0.98)


def _march_to_surface(env: PushEnv, state: EnvState, start, direction) -> tuple[float, float]:
    """Walk from an interior point along `direction` until just outside the
    silhouette; returns the crossing point."""
    x, y = start
    for _ in range(120):
        d, _gx, _gy = env.block_sdf_grad(state, (x, y))
        if d >= 0.0:
            return x, y
        x += direction[0] * 0.005
        y += direction[1] * 0.005
    return x, y


def _contact_plan(env: PushEnv, state: EnvState) -> tuple[tuple[float, float], tuple[float, float], float]:
    """Pick the contact point and push direction for the current phase.

    Returns (approach point, unit push direction, push depth). Rotation
    phase: tangential push at the bar end nearest the pusher (max lever;
    pushing along the lever's perpendicular spins the block positive, so the
    heading-error sign selects the side). Translation phase: push through
    the silhouette point opposite the goal direction. Push depth shrinks
    with the remaining error for precise final nudges.
    """
    cfg = env.cfg
    d, e = _goal_errors(cfg, state)
    bx, by = state.block_xy
    if abs(e) > _ANGLE_TOL:
        s = -1.0 if e > 0 else 1.0
        options = []
        for side in (-1.0, 1.0):
            lever = _rotate(state.block_theta, side * cfg.bar_half[0] * 0.85, cfg.bar_center[1])
            norm = math.hypot(*lever)
            f = (s * -lever[1] / norm, s * lever[0] / norm)
            inner = (bx + lever[0], by + lever[1])
            surface = _march_to_surface(env, state, inner, (-f[0], -f[1]))
            approach = (
                surface[0] - f[0] * (cfg.pusher_radius + 0.012),
                surface[1] - f[1] * (cfg.pusher_radius + 0.012),
            )
            inside = approach == _clip_board(*approach)
            dist = math.hypot(approach[0] - state.pusher[0], approach[1] - state.pusher[1])
            options.append((not inside, dist, approach, f))
        options.sort(key=lambda o: (o[0], o[1]))
        _bad, _dist, approach, f = options[0]
        depth = min(max(abs(e) * 0.45, 0.015), 0.06)
        return _clip_board(*approach), f, depth
    gx, gy, _gt = cfg.goal_pose
    to_goal = (gx - bx, gy - by)
    norm = math.hypot(*to_goal) or 1.0
    f = (to_goal[0] / norm, to_goal[1] / norm)
    surface = _march_to_surface(env, state, (bx, by), (-f[0], -f[1]))
    approach = (
        surface[0] - f[0] * (cfg.pusher_radius + 0.012),
        surface[1] - f[1] * (cfg.pusher_radius + 0.012),
    )
    depth = min(max(d * 0.8, 0.015), 0.08)
    return _clip_board(*approach), f, depth


def _segment_clear(env: PushEnv, state: EnvState, a, b, clearance: float) -> bool:
    length = math.hypot(b[0] - a[0], b[1] - a[1])
    n = max(int(length / 0.02), 1)
    for i in range(n + 1):
        t = i / n
        p = (a[0] + t * (b[0] - a[0]), a[1] + t * (b[1] - a[1]))
        d, _gx, _gy = env.block_sdf_grad(state, p)
        if d < clearance:
            return False
    return True


def _nav_waypoint(env: PushEnv, state: EnvState, staging) -> tuple[float, float]:
    """Where the pusher should head right now: the staging spot when the
    straight path is clear, otherwise a wall-following step around the
    silhouette at small clearance, orbiting in the direction of shorter
    angular travel (anchoring the side to angles keeps the follower from
    flip-flopping)."""
    cfg = env.cfg
    # slack below the approach offset so the final hop to the staging spot
    # is never classified as blocked
    clearance = cfg.pusher_radius + 0.005
    if _segment_clear(env, state, state.pusher, staging, clearance):
        return staging
    px, py = state.pusher
    d, gx, gy = env.block_sdf_grad(state, (px, py))
    bx, by = state.block_xy
    diff = _wrap_angle(
        math.atan2(staging[1] - by, staging[0] - bx) - math.atan2(py - by, px - bx)
    )
    tx, ty = (-gy, gx) if diff >= 0 else (gy, -gx)
    d_des = cfg.pusher_radius + 0.03
    radial = max(min(d_des - d, 0.05), -0.05)
    dirx = tx + 1.5 * radial * gx
    diry = ty + 1.5 * radial * gy
    norm = math.hypot(dirx, diry) or 1.0
    step = min(0.08, max(math.hypot(staging[0] - px, staging[1] - py), 0.02))
    return _clip_board(px + dirx / norm * step, py + diry / norm * step)


def scripted_expert(env: PushEnv, state: EnvState) -> tuple[float, float]:
    """Deterministic push controller.

    Each step picks a contact plan (rotate at a bar end while the heading
    error is large, otherwise push the silhouette point opposite the goal),
    walks the pusher to the approach spot (wall-following around the block
    when the straight path is blocked), and once in position pushes through
    the contact by a depth proportional to the remaining error.
    """
    approach, f, depth = _contact_plan(env, state)
    px, py = state.pusher
    rel_along = (px - approach[0]) * f[0] + (py - approach[1]) * f[1]
    rel_perp = abs(
        -(px - approach[0]) * f[1] + (py - approach[1]) * f[0]
    )
    d_surf, _gx, _gy = env.block_sdf_grad(env_state := state, (px, py))
    touching = d_surf < env.cfg.pusher_radius + 0.02
    aligned = rel_perp < 0.03 and -0.02 <= rel_along <= depth + 0.06
    near = rel_perp < 0.03 and abs(rel_along) < 0.045
    if (touching and rel_perp < 0.05) or aligned or near:
        return _clip_board(px + f[0] * (depth + 0.03), py + f[1] * (depth + 0.03))
    return _nav_waypoint(env, state, approach)


# ---------------------------------------------------------------------------
# demonstrations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DemoSample:
    """One replanning point: stacked uint8 frames plus the action window."""

    obs: np.ndarray  # (2, 3, raster, raster) uint8
    waypoints: np.ndarray  # (n_waypoints,) grid ids, uint8
    moves: np.ndarray  # (horizon, 2) float32 absolute pusher targets


@dataclass(frozen=True)
class Episode:
    seed: int
    success: bool
    steps: int
    samples: tuple[DemoSample, ...] = field(default_factory=tuple)


def downsample_waypoints(moves: np.ndarray, n_waypoints: int) -> np.ndarray:
    """Uniformly thin a low-level window to waypoint positions (segment ends)."""
    horizon = len(moves)
    stride = horizon // n_waypoints
    idx = [min((i + 1) * stride - 1, horizon - 1) for i in range(n_waypoints)]
    return np.asarray(moves)[idx]

def discretize_waypoints(points: np.ndarray, grid: int) -> np.ndarray:
    """Map (x, y) positions onto row-major cell ids of a grid x grid board."""
    pts = np.asarray(points, dtype=np.float64)
    cols = np.clip((pts[:, 0] * grid).astype(np.int64), 0, grid - 1)
    rows = np.clip((pts[:, 1] * grid).astype(np.int64), 0, grid - 1)
    return (rows * grid + cols).astype(np.int64)


def run_expert_episode(env: PushEnv, seed: int) -> tuple[bool, list[np.ndarray], list[tuple[float, float]]]:
    """Roll the expert until success or the step limit; returns the frame
    sequence (one per step, pre-action) and the executed targets."""
    state = env.reset(seed)
    frames = [env.render(state)]
    targets: list[tuple[float, float]] = []
    for _ in range(env.cfg.max_steps):
        if env.success(state):
            break
        target = scripted_expert(env, state)
        targets.append(target)
        state = env.step(target)
        frames.append(env.render(state))
    return env.success(state), frames, targets


def generate_demos(
    n_episodes: int,
    seed: int,
    env: PushEnv | None = None,
    horizon: int = 16,
    n_waypoints: int = 4,
    action_steps: int = 8,
    waypoint_grid: int = 8,
    max_seed_tries: int | None = None,
) -> tuple[list[Episode], list[int]]:
    """Collect `n_episodes` successful expert episodes.

    Failed episodes are dropped; their seeds are returned for logging. Each
    episode is cut into overlapping windows at the replanning stride with the
    tail padded by repeating the final position (the pusher parks at the end).
    """
    env = env or PushEnv()
    episodes: list[Episode] = []
    dropped: list[int] = []
    tries = max_seed_tries or 4 * n_episodes
    current = seed
    while len(episodes) < n_episodes and tries > 0:
        tries -= 1
        ok, frames, targets = run_expert_episode(env, current)
        if not ok or not targets:
            dropped.append(current)
            current += 1
            continue
        samples = []
        n_steps = len(targets)
        for start in range(0, n_steps, action_steps):
            window = [
                targets[min(start + i, n_steps - 1)] for i in range(horizon)
            ]
            window = np.asarray(window, dtype=np.float32)
            prev = frames[max(start - 1, 0)]
            cur = frames[start]
            obs = np.stack(
                [
                    (prev * 255).astype(np.uint8).transpose(2, 0, 1),
                    (cur * 255).astype(np.uint8).transpose(2, 0, 1),
                ]
            )
            wp = discretize_waypoints(
                downsample_waypoints(window, n_waypoints), waypoint_grid
            ).astype(np.uint8)
            samples.append(DemoSample(obs=obs, waypoints=wp, moves=window))
        episodes.append(
            Episode(seed=current, success=True, steps=n_steps, samples=tuple(samples))
        )
        current += 1
    if len(episodes) < n_episodes:
        raise RuntimeError(
            f"expert produced only {len(episodes)}/{n_episodes} successes "
            f"(dropped {len(dropped)})"
        )
    return episodes, dropped


# ---------------------------------------------------------------------------
# demo files
# ---------------------------------------------------------------------------

_DEMO_MAGIC = b"DEM1"


def save_demos(path, episodes: list[Episode]) -> None:
    """Length-prefixed binary records; layout documented in docs/formats.md."""
    blob = bytearray()
    blob += _DEMO_MAGIC
    blob += struct.pack("<HI", 1, len(episodes))
    for ep in episodes:
        body = bytearray()
        body += struct.pack("<qBHH", ep.seed, int(ep.success), ep.steps, len(ep.samples))
        for s in ep.samples:
            obs = np.ascontiguousarray(s.obs, dtype=np.uint8)
            wps = np.ascontiguousarray(s.waypoints, dtype=np.uint8)
            mvs = np.ascontiguousarray(s.moves, dtype="<f4")
            body += struct.pack(
                "<HHHH", obs.shape[2], obs.shape[3], len(wps), mvs.shape[0]
            )
            body += obs.tobytes() + wps.tobytes() + mvs.tobytes()
        blob += struct.pack("<I", len(body))
        blob += body
    Path(path).write_bytes(bytes(blob))


def load_demos(path) -> list[Episode]:
    blob = Path(path).read_bytes()
    if blob[:4] != _DEMO_MAGIC:
        raise RuntimeError(f"bad demo magic {blob[:4]!r}")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != 1:
        raise RuntimeError(f"unsupported demo version {version}")
    offset = 10
    episodes = []
    for _ in range(count):
        (body_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        end = offset + body_len
        seed, success, steps, n_samples = struct.unpack_from("<qBHH", blob, offset)
        pos = offset + struct.calcsize("<qBHH")
        samples = []
        for _s in range(n_samples):
            h, w, n_wp, horizon = struct.unpack_from("<HHHH", blob, pos)
            pos += 8
            n_obs = 2 * 3 * h * w
            obs = np.frombuffer(blob, np.uint8, n_obs, pos).reshape(2, 3, h, w).copy()
            pos += n_obs
            wps = np.frombuffer(blob, np.uint8, n_wp, pos).copy()
            pos += n_wp
            mvs = np.frombuffer(blob, "<f4", horizon * 2, pos).reshape(horizon, 2).copy()
            pos += horizon * 8
            samples.append(DemoSample(obs=obs, waypoints=wps, moves=mvs))
        if pos != end:
            raise RuntimeError("demo record length mismatch")
        episodes.append(Episode(seed, bool(success), steps, tuple(samples)))
        offset = end
    return episodes


def export_demos_jsonl(path, episodes: list[Episode]) -> None:
    """Debug export: metadata and actions only (rasters stay in the binary)."""
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(
                json.dumps(
                    {
                        "seed": ep.seed,
                        "success": ep.success,
                        "steps": ep.steps,
                        "samples": [
                            {
                                "waypoints": s.waypoints.tolist(),
                                "moves": np.asarray(s.moves, dtype=float).round(6).tolist(),
                            }
                            for s in ep.samples
                        ],
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )
