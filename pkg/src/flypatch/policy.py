"""Attacker policy and a first-order kinematic simulator for kidnapping runs.

All poses are planar rigid poses (position plus yaw) in a shared world frame;
each drone's camera looks along its body x-axis.  The victim runs the
follower law :func:`frontnet_controller` on whatever its network predicts.
The attacker positions itself so that one of its patches appears in the
victim's image under an optimized placement, which (ideally) makes the
network predict the matching target and so steers the victim.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .attack import PatchSet
from .data import background, draw_subject, glyph_masks
from .geometry import (NUM_FACES, CameraModel, Pose, compose_pose, patch_transform_to_relative_pose,
                       relative_pose, relative_pose_to_patch_transform, visible_face, wrap_angle)
from .placement import place_separable
from .victim import VictimModel

SCENARIOS = ("i", "ii", "iii")
MIN_PREDICTED_DEPTH = 0.1
LOG_COLUMNS = ["t", "vx", "vy", "vz", "vyaw", "ax", "ay", "az", "ayaw", "m_star", "k_star", "err"]


@dataclass
class WorldState:
    victim: Pose
    attacker: Pose | None = None
    human: Pose | None = None
    time: float = 0.0


@dataclass
class SimConfig:
    dt: float = 0.05
    victim_speed: float = 0.5
    attacker_speed: float = 2.0
    yaw_rate: float = math.pi / 2
    standoff: float = 1.0
    duration: float = 30.0
    patch_width_m: float = 0.4
    cam: CameraModel = field(default_factory=CameraModel)

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not (self.victim_speed > 0 and self.attacker_speed > 0 and self.yaw_rate > 0):
            raise ValueError("speeds must be positive")
        if self.duration < 0:
            raise ValueError("duration must be >= 0")


def frontnet_controller(victim: Pose, predicted, standoff: float = 1.0) -> Pose:
    """Setpoint that brings the predicted subject to ``standoff`` straight ahead."""
    x, y, z = (float(v) for v in np.asarray(predicted, dtype=float)[:3])
    if not x > 0:
        raise ValueError("predicted depth must be positive")
    return compose_pose(victim, Pose(np.array([x - standoff, y, z]), math.atan2(y, x)))


def attacker_policy(patchset: PatchSet, targets, victim: Pose, desired_victim: Pose,
                    cam: CameraModel | None = None, patch_width_m: float = 0.4,
                    standoff: float = 1.0):
    """Pick the active (patch, target) pair whose induced victim setpoint lands
    closest to ``desired_victim`` and return the attacker pose that shows it.

    Returns ``(attacker_setpoint, m_star, k_star)``.
    """
    cam = cam or CameraModel()
    targets = np.asarray(targets, dtype=float)
    pairs = patchset.active_pairs()
    if not pairs:
        raise ValueError("no active patch/target pairs")
    best, best_d = None, math.inf
    for m, k in pairs:
        induced = frontnet_controller(victim, targets[k], standoff)
        d = float(np.linalg.norm(desired_victim.position - induced.position))
        if d < best_d:
            best, best_d = (m, k), d
    m, k = best
    rel = patch_transform_to_relative_pose(cam, patchset.transform(m, k), patch_width_m,
                                           patch_index=m % NUM_FACES)
    return compose_pose(victim, rel), m, k


def _move(pose: Pose, goal: Pose, speed: float, yaw_rate: float, dt: float) -> Pose:
    delta = goal.position - pose.position
    dist = float(np.linalg.norm(delta))
    reach = speed * dt
    pos = goal.position.copy() if dist <= reach else pose.position + delta * (reach / dist)
    dyaw = wrap_angle(goal.yaw - pose.yaw)
    turn = yaw_rate * dt
    yaw = goal.yaw if abs(dyaw) <= turn else pose.yaw + math.copysign(turn, dyaw)
    return Pose(pos, yaw)


def step_simulation(state: WorldState, victim_setpoint: Pose, attacker_setpoint: Pose | None,
                    cfg: SimConfig) -> WorldState:
    victim = _move(state.victim, victim_setpoint, cfg.victim_speed, cfg.yaw_rate, cfg.dt)
    attacker = state.attacker
    if attacker is not None and attacker_setpoint is not None:
        attacker = _move(attacker, attacker_setpoint, cfg.attacker_speed, cfg.yaw_rate, cfg.dt)
    return WorldState(victim, attacker, state.human, state.time + cfg.dt)


# -- desired trajectories -------------------------------------------------------

def static_trajectory(pose: Pose) -> Callable[[float], Pose]:
    return lambda t: pose


def sinusoid_trajectory(amplitude: float = 0.5, period: float = 20.0, x: float = 0.0,
                        z: float = 0.0) -> Callable[[float], Pose]:
    """Lateral sweep ``y = amplitude * sin(2 pi t / period)`` at fixed x and z."""
    def traj(t: float) -> Pose:
        return Pose(np.array([x, amplitude * math.sin(2 * math.pi * t / period), z]), 0.0)
    return traj


def waypoint_trajectory(waypoints, holds) -> Callable[[float], Pose]:
    """Piecewise-constant schedule: waypoint ``i`` is held for ``holds[i]`` seconds.

    Waypoints are ``(x, y, z)`` or ``(x, y, z, yaw)``; the last one is held forever.
    """
    if len(waypoints) == 0 or len(waypoints) != len(holds):
        raise ValueError("need one hold time per waypoint")
    poses = [Pose(np.asarray(w[:3], dtype=float), float(w[3]) if len(w) > 3 else 0.0)
             for w in waypoints]
    ends = np.cumsum(np.asarray(holds, dtype=float))

    def traj(t: float) -> Pose:
        i = int(np.searchsorted(ends, t, side="right"))
        return poses[min(i, len(poses) - 1)]
    return traj


def trajectory_from_config(spec: dict) -> Callable[[float], Pose]:
    kind = spec.get("type", "sinusoid")
    if kind == "sinusoid":
        return sinusoid_trajectory(spec.get("amplitude", 0.5), spec.get("period", 20.0),
                                   spec.get("x", 0.0), spec.get("z", 0.0))
    if kind == "waypoints":
        return waypoint_trajectory(spec["points"], spec["holds"])
    raise ValueError(f"unknown trajectory type {kind!r}")


# -- view synthesis -------------------------------------------------------------

def render_view(state: WorldState, backdrop: np.ndarray, patchset: PatchSet | None,
                cfg: SimConfig) -> np.ndarray:
    """The victim's camera frame: backdrop, then human and attacker far to near."""
    cam = cfg.cam
    layers = []
    if state.human is not None:
        rel = relative_pose(state.victim, state.human)
        if rel.position[0] > 0:
            layers.append((rel.position[0], "human", rel))
    if state.attacker is not None and patchset is not None:
        rel = relative_pose(state.victim, state.attacker)
        if rel.position[0] > 0:
            layers.append((rel.position[0], "patch", rel))
    img = backdrop.astype(np.float64).copy()
    for _, kind, rel in sorted(layers, key=lambda item: -item[0]):
        if kind == "human":
            pose = np.append(rel.position, wrap_angle(rel.yaw - math.pi))
            torso, head, _ = glyph_masks(cam, pose)
            if torso.any() or head.any():
                img = draw_subject(img, cam, pose)
            continue
        face = visible_face(rel.yaw)
        if face >= patchset.num_patches:
            continue
        t = relative_pose_to_patch_transform(cam, rel, cfg.patch_width_m)
        img = place_separable(
            torch.as_tensor(img)[None], torch.as_tensor(patchset.patches[face], dtype=torch.float64)[None],
            torch.tensor([[t.s, t.tx, t.ty]], dtype=torch.float64))[0].numpy()
    return img


# -- episodes -------------------------------------------------------------------

@dataclass
class EpisodeResult:
    log: np.ndarray        # rows in LOG_COLUMNS order
    tracking_error: float  # time integral of the position error
    mean_error: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_COLUMNS)
            for row in self.log:
                w.writerow([f"{v:.10g}" if i not in (9, 10) else str(int(v))
                            for i, v in enumerate(row)])


def run_kidnap_episode(model: VictimModel | None, patchset: PatchSet | None, targets,
                       desired_trajectory: Callable[[float], Pose], cfg: SimConfig | None = None,
                       scenario: str = "ii", idealized: bool = False, seed: int = 0,
                       victim_start: Pose | None = None) -> EpisodeResult:
    """Closed-loop episode.

    Scenario ``"i"``: human and victim only; the human walks the desired
    trajectory ``standoff`` ahead of it, facing the victim.  ``"ii"``:
    attacker and victim.  ``"iii"``: all three.  With ``idealized`` the victim's
    prediction is replaced by the chosen target, as if the patch were perfect.
    """
    if scenario not in SCENARIOS:
        raise ValueError(f"scenario must be one of {SCENARIOS}")
    cfg = cfg or SimConfig()
    attack = scenario in ("ii", "iii")
    if attack and (patchset is None or targets is None):
        raise ValueError(f"scenario {scenario} needs patches and targets")
    if not idealized and model is None:
        raise ValueError("a victim model is required unless idealized")
    human_on = scenario in ("i", "iii")
    targets = None if targets is None else np.asarray(targets, dtype=float)
    backdrop = background(cfg.cam, np.random.default_rng([seed, 7]))

    def human_at(t):
        if not human_on:
            return None
        d = desired_trajectory(t)
        return compose_pose(d, Pose(np.array([cfg.standoff, 0.0, 0.0]), math.pi))

    state = WorldState(victim_start or Pose.identity(), None, human_at(0.0), 0.0)
    if attack:
        state.attacker, _, _ = attacker_policy(patchset, targets, state.victim,
                                               desired_trajectory(0.0), cfg.cam,
                                               cfg.patch_width_m, cfg.standoff)
    dtype = None if model is None else model.conv1.weight.dtype
    steps = int(round(cfg.duration / cfg.dt))
    rows, errors = [], []
    for i in range(steps + 1):
        desired = desired_trajectory(state.time)
        err = float(np.linalg.norm(desired.position - state.victim.position))
        a_sp, m_star, k_star = None, -1, -1
        if attack:
            a_sp, m_star, k_star = attacker_policy(patchset, targets, state.victim, desired,
                                                   cfg.cam, cfg.patch_width_m, cfg.standoff)
        a = state.attacker
        rows.append([state.time, *state.victim.position, state.victim.yaw,
                     *(a.position if a is not None else [math.nan] * 3),
                     a.yaw if a is not None else math.nan, m_star, k_star, err])
        errors.append(err)
        if i == steps:
            break
        if idealized and attack:
            pred = targets[k_star]
        elif model is None:
            pred = np.array([cfg.standoff, 0.0, 0.0])
        else:
            view = render_view(state, backdrop, patchset if attack else None, cfg)
            with torch.no_grad():
                pred = model(torch.as_tensor(view, dtype=dtype)).double().numpy()[:3]
        pred = np.array([max(float(pred[0]), MIN_PREDICTED_DEPTH), pred[1], pred[2]])
        v_sp = frontnet_controller(state.victim, pred, cfg.standoff)
        state = step_simulation(state, v_sp, a_sp, cfg)
        state.human = human_at(state.time)
    times = np.array([r[0] for r in rows])
    errors = np.asarray(errors)
    integral = float(np.trapezoid(errors, times)) if len(rows) > 1 else 0.0
    mean = integral / times[-1] if len(rows) > 1 and times[-1] > 0 else float(errors[0])
    return EpisodeResult(np.array(rows, dtype=float), integral, mean)


def hold_position_error(desired_trajectory: Callable[[float], Pose], cfg: SimConfig,
                        victim_start: Pose | None = None) -> float:
    """Mean tracking error of a victim that never moves (no-attack baseline)."""
    start = victim_start or Pose.identity()
    times = np.arange(int(round(cfg.duration / cfg.dt)) + 1) * cfg.dt
    errs = [np.linalg.norm(desired_trajectory(t).position - start.position) for t in times]
    if len(times) < 2:
        return float(errs[0])
    return float(np.trapezoid(errs, times) / times[-1])
