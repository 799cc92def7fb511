"""Deterministic planar toy world generating multi-embodiment trajectories.

Each embodiment is a set of canonical part slots with simple integrator
dynamics (next = current + action * dt for actuated dims; other dims stay
constant). A scripted proportional controller drives the left arm, a
planar 2-link linkage, toward task targets, so every episode is exactly
replayable from its stored actions; without exploration noise the
future-state prediction problem also has zero irreducible error.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .slots import CanonicalSlot, EmbodimentSpec

DT = 0.05
EPISODE_LEN = 256
GAIN = 2.0  # proportional controller gain
LINK_LENGTHS = (0.5, 0.4)
IMAGE_SIZE = 32
BLOB_SIGMA = 2.0  # spread over several vision patches so blob positions are decodable sub-patch
GRAB_RADIUS = 0.1  # carry task switches targets inside this radius
SUCCESS_RADIUS = 0.05  # calibrated so the scripted controller scores 100%

TASKS = ("reach", "carry", "kneel_place")

S = CanonicalSlot


def toy_embodiments() -> list[EmbodimentSpec]:
    """The three shipped embodiments with pairwise-different slot sets."""
    biped_full = EmbodimentSpec(
        name="biped-full",
        state_dims={
            S.LEFT_ARM: 2, S.RIGHT_ARM: 2, S.LEFT_HAND: 2, S.RIGHT_HAND: 2,
            S.LEFT_LEG: 2, S.RIGHT_LEG: 2, S.HEAD: 1, S.WAIST: 1, S.OTHERS: 2,
        },
        action_dims={
            S.LEFT_ARM: 2, S.RIGHT_ARM: 2, S.LEFT_HAND: 2, S.RIGHT_HAND: 2,
            S.LEFT_LEG: 2, S.RIGHT_LEG: 2, S.HEAD: 1, S.WAIST: 1,
        },
    )
    biped_nohands = EmbodimentSpec(
        name="biped-nohands",
        state_dims={
            S.LEFT_ARM: 2, S.RIGHT_ARM: 2, S.LEFT_LEG: 2, S.RIGHT_LEG: 2,
            S.HEAD: 1, S.WAIST: 1, S.OTHERS: 2,
        },
        # upper-body-only action space; legs are state-only
        action_dims={S.LEFT_ARM: 2, S.RIGHT_ARM: 2, S.HEAD: 1, S.WAIST: 1},
    )
    armbot = EmbodimentSpec(
        name="armbot",
        state_dims={S.LEFT_ARM: 2, S.RIGHT_ARM: 2, S.HEAD: 1, S.OTHERS: 2},
        action_dims={S.LEFT_ARM: 2, S.RIGHT_ARM: 2, S.HEAD: 1},
    )
    return [biped_full, biped_nohands, armbot]


# -- kinematics --------------------------------------------------------------

def forward_kinematics(q: np.ndarray) -> np.ndarray:
    """Planar 2-link end-effector position for joint angles (q1, q2)."""
    l1, l2 = LINK_LENGTHS
    return np.array(
        [
            l1 * np.cos(q[0]) + l2 * np.cos(q[0] + q[1]),
            l1 * np.sin(q[0]) + l2 * np.sin(q[0] + q[1]),
        ]
    )


def inverse_kinematics(target: np.ndarray) -> np.ndarray:
    """Elbow-up closed-form IK; target must be inside the reachable annulus."""
    l1, l2 = LINK_LENGTHS
    r2 = float(target[0] ** 2 + target[1] ** 2)
    c2 = (r2 - l1 * l1 - l2 * l2) / (2 * l1 * l2)
    c2 = np.clip(c2, -1.0, 1.0)
    q2 = np.arccos(c2)
    q1 = np.arctan2(target[1], target[0]) - np.arctan2(l2 * np.sin(q2), l1 + l2 * np.cos(q2))
    return np.array([q1, q2])


def end_effector(spec: EmbodimentSpec, state: np.ndarray) -> np.ndarray:
    """Left-arm end-effector position for a raw state vector."""
    q = state[spec.state_slices()[S.LEFT_ARM]]
    return forward_kinematics(q)


# -- instruction vocabulary --------------------------------------------------

def build_vocabulary() -> dict:
    vocab = {"pad": 0}
    for i, task in enumerate(TASKS):
        vocab[task] = 1 + i
    return vocab


VOCAB = build_vocabulary()
MAX_INSTRUCTION_LEN = 1  # a single task token; goal coordinates come from vision


def encode_instruction(task: str) -> np.ndarray:
    """Tokenize the task command. Goal coordinates are deliberately not in
    the instruction: a discrete coordinate vocabulary lets the policy
    memorize the training scenes instead of learning the visual goal
    readout that generalizes to new scenes."""
    return np.array([VOCAB[task]], dtype=np.int64)


def scene_instruction(scene: dict) -> np.ndarray:
    return encode_instruction(scene["task"])


# -- scripted controller -----------------------------------------------------

def _latch_slot(spec: EmbodimentSpec) -> S:
    """Slot whose joints act as the carry gripper: the left hand when the
    embodiment has one, otherwise the head stands in (it is actuated on
    every embodiment and otherwise idle during carry)."""
    return S.LEFT_HAND if S.LEFT_HAND in spec.action_dims else S.HEAD


def _hand_mean(spec: EmbodimentSpec, state: np.ndarray) -> float:
    sl = spec.state_slices().get(_latch_slot(spec))
    return float(state[sl].mean()) if sl is not None else 0.0


def _grab_state(spec: EmbodimentSpec, state: np.ndarray, scene: dict):
    """Carry-task latch, a pure function of the state (hence Markov).

    closing: hand setpoint goes to 1 once the end effector has touched the
    first target, with hysteresis (hand > 0.2 keeps it closing) so the
    latch cannot oscillate. grabbed: hand > 0.5 switches the arm target to
    the second target, permanently (hand keeps rising toward 1).
    """
    if scene["task"] != "carry":
        return False, False
    targets = np.atleast_2d(scene["targets"])
    dist1 = np.linalg.norm(end_effector(spec, state) - targets[0])
    hand = _hand_mean(spec, state)
    closing = dist1 <= GRAB_RADIUS or hand > 0.2
    grabbed = hand > 0.5
    return closing, grabbed


# coordinated whole-body posture: every non-task-specific slot tracks a
# fixed linear function of the commanded arm configuration, so reaching is
# a genuine whole-body motion (and every actuated part's behavior depends
# on the commanded goal, not just the arm's)
_POSTURE_COUPLING = {
    S.RIGHT_ARM: ((0.6, 0.0), (0.0, -0.4)),
    S.LEFT_HAND: ((0.0, 0.3), (-0.3, 0.0)),
    S.RIGHT_HAND: ((0.0, -0.3), (0.3, 0.0)),
    S.LEFT_LEG: ((0.4, 0.0), (0.0, -0.2)),
    S.RIGHT_LEG: ((-0.4, 0.0), (0.0, 0.2)),
    S.HEAD: ((0.3, 0.0),),
    S.WAIST: ((0.0, -0.3),),
}


def _setpoints(spec: EmbodimentSpec, state: np.ndarray, scene: dict) -> np.ndarray:
    """Per-actuated-dim setpoints; a pure function of (state, scene), so the
    whole system is Markov and future states are exactly predictable."""
    task = scene["task"]
    targets = np.atleast_2d(scene["targets"])
    closing, grabbed = _grab_state(spec, state, scene)
    active = targets[-1] if grabbed else targets[0]

    q_star = inverse_kinematics(active)
    latch = _latch_slot(spec) if task == "carry" else None
    sp = np.zeros(spec.action_dim)
    for slot, sl in spec.action_slices().items():
        if slot == S.LEFT_ARM:
            sp[sl] = q_star
        elif slot == latch:
            sp[sl] = 1.0 if closing else 0.0
        elif slot == S.WAIST and task == "kneel_place":
            sp[sl] = -0.8
        elif slot in (S.LEFT_LEG, S.RIGHT_LEG) and task == "kneel_place":
            sp[sl] = np.array([0.5, -0.5])[: sl.stop - sl.start]
        elif slot in _POSTURE_COUPLING:
            coupling = np.array(_POSTURE_COUPLING[slot])[: sl.stop - sl.start]
            sp[sl] = coupling @ q_star
    return sp


def expert_action(spec: EmbodimentSpec, state: np.ndarray, scene: dict) -> np.ndarray:
    """Proportional controller toward the task setpoints, on actuated dims."""
    sp = _setpoints(spec, state, scene)
    current = np.concatenate(
        [state[spec.state_slices()[slot]] for slot in spec.actuated_slots]
    ) if spec.actuated_slots else np.zeros(0)
    return GAIN * (sp - current)


def step_dynamics(
    spec: EmbodimentSpec, state: np.ndarray, action: np.ndarray, dt: float = DT
) -> np.ndarray:
    """next = current + action * dt on actuated dims; other dims constant."""
    if action.shape[-1] != spec.action_dim:
        raise ValueError("action dim mismatch")
    nxt = state.astype(np.float64).copy()
    ssl = spec.state_slices()
    for slot, asl in spec.action_slices().items():
        nxt[ssl[slot]] = state[ssl[slot]] + action[asl] * dt
    return nxt


# -- rendering ---------------------------------------------------------------

def _blob(cx: float, cy: float) -> np.ndarray:
    # world [-1, 1] -> pixel coordinates
    px = (cx + 1.0) / 2.0 * (IMAGE_SIZE - 1)
    py = (cy + 1.0) / 2.0 * (IMAGE_SIZE - 1)
    xs = np.arange(IMAGE_SIZE)
    gx = np.exp(-((xs - px) ** 2) / (2 * BLOB_SIGMA**2))
    gy = np.exp(-((xs - py) ** 2) / (2 * BLOB_SIGMA**2))
    return np.clip(gy[:, None] * gx[None, :], 0.0, 1.0)


FINE_GAUGE_SCALE = 8  # fine gauge magnifies within-cell phase 8x
FINE_GAUGE_RADII = (0.4, 0.85)  # one phase circle per gauge coordinate


def _fine_center(code: float, radius: float) -> tuple[float, float]:
    """Phase-circle vernier: a [-1, 1] code's within-cell phase at
    FINE_GAUGE_SCALE cells, drawn as a blob on a circle of the given
    radius (angle = 2*pi * phase). Together with the coarse gauge this is
    a vernier: coarse readout picks the cell, the blob's angle refines the
    value by the scale factor. The map is injective within a cell and
    continuous across cell boundaries (the phase wraps around the circle),
    so it has neither the sawtooth's boundary jump nor a triangle wave's
    two-sided fold ambiguity."""
    theta = 2.0 * np.pi * ((code + 1.0) / 2.0 * FINE_GAUGE_SCALE % 1.0)
    return radius * np.cos(theta), radius * np.sin(theta)


def render_frame(spec: EmbodimentSpec, state: np.ndarray, scene: dict) -> np.ndarray:
    """32x32x3 uint8 frame: red = currently active Cartesian target, green =
    a configuration gauge (blob at the active commanded arm setpoint, scaled
    by pi, so the goal configuration is continuously visible), blue = a fine
    gauge (one phase-circle blob per setpoint coordinate, within-cell phase
    magnified 8x, for sub-pixel goal precision). A deterministic function
    of (state, scene);
    the arm itself is never drawn, so vision alone cannot recover the
    current state."""
    targets = np.atleast_2d(scene["targets"])
    codes = np.atleast_2d(scene["codes"])
    _, grabbed = _grab_state(spec, state, scene)
    active = targets[-1] if grabbed else targets[0]
    active_code = codes[-1] if grabbed else codes[0]
    fine = np.clip(
        sum(
            _blob(*_fine_center(c, r))
            for c, r in zip(active_code[:2], FINE_GAUGE_RADII)
        ),
        0.0,
        1.0,
    )
    img = np.stack(
        [
            _blob(active[0], active[1]),
            _blob(active_code[0], active_code[1]),
            fine,
        ],
        axis=-1,
    )
    return np.round(img * 255.0).astype(np.uint8)


# -- episode generation ------------------------------------------------------

@dataclass
class Episode:
    """One scripted trajectory; states/actions raw (unnormalized).

    ``actions`` are the executed ones (re-integrating them reproduces
    ``states`` exactly); ``expert_actions`` are the clean controller outputs
    at each visited state and are the imitation targets. They differ only
    when exploration noise was injected during generation."""

    embodiment: str
    task: str
    seed: int
    states: np.ndarray  # (T, S)
    actions: np.ndarray  # (T, A) executed
    expert_actions: np.ndarray  # (T, A) imitation labels
    images: np.ndarray  # (T, H, W, 3) uint8
    instruction: np.ndarray  # (L,) int64
    scene: dict = field(default_factory=dict)

    @property
    def length(self) -> int:
        return self.states.shape[0]


def _sample_setpoint(rng: np.random.Generator) -> np.ndarray:
    """Commanded arm configuration. The shoulder range stays clear of the
    +-pi branch cut of the closed-form inverse kinematics (so IK(FK(q*))
    recovers q* exactly) and the elbow range keeps the target radius inside
    [0.35, 0.85]."""
    return np.array([rng.uniform(-2.4, 2.4), rng.uniform(0.7, 2.35)])


def _initial_state(spec: EmbodimentSpec, rng: np.random.Generator) -> np.ndarray:
    state = np.zeros(spec.state_dim)
    for slot, sl in spec.state_slices().items():
        if slot in (S.LEFT_ARM, S.RIGHT_ARM):
            state[sl] = rng.uniform(-np.pi / 2, np.pi / 2, size=sl.stop - sl.start)
        elif slot == S.OTHERS:
            state[sl] = rng.uniform(-1.0, 1.0, size=sl.stop - sl.start)
        else:
            state[sl] = rng.uniform(-0.5, 0.5, size=sl.stop - sl.start)
    return state


def make_scene(spec: EmbodimentSpec, task: str, seed: int) -> tuple[np.ndarray, dict]:
    """Initial state plus scene description. Targets sit at the forward
    kinematics of sampled joint setpoints (whose codes become the
    instruction) and start >= 0.3 from the end effector so untrained
    policies cannot succeed by standing still."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    rng = np.random.default_rng(np.random.SeedSequence([TASKS.index(task), seed]))
    state = _initial_state(spec, rng)
    ee = end_effector(spec, state)
    for _ in range(1000):
        q1 = _sample_setpoint(rng)
        t1 = forward_kinematics(q1)
        if np.linalg.norm(t1 - ee) >= 0.3:
            break
    setpoints = [q1]
    targets = [t1]
    if task == "carry":
        for _ in range(1000):
            q2 = _sample_setpoint(rng)
            t2 = forward_kinematics(q2)
            if np.linalg.norm(t2 - t1) >= 0.3:
                break
        setpoints.append(q2)
        targets.append(t2)
    scene = {
        "task": task,
        "targets": np.stack(targets),
        "codes": np.stack(setpoints) / np.pi,
        "seed": int(seed),
    }
    return state, scene


def generate_episode(
    spec: EmbodimentSpec,
    task: str,
    seed: int,
    length: int = EPISODE_LEN,
    action_noise: float = 0.0,
) -> Episode:
    """Roll the scripted controller for ``length`` steps.

    ``action_noise`` adds i.i.d. Gaussian exploration noise to the executed
    actions (the labels stay clean). This widens state coverage into a tube
    around the nominal trajectories, so (a) a policy cannot identify the
    commanded goal from the visited states alone — overlapping tubes from
    different scenes force it to read the goal from the context — and (b)
    the states a slightly-off closed-loop policy visits are in distribution,
    with corrective labels."""
    state, scene = make_scene(spec, task, seed)
    rng = np.random.default_rng(np.random.SeedSequence([TASKS.index(task), seed, 1]))
    states = np.empty((length, spec.state_dim))
    actions = np.empty((length, spec.action_dim))
    expert_actions = np.empty((length, spec.action_dim))
    images = np.empty((length, IMAGE_SIZE, IMAGE_SIZE, 3), dtype=np.uint8)
    for t in range(length):
        states[t] = state
        expert_actions[t] = expert_action(spec, state, scene)
        actions[t] = expert_actions[t]
        if action_noise > 0.0:
            actions[t] += action_noise * rng.standard_normal(spec.action_dim)
        images[t] = render_frame(spec, state, scene)
        state = step_dynamics(spec, state, actions[t])
    return Episode(
        embodiment=spec.name,
        task=task,
        seed=int(seed),
        states=states,
        actions=actions,
        expert_actions=expert_actions,
        images=images,
        instruction=scene_instruction(scene),
        scene=scene,
    )


def final_target(scene: dict) -> np.ndarray:
    return np.atleast_2d(scene["targets"])[-1]


def task_success(spec: EmbodimentSpec, state: np.ndarray, scene: dict) -> bool:
    """Terminal success: end effector within SUCCESS_RADIUS of the task's
    final target, in normalized workspace units."""
    dist = np.linalg.norm(end_effector(spec, state) - final_target(scene))
    return bool(dist < SUCCESS_RADIUS)
