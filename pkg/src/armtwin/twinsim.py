"""Slotted simulation of the sensing -> scheduling -> channel ->
reconstruction -> prediction -> control -> rendering loop.

Timing model (one slot `t`, in order):

1. packets whose arrival slot is t are delivered into per-joint buffers;
2. a command issued at an earlier control slot takes effect (commands
   always actuate one slot after they are issued);
3. joints scheduled by the action transmit their current angle, each
   packet drawing an independent Gaussian latency, quantized to whole
   slots and clamped to >= 1;
4. every joint's trajectory estimate for slot t-1 is reconstructed from
   its receive buffer (interpolation inside the sample range, two-point
   extrapolation past it, hold with a single sample, configured initial
   angle when the window is empty);
5. on control slots (t % N_c == 0) the per-joint forecast is refreshed
   from the reconstructed window and a new command is issued toward the
   forecast entry selected by that joint's horizon action;
6. on render slots (t % N_r == 0) the displayed angles refresh to the
   currently executed angles (zero-order hold in between);
7. cost = weighted pose error between the true arm and the displayed
   arm; reward = fraction of joints that stayed silent this slot.

The first `predict_window` slots of every episode are a warm-up: all
joints transmit and control tracks the reconstruction directly, so the
windows are primed. Warm-up slots are excluded from metrics and are not
policy steps.

A simulator instance is single-caller mutable state; independent
instances share nothing.
"""

from __future__ import annotations

import csv
import heapq
import math
from bisect import bisect_left, bisect_right, insort
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .kinematics import pose_error

PREDICTOR_KINDS = ("linear_extrapolation", "hold_last")
PD_FORMS = ("incremental", "literal")

_INF = float("inf")


@dataclass
class SimConfig:
    """Cross-system loop parameters; defaults are the desk profile."""

    slot_duration_ms: float = 1.0
    joint_count: int = 3
    recon_window: int = 2000        # slots of history the reconstructor may use
    predict_window: int = 200       # reconstructed slots fed to the predictor
    max_horizon: int = 50           # forecast length, horizon actions are 1..H
    control_interval: int = 2       # slots between command generations
    render_interval: int = 17       # slots between display refreshes
    kp: float = 1.0
    kd: float = 0.0
    position_weight: float = 0.5
    orientation_weight: float = 0.5
    latency_mean_ms: float = 10.0
    latency_std_ms: float = 1.0
    episode_length: int = 2000      # total slots per episode, warm-up included
    predictor_kind: str = "linear_extrapolation"
    pd_form: str = "incremental"
    fit_window: int = 16            # trailing points used by the line fit
    initial_angles: tuple[float, ...] | None = None

    def validate(self) -> None:
        if self.slot_duration_ms <= 0:
            raise ValueError("slot_duration_ms must be > 0")
        if self.joint_count < 1:
            raise ValueError("joint_count must be >= 1")
        if self.max_horizon < 1:
            raise ValueError("max_horizon must be >= 1")
        if self.control_interval < 1 or self.render_interval < 1:
            raise ValueError("control_interval and render_interval must be >= 1")
        if self.recon_window < 2 or self.predict_window < 2:
            raise ValueError("recon_window and predict_window must be >= 2")
        if self.latency_std_ms < 0:
            raise ValueError("latency_std_ms must be >= 0")
        if self.episode_length < self.predict_window:
            raise ValueError("episode_length must cover the warm-up window")
        if self.predictor_kind not in PREDICTOR_KINDS:
            raise ValueError(f"predictor_kind must be one of {PREDICTOR_KINDS}")
        if self.pd_form not in PD_FORMS:
            raise ValueError(f"pd_form must be one of {PD_FORMS}")
        if self.fit_window < 2:
            raise ValueError("fit_window must be >= 2")
        if self.initial_angles is not None and len(self.initial_angles) != self.joint_count:
            raise ValueError("initial_angles must match joint_count")


@dataclass
class TrajectorySource:
    """True joint trajectory: per-joint sinusoids or a played-back CSV."""

    kind: str = "synthetic_sines"
    amplitudes: tuple[float, ...] = (0.7, 0.55, 0.45)
    frequencies_hz: tuple[float, ...] = (0.13, 0.21, 0.34)
    phases: tuple[float, ...] = (0.0, 0.9, 1.7)
    offsets: tuple[float, ...] | None = None
    phase_jitter: bool = False      # fresh uniform phase shift per episode
    samples: np.ndarray | None = None

    def validate(self, config: SimConfig) -> None:
        if self.kind == "synthetic_sines":
            lengths = {len(self.amplitudes), len(self.frequencies_hz), len(self.phases)}
            if lengths != {config.joint_count}:
                raise ValueError("synthetic parameters must have one entry per joint")
            if self.offsets is not None and len(self.offsets) != config.joint_count:
                raise ValueError("offsets must have one entry per joint")
            nyquist = 1000.0 / (2.0 * config.slot_duration_ms)
            if any(f >= nyquist for f in self.frequencies_hz):
                raise ValueError("synthetic frequencies must stay below the slot Nyquist rate")
        elif self.kind == "csv_playback":
            if self.samples is None:
                raise ValueError("csv_playback needs samples")
            if self.samples.ndim != 2 or self.samples.shape[1] != config.joint_count:
                raise ValueError("playback samples must be (slots, joint_count)")
            if self.samples.shape[0] < config.episode_length:
                raise ValueError("playback samples must cover the episode")
        else:
            raise ValueError(f"unknown trajectory kind {self.kind!r}")

    def episode_trajectory(self, config: SimConfig, jitter: np.ndarray | None) -> np.ndarray:
        """Dense (episode_length, I) array of true angles for one episode."""
        if self.kind == "csv_playback":
            return np.array(self.samples[: config.episode_length], dtype=float)
        slots = np.arange(config.episode_length, dtype=float)
        t_sec = slots * (config.slot_duration_ms / 1000.0)
        amp = np.asarray(self.amplitudes, dtype=float)
        freq = np.asarray(self.frequencies_hz, dtype=float)
        phase = np.asarray(self.phases, dtype=float)
        if jitter is not None:
            phase = phase + jitter
        off = np.zeros_like(amp) if self.offsets is None else np.asarray(self.offsets, dtype=float)
        return off + amp * np.sin(2.0 * math.pi * freq * t_sec[:, None] + phase)

    def base_angles(self, config: SimConfig, slot: int) -> np.ndarray:
        """Angles of the un-jittered trajectory at one slot."""
        if self.kind == "csv_playback":
            return np.array(self.samples[slot], dtype=float)
        t_sec = slot * (config.slot_duration_ms / 1000.0)
        amp = np.asarray(self.amplitudes, dtype=float)
        freq = np.asarray(self.frequencies_hz, dtype=float)
        phase = np.asarray(self.phases, dtype=float)
        off = np.zeros_like(amp) if self.offsets is None else np.asarray(self.offsets, dtype=float)
        return off + amp * np.sin(2.0 * math.pi * freq * t_sec + phase)


@dataclass(frozen=True)
class InFlightPacket:
    joint_index: int
    sample_value: float
    sent_slot: int
    arrival_slot: int

    def __post_init__(self) -> None:
        if self.arrival_slot < self.sent_slot:
            raise ValueError("arrival_slot must be >= sent_slot")


class Channel:
    """Unordered-delivery channel with Gaussian per-packet latency."""

    def __init__(self, slot_duration_ms: float, latency_mean_ms: float, latency_std_ms: float):
        self.slot_duration_ms = slot_duration_ms
        self.latency_mean_ms = latency_mean_ms
        self.latency_std_ms = latency_std_ms
        self._heap: list[tuple[int, int, InFlightPacket]] = []
        self._seq = 0

    def send(self, joint: int, value: float, slot: int, rng: np.random.Generator) -> InFlightPacket:
        latency_ms = self.latency_mean_ms + self.latency_std_ms * rng.standard_normal()
        delay = max(1, int(round(latency_ms / self.slot_duration_ms)))
        packet = InFlightPacket(joint, value, slot, slot + delay)
        heapq.heappush(self._heap, (packet.arrival_slot, self._seq, packet))
        self._seq += 1
        return packet

    def deliver(self, slot: int) -> list[InFlightPacket]:
        out = []
        while self._heap and self._heap[0][0] <= slot:
            out.append(heapq.heappop(self._heap)[2])
        return out

    @property
    def in_flight(self) -> int:
        return len(self._heap)


class ReceiveBuffer:
    """Per-joint (origin slot, angle) samples, kept sorted by origin."""

    def __init__(self, joint_count: int, retention: int):
        self._joints: list[list[tuple[int, float]]] = [[] for _ in range(joint_count)]
        self.retention = retention

    def insert(self, joint: int, origin: int, value: float) -> None:
        data = self._joints[joint]
        if not data or origin > data[-1][0]:
            data.append((origin, value))
        else:
            insort(data, (origin, value))

    def samples(self, joint: int) -> list[tuple[int, float]]:
        return self._joints[joint]

    def newest_origin(self, joint: int) -> int | None:
        data = self._joints[joint]
        return data[-1][0] if data else None

    def prune(self, now: int) -> None:
        cut = now - self.retention
        for data in self._joints:
            if data and data[0][0] < cut:
                lo = bisect_left(data, (cut, -_INF))
                del data[:lo]


def reconstruct(buffer: ReceiveBuffer, joint: int, t0: int, window: int, fallback: float) -> float:
    """Estimate the joint angle at slot t0-1 from samples in [t0-window, t0-1].

    Linear interpolation between the samples bracketing t0-1, two-point
    linear extrapolation when t0-1 lies past the newest sample, hold when
    a single sample is in the window, `fallback` when it is empty.
    """
    data = buffer.samples(joint)
    lo = bisect_left(data, (t0 - window, -_INF))
    hi = bisect_right(data, (t0 - 1, _INF))
    count = hi - lo
    if count == 0:
        return fallback
    if count == 1:
        return data[lo][1]
    target = t0 - 1
    if target >= data[hi - 1][0]:
        (ta, va), (tb, vb) = data[hi - 2], data[hi - 1]
    elif target <= data[lo][0]:
        (ta, va), (tb, vb) = data[lo], data[lo + 1]
    else:
        j = bisect_right(data, (target, _INF), lo, hi)
        (ta, va), (tb, vb) = data[j - 1], data[j]
    return va + (vb - va) * (target - ta) / (tb - ta)


def predict(history, kind: str, horizon: int, fit_window: int = 16) -> np.ndarray:
    """Forecast `horizon` future slots from a reconstructed window.

    linear_extrapolation fits a least-squares line over the trailing
    min(len, fit_window) points and extends it; hold_last repeats the
    final value.
    """
    if len(history) == 0:
        raise ValueError("history must be nonempty")
    if kind == "hold_last":
        return np.full(horizon, float(history[-1]))
    if kind != "linear_extrapolation":
        raise ValueError(f"unknown predictor kind {kind!r}")
    n = min(int(fit_window), len(history))
    tail = history[-n:]
    if n == 1:
        return np.full(horizon, float(tail[0]))
    mean_x = (n - 1) / 2.0
    mean_y = sum(tail) / n
    num = 0.0
    for i, y in enumerate(tail):
        num += (i - mean_x) * (y - mean_y)
    slope = num / (n * (n * n - 1) / 12.0)
    y_end = mean_y + slope * (n - 1 - mean_x)
    return y_end + slope * np.arange(1, horizon + 1, dtype=float)


def prediction_mse(forecast, truth) -> float:
    """Mean squared error between a forecast and the realized trajectory."""
    f = np.asarray(forecast, dtype=float)
    g = np.asarray(truth, dtype=float)
    if f.shape != g.shape:
        raise ValueError("forecast and truth must have equal length")
    d = f - g
    return float(d @ d) / d.shape[0]


def pd_control(
    target: float,
    target_rate: float,
    prev_exec: float,
    prev_rate: float,
    kp: float,
    kd: float,
    form: str = "incremental",
) -> float:
    """One PD command: full correction (incremental) or the raw PD term (literal)."""
    delta = kp * (target - prev_exec) + kd * (target_rate - prev_rate)
    if form == "incremental":
        return prev_exec + delta
    if form == "literal":
        return delta
    raise ValueError(f"unknown pd form {form!r}")


@dataclass
class NormalizationTable:
    lo: np.ndarray
    hi: np.ndarray


def normalize_observation(angles: np.ndarray, jacobian: np.ndarray, table: NormalizationTable) -> np.ndarray:
    """Per-component min-max normalization of [angles, jacobian.ravel()], clamped to [0,1]."""
    raw = np.concatenate([np.asarray(angles, dtype=float), np.asarray(jacobian, dtype=float).ravel()])
    scaled = (raw - table.lo) / (table.hi - table.lo)
    return np.clip(scaled, 0.0, 1.0)


_CALIBRATION_SEED = 0x5EED
_DEGENERATE_PAD = 0.5


def calibrate_normalization(arm, source: TrajectorySource, config: SimConfig) -> NormalizationTable:
    """Min/max of each observation component over the trajectory source.

    For synthetic sources the sweep covers one period of the slowest
    sinusoid plus random phase offsets (a fixed internal seed keeps the
    table identical across runs); playback sources are swept directly.
    Components with a degenerate range get a symmetric pad so constant
    entries normalize to 0.5.
    """
    obs_dim = arm.joint_count + arm.jacobian(np.zeros(arm.joint_count)).size
    lo = np.full(obs_dim, _INF)
    hi = np.full(obs_dim, -_INF)

    def absorb(angles: np.ndarray) -> None:
        raw = np.concatenate([angles, arm.jacobian(angles).ravel()])
        np.minimum(lo, raw, out=lo)
        np.maximum(hi, raw, out=hi)

    if source.kind == "csv_playback":
        for slot in range(config.episode_length):
            absorb(np.asarray(source.samples[slot], dtype=float))
    else:
        max_period = 1000.0 / (config.slot_duration_ms * min(source.frequencies_hz))
        sweep = int(min(max(config.episode_length, math.ceil(max_period) + 1), 20000))
        stride = max(1, sweep // 4000)
        for slot in range(0, sweep, stride):
            absorb(source.base_angles(config, slot))
        rng = np.random.default_rng(_CALIBRATION_SEED)
        amp = np.asarray(source.amplitudes, dtype=float)
        off = np.zeros_like(amp) if source.offsets is None else np.asarray(source.offsets, dtype=float)
        for _ in range(2048):
            absorb(off + amp * np.sin(rng.uniform(0.0, 2.0 * math.pi, amp.shape[0])))

    degenerate = (hi - lo) < 1e-9
    lo[degenerate] -= _DEGENERATE_PAD
    hi[degenerate] += _DEGENERATE_PAD
    return NormalizationTable(lo=lo, hi=hi)


@dataclass
class StepOutcome:
    observation: np.ndarray
    reward: float
    cost: float
    done: bool
    info: dict = field(default_factory=dict)


class TwinSimEnv:
    """The cross-system loop exposed as an episodic RL environment.

    Observations are the true joint angles plus the flattened arm
    Jacobian, min-max normalized into [0,1]. Actions are a 0/1 schedule
    bit and a forecast index in 1..max_horizon per joint. Reward is the
    per-slot packet saving fraction; cost is the pose error between the
    true and the displayed arm.
    """

    def __init__(self, config: SimConfig, arm, source: TrajectorySource, seed: int = 0):
        config.validate()
        source.validate(config)
        if arm.joint_count != config.joint_count:
            raise ValueError("arm joint count does not match config")
        self.config = config
        self.arm = arm
        self.source = source
        self.rng = np.random.default_rng(seed)
        self.norm_table = calibrate_normalization(arm, source, config)
        self.observation_size = int(self.norm_table.lo.shape[0])
        if config.initial_angles is not None:
            self._initial = np.asarray(config.initial_angles, dtype=float)
        else:
            self._initial = source.base_angles(config, 0)
        self.total_packets = 0          # every packet ever sent, warm-up included
        self.total_scheduled = 0        # sum of schedule bits, for conservation checks
        self._t = 0
        self._traj: np.ndarray | None = None

    @property
    def steps_per_episode(self) -> int:
        return self.config.episode_length - self.config.predict_window

    # -- episode control -----------------------------------------------------

    def reset(self) -> np.ndarray:
        cfg = self.config
        jitter = None
        if self.source.kind == "synthetic_sines" and self.source.phase_jitter:
            jitter = self.rng.uniform(0.0, 2.0 * math.pi, cfg.joint_count)
        self._traj = self.source.episode_trajectory(cfg, jitter)
        self._channel = Channel(cfg.slot_duration_ms, cfg.latency_mean_ms, cfg.latency_std_ms)
        self._buffer = ReceiveBuffer(cfg.joint_count, cfg.recon_window + cfg.predict_window)
        self._recon_hist: list[list[float]] = [[] for _ in range(cfg.joint_count)]
        self._forecast: list[np.ndarray | None] = [None] * cfg.joint_count
        self._exec = self._initial.copy()
        self._rendered = self._initial.copy()
        self._pending_cmd: np.ndarray | None = None
        self._pending_slot = -1
        self._last_cmd = self._initial.copy()
        self._prev_cmd = self._initial.copy()
        self._last_target = self._initial.copy()
        self._cold_starts = 0
        self._t = 0
        ones = np.ones(cfg.joint_count, dtype=int)
        for _ in range(cfg.predict_window):
            self._advance(ones, None, warmup=True)
        return self._observe(self._t)

    def step(self, schedule, horizons) -> StepOutcome:
        cfg = self.config
        x = np.asarray(schedule, dtype=int).reshape(-1)
        z = np.asarray(horizons, dtype=int).reshape(-1)
        if x.shape[0] != cfg.joint_count or z.shape[0] != cfg.joint_count:
            raise ValueError("schedule and horizons must have one entry per joint")
        if np.any((x != 0) & (x != 1)):
            raise ValueError("schedule bits must be 0 or 1")
        if np.any(z < 1) or np.any(z > cfg.max_horizon):
            raise ValueError(f"horizons must lie in 1..{cfg.max_horizon}")
        if self._traj is None or self._t >= cfg.episode_length:
            raise RuntimeError("call reset() before stepping")
        slot = self._t
        packets, cost, cold = self._advance(x, z, warmup=False)
        done = self._t >= cfg.episode_length
        obs = self._observe(min(self._t, cfg.episode_length - 1))
        reward = (cfg.joint_count - packets) / cfg.joint_count
        return StepOutcome(
            observation=obs,
            reward=reward,
            cost=cost,
            done=done,
            info={
                "slot": slot,
                "packets": packets,
                "error": cost,
                "horizons": tuple(int(v) for v in z),
                "cold_starts": cold,
            },
        )

    # -- internals -------------------------------------------------------------

    def _observe(self, slot: int) -> np.ndarray:
        angles = self._traj[slot]
        return normalize_observation(angles, self.arm.jacobian(angles), self.norm_table)

    def _advance(self, x: np.ndarray, z: np.ndarray | None, warmup: bool) -> tuple[int, float, int]:
        cfg = self.config
        t = self._t
        true_now = self._traj[t]

        for packet in self._channel.deliver(t):
            self._buffer.insert(packet.joint_index, packet.sent_slot, packet.sample_value)

        # commands actuate the slot after they are issued
        if self._pending_cmd is not None and t > self._pending_slot:
            self._exec = self._pending_cmd
            self._pending_cmd = None

        packets = 0
        for i in range(cfg.joint_count):
            if x[i]:
                self._channel.send(i, float(true_now[i]), t, self.rng)
                packets += 1
        self.total_packets += packets
        self.total_scheduled += int(x.sum())

        cold = 0
        for i in range(cfg.joint_count):
            newest = self._buffer.newest_origin(i)
            if newest is None or newest < t - cfg.recon_window:
                cold += 1
            value = reconstruct(self._buffer, i, t, cfg.recon_window, float(self._initial[i]))
            self._recon_hist[i].append(value)
        self._cold_starts += cold

        if t % cfg.control_interval == 0:
            use_forecast = not warmup
            if use_forecast:
                for i in range(cfg.joint_count):
                    window = self._recon_hist[i][-cfg.predict_window:]
                    self._forecast[i] = predict(
                        window, cfg.predictor_kind, cfg.max_horizon, cfg.fit_window
                    )
            cmd = np.empty(cfg.joint_count)
            for i in range(cfg.joint_count):
                if use_forecast:
                    target = float(self._forecast[i][int(z[i]) - 1])
                else:
                    target = self._recon_hist[i][-1]
                target_rate = (target - self._last_target[i]) / cfg.control_interval
                prev = self._last_cmd[i]
                prev_rate = (prev - self._prev_cmd[i]) / cfg.control_interval
                cmd[i] = pd_control(
                    target, target_rate, prev, prev_rate, cfg.kp, cfg.kd, cfg.pd_form
                )
                self._last_target[i] = target
            self._prev_cmd = self._last_cmd
            self._last_cmd = cmd
            self._pending_cmd = cmd
            self._pending_slot = t

        if t % cfg.render_interval == 0:
            self._rendered = self._exec

        cost = pose_error(
            self.arm.pose(true_now),
            self.arm.pose(self._rendered),
            cfg.position_weight,
            cfg.orientation_weight,
        )

        if t % 512 == 0:
            self._buffer.prune(t)

        self._t = t + 1
        return packets, cost, cold

    # test/diagnostic accessors
    @property
    def buffer(self) -> ReceiveBuffer:
        return self._buffer

    @property
    def rendered(self) -> np.ndarray:
        return self._rendered

    @property
    def true_angles(self) -> np.ndarray:
        return self._traj[min(self._t, self.config.episode_length - 1)]

    def true_at(self, slot: int) -> np.ndarray:
        return self._traj[slot]


@dataclass
class BaselineResult:
    rows: list[tuple]               # (slot, packets, reward, cost, error)
    packet_rate: float              # packets per second over reported slots
    mean_error: float


def run_baseline(config: SimConfig, arm, source: TrajectorySource, seed: int = 0) -> BaselineResult:
    """Every joint transmits every slot and control tracks the reconstruction.

    Metrics cover the post-warm-up slots; the packet rate is I per slot.
    """
    env = TwinSimEnv(config, arm, source, seed=seed)
    cfg = config
    env.reset()
    ones = np.ones(cfg.joint_count, dtype=int)
    rows = []
    errors = []
    # identical mechanics to the warm-up: all-ones schedule, control from
    # reconstruction, so drive the internal advance directly
    for _ in range(env.steps_per_episode):
        slot = env._t
        packets, cost, _ = env._advance(ones, None, warmup=True)
        rows.append((slot, packets, 0.0, cost, cost))
        errors.append(cost)
    seconds = env.steps_per_episode * cfg.slot_duration_ms / 1000.0
    total = sum(r[1] for r in rows)
    return BaselineResult(rows=rows, packet_rate=total / seconds, mean_error=float(np.mean(errors)))


# --- trajectory / metrics CSV formats ----------------------------------------


def load_trajectory_csv(path) -> np.ndarray:
    """Read `slot,tau_1,...,tau_I` rows into a dense (slots, I) array."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "slot" or len(header) < 2:
            raise ValueError(f"{path}: expected header slot,tau_1,...,tau_I")
        expected = ["slot"] + [f"tau_{i + 1}" for i in range(len(header) - 1)]
        if header != expected:
            raise ValueError(f"{path}: malformed header {header}")
        slots = []
        values = []
        for line in reader:
            if not line:
                continue
            slots.append(int(line[0]))
            values.append([float(v) for v in line[1:]])
    if not slots:
        raise ValueError(f"{path}: no samples")
    if any(b <= a for a, b in zip(slots, slots[1:])):
        raise ValueError(f"{path}: slot indices must increase strictly")
    if slots != list(range(slots[0], slots[0] + len(slots))):
        raise ValueError(f"{path}: slots must be contiguous")
    return np.array(values, dtype=float)


def trajectory_csv_text(samples: np.ndarray) -> str:
    """Render a (slots, I) array in the trajectory CSV format."""
    arr = np.asarray(samples, dtype=float)
    header = "slot," + ",".join(f"tau_{i + 1}" for i in range(arr.shape[1]))
    lines = [header]
    for slot, row in enumerate(arr):
        lines.append(str(slot) + "," + ",".join(repr(float(v)) for v in row))
    return "\n".join(lines) + "\n"


def metrics_csv_text(rows) -> str:
    """Render per-slot metrics rows as `slot,packets,reward,cost,error`."""
    lines = ["slot,packets,reward,cost,error"]
    for slot, packets, reward, cost, error in rows:
        lines.append(
            f"{slot},{packets},{repr(float(reward))},{repr(float(cost))},{repr(float(error))}"
        )
    return "\n".join(lines) + "\n"
