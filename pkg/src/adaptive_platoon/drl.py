"""Level two: state maps, reward, and a from-scratch DQN that picks the platoon size."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .config import DQNConfig, ExperimentConfig
from .platooning import AlreadyJoined, time_to_join


class TrainingFault(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class WarmingUp(LookupError):
    """Replay memory holds fewer experiences than a batch needs."""


class ArchitectureMismatch(ValueError):
    pass


# ------------------------------------------------------------------- reward

def vehicle_reward(wait: np.ndarray | float, c: float, w_m: float) -> np.ndarray | float:
    # scalars keep their number type, so Fraction inputs give exact results
    r = wait / w_m if np.ndim(wait) == 0 else np.asarray(wait, dtype=np.float64) / w_m
    return c - c * r * r


def reward(waits: Sequence[float] | np.ndarray, c: float, w_m: float) -> float:
    """Mean per-vehicle reward; ``c`` when nobody is waiting upstream."""
    if c <= 0 or w_m <= 0:
        raise ValueError("c and W_m must be positive")
    w = np.asarray(waits, dtype=np.float64)
    if w.size == 0:
        return float(c)
    return float(np.mean(vehicle_reward(w, c, w_m)))


# ------------------------------------------------------------ state encoding

N_CHANNELS = 4


def encode_state(world, target_lane: int, dqn: DQNConfig | None = None) -> np.ndarray:
    """Four per-lane grids: occupancy, speed / v_max, clipped time-to-join, target-lane map.

    Column 0 is the cell touching the stop line.  A cell is occupied when the
    part of a vehicle's footprint lying in it covers more than half its area.
    """
    q = dqn or world.config.dqn
    g, d = world.geo, world.dyn
    n_lanes = world.layout.n_movements
    cell = g.lane_width
    ncell = q.grid_cells
    s = np.zeros((N_CHANNELS, n_lanes, ncell), dtype=np.float32)
    s[3, target_lane, :] = 1.0
    cell_area = cell * cell
    for lane in range(n_lanes):
        idx = world.lane_indices(lane)
        if len(idx) == 0:
            continue
        ttj = _lane_ttj(world, idx, d.platoon_headway)
        for k, i in enumerate(idx):
            front = -float(world.pos[i])
            rear = front + float(world.length[i])
            if rear <= 0.0:
                continue
            lo = max(front, 0.0)
            j0 = int(lo // cell)
            j1 = min(int(rear // cell), ncell - 1)
            for j in range(j0, j1 + 1):
                cover = min(rear, (j + 1) * cell) - max(lo, j * cell)
                if cover * g.vehicle_width / cell_area > 0.5:
                    s[0, lane, j] = 1.0
                    s[1, lane, j] = float(world.speed[i]) / d.v_max
                    s[2, lane, j] = min(ttj[k] / q.ttj_norm, 1.0)
    return s


def _lane_ttj(world, idx: np.ndarray, d_h: float) -> np.ndarray:
    """Time-to-join of each vehicle in ``idx`` behind the lane's first pending vehicle."""
    out = np.zeros(len(idx))
    pending = [k for k, i in enumerate(idx) if not world.released[i]]
    if len(pending) < 2:
        return out
    lead = idx[pending[0]]
    lengths = [float(world.length[idx[k]]) for k in pending]
    for rank, k in enumerate(pending[1:], start=2):
        i = idx[k]
        try:
            out[k] = time_to_join(rank, float(world.speed[i]), float(world.amax[i]),
                                  float(world.speed[lead]), lengths[: rank - 1], d_h,
                                  float(world.pos[lead] - world.pos[i]))
        except AlreadyJoined:
            out[k] = 0.0
    return out


# ------------------------------------------------------------------- layers

class Layer:
    params: tuple[str, ...] = ()

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def describe(self) -> dict:
        return {"type": type(self).__name__}


class Conv2D(Layer):
    params = ("W", "b")

    def __init__(self, in_ch: int, out_ch: int, kernel: tuple[int, int], stride: int,
                 rng: np.random.Generator, dtype=np.float32):
        kh, kw = kernel
        fan_in, fan_out = in_ch * kh * kw, out_ch * kh * kw
        r = math.sqrt(6.0 / (fan_in + fan_out))
        self.W = rng.uniform(-r, r, size=(out_ch, in_ch, kh, kw)).astype(dtype)
        self.b = np.zeros(out_ch, dtype=dtype)
        self.stride = stride
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)

    def _windows(self, x):
        kh, kw = self.W.shape[2:]
        s = self.stride
        return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]

    def forward(self, x):
        self._x = x
        win = self._windows(x)                                      # B C Ho Wo kh kw
        out = np.tensordot(win, self.W, axes=([1, 4, 5], [1, 2, 3]))  # B Ho Wo F
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + self.b[None, :, None, None]

    def backward(self, dout):
        x = self._x
        win = self._windows(x)
        self.dW = np.tensordot(dout, win, axes=([0, 2, 3], [0, 2, 3])).astype(self.W.dtype)
        self.db = dout.sum(axis=(0, 2, 3))
        dx = np.zeros_like(x)
        kh, kw = self.W.shape[2:]
        s = self.stride
        ho, wo = dout.shape[2:]
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += np.tensordot(
                    dout, self.W[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
        return dx

    def describe(self):
        return {"type": "Conv2D", "W": list(self.W.shape), "stride": self.stride}


class Dense(Layer):
    params = ("W", "b")

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float32):
        r = math.sqrt(6.0 / (n_in + n_out))
        self.W = rng.uniform(-r, r, size=(n_in, n_out)).astype(dtype)
        self.b = np.zeros(n_out, dtype=dtype)
        self.dW = np.zeros_like(self.W)
        self.db = np.zeros_like(self.b)

    def forward(self, x):
        self._x = x
        return x @ self.W + self.b

    def backward(self, dout):
        self.dW = self._x.T @ dout
        self.db = dout.sum(axis=0)
        return dout @ self.W.T

    def describe(self):
        return {"type": "Dense", "W": list(self.W.shape)}


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0
        return x * self._mask

    def backward(self, dout):
        return dout * self._mask


class Flatten(Layer):
    def forward(self, x):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, dout):
        return dout.reshape(self._shape)


class QNetwork:
    """Feed-forward Q-function; the last layer emits one value per action."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...], kind: str):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.kind = kind

    @property
    def dtype(self):
        return self.layers[0].W.dtype

    @property
    def n_actions(self) -> int:
        return int(self.layers[-1].W.shape[-1])

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout: np.ndarray) -> None:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Q-values for a single state."""
        return self.forward(np.asarray(x)[None])[0]

    def param_refs(self) -> list[tuple[Layer, str]]:
        return [(layer, p) for layer in self.layers for p in layer.params]

    def parameters(self) -> list[np.ndarray]:
        return [getattr(layer, p) for layer, p in self.param_refs()]

    def gradients(self) -> list[np.ndarray]:
        return [getattr(layer, "d" + p) for layer, p in self.param_refs()]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.parameters()])

    def load_flat(self, vec: np.ndarray) -> None:
        off = 0
        for layer, name in self.param_refs():
            p = getattr(layer, name)
            setattr(layer, name, np.asarray(vec[off:off + p.size], dtype=p.dtype).reshape(p.shape).copy())
            off += p.size
        if off != len(vec):
            raise ArchitectureMismatch(f"parameter vector has {len(vec)} entries, network needs {off}")

    def copy_from(self, other: "QNetwork") -> None:
        for (la, name), src in zip(self.param_refs(), other.parameters()):
            setattr(la, name, src.copy())

    def clone(self) -> "QNetwork":
        import copy
        twin = copy.deepcopy(self)
        for layer in twin.layers:
            for attr in ("_x", "_mask", "_shape"):
                layer.__dict__.pop(attr, None)
        return twin

    def architecture(self) -> dict:
        return {"kind": self.kind, "input": list(self.input_shape),
                "layers": [l.describe() for l in self.layers]}


def conv_qnetwork(n_lanes: int = 12, n_cells: int = 80, n_actions: int = 33,
                  rng: np.random.Generator | None = None, dtype=np.float32) -> QNetwork:
    rng = rng or np.random.default_rng(0)
    h1, w1 = (n_lanes - 4) // 2 + 1, (n_cells - 4) // 2 + 1
    h2, w2 = h1 - 1, w1 - 1
    if min(h1, w1, h2, w2) < 1:
        raise ArchitectureMismatch(f"grid {n_lanes}x{n_cells} too small for the conv stack")
    layers: list[Layer] = [
        Conv2D(N_CHANNELS, 16, (4, 4), 2, rng, dtype), ReLU(),
        Conv2D(16, 32, (2, 2), 1, rng, dtype), ReLU(),
        Flatten(),
        Dense(32 * h2 * w2, 128, rng, dtype), ReLU(),
        Dense(128, n_actions, rng, dtype),
    ]
    return QNetwork(layers, (N_CHANNELS, n_lanes, n_cells), "conv")


def mlp_qnetwork(n_in: int, hidden: Sequence[int], n_actions: int,
                 rng: np.random.Generator | None = None, dtype=np.float64) -> QNetwork:
    rng = rng or np.random.default_rng(0)
    layers: list[Layer] = []
    prev = n_in
    for h in hidden:
        layers += [Dense(prev, h, rng, dtype), ReLU()]
        prev = h
    layers.append(Dense(prev, n_actions, rng, dtype))
    return QNetwork(layers, (n_in,), "mlp")


def network_for(config: ExperimentConfig, rng: np.random.Generator | None = None) -> QNetwork:
    return conv_qnetwork(12, config.dqn.grid_cells, config.dqn.n_max, rng)


# ------------------------------------------------------------------- replay

@dataclass(frozen=True)
class Experience:
    state: np.ndarray
    action: int              # platoon size, 1-based
    reward: float
    next_state: np.ndarray
    next_feasible: int
    terminal: bool


class ReplayMemory:
    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._buf: list[Experience] = []
        self._next = 0

    def __len__(self) -> int:
        return len(self._buf)

    def __getitem__(self, i: int) -> Experience:
        return self._buf[i]

    def store(self, e: Experience) -> None:
        if len(self._buf) < self.capacity:
            self._buf.append(e)
        else:
            self._buf[self._next] = e
        self._next = (self._next + 1) % self.capacity

    def oldest(self) -> Experience:
        return self._buf[self._next % len(self._buf)] if len(self._buf) == self.capacity else self._buf[0]

    def sample_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if len(self._buf) < batch_size:
            raise WarmingUp(f"replay holds {len(self._buf)} < batch size {batch_size}")
        return rng.integers(0, len(self._buf), size=batch_size)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Experience]:
        return [self._buf[i] for i in self.sample_indices(batch_size, rng)]


# --------------------------------------------------------- action and targets

def select_action(q: Callable[[np.ndarray], np.ndarray], state: np.ndarray, feasible: int,
                  epsilon: float, rng: np.random.Generator) -> tuple[int, bool]:
    """ε-greedy over sizes 1..feasible; returns (size, explored)."""
    if feasible < 1:
        raise ValueError("empty feasible action set")
    if rng.random() < epsilon:
        return int(rng.integers(1, feasible + 1)), True
    values = np.asarray(q(state))[:feasible]
    return int(np.argmax(values)) + 1, False


def masked_max(values: np.ndarray, feasible: np.ndarray) -> np.ndarray:
    cols = np.arange(values.shape[1])[None, :]
    masked = np.where(cols < np.asarray(feasible)[:, None], values, -np.inf)
    best = masked.max(axis=1)
    return np.where(np.isfinite(best), best, 0.0)


def td_targets(rewards: np.ndarray, next_q: np.ndarray, next_feasible: np.ndarray,
               terminal: np.ndarray, gamma: float) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    boot = masked_max(np.asarray(next_q, dtype=np.float64), next_feasible)
    return np.where(np.asarray(terminal, dtype=bool), r, r + gamma * boot)


def batch_arrays(batch: Sequence[Experience]):
    states = np.stack([e.state for e in batch])
    actions = np.array([e.action for e in batch], dtype=np.int64)
    rewards = np.array([e.reward for e in batch], dtype=np.float64)
    nexts = np.stack([e.next_state for e in batch])
    feas = np.array([e.next_feasible for e in batch], dtype=np.int64)
    term = np.array([e.terminal for e in batch], dtype=bool)
    return states, actions, rewards, nexts, feas, term


def loss_and_grad(q: QNetwork, states: np.ndarray, actions: np.ndarray, y: np.ndarray) -> float:
    """Mean squared TD error; leaves gradients in the layers."""
    out = q.forward(states)
    rows = np.arange(len(actions))
    pred = out[rows, actions - 1].astype(np.float64)
    err = pred - y
    loss = float(np.mean(err * err))
    dout = np.zeros_like(out)
    dout[rows, actions - 1] = (2.0 * err / len(actions)).astype(out.dtype)
    q.backward(dout)
    return loss


def train_step(q: QNetwork, target: QNetwork, batch: Sequence[Experience], gamma: float,
               lr: float) -> float:
    states, actions, rewards, nexts, feas, term = batch_arrays(batch)
    with np.errstate(all="ignore"):          # non-finite values are reported below
        y = td_targets(rewards, target.forward(nexts), feas, term, gamma)
        loss = loss_and_grad(q, states, actions, y)
    grads = q.gradients()
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
        raise TrainingFault("non-finite loss or gradient",
                            {"loss": loss, "grad_norms": [float(np.linalg.norm(g)) for g in grads]})
    for (layer, name), g in zip(q.param_refs(), grads):
        p = getattr(layer, name)
        p -= (lr * g).astype(p.dtype)
    return loss


def sync_target(q: QNetwork, target: QNetwork, train_steps: int, every: int) -> bool:
    if every < 1:
        raise ValueError("sync interval must be >= 1")
    if train_steps > 0 and train_steps % every == 0:
        target.copy_from(q)
        return True
    return False


class DQNAgent:
    """Replay memory, online/target networks and the learning schedule."""

    def __init__(self, q: QNetwork, hp: DQNConfig, rng: np.random.Generator):
        self.q = q
        self.target = q.clone()
        self.hp = hp
        self.rng = rng
        self.memory = ReplayMemory(hp.replay_memory_size)
        self.decisions = 0
        self.train_steps = 0
        self.explored = 0

    def act(self, state: np.ndarray, feasible: int, epsilon: float | None = None) -> tuple[int, bool]:
        eps = self.hp.epsilon if epsilon is None else epsilon
        a, explored = select_action(self.q, state, feasible, eps, self.rng)
        self.decisions += 1
        self.explored += int(explored)
        return a, explored

    def remember(self, e: Experience) -> None:
        self.memory.store(e)

    def learn(self) -> float | None:
        if self.decisions <= self.hp.observe_step or len(self.memory) < self.hp.batch_size:
            return None
        batch = self.memory.sample(self.hp.batch_size, self.rng)
        loss = train_step(self.q, self.target, batch, self.hp.gamma, self.hp.learning_rate)
        self.train_steps += 1
        sync_target(self.q, self.target, self.train_steps, self.hp.target_sync)
        return loss


# --------------------------------------------------------------- checkpoints

MAGIC = b"APQN"
VERSION = 1


def save_checkpoint(path: str | Path, q: QNetwork, hyperparams: dict | None = None) -> Path:
    path = Path(path)
    header = json.dumps({"architecture": q.architecture(), "hyperparams": hyperparams or {},
                         "n_params": int(sum(p.size for p in q.parameters()))},
                        sort_keys=True).encode()
    blob = q.flat().astype("<f4").tobytes()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(MAGIC + struct.pack("<II", VERSION, len(header)) + header + blob)
    tmp.replace(path)
    return path


def read_checkpoint(path: str | Path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ArchitectureMismatch(f"{path}: not a Q-network checkpoint")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise ArchitectureMismatch(f"{path}: checkpoint version {version}, expected {VERSION}")
    header = json.loads(raw[12:12 + hlen])
    params = np.frombuffer(raw[12 + hlen:], dtype="<f4")
    if len(params) != header["n_params"]:
        raise ArchitectureMismatch(f"{path}: truncated parameter block")
    return header, params


def load_checkpoint(path: str | Path, q: QNetwork) -> dict:
    """Load parameters into ``q`` after checking the architectures agree."""
    header, params = read_checkpoint(path)
    ours, theirs = q.architecture(), header["architecture"]
    if ours != theirs:
        raise ArchitectureMismatch(f"checkpoint architecture {theirs} does not match configured {ours}")
    q.load_flat(params)
    return header
