"""MADDPG with discrete phase actions.

Each agent has its own actor (local observation -> 4 logits) and its own
critic over all observations and all one-hot actions. Per-agent networks are
stored as stacked weight tensors and evaluated with batched matrix products,
so N agents cost one kernel call per layer instead of N.

Exploration samples from ``softmax(logits / T)`` with the temperature annealed
per episode. The actor gradient flows through a straight-through
Gumbel-softmax relaxation of the agent's own action.

Checkpoint format (``torch.save`` of a dict, loadable with
``weights_only=True``)::

    format_version, n_agents, obs_dim, config (dict), step, episode,
    actors / critics / target_actors / target_critics (state dicts),
    actor_opt / critic_opt (optimizer state dicts),
    buffer {obs, act, rew, next_obs, done, cursor, size},
    rng {numpy: bit-generator state, torch: generator state}
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

N_ACTIONS = 4
CHECKPOINT_VERSION = 1


class TrainingError(RuntimeError):
    """Non-finite loss during an update; carries batch statistics."""

    def __init__(self, message: str, stats: dict):
        super().__init__(f"{message}: {stats}")
        self.stats = stats


class CheckpointError(OSError):
    pass


class ShapeMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TrainerConfig:
    gamma: float = 0.95
    tau: float = 0.01
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    batch_size: int = 256
    buffer_capacity: int = 100_000
    warmup_steps: int = 1000
    updates_per_step: int = 1
    temp_start: float = 1.0
    temp_end: float = 0.1
    temp_anneal_episodes: int = 100
    relax_temperature: float = 1.0
    actor_hidden: tuple[int, ...] = (64, 64)
    critic_hidden: tuple[int, ...] = (128, 128)
    logit_reg: float = 1e-3
    max_grad_norm: float = 0.5
    reward_scale: float = 1.0
    obs_scale: float = 1.0
    double: bool = False

    def __post_init__(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        for name in ("actor_lr", "critic_lr", "temp_start", "temp_end", "relax_temperature", "reward_scale", "obs_scale"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if self.batch_size < 1 or self.buffer_capacity < self.batch_size:
            raise ValueError("need 1 <= batch_size <= buffer_capacity")

    @classmethod
    def from_dict(cls, data: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown trainer settings: {sorted(unknown)}")
        data = dict(data)
        for key in ("actor_hidden", "critic_hidden"):
            if key in data:
                data[key] = tuple(data[key])
        return cls(**data)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["actor_hidden"] = list(self.actor_hidden)
        out["critic_hidden"] = list(self.critic_hidden)
        return out

    def temperature(self, episode: int) -> float:
        frac = min(max(episode, 0) / max(self.temp_anneal_episodes, 1), 1.0)
        return self.temp_start + frac * (self.temp_end - self.temp_start)


class BatchedMLP(nn.Module):
    """N independent MLPs with identical shapes; input (N, B, in) -> (N, B, out)."""

    def __init__(self, n: int, sizes: Sequence[int], generator: torch.Generator, dtype: torch.dtype):
        super().__init__()
        self.sizes = tuple(sizes)
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / math.sqrt(fan_in)
            w = (torch.rand(n, fan_in, fan_out, generator=generator, dtype=dtype) * 2 - 1) * bound
            b = (torch.rand(n, 1, fan_out, generator=generator, dtype=dtype) * 2 - 1) * bound
            self.weights.append(nn.Parameter(w))
            self.biases.append(nn.Parameter(b))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            x = torch.baddbmm(b, x, w)
            if i < last:
                x = torch.relu(x)
        return x


def soft_update(target: nn.Module, online: nn.Module, tau: float) -> None:
    """target <- tau * online + (1 - tau) * target, parameter by parameter."""
    if not 0.0 < tau <= 1.0:
        raise ValueError(f"tau must lie in (0, 1], got {tau}")
    with torch.no_grad():
        targets = list(target.parameters())
        torch._foreach_mul_(targets, 1.0 - tau)
        torch._foreach_add_(targets, list(online.parameters()), alpha=tau)


class ReplayBuffer:
    """Fixed-capacity FIFO of joint transitions."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, n_agents, obs_dim), dtype=np.float32)
        self.next_obs = np.zeros_like(self.obs)
        self.act = np.zeros((capacity, n_agents), dtype=np.int64)
        self.rew = np.zeros((capacity, n_agents), dtype=np.float32)
        self.done = np.zeros(capacity, dtype=np.float32)
        self.cursor = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, act, rew, next_obs, done: bool) -> None:
        i = self.cursor
        self.obs[i] = obs
        self.act[i] = act
        self.rew[i] = rew
        self.next_obs[i] = next_obs
        self.done[i] = float(done)
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample_indices(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        if batch > self.size:
            raise ValueError(f"buffer holds {self.size} transitions, batch needs {batch}")
        return rng.choice(self.size, size=batch, replace=False)

    def state(self) -> dict:
        return {
            "obs": torch.from_numpy(self.obs.copy()),
            "act": torch.from_numpy(self.act.copy()),
            "rew": torch.from_numpy(self.rew.copy()),
            "next_obs": torch.from_numpy(self.next_obs.copy()),
            "done": torch.from_numpy(self.done.copy()),
            "cursor": self.cursor,
            "size": self.size,
        }

    def load_state(self, state: dict) -> None:
        for name in ("obs", "act", "rew", "next_obs", "done"):
            src = state[name].numpy()
            if src.shape != getattr(self, name).shape:
                raise ShapeMismatchError(f"buffer field {name}: checkpoint {src.shape} vs {getattr(self, name).shape}")
            getattr(self, name)[...] = src
        self.cursor = int(state["cursor"])
        self.size = int(state["size"])


@dataclass(frozen=True)
class Batch:
    obs: torch.Tensor  # (B, N, obs_dim)
    act: torch.Tensor  # (B, N) int64
    rew: torch.Tensor  # (B, N)
    next_obs: torch.Tensor
    done: torch.Tensor  # (B,)


class MADDPG:
    def __init__(self, n_agents: int, obs_dim: int, config: TrainerConfig | None = None, seed: int = 0):
        self.n = n_agents
        self.obs_dim = obs_dim
        self.config = cfg = config or TrainerConfig()
        self.dtype = torch.float64 if cfg.double else torch.float32
        ss = np.random.SeedSequence(seed)
        init_seq, torch_seq, np_seq = ss.spawn(3)
        gen = torch.Generator().manual_seed(int(init_seq.generate_state(1)[0]))
        self.torch_rng = torch.Generator().manual_seed(int(torch_seq.generate_state(1)[0]))
        self.rng = np.random.default_rng(np_seq)

        joint = n_agents * obs_dim + N_ACTIONS * n_agents
        self.actors = BatchedMLP(n_agents, (obs_dim, *cfg.actor_hidden, N_ACTIONS), gen, self.dtype)
        self.critics = BatchedMLP(n_agents, (joint, *cfg.critic_hidden, 1), gen, self.dtype)
        self.target_actors = BatchedMLP(n_agents, self.actors.sizes, gen, self.dtype)
        self.target_critics = BatchedMLP(n_agents, self.critics.sizes, gen, self.dtype)
        soft_update(self.target_actors, self.actors, 1.0)
        soft_update(self.target_critics, self.critics, 1.0)
        self._actor_params = list(self.actors.parameters())
        self._critic_params = list(self.critics.parameters())
        self._tracking = (
            list(self.target_actors.parameters()) + list(self.target_critics.parameters()),
            self._actor_params + self._critic_params,
        )
        self.actor_opt = torch.optim.Adam(self.actors.parameters(), lr=cfg.actor_lr, fused=True)
        self.critic_opt = torch.optim.Adam(self.critics.parameters(), lr=cfg.critic_lr, fused=True)
        self.buffer = ReplayBuffer(cfg.buffer_capacity, n_agents, obs_dim)
        self.step = 0
        self.episode = 0
        self.updates = 0
        # slot mask: eye[i, :, j, :] = 1 when j == i
        self._eye = torch.eye(n_agents, dtype=self.dtype).view(n_agents, 1, n_agents, 1)

    # ------------------------------------------------------------- acting

    def _tensor(self, x) -> torch.Tensor:
        return torch.as_tensor(np.asarray(x), dtype=self.dtype)

    def logits(self, joint_obs: np.ndarray) -> np.ndarray:
        obs = np.asarray(joint_obs)
        if obs.shape != (self.n, self.obs_dim):
            raise ValueError(f"expected joint obs of shape {(self.n, self.obs_dim)}, got {obs.shape}")
        with torch.no_grad():
            out = self.actors(self._tensor(obs).unsqueeze(1) / self.config.obs_scale)
        return out.squeeze(1).numpy()

    def select_actions(
        self, joint_obs: np.ndarray, explore: bool, rng: np.random.Generator | None = None, temperature: float | None = None
    ) -> np.ndarray:
        logits = self.logits(joint_obs)
        return select_from_logits(
            logits,
            explore,
            rng if rng is not None else self.rng,
            temperature if temperature is not None else self.config.temperature(self.episode),
        )

    # ------------------------------------------------------------- learning

    def observe(self, obs, act, rew, next_obs, done: bool) -> None:
        self.buffer.add(obs, act, np.asarray(rew) * self.config.reward_scale, next_obs, done)
        self.step += 1

    def ready(self) -> bool:
        return self.step >= self.config.warmup_steps and len(self.buffer) >= self.config.batch_size

    def sample(self, batch_size: int | None = None) -> Batch:
        idx = self.buffer.sample_indices(batch_size or self.config.batch_size, self.rng)
        b = self.buffer
        s = self.config.obs_scale
        return Batch(
            obs=self._tensor(b.obs[idx]) / s,
            act=torch.as_tensor(b.act[idx]),
            rew=self._tensor(b.rew[idx]),
            next_obs=self._tensor(b.next_obs[idx]) / s,
            done=self._tensor(b.done[idx]),
        )

    def _critic_input(self, obs: torch.Tensor, onehot: torch.Tensor) -> torch.Tensor:
        """obs (B, N, D), onehot (N, B, N, 4) or (B, N, 4) -> (N, B, N*D + 4N)."""
        bsz = obs.shape[0]
        flat_obs = obs.reshape(bsz, -1).expand(self.n, bsz, -1)
        if onehot.dim() == 3:
            flat_act = onehot.reshape(bsz, -1).expand(self.n, bsz, -1)
        else:
            flat_act = onehot.reshape(self.n, bsz, -1)
        return torch.cat([flat_obs, flat_act], dim=-1)

    def critic_loss(self, batch: Batch) -> torch.Tensor:
        """Per-agent squared TD error, shape (N,)."""
        with torch.no_grad():
            next_logits = self.target_actors(batch.next_obs.transpose(0, 1))
            next_act = nn.functional.one_hot(next_logits.argmax(-1), N_ACTIONS).to(self.dtype)
            q_next = self.target_critics(self._critic_input(batch.next_obs, next_act.transpose(0, 1))).squeeze(-1)
            y = batch.rew.T + self.config.gamma * (1.0 - batch.done)[None, :] * q_next
        onehot = nn.functional.one_hot(batch.act, N_ACTIONS).to(self.dtype)
        q = self.critics(self._critic_input(batch.obs, onehot)).squeeze(-1)
        return ((q - y) ** 2).mean(dim=1)

    def gumbel(self, shape) -> torch.Tensor:
        u = torch.rand(shape, generator=self.torch_rng, dtype=self.dtype).clamp_(1e-10, 1.0 - 1e-10)
        return -torch.log(-torch.log(u))

    def actor_loss(
        self, batch: Batch, noise: torch.Tensor | None = None, frozen: tuple[torch.Tensor, torch.Tensor] | None = None
    ) -> torch.Tensor:
        """Per-agent actor loss, shape (N,).

        Each agent's own action is the straight-through relaxation
        ``hard - soft.detach() + soft``; other agents' actions come from the
        batch. ``frozen=(hard, soft0)`` replaces the data-dependent hard part
        with constants, which makes the loss smooth for gradient checks.
        """
        logits = self.actors(batch.obs.transpose(0, 1))  # (N, B, 4)
        if noise is None:
            noise = self.gumbel(logits.shape)
        soft = torch.softmax((logits + noise) / self.config.relax_temperature, dim=-1)
        if frozen is None:
            hard = nn.functional.one_hot(soft.argmax(-1), N_ACTIONS).to(self.dtype)
            relaxed = hard - soft.detach() + soft
        else:
            hard, soft0 = frozen
            relaxed = hard - soft0 + soft
        buf = nn.functional.one_hot(batch.act, N_ACTIONS).to(self.dtype)  # (B, N, 4)
        joint = buf.unsqueeze(0) * (1.0 - self._eye) + relaxed.unsqueeze(2) * self._eye  # (N, B, N, 4)
        q = self.critics(self._critic_input(batch.obs, joint)).squeeze(-1)
        return -q.mean(dim=1) + self.config.logit_reg * (logits**2).mean(dim=(1, 2))

    def _clip_per_agent(self, params) -> None:
        grads = [p.grad for p in params if p.grad is not None]
        sq = sum(torch.linalg.vector_norm(g.reshape(self.n, -1), dim=1) ** 2 for g in grads)
        scale = (self.config.max_grad_norm / (sq.sqrt() + 1e-6)).clamp(max=1.0)
        torch._foreach_mul_(grads, [scale.view(-1, *([1] * (g.dim() - 1))) for g in grads])

    def update(self, batch: Batch | None = None) -> tuple[np.ndarray, np.ndarray]:
        """One critic and one actor step for every agent, then target tracking."""
        if batch is None:
            if len(self.buffer) < self.config.batch_size:
                raise ValueError(f"buffer holds {len(self.buffer)} transitions, batch needs {self.config.batch_size}")
            batch = self.sample()
        c_loss = self.critic_loss(batch)
        self._check(c_loss, "critic", batch)
        self.critic_opt.zero_grad(set_to_none=True)
        c_loss.sum().backward()
        self._clip_per_agent(self._critic_params)
        self.critic_opt.step()

        a_loss = self.actor_loss(batch)
        self._check(a_loss, "actor", batch)
        self.actor_opt.zero_grad(set_to_none=True)
        # critic weights are constants for the actor step
        a_loss.sum().backward(inputs=self._actor_params)
        self._clip_per_agent(self._actor_params)
        self.actor_opt.step()

        tau = self.config.tau
        with torch.no_grad():
            torch._foreach_mul_(self._tracking[0], 1.0 - tau)
            torch._foreach_add_(self._tracking[0], self._tracking[1], alpha=tau)
        self.updates += 1
        return c_loss.detach().numpy().copy(), a_loss.detach().numpy().copy()

    def _check(self, loss: torch.Tensor, which: str, batch: Batch) -> None:
        if torch.isfinite(loss).all():
            return
        stats = {
            "loss": loss.detach().tolist(),
            "reward_min": float(batch.rew.min()),
            "reward_max": float(batch.rew.max()),
            "obs_abs_max": float(batch.obs.abs().max()),
            "done_frac": float(batch.done.mean()),
        }
        raise TrainingError(f"non-finite {which} loss", stats)

    def maybe_update(self) -> tuple[np.ndarray, np.ndarray] | None:
        if not self.ready():
            return None
        out = None
        for _ in range(self.config.updates_per_step):
            out = self.update()
        return out

    def end_episode(self) -> None:
        self.episode += 1

    # ------------------------------------------------------------- checkpoint

    def save_checkpoint(self, path: str | Path) -> None:
        path = Path(path)
        state = {
            "format_version": CHECKPOINT_VERSION,
            "n_agents": self.n,
            "obs_dim": self.obs_dim,
            "config": self.config.to_dict(),
            "step": self.step,
            "episode": self.episode,
            "updates": self.updates,
            "actors": self.actors.state_dict(),
            "critics": self.critics.state_dict(),
            "target_actors": self.target_actors.state_dict(),
            "target_critics": self.target_critics.state_dict(),
            "actor_opt": self.actor_opt.state_dict(),
            "critic_opt": self.critic_opt.state_dict(),
            "buffer": self.buffer.state(),
            "rng": {"numpy": _np_state_to_tensors(self.rng), "torch": self.torch_rng.get_state()},
        }
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            torch.save(state, path)
        except OSError as exc:
            raise CheckpointError(f"cannot write checkpoint {path}: {exc}") from exc

    def load_checkpoint(self, path: str | Path) -> None:
        path = Path(path)
        try:
            state = torch.load(path, weights_only=True)
        except FileNotFoundError as exc:
            raise CheckpointError(f"checkpoint not found: {path}") from exc
        except Exception as exc:
            raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
        if not isinstance(state, dict) or state.get("format_version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint format")
        if state["n_agents"] != self.n or state["obs_dim"] != self.obs_dim:
            raise ShapeMismatchError(
                f"{path}: checkpoint has n_agents={state['n_agents']}, obs_dim={state['obs_dim']}; "
                f"trainer has n_agents={self.n}, obs_dim={self.obs_dim}"
            )
        for name in ("actors", "critics", "target_actors", "target_critics"):
            module = getattr(self, name)
            for key, tensor in state[name].items():
                own = module.state_dict()[key]
                if own.shape != tensor.shape:
                    raise ShapeMismatchError(f"{path}: {name}.{key} has shape {tuple(tensor.shape)}, expected {tuple(own.shape)}")
            module.load_state_dict(state[name])
        self.actor_opt.load_state_dict(state["actor_opt"])
        self.critic_opt.load_state_dict(state["critic_opt"])
        self.buffer.load_state(state["buffer"])
        self.rng.bit_generator.state = _np_state_from_tensors(state["rng"]["numpy"])
        self.torch_rng.set_state(state["rng"]["torch"])
        self.step = int(state["step"])
        self.episode = int(state["episode"])
        self.updates = int(state["updates"])


def select_from_logits(logits: np.ndarray, explore: bool, rng: np.random.Generator, temperature: float = 1.0) -> np.ndarray:
    """Argmax per row, or a sample from softmax(logits / temperature) via Gumbel-max."""
    logits = np.asarray(logits, dtype=float)
    if logits.ndim != 2 or logits.shape[1] != N_ACTIONS:
        raise ValueError(f"logits must have shape (n_agents, {N_ACTIONS}), got {logits.shape}")
    if not explore:
        return logits.argmax(axis=1)
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    return (logits / temperature + rng.gumbel(size=logits.shape)).argmax(axis=1)


def _np_state_to_tensors(rng: np.random.Generator) -> dict:
    # PCG64 state words are 128-bit; store as decimal strings for the safe loader.
    st = rng.bit_generator.state
    return {
        "bit_generator": st["bit_generator"],
        "state": str(st["state"]["state"]),
        "inc": str(st["state"]["inc"]),
        "has_uint32": int(st["has_uint32"]),
        "uinteger": int(st["uinteger"]),
    }


def _np_state_from_tensors(data: dict) -> dict:
    return {
        "bit_generator": data["bit_generator"],
        "state": {"state": int(data["state"]), "inc": int(data["inc"])},
        "has_uint32": data["has_uint32"],
        "uinteger": data["uinteger"],
    }
