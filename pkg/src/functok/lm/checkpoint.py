from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .. import __version__, container
from ..errors import DomainError
from .model import TransformerConfig, TransformerModel
from .train import GroupStats, TrainConfig, make_optimizer

MAGIC = b"FTLAB-LM"


@dataclass
class Checkpoint:
    step: int
    config: TransformerConfig
    train_config: TrainConfig
    model: TransformerModel
    optimizer: torch.optim.Optimizer
    pending: GroupStats
    meta: dict = field(default_factory=dict)

    @property
    def data_cursor(self) -> int:
        return self.step


def _to_numpy(t: torch.Tensor) -> np.ndarray:
    return t.detach().cpu().contiguous().numpy()


def save_checkpoint(path: str | Path, model: TransformerModel, optimizer: torch.optim.Optimizer, step: int,
                    train_config: TrainConfig, pending: GroupStats | None = None, meta: dict | None = None) -> Path:
    tensors: dict[str, np.ndarray] = {}
    names = [n for n, _ in model.named_parameters()]
    for n, p in model.named_parameters():
        tensors[f"param/{n}"] = _to_numpy(p)
    state = optimizer.state_dict()
    # state_dict indexes parameters in param_group order
    order = [i for g in state["param_groups"] for i in g["params"]]
    by_index = dict(zip(order, [p for g in optimizer.param_groups for p in g["params"]]))
    name_of = {id(p): n for n, p in model.named_parameters()}
    for idx, st in sorted(state["state"].items()):
        n = name_of[id(by_index[idx])]
        for key in ("exp_avg", "exp_avg_sq", "step"):
            tensors[f"adam/{n}/{key}"] = _to_numpy(torch.as_tensor(st[key]))
    tensors["rng/torch"] = _to_numpy(torch.get_rng_state())
    pending = pending or GroupStats()
    tensors["trace/pending_loss_sum"] = pending.loss_sum.astype("<f8")
    tensors["trace/pending_count"] = pending.count.astype("<i8")
    header = {
        "kind": "lm",
        "package_version": __version__,
        "step": step,
        "data_cursor": step,
        "schedule_position": step,
        "config": model.config.to_dict(),
        "train_config": asdict(train_config),
        "param_names": names,
        "meta": meta or {},
    }
    return container.write(path, MAGIC, header, tensors)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise DomainError(f"checkpoint not found: {path}")
    header, tensors = container.read(path, MAGIC)
    if header.get("kind") != "lm":
        raise DomainError(f"{path} is not an LM checkpoint")
    cfg = TransformerConfig(**header["config"])
    tcfg = TrainConfig(**header["train_config"])
    model = TransformerModel(cfg)
    first = tensors[f"param/{header['param_names'][0]}"]
    model = model.to(torch.float64 if first.dtype == np.float64 else torch.float32)
    with torch.no_grad():
        for n, p in model.named_parameters():
            p.copy_(torch.from_numpy(tensors[f"param/{n}"]))
    optimizer = make_optimizer(model, tcfg)
    state = optimizer.state_dict()
    order = [i for g in state["param_groups"] for i in g["params"]]
    params = [p for g in optimizer.param_groups for p in g["params"]]
    name_of = {id(p): n for n, p in model.named_parameters()}
    new_state = {}
    for idx, p in zip(order, params):
        n = name_of[id(p)]
        if f"adam/{n}/exp_avg" in tensors:
            new_state[idx] = {
                "step": torch.from_numpy(tensors[f"adam/{n}/step"]).reshape(()),
                "exp_avg": torch.from_numpy(tensors[f"adam/{n}/exp_avg"]),
                "exp_avg_sq": torch.from_numpy(tensors[f"adam/{n}/exp_avg_sq"]),
            }
    state["state"] = new_state
    optimizer.load_state_dict(state)
    torch.set_rng_state(torch.from_numpy(tensors["rng/torch"]))
    pending = GroupStats(tensors["trace/pending_loss_sum"].copy(), tensors["trace/pending_count"].copy())
    return Checkpoint(header["step"], cfg, tcfg, model, optimizer, pending, header.get("meta", {}))


def load_model(path: str | Path) -> tuple[TransformerModel, dict]:
    """Model and header metadata only (no optimizer)."""
    ck = load_checkpoint(path)
    ck.model.eval()
    return ck.model, {"step": ck.step, **ck.meta}
