"""Rectified flow: forward process, training loop, Euler sampling, checkpoints.

Training draws one Gaussian noise series ``x_0`` and one flow time
``t ~ U(0, 1)`` per batch element, interpolates towards the clean
scenario ``x_1`` along a straight line and regresses the network onto
the constant velocity ``x_1 - x_0``. The two objective gradients are
combined with MGDA (or a static weighted sum) before the optimizer
step. Sampling integrates the learned field from noise at ``t = 0`` to
data at ``t = 1`` with left-endpoint Euler steps.

Checkpoint format (``torch.save`` of a plain dict, loaded with
``weights_only=True``)::

    format_version  1
    length          series length L
    net_config      NetConfig.to_dict()
    dtype           parameter dtype name, e.g. "float32"
    parameters      state_dict of the network (ordered name -> tensor)
    seed, step      training seed and steps taken so far
    rng_state       torch.Generator state (uint8 tensor) or None
    optimizer       "sgd" | "adamw"
    optimizer_state optimizer.state_dict() or None
    encoder         {"kind", "dim", ...} describing the text encoder
"""

import math
import pickle
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import torch
from torch import nn
from typing_extensions import Self

from .agents import default_vocabulary
from .common import (
    ConfigError,
    DomainError,
    FormatError,
    SamplingError,
    ShapeError,
    TrainingError,
    derive_seed,
    logger,
    read_jsonl,
    write_jsonl,
)
from .denoiser import NetConfig, VelocityNet, build_velocity_net
from .objective import (
    LossReport,
    flatten_gradients,
    freq_loss,
    time_loss,
    update_direction,
    write_loss_csv,
)
from .scenarios import Scenario, load_dataset
from .text_encoding import (
    EmbeddingSource,
    ImportedEncoder,
    ReferenceEncoder,
    TextEmbedding,
    Vocabulary,
    collate_embeddings,
)

__all__ = [
    "CHECKPOINT_FORMAT_VERSION",
    "FlowState",
    "VelocityTarget",
    "TrainConfig",
    "Trainer",
    "Checkpoint",
    "interpolate",
    "target_velocity",
    "train",
    "sample_many",
    "sample",
    "save_checkpoint",
    "load_checkpoint",
    "encoder_from_description",
    "run_train",
    "run_sample",
]


CHECKPOINT_FORMAT_VERSION = 1
OPTIMIZERS = ("sgd", "adamw")
LR_SCHEDULES = ("constant", "one_cycle")


# --- Forward process -------------------------------------------------------------


@dataclass
class FlowState:
    x_t: np.ndarray | torch.Tensor
    t: float | np.ndarray | torch.Tensor
    x_0: np.ndarray | torch.Tensor
    x_1: np.ndarray | torch.Tensor


@dataclass
class VelocityTarget:
    v_t: np.ndarray | torch.Tensor


def _as_pair(x_0, x_1, what: str):
    if isinstance(x_0, torch.Tensor) or isinstance(x_1, torch.Tensor):
        x_0, x_1 = torch.as_tensor(x_0), torch.as_tensor(x_1)
    else:
        x_0, x_1 = np.asarray(x_0, dtype=np.float64), np.asarray(x_1, dtype=np.float64)
    if tuple(x_0.shape) != tuple(x_1.shape):
        raise ShapeError(f"{what}: shapes differ ({tuple(x_0.shape)} vs {tuple(x_1.shape)})")
    return x_0, x_1


def interpolate(x_0, x_1, t) -> FlowState:
    """``x_t = t * x_1 + (1 - t) * x_0``.

    ``t`` is a scalar, or one value per row when ``x_0`` is ``[B, L]``.
    Works on numpy arrays and on torch tensors (autograd passes through).
    """
    x_0, x_1 = _as_pair(x_0, x_1, "interpolate")
    is_torch = isinstance(x_0, torch.Tensor)
    if is_torch:
        t_arr = torch.as_tensor(t, dtype=x_0.dtype)
        lo, hi = float(t_arr.min()), float(t_arr.max())
    else:
        t_arr = np.asarray(t, dtype=np.float64)
        lo, hi = float(t_arr.min()), float(t_arr.max())
    if not (0.0 <= lo and hi <= 1.0):
        raise DomainError(f"t must lie in [0, 1], got range [{lo}, {hi}]")
    if t_arr.ndim == 1 and x_0.ndim == 2:
        if t_arr.shape[0] != x_0.shape[0]:
            raise ShapeError(f"expected one t per row ({x_0.shape[0]}), got {t_arr.shape[0]}")
        t_arr = t_arr[:, None]
    elif t_arr.ndim != 0:
        raise ShapeError(f"t must be a scalar or have one value per row, got shape {tuple(t_arr.shape)}")
    x_t = t_arr * x_1 + (1 - t_arr) * x_0
    return FlowState(x_t=x_t, t=t, x_0=x_0, x_1=x_1)


def target_velocity(x_0, x_1) -> VelocityTarget:
    x_0, x_1 = _as_pair(x_0, x_1, "target_velocity")
    return VelocityTarget(v_t=x_1 - x_0)


# --- Training ----------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 64
    learning_rate: float = 1e-2
    seed: int = 0
    mgda_enabled: bool = True
    static_lambda: float = 0.0  # only used when mgda_enabled is False
    ode_steps: int = 50
    optimizer: str = "sgd"  # sgd | adamw
    weight_decay: float = 0.01  # adamw only
    lr_schedule: str = "constant"  # constant | one_cycle
    max_steps: int | None = None  # stop early after this many steps in one run
    log_every: int = 50

    def validate(self) -> None:
        if self.epochs < 1 or self.batch_size < 1 or self.ode_steps < 1:
            raise ConfigError("epochs, batch_size and ode_steps must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        if self.static_lambda < 0:
            raise ConfigError(f"static_lambda must be nonnegative, got {self.static_lambda}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.log_every < 1:
            raise ConfigError(f"log_every must be >= 1, got {self.log_every}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> Self:
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(f"invalid train config: {e}") from e


def _net_dtype(net: nn.Module, default: torch.dtype = torch.float64) -> torch.dtype:
    for p in net.parameters():
        return p.dtype
    return default


class Trainer:
    """Stateful training loop; ``step`` keeps counting across resumed runs."""

    def __init__(
        self,
        net: VelocityNet,
        cfg: TrainConfig,
        *,
        step: int = 0,
        rng_state: torch.Tensor | None = None,
        optimizer_state: dict | None = None,
    ):
        cfg.validate()
        self.net = net
        self.cfg = cfg
        self.step = step
        self.generator = torch.Generator().manual_seed(cfg.seed)
        if rng_state is not None:
            self.generator.set_state(rng_state)
        self.params = [p for p in net.parameters() if p.requires_grad]
        if cfg.optimizer == "adamw":
            self.optimizer = torch.optim.AdamW(
                self.params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay
            )
        else:
            self.optimizer = torch.optim.SGD(self.params, lr=cfg.learning_rate, momentum=0.0)
        if optimizer_state is not None:
            self.optimizer.load_state_dict(optimizer_state)
        self.scheduler = None
        # Last update, kept for inspection.
        self.last_direction: torch.Tensor | None = None
        self.last_gradients: tuple[torch.Tensor, torch.Tensor] | None = None

    def fit(self, dataset: Sequence[tuple[Scenario, TextEmbedding]]) -> list[LossReport]:
        if not dataset:
            raise ValueError("training dataset is empty")
        net_cfg = self.net.cfg
        dtype = _net_dtype(self.net)
        x_1 = torch.as_tensor(np.stack([s.series for s, _ in dataset]), dtype=dtype)
        if x_1.shape[1] != net_cfg.length:
            raise ShapeError(
                f"scenario length {x_1.shape[1]} does not match the network length {net_cfg.length}"
            )
        text, mask = collate_embeddings([e for _, e in dataset], dtype=dtype)
        if text.shape[-1] != net_cfg.d_llm:
            raise ShapeError(
                f"embedding width {text.shape[-1]} does not match the network d_llm {net_cfg.d_llm}"
            )

        n = x_1.shape[0]
        per_epoch = math.ceil(n / self.cfg.batch_size)
        total = self.cfg.epochs * per_epoch
        if self.cfg.max_steps is not None:
            total = min(total, self.cfg.max_steps)
        if self.cfg.lr_schedule == "one_cycle" and total > 1:
            self.scheduler = torch.optim.lr_scheduler.OneCycleLR(
                self.optimizer, max_lr=self.cfg.learning_rate, total_steps=total
            )
        logger.info(
            f"Training {sum(p.numel() for p in self.params):,} parameters on {n:,} "
            f"scenarios for {total:,} steps (from step {self.step:,})"
        )

        self.net.train()
        reports: list[LossReport] = []
        while len(reports) < total:
            order = torch.randperm(n, generator=self.generator)
            for start in range(0, n, self.cfg.batch_size):
                idx = order[start : start + self.cfg.batch_size]
                reports.append(self._step(x_1[idx], text[idx], mask[idx]))
                if len(reports) >= total:
                    break
        return reports

    def _step(self, x_1: torch.Tensor, text: torch.Tensor, mask: torch.Tensor) -> LossReport:
        step = self.step
        batch, length = x_1.shape
        x_0 = torch.randn(batch, length, generator=self.generator, dtype=x_1.dtype)
        t = torch.rand(batch, generator=self.generator, dtype=x_1.dtype)
        state = interpolate(x_0, x_1, t)
        v_t = target_velocity(x_0, x_1).v_t

        v_pred = self.net(state.x_t, t, text, mask)
        l_time = time_loss(v_pred, v_t)
        l_freq = freq_loss(v_pred, v_t)
        if not (torch.isfinite(l_time) and torch.isfinite(l_freq)):
            raise TrainingError(step, f"non-finite loss (l_time={l_time.item()}, l_freq={l_freq.item()})")

        g_time = flatten_gradients(
            torch.autograd.grad(l_time, self.params, retain_graph=True, allow_unused=True),
            self.params,
        )
        g_freq = flatten_gradients(
            torch.autograd.grad(l_freq, self.params, allow_unused=True), self.params
        )
        if not (torch.isfinite(g_time).all() and torch.isfinite(g_freq).all()):
            raise TrainingError(step, "non-finite gradient")

        direction, alpha = update_direction(
            g_time, g_freq,
            mgda_enabled=self.cfg.mgda_enabled,
            static_lambda=self.cfg.static_lambda,
        )
        offset = 0
        for p in self.params:
            size = p.numel()
            p.grad = direction[offset : offset + size].view_as(p).clone()
            offset += size
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        if self.scheduler is not None:
            self.scheduler.step()

        self.last_direction = direction
        self.last_gradients = (g_time, g_freq)
        report = LossReport(
            step=step,
            l_time=l_time.item(),
            l_freq=l_freq.item(),
            alpha=alpha,
            g_time_norm=torch.linalg.vector_norm(g_time).item(),
            g_freq_norm=torch.linalg.vector_norm(g_freq).item(),
        )
        self.step += 1
        if self.step % self.cfg.log_every == 0:
            shown = "off" if alpha is None else f"{alpha:.3f}"
            logger.info(
                f"step {step:,}: l_time={report.l_time:.5f} l_freq={report.l_freq:.5f} alpha={shown}"
            )
        return report

    def rng_state(self) -> torch.Tensor:
        return self.generator.get_state()


def train(
    dataset: Sequence[tuple[Scenario, TextEmbedding]], net: VelocityNet, cfg: TrainConfig
) -> tuple[VelocityNet, list[LossReport]]:
    """Train ``net`` in place; fully deterministic given ``cfg.seed``."""
    reports = Trainer(net, cfg).fit(dataset)
    return net, reports


# --- Sampling ----------------------------------------------------------------------


def sample_many(
    net: nn.Module,
    embedding: TextEmbedding,
    n: int,
    steps: int,
    seed: int,
    *,
    length: int | None = None,
    dtype: torch.dtype | None = None,
) -> np.ndarray:
    """Draw ``n`` scenarios for one prompt by Euler integration from ``t = 0`` to ``1``.

    Returns an ``[n, L]`` float64 array. The noise comes from a
    generator seeded with ``seed`` alone, so concurrent calls never share
    RNG state.
    """
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if length is None:
        cfg = getattr(net, "cfg", None)
        if cfg is None:
            raise ValueError("length is required for a network without a NetConfig")
        length = cfg.length
    dtype = dtype or _net_dtype(net)

    generator = torch.Generator().manual_seed(seed)
    x = torch.randn(n, length, generator=generator, dtype=dtype)
    text = torch.as_tensor(embedding.matrix, dtype=dtype)
    mask = torch.as_tensor(embedding.row_mask)
    dt = 1.0 / steps
    with torch.no_grad():
        for k in range(steps):
            t = torch.full((n,), k / steps, dtype=dtype)
            x = x + dt * net(x, t, text, mask)
            if not bool(torch.isfinite(x).all()):
                raise SamplingError(k, "state became non-finite")
    return x.to(torch.float64).numpy()


def sample(net: nn.Module, embedding: TextEmbedding, steps: int, seed: int, **kwargs) -> np.ndarray:
    """One scenario; identical to the first row of ``sample_many`` with the same seed."""
    return sample_many(net, embedding, 1, steps, seed, **kwargs)[0]


# --- Checkpoints -------------------------------------------------------------------


@dataclass
class Checkpoint:
    length: int
    net_config: NetConfig
    dtype: str
    parameters: dict[str, torch.Tensor]
    seed: int
    step: int
    rng_state: torch.Tensor | None
    optimizer: str
    optimizer_state: dict | None
    encoder: dict | None

    def build_net(self) -> VelocityNet:
        net = VelocityNet(self.net_config).to(getattr(torch, self.dtype))
        try:
            net.load_state_dict(self.parameters)
        except RuntimeError as e:
            raise ConfigError(f"checkpoint parameters do not fit its network config: {e}") from e
        return net


def save_checkpoint(
    path: Path,
    net: VelocityNet,
    *,
    seed: int,
    step: int,
    rng_state: torch.Tensor | None = None,
    optimizer: str = "sgd",
    optimizer_state: dict | None = None,
    encoder: dict | None = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "length": net.cfg.length,
        "net_config": net.cfg.to_dict(),
        "dtype": str(_net_dtype(net)).removeprefix("torch."),
        "parameters": {k: v.detach().clone() for k, v in net.state_dict().items()},
        "seed": seed,
        "step": step,
        "rng_state": rng_state,
        "optimizer": optimizer,
        "optimizer_state": optimizer_state,
        "encoder": encoder,
    }
    torch.save(payload, path)


def load_checkpoint(path: Path) -> Checkpoint:
    try:
        data = torch.load(path, map_location="cpu", weights_only=True)
    except (pickle.UnpicklingError, RuntimeError, EOFError, ValueError) as e:
        raise FormatError(f"{path}: not a readable checkpoint ({e})") from e
    if not isinstance(data, dict):
        raise FormatError(f"{path}: checkpoint is not a dict")
    version = data.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ConfigError(
            f"{path}: unsupported checkpoint format_version {version!r} "
            f"(expected {CHECKPOINT_FORMAT_VERSION})"
        )
    try:
        net_config = NetConfig.from_dict(data["net_config"])
        ckpt = Checkpoint(
            length=int(data["length"]),
            net_config=net_config,
            dtype=str(data["dtype"]),
            parameters=data["parameters"],
            seed=int(data["seed"]),
            step=int(data["step"]),
            rng_state=data.get("rng_state"),
            optimizer=str(data.get("optimizer", "sgd")),
            optimizer_state=data.get("optimizer_state"),
            encoder=data.get("encoder"),
        )
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: checkpoint is missing a field ({e})") from e
    if ckpt.length != net_config.length:
        raise ConfigError(
            f"{path}: length {ckpt.length} disagrees with the network config ({net_config.length})"
        )
    if ckpt.dtype not in ("float32", "float64"):
        raise FormatError(f"{path}: unsupported parameter dtype {ckpt.dtype!r}")
    return ckpt


def encoder_from_description(description: dict | None) -> ReferenceEncoder | None:
    """Rebuild the reference encoder a checkpoint was trained with (None if imported)."""
    if not description or description.get("kind") != "reference":
        return None
    return ReferenceEncoder(
        Vocabulary(tuple(description["vocabulary"])),
        dim=int(description["dim"]),
        seed=int(description["seed"]),
    )


# --- Commands ----------------------------------------------------------------------


def run_train(
    dataset_path: Path,
    output_dir: Path,
    *,
    net_cfg: NetConfig,
    train_cfg: TrainConfig,
    embeddings_path: Path | None = None,
    resume: Path | None = None,
) -> int:
    """Train on an annotated dataset and write ``checkpoint.pt`` and ``losses.csv``."""
    if not dataset_path.is_file():
        logger.error(f"Dataset not found: {dataset_path}")
        return 1
    for label, path in (("Embeddings file", embeddings_path), ("Checkpoint", resume)):
        if path is not None and not path.is_file():
            logger.error(f"{label} not found: {path}")
            return 1
    scenarios = load_dataset(dataset_path)
    if not scenarios:
        logger.error(f"Dataset is empty: {dataset_path}")
        return 1

    step, rng_state, optimizer_state = 0, None, None
    if resume is not None:
        ckpt = load_checkpoint(resume)
        net = ckpt.build_net()
        if ckpt.net_config != net_cfg:
            logger.warning("Resuming: using the network config stored in the checkpoint")
        step, rng_state = ckpt.step, ckpt.rng_state
        if ckpt.optimizer == train_cfg.optimizer:
            optimizer_state = ckpt.optimizer_state
        else:
            logger.warning(f"Optimizer changed from {ckpt.optimizer} to {train_cfg.optimizer}; "
                           "starting it fresh")
        net_cfg = ckpt.net_config
    length = scenarios[0].length

    encoder: EmbeddingSource
    if embeddings_path is not None:
        encoder = ImportedEncoder.from_file(embeddings_path)
    else:
        encoder = ReferenceEncoder(default_vocabulary(), dim=net_cfg.d_llm, seed=train_cfg.seed)

    if resume is None:
        if net_cfg.length != length or net_cfg.d_llm != encoder.dim:
            logger.info(f"Network sized to the data: length {length}, d_llm {encoder.dim}")
            net_cfg = replace(net_cfg, length=length, d_llm=encoder.dim)
        net_cfg.validate()
        net = build_velocity_net(net_cfg, seed=train_cfg.seed)
    elif net_cfg.length != length or net_cfg.d_llm != encoder.dim:
        raise ConfigError(
            f"checkpoint expects length {net_cfg.length} and d_llm {net_cfg.d_llm}, "
            f"data has length {length} and embeddings of width {encoder.dim}"
        )

    pairs = [(s, encoder.embedding_for(s.id, s.prompt)) for s in scenarios]
    trainer = Trainer(net, train_cfg, step=step, rng_state=rng_state,
                      optimizer_state=optimizer_state)
    reports = trainer.fit(pairs)

    checkpoint_path = output_dir / "checkpoint.pt"
    losses_path = output_dir / "losses.csv"
    save_checkpoint(
        checkpoint_path, net,
        seed=train_cfg.seed,
        step=trainer.step,
        rng_state=trainer.rng_state(),
        optimizer=train_cfg.optimizer,
        optimizer_state=trainer.optimizer.state_dict(),
        encoder=encoder.describe(),
    )
    write_loss_csv(reports, losses_path)
    if reports:
        logger.info(f"l_time {reports[0].l_time:.5f} -> {reports[-1].l_time:.5f} "
                    f"over {len(reports):,} steps")
    logger.info(f"Wrote checkpoint to: {checkpoint_path}")
    logger.info(f"Wrote loss log to: {losses_path}")
    return 0


def _read_prompts(path: Path) -> list[dict]:
    prompts = []
    for line_no, record in read_jsonl(path):
        rid = record.get("id")
        if not isinstance(rid, str) or not rid:
            raise FormatError(f"{path}:{line_no}: prompt record has no id")
        prompts.append(record)
    return prompts


def run_sample(
    checkpoint_path: Path,
    prompts_path: Path,
    output_dir: Path,
    *,
    steps: int = 50,
    per_prompt: int = 1,
    seed: int = 0,
    workers: int = 1,
    embeddings_path: Path | None = None,
) -> int:
    """Generate ``per_prompt`` scenarios for every prompt into ``generated.jsonl``."""
    for label, path in (("Checkpoint", checkpoint_path), ("Prompts file", prompts_path),
                        ("Embeddings file", embeddings_path)):
        if path is not None and not path.is_file():
            logger.error(f"{label} not found: {path}")
            return 1
    if per_prompt < 1 or workers < 1:
        raise ConfigError("per_prompt and workers must be >= 1")

    ckpt = load_checkpoint(checkpoint_path)
    net = ckpt.build_net()
    net.eval()

    encoder: EmbeddingSource | None
    if embeddings_path is not None:
        encoder = ImportedEncoder.from_file(embeddings_path)
    else:
        encoder = encoder_from_description(ckpt.encoder)
        if encoder is None:
            raise ConfigError("checkpoint was trained on imported embeddings; pass --embeddings")
    if encoder.dim != ckpt.net_config.d_llm:
        raise ConfigError(
            f"embedding width {encoder.dim} does not match the network d_llm {ckpt.net_config.d_llm}"
        )

    prompts = _read_prompts(prompts_path)
    embeddings = [encoder.embedding_for(p["id"], p.get("prompt")) for p in prompts]

    def generate(i: int) -> np.ndarray:
        return sample_many(net, embeddings[i], per_prompt, steps, derive_seed(seed, i))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            batches = list(pool.map(generate, range(len(prompts))))
    else:
        batches = [generate(i) for i in range(len(prompts))]

    records = []
    clipped = 0
    for prompt, batch in zip(prompts, batches, strict=True):
        clipped += int(np.count_nonzero((batch < 0.0) | (batch > 1.0)))
        meta = prompt.get("metadata")
        kind = prompt.get("kind") or ("load" if meta and meta.get("user_type") else "pv")
        for k, series in enumerate(np.clip(batch, 0.0, 1.0)):
            records.append({
                "id": f"{prompt['id']}-g{k:03d}",
                "prompt_id": prompt["id"],
                "kind": kind,
                "series": series.tolist(),
                "metadata": meta,
                "prompt": prompt.get("prompt"),
                "steps": steps,
            })
    if clipped:
        logger.info(f"Clipped {clipped:,} generated values into [0, 1]")

    generated_path = output_dir / "generated.jsonl"
    write_jsonl(generated_path, records)
    logger.info(f"Wrote {len(records):,} generated scenarios ({steps} Euler steps) to: "
                f"{generated_path}")
    return 0
