"""
Coarse-to-fine flow-matching training of the inpainting DiT.

Each iteration draws a batch of (video, mask) pairs at the current stage's
resolution, builds x1 = encode(video), y = encode(apply_mask(video, mask)) and
m = downsample_mask(mask), samples logit-normal t and Gaussian x0, and takes one
AdamW step on the velocity loss. Later stages continue from the parameters and
optimizer moments of the earlier ones.

Randomness is indexed by iteration: iteration i uses RngStream(seed).child(i),
sample b of the batch uses child(i).child(b), and the timesteps and noise use
child(i).child(batch_size). Resuming at step i therefore replays exactly what an
uninterrupted run would have drawn.
"""
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterator, Optional, Union
import json
import logging
import time

import pandas as pd
import torch
import torch.nn.functional as F

from codec import downsample_mask, encode, latent_shape
from FileRoller import FileRoller
from flowmatch import SchedulerConfig, fm_loss, interpolate, sample_timestep, velocity_target
from mediaio import MaskKind, MaskSpec, apply_mask, gen_masks, gen_synthetic_video, read_frames
from models import Checkpoint, DiTPainter, build_model, preset
from numerics import RngStream, check_finite, sample_gaussian
from utils import RollingMean, ValidationError, parse_size

logger = logging.getLogger(__name__)

SMOOTHING_WINDOW = 50


@dataclass(frozen=True)
class Stage:
    height: int
    width: int
    frames: int
    iterations: int

    @classmethod
    def parse(cls, text: str) -> "Stage":
        """Parses HxWxN:iterations, e.g. 32x32x17:2000."""
        try:
            size, iterations = text.split(":")
            height, rest = size.lower().split("x", 1)
            width, frames = parse_size(rest)
            return cls(int(height), width, frames, int(iterations)).validate()
        except ValueError as e:
            raise ValidationError(f"bad stage {text.strip()!r} (expected HxWxN:iterations): {e}") from None

    def validate(self) -> "Stage":
        if self.iterations <= 0:
            raise ValidationError(f"stage iterations must be > 0, got {self.iterations}")
        if self.height % 16 or self.width % 16 or self.height <= 0 or self.width <= 0:
            raise ValidationError(f"stage resolution must be a positive multiple of 16, got {self.height}x{self.width}")
        latent_shape(self.height, self.width, self.frames) # N = 4k+1
        return self

    @property
    def latent_frames(self) -> int:
        return latent_shape(self.height, self.width, self.frames)[2]

    def __str__(self):
        return f"{self.height}x{self.width}x{self.frames}:{self.iterations}"


@dataclass(frozen=True)
class TrainConfig:
    preset: str = "desk"
    stages: tuple[Stage, ...] = (Stage(32, 32, 17, 2000), Stage(64, 64, 17, 1000))
    batch_size: int = 4
    lr: float = 2e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    seed: int = 0
    moving_ratio: float = 0.5
    caption_ratio: float = 0.0
    mask_count: int = 2
    mask_min_area: float = 0.05
    mask_max_area: float = 0.2
    mask_drift: float = 2.0
    stroke_ratio: float = 0.5
    objects: int = 3
    checkpoint_every: int = 500
    log_every: int = 50
    timestep_mu: float = 0.0
    timestep_sigma: float = 1.0

    @property
    def total_iterations(self) -> int:
        return sum(stage.iterations for stage in self.stages)

    @property
    def scheduler(self) -> SchedulerConfig:
        return SchedulerConfig(mu=self.timestep_mu, sigma=self.timestep_sigma)

    def validate(self) -> "TrainConfig":
        if not self.stages:
            raise ValidationError("at least one training stage is required")
        for stage in self.stages:
            stage.validate()
        preset(self.preset)
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValidationError("lr and weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValidationError(f"betas must lie in [0, 1), got {self.beta1}, {self.beta2}")
        if not (0 <= self.moving_ratio and 0 <= self.caption_ratio and self.moving_ratio + self.caption_ratio <= 1):
            raise ValidationError("moving_ratio and caption_ratio must be >= 0 and sum to at most 1")
        if self.checkpoint_every < 1 or self.log_every < 1:
            raise ValidationError("checkpoint_every and log_every must be >= 1")
        if self.objects < 0 or self.seed < 0:
            raise ValidationError("objects and seed must be >= 0")
        self.mask_spec(MaskKind.STATIONARY)
        self.scheduler.validate()
        return self

    def mask_spec(self, kind: MaskKind) -> MaskSpec:
        return MaskSpec(kind=kind, count=self.mask_count, size_range=(self.mask_min_area, self.mask_max_area),
                        drift=self.mask_drift, stroke_ratio=self.stroke_ratio).validate()

    def stage_at(self, step: int) -> tuple[int, Stage]:
        """Stage index and stage that iteration `step` (0-based) belongs to."""
        end = 0
        for index, stage in enumerate(self.stages):
            end += stage.iterations
            if step < end:
                return index, stage
        raise ValidationError(f"step {step} is past the last stage ({self.total_iterations} iterations)")

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "TrainConfig":
        """
        Reads flat `key = value` lines; `#` starts a comment.

        Raises:
            ValidationError: on unknown or repeated keys and malformed values, naming the line.
        """
        types = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValidationError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in types:
                raise ValidationError(f"{source}:{lineno}: unknown key {key!r}")
            if key in values:
                raise ValidationError(f"{source}:{lineno}: duplicate key {key!r}")
            try:
                if key == "stages":
                    values[key] = tuple(Stage.parse(item) for item in value.split(",") if item.strip())
                elif types[key] in (int, "int"):
                    values[key] = int(value)
                elif types[key] in (float, "float"):
                    values[key] = float(value)
                else:
                    values[key] = value
            except ValueError as e:
                raise ValidationError(f"{source}:{lineno}: bad value for {key!r}: {e}") from None
        return cls(**values).validate()

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "TrainConfig":
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"config file {path} not found")
        return cls.parse(path.read_text(), str(path))


def draw_mask_spec(cfg: TrainConfig, rng: RngStream) -> MaskSpec:
    u = rng.uniform()
    if u < cfg.caption_ratio:
        kind = MaskKind.CAPTION
    elif u < cfg.caption_ratio + cfg.moving_ratio:
        kind = MaskKind.MOVING
    else:
        kind = MaskKind.STATIONARY
    return cfg.mask_spec(kind)


#################################################################################
#                                  Data sources                                 #
#################################################################################

class DataSource(ABC):
    """Yields one (video, mask) pair per call at the requested stage resolution."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg

    @abstractmethod
    def video(self, rng: RngStream, stage: Stage) -> torch.Tensor:
        ...

    def sample(self, rng: RngStream, stage: Stage) -> tuple[torch.Tensor, torch.Tensor]:
        video = self.video(rng, stage)
        mask = gen_masks(rng, stage.height, stage.width, stage.frames, draw_mask_spec(self.cfg, rng))
        return video, mask


class SyntheticSource(DataSource):
    def video(self, rng: RngStream, stage: Stage) -> torch.Tensor:
        return gen_synthetic_video(rng, stage.height, stage.width, stage.frames, self.cfg.objects)


class DirectorySource(DataSource):
    """
    Reads a `gen-data` directory (manifest.json plus video_%04d/frames). Each
    sample is a random window of a stored video, resized bilinearly to the
    stage resolution.
    """

    def __init__(self, cfg: TrainConfig, root: Union[str, Path]):
        super().__init__(cfg)
        self.root = Path(root)
        manifest = self.root / "manifest.json"
        if not manifest.exists():
            raise ValidationError(f"{self.root} has no manifest.json; create it with gen-data")
        try:
            self.names = [entry["name"] for entry in json.loads(manifest.read_text())["videos"]]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ValidationError(f"{manifest}: malformed manifest ({e})") from None
        if not self.names:
            raise ValidationError(f"{manifest} lists no videos")
        self._cache: dict[str, torch.Tensor] = {}

    def _load(self, name: str) -> torch.Tensor:
        if name not in self._cache:
            self._cache[name] = read_frames(self.root / name / "frames")
        return self._cache[name]

    def video(self, rng: RngStream, stage: Stage) -> torch.Tensor:
        stored = self._load(self.names[int(rng.integers(0, len(self.names)))])
        available = stored.shape[2]
        if available < stage.frames:
            raise ValidationError(f"stored videos have {available} frames, stage needs {stage.frames}")
        start = int(rng.integers(0, available - stage.frames + 1))
        clip = stored[:, :, start:start + stage.frames]
        if clip.shape[:2] != (stage.height, stage.width):
            planes = clip.permute(2, 3, 0, 1) # N, 3, H, W
            planes = F.interpolate(planes, size=(stage.height, stage.width), mode="bilinear", align_corners=False)
            clip = planes.permute(2, 3, 0, 1).clamp(0.0, 1.0)
        return clip.contiguous()


#################################################################################
#                                 Training loop                                 #
#################################################################################

@dataclass
class Batch:
    x1: torch.Tensor # B, h, w, n, 8
    y: torch.Tensor
    m: torch.Tensor # B, h, w, n, 4
    t: torch.Tensor # B
    x0: torch.Tensor

def build_batch(cfg: TrainConfig, source: DataSource, stage: Stage, rng: RngStream) -> Batch:
    x1, y, m = [], [], []
    for b in range(cfg.batch_size):
        video, mask = source.sample(rng.child(b), stage)
        x1.append(encode(video))
        y.append(encode(apply_mask(video, mask)))
        m.append(downsample_mask(mask))
    x1 = torch.stack(x1)
    noise_rng = rng.child(cfg.batch_size)
    t = torch.from_numpy(sample_timestep(noise_rng, cfg.scheduler, size=cfg.batch_size)).to(x1.dtype)
    x0 = sample_gaussian(noise_rng, x1.shape, x1.dtype)
    return Batch(x1, torch.stack(y), torch.stack(m), t, x0)

def train_step(model: DiTPainter, optimizer: torch.optim.Optimizer, batch: Batch, step: int) -> float:
    x_t = interpolate(batch.x0, batch.x1, batch.t)
    prediction = model(x_t, batch.y, batch.m, batch.t)
    loss = fm_loss(prediction, velocity_target(batch.x0, batch.x1))
    check_finite(loss.detach(), "training loss", step)
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return loss.item()


def make_optimizer(cfg: TrainConfig, model: DiTPainter) -> torch.optim.AdamW:
    return torch.optim.AdamW(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay)

def optimizer_tensors(optimizer: torch.optim.Optimizer, model: DiTPainter) -> tuple[dict[str, torch.Tensor], int]:
    """AdamW moments keyed `<param>.exp_avg` / `<param>.exp_avg_sq`, plus the shared step count."""
    state = optimizer.state_dict()["state"]
    tensors, step = {}, 0
    for index, (name, _) in enumerate(model.named_parameters()):
        if index not in state:
            continue
        tensors[f"{name}.exp_avg"] = state[index]["exp_avg"].detach().clone()
        tensors[f"{name}.exp_avg_sq"] = state[index]["exp_avg_sq"].detach().clone()
        step = int(state[index]["step"])
    return tensors, step

def restore_optimizer(optimizer: torch.optim.Optimizer, model: DiTPainter, checkpoint: Checkpoint):
    if not checkpoint.optimizer:
        return
    saved = optimizer.state_dict()
    state = {}
    for index, (name, _) in enumerate(model.named_parameters()):
        try:
            exp_avg = checkpoint.optimizer[f"{name}.exp_avg"]
            exp_avg_sq = checkpoint.optimizer[f"{name}.exp_avg_sq"]
        except KeyError:
            raise ValidationError(f"checkpoint optimizer state lacks moments for {name}") from None
        state[index] = {"step": torch.tensor(float(checkpoint.optimizer_step)),
                        "exp_avg": exp_avg.clone(), "exp_avg_sq": exp_avg_sq.clone()}
    saved["state"] = state
    optimizer.load_state_dict(saved)


def _loss_log_path(out: Path) -> Path:
    return out.with_name("losses.csv")

def train(cfg: TrainConfig, source: DataSource, out: Optional[Union[str, Path]] = None,
          resume: Optional[Checkpoint] = None, keep: int = 3) -> Checkpoint:
    """
    Runs every stage of `cfg` and returns the final checkpoint.

    Args:
        cfg (TrainConfig): validated training configuration.
        source (DataSource): where videos come from.
        out (str | Path, optional): final checkpoint path; periodic checkpoints
            roll next to it and losses.csv is written beside it.
        resume (Checkpoint, optional): continue from this checkpoint's params,
            optimizer moments and step.
        keep (int): number of rolled periodic checkpoints kept.

    Raises:
        NumericsError: on a non-finite loss, with the iteration index.
        ValidationError: on config problems or a checkpoint that does not fit.
    """
    cfg.validate()
    model_cfg = preset(cfg.preset)
    if resume is not None:
        if resume.config != model_cfg:
            raise ValidationError(f"checkpoint was trained with a different model config than preset {cfg.preset!r}")
        model = resume.build_model()
        start = resume.step
    else:
        model = build_model(model_cfg, seed=cfg.seed)
        start = 0
    model.train()
    optimizer = make_optimizer(cfg, model)
    if resume is not None:
        restore_optimizer(optimizer, model, resume)

    total = cfg.total_iterations
    out = Path(out) if out is not None else None
    roller = FileRoller(out, keep) if out is not None else None
    history = []
    if out is not None and start > 0 and _loss_log_path(out).exists():
        previous = pd.read_csv(_loss_log_path(out))
        history = previous[previous["step"] < start].to_dict("records")
    smoother = RollingMean(SMOOTHING_WINDOW)
    for row in history[-SMOOTHING_WINDOW:]:
        smoother.set(row["loss"])

    def snapshot(step: int, stage_index: int) -> Checkpoint:
        moments, optimizer_step = optimizer_tensors(optimizer, model)
        return Checkpoint.from_model(model, step=step, stage=stage_index, optimizer=moments,
                                     optimizer_step=optimizer_step, window=cfg.stages[stage_index].latent_frames,
                                     losses=[row["loss"] for row in history])

    def persist(checkpoint: Checkpoint, final: bool):
        if out is None:
            return
        out.parent.mkdir(parents=True, exist_ok=True)
        path = out if final else roller.roll()
        checkpoint.save(path)
        pd.DataFrame(history, columns=["step", "stage", "loss", "smoothed"]).to_csv(_loss_log_path(out), index=False)
        logger.info(f"checkpoint at step {checkpoint.step} written to {path}")

    if start >= total:
        logger.warning(f"checkpoint already at step {start} of {total}; nothing to train")
        return snapshot(start, len(cfg.stages) - 1)

    root = RngStream(cfg.seed)
    stage_index = None
    started = time.perf_counter()
    for step in range(start, total):
        index, stage = cfg.stage_at(step)
        if index != stage_index:
            stage_index = index
            logger.info(f"stage {index + 1}/{len(cfg.stages)}: {stage.height}x{stage.width}, {stage.frames} frames, "
                        f"until step {sum(s.iterations for s in cfg.stages[:index + 1])}")
        batch = build_batch(cfg, source, stage, root.child(step))
        loss = train_step(model, optimizer, batch, step)
        smoother.set(loss)
        history.append({"step": step, "stage": index, "loss": loss, "smoothed": smoother.get()})

        done = step + 1
        if done % cfg.log_every == 0:
            rate = (done - start) / (time.perf_counter() - started)
            logger.info(f"step {done}/{total} loss {loss:.5f} smoothed {smoother} ({rate:.2f} it/s)")
        if done % cfg.checkpoint_every == 0 and done < total:
            persist(snapshot(done, index), final=False)

    checkpoint = snapshot(total, stage_index)
    persist(checkpoint, final=True)
    return checkpoint
