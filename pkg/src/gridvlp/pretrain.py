"""Joint pre-training: batch assembly, the four-way loss, optimization and logging."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import os
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import yaml

from .data import Scene, SceneConfig, generate, load_split, sample_itm_pairs
from .decoder import caption_loss
from .encoder import mlm_loss, sample_mlm_mask
from .matching import GroundTruthObjects, detection_loss, match
from .model import ModelConfig, VLPModel
from .text import Vocabulary, collate_tokens, default_vocabulary, target_ids, tokenize
from .visual import GridFeatureMap, ScalePolicy, batch_images, normalize_image

log = logging.getLogger(__name__)

LOSS_NAMES = ("mlm", "itm", "detection", "caption")


class TrainingHalted(RuntimeError):
    pass


# --- configuration -----------------------------------------------------------

@dataclass
class OptimConfig:
    lr_transformer: float = 1e-4
    lr_backbone: float = 1e-5
    weight_decay: float = 1e-4
    grad_clip: float = 0.1  # global norm; 0 disables
    lr_drop_epochs: list[int] = field(default_factory=list)
    lr_drop_factor: float = 0.1


@dataclass
class ScheduleConfig:
    steps: int = 2000
    batch_size: int = 16
    log_every: int = 1
    checkpoint_every: int = 0  # 0: only at the end


@dataclass
class DataConfig:
    train_dir: Optional[str] = None  # None: generate in memory
    num_scenes: int = 16
    seed: int = 0
    image_size: int = 64
    max_objects: int = 3
    augment: bool = False
    min_short: int = 64
    max_short: int = 96
    max_long: int = 160


@dataclass
class LossConfig:
    mlm: bool = True
    itm: bool = True
    detection: bool = True
    caption: bool = True
    weight_mlm: float = 1.0
    weight_itm: float = 1.0
    weight_detection: float = 1.0
    weight_caption: float = 1.0
    itm_negative_rate: float = 0.5
    itm_corpus_negatives: bool = False
    mlm_rate: float = 0.15
    caption_smoothing: float = 0.0

    def enabled(self, name: str) -> bool:
        return getattr(self, name)

    def weight(self, name: str) -> float:
        return getattr(self, f"weight_{name}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    deterministic: bool = True
    out_dir: Optional[str] = None
    max_consecutive_failures: int = 3

    def __post_init__(self):
        if self.deterministic:
            self.model.dropout = 0.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        sections = {"model": ModelConfig, "optim": OptimConfig, "schedule": ScheduleConfig,
                    "data": DataConfig, "loss": LossConfig}
        raw = dict(raw or {})
        kwargs = {}
        for key, value in raw.items():
            if key in sections:
                known = {f.name for f in dataclasses.fields(sections[key])}
                unknown = set(value or {}) - known
                if unknown:
                    raise ValueError(f"unknown keys in [{key}]: {sorted(unknown)}")
                kwargs[key] = sections[key](**(value or {}))
            elif key in {f.name for f in dataclasses.fields(cls)}:
                kwargs[key] = value
            else:
                raise ValueError(f"unknown config key {key!r}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path, env: Optional[dict] = None) -> "RunConfig":
        raw = yaml.safe_load(Path(path).read_text()) if path else {}
        cfg = cls.from_dict(raw or {})
        return cfg.with_env(env)

    def with_env(self, env: Optional[dict] = None) -> "RunConfig":
        """Apply ``GRIDVLP_SEED``, ``GRIDVLP_OUT_DIR`` and ``GRIDVLP_DATA_DIR``."""
        env = os.environ if env is None else env
        if "GRIDVLP_SEED" in env:
            self.seed = int(env["GRIDVLP_SEED"])
        if "GRIDVLP_OUT_DIR" in env:
            self.out_dir = env["GRIDVLP_OUT_DIR"]
        if "GRIDVLP_DATA_DIR" in env:
            self.data.train_dir = env["GRIDVLP_DATA_DIR"]
        return self

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=True))


def desk_overfit_config(**overrides) -> RunConfig:
    """Settings for the 16-scene overfit run used by the acceptance suite."""
    cfg = RunConfig(
        optim=OptimConfig(lr_transformer=5e-4, lr_backbone=5e-4, grad_clip=1.0),
        schedule=ScheduleConfig(steps=2000, batch_size=16),
        data=DataConfig(num_scenes=16, seed=0),
    )
    for key, value in overrides.items():
        section, _, name = key.partition(".")
        if name:
            setattr(getattr(cfg, section), name, value)
        else:
            setattr(cfg, key, value)
    if cfg.deterministic:
        cfg.model.dropout = 0.0
    return cfg


# --- batches -----------------------------------------------------------------

def scene_targets(scene: Scene, scene_cfg: SceneConfig) -> GroundTruthObjects:
    classes = torch.tensor([scene_cfg.classes.index(o.cls) for o in scene.objects], dtype=torch.long)
    attrs = torch.tensor([scene_cfg.colors.index(o.attr) if o.attr in scene_cfg.colors else -1
                          for o in scene.objects], dtype=torch.long)
    boxes = torch.tensor([list(o.box) for o in scene.objects], dtype=torch.float32).reshape(-1, 4)
    return GroundTruthObjects(classes, boxes, attrs)


def caption_targets(captions: Sequence[str], vocab: Vocabulary, max_len: int):
    seqs = [target_ids(c, vocab, max_len) for c in captions]
    length = max(len(s) for s in seqs)
    ids = torch.full((len(seqs), length), vocab.pad_id, dtype=torch.long)
    mask = torch.zeros(len(seqs), length, dtype=torch.bool)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = torch.tensor(s)
        mask[i, : len(s)] = True
    return ids, mask


def scene_images(scenes: Sequence[Scene], policy: Optional[ScalePolicy] = None,
                 rng: Optional[np.random.Generator] = None) -> torch.Tensor:
    ims = [normalize_image(s.image) for s in scenes]
    if policy is not None:
        ims = [policy(im, rng) for im in ims]
    return batch_images(ims)


@dataclass
class PretrainBatch:
    scene_ids: list[int]
    images: torch.Tensor
    tokens: dict[str, torch.Tensor]
    mlm_labels: torch.Tensor
    itm_labels: torch.Tensor
    targets: list[GroundTruthObjects]
    caption_ids: torch.Tensor
    caption_mask: torch.Tensor

    @property
    def matched(self) -> list[int]:
        return [i for i, v in enumerate(self.itm_labels.tolist()) if v]


def make_pretrain_batch(scenes: Sequence[Scene], vocab: Vocabulary, rng: np.random.Generator,
                        loss_cfg: LossConfig = LossConfig(), scene_cfg: SceneConfig = SceneConfig(),
                        max_len: int = 40, pool: Optional[Sequence[Scene]] = None,
                        policy: Optional[ScalePolicy] = None) -> PretrainBatch:
    pairs = sample_itm_pairs(scenes, rng, loss_cfg.itm_negative_rate,
                             pool if loss_cfg.itm_corpus_negatives else None)
    seqs = [tokenize(p.caption, vocab, max_len) for p in pairs]
    tokens = collate_tokens(seqs, vocab.pad_id)
    # Every row is corrupted so the presence of [MASK] says nothing about matching.
    corrupted, mask = sample_mlm_mask(tokens["token_ids"], tokens["attention_mask"], vocab, rng,
                                      loss_cfg.mlm_rate)
    tokens["token_ids"] = corrupted
    matched = {i for i, p in enumerate(pairs) if p.label}
    cap_ids, cap_mask = caption_targets([s.caption for s in scenes], vocab, max_len)
    return PretrainBatch(
        scene_ids=[s.scene_id for s in scenes],
        images=scene_images(scenes, policy, rng),
        tokens=tokens,
        mlm_labels=mask.labels(tuple(corrupted.shape), matched),
        itm_labels=torch.tensor([p.label for p in pairs]),
        targets=[scene_targets(s, scene_cfg) for s in scenes],
        caption_ids=cap_ids,
        caption_mask=cap_mask,
    )


# --- the joint objective -----------------------------------------------------

def _subset_grid(grid: GridFeatureMap, index: list[int]) -> GridFeatureMap:
    return GridFeatureMap(grid.features[index], grid.grid_shape, grid.pos_encoding)


def joint_step(model: VLPModel, batch: PretrainBatch,
               loss_cfg: LossConfig = LossConfig()) -> dict[str, torch.Tensor]:
    """Forward all enabled objectives; returns components and their weighted sum.

    MLM, detection and captioning use matched pairs only; ITM uses every pair.
    """
    dtype = next(model.parameters()).dtype
    grid = model.visual(batch.images.to(dtype))
    state = model.encode_features(grid, batch.tokens)
    zero = state.final.sum() * 0
    out = {name: zero for name in LOSS_NAMES}
    matched = batch.matched
    if loss_cfg.mlm:
        out["mlm"] = mlm_loss(model.mlm_logits(state), batch.mlm_labels)
    if loss_cfg.itm:
        from .encoder import itm_loss
        out["itm"] = itm_loss(model.itm_logits(state), batch.itm_labels)
    if loss_cfg.detection and matched:
        det = model.detect(state.select(matched))
        gts = [batch.targets[i] for i in matched]
        gts = [GroundTruthObjects(g.classes, g.boxes.to(dtype), g.attributes) for g in gts]
        assignments = [match(g, det[k]) for k, g in enumerate(gts)]
        out["detection"] = detection_loss(gts, det, assignments)["total"]
    if loss_cfg.caption and matched:
        cap_state = model.encode_image_only(_subset_grid(grid, matched))
        ids = batch.caption_ids[matched]
        mask = batch.caption_mask[matched]
        logits = model.decoder.caption_logits(cap_state, ids[:, :-1], mask[:, :-1])
        out["caption"] = caption_loss(logits, ids[:, 1:], mask[:, 1:], loss_cfg.caption_smoothing)
    total = zero
    for name in LOSS_NAMES:
        total = total + loss_cfg.weight(name) * out[name]
    out["total"] = total
    return out


# --- optimization --------------------------------------------------------------

def build_optimizer(model: torch.nn.Module, cfg: OptimConfig,
                    extra_params: Sequence[torch.nn.Parameter] = ()) -> torch.optim.AdamW:
    backbone, rest = [], []
    for name, p in model.named_parameters():
        (backbone if name.startswith("visual.backbone.") else rest).append(p)
    rest.extend(extra_params)
    groups = [
        {"params": rest, "lr": cfg.lr_transformer, "base_lr": cfg.lr_transformer, "name": "transformer"},
        {"params": backbone, "lr": cfg.lr_backbone, "base_lr": cfg.lr_backbone, "name": "backbone"},
    ]
    return torch.optim.AdamW(groups, weight_decay=cfg.weight_decay)


def lr_factor(epochs_completed: int, drop_epochs: Sequence[int], factor: float = 0.1) -> float:
    """Multiplier after ``epochs_completed`` full epochs (drops take effect at the end of an epoch)."""
    return factor ** sum(1 for e in drop_epochs if epochs_completed >= e)


def set_epoch_lr(optimizer: torch.optim.Optimizer, epochs_completed: int, cfg: OptimConfig) -> None:
    f = lr_factor(epochs_completed, cfg.lr_drop_epochs, cfg.lr_drop_factor)
    for group in optimizer.param_groups:
        group["lr"] = group["base_lr"] * f


def optimize(optimizer: torch.optim.Optimizer, params: Sequence[torch.nn.Parameter],
             grad_clip: float = 0.0) -> float:
    """Clip (if requested) and apply one AdamW update; returns the pre-clip norm."""
    grads = [p for p in params if p.grad is not None]
    norm = float(torch.nn.utils.clip_grad_norm_(grads, grad_clip if grad_clip > 0 else math.inf))
    optimizer.step()
    return norm


# --- reproducibility -------------------------------------------------------------

def seed_everything(seed: int, deterministic: bool = True) -> np.random.Generator:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)
    return np.random.default_rng(seed)


def load_scenes(cfg: DataConfig) -> list[Scene]:
    if cfg.train_dir:
        return load_split(cfg.train_dir)
    return list(generate(cfg.seed, cfg.num_scenes, scene_config(cfg)))


def scene_config(cfg: DataConfig) -> SceneConfig:
    return SceneConfig(image_size=cfg.image_size, max_objects=cfg.max_objects)


# --- training loop ---------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    epoch: int
    losses: dict[str, float]
    lr: dict[str, float]
    stem_grad_norm: float
    grad_norm: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps({"step": self.step, "epoch": self.epoch, **self.losses,
                           "lr": self.lr, "stem_grad_norm": self.stem_grad_norm,
                           "grad_norm": self.grad_norm, "wall_time": self.wall_time},
                          sort_keys=True)


class Trainer:
    def __init__(self, cfg: RunConfig, scenes: Optional[Sequence[Scene]] = None,
                 vocab: Optional[Vocabulary] = None, model: Optional[VLPModel] = None):
        self.cfg = cfg
        self.rng = seed_everything(cfg.seed, cfg.deterministic)
        self.vocab = vocab or default_vocabulary()
        self.scene_cfg = scene_config(cfg.data)
        self.scenes = list(scenes) if scenes is not None else load_scenes(cfg.data)
        self.model = model or VLPModel(cfg.model, self.vocab)
        self.optimizer = build_optimizer(self.model, cfg.optim)
        self.step = 0
        self.history: list[StepRecord] = []
        self.failures = 0
        self._order: list[int] = []
        self.policy = (ScalePolicy(cfg.data.min_short, cfg.data.max_short, cfg.data.max_long)
                       if cfg.data.augment else None)
        self.out_dir = Path(cfg.out_dir) if cfg.out_dir else None
        if self.out_dir:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            cfg.dump(self.out_dir / "config.yaml")

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.scenes) / self.cfg.schedule.batch_size)

    def next_scenes(self) -> list[Scene]:
        bs = min(self.cfg.schedule.batch_size, len(self.scenes))
        if len(self._order) < bs:
            self._order += [int(i) for i in self.rng.permutation(len(self.scenes))]
        idx, self._order = self._order[:bs], self._order[bs:]
        return [self.scenes[i] for i in idx]

    def train_step(self) -> Optional[StepRecord]:
        cfg = self.cfg
        epoch = self.step // self.steps_per_epoch
        set_epoch_lr(self.optimizer, epoch, cfg.optim)
        self.model.train()
        batch = make_pretrain_batch(self.next_scenes(), self.vocab, self.rng, cfg.loss,
                                    self.scene_cfg, cfg.model.max_text_len, self.scenes,
                                    self.policy)
        t0 = time.perf_counter()
        self.optimizer.zero_grad(set_to_none=True)
        losses = joint_step(self.model, batch, cfg.loss)
        self.step += 1
        if not torch.isfinite(losses["total"]):
            self.failures += 1
            log.warning("non-finite loss at step %d, scenes %s", self.step, batch.scene_ids)
            if self.out_dir:
                with open(self.out_dir / "failed_batches.jsonl", "a") as fh:
                    fh.write(json.dumps({"step": self.step, "scene_ids": batch.scene_ids}) + "\n")
            if self.failures >= cfg.max_consecutive_failures:
                raise TrainingHalted(f"{self.failures} consecutive non-finite losses")
            return None
        self.failures = 0
        losses["total"].backward()
        stem = self.model.visual.backbone.stem.weight.grad
        stem_norm = 0.0 if stem is None else float(stem.norm())
        params = [p for g in self.optimizer.param_groups for p in g["params"]]
        grad_norm = optimize(self.optimizer, params, cfg.optim.grad_clip)
        rec = StepRecord(
            step=self.step, epoch=epoch,
            losses={k: float(v.detach()) for k, v in losses.items()},
            lr={g["name"]: g["lr"] for g in self.optimizer.param_groups},
            stem_grad_norm=stem_norm, grad_norm=grad_norm,
            wall_time=time.perf_counter() - t0,
        )
        self.history.append(rec)
        if self.out_dir and self.step % cfg.schedule.log_every == 0:
            with open(self.out_dir / "metrics.jsonl", "a") as fh:
                fh.write(rec.to_json() + "\n")
        return rec

    def fit(self, steps: Optional[int] = None,
            callback: Optional[Callable[[StepRecord], None]] = None) -> list[StepRecord]:
        steps = self.cfg.schedule.steps if steps is None else steps
        every = self.cfg.schedule.checkpoint_every
        for _ in range(steps):
            rec = self.train_step()
            if rec is not None and callback:
                callback(rec)
            if self.out_dir and every and self.step % every == 0:
                self.save(self.out_dir / f"step{self.step:06d}.ckpt")
        if self.out_dir:
            self.save(self.out_dir / "final.ckpt")
        return self.history

    def save(self, path) -> None:
        from .checkpoint import save_checkpoint
        save_checkpoint(path, self.model, self.optimizer, self.step, self.cfg)


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    kernel = np.ones(window) / window
    return np.convolve(v, kernel, mode="valid")
