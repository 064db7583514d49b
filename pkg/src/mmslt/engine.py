"""Optimisation, schedules, augmentation, checkpoints and the two stage loops."""

from __future__ import annotations

import json
import logging
import math
import shutil
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .config import PipelineConfig, StageConfig
from .data import Batch, Dataset, SignVideo, collate, frames_to_tensor
from .metrics import EvalReport, bleu, evaluate, rouge_l
from .data import get_tokenizer
from .models import MMSLT, ModelProfile, trainable_parameters
from .pretrain import AlignmentHead, FeatureStore, pretrain_step, retrieval_accuracy, stage1_forward
from .translate import DecodeConfig, default_max_len, finetune_step, translate_batch

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class MissingPrerequisite(RuntimeError):
    pass


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float, warmup_steps: int = 0) -> float:
    """Cosine decay from lr_max at step 0 to lr_min at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_max
    if step < warmup_steps:
        return lr_max * (step + 1) / warmup_steps
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


# ---------------------------------------------------------------------------
# augmentation and frame preprocessing

@dataclass(frozen=True)
class GeometricTransform:
    kind: str               # shift | rotate | scale
    shift: float = 0.0      # fraction of width
    angle: float = 0.0      # degrees
    scale: float = 1.0

    def theta(self, dtype=torch.float32) -> torch.Tensor:
        a = math.radians(self.angle)
        c, s = math.cos(a) / self.scale, math.sin(a) / self.scale
        # affine_grid maps output to input coordinates in [-1, 1]
        return torch.tensor([[c, -s, -2.0 * self.shift], [s, c, 0.0]], dtype=dtype)


def sample_transform(rng: np.random.Generator) -> GeometricTransform:
    kind = ("shift", "rotate", "scale")[int(rng.integers(3))]
    if kind == "shift":
        return GeometricTransform(kind, shift=float(rng.uniform(-0.05, 0.05)))
    if kind == "rotate":
        return GeometricTransform(kind, angle=float(rng.uniform(-5.0, 5.0)))
    return GeometricTransform(kind, scale=float(rng.uniform(0.95, 1.05)))


def apply_transform(frames: torch.Tensor, tf: GeometricTransform) -> torch.Tensor:
    """Apply one transform to every frame of a T x C x H x W clip."""
    theta = tf.theta(frames.dtype).unsqueeze(0).expand(frames.shape[0], 2, 3)
    grid = F.affine_grid(theta, list(frames.shape), align_corners=False)
    return F.grid_sample(frames, grid, mode="bilinear", padding_mode="border", align_corners=False)


def augment_video(frames: torch.Tensor, p: float, rng: np.random.Generator) -> torch.Tensor:
    """With probability p, one geometric transform shared by all frames."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    if p == 0.0 or rng.random() >= p:
        return frames
    return apply_transform(frames, sample_transform(rng))


class FramePipeline:
    """uint8 frames -> resized, cropped, (augmented), normalised tensors.

    Training uses a random crop (one offset per video) and video-level
    augmentation; evaluation uses the centre crop.
    """

    def __init__(self, profile: ModelProfile, train: bool = False, augment_p: float = 0.0,
                 rng: Optional[np.random.Generator] = None):
        self.size = profile.image_size
        self.crop = profile.crop_size
        self.channels = profile.in_channels
        self.train = train
        self.augment_p = augment_p
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def __call__(self, video: SignVideo) -> torch.Tensor:
        x = frames_to_tensor(video.frames)
        if x.shape[1] != self.channels:
            x = x.mean(1, keepdim=True) if self.channels == 1 else x.expand(-1, 3, -1, -1)
        if x.shape[-2:] != (self.size, self.size):
            x = F.interpolate(x, size=(self.size, self.size), mode="bilinear", align_corners=False)
        span = self.size - self.crop
        if self.train:
            oy, ox = (int(v) for v in self.rng.integers(0, span + 1, size=2))
        else:
            oy = ox = span // 2
        x = x[..., oy:oy + self.crop, ox:ox + self.crop]
        if self.train:
            x = augment_video(x, self.augment_p, self.rng)
        return (x - 0.5) / 0.5


def make_batch(videos: Sequence[SignVideo], dataset: Dataset, profile: ModelProfile,
               features: Optional[FeatureStore], need_desc: bool, train: bool = False,
               augment_p: float = 0.0, rng: Optional[np.random.Generator] = None) -> Batch:
    desc = None
    if need_desc:
        if features is None:
            raise MissingPrerequisite("description features are required (run build-feature-store)")
        desc = [features.get(v.id) for v in videos]
    pipe = FramePipeline(profile, train, augment_p, rng)
    return collate(videos, dataset.vocab, pipe, desc)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path: Path, model: MMSLT, meta: dict, head: Optional[AlignmentHead] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None, vocab=None) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        for name, net in model.subnetworks().items():
            torch.save(net.state_dict(), tmp / f"{name}.pt")
        if head is not None:
            torch.save(head.state_dict(), tmp / "head.pt")
        if optimizer is not None:
            torch.save(optimizer.state_dict(), tmp / "optimizer.pt")
        if vocab is not None:
            vocab.save(tmp / "vocab.json")
        meta = dict(meta, profile=model.profile.to_dict(), desc_mode=model.desc_mode,
                    vocab_size=model.vocab_size)
        (tmp / "meta.json").write_text(json.dumps(meta, indent=1))
        if path.exists():
            shutil.rmtree(path)
        tmp.rename(path)
    except OSError as e:
        raise CheckpointError(f"cannot write checkpoint {path}: {e}") from e
    return path


def read_meta(path: Path) -> dict:
    try:
        return json.loads((Path(path) / "meta.json").read_text())
    except FileNotFoundError:
        raise MissingPrerequisite(f"no checkpoint at {path}") from None


def load_checkpoint(path: Path, model: MMSLT, head: Optional[AlignmentHead] = None,
                    optimizer: Optional[torch.optim.Optimizer] = None,
                    subnetworks: Optional[Sequence[str]] = None) -> dict:
    """Load parameters into ``model`` after checking shapes against its profile."""
    path = Path(path)
    meta = read_meta(path)
    nets = model.subnetworks()
    names = subnetworks or [n for n in nets if (path / f"{n}.pt").exists()]
    for name in names:
        if name not in nets:
            raise CheckpointError(f"{path}: model has no subnetwork {name!r}")
        state = torch.load(path / f"{name}.pt", map_location="cpu", weights_only=True)
        own = nets[name].state_dict()
        if set(state) != set(own):
            raise CheckpointError(f"{path}/{name}: parameter names differ from the active profile")
        for k, v in state.items():
            if v.shape != own[k].shape:
                raise CheckpointError(f"{path}/{name}.{k}: shape {tuple(v.shape)} != {tuple(own[k].shape)}")
        nets[name].load_state_dict(state)
    if head is not None and (path / "head.pt").exists():
        head.load_state_dict(torch.load(path / "head.pt", weights_only=True))
    if optimizer is not None:
        optimizer.load_state_dict(torch.load(path / "optimizer.pt", weights_only=True))
    return meta


# ---------------------------------------------------------------------------
# stage loop

@dataclass
class StageResult:
    last: Path
    best: Path
    log: Path
    steps: int
    final: dict = field(default_factory=dict)


def build_model(cfg: PipelineConfig, vocab_size: int, desc_mode: Optional[str] = None) -> MMSLT:
    return MMSLT(cfg.profile, vocab_size, desc_mode or cfg.model.desc_mode, seed=cfg.seed)


def make_optimizer(model: MMSLT, sc: StageConfig, head: Optional[AlignmentHead] = None):
    groups = [{"params": trainable_parameters(model), "weight_decay": sc.weight_decay}]
    if head is not None:
        groups.append({"params": list(head.parameters()), "weight_decay": 0.0})
    return torch.optim.AdamW(groups, lr=sc.lr_max, betas=tuple(sc.betas), eps=sc.eps)


def _dev_videos(dataset: Dataset, limit: Optional[int] = None) -> list[SignVideo]:
    dev = sorted(dataset.split("dev"), key=lambda v: v.id)
    return dev[:limit] if limit else dev


@torch.no_grad()
def evaluate_mmlp(model: MMSLT, head: AlignmentHead, dataset: Dataset, features, sc: StageConfig,
                  batch_size: int = 16) -> dict:
    """Dev retrieval accuracy and losses on one held-out batch of up to 16 videos."""
    model.eval()
    dev = _dev_videos(dataset, batch_size)
    if not dev:
        return {}
    need = model.desc_mode == "direct" or (model.desc_mode == "mapped" and sc.use_dm)
    batch = make_batch(dev, dataset, model.profile, features, need)
    losses, M, L = stage1_forward(batch, model, head, sc.use_align, sc.use_dm)
    out = {f"{k}_dev": float(v) for k, v in losses.items()}
    out["retrieval_dev"] = retrieval_accuracy(M, L)
    return out


def decode_config(cfg: PipelineConfig, dataset: Dataset, beam: Optional[int] = None) -> DecodeConfig:
    max_len = cfg.decode.max_len
    if max_len is None:
        train_lens = [len(dataset.vocab.encode(v.text)) for v in dataset.split("train")]
        max_len = default_max_len(train_lens) + 1   # room for <EOS>
    return DecodeConfig(beam if beam is not None else cfg.decode.beam_size, cfg.decode.length_penalty, max_len)


@torch.no_grad()
def translate_videos(model: MMSLT, videos: Sequence[SignVideo], dataset: Dataset, features,
                     dcfg: DecodeConfig, chunk: int = 16) -> list[dict]:
    rows = []
    need = model.desc_mode == "direct"
    for i in range(0, len(videos), chunk):
        part = list(videos[i:i + chunk])
        batch = make_batch(part, dataset, model.profile, features, need)
        for v, (toks, score) in zip(part, translate_batch(batch, model, dataset.vocab, dcfg)):
            rows.append({"id": v.id, "hypothesis": dataset.vocab.decode(toks), "reference": v.text,
                         "score": score})
    return rows


def evaluate_slt(model: MMSLT, dataset: Dataset, features, cfg: PipelineConfig, split: str = "dev",
                 beam: Optional[int] = None) -> tuple[dict, list[dict]]:
    videos = sorted(dataset.split(split), key=lambda v: v.id)
    if not videos:
        return {}, []
    rows = translate_videos(model, videos, dataset, features, decode_config(cfg, dataset, beam))
    tok = get_tokenizer(cfg.data.metric_tokenization)
    report = evaluate([r["hypothesis"] for r in rows], [r["reference"] for r in rows],
                      [r["id"] for r in rows], tok)
    return {f"{k}_{split}": v for k, v in report.scores().items()}, rows


def _is_better(stage: str, metrics: dict, best: Optional[dict]) -> bool:
    if best is None:
        return True
    if stage == "mmlp":
        key = (metrics.get("retrieval_dev", 0.0), -metrics.get("loss_mmlp_dev", 0.0))
        ref = (best.get("retrieval_dev", 0.0), -best.get("loss_mmlp_dev", 0.0))
        return key > ref
    # BLEU-4 first; lower orders then ROUGE-L break ties (BLEU-4 is 0 until some 4-gram matches)
    keys = ("bleu4_dev", "bleu3_dev", "bleu2_dev", "bleu1_dev", "rouge_l_dev")
    return tuple(metrics.get(k, 0.0) for k in keys) > tuple(best.get(k, 0.0) for k in keys)


def _trim_log(path: Path, max_step: int) -> None:
    if not path.exists():
        return
    keep = [l for l in path.read_text().splitlines() if l.strip() and json.loads(l)["step"] <= max_step]
    path.write_text("".join(l + "\n" for l in keep))


def run_stage(cfg: PipelineConfig, stage: str, dataset: Dataset, ckpt_dir: Path, log_path: Path,
              features: Optional[FeatureStore] = None, init_from: Optional[Path] = None,
              from_scratch: bool = False, resume: bool = False,
              stop_after_steps: Optional[int] = None) -> StageResult:
    """Train one stage for ``epochs x ceil(N_train / batch)`` steps.

    Every run is a pure function of (config, data): batches are drawn from
    a per-epoch permutation and every random choice uses a generator seeded
    by (seed, stage, step), so a resumed run continues exactly where the
    interrupted one stopped. Checkpoints ``last`` and ``best`` are written
    at every evaluation.
    """
    sc: StageConfig = getattr(cfg, stage)
    ckpt_dir, log_path = Path(ckpt_dir), Path(log_path)
    torch.manual_seed(cfg.seed)
    vocab = dataset.vocab
    model = build_model(cfg, len(vocab))
    if stage == "slt":
        if init_from is not None:
            load_checkpoint(init_from, model)
        elif not from_scratch:
            raise MissingPrerequisite("fine-tuning needs a stage-1 checkpoint (or from_scratch=True)")
    model.configure_trainable(stage, cfg.model.enc_layernorm, cfg.model.dec_layernorm,
                              cfg.model.dec_base_trainable)
    head = AlignmentHead(sc.lam) if stage == "mmlp" else None
    optimizer = make_optimizer(model, sc, head)

    train = sorted(dataset.split("train"), key=lambda v: v.id)
    if not train and sc.epochs:
        raise TrainingError("no training videos")
    spe = math.ceil(len(train) / sc.batch_size) if train else 0
    total = sc.epochs * spe
    last, best = ckpt_dir / "last", ckpt_dir / "best"
    meta = {"stage": stage, "config_hash": cfg.hash(), "total_steps": total}
    if stage == "mmlp":
        need_desc = model.desc_mode == "direct" or (model.desc_mode == "mapped" and sc.use_dm)
    else:
        need_desc = model.desc_mode == "direct"

    start, best_metrics = 0, None
    if resume and (last / "meta.json").exists():
        m = load_checkpoint(last, model, head, optimizer)
        if m.get("config_hash") != cfg.hash():
            raise CheckpointError(f"{last} was written by a different configuration")
        start = int(m["step"])
        best_metrics = m.get("best_metrics")
        _trim_log(log_path, start)
    else:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("")

    def checkpoint(step, epoch, metrics=None):
        nonlocal best_metrics
        improved = metrics is not None and _is_better(stage, metrics, best_metrics)
        if improved:
            best_metrics = dict(metrics)
        m = dict(meta, step=step, epoch=epoch, best_metrics=best_metrics, metrics=metrics)
        save_checkpoint(last, model, m, head, optimizer, vocab)
        if improved or not (best / "meta.json").exists():
            save_checkpoint(best, model, m, head, None, vocab)

    if total == 0:
        checkpoint(0, 0)
        return StageResult(last, best, log_path, 0, {})

    final: dict = {}
    with log_path.open("a") as log:
        for step in range(start, total):
            if stop_after_steps is not None and step >= stop_after_steps:
                break
            epoch, i = divmod(step, spe)
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
            videos = [train[j] for j in order[i * sc.batch_size:(i + 1) * sc.batch_size]]
            rng = np.random.default_rng([cfg.seed, 1 if stage == "mmlp" else 2, step])
            batch = make_batch(videos, dataset, model.profile, features, need_desc, True, sc.augment_p, rng)
            lr = cosine_lr(step, total, sc.lr_max, sc.lr_min, sc.warmup_steps)
            if stage == "mmlp":
                losses = pretrain_step(batch, model, head, optimizer, lr, sc.use_align, sc.use_dm,
                                       cfg.model.dm_grad_to_visual)
                loss = losses["loss_mmlp"]
            else:
                loss = finetune_step(batch, model, optimizer, vocab, lr, sc.label_smoothing)
                losses = {"loss_slt": loss}
            if not math.isfinite(loss):
                raise TrainingError(f"{stage} step {step + 1}: non-finite loss {loss} (lr={lr:.3g}, "
                                    f"videos={batch.ids})")
            rec = {"step": step + 1, "epoch": epoch + 1, "lr": lr, **losses}
            if stage == "mmlp":
                rec["tau"] = float(head.tau.detach())
            log.write(json.dumps(rec) + "\n")
            if i == spe - 1:
                ep = epoch + 1
                metrics = None
                if ep % sc.eval_every == 0 or ep == sc.epochs:
                    if stage == "mmlp":
                        metrics = evaluate_mmlp(model, head, dataset, features, sc)
                    else:
                        beam = 1 if sc.dev_decode == "greedy" else None
                        metrics, _ = evaluate_slt(model, dataset, features, cfg, "dev", beam)
                    log.write(json.dumps({"step": step + 1, "epoch": ep, "event": "eval", **metrics}) + "\n")
                    final = metrics
                log.flush()
                checkpoint(step + 1, ep, metrics)
    return StageResult(last, best, log_path, total, final)


def read_log(path: Path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]


# ---------------------------------------------------------------------------
# ablation grid

ABLATION_ROWS = [
    # (row, label, desc_mode, pretrain, use_align, use_dm)
    (1, "images only", "none", False, False, False),
    (2, "+descriptions (direct)", "direct", False, False, False),
    (3, "+description mapper", "mapped", True, False, True),
    (4, "+alignment, no mapper", "direct", True, True, False),
    (5, "full model", "mapped", True, True, True),
]


def ablation_config(cfg: PipelineConfig, row: int) -> tuple[PipelineConfig, bool]:
    """Config for one ablation row and whether stage 1 runs."""
    _, _, mode, pre, align, dm = next(r for r in ABLATION_ROWS if r[0] == row)
    out = PipelineConfig.from_dict(cfg.to_dict())
    out.model.desc_mode = mode
    out.mmlp.use_align = align
    out.mmlp.use_dm = dm
    return out, pre


def run_ablation(cfg: PipelineConfig, dataset: Dataset, features: Optional[FeatureStore], out_dir: Path,
                 rows: Sequence[int] = (1, 2, 3, 4, 5), split: str = "test",
                 progress: Optional[Callable[[str], None]] = None) -> list[dict]:
    out_dir = Path(out_dir)
    report = []
    for row in rows:
        rcfg, pre = ablation_config(cfg, row)
        rdir = out_dir / f"row{row}"
        rcfg.dump(rdir / "resolved_config.yaml")
        init = None
        if pre:
            res1 = run_stage(rcfg, "mmlp", dataset, rdir / "checkpoints" / "mmlp", rdir / "logs" / "mmlp.jsonl",
                             features)
            init = res1.best
        res2 = run_stage(rcfg, "slt", dataset, rdir / "checkpoints" / "slt", rdir / "logs" / "slt.jsonl",
                         features, init_from=init, from_scratch=init is None)
        model = build_model(rcfg, len(dataset.vocab))
        load_checkpoint(res2.best, model)
        scores, rows_out = evaluate_slt(model, dataset, features, rcfg, split)
        label = next(r[1] for r in ABLATION_ROWS if r[0] == row)
        _, _, mode, pre_, align, dm = next(r for r in ABLATION_ROWS if r[0] == row)
        entry = {"row": row, "label": label, "gsd_mllm": mode != "none", "ml_align": align,
                 "dm": mode == "mapped",
                 **{k.replace(f"_{split}", ""): v for k, v in scores.items()}}
        report.append(entry)
        if progress:
            progress(f"row {row} ({label}): BLEU-4 {entry['bleu4']:.2f}")
    return report
