"""Two-stage pretraining and VQA finetuning loops.

Stage 1 trains the modality encoders (plus pooling and heads) on MLM + ITM
+ VQA using stage-1 pooled features; stage 2 freezes every encoder and
capsule parameter and trains the cross-modal stack, pooling, and heads on
the cross-attended features; finetuning trains the whole model on VQA and
keeps the checkpoint with the best validation accuracy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .capsules import RoutingNumericsError
from .checkpoint import Checkpoint, load_into_model, model_state_tensors, save_checkpoint
from .config import Config, StageConfig, config_to_dict
from .crossmodal import LossNumericsError, combined_loss
from .data import AnswerVocab, Batch, iterate_batches, load_manifest, open_dataset
from .model import GroundedVqaModel, ModelOutput
from .tokenizer import Tokenizer


class TrainingDiverged(RuntimeError):
    def __init__(self, term: str, step: int, ckpt_path: Path | None):
        msg = f"loss term {term!r} became non-finite at step {step}"
        if ckpt_path is not None:
            msg += f"; last good checkpoint written to {ckpt_path}"
        super().__init__(msg)


def mask_text(
    token_ids: torch.Tensor,
    pad_mask: torch.Tensor,
    tokenizer: Tokenizer,
    rate: float,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """BERT-style masking on word positions: 80% [MASK], 10% random, 10% keep.

    Returns (masked ids, positions (N, 2), target ids (N,)).
    """
    ids = token_ids.clone()
    keep_out = {tokenizer.cls_id, tokenizer.sep_id}
    positions, targets = [], []
    b_sz, t_len = ids.shape
    for b in range(b_sz):
        for t in range(t_len):
            if not pad_mask[b, t] or int(ids[b, t]) in keep_out:
                continue
            if rng.random() >= rate:
                continue
            positions.append((b, t))
            targets.append(int(token_ids[b, t]))
            u = rng.random()
            if u < 0.8:
                ids[b, t] = tokenizer.mask_id
            elif u < 0.9:
                ids[b, t] = int(
                    rng.integers(tokenizer.n_special, len(tokenizer))
                )
    pos = torch.tensor(positions, dtype=torch.long).reshape(-1, 2)
    tgt = torch.tensor(targets, dtype=torch.long)
    return ids, pos, tgt


def itm_swap(
    token_ids: torch.Tensor,
    pad_mask: torch.Tensor,
    rng: np.random.Generator,
    negative_prob: float,
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Replace some questions with a different sample's question (label 0)."""
    b_sz = token_ids.shape[0]
    ids = token_ids.clone()
    mask = pad_mask.clone()
    labels = torch.ones(b_sz, dtype=torch.long)
    for b in range(b_sz):
        if b_sz > 1 and rng.random() < negative_prob:
            j = int(rng.integers(0, b_sz - 1))
            if j >= b:
                j += 1
            ids[b] = token_ids[j]
            mask[b] = pad_mask[j]
            labels[b] = 0
    return ids, mask, labels


def stage_losses(
    model: GroundedVqaModel,
    out: ModelOutput,
    stage: str,
    mlm_positions: torch.Tensor | None,
    mlm_targets: torch.Tensor | None,
    itm_labels: torch.Tensor | None,
    answer_ids: torch.Tensor,
) -> dict[str, torch.Tensor | None]:
    """Route features to heads per stage and compute the per-task losses."""
    ce = nn.functional.cross_entropy
    if stage == "pretrain1":
        text_feats = out.text_layers[-1]
        pooled = out.pooled_stage1
    else:
        text_feats = out.cross.text
        pooled = out.pooled_stage2

    losses: dict[str, torch.Tensor | None] = {"mlm": None, "itm": None, "vqa": None}
    if mlm_positions is not None:
        if mlm_positions.shape[0] == 0:
            losses["mlm"] = pooled.new_zeros(())
        else:
            logits = model.mlm_head(text_feats, mlm_positions)
            losses["mlm"] = ce(logits, mlm_targets)
    if itm_labels is not None:
        losses["itm"] = ce(model.itm_head(pooled), itm_labels)
    matched = (
        itm_labels.bool() if itm_labels is not None
        else torch.ones(len(answer_ids), dtype=torch.bool)
    )
    if answer_ids is not None and matched.any():
        # A mismatched image cannot answer the question: VQA on matched pairs.
        logits = model.vqa_head(pooled[matched])
        losses["vqa"] = ce(logits, answer_ids[matched])
    return losses


def build_optimizer(params, settings: StageConfig) -> torch.optim.AdamW:
    params = [p for p in params if p.requires_grad]
    decay = [p for p in params if p.dim() > 1]
    no_decay = [p for p in params if p.dim() <= 1]
    return torch.optim.AdamW(
        [
            {"params": decay, "weight_decay": settings.weight_decay},
            {"params": no_decay, "weight_decay": 0.0},
        ],
        lr=settings.lr,
    )


def warmup_linear(total_steps: int, warmup_frac: float):
    warmup = max(1, int(round(total_steps * warmup_frac)))

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        if total_steps <= warmup:
            return 1.0
        return max(0.0, (total_steps - step) / (total_steps - warmup))

    return factor


def trainable_scopes(stage: str) -> tuple[str, ...]:
    return {
        "pretrain1": ("backbone", "heads"),
        "pretrain2": ("cross", "heads"),
        "finetune": ("backbone", "cross", "heads"),
    }[stage]


def apply_stage_freeze(model: GroundedVqaModel, stage: str) -> None:
    """Stage 2 keeps encoders and capsules bit-identical: grads off, eval mode."""
    for p in model.parameters():
        p.requires_grad_(True)
    if stage == "pretrain2":
        for module in model.backbone_modules():
            for p in module.parameters():
                p.requires_grad_(False)


def _set_train_mode(model: GroundedVqaModel, stage: str) -> None:
    model.train()
    if stage == "pretrain2":
        for module in model.backbone_modules():
            module.eval()


@torch.no_grad()
def evaluate_answer_accuracy(
    model: GroundedVqaModel,
    samples,
    tokenizer: Tokenizer,
    answers: AnswerVocab,
    batch_size: int,
    stage: str,
) -> float:
    model.eval()
    correct = total = 0
    run_cross = stage != "pretrain1"
    for batch in iterate_batches(samples, tokenizer, answers, batch_size):
        out = model(
            batch.token_ids,
            batch.pad_mask,
            images=batch.images,
            feature_grids=batch.feature_grids,
            run_cross=run_cross,
        )
        pooled = out.pooled_stage1 if stage == "pretrain1" else out.pooled_stage2
        pred = model.vqa_head(pooled).argmax(dim=-1)
        correct += int((pred == batch.answer_ids).sum())
        total += len(batch)
    return correct / max(total, 1)


@dataclass
class StageResult:
    stage: str
    steps: int
    final_loss: float
    val_accuracy: float | None
    ckpt_path: Path


def train_stage(
    model: GroundedVqaModel,
    stage: str,
    cfg: Config,
    data_root: str | Path,
    ckpt_out: str | Path,
    log_path: str | Path | None = None,
) -> StageResult:
    settings = cfg.stage(stage)
    settings.validate()
    paths, tokenizer, answers = open_dataset(data_root)
    if len(tokenizer) > model.cfg.vocab_size:
        raise ValueError(
            f"dataset vocabulary ({len(tokenizer)}) exceeds model vocab_size "
            f"({model.cfg.vocab_size}); raise model.vocab_size in the config"
        )
    if len(answers) > model.cfg.answer_vocab_size:
        raise ValueError(
            f"dataset has {len(answers)} answers but model answer_vocab_size is "
            f"{model.cfg.answer_vocab_size}; raise it in the config"
        )
    train_samples = load_manifest(paths.train_manifest)
    val_samples = (
        load_manifest(paths.val_manifest) if paths.val_manifest.exists() else []
    )

    seed = cfg.seed
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)

    apply_stage_freeze(model, stage)
    optimizer = build_optimizer(model.parameters(), settings)
    steps_per_epoch = (len(train_samples) + settings.batch_size - 1) // settings.batch_size
    total_steps = steps_per_epoch * settings.epochs
    lr_factor = warmup_linear(total_steps, settings.warmup_frac)

    ckpt_out = Path(ckpt_out)
    config_snapshot = config_to_dict(cfg)
    log_f = open(log_path, "w") if log_path is not None else None

    def log(record: dict) -> None:
        if log_f is not None:
            log_f.write(json.dumps(record, sort_keys=True) + "\n")
            log_f.flush()

    run_cross = stage != "pretrain1"
    step = 0
    last_loss = float("nan")
    last_good: dict[str, torch.Tensor] | None = None
    best_acc = -1.0
    best_state: dict[str, torch.Tensor] | None = None

    def snapshot() -> dict[str, torch.Tensor]:
        return {k: v.detach().clone() for k, v in model_state_tensors(model).items()}

    try:
        for epoch in range(settings.epochs):
            _set_train_mode(model, stage)
            epoch_rng = np.random.default_rng(seed + 1000 * (epoch + 1))
            for batch in iterate_batches(
                train_samples, tokenizer, answers, settings.batch_size, epoch_rng
            ):
                lr = settings.lr * lr_factor(step)
                for group in optimizer.param_groups:
                    group["lr"] = lr

                token_ids, pad_mask = batch.token_ids, batch.pad_mask
                itm_labels = None
                if settings.use_itm:
                    token_ids, pad_mask, itm_labels = itm_swap(
                        token_ids, pad_mask, epoch_rng, settings.itm_negative_prob
                    )
                mlm_positions = mlm_targets = None
                if settings.use_mlm:
                    token_ids, mlm_positions, mlm_targets = mask_text(
                        token_ids, pad_mask, tokenizer, settings.mlm_mask_rate,
                        epoch_rng,
                    )
                out = model(
                    token_ids,
                    pad_mask,
                    images=batch.images,
                    feature_grids=batch.feature_grids,
                    run_cross=run_cross,
                )
                losses = stage_losses(
                    model, out, stage, mlm_positions, mlm_targets, itm_labels,
                    batch.answer_ids if settings.use_vqa else None,
                )
                total = combined_loss(losses)
                optimizer.zero_grad()
                total.backward()
                if settings.grad_clip > 0:
                    nn.utils.clip_grad_norm_(
                        [p for p in model.parameters() if p.requires_grad],
                        settings.grad_clip,
                    )
                optimizer.step()

                last_loss = float(total.detach())
                if step % settings.log_every == 0:
                    log(
                        {
                            "stage": stage,
                            "epoch": epoch,
                            "step": step,
                            "lr": lr,
                            "loss_total": last_loss,
                            "losses": {
                                k: (float(v.detach()) if v is not None else None)
                                for k, v in losses.items()
                            },
                        }
                    )
                step += 1
            last_good = snapshot()
            if stage == "finetune" and val_samples:
                acc = evaluate_answer_accuracy(
                    model, val_samples, tokenizer, answers, settings.batch_size, stage
                )
                log({"stage": stage, "epoch": epoch, "val_accuracy": acc})
                if acc > best_acc:
                    best_acc = acc
                    best_state = last_good
                _set_train_mode(model, stage)
    except (LossNumericsError, RoutingNumericsError) as exc:
        abort_path = None
        if last_good is not None:
            abort_path = ckpt_out
            save_checkpoint(abort_path, last_good, config_snapshot, stage, step)
        if log_f is not None:
            log_f.close()
        term = exc.term if isinstance(exc, LossNumericsError) else "routing"
        raise TrainingDiverged(term, step, abort_path) from exc

    if stage == "finetune" and best_state is not None:
        state = best_state
    else:
        state = snapshot()
    save_checkpoint(ckpt_out, state, config_snapshot, stage, step)
    if log_f is not None:
        log_f.close()

    val_acc = None
    if val_samples:
        load_into_model(model, Checkpoint(state, config_snapshot, stage, step))
        val_acc = evaluate_answer_accuracy(
            model, val_samples, tokenizer, answers, settings.batch_size, stage
        )
    return StageResult(
        stage=stage,
        steps=step,
        final_loss=last_loss,
        val_accuracy=val_acc,
        ckpt_path=ckpt_out,
    )
