"""Ablation: can the model fit the training set? (diagnosis only)"""
import sys
import time

import numpy as np
import torch

torch.set_num_threads(2)

from capvqa.config import Config, ModelConfig, StageConfig
from capvqa.data import load_manifest, open_dataset, iterate_batches
from capvqa.model import build_model
from capvqa.training import evaluate_answer_accuracy, build_optimizer, stage_losses, warmup_linear
from capvqa.crossmodal import combined_loss

mode = sys.argv[1] if len(sys.argv) > 1 else "base"
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 30
lr = float(sys.argv[3]) if len(sys.argv) > 3 else 1e-3

data = "/tmp/smoke_cal/data12_600"
_, tok, ans = open_dataset(data)
train = load_manifest(f"{data}/manifest_train.jsonl")
val = load_manifest(f"{data}/manifest_val.jsonl")

cfg = Config(model=ModelConfig.desk_scale(), seed=13)
model = build_model(cfg.model, seed=13)

if mode == "beta_u":
    with torch.no_grad():
        model.routing.beta_u.fill_(3.0)
elif mode == "lambda_small":
    model.routing.inverse_temperatures = torch.tensor([0.25, 0.5, 1.0], dtype=torch.float64)

settings = StageConfig(lr=lr, batch_size=32, epochs=epochs, use_mlm=False, use_itm=False)
opt = build_optimizer(model.parameters(), settings)
steps_total = ((len(train) + 31) // 32) * epochs
fac = warmup_linear(steps_total, 0.1)
step = 0
t0 = time.time()
for epoch in range(epochs):
    model.train()
    rng = np.random.default_rng(13 + epoch)
    for batch in iterate_batches(train, tok, ans, 32, rng):
        for g in opt.param_groups:
            g["lr"] = settings.lr * fac(step)
        out = model(batch.token_ids, batch.pad_mask, images=batch.images)
        losses = stage_losses(model, out, "finetune", None, None, None, batch.answer_ids)
        loss = combined_loss(losses)
        opt.zero_grad(); loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        opt.step(); step += 1
    if (epoch + 1) % 5 == 0 or epoch == epochs - 1:
        tr = evaluate_answer_accuracy(model, train[:300], tok, ans, 32, "finetune")
        va = evaluate_answer_accuracy(model, val, tok, ans, 32, "finetune")
        g = model.capsule_grid(model.embed_image(
            next(iterate_batches(val[:8], tok, ans, 8)).images))
        print(f"[{mode}] ep{epoch+1} loss={float(loss):.3f} train={tr:.3f} val={va:.3f} "
              f"act_mean={g.activations.mean():.4f} act_std={g.activations.std():.5f} "
              f"({time.time()-t0:.0f}s)", flush=True)
