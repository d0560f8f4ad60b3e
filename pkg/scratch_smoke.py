"""Calibration run for the end-to-end smoke (not part of the package)."""
import os
import sys
import time

import torch

torch.set_num_threads(min(4, os.cpu_count() or 1))

from capvqa.config import Config, ModelConfig, StageConfig
from capvqa.data import load_manifest, open_dataset
from capvqa.evaluation import EvalOptions, run_grounding_eval
from capvqa.model import build_model
from capvqa.synthetic import SyntheticSpec, generate_dataset
from capvqa.training import train_stage

n_samples = int(sys.argv[1]) if len(sys.argv) > 1 else 800
e1, e2, e3 = (int(x) for x in (sys.argv[2:5] or [3, 1, 5]))

root = "/tmp/smoke_cal"
data = f"{root}/data_{n_samples}"
t0 = time.time()
if not os.path.exists(data):
    generate_dataset(
        SyntheticSpec(n_samples=n_samples, seed=97, val_fraction=0.1), data
    )
print(f"gen: {time.time()-t0:.1f}s", flush=True)

cfg = Config(model=ModelConfig.desk_scale(), seed=13)
cfg.stages = {
    "pretrain1": StageConfig(lr=1e-3, batch_size=32, epochs=e1, log_every=20),
    "pretrain2": StageConfig(lr=1e-3, batch_size=32, epochs=e2, log_every=20),
    "finetune": StageConfig(lr=1e-3, batch_size=32, epochs=e3, log_every=20,
                            use_mlm=False, use_itm=False),
}
model = build_model(cfg.model, seed=cfg.seed)
print("params:", sum(p.numel() for p in model.parameters()), flush=True)

for stage in ("pretrain1", "pretrain2", "finetune"):
    t = time.time()
    res = train_stage(model, stage, cfg, data, f"{root}/{stage}.ckpt")
    print(f"{stage}: {time.time()-t:.1f}s steps={res.steps} "
          f"loss={res.final_loss:.3f} val_acc={res.val_accuracy}", flush=True)

_, tokenizer, answers = open_dataset(data)
val = load_manifest(f"{data}/manifest_val.jsonl")
t = time.time()
reports, acc = run_grounding_eval(
    model, val, tokenizer, answers, EvalOptions(targets=("answer",), sweep=True)
)
rep = reports["answer"]
print(f"eval: {time.time()-t:.1f}s")
print(f"answer accuracy: {acc:.4f}")
print(f"pointing: acc={rep.pointing_accuracy} hits={rep.pointing_hits} "
      f"miss={rep.pointing_misses} skip={rep.pointing_skipped}")
print(f"overlap PRF: {[round(100*v,2) for v in rep.overlap]}")
print(f"iou PRF: {[round(100*v,2) for v in rep.iou]}")
print(f"total: {time.time()-t0:.1f}s")
