"""Throwaway convergence probe for the two-phase toy run."""
import argparse
import time
from types import SimpleNamespace

import numpy as np

from peft_forge import model as pm
from peft_forge.data import make_epoch_batches, render_example
from peft_forge.lora import LoraConfig, lora_init
from peft_forge.optim import (AdamConfig, GradAccumulator, OptState, accumulate,
                              adam8_step, clip_global_norm, lr_at)
from peft_forge.providers import generate_corpus

ap = argparse.ArgumentParser()
ap.add_argument("--lr", type=float, default=5e-2)
ap.add_argument("--rank", type=int, default=8)
ap.add_argument("--alpha", type=float, default=16.0)
ap.add_argument("--init-std", type=float, default=0.02)
ap.add_argument("--head-std", type=float, default=0.0625)
ap.add_argument("--emb-std", type=float, default=0.125)
ap.add_argument("--phase-a-only", action="store_true")
ap.add_argument("--records", type=int, default=512)
args = ap.parse_args()

pm.HEAD_INIT_STD = args.head_std

t0 = time.time()
cfg = pm.mini_advisor_config(seed=11)

# patch embedding std via draw-order monkeypatch
orig_order = pm.base_weight_order
def patched_order(config):
    entries = orig_order(config)
    return [(n, s, args.emb_std if n == "embed" else std) for n, s, std in entries]
pm.base_weight_order = patched_order

mdl = pm.model_init(cfg)
recs = generate_corpus(args.records, seed=42)
examples = [render_example(r, cfg.context_len) for r in recs]
lcfg = LoraConfig(rank=args.rank, alpha=args.alpha, init_std=args.init_std, seed=7)
adapters = lora_init(mdl.shape, lcfg)
params = {}
for (layer, target), ad in adapters.items():
    params[(layer, target, "a")] = ad.a
    params[(layer, target, "b")] = ad.b
state = OptState.init(params)

losses = []


def run_phase(pdb, accum, epochs, seed, total_steps, label):
    prof = SimpleNamespace(per_device_batch=pdb, grad_accum=accum, devices=1)
    acfg = AdamConfig(peak_lr=args.lr, warmup_steps=10, total_steps=total_steps,
                      max_grad_norm=1.0)
    step = 0
    for epoch in range(epochs):
        for micros in make_epoch_batches(examples, prof, epoch, seed):
            acc = GradAccumulator(target_micro=accum)
            step_losses = []
            for mb in micros:
                out, tape = pm.forward_loss(mdl, adapters, mb.tokens, mb.label_mask)
                grads = pm.backward_lora(mdl, adapters, tape, loss_scale=1.0 / accum)
                accumulate(acc, grads)
                step_losses.append(out.loss)
            clipped, norm = clip_global_norm(acc.sums, acfg.max_grad_norm)
            step += 1
            lr = lr_at(step - 1, acfg)
            adam8_step(params, clipped, state, acfg, lr)
            losses.append(np.mean(step_losses))
            if step % 16 == 0 or step == 1:
                print(f"{label} step {step:3d} loss {losses[-1]:.4f} norm {norm:.3f} "
                      f"lr {lr:.2e} [{time.time()-t0:.0f}s]")


n = len(examples)
run_phase(2, 4, 1, seed=100, total_steps=n // 8, label="A")
if not args.phase_a_only:
    run_phase(4, 8, 2, seed=200, total_steps=2 * (n // 32), label="B")

losses = np.array(losses)
ma0, ma1 = losses[:20].mean(), losses[-20:].mean()
bnorm = np.sqrt(np.mean([float((ad.b.astype(np.float64)**2).mean()) for ad in adapters.values()]))
anorm = np.sqrt(np.mean([float((ad.a.astype(np.float64)**2).mean()) for ad in adapters.values()]))
print(f"\ncfg lr={args.lr} r={args.rank} a={args.alpha} init={args.init_std} "
      f"head={args.head_std} emb={args.emb_std}")
print(f"initial MA20 {ma0:.4f}  final MA20 {ma1:.4f}  ratio {ma1/ma0:.3f}")
print(f"rms(B) {bnorm:.3f} rms(A) {anorm:.3f}  steps {losses.size} wall {time.time()-t0:.0f}s")
