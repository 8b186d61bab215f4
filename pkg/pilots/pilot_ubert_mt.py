"""Pilot: multi-task UBERT at K=3, N_T=4 (trace loss modes vs Sum Loss)."""
import argparse
import json
import time

from tokbeam.channel import TaskSpec, Utility, generate_rayleigh, split_counts, split_samples
from tokbeam.solvers import label_samples, mrt
from tokbeam.training import TrainConfig, evaluate, evaluate_beamformers, pretrain

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=20)
ap.add_argument("--lr", type=float, default=2e-4)
ap.add_argument("--objective", default="trace")
ap.add_argument("--loss-mode", default="normalized")
ap.add_argument("--count", type=int, default=5000)
ap.add_argument("--aeb-residual", action="store_true")
args = ap.parse_args()

t0 = time.perf_counter()
samples = generate_rayleigh(7, TaskSpec(Utility.SR, 3, 4), args.count)
label_samples(samples, list(Utility))
t_label = time.perf_counter() - t0
parts = split_samples(samples, split_counts(len(samples)))
tasks = [u.value for u in Utility]
cfg = TrainConfig(epochs=args.epochs, lr=args.lr, loss_mode=args.loss_mode, seed=0)
ck = pretrain("ubert", {u: parts["train"] for u in tasks}, {u: parts["val"] for u in tasks}, cfg,
              {"aeb_residual": args.aeb_residual}, objective=args.objective)
model = ck.build()
out = {**vars(args), "best_epoch": ck.epoch, "label_s": t_label,
       "total_s": time.perf_counter() - t0, "ratio": {}, "mrt": {}}
for u in tasks:
    out["ratio"][u] = evaluate(model, parts["test"], u).ratio
    out["mrt"][u] = evaluate_beamformers(parts["test"], [mrt(s) for s in parts["test"]], u).ratio
out["val_curve"] = [{k: round(v, 1) for k, v in h["val_ratio"].items()} for h in ck.history]
print(json.dumps(out))
