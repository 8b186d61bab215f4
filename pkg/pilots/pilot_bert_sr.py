"""Pilot: single-task BERT on SR at K=3, N_T=4, used to set the acceptance threshold."""
import argparse
import json
import time


from tokbeam.channel import TaskSpec, Utility, generate_rayleigh, split_counts, split_samples
from tokbeam.solvers import SolverConfig, label_samples, mrt
from tokbeam.training import TrainConfig, predict, pretrain
from tokbeam.utility import performance_ratio, system_utility

ap = argparse.ArgumentParser()
ap.add_argument("--epochs", type=int, default=30)
ap.add_argument("--lr", type=float, default=2e-4)
ap.add_argument("--lambda2", type=float, default=0.1)
ap.add_argument("--objective", default="pretrain")
ap.add_argument("--batch-size", type=int, default=32)
args = ap.parse_args()
epochs, lr = args.epochs, args.lr
t0 = time.perf_counter()
task = TaskSpec(Utility.SR, 3, 4)
samples = generate_rayleigh(7, task, 5000)
label_samples(samples, [Utility.SR], SolverConfig())
t_label = time.perf_counter() - t0
parts = split_samples(samples, split_counts(len(samples)))
train, val, test = parts["train"], parts["val"], parts["test"]
cfg = TrainConfig(epochs=epochs, lr=lr, seed=0, lambda2=args.lambda2, batch_size=args.batch_size)
ck = pretrain("bert", {Utility.SR: train}, {Utility.SR: val}, cfg, objective=args.objective)
model = ck.build()
w = predict(model, test, Utility.SR)
nn_u = [system_utility(s, wi, "SR") for s, wi in zip(test, w)]
cvx = [system_utility(s, s.labels["SR"], "SR") for s in test]
mrt_u = [system_utility(s, mrt(s), "SR") for s in test]
out = {**vars(args), "best_epoch": ck.epoch, "label_s": t_label,
       "total_s": time.perf_counter() - t0,
       "bert_ratio": performance_ratio(nn_u, cvx), "mrt_ratio": performance_ratio(mrt_u, cvx),
       "val_curve": [round(h["val_ratio"]["SR"], 2) for h in ck.history]}
print(json.dumps(out))
