"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Training criteria run at desk scale (K=3, N_T=4, F=64, L=2, C=4, 5000
samples, P_Max=1, noise 0.1) and take several minutes in total.
"""
import time

import numpy as np
import pytest
import torch

from tokbeam.bert import BertBeamformer, BertConfig, bert_forward
from tokbeam.channel import (CsiSample, TaskSpec, Utility, generate_rayleigh, inject_csi_error,
                             split_counts, split_samples)
from tokbeam.cli import main as cli_main
from tokbeam.datafile import DATA_FILE, MANIFEST_FILE
from tokbeam.losses import loss_finetune, loss_multitask, loss_pretrain, loss_sumloss
from tokbeam.nn.beam import Batch, gpa, make_batch, power_t, utility_t
from tokbeam.nn.checkpoint import tensor_digest
from tokbeam.nn.core import (TransformerEncoderBlock, elu, gelu, grad_check, layer_norm, mha,
                             scaled_dot_attention, softmax, teb_forward)
from tokbeam.solvers import (dinkelbach_ee, label_samples, maxmin_rate, mrt, random_search_all,
                             wmmse_sr)
from tokbeam.training import (TrainConfig, evaluate, evaluate_beamformers, finetune, pretrain)
from tokbeam.ubert import UbertBeamformer, UbertConfig, disable_positional, ubert_forward

pytestmark = pytest.mark.slow

D = torch.float64
TASKS = [u.value for u in Utility]
DESK = {"embed_dim": 64, "depth": 2, "heads": 4}
# single-task recipe chosen from the committed pilot runs (pilots/)
BERT_CFG = TrainConfig(epochs=60, lr=1e-3, lambda2=1.0, seed=0)
UBERT_CFG = TrainConfig(epochs=40, lr=1e-3, seed=0)


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[acceptance {number:>2}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def _gen(seed):
    return torch.Generator().manual_seed(seed)


# ---------------------------------------------------------------- shared data

@pytest.fixture(scope="module")
def desk():
    """5000 labeled K=3, N_T=4 samples, split 80/10/10."""
    samples = generate_rayleigh(7, TaskSpec(Utility.SR, 3, 4), 5000)
    label_samples(samples, list(Utility))
    return split_samples(samples, split_counts(len(samples)))


@pytest.fixture(scope="module")
def bert_run(desk):
    t0 = time.perf_counter()
    ck = pretrain("bert", {"SR": desk["train"]}, {"SR": desk["val"]}, BERT_CFG, DESK)
    return ck, time.perf_counter() - t0


@pytest.fixture(scope="module")
def ubert_runs(desk):
    train = {u: desk["train"] for u in TASKS}
    val = {u: desk["val"] for u in TASKS}
    trace = pretrain("ubert", train, val, UBERT_CFG, DESK, objective="trace")
    summed = pretrain("ubert", train, val, UBERT_CFG, DESK, objective="sumloss")
    return trace, summed


def _mrt_ratio(samples, utility):
    return evaluate_beamformers(samples, [mrt(s) for s in samples], utility).ratio


# ------------------------------------------------------------------ criterion 1

def _with_params(module, names, fn):
    def op(*args):
        extra, values = args[:-len(names)], args[-len(names):]
        saved = {n: module._parameters[n] for n in names}
        try:
            module._parameters.update(zip(names, values))
            return fn(module, *extra)
        finally:
            module._parameters.update(saved)
    return op


def _model_op(model, batch, utility):
    names = [n for n, _ in model.named_parameters()]

    def op(*ps):
        out = torch.func.functional_call(model, dict(zip(names, ps)), (batch, batch.task_ids))
        return utility_t(utility, batch, *out).sum()
    return op, [p.detach().clone() for p in model.parameters()]


def test_criterion_01_gradient_suite(report):
    t0 = time.perf_counter()
    g = _gen(0)
    x = torch.randn(3, 8, generator=g, dtype=D)
    gamma, beta = torch.randn(8, generator=g, dtype=D), torch.randn(8, generator=g, dtype=D)
    blk = TransformerEncoderBlock(8, 2, generator=_gen(1), dtype=D)
    blk_names = [n for n, _ in blk.named_parameters()]
    errs = {
        "layer_norm": grad_check(layer_norm, [x, gamma, beta]),
        "elu": grad_check(elu, [x + torch.sign(x) * 0.05]),
        "gelu": grad_check(gelu, [x]),
        "softmax": grad_check(softmax, [x]),
        "attention": grad_check(scaled_dot_attention, [x[:, :4], x[:, 4:], x.flip(0)]),
        "mha": grad_check(mha, [x, blk.w_q, blk.w_k, blk.w_v, blk.w_o]),
        "teb": grad_check(_with_params(blk, blk_names, lambda m, x: teb_forward(x, m)),
                          [x] + [p.detach() for p in blk.parameters()]),
    }
    ub = UbertBeamformer(UbertConfig(8, 1, 2), _gen(2), D)
    aeb_names = ["w_embedding", "w_s", "w_t", "a", "w_ext"]
    t_a = torch.randn(2, 2, 2, generator=g, dtype=D)
    errs["aeb"] = grad_check(
        _with_params(ub, aeb_names, lambda m, t: torch.cat([r.reshape(-1) for r in m.aeb(t)])),
        [t_a] + [getattr(ub, n).detach() for n in aeb_names])

    samples = generate_rayleigh(8, TaskSpec(Utility.SR, 2, 2), 2)
    label_samples(samples, list(Utility))
    batch = make_batch(samples, tasks=["SR", "EE"])
    sub = Batch(batch.h_re, batch.h_im, batch.noise, batch.p_max)
    w0 = (torch.randn(2, 2, 2, generator=g, dtype=D), torch.randn(2, 2, 2, generator=g, dtype=D))
    lab = batch.labels["SR"]
    errs["loss_pretrain"] = grad_check(lambda r, i: loss_pretrain((r, i), lab, sub, "SR"), list(w0))
    errs["loss_finetune"] = grad_check(lambda r, i: loss_finetune((r, i), sub, "EE"), list(w0))
    errs["loss_multitask"] = grad_check(lambda r, i: loss_multitask((r, i), batch), list(w0))
    errs["loss_multitask_literal"] = grad_check(
        lambda r, i: loss_multitask((r, i), batch, "literal"), list(w0))
    errs["loss_sumloss"] = grad_check(lambda r, i: loss_sumloss((r, i), sub), list(w0))
    primitive_ok = all(v <= 1e-4 for v in errs.values())

    bert = BertBeamformer(BertConfig(2, 8, 1, 2), _gen(3), D)
    e2e = {"bert": grad_check(*_model_op(bert, batch, "SR")),
           "ubert": grad_check(*_model_op(ub, batch, "EE"))}
    e2e_ok = all(v <= 1e-3 for v in e2e.values())
    elapsed = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    report(1, primitive_ok and e2e_ok and elapsed < 60,
           f"worst primitive {worst}={errs[worst]:.2e} (<=1e-4), end-to-end "
           f"bert={e2e['bert']:.2e} ubert={e2e['ubert']:.2e} (<=1e-3), {elapsed:.1f}s (<60s)")


# ------------------------------------------------------------------ criterion 2

def test_criterion_02_feasibility(report):
    rng = np.random.default_rng(0)
    worst_excess, worst_eq, n_proj, total = -np.inf, 0.0, 0, 0
    for kind in ("bert", "ubert"):
        for rep in range(100):
            k, n = int(rng.integers(1, 7)), int(rng.integers(1, 7))
            if kind == "bert":
                model = BertBeamformer(BertConfig(n, 16, 1, 4), _gen(rep), D)
            else:
                model = UbertBeamformer(UbertConfig(16, 1, 4), _gen(rep), D)
            scale = 10.0 ** rng.uniform(-2, 2, size=100)
            h = (rng.normal(size=(100, k, n)) + 1j * rng.normal(size=(100, k, n))) * scale[:, None, None]
            p = rng.uniform(0.1, 5.0, size=100)
            samples = [CsiSample(i, h[i], np.full(k, 0.1), p[i]) for i in range(100)]
            batch = make_batch(samples, tasks=[TASKS[i % 3] for i in range(100)])
            with torch.no_grad():
                raw = model.raw(batch, batch.task_ids)
                out = model(batch, batch.task_ids)
            pw = power_t(*out).numpy()
            raw_norm2 = power_t(*raw).numpy()
            worst_excess = max(worst_excess, float(np.max(pw - p)))
            proj = raw_norm2 >= 1.0
            n_proj += int(proj.sum())
            if proj.any():
                worst_eq = max(worst_eq, float(np.max(np.abs(pw[proj] - p[proj]))))
            total += 100
    # the projection branch must also be exact on synthetic raw matrices
    raw = torch.tensor(rng.normal(size=(1000, 3, 4)), dtype=D) * 5
    out = gpa(raw, raw.flip(-1), torch.full((1000,), 2.0, dtype=D))
    synth_eq = float((power_t(*out) - 2.0).abs().max())
    ok = worst_excess <= 1e-9 and worst_eq <= 1e-6 and synth_eq <= 1e-6 and n_proj > 0
    report(2, ok, f"{total // 2} forwards per model; max power excess {worst_excess:.2e} "
                  f"(<=1e-9); projection-branch |power-P| {max(worst_eq, synth_eq):.2e} over "
                  f"{n_proj} cases (<=1e-6)")


# ------------------------------------------------------------------ criterion 3

def test_criterion_03_equivariance(report):
    rng = np.random.default_rng(1)
    bert = BertBeamformer(BertConfig(4, 16, 2, 4), _gen(0), D)
    ubert = UbertBeamformer(UbertConfig(16, 2, 4), _gen(0), D)
    star = disable_positional(ubert)
    user_err = ant_star = 0.0
    ant_full = []
    for s in generate_rayleigh(2, TaskSpec(Utility.SR, 4, 4), 20):
        perm = rng.permutation(4)
        user_err = max(user_err,
                       np.abs(bert_forward(s.with_users(perm), bert) - bert_forward(s, bert)[perm]).max(),
                       np.abs(ubert_forward(s.with_users(perm), "SR", ubert)
                              - ubert_forward(s, "SR", ubert)[perm]).max())
        ant = rng.permutation(4)
        moved = CsiSample(s.id, s.h[:, ant], s.noise_power)
        ant_star = max(ant_star, np.abs(ubert_forward(moved, "EE", star)
                                        - ubert_forward(s, "EE", star)[:, ant]).max())
        ant_full.append(np.abs(ubert_forward(moved, "EE", ubert)
                               - ubert_forward(s, "EE", ubert)[:, ant]).max())
    ok = user_err <= 1e-9 and ant_star <= 1e-9 and max(ant_full) > 1e-6
    report(3, ok, f"user-permutation err {user_err:.1e} (<=1e-9); no-positional antenna err "
                  f"{ant_star:.1e} (<=1e-9); full UBERT max antenna shift {max(ant_full):.1e} (>1e-6)")


# ------------------------------------------------------------------ criterion 4

def test_criterion_04_oracles(report):
    t0 = time.perf_counter()
    samples = generate_rayleigh(4, TaskSpec(Utility.SR, 2, 2), 200)
    sr_gap, ee_gap, mr_gap, mono = [], [], [], 0.0
    for s in samples:
        ref = random_search_all(s, 10**6, seed=0)
        sr = wmmse_sr(s)
        sr_gap.append(sr.value / ref[Utility.SR][1])
        ee_gap.append(dinkelbach_ee(s).value / ref[Utility.EE][1])
        mr_gap.append(maxmin_rate(s).value / ref[Utility.MR][1])
        mono = min(mono, float(np.min(np.diff(sr.trace))) if len(sr.trace) > 1 else 0.0)
    elapsed = time.perf_counter() - t0
    worst = [100 * min(g) for g in (sr_gap, ee_gap, mr_gap)]
    ok = (worst[0] >= 98 and worst[1] >= 98 and worst[2] >= 95 and mono >= -1e-9
          and elapsed < 900)
    report(4, ok, f"worst per-sample % of random search: SR {worst[0]:.2f} (>=98), EE "
                  f"{worst[1]:.2f} (>=98), MR {worst[2]:.2f} (>=95); min WMMSE step {mono:.1e} "
                  f"(>=-1e-9); {elapsed:.0f}s")


# ------------------------------------------------------------------ criterion 5

def test_criterion_05_bert_single_task(report, desk, bert_run):
    ck, train_s = bert_run
    test = desk["test"]
    ratio = evaluate(ck.build(), test, "SR").ratio
    base = _mrt_ratio(test, "SR")
    ok = ratio >= 92.0 and ratio > base and train_s <= 1800
    report(5, ok, f"BERT SR ratio {ratio:.2f}% (>=92), MRT {base:.2f}%, training {train_s:.0f}s "
                  f"(<=1800s)")


# ------------------------------------------------------------------ criterion 6

def test_criterion_06_user_generalization(report, bert_run):
    model = bert_run[0].build()
    rows = {}
    for k in (2, 3, 4):
        samples = generate_rayleigh(100 + k, TaskSpec(Utility.SR, k, 4), 500)
        label_samples(samples, ["SR"])
        rows[k] = (evaluate(model, samples, "SR").ratio, _mrt_ratio(samples, "SR"))
    ok = all(rows[k][0] > rows[k][1] for k in (2, 4))
    detail = ", ".join(f"K={k}: {r:.2f}% vs MRT {b:.2f}%" for k, (r, b) in rows.items())
    report(6, ok, f"K=3-trained BERT without retraining: {detail}")


# ------------------------------------------------------------------ criterion 7

def test_criterion_07_ubert_multitask(report, desk, ubert_runs):
    trace, summed = ubert_runs
    test = desk["test"]
    m_trace, m_sum = trace.build(), summed.build()
    r_trace = {u: evaluate(m_trace, test, u).ratio for u in TASKS}
    r_sum = {u: evaluate(m_sum, test, u).ratio for u in TASKS}
    ok = all(r_trace[u] >= 85.0 for u in TASKS) and all(r_sum[u] < r_trace[u] for u in TASKS)
    detail = ", ".join(f"{u} {r_trace[u]:.2f}% (sum loss {r_sum[u]:.2f}%)" for u in TASKS)
    report(7, ok, f"UBERT trace loss: {detail}; need >=85 each and sum loss strictly lower")


# ------------------------------------------------------------------ criterion 8

def test_criterion_08_finetune(report, desk, bert_run):
    samples = generate_rayleigh(55, TaskSpec(Utility.SR, 3, 5), 1000)
    label_samples(samples, ["SR"])
    parts = split_samples(samples, split_counts(len(samples)))
    cfg = TrainConfig(epochs=10, lr=BERT_CFG.lr, seed=0)
    train, val = {"SR": parts["train"]}, {"SR": parts["val"]}
    tuned = finetune(bert_run[0], train, val, cfg, reinit_io=True)
    scratch = pretrain("bert", train, val, cfg, DESK, objective="unsupervised")
    r_tuned = evaluate(tuned.build(), parts["test"], "SR").ratio
    r_scratch = evaluate(scratch.build(), parts["test"], "SR").ratio

    pre = bert_run[0]
    cross = finetune(pre, {"EE": desk["train"][:800]}, {"EE": desk["val"]},
                     TrainConfig(epochs=2, lr=1e-3, seed=0), mode="frozen_teb")
    keys = sorted(k for k in pre.state if k.startswith("blocks."))
    frozen = tensor_digest(pre.state[k] for k in keys) == tensor_digest(cross.state[k] for k in keys)
    ok = r_tuned > r_scratch and frozen
    report(8, ok, f"N_T=5 fine-tune {r_tuned:.2f}% vs from scratch {r_scratch:.2f}% "
                  f"(10 epochs each); frozen TEB bit-identical: {frozen}")


# ------------------------------------------------------------------ criterion 9

def test_criterion_09_csi_error(report, bert_run, ubert_runs):
    truth = generate_rayleigh(909, TaskSpec(Utility.SR, 3, 4), 500)
    label_samples(truth, ["SR"])
    out = {}
    for name, model in (("BERT", bert_run[0].build()), ("UBERT", ubert_runs[0].build())):
        for mu in (-25.0, -19.0):
            seen = [inject_csi_error(s, mu, 3) for s in truth]
            out[name, mu] = evaluate(model, seen, "SR", truth=truth).ratio
    ok = all(out[m, -19.0] <= out[m, -25.0] for m in ("BERT", "UBERT"))
    detail = ", ".join(f"{m}: {out[m, -25.0]:.2f}% @-25dB, {out[m, -19.0]:.2f}% @-19dB"
                       for m in ("BERT", "UBERT"))
    report(9, ok, f"SR ratio under CSI error: {detail}")


# ------------------------------------------------------------------ criterion 10

def test_criterion_10_determinism(report, tmp_path, desk):
    for name in ("a", "b"):
        assert cli_main(["gen-data", "--users", "3", "--antennas", "4", "--count", "200",
                         "--seed", "42", "--deterministic", "--out", str(tmp_path / name)]) == 0
    same_data = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
                    for f in (DATA_FILE, MANIFEST_FILE))
    cfg = TrainConfig(epochs=3, lr=1e-3, seed=5, deterministic=True)
    curves = []
    for _ in range(2):
        for kind, tasks in (("bert", ["SR"]), ("ubert", TASKS)):
            ck = pretrain(kind, {u: desk["train"][:400] for u in tasks},
                          {u: desk["val"][:100] for u in tasks}, cfg, DESK)
            curves.append([(h["train_loss"], h["val_loss"]) for h in ck.history])
    same_curves = curves[:2] == curves[2:]
    report(10, same_data and same_curves,
           f"gen-data byte-identical: {same_data}; deterministic loss curves identical: {same_curves}")
