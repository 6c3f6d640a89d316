"""Acceptance gate: one recorded PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -s``; the lines are also
collected into the terminal summary of any pytest run.
"""

import math
import time

import numpy as np
import pytest

from diffclip import tensor as T
from diffclip.attention import LambdaParams, compute_lambda, lambda_init_schedule
from diffclip.audit import audit_shape
from diffclip.cli import evaluate_task
from diffclip.data import Corpus, build_corpus, class_names
from diffclip.encoders import toy_configs
from diffclip.evaluate import ClipModel, class_prompts, recall_from_embeddings, write_report, \
    zero_shot_classify
from diffclip.objective import clip_loss
from diffclip.tensor import Tensor
from diffclip.train import TrainConfig, file_sha256, train

from conftest import ACCEPTANCE_LINES
from test_attention import lambda_zero_error, oracle_sweep, row_sum_sweep, schedule_oracle
from test_encoders import end_to_end_rel_error
from test_tensor import GRAD_CASES, grad_case_error

# fixed from the 30-epoch clip baseline run (final epoch mean loss 0.257, seed 0)
LOSS_THRESHOLD = 0.75
VARIANTS = ("clip", "diffclip", "diffclip_star", "diffclip_dagger")
NUM_CLASSES = 20
ELEMENTWISE = {"add", "sub", "mul", "neg", "scale", "exp", "gelu"}


def record(num, title, ok, detail, seconds, budget):
    within = seconds <= budget
    status = "PASS" if ok and within else "FAIL"
    line = f"[{status}] #{num} {title}: {detail} ({seconds:.2f}s / budget {budget:g}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
    assert within, line


def test_1_parameter_overhead_audit():
    t0 = time.perf_counter()
    b16 = audit_shape("b16")
    b16_heads = audit_shape("b16", lambda_per_head=True)
    toy = audit_shape("toy")
    toy_heads = audit_shape("toy", lambda_per_head=True)
    v, _, _ = toy_configs()
    dh2 = v.model_dim // v.num_heads // 2
    per_head_form = v.depth * v.num_heads * 4 * dh2
    ok = (1e-5 <= b16.ratio <= 1e-4
          and toy_heads.extra == toy_heads.closed_form == 2 * per_head_form
          and toy.extra == toy.closed_form
          and b16.extra == b16.closed_form)
    detail = (f"b16 extra={b16.extra} ratio={b16.percent:.5f}% "
              f"(per-head lambdas: {b16_heads.extra}, {b16_heads.percent:.5f}%); "
              f"toy per-head extra={toy_heads.extra} closed form={2 * per_head_form}")
    record(1, "parameter overhead", ok, detail, time.perf_counter() - t0, 1)


def test_2_lambda_schedule():
    t0 = time.perf_counter()
    worst = max(abs(lambda_init_schedule(l) - schedule_oracle(l)) for l in range(1, 25))
    limit = abs(lambda_init_schedule(400) - 0.8)
    z = [Tensor(np.zeros(16)) for _ in range(4)]
    const = float(compute_lambda(LambdaParams(*z, lambda_init=0.8)).data)
    ok = worst < 1e-12 and limit < 1e-12 and const == 0.8
    detail = f"max err l=1..24 {worst:.1e}, |f(400)-0.8|={limit:.1e}, constant lambda={const}"
    record(2, "lambda schedule", ok, detail, time.perf_counter() - t0, 1)


def test_3_differential_attention_oracle():
    t0 = time.perf_counter()
    worst = oracle_sweep(200, seed=101)
    zero = lambda_zero_error(seed=102)
    ok = worst < 1e-10 and zero < 1e-12
    detail = f"200 instances max err {worst:.1e}; lambda=0 vs half-width attention {zero:.1e}"
    record(3, "diff-attention oracle", ok, detail, time.perf_counter() - t0, 10)


def test_4_row_sum_law():
    t0 = time.perf_counter()
    worst = row_sum_sweep(1000, seed=103)
    record(4, "row-sum law", worst < 1e-9, f"1000 configs max |sum - (1-lam)| {worst:.1e}",
           time.perf_counter() - t0, 10)


def test_5_gradient_suite():
    t0 = time.perf_counter()
    seen = set()
    failures = []
    worst = {"elementwise": 0.0, "composite": 0.0}
    for name in sorted(GRAD_CASES):
        err, ops = grad_case_error(name)
        seen |= ops
        kind = "elementwise" if name in ELEMENTWISE else "composite"
        tol = 1e-5 if kind == "elementwise" else 1e-4
        worst[kind] = max(worst[kind], err)
        if not err < tol:
            failures.append(f"{name}={err:.1e}")
    e2e = {v: end_to_end_rel_error(v) for v in ("diffclip", "clip")}
    missing = set(T.OPS) - seen
    ok = not failures and not missing and all(e < 1e-4 for e in e2e.values())
    detail = (f"{len(GRAD_CASES)} op cases, elementwise max {worst['elementwise']:.1e}, "
              f"composite max {worst['composite']:.1e}, 2-layer diffclip loss "
              f"{e2e['diffclip']:.1e}, clip loss {e2e['clip']:.1e}"
              + (f"; failing {failures}" if failures else "")
              + (f"; ops without a case {sorted(missing)}" if missing else ""))
    record(5, "gradient suite", ok, detail, time.perf_counter() - t0, 120)


def test_6_loss_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(104)

    def loss(s):
        return float(clip_loss(Tensor(s)).data)

    worst = 0.0
    for _ in range(300):
        n = int(rng.integers(2, 9))
        s = rng.normal(size=(n, n)) * rng.uniform(0.1, 10)
        perm = rng.permutation(n)
        base = loss(s)
        worst = max(worst,
                    abs(loss(np.full((n, n), rng.normal() * 5)) - math.log(n)),
                    abs(loss(s[np.ix_(perm, perm)]) - base),
                    abs(loss(s.T) - base),
                    abs(loss(s + rng.uniform(-20, 20)) - base))
    single = loss(np.array([[rng.normal()]]))
    ok = worst < 1e-10 and single == 0.0
    detail = f"300 draws, 2<=N<=8: max deviation {worst:.1e}; N=1 loss {single}"
    record(6, "loss properties", ok, detail, time.perf_counter() - t0, 10)


class _Identity:
    def __init__(self, n):
        self.n = n

    def encode_images(self, images):
        return np.eye(self.n)[np.asarray(images, dtype=np.int64)]

    def encode_texts(self, captions):
        return np.eye(self.n)[[_CLASS_OF[c] for c in captions]]


_CLASS_OF = {p: i for i, group in enumerate(class_prompts(class_names())) for p in group}


class _Random:
    def __init__(self, seed):
        self.rng = np.random.default_rng(seed)

    def _unit(self, n):
        x = self.rng.normal(size=(n, 32))
        return x / np.linalg.norm(x, axis=1, keepdims=True)

    def encode_images(self, images):
        return self._unit(len(images))

    def encode_texts(self, captions):
        return self._unit(len(captions))


def test_9_protocol_sanity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(105)
    n = 100
    notes = []
    ok = True
    for k in (1, 5, 10):
        p = k / n
        sigma = math.sqrt(p * (1 - p) / n)
        a = rng.normal(size=(n, 16))
        b = rng.normal(size=(n, 16))
        r = recall_from_embeddings(a / np.linalg.norm(a, axis=1, keepdims=True),
                                   b / np.linalg.norm(b, axis=1, keepdims=True), ks=(k,))
        for key, val in r.items():
            ok &= abs(val - p) <= 3 * sigma
        notes.append(f"R@{k}={r[f'i2t_recall@{k}']:.2f}/{r[f't2i_recall@{k}']:.2f}")
    a, b = rng.normal(size=(n, 16)), rng.normal(size=(n, 16))
    mono = recall_from_embeddings(a / np.linalg.norm(a, axis=1, keepdims=True),
                                  b / np.linalg.norm(b, axis=1, keepdims=True),
                                  ks=(1, 5, 10, 50, 100))
    seq = [mono[f"i2t_recall@{k}"] for k in (1, 5, 10, 50, 100)]
    ok &= seq == sorted(seq) and seq[-1] == 1.0
    e = np.eye(n)
    ident = recall_from_embeddings(e, e, ks=(1,))
    ok &= ident["i2t_recall@1"] == ident["t2i_recall@1"] == 1.0

    m = 2000
    labels = rng.integers(NUM_CLASSES, size=m)
    prompts = class_prompts(class_names())
    chance = zero_shot_classify(_Random(106), np.zeros(m), prompts, labels).accuracy
    sigma = math.sqrt((1 / NUM_CLASSES) * (1 - 1 / NUM_CLASSES) / m)
    ok &= abs(chance - 1 / NUM_CLASSES) <= 3 * sigma
    rigged = zero_shot_classify(_Identity(NUM_CLASSES), labels, prompts, labels).accuracy
    ok &= rigged == 1.0
    detail = (f"random N=100 {' '.join(notes)}, monotone={seq == sorted(seq)}, identity R@1=1.0; "
              f"zero-shot random {chance:.3f} vs {1 / NUM_CLASSES:.3f}+-{3 * sigma:.3f}, "
              f"rigged {rigged}")
    record(9, "protocol sanity", bool(ok), detail, time.perf_counter() - t0, 60)


# -- toy training (criteria 7 and 8) ----------------------------------------------------

def _train_and_eval(variant, corpus, out_dir):
    cfg = TrainConfig(variant=variant, epochs=30, batch_size=64, seed=0, out_dir=str(out_dir))
    res = train(cfg, corpus)
    model = ClipModel(res.model, corpus.vocab)
    metrics = evaluate_task(model, corpus, "zeroshot", "test")
    report = out_dir / "eval_zeroshot.txt"
    write_report(report, metrics)
    # reported for context only; the criterion is judged on the test split
    metrics["val_accuracy"] = evaluate_task(model, corpus, "zeroshot", "val")["zeroshot_accuracy"]
    return res, metrics, report


@pytest.fixture(scope="module")
def toy_runs(tmp_path_factory):
    root = tmp_path_factory.mktemp("acceptance")
    t0 = time.perf_counter()
    build_corpus(root / "corpus", 4000, seed=0)
    corpus = Corpus(root / "corpus")
    runs = {}
    for variant in VARIANTS:
        runs[variant] = _train_and_eval(variant, corpus, root / variant)
    train_seconds = time.perf_counter() - t0
    t1 = time.perf_counter()
    rerun = _train_and_eval("diffclip", corpus, root / "diffclip_rerun")
    rerun_seconds = time.perf_counter() - t1
    return runs, rerun, train_seconds, rerun_seconds


@pytest.mark.slow
def test_7_toy_training(toy_runs):
    runs, _, seconds, _ = toy_runs
    floor = 3.0 / NUM_CLASSES
    parts = []
    ok = True
    for variant, (res, metrics, _) in runs.items():
        acc = metrics["zeroshot_accuracy"]
        ok &= res.final_loss < LOSS_THRESHOLD and acc >= floor
        parts.append(f"{variant} loss {res.step_losses[0]:.3f}->{res.final_loss:.3f} "
                     f"test zs {acc:.3f} (val {metrics['val_accuracy']:.3f})")
    detail = f"threshold {LOSS_THRESHOLD}, zs floor {floor:.2f}; " + "; ".join(parts)
    record(7, "toy training", bool(ok), detail, seconds, 1800)


@pytest.mark.slow
def test_8_determinism(toy_runs):
    runs, (res2, _, report2), _, seconds = toy_runs
    res1, _, report1 = runs["diffclip"]
    same = {
        "checkpoint": file_sha256(res1.checkpoint) == file_sha256(res2.checkpoint),
        "metrics": file_sha256(res1.metrics) == file_sha256(res2.metrics),
        "eval": file_sha256(report1) == file_sha256(report2),
    }
    detail = "diffclip rerun byte-identical: " + ", ".join(f"{k}={v}" for k, v in same.items())
    record(8, "determinism", all(same.values()), detail, seconds, 1800)
