"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""

import time
from statistics import fmean

import numpy as np
import pytest

import oracles
from conftest import FD_TOL, check_grads, record, toy_config, toy_patient
from medrec import autodiff as ad
from medrec.cli import main
from medrec.config import ABLATIONS, build_config
from medrec.data import PatientRecord, Visit, split_dataset
from medrec.layers import LayerNorm, MultiHeadAttention
from medrec.longitudinal import Gate, RecurrentAttentionBlock, encode_sequence
from medrec.metrics import (
    METRICS,
    PatientPrediction,
    VisitPrediction,
    bootstrap_evaluate,
    ddi_rate,
    f1,
    jaccard,
    predict_dump,
    prauc,
    visit_breakdown,
    visit_jaccard,
)
from medrec.model import MedRecModel
from medrec.objective import LossConfig
from medrec.optim import CurriculumContext, OptimizerState, adam_step, effective_lr
from medrec.set_encoder import EmbeddingTables, IsabBlock, SabBlock, SetEncoder, embed_codes, visit_representation
from medrec.synth import SynthConfig, synth_generate
from medrec.train import mean_jaccard, mean_loss, read_loss_trace, training_loop


def _random_visit(rng, sizes=(60, 40, 30)):
    n_diag, n_proc, n_med = sizes
    pick = lambda n, hi: tuple(int(x) for x in rng.choice(n, size=rng.integers(1, hi + 1), replace=False))
    return Visit(pick(n_diag, 6), pick(n_proc, 4), pick(n_med, 8))


# -- 1 ----------------------------------------------------------------------


def _primitive_cases(rng):
    a = ad.parameter(rng.normal(size=(3, 4)))
    b = ad.parameter(rng.normal(size=(4, 3)))
    g, h = ad.parameter(rng.normal(size=4)), ad.parameter(rng.normal(size=4))
    c = ad.parameter(rng.normal(size=3))
    mask = np.array([[False, True, False], [False, False, True], [True, False, False]])
    ops = {
        "add": lambda: ad.add(a, g), "sub": lambda: ad.sub(a, ad.tanh(a)), "mul": lambda: ad.mul(a, a),
        "neg": lambda: ad.neg(a), "scale": lambda: ad.scale(a, -1.3), "shift": lambda: ad.shift(a, 0.2),
        "sigmoid": lambda: ad.sigmoid(a), "tanh": lambda: ad.tanh(a), "relu": lambda: ad.relu(a),
        "log": lambda: ad.log(ad.shift(ad.mul(a, a), 0.1)), "clip": lambda: ad.clip(a, -0.5, 0.5),
        "softmax": lambda: ad.softmax(a), "layer_norm": lambda: ad.layer_norm(a, g, h),
        "matmul": lambda: ad.matmul(a, b), "linear": lambda: ad.linear(a, b, c),
        "concat": lambda: ad.concat([a, ad.transpose(b)], axis=0), "sum": lambda: ad.sum_reduce(a, axis=1),
        "reshape": lambda: ad.reshape(a, (6, 2)), "transpose": lambda: ad.transpose(a),
        "take_rows": lambda: ad.take_rows(a, [1, 1, 0]),
        "attention": lambda: ad.attention(a, ad.transpose(b), ad.tanh(a), heads=2),
        "attention_masked": lambda: ad.attention(a, ad.transpose(b), a, mask=mask),
    }
    return ops, {"a": a, "b": b, "c": c, "g": g, "h": h}


def _block_cases(rng):
    x = ad.parameter(rng.normal(size=(3, 8)))
    y = ad.parameter(rng.normal(size=(3, 8)))
    mha, ln = MultiHeadAttention(8, 2, rng), LayerNorm(8)
    ln.gain.data = rng.normal(size=8)
    isab, sab, enc, gate = IsabBlock(8, 4, 2, rng), SabBlock(8, 2, rng), SetEncoder(8, 4, 2, rng), Gate(8, rng)
    rab = RecurrentAttentionBlock(6, 2, rng)
    rab.initial_state.data = rng.normal(size=(2, 6)) * 2.0
    tokens = [ad.parameter(rng.normal(size=(1, 6))) for _ in range(2)]
    tables = EmbeddingTables(6, 4, 5, 8, rng)
    visit = Visit((0, 4), (1, 3), (2,))

    def seq():
        return ad.concat(encode_sequence(tokens, rab), axis=0)

    def visit_vec():
        return visit_representation(*(e(m) for e, m in zip((enc, enc, enc), embed_codes(visit, (1, 3), tables))))

    return [
        ("mha", lambda: mha(x, y, y), {"x": x, "y": y, **dict(mha.named_parameters())}),
        ("layer_norm", lambda: ln(x), {"x": x, **dict(ln.named_parameters())}),
        ("isab", lambda: isab(x), {"x": x, **dict(isab.named_parameters())}),
        ("sab", lambda: sab(x), {"x": x, **dict(sab.named_parameters())}),
        ("set_encoder", lambda: enc(x), {"x": x, **dict(enc.named_parameters())}),
        ("visit_representation", visit_vec, {**dict(tables.named_parameters()), **dict(enc.named_parameters())}),
        ("gate", lambda: gate(x, y), {"x": x, "y": y, **dict(gate.named_parameters())}),
        ("rab_sequence", seq, {"t0": tokens[0], "t1": tokens[1], **dict(rab.named_parameters())}),
    ]


def _weighted(fn, rng):
    w = ad.Tensor(rng.normal(size=fn().shape))
    return lambda: ad.sum_reduce(ad.mul(fn(), w))


def test_c1_gradient_suite():
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = {}
    ops, tensors = _primitive_cases(rng)
    for name, fn in ops.items():
        errs = check_grads(_weighted(fn, rng), tensors)
        worst[f"op:{name}"] = max(errs.values())
    for name, fn, params in _block_cases(rng):
        errs = check_grads(_weighted(fn, rng), params)
        worst[f"block:{name}"] = max(errs.values())

    model = MedRecModel(toy_config(dim=8, n_inducing=4, n_states=2))
    patient = toy_patient(np.random.default_rng(5), n_diag=6, n_proc=4, n_med=5, visits=2)
    ddi = np.zeros((5, 5))
    ddi[0, 2] = ddi[2, 0] = ddi[1, 4] = ddi[4, 1] = 1.0
    cfg = LossConfig(alpha=0.05)
    errs = check_grads(lambda: model.loss(patient, ddi, cfg), model.state_dict(), max_coords=8, seed=3)
    worst["model:combined_loss"] = max(errs.values())
    elapsed = time.perf_counter() - start

    top = max(worst, key=worst.get)
    ok = worst[top] < FD_TOL and elapsed < 120
    record(1, ok, f"max rel err {worst[top]:.2e} ({top}) over {len(worst)} checks, {elapsed:.1f}s")
    assert worst[top] < FD_TOL, {k: v for k, v in worst.items() if v >= FD_TOL}
    assert elapsed < 120


# -- 2 ----------------------------------------------------------------------


def test_c2_permutation_invariance():
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    cfg = build_config("desk")
    model = MedRecModel(cfg.model_config(60, 40, 30))
    encoders = tuple(model.encoders)
    mismatches = 0
    for _ in range(200):
        v = _random_visit(rng)
        prev = tuple(int(x) for x in rng.choice(30, size=rng.integers(1, 6), replace=False))
        base = visit_representation(*(e(m) for e, m in zip(encoders, embed_codes(v, prev, model.embeddings))))
        shuffled = Visit(tuple(rng.permutation(v.diagnoses)), tuple(rng.permutation(v.procedures)),
                         tuple(rng.permutation(v.medications)))
        prev_shuffled = tuple(int(x) for x in rng.permutation(prev))
        other = visit_representation(*(e(m) for e, m in
                                       zip(encoders, embed_codes(shuffled, prev_shuffled, model.embeddings))))
        mismatches += not np.array_equal(base.data, other.data)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 30
    record(2, ok, f"{200 - mismatches}/200 visits bit-identical under permutation, {elapsed:.1f}s")
    assert mismatches == 0 and elapsed < 30


# -- 3 ----------------------------------------------------------------------


def test_c3_causality_and_prefix():
    start = time.perf_counter()
    rng = np.random.default_rng(303)
    model = MedRecModel(build_config("desk").model_config(60, 40, 30))
    failures = 0
    checks = 0
    for k in range(100):
        visits = tuple(_random_visit(rng) for _ in range(rng.integers(1, 7)))
        full = model.predict(PatientRecord(f"p{k}", visits))
        for t in range(1, len(visits)):
            changed = visits[:t] + (_random_visit(rng),) + visits[t + 1:]
            out = model.predict(PatientRecord(f"p{k}", changed))
            prefix = model.predict(PatientRecord(f"p{k}", visits[:t]))
            failures += not np.array_equal(out[:t], full[:t])
            failures += not np.array_equal(prefix, full[:t])
            checks += 2
    elapsed = time.perf_counter() - start
    ok = failures == 0 and elapsed < 60
    record(3, ok, f"{checks - failures}/{checks} causal and prefix checks bit-exact, {elapsed:.1f}s")
    assert failures == 0 and elapsed < 60


# -- 4 ----------------------------------------------------------------------


def test_c4_metric_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(404)
    worst = 0.0
    for k in range(1000):
        n_med = int(rng.integers(1, 13))
        a = np.triu((rng.random((n_med, n_med)) < 0.3).astype(float), 1)
        a = a + a.T
        visits = []
        for _ in range(rng.integers(1, 6)):
            probs = np.round(rng.random(n_med), 1)  # coarse values force ties
            truth = tuple(np.flatnonzero(rng.random(n_med) < 0.4).tolist())
            pred = tuple(np.flatnonzero(rng.random(n_med) < 0.4).tolist())
            visits.append(VisitPrediction(probs, pred, truth))
        p = PatientPrediction(f"p{k}", tuple(visits))
        worst = max(worst, abs(jaccard(p) - oracles.mean(oracles.jaccard(v.truth, v.predicted) for v in visits)))
        worst = max(worst, abs(f1(p) - oracles.mean(oracles.f1(v.truth, v.predicted) for v in visits)))
        worst = max(worst, abs(ddi_rate(p, a) - oracles.mean(oracles.ddi_rate(v.predicted, a) for v in visits)))
        aps = [oracles.average_precision([int(i in v.truth) for i in range(n_med)], v.probabilities.tolist())
               for v in visits]
        aps = [x for x in aps if x is not None]
        got = prauc(p)
        if aps:
            worst = max(worst, abs(got - oracles.mean(aps)))
        else:
            assert got is None
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-12 and elapsed < 60
    record(4, ok, f"1000 instances, max abs diff {worst:.1e}, {elapsed:.1f}s")
    assert worst <= 1e-12 and elapsed < 60


# -- 5 ----------------------------------------------------------------------


def test_c5_curriculum_schedule():
    start = time.perf_counter()
    rng = np.random.default_rng(505)
    mismatches = clamped = 0
    for _ in range(10_000):
        gamma = float(rng.uniform(1e-5, 1e-1))
        max_iter = int(rng.integers(1, 5000))
        it = int(rng.integers(0, max_iter + 50))
        length = int(rng.integers(1, 40))
        raw = gamma * (1 - (it + length) / max_iter)
        want = raw if it + length <= max_iter else 0.0
        got = effective_lr(gamma, it, length, max_iter)
        mismatches += got != want
        if it + length > max_iter:
            clamped += 1
            mismatches += got != 0.0
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and clamped > 0 and elapsed < 5
    record(5, ok, f"10000 tuples exact, {clamped} clamped to 0, {elapsed:.2f}s")
    assert mismatches == 0 and clamped > 0 and elapsed < 5


# -- 6 ----------------------------------------------------------------------


def test_c6_optimizer():
    start = time.perf_counter()
    theta = {"theta": ad.parameter(np.array([0.0]))}
    state = OptimizerState(lr=1e-3, max_iter=50, moment_mode="literal")
    lr = adam_step(theta, {"theta": np.array([1.0])}, state, CurriculumContext(0, 1))
    mu, eta = state.corrected("theta")
    first_ok = (abs(mu[0] - 1.0) < 1e-15 and abs(eta[0] - 1.0) < 1e-12
                and abs(theta["theta"].data[0] + lr / (1 + 1e-8)) < 1e-18)

    theta = {"theta": ad.parameter(np.array([1.0]))}
    state = OptimizerState(lr=1e-2, max_iter=10**6, moment_mode="standard", curriculum=False)
    steps = None
    for i in range(1000):
        adam_step(theta, {"theta": 2 * theta["theta"].data}, state, CurriculumContext(i, 1))
        if abs(theta["theta"].data[0]) < 1e-3:
            steps = i + 1
            break
    elapsed = time.perf_counter() - start
    ok = first_ok and steps is not None and elapsed < 5
    record(6, ok, f"first step mu=eta=1 {'ok' if first_ok else 'wrong'}; quadratic |theta|<1e-3 after {steps} steps")
    assert first_ok and steps is not None and elapsed < 5


# -- 7 ----------------------------------------------------------------------


@pytest.mark.slow
def test_c7_overfit():
    start = time.perf_counter()
    ds, _ = synth_generate(SynthConfig(n_patients=200, seed=1))
    cfg = build_config("desk", overrides=dict(epochs=100, patience=None))
    model = MedRecModel(cfg.model_config(*ds.vocab.sizes))
    ids = [p.patient_id for p in ds.patients]
    initial = mean_loss(model, ds.patients, ds.ddi, cfg.loss_config())
    training_loop(model, ds, ids, cfg)
    final = mean_loss(model, ds.patients, ds.ddi, cfg.loss_config())
    jac = mean_jaccard(model, ds.patients)
    elapsed = time.perf_counter() - start
    ok = jac >= 0.95 and final < 0.1 * initial and elapsed < 600
    record(7, ok, f"train Jaccard {jac:.4f}, loss {initial:.3f} -> {final:.4f}, {elapsed:.0f}s")
    assert jac >= 0.95 and final < 0.1 * initial and elapsed < 600


# -- 8 ----------------------------------------------------------------------


def _prevalence_baseline(train, test, n_med):
    rows = [np.isin(np.arange(n_med), v.medications) for p in train for v in p.visits]
    chosen = tuple(np.flatnonzero(np.mean(rows, axis=0) > 0.5).tolist())
    return fmean(fmean(visit_jaccard(v.medications, chosen) for v in p.visits) for p in test)


@pytest.mark.slow
def test_c8_generalization():
    start = time.perf_counter()
    model_scores, base_scores = [], []
    for seed in (0, 1, 2):
        ds, _ = synth_generate(SynthConfig(n_patients=600, seed=seed))
        split = split_dataset(ds.patients, (4, 1, 1), seed)
        cfg = build_config("desk", overrides=dict(epochs=8, seed=seed))
        model = MedRecModel(cfg.model_config(*ds.vocab.sizes))
        training_loop(model, ds, split.train, cfg, split.validation)
        test = ds.subset(split.test)
        model_scores.append(fmean(jaccard(p) for p in predict_dump(model, test)))
        base_scores.append(_prevalence_baseline(ds.subset(split.train), test, ds.n_med))
    gap = fmean(model_scores) - fmean(base_scores)
    elapsed = time.perf_counter() - start
    ok = gap >= 0.05 and elapsed < 1800
    record(8, ok, f"test Jaccard {fmean(model_scores):.4f} vs prevalence baseline {fmean(base_scores):.4f} "
                  f"(gap {gap:.4f}), {elapsed:.0f}s")
    assert gap >= 0.05 and elapsed < 1800


# -- 9 ----------------------------------------------------------------------

DDI_EPOCHS = 10
DDI_PATIENTS = 300


@pytest.mark.slow
def test_c9_ddi_control():
    start = time.perf_counter()
    rows = []
    for seed in (0, 1, 2):
        ds, _ = synth_generate(SynthConfig(n_patients=DDI_PATIENTS, ddi_density=0.3, seed=seed))
        split = split_dataset(ds.patients, (4, 1, 1), seed)
        rates = {}
        for alpha in (0.0, 0.5):
            cfg = build_config("desk", overrides=dict(epochs=DDI_EPOCHS, seed=seed, alpha=alpha, patience=None))
            model = MedRecModel(cfg.model_config(*ds.vocab.sizes))
            training_loop(model, ds, split.train, cfg)
            dump = predict_dump(model, ds.subset(split.test))
            rates[alpha] = fmean(ddi_rate(p, ds.ddi) for p in dump)
        rows.append(rates)
    elapsed = time.perf_counter() - start
    ok = all(r[0.5] < r[0.0] for r in rows) and elapsed < 1800
    detail = ", ".join(f"seed {s}: {r[0.0]:.4f} -> {r[0.5]:.4f}" for s, r in enumerate(rows))
    record(9, ok, f"DDI rate alpha 0 -> 0.5: {detail}, {elapsed:.0f}s")
    assert all(r[0.5] < r[0.0] for r in rows) and elapsed < 1800


# -- 10 ---------------------------------------------------------------------


def test_c10_protocol():
    ds, _ = synth_generate(SynthConfig(n_patients=120, seed=10))
    model = MedRecModel(build_config("desk").model_config(*ds.vocab.sizes))
    dump = predict_dump(model, ds.patients)
    report = bootstrap_evaluate(dump, ds.ddi, rounds=10, fraction=0.8, seed=2023)
    doc = report.to_json()
    keys_ok = all(isinstance(doc[f"{m}_mean"], float) and isinstance(doc[f"{m}_std"], float) for m in METRICS)
    shape_ok = report.rounds == 10 and report.sample_size == 96 and len(report.per_round) == 10
    full = bootstrap_evaluate(dump, ds.ddi, rounds=10, fraction=1.0)
    zero_ok = all(full.std[m] == 0.0 for m in METRICS)
    buckets = [row["visit"] for row in visit_breakdown(dump, ds.ddi)]
    ok = keys_ok and shape_ok and zero_ok and buckets == [1, 2, 3, 4, 5]
    record(10, ok, f"mean/std for {len(METRICS)} metrics, std at fraction 1.0 = "
                   f"{max(full.std.values())}, buckets {buckets}")
    assert ok


# -- 11 ---------------------------------------------------------------------


@pytest.mark.slow
def test_c11_ablation_harness(tmp_path, capsys):
    data = tmp_path / "data"
    assert main(["synth", "--out", str(data), "--patients", "60", "--seed", "11"]) == 0
    statuses = {}
    variants = [None, *ABLATIONS]
    for flag in variants:
        name = "base" if flag is None else flag.replace("_", "-")
        out = tmp_path / name
        args = ["train", "--data", str(data), "--out", str(out), "--preset", "desk", "--epochs", "2"]
        if flag is not None:
            args.append("--" + name)
        code = main(args)
        if code == 0:
            code = main(["eval", "--checkpoint", str(out / "checkpoint.npz"), "--data", str(data), "--by-visit"])
        statuses[name] = code
    capsys.readouterr()
    traces = [tmp_path / "base" / "loss_trace_base.csv", tmp_path / "no-aclm" / "loss_trace_no-aclm.csv"]
    shape_trace, flat_trace = (read_loss_trace(p) for p in traces)
    trace_ok = (len(shape_trace) == len(flat_trace) > 0
                and len({lr for *_, lr in flat_trace}) == 1 and shape_trace[-1][3] < shape_trace[0][3])
    ok = all(code == 0 for code in statuses.values()) and trace_ok
    record(11, ok, f"exit codes {statuses}; ACLM/no-ACLM traces {len(shape_trace)} steps each")
    assert ok
