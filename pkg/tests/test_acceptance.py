"""Acceptance suite: nine criteria, each printing one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``; the lines are repeated
in the "acceptance criteria" section of the terminal summary.
"""

import json
import math
import time

import numpy as np
import pytest

from conftest import TINY_CONFIG, artifact_bytes, record_criterion, run_pipeline, write_config
from svdistill.backend import compute_eer
from svdistill.experiments import (FineTuneProtocol, Protocol, World, matched_distance, run_distillation,
                                   run_finetuning, source_model)
from svdistill.network import EncoderConfig, backward, forward, init_params
from svdistill.objectives import (DistillationConfig, asoftmax_ce, composite_loss, emd_cosine, head_outputs,
                                  kld_distill, softmax_ce)
from svdistill.regularizers import (SpReference, l1_sp_penalty, l2_norm_penalty, l2_sp_penalty,
                                    split_l2_sp_penalty)
from svdistill.training import FineTuneConfig

SEEDS = range(5)
H = 1e-5

# student_all models from the distillation run, reused as fine-tuning start points
_SOURCE_MODELS: dict[int, tuple] = {}


def rel_err(analytic, numeric):
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def central_difference(fn, arr, skip=None):
    num = np.zeros_like(arr)
    for i in np.ndindex(arr.shape):
        if skip is not None and skip(i):
            continue
        old = arr[i]
        arr[i] = old + H
        up = fn()
        arr[i] = old - H
        down = fn()
        arr[i] = old
        num[i] = (up - down) / (2 * H)
    return num


# ---------------------------------------------------------------------------
# 1. gradient integrity


def network_error(pooling, conv_context, tap, dcfg, seed) -> float:
    cfg = EncoderConfig(input_dim=3, block_widths=(4, 3), conv_context=conv_context, pooling=pooling,
                        lde_components=2, embedding_dim=3, num_classes=4, embedding_tap=tap)
    rng = np.random.default_rng(seed)
    x = [rng.normal(size=(t, 3)) for t in (5, 6, 4)]
    y = np.array([0, 3, 1])
    t_params = init_params(cfg, 11)
    teacher = head_outputs(forward(t_params, cfg, [rng.normal(size=(9, 3)) for _ in range(3)]))
    t_w = t_params.values["fc2"]["W"]
    p = init_params(cfg, 12)

    def loss():
        out = head_outputs(forward(p, cfg, x))
        return composite_loss(dcfg, out, y, p.values["fc2"]["W"], teacher, t_w, reduction="mean")[0].total

    tr = forward(p, cfg, x)
    _, g = composite_loss(dcfg, head_outputs(tr), y, p.values["fc2"]["W"], teacher, t_w, reduction="mean")
    p.zero_grad()
    backward(p, tr, g.d_logits, g.d_embedding, g.d_hidden)
    if g.d_class_weights is not None:
        p.grads["fc2"]["W"] += g.d_class_weights
    worst = 0.0
    for group, arrs in p.values.items():
        for name, arr in arrs.items():
            if dcfg.class_loss == "asoftmax" and group == "fc2" and name == "b":
                continue  # the angular head ignores the classifier bias
            worst = max(worst, rel_err(p.grads[group][name], central_difference(loss, arr)))
    return worst


def loss_errors() -> dict:
    rng = np.random.default_rng(0)
    z, y = rng.normal(size=(4, 6)), np.array([0, 5, 2, 2])
    out = {"softmax": rel_err(softmax_ce(z, y)[1], central_difference(lambda: softmax_ce(z, y)[0], z))}
    for m in (1, 2):
        w, e = rng.normal(size=(6, 5)), rng.normal(size=(4, 5))
        _, dw, de = asoftmax_ce(w, e, y, m)
        out[f"asoftmax_m{m}"] = max(rel_err(dw, central_difference(lambda: asoftmax_ce(w, e, y, m)[0], w)),
                                    rel_err(de, central_difference(lambda: asoftmax_ce(w, e, y, m)[0], e)))
    t, s = rng.normal(size=(4, 6)), rng.normal(size=(4, 6))
    out["kld"] = rel_err(kld_distill(t, s)[1], central_difference(lambda: kld_distill(t, s)[0], s))
    te, se = rng.normal(size=(4, 5)), rng.normal(size=(4, 5))
    out["emd"] = rel_err(emd_cosine(te, se)[1], central_difference(lambda: emd_cosine(te, se)[0], se))
    return out


def regularizer_errors() -> dict:
    rng = np.random.default_rng(1)

    def model():
        return {"enc": {"W": rng.normal(size=(3, 2)), "b": rng.normal(size=2)},
                "fc1": {"W": rng.normal(size=(2, 2)), "b": rng.normal(size=2)},
                "fc2": {"W": rng.normal(size=(2, 4)), "b": rng.normal(size=4)}}

    w0, w = model(), model()
    ref = SpReference(w0, ("enc", "fc1"), ("fc2",))
    fns = {
        "l2_norm": lambda: l2_norm_penalty(w, 0.3),
        "l2_sp": lambda: l2_sp_penalty(w, ref, 0.3),
        "split_l2_sp": lambda: split_l2_sp_penalty(w, ref, 0.3, 0.05),
        "l1_sp": lambda: l1_sp_penalty(w, ref, 0.3, 0.05),
    }
    out = {}
    for name, fn in fns.items():
        _, grads = fn()
        worst = 0.0
        for g, arrs in grads.items():
            for k, analytic in arrs.items():
                skip = None
                if name == "l1_sp" and g in ref.shared_groups:
                    skip = (lambda i, g=g, k=k: abs(w[g][k][i] - w0[g][k][i]) < 10 * H)
                elif name == "l1_sp":
                    skip = (lambda i, g=g, k=k: abs(w[g][k][i]) < 10 * H)
                num = central_difference(lambda: fn()[0], w[g][k], skip)
                if skip is not None:
                    mask = np.array([not skip(i) for i in np.ndindex(analytic.shape)]).reshape(analytic.shape)
                    worst = max(worst, rel_err(analytic[mask], num[mask]))
                else:
                    worst = max(worst, rel_err(analytic, num))
        out[name] = worst
    return out


def test_criterion_1_gradient_integrity():
    t0 = time.perf_counter()
    errors = {}
    combos = {"class": {}, "class+kld": {"use_kld": True}, "class+emd": {"use_emd": True},
              "all": {"use_kld": True, "use_emd": True}}
    heads = {"softmax": dict(class_loss="softmax"), "asoftmax_m1": dict(class_loss="asoftmax", asoftmax_margin=1),
             "asoftmax_m2": dict(class_loss="asoftmax", asoftmax_margin=2)}
    for pooling, ctx, tap in (("mean", 1, "post"), ("mean", 3, "pre"), ("lde", 3, "post"), ("lde", 1, "pre")):
        for hname, head in heads.items():
            for cname, combo in combos.items():
                dcfg = DistillationConfig(**head, **combo, weight_kld=0.7, weight_emd=1.3)
                errors[f"net[{pooling},ctx{ctx},{tap}] {hname} {cname}"] = network_error(pooling, ctx, tap, dcfg,
                                                                                         len(errors))
    errors.update({f"loss {k}": v for k, v in loss_errors().items()})
    errors.update({f"penalty {k}": v for k, v in regularizer_errors().items()})
    seconds = time.perf_counter() - t0
    worst_name = max(errors, key=errors.get)
    ok = record_criterion(1, errors[worst_name] < 1e-5 and seconds < 120,
                          f"{len(errors)} checks, max rel err {errors[worst_name]:.2e} ({worst_name}), {seconds:.1f}s")
    assert ok


# ---------------------------------------------------------------------------
# 2. loss identities


def test_criterion_2_loss_identities():
    rng = np.random.default_rng(2)
    t = rng.normal(size=(5, 7))
    p = np.exp(t - t.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    entropy = float(-(p * np.log(p)).sum())
    value, grad = kld_distill(t, t.copy())
    kld_ok = abs(value - entropy) <= 1e-12 and np.linalg.norm(grad) < 1e-10

    e = rng.normal(size=(9, 4))
    emd_value = emd_cosine(e, e.copy())[0]
    emd_ok = emd_value == -9.0

    worst = 0.0
    for _ in range(1000):
        n, d = rng.integers(2, 8), rng.integers(2, 6)
        w, x = rng.normal(size=(n, d)), rng.normal(size=(3, d))
        y = rng.integers(0, n, size=3)
        logits = x @ (w / np.linalg.norm(w, axis=1, keepdims=True)).T
        worst = max(worst, abs(asoftmax_ce(w, x, y, 1)[0] - softmax_ce(logits, y)[0]))
    as_ok = worst <= 1e-12
    ok = record_criterion(2, kld_ok and emd_ok and as_ok,
                          f"kld-entropy {abs(value - entropy):.1e}, |grad| {np.linalg.norm(grad):.1e}; "
                          f"emd {emd_value}; asoftmax m=1 worst {worst:.1e}")
    assert ok


# ---------------------------------------------------------------------------
# 3. regularizer identities


def test_criterion_3_regularizer_identities(tmp_path):
    rng = np.random.default_rng(3)
    w0 = {g: {"W": rng.normal(size=(3, 2)), "b": rng.normal(size=2)} for g in ("enc", "fc1", "fc2")}
    at_start = {g: {k: v.copy() for k, v in a.items()} for g, a in w0.items()}
    at_start["fc2"] = {k: np.zeros_like(v) for k, v in w0["fc2"].items()}
    zeros = {g: {k: np.zeros_like(v) for k, v in a.items()} for g, a in w0.items()}
    ref = SpReference(w0, ("enc", "fc1"), ("fc2",))
    zero_ok = (l2_norm_penalty(zeros, 0.1)[0] == 0.0 and l2_sp_penalty(at_start, ref, 0.1)[0] == 0.0
               and split_l2_sp_penalty(at_start, ref, 0.1, 0.01)[0] == 0.0
               and l1_sp_penalty(at_start, ref, 0.1, 0.01)[0] == 0.0)

    w = {g: {k: rng.normal(size=v.shape) for k, v in a.items()} for g, a in w0.items()}
    full = SpReference(w0, ("enc", "fc1", "fc2"), ())
    a, ga = split_l2_sp_penalty(w, full, 0.1, 0.01)
    b, gb = l2_sp_penalty(w, full, 0.1)
    split_ok = a == b and all(np.array_equal(ga[g][k], gb[g][k]) for g in gb for k in gb[g])

    ft = FineTuneConfig(alpha=0.1, beta=0.01)
    cfg = json.loads(json.dumps(TINY_CONFIG))
    cfg["finetune"].update(regularizer="split_l2sp", alpha=0.1, beta=0.01)
    run = run_pipeline(tmp_path / "run", write_config(tmp_path / "c.json", cfg))
    echo = (run["finetuned"] / "config.json").read_text()
    logged = '"alpha": 0.1,' in echo and '"beta": 0.01,' in echo and run["codes"] == [0] * 5
    ok = record_criterion(3, zero_ok and split_ok and logged and (ft.alpha, ft.beta) == (0.1, 0.01),
                          f"zero at minimizers {zero_ok}; split==l2sp {split_ok}; alpha/beta logged {logged}")
    assert ok


# ---------------------------------------------------------------------------
# 4. EER oracle equivalence


def eer_sweep(scores, labels):
    tar = [s for s, y in zip(scores, labels) if y]
    non = [s for s, y in zip(scores, labels) if not y]
    u = sorted(set(scores))
    th = [float(np.nextafter(u[0], -np.inf))] + [(x + y) / 2 for x, y in zip(u, u[1:])] + [u[-1]]
    prev = None
    for k, h in enumerate(th):
        frr = sum(1 for s in tar if s <= h) / len(tar)
        far = sum(1 for s in non if s > h) / len(non)
        g = frr - far
        if g >= 0:
            if g == 0 or k == 0:
                return frr
            frr0, g0 = prev
            return frr0 + (-g0 / (g - g0)) * (frr - frr0)
        prev = (frr, g)
    raise AssertionError("no crossing")


def test_criterion_4_eer_oracle():
    rng = np.random.default_rng(4)
    mismatches = invariance_failures = 0
    for _ in range(1000):
        n = int(rng.integers(2, 501))
        labels = rng.random(n) < rng.uniform(0.05, 0.95)
        labels[0], labels[-1] = True, False  # both classes present
        scores = np.round(rng.normal(size=n) + 2 * rng.random() * labels, int(rng.integers(1, 4)))
        eer = compute_eer(scores, labels)[0]
        mismatches += eer != eer_sweep(scores.tolist(), labels.tolist())
        invariance_failures += (compute_eer(np.exp(scores), labels)[0] != eer
                                or compute_eer(2 * scores + 3, labels)[0] != eer)
    ok = record_criterion(4, mismatches == 0 and invariance_failures == 0,
                          f"1000 sets: {mismatches} oracle mismatches, {invariance_failures} invariance failures")
    assert ok


# ---------------------------------------------------------------------------
# 5. distillation ordering


def test_criterion_5_distillation_ordering():
    t0 = time.perf_counter()
    runs = []
    for seed in SEEDS:
        r = run_distillation(seed, World(), Protocol(), keep_models=True)
        _SOURCE_MODELS[seed] = (r["models"]["student_all"], r["cfg"])
        runs.append(r["eer"])
    seconds = time.perf_counter() - t0
    med = {k: float(np.median([r[k] for r in runs])) for k in runs[0]}
    checks = {
        "baseline<teacher": med["baseline"] < med["teacher"],
        "kld<baseline": med["student_kld"] < med["baseline"],
        "emd<=kld": med["student_emd"] <= med["student_kld"],
        "all<=both": med["student_all"] <= min(med["student_kld"], med["student_emd"]),
        "runtime<=30min": seconds <= 1800,
    }
    failed = [k for k, v in checks.items() if not v]
    detail = ("median EER% " + ", ".join(f"{k}={100 * v:.2f}" for k, v in med.items())
              + f"; {seconds:.0f}s" + (f"; failed: {', '.join(failed)}" if failed else ""))
    ok = record_criterion(5, not failed, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 6. fine-tuning ordering


def source_for(seed):
    if seed not in _SOURCE_MODELS:
        _SOURCE_MODELS[seed] = source_model(seed, World(), Protocol())
    return _SOURCE_MODELS[seed]


def test_criterion_6_finetuning_ordering():
    t0 = time.perf_counter()
    ft = FineTuneProtocol()
    runs = [run_finetuning(seed, *source_for(seed), World(), Protocol(), ft)["eer"] for seed in SEEDS]
    seconds = time.perf_counter() - t0

    def med(row, sel):
        return float(np.median([r[(row, sel)] for r in runs]))

    sels = ft.selections
    checks = {}
    for sel in sels:
        for row in ("l2", "l2sp", "l1sp"):
            checks[f"{row}<=none[{sel}]"] = med(row, sel) <= med("none", sel)
        checks[f"l2sp<=l2[{sel}]"] = med("l2sp", sel) <= med("l2", sel)
    for sel in sels[:-1]:
        checks[f"l2 all>={sel}"] = med("l2", "all") >= med("l2", sel)
    checks["l2sp all<=last2fc"] = med("l2sp", "all") <= med("l2sp", "last2fc")
    checks["runtime<=30min"] = seconds <= 1800
    failed = [k for k, v in checks.items() if not v]
    table = "; ".join(f"{sel}: " + " ".join(f"{row}={100 * med(row, sel):.2f}" for row in ft.rows) for sel in sels)
    detail = (f"median EER% source={100 * np.median([r['source'] for r in runs]):.2f}; {table}; {seconds:.0f}s; "
              f"{len(checks) - len(failed)}/{len(checks)} orderings hold"
              + (f"; failed: {', '.join(failed)}" if failed else ""))
    ok = record_criterion(6, not failed, detail)
    assert ok, detail


# ---------------------------------------------------------------------------
# 7. start-point fidelity


def test_criterion_7_start_point_fidelity():
    results = [matched_distance(seed, *source_for(seed), World(), FineTuneProtocol()) for seed in SEEDS]
    matched = all(r["matched"] for r in results)
    sp = float(np.median([r["l2sp_distance"] for r in results]))
    l2 = float(np.median([r["l2_distance"] for r in results]))
    ok = record_criterion(7, matched and sp < l2,
                          f"median ||W_s - W_s0||: l2sp {sp:.3f} vs l2 {l2:.3f} at task loss within 5% "
                          f"(matched on {sum(r['matched'] for r in results)}/5 seeds)")
    assert ok


# ---------------------------------------------------------------------------
# 8. determinism


def test_criterion_8_determinism(tmp_path):
    cfg = write_config(tmp_path / "c.json")
    a = run_pipeline(tmp_path / "a", cfg, ["--seed", "7"])
    b = run_pipeline(tmp_path / "b", cfg, ["--seed", "7"])
    fa, fb = artifact_bytes(a), artifact_bytes(b)
    differing = sorted(k for k in fa if fa[k] != fb.get(k))
    ok = record_criterion(8, a["codes"] == b["codes"] == [0] * 5 and not differing and fa.keys() == fb.keys(),
                          f"{len(fa)} artifacts compared, {len(differing)} differ"
                          + (f": {', '.join(differing)}" if differing else ""))
    assert ok


# ---------------------------------------------------------------------------
# 9. smoke pipeline


def test_criterion_9_smoke_pipeline(tmp_path):
    t0 = time.perf_counter()
    run = run_pipeline(tmp_path / "smoke", write_config(tmp_path / "c.json"))
    seconds = time.perf_counter() - t0
    report = json.loads((run["eval"] / "report.json").read_text())
    eer = report["eer"]
    ok = record_criterion(9, run["codes"] == [0] * 5 and seconds < 60 and 0.0 <= eer <= 0.5 and not math.isnan(eer),
                          f"exit codes {run['codes']}, {seconds:.1f}s, EER {eer:.3f} "
                          f"({report['n_target']} target / {report['n_nontarget']} nontarget trials)")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
