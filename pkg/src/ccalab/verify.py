"""Invariant suite over built-in fixtures, run by ``ccalab verify``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .alignment import (AlignmentBatch, CCAHyperparams, DPOPairs, Objective, ResidualEstimator, batch_loss_and_grad,
                        cca_loss, dpo_loss, exact_loss_and_grad, make_negative_batch, nce_loss_and_grad, train,
                        train_nce)
from .guidance import (GuidanceSpec, TabularClassifier, cfg_logits, classifier_guided_sequence_distribution,
                       guided_next_token_distribution, guided_sequence_distribution)
from .metrics import fidelity_and_diversity, kl_divergence, target_tables
from .model import TabularARModel, softmax
from .oracle import (FAMILIES, lambda_vector, make_spec, marginal_x, posterior_table, residual_table,
                     target_distribution, true_model)
from .space import SequenceSpace, decode_prefix, encode_prefix


@dataclass
class CheckResult:
    module: str
    name: str
    passed: bool
    observed: str
    bound: str


def finite_difference_error(params: np.ndarray, value_fn: Callable[[np.ndarray], float], grad: np.ndarray,
                            h: float = 1e-5, entries=None) -> float:
    """Norm-wise relative error of ``grad`` against central differences of ``value_fn``.

    ``value_fn`` receives a perturbed copy of ``params``; ``entries`` limits the
    check to a subset of flat indices (all by default). The denominator has an
    absolute floor of ``1e-8`` so a loss that is constant in the parameters
    (gradient exactly zero) is judged on absolute error instead of rounding noise.
    """
    flat = np.asarray(params, dtype=np.float64).ravel()
    idx = np.arange(flat.size) if entries is None else np.asarray(entries)
    fd = np.empty(idx.size)
    for j, i in enumerate(idx):
        p = flat.copy()
        p[i] += h
        up = value_fn(p.reshape(np.shape(params)))
        p[i] -= 2 * h
        fd[j] = (up - value_fn(p.reshape(np.shape(params)))) / (2 * h)
    g = np.asarray(grad, dtype=np.float64).ravel()[idx]
    return float(np.linalg.norm(fd - g) / max(np.linalg.norm(fd), np.linalg.norm(g), 1e-8))


def model_fd_error(model: TabularARModel, loss_fn: Callable[[TabularARModel], float], grad: np.ndarray,
                   h: float = 1e-5) -> float:
    """:func:`finite_difference_error` over the flat logits of ``model``."""
    def value(logits):
        m = model.copy()
        m.logits[:] = logits
        return loss_fn(m)
    return finite_difference_error(model.logits, value, grad, h)


FIXTURE_SPACES = (SequenceSpace(2, 2, 2), SequenceSpace(3, 2, 3))


def run_checks(corrupt_logit: bool = False) -> list[CheckResult]:
    out: list[CheckResult] = []

    def add(module, name, ok, observed, bound):
        out.append(CheckResult(module, name, bool(ok), observed, bound))

    rng = np.random.default_rng(20240917)

    # core_model
    for space in FIXTURE_SPACES:
        model = TabularARModel.random(space, rng, scale=2.0)
        if corrupt_logit:
            model.block(space.seq_len)[0, 0, 0] = np.inf
        bad = model.normalization_errors(1e-12)
        desc = "all slots" if not bad else f"slot (row={bad[0][0]}, position={bad[0][1]}, prefix={bad[0][2]}) sums to {bad[0][3]!r}"
        add("core_model", f"normalization V={space.vocab_size} N={space.seq_len}", not bad, desc, "|sum-1| <= 1e-12")
        if corrupt_logit:
            continue
        tot = np.exp(model.log_prob_table()).sum(axis=1)
        err = float(np.max(np.abs(tot - 1)))
        add("core_model", f"enumeration/likelihood consistency V={space.vocab_size} N={space.seq_len}", err <= 1e-10,
            f"{err:.2e}", "<= 1e-10")
        n = space.seq_len - 1
        ok = all(encode_prefix(decode_prefix(i, n, space.vocab_size), space.vocab_size) == i
                 for i in range(space.vocab_size**n))
        add("core_model", f"prefix bijection V={space.vocab_size} N={space.seq_len}", ok, "exact" if ok else "mismatch", "identity")

    space = FIXTURE_SPACES[1]
    spec = make_spec("random-dirichlet", space, 3)
    ref = TabularARModel.random(space, rng)
    theta = TabularARModel.random(space, rng)
    toks, conds = spec.sample_pairs(16, rng)
    batch = make_negative_batch((toks, conds), rng)
    worst = 0.0
    for obj in (Objective("cca", CCAHyperparams(beta=0.7, lam=2.0)), Objective("dpo", beta_d=0.5),
                Objective("unlearn", lambda_u=0.1), Objective("mle")):
        _, g = batch_loss_and_grad(theta, ref, batch, obj)
        worst = max(worst, model_fd_error(theta, lambda m: batch_loss_and_grad(m, ref, batch, obj)[0], g))
        _, g = exact_loss_and_grad(theta, ref, spec, obj)
        worst = max(worst, model_fd_error(theta, lambda m: exact_loss_and_grad(m, ref, spec, obj)[0], g))
    r = ResidualEstimator(space, rng.normal(size=(space.num_conditions, space.num_sequences)))
    for data in (spec, batch):
        _, g = nce_loss_and_grad(r, data, lam=2.0)
        worst = max(worst, finite_difference_error(
            r.table, lambda t: nce_loss_and_grad(ResidualEstimator(space, t), data, lam=2.0)[0], g))
    add("core_model", "loss gradients vs central differences", worst < 1e-5, f"{worst:.2e}", "< 1e-5")

    # oracle
    for fam in FAMILIES:
        sp = make_spec(fam, space, 5)
        px = marginal_x(sp).probs
        ident = float(np.max(np.abs((px[None, :] * np.exp(residual_table(sp))).sum(axis=1) - 1)))
        add("oracle", f"change-of-measure identity ({fam})", ident <= 1e-10, f"{ident:.2e}", "<= 1e-10")
        fids = []
        worst_norm = 0.0
        for s in (0.0, 0.5, 1.0, 2.0, 4.0):
            T = target_tables(sp, s)
            worst_norm = max(worst_norm, float(np.max(np.abs(T.sum(axis=1) - 1))))
            fids.append(fidelity_and_diversity(T, sp))
        add("oracle", f"target normalization ({fam})", worst_norm <= 1e-10, f"{worst_norm:.2e}", "<= 1e-10")
        f_ok = all(b[0] >= a[0] - 1e-12 for a, b in zip(fids, fids[1:]))
        d_ok = all(b[2] <= a[2] + 1e-12 for a, b in zip(fids, fids[1:]))
        add("oracle", f"monotone concentration in s ({fam})", f_ok and d_ok,
            f"fidelity {[round(f[0], 4) for f in fids]}", "non-decreasing fidelity, non-increasing diversity")
        post = posterior_table(sp)
        gap = float(np.max(np.abs(np.log(post).T - np.log(sp.p_c)[:, None] - residual_table(sp))))
        add("oracle", f"posterior/residual identity ({fam})", gap <= 1e-12, f"{gap:.2e}", "<= 1e-12")

    # guidance
    worst = 0.0
    for _ in range(100):
        lc, lu = rng.normal(size=4) * 2, rng.normal(size=4) * 2
        s = rng.uniform(0, 4)
        pc, pu = softmax(lc), softmax(lu)
        ref_p = pc ** (1 + s) * pu ** (-s)
        worst = max(worst, float(np.max(np.abs(softmax(cfg_logits(lc, lu, s)) - ref_p / ref_p.sum()))))
    add("guidance", "per-token CFG identity (100 slots)", worst <= 1e-12, f"{worst:.2e}", "<= 1e-12")
    sp1 = make_spec("random-dirichlet", SequenceSpace(4, 1, 3), 7)
    tm = true_model(sp1)
    worst = max(float(np.max(np.abs(guided_sequence_distribution(tm, None, GuidanceSpec("cfg", s), c).probs
                                    - target_distribution(sp1, c, s)[0].probs)))
                for c in range(3) for s in (0.5, 1.0, 2.0))
    add("guidance", "CFG equals target at N=1", worst <= 1e-10, f"{worst:.2e}", "<= 1e-10")
    clf = TabularClassifier.from_posterior(space, posterior_table(spec))
    tm = true_model(spec)
    worst = max(float(np.max(np.abs(classifier_guided_sequence_distribution(tm, clf, s, c).probs
                                    - target_distribution(spec, c, s)[0].probs)))
                for c in range(space.num_conditions) for s in (0.5, 1.0, 2.0))
    add("guidance", "classifier guidance equals target", worst <= 1e-10, f"{worst:.2e}", "<= 1e-10")
    gap = max(kl_divergence(guided_sequence_distribution(tm, None, GuidanceSpec("cfg", 1.0), c),
                            target_distribution(spec, c, 1.0)[0]) for c in range(space.num_conditions))
    add("guidance", "per-token CFG vs sequence target at N=2, s=1", True, f"max KL {gap:.3e}", "reported")

    # alignment
    lam = 3.0
    anchor = abs(cca_loss(ref, ref, batch, CCAHyperparams(beta=0.3, lam=lam)) - (1 + lam) * np.log(2))
    anchor_d = abs(dpo_loss(ref, ref, DPOPairs.from_batch(batch), 0.4) - np.log(2))
    add("alignment", "loss anchors at theta = ref", max(anchor, anchor_d) <= 1e-12,
        f"cca {anchor:.1e}, dpo {anchor_d:.1e}", "<= 1e-12")
    ind = make_spec("independent", space, 2)
    tm = true_model(ind)
    _, g = exact_loss_and_grad(tm, tm, ind, Objective("cca", CCAHyperparams(beta=1.3, lam=1.0)))
    add("alignment", "stationarity at independence", np.max(np.abs(g)) <= 1e-10, f"{np.max(np.abs(g)):.2e}", "<= 1e-10")
    small = SequenceSpace(2, 2, 2)
    sp2 = make_spec("needle", small, 4)
    r = train_nce(small, sp2, steps=20000, lr=10.0, tol=1e-11)
    e = float(np.max(np.abs(r.table - residual_table(sp2))))
    add("alignment", "NCE optimum recovers the residual", e < 1e-3, f"{e:.2e}", "< 1e-3")
    s = 1.0
    tm = true_model(sp2)
    before = tm.logits.copy()
    m, _ = train(tm, Objective("cca", CCAHyperparams(beta=1 / s, lambda_c=lambda_vector(sp2, s))), sp2,
                 steps=3000, lr=4 * s * s, ref=tm, record_every=3000)
    kl = max(kl_divergence(m.distribution(c), target_distribution(sp2, c, s)[0]) for c in range(small.num_conditions))
    add("alignment", "exact CCA recovers the target (s=1)", kl < 1e-6, f"{kl:.2e}", "< 1e-6")
    # one global lambda cannot absorb a condition-dependent normalizer in general
    s2 = 2.0
    tm3 = true_model(spec)
    lc = lambda_vector(spec, s2)
    best_global = min(
        max(kl_divergence(mg.distribution(c), target_distribution(spec, c, s2)[0]) for c in range(space.num_conditions))
        for lam in (float(lc.min()), float(lc.mean()), float(lc.max()))
        for mg in [train(tm3, Objective("cca", CCAHyperparams(beta=1 / s2, lam=lam)), spec, steps=3000, lr=4 * s2 * s2,
                         ref=tm3, record_every=3000)[0]])
    add("alignment", "global lambda vs per-condition lambda_c (s=2)", True,
        f"lambda_c spread {lc.min():.3f}..{lc.max():.3f}; best global-lambda max KL {best_global:.3e}", "reported")
    add("alignment", "reference frozen during training", np.array_equal(before, tm.logits), "bit-identical"
        if np.array_equal(before, tm.logits) else "modified", "bit-identical")

    # eval
    worst = 0.0
    ok = True
    for _ in range(100):
        p, q = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
        k = kl_divergence(p, q)
        ok &= k >= 0 and kl_divergence(p, p) <= 1e-12
    add("eval", "KL non-negative, zero on equal inputs (100 pairs)", ok, "ok" if ok else "violated", ">= 0, = 0 iff equal")
    return out


def format_report(results: list[CheckResult]) -> str:
    w = max(len(f"{r.module}/{r.name}") for r in results)
    lines = [f"{'check':<{w}}  result  observed (bound)"]
    for r in results:
        lines.append(f"{r.module + '/' + r.name:<{w}}  {'INFO' if r.bound == 'reported' else 'PASS' if r.passed else 'FAIL'}    {r.observed} ({r.bound})")
    checks = [r for r in results if r.bound != "reported"]
    n_fail = sum(not r.passed for r in checks)
    lines.append(f"{len(checks) - n_fail}/{len(checks)} checks passed")
    return "\n".join(lines) + "\n"
