"""End-to-end acceptance checks; each prints one PASS/FAIL line."""
import csv
import json
import math
import time

import numpy as np
import pytest
from gradcheck import worst_relative_error
from oracles import linear_bridge_oracle

from synbridge.cli import main
from synbridge.config import load_config
from synbridge.dataio import Category, SyntheticSpec, generate_synthetic, sample_episode
from synbridge.distill import CosineClassifier, Projector, distill_loss, vis_objective
from synbridge.fusion import EvalReport, FusionHeads, confidence_interval, fusion_objective
from synbridge.numcore import cosine_similarity, kl_divergence, l2_normalize
from synbridge.pipeline import checksum_inputs
from synbridge.synmine import StubProvider, build_prompts, mine_descriptions
from synbridge.vsbird import (
    BridgeConfig,
    BridgePairset,
    DualAutoencoder,
    bridge_losses,
    bridge_objective,
    final_loss,
    semantic_to_weight,
    total_bridge_loss,
    train_bridge,
)

# first validated run of the bundled config
FUSED_FIXTURE = 68.991111
PROTOTYPE_FIXTURE = 58.093333

STAGES = ["synth-data", "distill", "mine", "bridge", "fuse", "eval"]


@pytest.fixture
def verdict(capsys):
    def report(n, ok, detail):
        with capsys.disabled():
            print(f"\n[ACCEPT {n}] {'PASS' if ok else 'FAIL'} {detail}")
        assert ok, detail

    return report


def cli(*argv):
    code = main(list(argv))
    assert code == 0, f"{argv[0]} exited {code}"


def run_pipeline(workdir, after_stage=None):
    for stage in STAGES:
        cli(stage, "--set", f"run.workdir={workdir}", "--workers", "4")
        if after_stage:
            after_stage(stage)


def outputs(workdir):
    return {
        str(p.relative_to(workdir)): p.read_bytes()
        for sub in ("checkpoints", "reports", "descriptors")
        for p in sorted((workdir / sub).rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def bundled_run(tmp_path_factory):
    workdir = tmp_path_factory.mktemp("bundled") / "work"
    start = time.perf_counter()
    run_pipeline(workdir)
    elapsed = time.perf_counter() - start
    return workdir, elapsed


def random_biases(model, rng):
    for layer in model.layers():
        layer.bias[:] = 0.1 * rng.standard_normal(layer.out_dim)
    return model


def test_1_gradient_suite(verdict):
    start = time.perf_counter()
    worst = {}
    d = 8
    for i in range(20):
        rng = np.random.default_rng([1, i])
        proj = Projector.init(d, d, seed=i)
        clf = CosineClassifier.init(d, tuple(range(5)), seed=i)
        u_s, u_t, text = rng.standard_normal((6, d)), rng.standard_normal((6, d)), rng.standard_normal((5, d))
        labels = rng.integers(0, 5, 6)
        err = worst_relative_error(
            lambda b: sum(vis_objective(proj, clf, u_s, u_t, labels, text, 4.0, b)),
            proj.parameters() + clf.parameters(),
            proj.gradients() + clf.gradients(),
        )
        worst["projector+head"] = max(worst.get("projector+head", 0.0), err)

        # each path isolated on its own encoder/decoder pair
        visual, semantic = rng.standard_normal((3, d)), rng.standard_normal((3, d))
        for path, alpha, enc, dec in [("VV", 1.0, "ve", "vd"), ("SS", 1.0, "se", "sd"),
                                      ("SV", 0.0, "se", "vd"), ("VS", 0.0, "ve", "sd")]:
            model = random_biases(DualAutoencoder.init(d, d, d, seed=100 + i), rng)
            layers = [getattr(model, enc), getattr(model, dec)]
            err = worst_relative_error(
                lambda b: bridge_objective(model, visual, semantic, alpha, b)[0],
                [p for layer in layers for p in layer.parameters()],
                [g for layer in layers for g in layer.gradients()],
            )
            worst[path] = max(worst.get(path, 0.0), err)

        heads = random_biases(FusionHeads.init(d, d, 16, seed=200 + i), rng)
        bridge = random_biases(DualAutoencoder.init(d, d, d, seed=300 + i), rng)
        projector = Projector.init(d, d, seed=400 + i)
        protos = np.array([l2_normalize(r) for r in rng.standard_normal((5, d))])
        descs = np.array([l2_normalize(r) for r in rng.standard_normal((5, d))])
        query, qlabels = rng.standard_normal((10, d)), np.repeat(np.arange(5), 2)
        err = worst_relative_error(
            lambda b: fusion_objective(heads, bridge, projector, protos, descs, query, qlabels, b),
            heads.parameters(),
            heads.gradients(),
        )
        worst["G+R"] = max(worst.get("G+R", 0.0), err)
    elapsed = time.perf_counter() - start
    ok = all(v < 1e-5 for v in worst.values()) and elapsed < 10
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items())
    verdict(1, ok, f"gradient suite, 20 instances each: {detail}; {elapsed:.1f}s")


def test_2_loss_identities(verdict):
    rng = np.random.default_rng(2)
    worst_self = max(
        abs(distill_loss(q, q, tau))
        for q in rng.standard_normal((100, 10))
        for tau in (1.0, 2.0, 4.0, 8.0)
    )
    terms = bridge_losses(DualAutoencoder.init(6, 5, 4, seed=2), rng.standard_normal(6), rng.standard_normal(5))
    lo, hi = total_bridge_loss(terms, 0.0), total_bridge_loss(terms, 1.0)
    worst_linear = max(abs(total_bridge_loss(terms, a) - ((1 - a) * lo + a * hi)) for a in (0.0, 0.25, 0.5, 0.75, 1.0))
    kl_err = abs(kl_divergence(np.array([1.0, 0.0]), np.array([0.5, 0.5])) - math.log(2))
    ok = worst_self < 1e-12 and worst_linear < 1e-12 and kl_err < 1e-12
    verdict(2, ok, f"self-distill {worst_self:.1e}, alpha-linearity {worst_linear:.1e}, KL-ln2 {kl_err:.1e}")


def test_3_bridge_recoverability(verdict):
    start = time.perf_counter()
    losses, cosines = [], []
    for seed in range(10):
        w, t = linear_bridge_oracle(seed)
        pairs = BridgePairset(tuple(range(9)), w[:9], t[:9])
        cfg = BridgeConfig(alpha=0.7, epochs=50, lr=2e-2, latent_dim=128, batch_size=1, seed=seed)
        model = train_bridge(pairs, cfg)
        losses.append(final_loss(model, pairs, 0.7))
        cosines.append(cosine_similarity(semantic_to_weight(model, t[9]), w[9]))
    elapsed = time.perf_counter() - start
    ok = max(losses) < 1e-3 and min(cosines) > 0.9 and elapsed < 30
    verdict(3, ok, f"10 oracle seeds: max loss {max(losses):.1e}, min held-out cosine {min(cosines):.3f}; {elapsed:.1f}s")


def eval_report(workdir):
    (path,) = (workdir / "reports").glob("eval-*.json")
    return json.loads(path.read_text())


def test_4_fusion_benefit(verdict, bundled_run):
    workdir, elapsed = bundled_run
    rep = eval_report(workdir)
    fused, proto = rep["mean_acc"], rep["prototype_mean_acc"]
    ok = (
        rep["episodes"] == 600 and rep["n"] == 5 and rep["k"] == 1
        and fused >= proto + 2.0
        and fused == FUSED_FIXTURE and proto == PROTOTYPE_FIXTURE
        and elapsed < 180
    )
    verdict(4, ok, f"fused {fused:.2f}+-{rep['ci95']:.2f} vs prototype {proto:.2f}+-{rep['prototype_ci95']:.2f}; "
                   f"pipeline {elapsed:.1f}s")


def test_5_alpha_sweep_shape(verdict, bundled_run):
    workdir, _ = bundled_run
    cli("sweep-alpha", "--set", f"run.workdir={workdir}", "--workers", "4")
    (path,) = (workdir / "reports").glob("sweep-*.tsv")
    with path.open() as fh:
        rows = {float(r["alpha"]): r for r in csv.DictReader(fh, delimiter="\t")}
    assert sorted(rows) == [0.0, 0.3, 0.5, 0.7, 0.9, 1.0]
    acc = {a: float(r["visual_dominated_acc"]) for a, r in rows.items()}
    ci = {a: float(r["visual_dominated_ci95"]) for a, r in rows.items()}
    ok = acc[0.0] < max(acc.values()) and acc[1.0] <= acc[0.7] + ci[0.7]
    table = " ".join(f"{a:g}:{v:.2f}" for a, v in sorted(acc.items()))
    verdict(5, ok, f"visual-dominated accuracy by alpha {table}")


def test_6_protocol_conformance(verdict):
    data = generate_synthetic(SyntheticSpec(num_categories=10, samples_per_category=30))
    violations = 0
    for i in range(10_000):
        ep = sample_episode(data.split, data.student_visual, 5, 1, 15, seed=6, index=i)
        s, q = set(ep.support.tolist()), set(ep.query.tolist())
        if len(ep.support) != 5 or len(ep.query) != 75 or len(s) != 5 or len(q) != 75 or s & q:
            violations += 1
    const = EvalReport(5, 1, 15, 600, 0, [0.8] * 600)
    acc = np.random.default_rng(6).uniform(0.3, 1.0, 600)
    ci_err = abs(confidence_interval(acc) - 1.96 * acc.std() / math.sqrt(600))
    ok = violations == 0 and round(const.ci95, 2) == 0.0 and ci_err < 1e-9
    verdict(6, ok, f"{violations} violations in 10000 episodes; constant CI {const.ci95:.2f}; CI formula error {ci_err:.1e}")


def test_7_determinism_and_immutability(verdict, bundled_run, tmp_path):
    first_dir, _ = bundled_run
    second_dir = tmp_path / "work"
    cfg = load_config(overrides=[f"run.workdir={second_dir}"])
    baseline = {}
    changed = []

    def check(stage):
        sums = checksum_inputs(cfg)
        if not baseline:
            baseline.update(sums)
        elif sums != baseline:
            changed.append(stage)

    run_pipeline(second_dir, after_stage=check)
    # the first workdir may also hold sweep artifacts; compare what the second run wrote
    first, second = outputs(first_dir), outputs(second_dir)
    differing = sorted(k for k in second if first.get(k) != second[k])
    ok = not differing and not changed and len(second) > 0
    verdict(7, ok, f"{len(second)} artifacts compared, {len(differing)} differ; inputs changed after {changed or 'no stage'}")


def test_8_prompt_fidelity(verdict, tmp_path):
    p = build_prompts("Robin", "small Old World songbird")
    expected1 = ("small Old World songbird is the definition of the Robin. "
                 "Can you describe the visual features associated with this category?")
    expected2 = ("Please describe the Robin in a maximum of five sentences, focusing on discriminative visual "
                 "features. Make the description more detailed and aligned with scientific facts, avoiding "
                 "general summaries and subjective interpretations.")
    cats = [Category(i, n, f"a bird called {n}") for i, n in enumerate(["Robin", "Wren", "Finch"])]
    first, second = StubProvider(0), StubProvider(0)
    a = mine_descriptions(cats, first, tmp_path)
    b = mine_descriptions(cats, second, tmp_path)
    ok = p.prompt1 == expected1 and p.prompt2 == expected2 and a == b and second.requests == 0
    verdict(8, ok, f"prompts byte-exact={p.prompt1 == expected1 and p.prompt2 == expected2}; "
                   f"requests first run {first.requests}, second run {second.requests}")
