"""Acceptance checks, one per primary criterion.

Each check returns ``(passed, detail)``. Under pytest every check is a test
and a PASS/FAIL line per criterion is printed in the terminal summary; running
this file directly prints the same lines.
"""

import json
import struct
import sys
import warnings
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import oracles  # noqa: E402
from libtools import build_library, f32  # noqa: E402
from spot.analysis import (  # noqa: E402
    cluster_order,
    load_published_fixture,
    oracle_search,
    pearson,
    relative_error_reduction,
)
from spot.errors import (  # noqa: E402
    BadMagicError,
    DuplicateEntryError,
    MissingFileError,
    PathExistsError,
    SchemaError,
    ShapeMismatchError,
    TruncatedPayloadError,
    UnsupportedVersionError,
)
from spot.experiment import Workspace, default_config  # noqa: E402
from spot.library import load_library, read_checkpoint, write_checkpoint  # noqa: E402
from spot.prompt import Prompt, TaskEmbedding, sim_avg_tokens, sim_per_token  # noqa: E402
from spot.retrieval import (  # noqa: E402
    alpha_weights,
    best_of_top_k_plan,
    compose_mixture,
    mixture_rates,
    rank_sources,
    weighted_average_prompt,
)
from spot.toy import (  # noqa: E402
    FrozenToyModel,
    TuningRun,
    extract_task_embedding,
    make_task,
    mean_cross_entropy,
    prompt_gradient,
    select_best_checkpoint,
    tune,
)

RESULTS: dict = {}


def fixture_rer(tmp):
    table = load_published_fixture()
    base = dict(zip(table.targets, table.baseline()))
    quotes = [("MNLI", "CB", 58.9), ("MNLI", "COPA", 29.1), ("ReCoRD", "WSC", 20.0)]
    got = [(s, t, relative_error_reduction(base[t], table.score(s, t)), want) for s, t, want in quotes]
    ok = all(abs(v - want) <= 0.05 for _, _, v, want in got)
    return ok, ", ".join(f"{s}->{t} {v:.3f} (want {w})" for s, t, v, w in got)


def fixture_oracle(tmp):
    res = oracle_search(load_published_fixture())
    ok = abs(res.average - 80.7) <= 0.05 and abs(res.baseline_average - 74.7) <= 0.05
    return ok, f"oracle average {res.average:.3f} (want 80.7), baseline {res.baseline_average:.3f} (want 74.7)"


def metric_oracles(tmp):
    rng = np.random.default_rng(2024)
    worst, props = 0.0, True
    for _ in range(100):
        L, E = (int(x) for x in rng.integers(1, 9, size=2))
        a, b = rng.normal(size=(L, E)), rng.normal(size=(L, E))
        ea, eb = TaskEmbedding(a), TaskEmbedding(b)
        worst = max(
            worst,
            abs(sim_avg_tokens(ea, eb) - oracles.sim_avg_tokens(a.tolist(), b.tolist())),
            abs(sim_per_token(ea, eb) - oracles.sim_per_token(a.tolist(), b.tolist())),
        )
        c = float(rng.uniform(0.01, 100))
        row = int(rng.integers(L))
        scaled = a.copy()
        scaled[row] *= c
        props &= sim_avg_tokens(ea, eb) == sim_avg_tokens(eb, ea)
        props &= sim_per_token(ea, eb) == sim_per_token(eb, ea)
        props &= abs(sim_avg_tokens(TaskEmbedding(c * a), eb) - sim_avg_tokens(ea, eb)) < 1e-9
        props &= abs(sim_per_token(TaskEmbedding(scaled), eb) - sim_per_token(ea, eb)) < 1e-9
        props &= -1.0 <= sim_avg_tokens(ea, eb) <= 1.0 and -1.0 <= sim_per_token(ea, eb) <= 1.0
    return worst <= 1e-12 and props, f"max abs diff {worst:.2e} over 100 pairs; properties hold: {props}"


def alpha_algebra(tmp):
    rng = np.random.default_rng(11)
    worst_sum, worst_scale, worst_avg, nonneg = 0.0, 0.0, 0.0, True
    for _ in range(200):
        k = int(rng.integers(1, 10))
        sims = rng.uniform(-1, 1, size=k)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            w = alpha_weights(sims)
            wc = alpha_weights(sims * float(rng.uniform(0.01, 100)))
        nonneg &= bool(np.all(w >= 0))
        worst_sum = max(worst_sum, abs(w.sum() - 1.0))
        worst_scale = max(worst_scale, float(np.abs(w - wc).max()))
        prompts = [rng.normal(size=(2, 3)) for _ in range(k)]
        pos = np.abs(sims) + 0.01
        out = weighted_average_prompt([(Prompt(p), s) for p, s in zip(prompts, pos)])
        ref = oracles.weighted_sum([p.tolist() for p in prompts], (pos / pos.sum()).tolist())
        worst_avg = max(worst_avg, float(np.abs(out.tokens - np.array(ref)).max()))
    ok = nonneg and worst_sum <= 1e-12 and worst_scale <= 1e-12 and worst_avg <= 1e-12
    return ok, f"sum err {worst_sum:.1e}, scale err {worst_scale:.1e}, weighted-sum err {worst_avg:.1e}"


def mixing_rates(tmp):
    spec = mixture_rates([("mnli", 393000), ("wsc", 554)], cap=2**19)
    r = spec.rates
    exact = abs(r["mnli"] - 393000 / 393554) <= 1e-12 and abs(r["wsc"] - 554 / 393554) <= 1e-12
    total = abs(sum(r.values()) - 1.0) <= 1e-12
    freqs = []
    for sizes in ([("a", 100), ("b", 100)], [("a", 300), ("b", 100), ("c", 600)]):
        mspec = mixture_rates(sizes)
        data = {name: [name] * 3 for name, _ in sizes}
        draws = list(compose_mixture(mspec, data, 10_000, seed=5))
        for name, rate in mspec.rates.items():
            freqs.append(abs(draws.count(name) / 10_000 - rate))
    ok = exact and total and max(freqs) <= 0.02
    return ok, f"rates ({r['mnli']:.5f}, {r['wsc']:.5f}); max frequency deviation {max(freqs):.4f}"


def gradient_fd(tmp):
    rng = np.random.default_rng(99)
    worst = 0.0
    n = 25
    for _ in range(n):
        v, e, c = int(rng.integers(3, 12)), int(rng.integers(2, 6)), int(rng.integers(2, 5))
        m = FrozenToyModel(rng.normal(size=(v, e)), rng.normal(size=(c, e)), rng.normal(size=c))
        tokens = rng.normal(size=(int(rng.integers(1, 4)), e))
        batch = [(rng.integers(v, size=int(rng.integers(1, 6))), int(rng.integers(c))) for _ in range(4)]
        ana = prompt_gradient(m, tokens, batch)
        num = np.zeros_like(tokens)
        h = 1e-5
        for idx in np.ndindex(*tokens.shape):
            up, down = tokens.copy(), tokens.copy()
            up[idx] += h
            down[idx] -= h
            num[idx] = (mean_cross_entropy(m, up, batch) - mean_cross_entropy(m, down, batch)) / (2 * h)
        rel = np.abs(ana - num) / np.maximum(np.maximum(np.abs(ana), np.abs(num)), 1e-8)
        worst = max(worst, float(rel.max()))
    return worst < 1e-4, f"max relative error {worst:.2e} over {n} configurations"


def frozen_contract(tmp):
    cfg = default_config()
    ws = Workspace(cfg)
    before = ws.model.fingerprint()
    fingerprints = []
    src = ws.tune(ws.task("qa-1"), 0, 300)
    fingerprints.append(ws.model.fingerprint())
    ws.tune(ws.task("qa-target"), 1, 100, init=select_best_checkpoint(src).prompt)
    fingerprints.append(ws.model.fingerprint())
    tune(ws.model, TuningRun(ws.task("entailment-2"), steps=50, learning_rate=5.0, seed=3))
    fingerprints.append(ws.model.fingerprint())
    ok = all(f == before for f in fingerprints)
    return ok, f"{len(fingerprints)} tuning runs, fingerprint {before[:12]} unchanged: {ok}"


def toy_transfer(tmp):
    cfg = default_config()
    ws = Workspace(cfg)
    seeds = range(10)
    transferred, baseline = [], []
    for s in seeds:
        src = ws.tune(ws.task("sentiment-0"), s, cfg.source_steps)
        init = select_best_checkpoint(src, cfg.embed_step).prompt
        transferred.append(ws.tune(ws.task("sentiment-target"), s, cfg.target_steps, init=init).final.score)
        baseline.append(ws.tune(ws.task("sentiment-target"), s, cfg.target_steps).final.score)
    wins = 0
    for i in range(10):
        run_seeds = [3 * i, 3 * i + 1, 3 * i + 2]
        same = [extract_task_embedding(ws.tune(ws.task("entailment-0"), s, cfg.embed_step), cfg.embed_step)
                for s in run_seeds]
        other = [extract_task_embedding(ws.tune(ws.task("qa-0"), s, cfg.embed_step), cfg.embed_step)
                 for s in run_seeds]
        within = np.mean([sim_avg_tokens(same[a], same[b]) for a in range(3) for b in range(a + 1, 3)])
        across = np.mean([sim_avg_tokens(a, b) for a in same for b in other])
        wins += within > across
    t_mean, b_mean = float(np.mean(transferred)), float(np.mean(baseline))
    ok = t_mean >= b_mean and wins >= 8
    return ok, f"transfer mean {t_mean:.2f} vs baseline {b_mean:.2f}; clustering holds in {wins}/10 seed sets"


def ranking_oracle(tmp):
    rng = np.random.default_rng(31)
    agree = 0
    for trial in range(50):
        root = tmp / f"lib{trial}"
        root.mkdir()
        n = int(rng.integers(2, 12))
        keys = [(f"task{i}", int(rng.integers(3))) for i in range(n)]
        embs = {k: rng.normal(size=(2, 3)) for k in keys}
        scores = {k: float(rng.integers(0, 6)) * 10 for k in keys}  # ties are common
        lib = build_library(root, embs, scores=scores)
        ranked = rank_sources(TaskEmbedding(rng.normal(size=(2, 3))), lib, "avg")
        plan = best_of_top_k_plan(ranked, len(ranked))
        best = max(plan, key=lambda e: e.validation_score)
        brute = max(scores.values())
        agree += best.validation_score == brute and set(e.key for e in plan) == set(keys)
    return agree == 50, f"{agree}/50 random tables agree with the brute-force oracle"


def statistics(tmp):
    xs = np.linspace(0, 1, 12)
    r1, p1 = pearson(xs, 2 * xs + 1)
    rng = np.random.default_rng(7)
    x = rng.normal(size=50)
    y = 0.25 * x + rng.normal(size=50)
    _, p = pearson(x, y)
    p_perm = oracles.permutation_p_value(x.tolist(), y.tolist(), 10_000, seed=1)
    worst = 0.0
    for _ in range(30):
        a = rng.uniform(-1, 1, size=(6, 6))
        sim = (a + a.T) / 2
        np.fill_diagonal(sim, 1.0)
        ref = oracles.naive_average_linkage((1.0 - sim).tolist())
        worst = max(worst, float(np.abs(np.array(cluster_order(sim).heights) - ref).max()))
    ok = abs(r1 - 1.0) <= 1e-12 and p1 <= 1e-12 and abs(p - p_perm) <= 0.02 and worst <= 1e-12
    return ok, f"r={r1:.12f} p={p1:.1e}; p={p:.4f} vs permutation {p_perm:.4f}; linkage height err {worst:.1e}"


def formats(tmp):
    rng = np.random.default_rng(5)
    lossless = True
    for i in range(50):
        L, E = (int(x) for x in rng.integers(1, 9, size=2))
        p = Prompt(f32(rng.normal(size=(L, E))), f"t{i}", i, 7 * i)
        write_checkpoint(p, tmp / f"{i}.ckpt")
        lossless &= read_checkpoint(tmp / f"{i}.ckpt") == p
    libdir = tmp / "lib"
    libdir.mkdir()
    embs = {(f"t{i}", s): f32(rng.normal(size=(3, 2))) for i in range(4) for s in range(2)}
    lib = build_library(libdir, embs)
    lossless &= all(np.array_equal(lib.embedding(e).tokens, embs[e.key]) for e in lib.entries)
    doc = json.loads((libdir / "manifest.json").read_text())
    lossless &= load_library(libdir).to_json() == doc

    base = tmp / "base.ckpt"
    write_checkpoint(Prompt(np.ones((2, 2)), "x", 0, 1), base)
    good = base.read_bytes()
    cases = {}

    def ckpt_case(name, data, err):
        path = tmp / f"{name}.ckpt"
        path.write_bytes(data)
        try:
            read_checkpoint(path)
            cases[name] = False
        except err:
            cases[name] = True

    ckpt_case("bad-magic", b"NOPE" + good[4:], BadMagicError)
    ckpt_case("version", good[:4] + struct.pack("<I", 9) + good[8:], UnsupportedVersionError)
    ckpt_case("truncated", good[:-3], TruncatedPayloadError)
    ckpt_case("trailing", good + b"\0", SchemaError)
    try:
        write_checkpoint(Prompt([[1.0]]), base)
        cases["exists"] = False
    except PathExistsError:
        cases["exists"] = True

    def manifest_case(name, mutate, err):
        broken = json.loads(json.dumps(doc))
        mutate(broken)
        (libdir / "manifest.json").write_text(json.dumps(broken))
        try:
            load_library(libdir)
            cases[name] = False
        except err:
            cases[name] = True

    manifest_case("duplicate", lambda d: d["entries"].append(d["entries"][0]), DuplicateEntryError)
    manifest_case("missing-file", lambda d: d["entries"][0].update(embedding="gone.ckpt"), MissingFileError)
    manifest_case("shape", lambda d: d.update(L=4), ShapeMismatchError)
    manifest_case("schema", lambda d: d.pop("entries"), SchemaError)
    ok = lossless and all(cases.values())
    failed = [k for k, v in cases.items() if not v]
    return ok, f"round trips lossless: {lossless}; {len(cases) - len(failed)}/{len(cases)} corruption modes mapped" + (
        f" (failed: {failed})" if failed else ""
    )


CRITERIA = [
    ("Fixture RER reproduction", fixture_rer),
    ("Fixture oracle reproduction", fixture_oracle),
    ("Metric oracle equivalence", metric_oracles),
    ("Alpha-weight algebra", alpha_algebra),
    ("Mixing rates", mixing_rates),
    ("Gradient correctness", gradient_fd),
    ("Frozen contract", frozen_contract),
    ("Toy transfer property", toy_transfer),
    ("Ranking/oracle logic", ranking_oracle),
    ("Statistics", statistics),
    ("Formats", formats),
]


def _line(name, ok, detail):
    return f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"


@pytest.mark.parametrize("name,check", CRITERIA, ids=[n for n, _ in CRITERIA])
def test_criterion(name, check, tmp_path):
    ok, detail = check(tmp_path)
    RESULTS[name] = (bool(ok), detail)
    print(_line(name, ok, detail))
    assert ok, detail


if __name__ == "__main__":
    import tempfile

    failures = 0
    for name, check in CRITERIA:
        with tempfile.TemporaryDirectory() as d:
            ok, detail = check(Path(d))
        failures += not ok
        print(_line(name, ok, detail), flush=True)
    sys.exit(1 if failures else 0)
