"""Acceptance gate: eight criteria, each printing one PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` to see the verdicts; criterion 6
trains ten models and takes a few minutes on one core.
"""

import math
import time

import numpy as np
import pytest

from semb import tensor as T
from semb.cli import main
from semb.data import (
    Dataset,
    FeatureFileError,
    generate_corpus,
    read_features,
    split_speakers,
    write_features,
)
from semb.encoder import PARAM_NAMES, EncoderConfig, FeatureSequence, embed, init_params
from semb.evaluation import TrialSet, eer, roc, si_task
from semb.experiment import EvalPlan, run_comparison
from semb.losses import compute_prototypes, distance_matrix, pnl_batch, select_semihard, tl_batch_naive, tl_batch_semihard
from semb.sampler import EpisodeSpec
from semb.trainer import CheckpointError, TrainConfig, checkpoint_load, checkpoint_save

import oracles
from gradcheck import numeric_grad, rel_error


@pytest.fixture
def verdict(capsys):
    def report(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title} ({detail})"
        with capsys.disabled():
            print("\n" + line)
        assert ok, line

    return report


# --------------------------------------------------------------------------
# 1. gradient correctness


def _op_cases(rng):
    """(name, fn, input arrays) with fn mapping tensors to a tensor."""
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    x, y = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    v = rng.normal(size=4)
    away = np.where(np.abs(x) < 0.1, 0.5, x)  # keep relu off its kink
    rows, cols = [2, 0, 0], [1, 3, 0]
    return [
        ("matmul", T.matmul, [a, b]),
        ("affine", T.affine, [a, b, rng.normal(size=2)]),
        ("transpose", T.transpose, [x]),
        ("add", T.add, [x, y]),
        ("sub", T.sub, [x, y]),
        ("mul", T.mul, [x, y]),
        ("scale", lambda t: T.scale(t, -1.7), [x]),
        ("add_scalar", lambda t: T.add_scalar(t, 0.3), [x]),
        ("tanh", T.tanh, [x]),
        ("sigmoid", T.sigmoid, [x]),
        ("relu", T.relu, [away]),
        ("reshape", lambda t: T.reshape(t, (4, 3)), [x]),
        ("stack", lambda p, q: T.stack([p, q]), [x, y]),
        ("concat", lambda p, q: T.concat(p, q, axis=-1), [x, y]),
        ("concat_rows", lambda p, q: T.concat(p, q, axis=0), [x, y]),
        ("slice_axis", lambda t: T.slice_axis(t, 1, 3, axis=-1), [x]),
        ("take_rows", lambda t: T.take_rows(t, [2, 0, 2]), [x]),
        ("gather", lambda t: T.gather(t, rows, cols), [x]),
        ("sum", T.sum, [x]),
        ("mean_over_time", T.mean_over_time, [x]),
        ("logsumexp_rows", T.logsumexp_rows, [x]),
        ("l2_normalize", T.l2_normalize, [v]),
        ("l2_normalize_rows", T.l2_normalize, [x]),
        ("pairwise_sq_euclidean", T.pairwise_sq_euclidean, [x, y]),
        ("pairwise_cosine_distance", T.pairwise_cosine_distance, [x, y]),
        ("cosine_distance", T.cosine_distance, [v, rng.normal(size=4)]),
    ]


def _op_error(fn, arrays, rng):
    probe = None

    def scalar_of(*tensors):
        nonlocal probe
        out = fn(*tensors)
        if probe is None:
            probe = rng.normal(size=out.shape)
        return T.sum(T.mul(out, T.Tensor(probe))) if out.shape else out

    leaves = [T.Tensor(np.array(a, dtype=float), requires_grad=True) for a in arrays]
    T.backward(scalar_of(*leaves))
    worst = 0.0
    for k, arr in enumerate(arrays):
        def f(z, k=k):
            return scalar_of(*[T.Tensor(z if j == k else arrays[j]) for j in range(len(arrays))]).item()

        worst = max(worst, rel_error(leaves[k].grad, numeric_grad(f, arr, 1e-5)))
    return worst


def _encoder_paths():
    def pnl(dist):
        def loss(leaves, seqs, labels):
            emb = embed(leaves, seqs)
            n = len(seqs) // 2
            return pnl_batch(T.slice_axis(emb, 0, n, axis=0), labels[:n], T.slice_axis(emb, n, len(seqs), axis=0), labels[n:], dist)

        return loss

    def tl(fn):
        # margin wide enough that every hinge stays active under perturbation
        return lambda leaves, seqs, labels: fn(embed(leaves, seqs), labels, 3.0, "euc")

    return {"pnl-euc": pnl("euc"), "pnl-cos": pnl("cos"), "tl-naive": tl(tl_batch_naive), "tl-semi": tl(tl_batch_semihard)}


def _encoder_error(seed, loss_fn):
    rng = np.random.default_rng(seed)
    hidden, dim, steps = int(rng.integers(1, 5)), 2, int(rng.integers(2, 7))
    params = init_params(EncoderConfig(dim, hidden, 3, seed=seed))
    labels = [0, 1, 2, 0, 1, 2]
    seqs = [FeatureSequence(rng.normal(size=(steps, dim)), s) for s in labels]
    leaves = params.leaves()
    T.backward(loss_fn(leaves, seqs, labels))
    worst = 0.0
    for name in PARAM_NAMES:
        def f(z, name=name):
            consts = params.constants()
            consts[name] = T.Tensor(z)
            return loss_fn(consts, seqs, labels).item()

        worst = max(worst, rel_error(leaves[name].grad, numeric_grad(f, params.arrays[name], 1e-5)))
    return worst


def test_c1_gradient_correctness(verdict):
    start = time.perf_counter()
    worst_op, worst_path = ("", 0.0), ("", 0.0)
    for seed in range(10):
        rng = np.random.default_rng(seed)
        for name, fn, arrays in _op_cases(rng):
            err = _op_error(fn, arrays, rng)
            worst_op = max(worst_op, (name, err), key=lambda t: t[1])
        for name, loss_fn in _encoder_paths().items():
            err = _encoder_error(seed, loss_fn)
            worst_path = max(worst_path, (name, err), key=lambda t: t[1])
    elapsed = time.perf_counter() - start
    ok = worst_op[1] < 1e-4 and worst_path[1] < 1e-4 and elapsed < 30
    detail = (
        f"worst op {worst_op[0]} {worst_op[1]:.2e}, worst path {worst_path[0]} {worst_path[1]:.2e}, "
        f"{elapsed:.1f}s"
    )
    verdict(1, "finite-difference gradients", ok, detail)


# --------------------------------------------------------------------------
# 2. loss oracles


def test_c2_loss_oracle_equivalence(verdict):
    rng = np.random.default_rng(2024)
    worst_naive = worst_pnl = 0.0
    selection_mismatches = 0
    for i in range(100):
        n = int(rng.integers(2, 13))
        dist = "euc" if i % 2 == 0 else "cos"
        labels = rng.integers(0, int(rng.integers(2, 5)), size=n).tolist()
        if len(set(labels)) < 2:
            labels[0] = labels[1] + 1
        emb = rng.normal(size=(n, 4))
        emb /= np.linalg.norm(emb, axis=1, keepdims=True)
        if oracles.triplets(labels):
            got = tl_batch_naive(emb, labels, 0.2, dist).item()
            worst_naive = max(worst_naive, abs(got - oracles.naive_tl(emb, labels, 0.2, dist)))
        d = distance_matrix(emb, emb, dist).data
        selection_mismatches += select_semihard(d, labels) != oracles.semihard_selection(emb, labels, dist)
        # PNL: first occurrence of each label as support, every item as query
        support_idx = sorted({labels.index(c) for c in set(labels)} | set(range(0, n, 2)))
        s_emb, s_lab = emb[support_idx], [labels[j] for j in support_idx]
        got = pnl_batch(s_emb, s_lab, emb, labels, dist).item()
        worst_pnl = max(worst_pnl, abs(got - oracles.pnl(s_emb, s_lab, emb, labels, dist)))
    ok = worst_naive <= 1e-10 and worst_pnl <= 1e-10 and selection_mismatches == 0
    detail = f"naive {worst_naive:.1e}, pnl {worst_pnl:.1e}, semi-hard mismatches {selection_mismatches}/100"
    verdict(2, "loss oracle equivalence", ok, detail)


# --------------------------------------------------------------------------
# 3. centroid minimises squared distance


def test_c3_centroid_bregman(verdict):
    rng = np.random.default_rng(3)
    failures = 0
    for _ in range(100):
        n, m = int(rng.integers(1, 10)), int(rng.integers(1, 17))
        support = rng.normal(size=(n, m))
        (proto,) = compute_prototypes(support, [0] * n)
        base = np.sum((support - proto.center) ** 2)
        for _ in range(50):
            delta = rng.normal(size=m) * 10.0 ** rng.uniform(-4, 1)
            failures += not np.sum((support - (proto.center + delta)) ** 2) > base
    verdict(3, "prototype strictly minimises squared distance", failures == 0, f"{failures}/5000 violations")


# --------------------------------------------------------------------------
# 4. metric oracles


def test_c4_metric_oracle_equivalence(verdict):
    rng = np.random.default_rng(4)
    worst_roc = worst_eer = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 51))
        same = rng.random(n) < 0.5
        same[0], same[1] = True, False
        scores = rng.integers(0, 10, size=n) / 3.0 if rng.random() < 0.5 else rng.normal(size=n)
        trials = TrialSet(scores, same)
        pts = oracles.roc_sweep(scores.tolist(), same.tolist())
        got = roc(trials).points()
        if len(got) != len(pts) or any(a[0] != b[0] for a, b in zip(got, pts)):
            worst_roc = math.inf
        else:
            worst_roc = max([worst_roc] + [max(abs(a[1] - b[1]), abs(a[2] - b[2])) for a, b in zip(got, pts)])
        worst_eer = max(worst_eer, abs(eer(trials) - oracles.eer_sweep(scores.tolist(), same.tolist())))
    separated = eer(TrialSet([0.1, 0.2, 0.3, 0.7, 0.8, 0.9], [1, 1, 1, 0, 0, 0]))
    constant = eer(TrialSet([0.4] * 8, [1, 0] * 4))
    ok = worst_roc <= 1e-9 and worst_eer <= 1e-9 and separated == 0.0 and constant == 0.5
    detail = f"roc {worst_roc:.1e}, eer {worst_eer:.1e}, separated {separated}, constant {constant}"
    verdict(4, "roc/eer match threshold sweep", ok, detail)


# --------------------------------------------------------------------------
# 5. chance level


def test_c5_chance_level(verdict):
    parts, ok = [], True
    for k in (5, 18):
        n_enroll, n_query, repeats = 3, 5, 1000
        pool = {s: [FeatureSequence(np.zeros((1, 1)), s, (s, u)) for u in range(n_enroll + n_query)] for s in range(k)}
        constant = si_task(pool, k, n_enroll, n_query, lambda seqs: np.ones((len(seqs), 4)) / 2, repeats=repeats,
                           rng=np.random.default_rng(k))  # fmt: skip
        sigma = math.sqrt((1 / k) * (1 - 1 / k) / (repeats * k * n_query))
        gap = abs(constant.mean - 1 / k)
        ok &= gap <= 3 * sigma
        parts.append(f"K={k}: {constant.mean:.4f} vs {1 / k:.4f} (3 sigma {3 * sigma:.4f})")
    verdict(5, "constant encoder sits at chance", ok, "; ".join(parts))


# --------------------------------------------------------------------------
# 6. directional reproduction

# 25 seen + 5 unseen speakers; 30 utterances of 40 frames; 20-frame segments
COMPARISON_CORPUS = dict(n_speakers=30, utterances_per_speaker=30, frames_per_utterance=40, feature_dim=20, difficulty=0.5)


def test_c6_pnl_vs_tl_direction(verdict):
    start = time.perf_counter()
    dataset, manifest = generate_corpus(**COMPARISON_CORPUS, seed=0)
    manifest = split_speakers(manifest, 5, seed=0)
    episode = EpisodeSpec(k_way=15, n_shot=3, n_query=5)
    configs = [TrainConfig(loss_kind=kind, episode=episode, epochs=50, crop_frames=20) for kind in ("pnl", "tl-semi")]
    plan = EvalPlan(splits=("unseen",), si_k_way=5, si_enroll=3, si_query=5, si_repeats=100, sv_pos=8, sv_repeats=10)
    cells = run_comparison(dataset, manifest, configs, range(5), plan)
    value = {(c.config, c.metric): c.mean for c in cells}
    pnl_acc, tl_acc = value[("PNL (3_5, Euc)", "accuracy")], value[("TL (Semi, Euc)", "accuracy")]
    pnl_eer, tl_eer = value[("PNL (3_5, Euc)", "eer")], value[("TL (Semi, Euc)", "eer")]
    elapsed = time.perf_counter() - start
    checks = {
        "a": pnl_acc >= 0.60,
        "b": pnl_acc >= tl_acc - 0.02,
        "c": pnl_eer <= tl_eer + 0.02,
        "time": elapsed < 15 * 60,
    }
    flags = " ".join(f"{k}={'ok' if v else 'no'}" for k, v in checks.items())
    detail = (
        f"unseen SI PNL {pnl_acc:.4f} TL {tl_acc:.4f}; unseen EER PNL {pnl_eer:.4f} TL {tl_eer:.4f}; "
        f"{flags}; {elapsed:.0f}s"
    )
    verdict(6, "PNL matches or beats TL on unseen speakers", all(checks.values()), detail)


# --------------------------------------------------------------------------
# 7. determinism


def test_c7_train_determinism(verdict, tmp_path):
    corpus = tmp_path / "corpus"
    gen = ["generate", "--speakers", "10", "--utterances", "12", "--frames", "30", "--dim", "6", "--unseen", "2"]
    assert main(gen + ["--seed", "3", "--out", str(corpus)]) == 0
    flags = ["--kway", "4", "--epochs", "3", "--crop", "10", "--hidden", "4", "--embedding", "4", "--val-kway", "3", "--seed", "11"]
    same = True
    for loss in (["--loss", "pnl"], ["--loss", "tl", "--mining", "semi"]):
        outs = [tmp_path / f"{loss[1]}{i}" for i in range(2)]
        for out in outs:
            assert main(["train", "--corpus", str(corpus), *loss, *flags, "--out", str(out)]) == 0
        for name in ("model.semc", "history.csv"):
            same &= (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
    verdict(7, "cmd_train is bit-reproducible", same, "pnl and tl-semi checkpoints and histories compared byte-for-byte")


# --------------------------------------------------------------------------
# 8. format round-trips


def test_c8_format_round_trips(verdict, tmp_path):
    rng = np.random.default_rng(8)
    exact = 0
    for i in range(20):
        dim = int(rng.integers(1, 64))
        utts = [
            FeatureSequence(rng.normal(size=(int(rng.integers(1, 9)), dim)).astype(np.float32).astype(np.float64), int(s), j)
            for j, s in enumerate(rng.integers(0, 5, size=int(rng.integers(1, 10))))
        ]
        ds = Dataset(dim, utts)
        write_features(tmp_path / f"f{i}.seqf", ds)
        back = read_features(tmp_path / f"f{i}.seqf")
        dense = {s: k for k, s in enumerate(sorted({u.speaker_id for u in utts}))}
        feats_ok = back.feature_dim == dim and all(
            np.array_equal(u.frames, v.frames) and dense[u.speaker_id] == v.speaker_id for u, v in zip(utts, back.utterances)
        )
        cfg = EncoderConfig(dim, int(rng.integers(1, 6)), int(rng.integers(1, 6)), seed=i)
        params = init_params(cfg)
        params = params.replace({k: v + rng.normal(size=v.shape) for k, v in params.arrays.items()})
        tcfg = TrainConfig(loss_kind=("pnl", "tl-naive", "tl-semi")[i % 3], seed=i) if i % 2 else None
        checkpoint_save(params, tcfg, tmp_path / f"m{i}.semc")
        loaded, lcfg = checkpoint_load(tmp_path / f"m{i}.semc")
        ckpt_ok = lcfg == tcfg and loaded.config == cfg and all(
            np.array_equal(loaded.arrays[k], params.arrays[k]) for k in PARAM_NAMES
        )
        exact += feats_ok and ckpt_ok

    feat_raw = (tmp_path / "f0.seqf").read_bytes()
    ckpt_raw = (tmp_path / "m0.semc").read_bytes()
    corrupt = {
        "feature magic": (feat_raw.replace(b"SEQF", b"QESF", 1), read_features, FeatureFileError),
        "feature version": (feat_raw[:4] + b"\x07\0\0\0" + feat_raw[8:], read_features, FeatureFileError),
        "feature truncated": (feat_raw[:14], read_features, FeatureFileError),
        "checkpoint magic": (b"MEMC" + ckpt_raw[4:], checkpoint_load, CheckpointError),
        "checkpoint version": (ckpt_raw[:4] + b"\x02\0\0\0" + ckpt_raw[8:], checkpoint_load, CheckpointError),
        "checkpoint truncated": (ckpt_raw[:9], checkpoint_load, CheckpointError),
    }
    handled = 0
    for name, (blob, loader, err) in corrupt.items():
        path = tmp_path / "corrupt"
        path.write_bytes(blob)
        try:
            loader(path)
        except err:
            handled += 1
    ok = exact == 20 and handled == len(corrupt)
    verdict(8, "feature and checkpoint round-trips", ok, f"{exact}/20 exact, {handled}/{len(corrupt)} corruptions rejected")
