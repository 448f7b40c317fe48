"""Release gate: one test per shipped acceptance criterion.

Each test asserts its criterion at the stated tolerance and prints a
single summary line (visible with `pytest -s` or on failure).

The two quantitative MNIST criteria need the real IDX files (see
conftest.find_mnist_dir: drop train-images-idx3-ubyte and
train-labels-idx1-ubyte under tests/data/mnist/ or point
GATFUSION_MNIST_DIR at them) and GATFUSION_FULL_ACCEPTANCE=1, because
the full 10-fold protocol runs for about an hour. Without them those
tests skip, and lightweight synthetic stand-ins below keep the same
machinery exercised on every run.
"""

import os
import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from conftest import encode_idx_images, encode_idx_labels
from gatfusion import cli
from gatfusion import evaluation as ev
from gatfusion import fusion as fu
from gatfusion import gat
from gatfusion import graphs as gr
from gatfusion.data import (
    MultiModalDataset,
    crop3,
    load_multimodal_csv,
    mean_impute,
    mnist_dataset,
    parse_idx,
    write_multimodal_csv,
)
from gatfusion.errors import FormatError
from gatfusion.numerics import elu, make_rng, segment_sum

FULL = os.environ.get("GATFUSION_FULL_ACCEPTANCE") == "1"

full_protocol = pytest.mark.skipif(
    not FULL,
    reason="full MNIST protocol (~1 h); set GATFUSION_FULL_ACCEPTANCE=1 "
           "and provide the IDX files to run",
)

REFERENCE_BAND = (0.8187 - 0.04, 0.9237 + 0.04)


def small_blobs(n=60, dims=(5, 4), seed=0):
    rng = make_rng(seed)
    labels = np.arange(n) % 2
    labels = labels[rng.permutation(n)]
    feats = []
    for d in dims:
        centers = rng.normal(scale=2.5, size=(2, d))
        feats.append(centers[labels] + rng.normal(scale=0.4, size=(n, d)))
    return MultiModalDataset(features=feats,
                             mask=np.ones((n, len(dims)), dtype=bool),
                             labels=labels, num_classes=2)


@pytest.fixture(scope="session")
def full_mnist_report(mnist_paths):
    """One shared 10-fold sweep over all levels and methods."""
    if not FULL:
        pytest.skip("set GATFUSION_FULL_ACCEPTANCE=1 to run the ~1 h sweep")
    images, labels = mnist_paths
    ds = mnist_dataset(images, labels, per_class=1000)
    config = ev.TrainConfig()  # 200 epochs, lr 1e-3, 8 heads, k=10
    return ev.run_sweep(ds, [0.1, 0.2, 0.3, 0.4, 0.5],
                        ["gat2", "gat1", "gatimp", "logistic"], config,
                        folds=10, jobs=os.cpu_count() or 1)


@full_protocol
def test_mnist_sweep_reproduction(full_mnist_report):
    report = full_mnist_report
    gat2_at_50 = report.accuracy_series("gat2")[-1]
    assert gat2_at_50 >= 0.87
    # The band covers the fusion models and the graph-free baseline; the
    # imputation baseline collapses under block loss by design and is
    # held to the ordering check below instead.
    for method in ("gat2", "gat1", "logistic"):
        for level, acc in zip(report.levels, report.accuracy_series(method)):
            assert REFERENCE_BAND[0] <= acc <= REFERENCE_BAND[1], \
                f"{method} at {level:.0%}: {acc:.4f} outside {REFERENCE_BAND}"
    print(f"PASS sweep reproduction: gat2 at 50% = {gat2_at_50:.4f} "
          f"(>= 0.87); all fusion/baseline means within "
          f"[{REFERENCE_BAND[0]:.4f}, {REFERENCE_BAND[1]:.4f}]")


@full_protocol
def test_fusion_beats_imputation_above_30_percent(full_mnist_report):
    report = full_mnist_report
    imp = dict(zip(report.levels, report.accuracy_series("gatimp")))
    gaps = []
    for method in ("gat2", "gat1"):
        accs = dict(zip(report.levels, report.accuracy_series(method)))
        for level in report.levels:
            if level >= 0.3:
                gap = accs[level] - imp[level]
                gaps.append(gap)
                assert gap >= 0.05, \
                    f"{method} at {level:.0%}: +{gap:.4f} < +0.05 over gatimp"
    print(f"PASS fusion-vs-imputation ordering: smallest gap "
          f"+{min(gaps):.4f} (>= +0.05) at levels >= 30%")


def test_mnist_smoke_variant(mnist_paths):
    images, labels = mnist_paths
    ds = mnist_dataset(images, labels, per_class=200)  # N = 2,000
    config = ev.TrainConfig(epochs=50)
    start = time.time()
    report = ev.run_sweep(ds, [0.5], ["gat2"], config, folds=3,
                          jobs=os.cpu_count() or 1)
    elapsed = time.time() - start
    acc = report.accuracy_series("gat2")[0]
    assert acc >= 0.80
    assert elapsed <= 300
    print(f"PASS smoke variant: gat2 at 50% = {acc:.4f} (>= 0.80) "
          f"in {elapsed:.0f}s (<= 300s)")


def test_sweep_smoke_scale_synthetic(synth_idx_paths):
    # Stand-in when real MNIST is absent: same IDX -> crop3 -> sweep path
    # on classifiable synthetic digits. Shows the protocol reaches smoke
    # accuracy under 50% missingness; the reference band and imputation-gap
    # numbers are properties of real MNIST and stay gated above.
    images, labels = synth_idx_paths
    ds = mnist_dataset(images, labels, per_class=30)
    config = ev.TrainConfig(epochs=50, seed=0)
    start = time.time()
    report = ev.run_sweep(ds, [0.5], ["gat2"], config, folds=3, jobs=1)
    elapsed = time.time() - start
    acc = report.accuracy_series("gat2")[0]
    assert acc >= 0.80
    assert elapsed <= 300
    print(f"PASS synthetic smoke stand-in: gat2 at 50% = {acc:.4f} "
          f"(>= 0.80) in {elapsed:.0f}s")


def test_gradient_suite():
    start = time.time()
    results = cli.run_gradient_suite(seed=0)
    elapsed = time.time() - start
    names = {name for name, _ in results}
    assert names == {
        "head",
        "layer-mean-k1", "layer-mean-k2", "layer-mean-k8",
        "layer-concat-k1", "layer-concat-k2", "layer-concat-k8",
        "branch-gat2", "branch-gat1", "fusion-3branch",
    }
    worst = max(err for _, err in results)
    assert all(np.isfinite(err) and err < 1e-4 for _, err in results)
    assert elapsed < 60
    print(f"PASS gradient suite: {len(results)} components, worst "
          f"relative error {worst:.2e} (< 1e-4), {elapsed:.1f}s (< 60s)")


def test_invariant_suite():
    rng = make_rng(0)

    # attention rows sum to one (1e-9)
    g = gr.knn_graph(rng.normal(size=(20, 3)), 4)
    head = gat.GatHead(W=rng.normal(size=(6, 5)), a=rng.normal(size=12))
    _, att = gat.head_forward(head, rng.normal(size=(20, 5)), g)
    np.testing.assert_allclose(segment_sum(att.alpha, g.indptr), 1.0,
                               atol=1e-9)

    # permutation equivariance (1e-12)
    feats = rng.normal(size=(14, 3))
    layer = gat.init_gat_layer(3, 4, 2, "concat", "elu", rng)
    out, _ = gat.layer_forward(layer, feats, gr.knn_graph(feats, 3))
    perm = rng.permutation(14)
    out_perm, _ = gat.layer_forward(layer, feats[perm],
                                    gr.knn_graph(feats[perm], 3))
    np.testing.assert_allclose(out_perm, out[perm], atol=1e-12)

    # one-layer locality (exact)
    g = gr.knn_graph(feats, 3)
    h = rng.normal(size=(14, 3))
    out1, _ = gat.layer_forward(layer, h, g)
    nbrs = set(map(int, g.in_neighbors(6)))
    h2 = h.copy()
    for j in range(14):
        if j not in nbrs:
            h2[j] = rng.normal(size=3) * 10.0
    out2, _ = gat.layer_forward(layer, h2, g)
    np.testing.assert_array_equal(out1[6], out2[6])

    # single-head reduction: both combine modes collapse bit-exactly
    h5 = rng.normal(size=(14, 5))
    g5 = gr.knn_graph(rng.normal(size=(14, 2)), 3)
    for combine in ("mean", "concat"):
        one = gat.init_gat_layer(5, 4, 1, combine, "elu", rng)
        layer_out, _ = gat.layer_forward(one, h5, g5)
        head_out, _ = gat.head_forward(one.heads[0], h5, g5, one.leaky_slope)
        np.testing.assert_array_equal(layer_out, elu(head_out))

    # missing-modality isolation: exact zero logits and zero gradients
    n, dims = 12, (4, 3, 5)
    feats3 = [rng.normal(size=(n, d)) for d in dims]
    mask = np.ones((n, 3), dtype=bool)
    for node, modality in ((1, 0), (4, 2), (7, 1), (9, 0)):
        mask[node, modality] = False
    for m in range(3):
        feats3[m][~mask[:, m]] = 0.0
    graphs = [gr.knn_graph(f, 3, available=mask[:, m])
              for m, f in enumerate(feats3)]
    model = fu.init_fusion_model("gat2", list(dims), 3, 2, 0.5, rng)
    labels = rng.integers(0, 3, size=n)
    for m in range(3):
        logits_m, _ = gat.branch_forward(model.branches[m], feats3[m],
                                         graphs[m])
        assert np.all(logits_m[~mask[:, m]] == 0.0)
    fused1, _ = fu.fused_forward(model, feats3, graphs, mask)
    _, grads1, _ = fu.fusion_loss_and_grads(model, feats3, graphs, mask,
                                            labels, np.arange(n))
    poisoned = [f.copy() for f in feats3]
    poisoned[2][4] = 1e6  # node 4 is masked out of modality 2
    fused2, _ = fu.fused_forward(model, poisoned, graphs, mask)
    _, grads2, _ = fu.fusion_loss_and_grads(model, poisoned, graphs, mask,
                                            labels, np.arange(n))
    np.testing.assert_array_equal(fused1, fused2)
    for key in grads1:
        np.testing.assert_array_equal(grads1[key], grads2[key])

    # fusion mean rule on hand mask patterns (masked branches emit exact
    # zeros, so the mean over available branches is sum / count)
    logits = [np.array([[1.0], [4.0]]), np.array([[2.0], [8.0]]),
              np.array([[0.0], [6.0]])]
    fused = fu.combine_logits(logits, np.array([[1, 1, 0], [1, 1, 1]]))
    np.testing.assert_array_equal(fused, [[1.5], [6.0]])
    logits = [np.array([[1.0], [0.0]]), np.array([[0.0], [0.0]]),
              np.array([[0.0], [6.0]])]
    fused = fu.combine_logits(logits, np.array([[1, 0, 0], [0, 0, 1]]))
    np.testing.assert_array_equal(fused, [[1.0], [6.0]])

    print("PASS invariants: attention normalization 1e-9, permutation "
          "equivariance 1e-12, locality exact, missing-block isolation "
          "exact, single-head reduction bit-exact, fusion mean rule")


def brute_knn_neighborhoods(feats, k, avail):
    n = feats.shape[0]
    selected = {}
    for i in range(n):
        if not avail[i]:
            continue
        cands = sorted(
            (float(np.sum((feats[i] - feats[j]) ** 2)), j)
            for j in range(n) if j != i and avail[j]
        )
        selected[i] = {j for _, j in cands[:k]}
    nbrs = {i: ({i} if avail[i] else set()) for i in range(n)}
    for i, js in selected.items():
        for j in js:
            nbrs[i].add(j)
            nbrs[j].add(i)
    return nbrs


def pairwise_auc(scores, labels):
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = sum(float(p > q) + 0.5 * float(p == q) for p in pos for q in neg)
    return wins / (pos.size * neg.size)


def test_oracle_equivalences():
    rng = make_rng(3)

    # knn_graph vs brute-force distance ranking (50 nodes)
    feats = rng.normal(size=(50, 3))
    avail = rng.random(50) < 0.8
    avail[:6] = True
    g = gr.knn_graph(feats, 5, available=avail)
    expected = brute_knn_neighborhoods(feats, 5, avail)
    for i in range(50):
        np.testing.assert_array_equal(g.in_neighbors(i), sorted(expected[i]))

    # attach_test_nodes vs brute-force ranking
    train, test = rng.normal(size=(30, 3)), rng.normal(size=(8, 3))
    g_train = gr.knn_graph(train, 4)
    g_all = gr.attach_test_nodes(g_train, train, test, 4)
    for t in range(8):
        cands = sorted((float(np.sum((test[t] - train[j]) ** 2)), j)
                       for j in range(30))
        want = sorted(j for _, j in cands[:4]) + [30 + t]
        np.testing.assert_array_equal(g_all.in_neighbors(30 + t), want)

    # roc_auc vs the all-pairs formula, with heavy ties (200 scores)
    scores = rng.integers(0, 12, size=200) / 12.0
    labels = rng.integers(0, 2, size=200)
    labels[:2] = [0, 1]  # both classes present
    assert abs(ev.roc_auc(scores, labels) - pairwise_auc(scores, labels)) < 1e-12

    # stratified_kfold proportionality: every per-class fold share is
    # within one row of n_c / folds
    y = np.concatenate([np.zeros(23), np.ones(34), np.full(17, 2)]).astype(int)
    y = y[rng.permutation(y.size)]
    splits = ev.stratified_kfold(y, 5, seed=0)
    for c, n_c in ((0, 23), (1, 34), (2, 17)):
        for split in splits:
            share = int((y[split.test_ids] == c).sum())
            assert abs(share - n_c / 5) < 1.0

    # mean imputation vs hand-computed column means
    ds = MultiModalDataset(
        features=[np.array([[1.0], [3.0], [100.0], [0.0]]),
                  np.array([[2.0, 4.0], [6.0, 0.0], [0.0, 0.0], [10.0, 2.0]])],
        mask=np.array([[1, 1], [1, 1], [1, 0], [1, 1]], dtype=bool),
        labels=np.array([0, 1, 0, 1]),
        num_classes=2,
    )
    filled = mean_impute(ds, train_ids=np.array([0, 1, 2]))
    np.testing.assert_array_equal(filled[2], [100.0, 4.0, 2.0])  # (2+6)/2, (4+0)/2

    # crop3 partitions every pixel exactly once
    imgs = rng.integers(0, 256, size=(4, 28, 28)).astype(np.uint8)
    m1, m2, m3 = crop3(imgs)
    rebuilt = np.empty((4, 28, 28))
    rebuilt[:, 14:28, :] = m1.reshape(4, 14, 28)
    rebuilt[:, 0:14, 0:9] = m2.reshape(4, 14, 9)
    rebuilt[:, 0:14, 9:28] = m3.reshape(4, 14, 19)
    np.testing.assert_array_equal(rebuilt, imgs / 255.0)

    print("PASS oracles: knn + attach vs brute force, rank AUC vs "
          "all-pairs, fold proportionality < 1, hand imputation means, "
          "crop partition round-trip")


def test_inductive_purity():
    ds = small_blobs(n=60, seed=2)
    split = ev.stratified_kfold(ds.labels, 4, seed=2)[0]
    config = ev.TrainConfig(epochs=40, heads=2, k_neighbors=5, seed=7)
    base = ev.train_fold(ds, split, config)

    feats = [f.copy() for f in ds.features]
    labels = ds.labels.copy()
    rng = make_rng(99)
    for f in feats:
        f[split.test_ids] = rng.normal(scale=50.0,
                                       size=(split.test_ids.size, f.shape[1]))
    labels[split.test_ids] = 1 - labels[split.test_ids]
    poisoned = MultiModalDataset(features=feats, mask=ds.mask.copy(),
                                 labels=labels, num_classes=ds.num_classes)
    other = ev.train_fold(poisoned, split, config)
    pa, pb = fu.model_params(base.model), fu.model_params(other.model)
    assert pa.keys() == pb.keys()
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    assert base.losses == other.losses

    # a never-seen node scores entirely through graph attachment
    model, _ = ev.train_full(ds, config)
    before = {k: v.copy() for k, v in fu.model_params(model).items()}
    fresh = small_blobs(n=6, seed=8)
    fresh = MultiModalDataset(features=fresh.features, mask=fresh.mask,
                              labels=fresh.labels, num_classes=2,
                              ids=[f"new{i}" for i in range(6)])
    logits = ev.inductive_logits(model, ds, fresh, config)
    assert logits.shape == (6, 2)
    assert np.isfinite(logits).all()
    after = fu.model_params(model)
    assert all(np.array_equal(before[k], after[k]) for k in before)

    print("PASS inductive purity: poisoned held-out rows leave parameters "
          "bit-identical; unseen nodes score with no retraining")


def test_format_conformance(tmp_path, synth_idx_paths):
    rng = make_rng(4)

    # IDX: canonical headers accepted, corrupted magic/truncation rejected
    pixels = rng.integers(0, 256, size=(6, 28, 28)).astype(np.uint8)
    idx_labels = rng.integers(0, 10, size=6).astype(np.uint8)
    images_blob = encode_idx_images(pixels)
    labels_blob = encode_idx_labels(idx_labels)
    parsed = parse_idx(images_blob)
    assert (parsed.count, parsed.rows, parsed.cols) == (6, 28, 28)
    np.testing.assert_array_equal(parse_idx(labels_blob), idx_labels)
    corrupt = bytearray(images_blob)
    corrupt[2] ^= 0xFF
    with pytest.raises(FormatError):
        parse_idx(bytes(corrupt))
    with pytest.raises(FormatError):
        parse_idx(images_blob[:-1])
    with pytest.raises(FormatError):
        parse_idx(labels_blob[:-1])

    # multi-modal CSV round-trips value-exactly
    ds = small_blobs(n=20, seed=5)
    csv_path = tmp_path / "round.csv"
    write_multimodal_csv(ds, csv_path)
    back = load_multimodal_csv(csv_path)
    for m in range(2):
        np.testing.assert_array_equal(back.features[m], ds.features[m])
    np.testing.assert_array_equal(back.mask, ds.mask)
    np.testing.assert_array_equal(back.labels, ds.labels)
    assert back.ids == ds.ids

    # checkpoints round-trip value-exactly
    model = fu.init_fusion_model("gat2", [4, 3], 3, 2, 0.5, rng)
    ckpt = tmp_path / "model.npz"
    fu.save_model(ckpt, model, extra={"note": "round trip"})
    loaded, extra = fu.load_model(ckpt)
    pa, pb = fu.model_params(model), fu.model_params(loaded)
    assert pa.keys() == pb.keys()
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    assert extra["note"] == "round trip"

    # `cv` on the shipped sample config emits all three artifacts with
    # the right row and series counts (size flags shrunk to keep the
    # gate quick; flags-over-config is part of the contract)
    images, labels = synth_idx_paths
    small = mnist_dataset(images, labels, per_class=10)
    data_csv = tmp_path / "digits.csv"
    write_multimodal_csv(small, data_csv)
    sample = os.path.join(os.path.dirname(os.path.dirname(__file__)),
                          "sample-config.ini")
    out = tmp_path / "cv-out"
    rc = cli.main(["cv", "--config", sample, "--dataset", str(data_csv),
                   "--epochs", "15", "--heads", "2", "--k-neighbors", "4",
                   "--levels", "0.0 0.3", "--methods", "gat2 logistic",
                   "--folds", "3", "--jobs", "1", "--out", str(out)])
    assert rc == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "method,level,fold,accuracy,auc"
    assert len(lines) == 1 + 2 * 2 * 3  # methods x levels x folds
    assert "graph kind: nn" in (out / "report.txt").read_text()
    svg = ET.parse(out / "accuracy_vs_missingness.svg").getroot()
    series = [el for el in svg.iter() if el.tag.endswith("polyline")]
    assert {el.get("data-method") for el in series} == {"gat2", "logistic"}

    print("PASS formats: IDX accept/reject, CSV and checkpoint round-trips "
          "value-exact, cv artifacts with correct row/series counts")
