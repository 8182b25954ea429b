import json
import math

import hypothesis
import hypothesis.strategies as st
import numpy as np
import pytest

from coverid import autodiff as ad
from coverid.autodiff import Parameter, Tensor
from coverid.model import ModelConfig, build_model
from coverid.training import (
    Checkpoint,
    CheckpointError,
    Entry,
    LabeledDataset,
    TrainConfig,
    adam_step,
    crop_or_pad,
    load_checkpoint,
    pk_sample,
    resolve_checkpoint_dir,
    save_checkpoint,
    total_loss,
    train,
    triplet_loss_batch_hard,
    warning_counts,
)


def toy_dataset(n_cliques=4, versions=3, T=20, seed=0, splits=("train",)):
    """In-memory dataset: each clique is a distinct random pattern plus noise."""
    rng = np.random.default_rng(seed)
    entries, feats = [], {}
    for c in range(n_cliques):
        base = rng.uniform(0, 1, (84, T))
        for v in range(versions):
            eid = f"c{c:02d}_v{v}"
            entries.append(Entry(eid, None, f"c{c:02d}", splits[v % len(splits)]))
            feats[eid] = (base + 0.1 * rng.uniform(0, 1, (84, T))).astype(np.float32)
    ds = LabeledDataset(entries)
    ds._cache.update(feats)
    return ds


def tiny_config(**kw):
    base = dict(P=2, K_per_class=2, batch_size=4, crop_len=16, epochs=2, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def brute_force_triplet(X, labels, alpha):
    losses = []
    for a in range(len(X)):
        dp, dn = None, None
        for j in range(len(X)):
            if j == a:
                continue
            d = math.sqrt(sum((X[a, k] - X[j, k]) ** 2 for k in range(X.shape[1])))
            if labels[j] == labels[a]:
                dp = d if dp is None else max(dp, d)
            else:
                dn = d if dn is None else min(dn, d)
        if dp is not None and dn is not None:
            losses.append(max(dp - dn + alpha, 0.0))
    return sum(losses) / len(losses)


# -- config ---------------------------------------------------------------------------


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.lr, c.batch_size, c.alpha, c.P, c.K_per_class) == (0.0004, 32, 0.3, 8, 4)
    assert TrainConfig.for_preset("full").crop_len == 400
    assert TrainConfig.for_preset("mini").crop_len == 80
    for bad in (dict(P=7), dict(alpha=0.0), dict(crop_len=7), dict(loss_mode="x"), dict(epochs=-1)):
        with pytest.raises(ValueError):
            TrainConfig(**bad).validate()


# -- sampling and cropping ----------------------------------------------------------------


def test_pk_sample_shape_and_determinism():
    ds = toy_dataset(n_cliques=10, versions=3)
    idx, lab = pk_sample(ds, 8, 4, np.random.default_rng(0))
    assert len(idx) == 32
    values, counts = np.unique(lab, return_counts=True)
    assert len(values) == 8 and (counts == 4).all()
    assert all(ds.entries[i].label == l for i, l in zip(idx, lab))
    again = pk_sample(ds, 8, 4, np.random.default_rng(0))
    assert again[0] == idx and (again[1] == lab).all()


def test_pk_sample_exact_p_and_errors():
    ds = toy_dataset(n_cliques=8, versions=2)
    _, lab = pk_sample(ds, 8, 4, np.random.default_rng(1))
    assert set(lab) == set(range(8))
    with pytest.raises(ValueError):
        pk_sample(toy_dataset(n_cliques=3), 8, 4, np.random.default_rng(0))


def test_pk_sample_without_replacement_for_large_cliques():
    ds = toy_dataset(n_cliques=2, versions=6)
    idx, _ = pk_sample(ds, 2, 4, np.random.default_rng(3))
    assert len(set(idx)) == 8


def test_crop_or_pad_cases():
    v = np.arange(84 * 10, dtype=float).reshape(84, 10)
    np.testing.assert_array_equal(crop_or_pad(v, 10, np.random.default_rng(0)), v)
    padded = crop_or_pad(v[:, :5], 10, np.random.default_rng(0))
    assert padded.shape == (84, 10) and not padded[:, 5:].any()
    np.testing.assert_array_equal(padded[:, :5], v[:, :5])
    a = crop_or_pad(v, 4, np.random.default_rng(9))
    b = crop_or_pad(v, 4, np.random.default_rng(9))
    np.testing.assert_array_equal(a, b)
    start = int(a[0, 0])
    np.testing.assert_array_equal(a, v[:, start : start + 4])
    assert crop_or_pad(v, 4, train=False) is v


# -- triplet loss ---------------------------------------------------------------------------


def test_triplet_single_anchor_value():
    # one anchor per row of the batch; only anchor 0's hinge is active and equals 0.8
    X = np.array([[0.0, 0.0], [1.2, 0.0], [0.0, 0.7], [0.0, 0.7]])
    labels = [0, 0, 1, 1]
    per_anchor = []
    for a in range(4):
        same = [j for j in range(4) if j != a and labels[j] == labels[a]]
        diff = [j for j in range(4) if labels[j] != labels[a]]
        dp = max(np.linalg.norm(X[a] - X[j]) for j in same)
        dn = min(np.linalg.norm(X[a] - X[j]) for j in diff)
        per_anchor.append(max(dp - dn + 0.3, 0))
    assert per_anchor[0] == pytest.approx(0.8)
    assert triplet_loss_batch_hard(Tensor(X), labels, 0.3).data == pytest.approx(np.mean(per_anchor))


def test_triplet_separated_clusters_is_zero():
    X = np.array([[5.0, 0], [5.0, 0], [-5.0, 0], [-5.0, 0]])
    assert triplet_loss_batch_hard(Tensor(X), [0, 0, 1, 1], 0.3).data == 0.0


@hypothesis.settings(max_examples=60, deadline=None)
@hypothesis.given(st.integers(0, 2**31 - 1), st.integers(4, 32), st.integers(2, 5))
def test_triplet_matches_brute_force(seed, n, n_labels):
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % min(n_labels, n // 2)
    rng.shuffle(labels)
    X = rng.normal(size=(n, 3))
    got = float(triplet_loss_batch_hard(Tensor(X), labels, 0.3).data)
    assert got == pytest.approx(brute_force_triplet(X, labels, 0.3), abs=1e-6)


def test_triplet_singleton_label_excluded_with_warning():
    before = warning_counts["triplet_excluded_anchors"]
    X = np.array([[0.0, 0], [1.0, 0], [3.0, 0], [9.0, 0]])
    loss = triplet_loss_batch_hard(Tensor(X), [0, 0, 1, 2], 0.3).data
    assert warning_counts["triplet_excluded_anchors"] == before + 2
    assert loss == pytest.approx(brute_force_triplet(X, [0, 0, 1, 2], 0.3))


def test_triplet_gradient_check():
    X = np.array([[0.0, 0.0], [1.0, 0.0], [0.2, 0.0], [0.0, 0.5], [0.0, 3.0], [0.0, 0.6]])
    labels = [0, 0, 0, 1, 1, 1]
    report = ad.gradient_check(
        lambda f: triplet_loss_batch_hard(f, labels, 1.0), [X.shape], inputs=[X], freeze_kinks=True
    )
    assert report.max_rel_error < 1e-6


# -- total loss ---------------------------------------------------------------------------------


class _Out:
    def __init__(self, f_t, f_c, logits):
        self.f_t, self.f_c, self.logits = f_t, f_c, logits


def test_total_loss_modes():
    rng = np.random.default_rng(0)
    f_t = Tensor(rng.normal(size=(4, 3)))
    logits = Tensor(rng.normal(size=(4, 10)))
    labels = [0, 0, 1, 1]
    out = _Out(f_t, f_t, logits)
    ce = float(ad.softmax_cross_entropy(logits, labels).data)
    tri = float(triplet_loss_batch_hard(f_t, labels, 0.3).data)
    joint, parts = total_loss(out, labels, TrainConfig(loss_mode="joint_bnneck"))
    assert float(joint.data) == ce + tri
    assert parts == {"ce": ce, "triplet": tri, "total": ce + tri}
    uniform = _Out(f_t, f_t, Tensor(np.zeros((4, 10))))
    assert float(total_loss(uniform, labels, TrainConfig(loss_mode="cls_only"))[0].data) == pytest.approx(math.log(10))
    sep = _Out(Tensor(np.array([[5.0, 0], [5, 0], [-5, 0], [-5, 0]])), None, None)
    assert float(total_loss(sep, labels, TrainConfig(loss_mode="tri_only"))[0].data) == 0.0


# -- Adam ------------------------------------------------------------------------------------------


@pytest.mark.parametrize("g", [1e-3, -0.5, 7.0])
def test_adam_first_step_is_lr_sign(g):
    p = Parameter(np.array([1.0]), name="w")
    p.grad = np.array([g])
    adam_step([p], 0.01)
    assert p.data[0] == pytest.approx(1.0 - 0.01 * np.sign(g), abs=1e-6)


def test_adam_zero_grad_and_identical_params():
    p = Parameter(np.array([2.0]), name="w")
    p.grad = np.zeros(1)
    adam_step([p], 0.1)
    assert p.data[0] == 2.0 and p.step_count == 1
    a, b = Parameter(np.array([1.0, 2.0]), name="a"), Parameter(np.array([1.0, 2.0]), name="b")
    for _ in range(3):
        a.grad = b.grad = np.array([0.3, -0.2])
        adam_step([a, b], 0.05)
    np.testing.assert_array_equal(a.data, b.data)


@hypothesis.settings(max_examples=40, deadline=None)
@hypothesis.given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_adam_gradient_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    g = rng.choice([-1.0, 1.0], size=5) * rng.uniform(0.1, 2.0, size=5)
    p, q = Parameter(np.zeros(5), name="p"), Parameter(np.zeros(5), name="q")
    p.grad, q.grad = g, c * g
    adam_step([p, q], 1e-3)
    assert (np.sign(p.data) == np.sign(q.data)).all()
    # c|g| >= 1e-3 against eps = 1e-8 keeps the magnitude drift near 1e-5
    np.testing.assert_allclose(p.data, q.data, rtol=1e-4)


@hypothesis.settings(max_examples=40, deadline=None)
@hypothesis.given(st.floats(0.5, 12.0), st.floats(-1e3, 1e3))
def test_gem_clamp_after_every_step(start, grad):
    p = Parameter(np.array([start]), name="gem.p")
    for _ in range(3):
        p.grad = np.array([grad])
        adam_step([p], 5.0)
        assert 1.0 <= p.data[0] <= 10.0


# -- checkpoints --------------------------------------------------------------------------------------


def test_checkpoint_round_trip_forward_bitwise(tmp_path):
    m = build_model(ModelConfig.mini(3, embed_dim=8), seed=1)
    x = np.random.default_rng(0).uniform(0, 1, (2, 1, 84, 24)).astype(np.float32)
    m.forward(x, training=True)  # move the running stats off their initial values
    ckpt = Checkpoint.capture(m, tiny_config(), epoch=3, metrics={"val_map": 0.5}, with_optimizer=True)
    save_checkpoint(ckpt, tmp_path / "ck")
    back = load_checkpoint(tmp_path / "ck")
    assert back.epoch == 3 and back.metrics == {"val_map": 0.5}
    assert back.model_config == m.config and back.train_config == tiny_config()
    a = m.forward(x).embedding.data
    b = back.build_model().forward(x).embedding.data
    assert a.tobytes() == b.tobytes()
    manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
    assert manifest["format_version"] == 1
    table = manifest["parameters"]
    ends = sorted((v["byte_offset"], v["byte_offset"] + v["byte_len"]) for v in table.values())
    assert ends[0][0] == 0 and all(e == s for (_, e), (s, _) in zip(ends, ends[1:]))
    assert ends[-1][1] == (tmp_path / "ck" / "params.bin").stat().st_size


def test_checkpoint_errors(tmp_path):
    m = build_model(ModelConfig.mini(2), seed=0)
    save_checkpoint(Checkpoint.capture(m, tiny_config(), 0, {}), tmp_path / "ck")
    d = tmp_path / "ck"
    blob = (d / "params.bin").read_bytes()
    (d / "params.bin").write_bytes(blob[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(d)
    (d / "params.bin").write_bytes(blob)
    manifest = json.loads((d / "manifest.json").read_text())
    manifest["format_version"] = 2
    (d / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(d)
    manifest["format_version"] = 1
    manifest["parameters"]["stem.conv.weight"]["shape"] = [1, 1, 1, 1]
    (d / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(CheckpointError):
        load_checkpoint(d)
    (d / "manifest.json").write_text("{not json")
    with pytest.raises(CheckpointError):
        load_checkpoint(d)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing")
    with pytest.raises(CheckpointError):
        resolve_checkpoint_dir(tmp_path / "missing")


# -- training loop ----------------------------------------------------------------------------------------


def test_zero_epochs_returns_initialization(tmp_path):
    m = build_model(ModelConfig.mini(4), seed=2)
    init = {k: v.copy() for k, v in m.state_arrays().items()}
    res = train(m, toy_dataset(), tiny_config(epochs=0), out_dir=tmp_path, validate=False)
    for k, v in res.final.arrays.items():
        assert v.tobytes() == init[k].astype(np.float32).tobytes()
    assert res.log == []
    assert resolve_checkpoint_dir(tmp_path) == tmp_path / "best"


def test_training_is_deterministic_and_logs(tmp_path):
    results = []
    for run in range(2):
        m = build_model(ModelConfig.mini(4), seed=0)
        results.append(train(m, toy_dataset(), tiny_config(), out_dir=tmp_path / str(run), validate=False))
    a, b = results
    assert all(a.final.arrays[k].tobytes() == b.final.arrays[k].tobytes() for k in a.final.arrays)
    final = [(tmp_path / run / "final" / "params.bin").read_bytes() for run in ("0", "1")]
    assert final[0] == final[1]
    header = (tmp_path / "0" / "log.csv").read_text().splitlines()[0]
    assert header == "epoch,ce_loss,triplet_loss,total_loss,val_map,gem_p"
    assert [r["epoch"] for r in a.log] == [1, 2]
    assert all(1 <= r["gem_p"] <= 10 for r in a.log)


def test_training_reduces_loss_and_tracks_best_validation():
    ds = toy_dataset(n_cliques=4, versions=4, splits=("train", "train", "val", "train"))
    m = build_model(ModelConfig.mini(4), seed=0)
    res = train(m, ds, tiny_config(epochs=12, lr=2e-3), validate=True)
    first, last = res.log[0]["ce_loss"], np.mean([r["ce_loss"] for r in res.log[-3:]])
    assert last < first
    best = max(res.log, key=lambda r: r["val_map"])
    assert res.best.metrics["val_map"] == best["val_map"]


def test_joint_naive_requires_model_without_neck():
    m = build_model(ModelConfig.mini(4), seed=0)
    with pytest.raises(ValueError):
        train(m, toy_dataset(), tiny_config(loss_mode="joint_naive"), validate=False)
    plain = build_model(ModelConfig.mini(4, bnneck=False), seed=0)
    res = train(plain, toy_dataset(), tiny_config(loss_mode="joint_naive", epochs=1), validate=False)
    assert res.log[0]["ce_loss"] > 0


def test_manifest_loading(tmp_path):
    from coverid.audio import CqtSpectrogram, save_cqt

    rows = []
    for i, (clique, split) in enumerate([("a", "train"), ("a", "test"), ("b", "train")]):
        save_cqt(tmp_path / f"{i}.cqt", CqtSpectrogram(np.full((84, 9), float(i), np.float32)))
        rows.append({"id": f"r{i}", "feature": f"{i}.cqt", "clique": clique, "split": split})
    (tmp_path / "m.jsonl").write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    ds = LabeledDataset.from_manifest(tmp_path / "m.jsonl")
    assert ds.num_classes == 2 and ds.indices("test") == [1]
    assert ds.features(2)[0, 0] == 2.0
    assert ds.labels() == {"r0": "a", "r1": "a", "r2": "b"}
    (tmp_path / "bad.jsonl").write_text(json.dumps({"id": "x", "split": "train"}))
    with pytest.raises(ValueError):
        LabeledDataset.from_manifest(tmp_path / "bad.jsonl")
