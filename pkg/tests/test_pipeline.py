import math
from dataclasses import replace

import numpy as np
import pytest
from conftest import TINY_EVAL, TINY_TRAIN
from scipy.spatial.transform import Rotation

from trajssl.nn import lossops
from trajssl.nn.model import HeadSpec, Model
from trajssl.pipeline import train as train_mod
from trajssl.pipeline.evaluate import (
    DEFAULT_THETA_TOL,
    LAYERS,
    SCENARIOS,
    Evaluator,
    ViewSet,
    decode_relpose,
    displacement_vectors,
    encode_layers,
    extract_representations,
    fit_probe,
    knn_absolute_pose,
    knn_predict,
    pair_dataset,
    patch_embedding_eval,
    patch_images,
    probe_predict,
    relpose_accuracy,
    relpose_chance,
    relpose_targets,
    sample_pairs,
    standardize,
)
from trajssl.pipeline.metrics import (
    MetricsRecord,
    dump_embeddings,
    load_embeddings,
    merge_runs,
    metrics_csv,
    read_metrics,
    report_csv,
    report_text,
    write_metrics,
)
from trajssl.pipeline.train import Trainer, TrainingDiverged, epoch_batches, train_ssl, with_lambda
from trajssl.sphere import in_domain_lattice, min_pairwise_angle, out_of_domain_lattice, poses_from_vectors

# Monte-Carlo accuracy of random guesses (10^5 draws, seed 0) at the default tolerance
CHANCE_IN_DOMAIN = 0.01994
CHANCE_OUT_OF_DOMAIN = 0.01595


def param_bytes(model):
    return {k: v.data.tobytes() for k, v in model.params.items()}


# training ---------------------------------------------------------------------

class TestTraining:
    def test_zero_epochs_is_init(self, tiny_manifest, tiny_source):
        res = train_ssl(replace(TINY_TRAIN, epochs=0), tiny_manifest, source=tiny_source)
        assert param_bytes(res.model) == param_bytes(Model(seed=TINY_TRAIN.seed))
        assert res.history == []

    def test_zero_lambda_equals_branch_removed(self, tiny_manifest, tiny_source):
        cfg = replace(TINY_TRAIN, lam=0.0)
        a = train_ssl(cfg, tiny_manifest, source=tiny_source)
        b = train_ssl(cfg, tiny_manifest, source=tiny_source, traj_enabled=False)
        assert param_bytes(a.model) == param_bytes(b.model)
        assert [h.sem_loss for h in a.history] == [h.sem_loss for h in b.history]

    def test_paired_runs_diverge_after_first_traj_step(self, tiny_manifest, tiny_source):
        base = Trainer(replace(TINY_TRAIN, lam=0.0), tiny_manifest, source=tiny_source)
        traj = Trainer(replace(TINY_TRAIN, lam=0.01), tiny_manifest, source=tiny_source)
        assert param_bytes(base.model) == param_bytes(traj.model)
        batch = epoch_batches(TINY_TRAIN, len(base.instances), 0)[0]
        ra, rb = base.step(batch, 0), traj.step(batch, 0)
        # same images and same initial weights, so the semantic loss matches bit for bit
        assert ra.sem_loss == rb.sem_loss
        assert param_bytes(base.model)["encoder.fc.weight"] != param_bytes(traj.model)["encoder.fc.weight"]

    def test_zero_lambda_compression_heads_only_decay(self, tiny_manifest, tiny_source):
        cfg = replace(TINY_TRAIN, lam=0.0)
        res = train_ssl(cfg, tiny_manifest, source=tiny_source)
        init = Model(seed=cfg.seed).params
        shrink = (1 - cfg.learning_rate * cfg.weight_decay) ** len(res.history)
        for k, p in res.model.params.items():
            if k.startswith("compress"):
                np.testing.assert_allclose(p.data, init[k].data * shrink, rtol=1e-6)

    @pytest.mark.parametrize("layer", ["conv3", "conv4"])
    def test_conv_layer_traj_runs(self, tiny_manifest, tiny_source, layer):
        res = train_ssl(replace(TINY_TRAIN, traj_loss_layer=layer), tiny_manifest, source=tiny_source)
        assert all(math.isfinite(h.total) for h in res.history)
        assert all(-1.0 <= h.traj_loss <= 1.0 for h in res.history)

    def test_vicreg_and_lars(self, tiny_manifest, tiny_source):
        cfg = replace(TINY_TRAIN, semantic_loss="vicreg", optimizer="lars", learning_rate=0.3)
        res = train_ssl(cfg, tiny_manifest, source=tiny_source)
        assert all(math.isfinite(h.total) for h in res.history)

    def test_bezier_triplets(self, tiny_manifest, tiny_source):
        res = train_ssl(replace(TINY_TRAIN, triplet_mode="bezier"), tiny_manifest, source=tiny_source)
        assert len(res.history) == 2

    def test_deterministic(self, tiny_manifest):
        a = train_ssl(TINY_TRAIN, tiny_manifest)
        b = train_ssl(TINY_TRAIN, tiny_manifest)
        assert param_bytes(a.model) == param_bytes(b.model)
        assert a.epoch_table() == b.epoch_table()

    def test_history_table(self, tiny_manifest, tiny_source):
        res = train_ssl(replace(TINY_TRAIN, epochs=2), tiny_manifest, source=tiny_source)
        table = res.epoch_table()
        assert [r[0] for r in table] == [0, 1]
        for e, sem, traj, total in table:
            assert total == pytest.approx(sem + TINY_TRAIN.lam * traj, abs=0.05)

    def test_non_finite_loss_aborts(self, tiny_manifest, tiny_source, monkeypatch):
        real = lossops.ntxent_loss

        def broken(za, zb, temperature=0.5):
            out = real(za, zb, temperature)
            out.data = np.asarray(np.nan, dtype=out.data.dtype)
            return out

        monkeypatch.setattr(train_mod.lossops, "ntxent_loss", broken)
        with pytest.raises(TrainingDiverged) as info:
            train_ssl(TINY_TRAIN, tiny_manifest, source=tiny_source)
        assert info.value.step == 0 and "sem_loss" in str(info.value)

    def test_epoch_batches(self):
        cfg = replace(TINY_TRAIN, batch_size=64, passes_per_epoch=4)
        batches = epoch_batches(cfg, 256, 3)
        assert len(batches) == 16
        counts = np.bincount(np.concatenate(batches), minlength=256)
        assert np.all(counts == 4)

    def test_config_validation(self):
        for bad in (dict(lam=-1.0), dict(semantic_loss="byol"), dict(traj_loss_layer="conv1"),
                    dict(optimizer="adam"), dict(batch_size=1)):
            with pytest.raises(ValueError):
                replace(TINY_TRAIN, **bad).validate()
        assert with_lambda(TINY_TRAIN, 0).lam == 0.0


# k-NN ------------------------------------------------------------------------

def knn_reference(gallery, labels, query, k, temperature):
    """Loop-based weighted k-NN; ranking ties go to the lower gallery index."""
    out = []
    gn = [g / np.linalg.norm(g) for g in gallery]
    for q in query:
        qn = q / np.linalg.norm(q)
        sims = [float(np.dot(qn, g)) for g in gn]
        ranked = sorted(range(len(gallery)), key=lambda i: (-sims[i], i))[:k]
        votes = {}
        for i in ranked:
            votes[int(labels[i])] = votes.get(int(labels[i]), 0.0) + math.exp(sims[i] / temperature)
        best = max(votes.values())
        out.append(min(c for c, v in votes.items() if v == best))
    return np.array(out)


class TestKnn:
    @pytest.mark.parametrize("fixture", range(20))
    def test_matches_reference(self, fixture):
        rng = np.random.default_rng(100 + fixture)
        n_gallery = int(rng.integers(30, 400))
        n_query = int(rng.integers(10, 100))
        dim = int(rng.integers(2, 16))
        n_classes = int(rng.integers(2, 12))
        gallery = rng.normal(size=(n_gallery, dim))
        if fixture % 4 == 0:
            # exact duplicates force ranking ties
            gallery[1::2] = gallery[::2][: len(gallery[1::2])]
        labels = rng.integers(n_classes, size=n_gallery)
        query = rng.normal(size=(n_query, dim))
        k = int(rng.integers(1, min(30, n_gallery)))
        got = knn_predict(gallery, labels, query, k, 0.07, n_classes)
        assert np.array_equal(got, knn_reference(gallery, labels, query, k, 0.07))

    def test_self_retrieval(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(50, 8))
        assert knn_absolute_pose(x, np.arange(50), x, np.arange(50), k=1) == (50, 50)

    def test_random_reps_near_chance(self):
        rng = np.random.default_rng(1)
        n = 5000
        gallery = rng.normal(size=(2500, 16))
        query = rng.normal(size=(n, 16))
        correct, total = knn_absolute_pose(gallery, np.arange(2500) % 50, query, np.arange(n) % 50)
        p = 1 / 50
        assert abs(correct / total - p) < 3 * math.sqrt(p * (1 - p) / n)

    def test_class_tie_goes_low(self):
        gallery = np.array([[1.0, 0.0], [1.0, 0.0]])
        assert knn_predict(gallery, np.array([3, 1]), np.array([[1.0, 0.0]]), k=2)[0] == 1

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            knn_predict(np.ones((3, 2)), np.zeros(3, int), np.ones((1, 2)), k=4)


# relative pose -------------------------------------------------------------------

def rotated_prediction(d_az, d_el, angle, rng):
    """Encode a displacement that lies ``angle`` away from the true one."""
    v = displacement_vectors(np.array([d_az]), np.array([d_el]))[0]
    axis = np.cross(v, rng.normal(size=3))
    axis /= np.linalg.norm(axis)
    w = Rotation.from_rotvec(angle * axis).apply(v)
    az, el = math.atan2(w[0], w[2]), math.asin(np.clip(w[1], -1, 1))
    return np.array([[math.cos(az), math.sin(az), el / (math.pi / 2)]])


class TestRelativePose:
    def test_default_tolerance(self):
        assert DEFAULT_THETA_TOL == 0.5 * min_pairwise_angle(in_domain_lattice())
        assert DEFAULT_THETA_TOL == pytest.approx(0.44039046172998164 / 2, abs=1e-12)

    def test_exact_predictions(self):
        poses = poses_from_vectors(in_domain_lattice())
        i, j = sample_pairs(np.random.default_rng(0), 50, 500)
        t = relpose_targets(poses[i], poses[j])
        d_az, d_el = decode_relpose(t)
        assert relpose_accuracy(t, d_az, d_el) == 1.0

    def test_threshold_boundary(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            d_az, d_el = rng.uniform(-math.pi, math.pi), rng.uniform(-1.2, 1.2)
            outside = rotated_prediction(d_az, d_el, DEFAULT_THETA_TOL + 1e-6, rng)
            inside = rotated_prediction(d_az, d_el, DEFAULT_THETA_TOL - 1e-6, rng)
            assert relpose_accuracy(outside, [d_az], [d_el]) == 0.0
            assert relpose_accuracy(inside, [d_az], [d_el]) == 1.0

    def test_targets_of_identity_move(self):
        p = np.array([[0.3, 0.2]])
        np.testing.assert_allclose(relpose_targets(p, p), [[1.0, 0.0, 0.0]])

    def test_sample_pairs_distinct(self):
        i, j = sample_pairs(np.random.default_rng(0), 50, 10000)
        assert np.all(i != j) and i.max() < 50 and j.max() < 50

    def test_frozen_chance_rates(self):
        assert relpose_chance(in_domain_lattice()) == pytest.approx(CHANCE_IN_DOMAIN, abs=1e-12)
        assert relpose_chance(out_of_domain_lattice()) == pytest.approx(CHANCE_OUT_OF_DOMAIN, abs=1e-12)

    @pytest.mark.parametrize("lattice,chance", [(in_domain_lattice(), CHANCE_IN_DOMAIN),
                                                (out_of_domain_lattice(), CHANCE_OUT_OF_DOMAIN)])
    def test_chance_independent_estimate(self, lattice, chance):
        # a second estimate with its own generator and an explicit angle formula
        rng = np.random.default_rng(12345)
        n = 100_000
        poses = poses_from_vectors(lattice)
        idx = rng.integers(len(lattice), size=(n, 4))
        keep = (idx[:, 0] != idx[:, 1]) & (idx[:, 2] != idx[:, 3])
        idx = idx[keep]
        t, g = poses[idx[:, 1]] - poses[idx[:, 0]], poses[idx[:, 3]] - poses[idx[:, 2]]
        vt = displacement_vectors(np.arctan2(np.sin(t[:, 0]), np.cos(t[:, 0])), t[:, 1])
        vg = displacement_vectors(np.arctan2(np.sin(g[:, 0]), np.cos(g[:, 0])), g[:, 1])
        est = np.mean(np.arccos(np.clip(np.sum(vt * vg, axis=1), -1, 1)) < DEFAULT_THETA_TOL)
        assert abs(est - chance) < 4 * math.sqrt(chance * (1 - chance) / len(idx))


# probes --------------------------------------------------------------------------

def fake_views(manifest, domain, split, pose_set="in_domain"):
    insts = manifest.select(domain, split)
    n = len(manifest.poses(pose_set))
    index = np.stack([np.repeat([i.category for i in insts], n), np.repeat([i.index for i in insts], n),
                      np.tile(np.arange(n), len(insts))], axis=1)
    return ViewSet(insts, pose_set, n, None, index)


class TestProbes:
    def test_one_hot_semantic_probe(self):
        labels = np.arange(200) % 8
        x = np.eye(8, dtype=np.float32)[labels]
        spec = HeadSpec("linear_probe", 8, 8, 8)
        params = fit_probe(spec, x, labels, "ce", epochs=50, batch=32, lr=0.5, momentum=0.9, seed=0)
        assert np.all(probe_predict(spec, params, x).argmax(axis=1) == labels)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(64, 6)).astype(np.float32), rng.normal(size=(64, 3))
        spec = HeadSpec("relpose_probe", 6, 6, 3)
        a = fit_probe(spec, x, y, "mse", 3, 16, 0.01, 0.9, seed=4)
        b = fit_probe(spec, x, y, "mse", 3, 16, 0.01, 0.9, seed=4)
        assert all(a[k].data.tobytes() == b[k].data.tobytes() for k in a)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            fit_probe(HeadSpec("linear_probe", 2, 2, 2), np.zeros((3, 2), np.float32), np.zeros(2, int),
                      "ce", 1, 2, 0.1, 0.9, 0)

    def test_probe_on_noise_never_beats_chance(self, tiny_manifest):
        # a regression probe on uninformative inputs shrinks towards the mean
        # displacement, so it lands at or below the random-guess rate
        from trajssl.data.manifest import DatasetConfig, build_manifest
        m = build_manifest(DatasetConfig(), seed=0)
        lattice = m.poses("in_domain")
        rng = np.random.default_rng(0)
        tr, te = fake_views(m, "in_domain", "train"), fake_views(m, "in_domain", "test")
        x_tr, y_tr, _ = pair_dataset(tr, rng.normal(size=(len(tr.index), 32)), lattice, 32, 0, "train")
        x_te, _, (d_az, d_el) = pair_dataset(te, rng.normal(size=(len(te.index), 32)), lattice, 64, 0, "test")
        x_tr, x_te = standardize(x_tr, x_te)
        spec = HeadSpec("relpose_probe", 64, 64, 3)
        params = fit_probe(spec, x_tr, y_tr, "mse", 10, 256, 0.01, 0.9, 0)
        acc = relpose_accuracy(probe_predict(spec, params, x_te), d_az, d_el)
        n = len(x_te)
        assert acc <= CHANCE_IN_DOMAIN + 3 * math.sqrt(CHANCE_IN_DOMAIN * (1 - CHANCE_IN_DOMAIN) / n)

    def test_pairs_share_instance(self, tiny_manifest):
        views = fake_views(tiny_manifest, "in_domain", "train")
        reps = np.repeat(views.index[:, 1:2].astype(float), 4, axis=1)
        x, y, _ = pair_dataset(views, reps, tiny_manifest.poses("in_domain"), 8, 0, "train")
        assert np.array_equal(x[:, 0], x[:, 4])
        assert x.shape == (len(views.instances) * 8, 8) and y.shape == (len(x), 3)


# representations and scenarios -----------------------------------------------------

@pytest.fixture(scope="module")
def tiny_evaluator(tiny_manifest, tiny_source):
    return Evaluator(Model(seed=1), tiny_manifest, TINY_EVAL, seed=1, source=tiny_source)


class TestRepresentations:
    def test_widths(self, tiny_evaluator):
        images = tiny_evaluator.views("in_domain", "test", "in_domain").images[:3]
        model = tiny_evaluator.model
        widths = {layer: extract_representations(model, images, layer).shape[1] for layer in LAYERS}
        assert widths == {"feature": 64, "conv3": 512, "conv4": 256, "compressed_conv3": 64,
                          "compressed_conv4": 64, "patch_m1": 64, "patch_m3": 576, "patch_m4": 1024}

    def test_unknown_layer(self, tiny_evaluator):
        with pytest.raises(ValueError, match="valid layers"):
            extract_representations(tiny_evaluator.model, np.zeros((1, 32, 32)), "conv5")

    def test_threads_match_sequential(self, tiny_evaluator):
        images = tiny_evaluator.views("in_domain", "train", "in_domain").images
        a = encode_layers(tiny_evaluator.model, images, ["feature", "conv3"], batch=64, jobs=1)
        b = encode_layers(tiny_evaluator.model, images, ["feature", "conv3"], batch=64, jobs=3)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_patch_m1_is_identity(self):
        img = np.random.default_rng(0).uniform(size=(2, 32, 32)).astype(np.float32)
        assert np.array_equal(patch_images(img, 1), img)
        assert patch_images(img, 4).shape == (32, 32, 32)
        with pytest.raises(ValueError):
            patch_images(img, 2)

    def test_index_rows(self, tiny_evaluator):
        views = tiny_evaluator.views("out_of_domain", "test", "in_domain")
        assert len(views.images) == len(views.instances) * 50
        assert list(views.index[:3, 2]) == [0, 1, 2]


class TestScenarios:
    def test_routing(self, tiny_evaluator, tiny_manifest):
        ev = tiny_evaluator
        n_test_in = len(tiny_manifest.select("in_domain", "test"))
        n_test_out = len(tiny_manifest.select("out_of_domain", "test"))
        assert ev.run("in_domain_abs", "feature").n_eval == n_test_in * 50
        assert ev.run("semantic_cls", "feature").n_eval == n_test_in * 50
        assert ev.run("unseen_pose_rel", "feature").n_eval == n_test_in * TINY_EVAL.eval_pairs
        assert ev.views("in_domain", "test", "out_of_domain").n_poses == 100
        assert ev.run("unseen_semantic_rel", "feature").n_eval == n_test_out * TINY_EVAL.eval_pairs
        assert {i.domain for i in ev.views("out_of_domain", "train", "in_domain").instances} == {"out_of_domain"}

    def test_reproducible(self, tiny_manifest, tiny_source):
        def records():
            ev = Evaluator(Model(seed=2), tiny_manifest, TINY_EVAL, seed=2, source=tiny_source)
            return [ev.run(kind, "feature") for kind in SCENARIOS]
        assert metrics_csv(records()) == metrics_csv(records())

    def test_patch_m1_matches_feature(self, tiny_evaluator):
        a = tiny_evaluator.run("in_domain_rel", "feature")
        b = patch_embedding_eval(tiny_evaluator, 1)
        assert (a.correct, a.n_eval) == (b.correct, b.n_eval)
        with pytest.raises(ValueError):
            patch_embedding_eval(tiny_evaluator, 2)

    def test_unknown_scenario(self, tiny_evaluator):
        with pytest.raises(ValueError):
            tiny_evaluator.run("depth", "feature")

    def test_leakage_guard(self, tiny_manifest, tiny_source):
        ev = Evaluator(Model(seed=1), tiny_manifest, TINY_EVAL, source=tiny_source)
        test_views = ev.views("in_domain", "test", "in_domain")
        ev._views[("in_domain", "train", "in_domain")] = test_views
        with pytest.raises(AssertionError):
            ev.run("in_domain_abs", "feature")


# metrics and reports -------------------------------------------------------------

class TestMetrics:
    def test_accuracy_is_exact_ratio(self):
        r = MetricsRecord("in_domain_abs", "feature", 7, 9, 0)
        assert r.accuracy == 7 / 9
        with pytest.raises(ValueError):
            MetricsRecord("x", "y", 5, 4, 0)

    def test_csv_layout(self):
        recs = [MetricsRecord("in_domain_abs", "feature", 1, 4, 3, wall_time=1.5)]
        text = metrics_csv(recs)
        assert text == "scenario,layer,accuracy,n_eval,seed,wall_time_s\nin_domain_abs,feature,0.25,4,3,\n"
        assert metrics_csv(recs, timings=True).endswith(",1.500\n")

    def test_round_trip(self, tmp_path):
        recs = [MetricsRecord("semantic_cls", "conv3", 3, 8, 1), MetricsRecord("in_domain_rel", "feature", 0, 2, 1)]
        write_metrics(tmp_path, recs)
        assert read_metrics(tmp_path) == recs

    def test_files_ignore_wall_time_unless_asked(self, tmp_path):
        fast = [MetricsRecord("in_domain_abs", "feature", 1, 4, 3, wall_time=0.1)]
        slow = [MetricsRecord("in_domain_abs", "feature", 1, 4, 3, wall_time=9.0)]
        write_metrics(tmp_path / "a", fast)
        write_metrics(tmp_path / "b", slow)
        for name in ("metrics.csv", "metrics.json"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        write_metrics(tmp_path / "c", slow, timings=True)
        assert read_metrics(tmp_path / "c")[0].wall_time == 9.0

    def test_embeddings_round_trip(self, tmp_path):
        mat = np.arange(12, dtype=np.float32).reshape(3, 4)
        dump_embeddings(tmp_path / "e", mat, [[0, 1, 2], [0, 1, 3], [1, 0, 0]], {"layer": "feature"})
        back, index = load_embeddings(tmp_path / "e")
        assert np.array_equal(back, mat) and index[1] == [0, 1, 3]
        assert (tmp_path / "e.f32").stat().st_size == 48

    def test_single_run_report(self):
        recs = [MetricsRecord("in_domain_abs", "feature", 3, 10, 0)]
        rows, warnings = merge_runs([("traj", 0, recs)])
        assert not warnings
        assert rows[0].mean == 0.3 and rows[0].std == 0.0 and rows[0].delta is None

    def test_delta_over_seeds(self):
        runs = []
        for seed, (b, t) in enumerate([(10, 14), (12, 13), (11, 15)]):
            runs.append(("baseline", seed, [MetricsRecord("in_domain_abs", "feature", b, 100, seed)]))
            runs.append(("traj", seed, [MetricsRecord("in_domain_abs", "feature", t, 100, seed)]))
        rows, warnings = merge_runs(runs)
        assert not warnings
        traj = next(r for r in rows if r.method == "traj")
        assert traj.delta == pytest.approx(np.mean([0.14, 0.13, 0.15]) - np.mean([0.10, 0.12, 0.11]), abs=1e-15)
        assert traj.n_runs == 3
        assert "delta_vs_baseline" in report_csv(rows).splitlines()[0]
        assert "+3.00" in report_text(rows)

    def test_seed_mismatch_warns(self):
        rec = lambda s: [MetricsRecord("in_domain_abs", "feature", 1, 2, s)]
        rows, warnings = merge_runs([("baseline", 0, rec(0)), ("traj", 1, rec(1))])
        assert warnings and len(rows) == 2
