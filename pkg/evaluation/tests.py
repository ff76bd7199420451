import itertools
import json
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
import openpyxl
from django.core.management import call_command
from django.test import SimpleTestCase, TestCase

from aggregation.training import SlidePair
from contextualizer.config import desk_config
from contextualizer.network import contextualize, contextualize_isolated_batch
from contextualizer.params import init_params
from evaluation.benchmark import contextualize_windows, slide_benchmark, split_by_slide, tile_features
from evaluation.models import EvalResult
from evaluation.probes import (
    EvalReport, ProbeDataset, balanced_accuracy, class_weights, fit_logistic, knn_predict, knn_probe, linear_probe,
    macro_f1, pair_auc, pairwise_distances, pca_ridge, ridge_fit,
)
from evaluation.reporting import comparison_table, export_pdf, export_xlsx, load_results, records_from_db, render_text
from slides.grids import EmbeddingGrid
from ticon_lab.exceptions import ConfigError, DataError, DatasetError, MetricError, RegistryError, ShapeError

SLIDE_EVAL = {'train_fraction': 0.5, 'val_fraction': 0.25, 'probe_cost': 0.5, 'probe_iters': 200}


def clustered(rng, n_per_class, classes, dim=6, spread=0.2):
    centers = rng.standard_normal((classes, dim)) * 3.0
    labels = np.repeat(np.arange(classes), n_per_class)
    return centers[labels] + spread * rng.standard_normal((len(labels), dim)), labels


def three_way_split(n, rng):
    split = np.array(['train', 'val', 'test'] * (n // 3 + 1))[:n]
    return split[rng.permutation(n)]


class MetricTests(SimpleTestCase):
    def test_macro_f1(self):
        self.assertEqual(macro_f1([0, 1, 2], [0, 1, 2]), 1.0)
        self.assertEqual(macro_f1([0, 0], [1, 1]), 0.0)
        # class 0: tp 1 fp 0 fn 1 -> 2/3, class 1: tp 1 fp 1 fn 0 -> 2/3
        self.assertAlmostEqual(macro_f1([0, 0, 1], [0, 1, 1]), 2 / 3)

    def test_balanced_accuracy(self):
        self.assertAlmostEqual(balanced_accuracy([0, 0, 0, 1], [0, 0, 0, 0]), 0.5)
        self.assertEqual(balanced_accuracy([1, 0], [1, 0]), 1.0)

    def test_pair_auc(self):
        self.assertEqual(pair_auc([0.9, 0.8, 0.1], [1, 1, 0]), 1.0)
        self.assertEqual(pair_auc([0.5, 0.5], [1, 0]), 0.5)
        with self.assertRaises(MetricError):
            pair_auc([0.1, 0.2], [1, 1])

    def test_report_range(self):
        EvalReport('spot', 'raw', 'pcc_mean', -0.3, 1.0, 0)
        with self.assertRaises(MetricError):
            EvalReport('tile', 'raw', 'f1_macro', 1.2, 1, 0)
        with self.assertRaises(MetricError):
            EvalReport('tile', 'raw', 'accuracy', 0.5, 1, 0)


class DatasetTests(SimpleTestCase):
    def test_shapes_and_splits(self):
        with self.assertRaises(ShapeError):
            ProbeDataset(np.zeros((3, 2)), np.zeros(2), np.array(['train'] * 3))
        with self.assertRaises(DatasetError):
            ProbeDataset(np.zeros((2, 2)), np.zeros(2), np.array(['train', 'holdout']))
        ds = ProbeDataset(np.zeros((2, 2)), np.zeros(2), np.array(['train', 'val']))
        with self.assertRaises(DatasetError):
            ds.rows('test')

    def test_split_by_slide(self):
        ids = [f'slide{i:03d}' for i in range(10)]
        assignment = split_by_slide(ids, 0.6, 0.2, seed=4)
        self.assertEqual(assignment, split_by_slide(ids, 0.6, 0.2, seed=4))
        self.assertEqual(sorted(assignment.values()).count('train'), 6)
        self.assertEqual(set(assignment.values()), {'train', 'val', 'test'})
        self.assertEqual(set(split_by_slide(ids[:3], 0.9, 0.1, seed=1).values()), {'train', 'val', 'test'})
        with self.assertRaises(ConfigError):
            split_by_slide(ids[:2], 0.5, 0.25, seed=1)


class KnnTests(SimpleTestCase):
    def test_distances(self):
        q = np.array([[1.0, 0.0]])
        r = np.array([[2.0, 0.0], [0.0, 3.0], [-1.0, 0.0]])
        np.testing.assert_allclose(pairwise_distances(q, r), [[0.0, 1.0, 2.0]], atol=1e-12)
        np.testing.assert_allclose(pairwise_distances(q, r, 'euclidean'), [[1.0, np.sqrt(10.0), 2.0]])
        with self.assertRaises(ConfigError):
            pairwise_distances(q, r, 'manhattan')

    def test_one_nearest_neighbor_recovers_train_labels(self):
        x, y = clustered(np.random.default_rng(0), 10, 3)
        np.testing.assert_array_equal(knn_predict(x, y, x, 1), y)

    def test_tied_vote_goes_to_closer_class(self):
        train_x = np.array([[1.0, 0.1], [1.0, -0.1], [0.0, 1.0], [-0.2, 1.0]])
        train_y = np.array([0, 0, 1, 1])
        self.assertEqual(knn_predict(train_x, train_y, np.array([[1.0, 0.3]]), 4)[0], 0)
        self.assertEqual(knn_predict(train_x, train_y, np.array([[0.3, 1.0]]), 4)[0], 1)

    def test_six_points_match_brute_force(self):
        train_x = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 2.0], [3.0, 0.0], [2.0, 2.0], [-1.0, -1.0]])
        train_y = np.array([0, 0, 1, 1, 1, 0])
        queries = np.array([[0.4, 0.1], [2.1, 1.2], [1.2, 1.7]])
        expected = []
        for q in queries:
            # the 3 nearest points are the 3-subset with the smallest summed distance
            nearest = min(itertools.combinations(range(6), 3),
                          key=lambda subset: sum(np.linalg.norm(train_x[i] - q) for i in subset))
            expected.append(int(np.bincount(train_y[list(nearest)], minlength=2).argmax()))
        self.assertEqual(expected, [0, 1, 1])
        np.testing.assert_array_equal(knn_predict(train_x, train_y, queries, 3, distance='euclidean'), expected)

    def test_random_labels_score_at_chance(self):
        scores = []
        for seed in range(20):
            rng = np.random.default_rng(100 + seed)
            x = rng.standard_normal((400, 8))
            y = rng.permutation(np.repeat([0, 1], 200))
            scores.append(knn_probe(ProbeDataset(x, y, three_way_split(400, rng)), ks=[1, 5, 15]).value)
        self.assertTrue(0.45 <= np.mean(scores) <= 0.55, np.mean(scores))

    def test_knn_probe_on_separable_clusters(self):
        rng = np.random.default_rng(1)
        x, y = clustered(rng, 30, 4)
        report = knn_probe(ProbeDataset(x, y, three_way_split(len(y), rng)), ks=[1, 5, 20])
        self.assertEqual(report.metric, 'f1_macro')
        self.assertGreaterEqual(report.value, 0.95)
        self.assertIn(report.chosen, [1, 5, 20])

    def test_class_without_train_rows(self):
        x = np.arange(8.0).reshape(4, 2)
        ds = ProbeDataset(x, np.array([0, 0, 0, 1]), np.array(['train', 'train', 'val', 'test']))
        with self.assertRaises(DatasetError):
            knn_probe(ds, ks=[1])


class RidgeTests(SimpleTestCase):
    def test_zero_lambda_is_least_squares(self):
        rng = np.random.default_rng(2)
        z, y = rng.standard_normal((40, 5)), rng.standard_normal((40, 2))
        coef, intercept = ridge_fit(z, y, 0.0)
        design = np.hstack([z, np.ones((40, 1))])
        solution, *_ = np.linalg.lstsq(design, y, rcond=None)
        np.testing.assert_allclose(coef, solution[:5], atol=1e-10)
        np.testing.assert_allclose(intercept, solution[5], atol=1e-10)

    def test_linear_targets(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((90, 8))
        y = x @ rng.standard_normal((8, 3)) + 0.01 * rng.standard_normal((90, 3))
        report = pca_ridge(ProbeDataset(x, y, three_way_split(90, rng), classification=False), 8, [0.1, 1.0, 10.0])
        self.assertEqual(report.metric, 'pcc_mean')
        self.assertGreaterEqual(report.value, 0.99)

    def test_constant_target(self):
        rng = np.random.default_rng(4)
        x = rng.standard_normal((30, 4))
        y = np.ones((30, 1))
        with self.assertRaises(MetricError):
            pca_ridge(ProbeDataset(x, y, three_way_split(30, rng), classification=False), 4, [1.0])


class LinearProbeTests(SimpleTestCase):
    def test_class_weights(self):
        weights = class_weights(np.array([0, 0, 0, 1]), np.array([0, 1]))
        self.assertAlmostEqual(weights.mean(), 1.0)
        self.assertAlmostEqual(weights[1] / weights[0], 3.0)

    def test_separable_imbalanced_classes(self):
        rng = np.random.default_rng(5)
        x = np.vstack([rng.standard_normal((45, 4)) + 3.0, rng.standard_normal((15, 4)) - 3.0])
        y = np.array([0] * 45 + [1] * 15)
        report = linear_probe(ProbeDataset(x, y, three_way_split(60, rng)), costs=(0.5, 2.0), iters=200)
        self.assertEqual(report.metric, 'balanced_accuracy')
        self.assertGreaterEqual(report.value, 0.95)
        self.assertGreaterEqual(report.extra['auc'], 0.95)

    def test_gradient_descent_reaches_the_optimum(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((60, 2))
        y = (x[:, 0] + 0.8 * rng.standard_normal(60) > 0).astype(int)
        classes = np.array([0, 1])
        weight, bias = fit_logistic(x, y, classes, cost=0.5, iters=3000)
        # stationarity of the class-weighted, penalized objective, computed directly
        w = class_weights(y, classes)[y]
        w = w / w.sum()
        logits = x @ weight + bias
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        residual = w[:, None] * (p - np.eye(2)[y])
        self.assertLess(np.abs(x.T @ residual + weight / (0.5 * len(y))).max(), 1e-6)
        self.assertLess(np.abs(residual.sum(axis=0)).max(), 1e-6)

    def test_single_class(self):
        ds = ProbeDataset(np.eye(3), np.zeros(3), np.array(['train', 'val', 'test']))
        with self.assertRaises(DatasetError):
            linear_probe(ds)


class FeatureVariantTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(6)
        self.params = init_params(desk_config({'a': 3}, d_model=8, encoder_depth=1, heads=2), 0)
        validity = rng.random((5, 6)) < 0.8
        self.grid = EmbeddingGrid('a', rng.standard_normal((5, 6, 3)), validity)

    def test_raw(self):
        self.assertIs(tile_features(self.grid, 'raw'), self.grid.embeddings)

    def test_contextual_variants_need_a_model(self):
        with self.assertRaises(ConfigError):
            tile_features(self.grid, 'ctx')
        with self.assertRaises(RegistryError):
            tile_features(self.grid, 'iso', self.params, 'zzz')
        with self.assertRaises(ConfigError):
            tile_features(self.grid, 'mixed', self.params, 'a')

    def test_concatenated_halves_are_unit_length(self):
        for variant in ('iso', 'ctx'):
            features = tile_features(self.grid, variant, self.params, 'a')
            self.assertEqual(features.shape, (5, 6, 11))
            valid = features[self.grid.validity]
            np.testing.assert_allclose(np.linalg.norm(valid[:, :3], axis=1), 1.0, atol=1e-12)
            np.testing.assert_allclose(np.linalg.norm(valid[:, 3:], axis=1), 1.0, atol=1e-12)
            self.assertFalse(np.any(features[~self.grid.validity]))

    def test_iso_ignores_neighbors(self):
        features = tile_features(self.grid, 'iso', self.params, 'a')
        single = contextualize_isolated_batch(self.params, 'a', self.grid.embeddings[self.grid.validity])
        norms = np.linalg.norm(single, axis=1, keepdims=True)
        np.testing.assert_allclose(features[self.grid.validity][:, 3:], single / norms, atol=1e-12)

    def test_context_windows(self):
        whole = contextualize(self.params, 'a', self.grid).embeddings
        np.testing.assert_array_equal(contextualize_windows(self.params, 'a', self.grid, 0).embeddings, whole)
        np.testing.assert_allclose(contextualize_windows(self.params, 'a', self.grid, 8).embeddings, whole,
                                   atol=1e-12)
        ones = contextualize_windows(self.params, 'a', self.grid, 1).embeddings[self.grid.validity]
        iso = contextualize_isolated_batch(self.params, 'a', self.grid.embeddings[self.grid.validity])
        np.testing.assert_allclose(ones, iso, atol=1e-12)


class SlideBenchmarkTests(SimpleTestCase):
    def setUp(self):
        rng = np.random.default_rng(7)
        self.pairs = []
        for n in range(40):
            label = n % 2
            tokens = rng.standard_normal((12, 4)) + (2.0 if label else -2.0)
            self.pairs.append(SlidePair(f'slide{n:03d}', tokens, rng.standard_normal(6), label, 'a'))

    def test_meanpool_probe(self):
        report = slide_benchmark(self.pairs, 'meanpool', SLIDE_EVAL, seed=3, variant='raw')
        self.assertEqual(report.variant, 'meanpool:raw')
        self.assertEqual(report.extra['pooling'], 'meanpool')
        self.assertGreaterEqual(report.value, 0.9)

    def test_pooling_choices(self):
        with self.assertRaises(ConfigError):
            slide_benchmark(self.pairs, 'tangle', SLIDE_EVAL, seed=3)
        with self.assertRaises(ConfigError):
            slide_benchmark(self.pairs, 'maxpool', SLIDE_EVAL, seed=3)


def sample_records():
    records = []
    for seed, shift in ((0, 0.0), (1, 0.02)):
        for variant, value in (('raw', 0.50), ('iso', 0.55), ('ctx', 0.80)):
            records.append({'task': 'tile-aliased', 'variant': variant, 'metric': 'f1_macro',
                            'value': value + shift, 'seed': seed, 'extra': {'encoder': 'enc48', 'window': 0}})
    records.append({'task': 'slide', 'variant': 'tangle:ctx', 'metric': 'balanced_accuracy', 'value': 0.9,
                    'seed': 0, 'extra': {'encoder': 'enc48'}})
    records.append({'task': 'slide', 'variant': 'meanpool:ctx', 'metric': 'balanced_accuracy', 'value': 0.7,
                    'seed': 0, 'extra': {'encoder': 'enc48'}})
    return records


class ReportingTests(SimpleTestCase):
    def test_comparison_table(self):
        table = comparison_table(sample_records())
        self.assertEqual(table['variants'][:3], ['raw', 'iso', 'ctx'])
        rows = {row['task']: row for row in table['rows']}
        tile = rows['tile-aliased']
        self.assertEqual(tile['seeds'], 2)
        self.assertAlmostEqual(tile['values']['ctx'], 0.81)
        self.assertAlmostEqual(tile['deltas']['ctx-raw'], 0.30)
        self.assertAlmostEqual(tile['deltas']['ctx-iso'], 0.25)
        self.assertAlmostEqual(rows['slide']['deltas']['tangle:ctx-meanpool:ctx'], 0.2)
        self.assertNotIn('ctx-raw', rows['slide']['deltas'])

    def test_render_text(self):
        text = render_text(comparison_table(sample_records()))
        lines = text.splitlines()
        self.assertTrue(lines[0].startswith('Task'))
        self.assertIn('0.8100', text)
        self.assertIn('Δ ctx-raw', lines[0])

    def test_load_results(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'results.jsonl'
            path.write_text(''.join(json.dumps(r) + '\n' for r in sample_records()))
            self.assertEqual(len(load_results([tmp])), 8)
            with self.assertRaises(DataError):
                load_results([Path(tmp) / 'missing'])

    def test_exports(self):
        table = comparison_table(sample_records())
        with tempfile.TemporaryDirectory() as tmp:
            xlsx = export_xlsx(table, Path(tmp) / 'report.xlsx')
            sheet = openpyxl.load_workbook(xlsx).active
            self.assertEqual(sheet.title, 'Comparison')
            self.assertEqual(sheet.cell(row=4, column=1).value, 'Task')
            self.assertEqual(sheet.cell(row=5, column=1).value, 'slide')
            pdf = export_pdf(table, Path(tmp) / 'report.pdf')
            self.assertTrue(pdf.read_bytes().startswith(b'%PDF'))


class EvalResultTests(TestCase):
    def setUp(self):
        for variant, value in (('raw', 0.5), ('ctx', 0.75)):
            EvalResult.objects.create(
                task='tile', variant=variant, metric='f1_macro', value=value, chosen=5, encoder='enc64',
                seed=0, output_dir='runs/eval', extra={'val': value},
            )

    def test_str(self):
        self.assertEqual(str(EvalResult.objects.get(variant='ctx')), 'Tile classification ctx f1_macro=0.7500')

    def test_records_from_db(self):
        table = comparison_table(records_from_db(EvalResult.objects.all()))
        self.assertAlmostEqual(table['rows'][0]['deltas']['ctx-raw'], 0.25)
        self.assertEqual(table['rows'][0]['encoder'], 'enc64')

    def test_report_command_reads_the_registry(self):
        with tempfile.TemporaryDirectory() as tmp:
            stdout = StringIO()
            call_command('report', out=tmp, stdout=stdout)
            self.assertIn('enc64', stdout.getvalue())
            self.assertTrue((Path(tmp) / 'report.json').exists())
            self.assertTrue((Path(tmp) / 'report.txt').exists())
