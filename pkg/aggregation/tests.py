import json
import math
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, tag

from aggregation.abmil import (
    AbmilConfig, abmil_forward, abmil_forward_batch, abmil_from_arrays, abmil_shapes, embed_slides, gene_forward,
    init_abmil, meanpool_slide, pad_bags, retrieval_top1, tangle_loss,
)
from aggregation.training import (
    AggregateConfig, SlidePair, build_pairs, load_aggregator, pretrain_aggregator, sample_tokens,
)
from contextualizer.checkpoint import save_checkpoint
from contextualizer.config import desk_config
from contextualizer.params import init_params
from numerics import functional as F
from numerics.gradcheck import grad_check
from slides.encoders import EncoderRegistry, encode_tiles
from slides.store import SlideStore
from slides.synth import SynthConfig, generate_slide
from ticon_lab.exceptions import BatchError, ConfigError, EmptyInputError, FormatError, RangeError, ShapeError

SMALL = AbmilConfig(in_dim=3, genes=4, hidden=4, heads=2, slide_dim=3)


def paired_slides(count, seed=0, tokens=10, dim=6, genes=5, noise=0.1):
    """Bags whose tokens and gene vectors are two linear views of one slide latent."""
    rng = np.random.default_rng(seed)
    to_tokens = rng.standard_normal((4, dim))
    to_genes = rng.standard_normal((4, genes))
    pairs = []
    for n in range(count):
        z = rng.standard_normal(4)
        bag = z @ to_tokens + noise * rng.standard_normal((tokens, dim))
        pairs.append(SlidePair(f'slide{n:03d}', bag, z @ to_genes, int(z[0] > 0), 'enc48'))
    return pairs


class AbmilTests(SimpleTestCase):
    def setUp(self):
        self.params = init_abmil(SMALL, seed=1)
        self.tiles = np.random.default_rng(2).standard_normal((5, 3))

    def test_same_seed_same_weights(self):
        other = init_abmil(SMALL, seed=1)
        for name in self.params.names():
            np.testing.assert_array_equal(self.params[name].data, other[name].data)
        self.assertEqual(self.params.num_params(), sum(int(np.prod(s)) for _, s in abmil_shapes(SMALL)))

    def test_tanh_attention_has_no_gate(self):
        names = [n for n, _ in abmil_shapes(AbmilConfig(in_dim=3, genes=4, attention='tanh'))]
        self.assertNotIn('attn.0.U', names)
        self.assertIn('attn.0.U', [n for n, _ in abmil_shapes(SMALL)])
        with self.assertRaises(ConfigError):
            AbmilConfig(in_dim=3, genes=4, attention='softmax')
        with self.assertRaises(RangeError):
            AbmilConfig(in_dim=3, genes=4, temperature=0.0)

    def test_single_tile(self):
        _, attention = abmil_forward(self.params, self.tiles[:1])
        for weights in attention:
            np.testing.assert_array_equal(weights, [1.0])

    def test_attention_is_a_distribution(self):
        _, attention = abmil_forward(self.params, self.tiles)
        self.assertEqual(len(attention), SMALL.heads)
        for weights in attention:
            self.assertAlmostEqual(weights.sum(), 1.0, places=12)
            self.assertTrue(np.all(weights >= 0))

    def test_permutation_invariance(self):
        slide, attention = abmil_forward(self.params, self.tiles)
        perm = np.array([4, 2, 0, 3, 1])
        permuted, permuted_attention = abmil_forward(self.params, self.tiles[perm])
        np.testing.assert_allclose(permuted.data, slide.data, atol=1e-12)
        np.testing.assert_allclose(permuted_attention[0], attention[0][perm], atol=1e-12)

    def test_duplicating_every_tile(self):
        slide, _ = abmil_forward(self.params, self.tiles)
        doubled, _ = abmil_forward(self.params, np.vstack([self.tiles, self.tiles]))
        np.testing.assert_allclose(doubled.data, slide.data, atol=1e-12)

    def test_padding_is_ignored(self):
        bags = [self.tiles, self.tiles[:2]]
        tiles, mask = pad_bags(bags)
        slides, attention = abmil_forward_batch(self.params, tiles, mask)
        for i, bag in enumerate(bags):
            np.testing.assert_allclose(slides.data[i], abmil_forward(self.params, bag)[0].data, atol=1e-12)
        self.assertFalse(np.any(attention[0][1, 2:]))
        np.testing.assert_allclose(embed_slides(self.params, bags, chunk=1), slides.data, atol=1e-12)

    def test_bad_bags(self):
        with self.assertRaises(EmptyInputError):
            abmil_forward(self.params, np.zeros((0, 3)))
        with self.assertRaises(ShapeError):
            abmil_forward(self.params, np.zeros((4, 5)))
        with self.assertRaises(EmptyInputError):
            abmil_forward_batch(self.params, np.zeros((2, 3, 3)), np.array([[True] * 3, [False] * 3]))
        with self.assertRaises(ShapeError):
            gene_forward(self.params, np.zeros((2, 7)))

    def test_gradients(self):
        rng = np.random.default_rng(3)
        tiles = rng.standard_normal((2, 3, 3))
        mask = np.array([[True, True, True], [True, True, False]])
        genes = rng.standard_normal((2, 4))

        def loss_through(name):
            def f(value):
                self.params.tensors[name] = value
                slide, _ = abmil_forward_batch(self.params, tiles, mask)
                return tangle_loss(slide, gene_forward(self.params, genes), SMALL.temperature)
            return f

        for name in ('pre.0.w', 'attn.0.V', 'attn.1.U', 'attn.0.w', 'proj.w', 'gene.2.w'):
            with self.subTest(tensor=name):
                original = self.params[name]
                try:
                    self.assertLessEqual(grad_check(loss_through(name), original.data), 1e-4)
                finally:
                    self.params.tensors[name] = original

    def test_missing_tensor(self):
        arrays = self.params.arrays()
        arrays.pop('proj.b')
        with self.assertRaises(FormatError):
            abmil_from_arrays(SMALL, arrays)


class TangleLossTests(SimpleTestCase):
    def setUp(self):
        self.rng = np.random.default_rng(4)

    def test_non_negative(self):
        for _ in range(5):
            s, g = self.rng.standard_normal((8, 6)), self.rng.standard_normal((8, 6))
            self.assertGreaterEqual(tangle_loss(s, g, 0.1).item(), 0.0)

    def test_matched_orthogonal_rows(self):
        batch, temperature = 6, 0.05
        basis = np.eye(batch) * 3.0
        expected = math.log(1.0 + (batch - 1) * math.exp(-1.0 / temperature))
        self.assertAlmostEqual(tangle_loss(basis, basis, temperature).item(), expected, places=12)

    def test_random_pairs_near_log_batch(self):
        s, g = self.rng.standard_normal((32, 1024)), self.rng.standard_normal((32, 1024))
        self.assertLess(abs(tangle_loss(s, g, 0.1).item() - math.log(32)), 0.3)

    def test_rotation_invariance(self):
        s, g = self.rng.standard_normal((8, 5)), self.rng.standard_normal((8, 5))
        q, _ = np.linalg.qr(self.rng.standard_normal((5, 5)))
        self.assertAlmostEqual(tangle_loss(s @ q, g @ q, 0.1).item(), tangle_loss(s, g, 0.1).item(), places=12)

    def test_bad_inputs(self):
        s = self.rng.standard_normal((4, 3))
        with self.assertRaises(BatchError):
            tangle_loss(s[:1], s[:1], 0.1)
        with self.assertRaises(RangeError):
            tangle_loss(s, s, 0.0)
        with self.assertRaises(ShapeError):
            tangle_loss(s, s[:, :2], 0.1)

    def test_retrieval_top1(self):
        s = self.rng.standard_normal((5, 4))
        self.assertEqual(retrieval_top1(s, 2.0 * s), 1.0)
        self.assertEqual(retrieval_top1(s, np.roll(s, 1, axis=0)), 0.0)

    def test_loss_gradient(self):
        g = self.rng.standard_normal((4, 3))
        self.assertLessEqual(grad_check(lambda s: tangle_loss(s, g, 0.2), self.rng.standard_normal((4, 3))), 1e-5)
        self.assertLessEqual(grad_check(lambda x: tangle_loss(g, F.tanh(x), 0.2), self.rng.standard_normal((4, 3))),
                             1e-5)


class MeanPoolTests(SimpleTestCase):
    def test_mean(self):
        np.testing.assert_array_equal(meanpool_slide([[1.0, 2.0], [3.0, 6.0]]), [2.0, 4.0])
        with self.assertRaises(EmptyInputError):
            meanpool_slide(np.zeros((0, 2)))


class SampleTokenTests(SimpleTestCase):
    def test_subsampling(self):
        tokens = np.arange(40.0).reshape(20, 2)
        self.assertIs(sample_tokens(tokens, 20, 0, 's'), tokens)
        kept = sample_tokens(tokens, 5, 0, 's')
        self.assertEqual(kept.shape, (5, 2))
        np.testing.assert_array_equal(kept, sample_tokens(tokens, 5, 0, 's'))
        self.assertTrue(np.all(np.diff(kept[:, 0]) > 0))


class BuildPairsTests(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        synth = SynthConfig(rows=12, cols=12)
        self.registry = EncoderRegistry.from_settings(synth.latent_dim)
        self.store = SlideStore(self.tmp.name)
        self.slide_ids = [f'slide{i:03d}' for i in range(3)]
        for n, slide_id in enumerate(self.slide_ids):
            slide = generate_slide(n, synth, slide_id=slide_id)
            self.store.save_slide(slide)
            for encoder_id in ('enc48', 'enc64'):
                self.store.save_grid(slide_id, encode_tiles(slide, encoder_id, self.registry))

    def tearDown(self):
        self.tmp.cleanup()

    def test_raw_pairs(self):
        pairs = build_pairs(self.store, self.slide_ids, ['enc48'], 'raw', max_tokens=10, seed=0)
        self.assertEqual([p.slide_id for p in pairs], self.slide_ids)
        for pair in pairs:
            self.assertEqual(pair.tokens.shape, (10, 48))
            self.assertEqual(pair.encoder_id, 'enc48')
            self.assertEqual(pair.gene_vector.shape, (self.store.load_slide(pair.slide_id).gene_vector.shape[0],))

    def test_ctx_pairs_share_one_width(self):
        params = init_params(desk_config({'enc48': 48, 'enc64': 64}, d_model=8, encoder_depth=1, heads=2), 0)
        pairs = build_pairs(self.store, self.slide_ids, ['enc48', 'enc64'], 'ctx', 200, seed=5, params=params,
                            unified=True)
        self.assertEqual({p.tokens.shape[1] for p in pairs}, {8})
        again = build_pairs(self.store, self.slide_ids, ['enc48', 'enc64'], 'ctx', 200, seed=5, params=params,
                            unified=True)
        self.assertEqual([p.encoder_id for p in pairs], [p.encoder_id for p in again])

    def test_configuration_errors(self):
        with self.assertRaises(ConfigError):
            build_pairs(self.store, self.slide_ids, ['enc48'], 'ctx', 10, seed=0)
        with self.assertRaises(ConfigError):
            build_pairs(self.store, self.slide_ids, ['enc48', 'enc64'], 'raw', 10, seed=0)
        with self.assertRaises(ConfigError):
            build_pairs(self.store, self.slide_ids, ['enc48', 'enc64'], 'raw', 10, seed=0, unified=True)
        with self.assertRaises(ConfigError):
            build_pairs(self.store, self.slide_ids, ['enc48'], 'iso', 10, seed=0)


class AggregatorTrainingTests(SimpleTestCase):
    def test_config_validation(self):
        with self.assertRaises(ConfigError):
            AggregateConfig(batch_size=1)
        with self.assertRaises(ConfigError):
            AggregateConfig(max_tokens=0)

    def test_zero_learning_rate_is_a_control(self):
        pairs = paired_slides(12)
        cfg = AggregateConfig(iters=4, batch_size=4, hidden=8, slide_dim=4, base_lr=0.0, warmup_iters=1,
                              eval_interval=2)
        with tempfile.TemporaryDirectory() as tmp:
            result = pretrain_aggregator(pairs[:8], pairs[8:], cfg, tmp, meta={'source': 'raw'})
            heldout = [json.loads(line) for line in (Path(tmp) / 'heldout.jsonl').read_text().splitlines()]
            metrics = (Path(tmp) / 'metrics.jsonl').read_text().splitlines()
        self.assertEqual(result.initial, result.final)
        self.assertEqual([r['iter'] for r in heldout], [0, 2, 4])
        self.assertEqual(len(metrics), 4)
        self.assertEqual(result.initial['chance'], 0.25)

    def test_checkpoint_round_trip(self):
        pairs = paired_slides(6)
        cfg = AggregateConfig(iters=2, batch_size=3, hidden=8, slide_dim=4, warmup_iters=1)
        with tempfile.TemporaryDirectory() as tmp:
            result = pretrain_aggregator(pairs[:4], pairs[4:], cfg, tmp, meta={'source': 'ctx'})
            params, meta = load_aggregator(result.path)
            self.assertEqual(meta['source'], 'ctx')
            self.assertEqual(meta['iterations'], 2)
            self.assertEqual(len(meta['gene_mean']), 5)
            np.testing.assert_array_equal(params['proj.w'].data, result.params['proj.w'].data.astype(np.float32))
            other = Path(tmp) / 'other.tck'
            save_checkpoint(other, {'kind': 'ticon'}, {})
            with self.assertRaises(FormatError):
                load_aggregator(other)

    def test_too_few_slides(self):
        pairs = paired_slides(3)
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(BatchError):
                pretrain_aggregator(pairs[:1], pairs[1:], AggregateConfig(iters=1, warmup_iters=1), tmp)
            with self.assertRaises(BatchError):
                pretrain_aggregator(pairs[:2], pairs[2:], AggregateConfig(iters=1, warmup_iters=1), tmp)

    @tag('slow')
    def test_retrieval_beats_chance(self):
        pairs = paired_slides(64, seed=9)
        cfg = AggregateConfig(iters=200, batch_size=8, hidden=16, slide_dim=8, base_lr=1e-2, warmup_iters=10,
                              eval_interval=50)
        with tempfile.TemporaryDirectory() as tmp:
            result = pretrain_aggregator(pairs[:48], pairs[48:], cfg, tmp)
        self.assertGreaterEqual(result.final['top1'], 3 * result.final['chance'])
        self.assertLess(result.final['loss'], result.initial['loss'])
