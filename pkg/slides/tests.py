import json
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase

from evaluation.probes import ProbeDataset, knn_probe, macro_f1
from slides.candidates import sample_candidates
from slides.encoders import GOLDEN_SLIDE_SEED, EncoderRegistry, encode_tiles, golden_embeddings
from slides.gridio import decode_grid, encode_grid, grid_roundtrip
from slides.grids import EmbeddingGrid, pool_quadrants
from slides.management.commands.synth import GOLDEN_PATH, split_slides
from slides.previews import region_map_image
from slides.store import SlideStore
from slides.synth import SynthConfig, generate_slide, neighbor_agreement, spot_targets
from ticon_lab.exceptions import ConfigError, FormatError, RegistryError, ShapeError

SMALL = SynthConfig(rows=12, cols=12)


def random_grid(rng, rows=5, cols=4, dim=6, encoder_id='enc48'):
    validity = rng.random((rows, cols)) < 0.7
    values = rng.standard_normal((rows, cols, dim)).astype(np.float32).astype(np.float64)
    return EmbeddingGrid(encoder_id, values, validity, origin=(3, 7))


def compartment_vote(labels, r, c, cfg, radius=2):
    """Aliased class whose compartment holds most labelled neighbors of (r, c).

    Ties widen the window until one side wins; a fully tied slide answers
    with the first class of the pair.
    """
    a, b = cfg.alias_pair
    partner_a, partner_b, _ = cfg.partners
    while True:
        window = labels[max(r - radius, 0):r + radius + 1, max(c - radius, 0):c + radius + 1]
        side_a = np.isin(window, [a, partner_a]).sum() - (labels[r, c] == a)
        side_b = np.isin(window, [b, partner_b]).sum() - (labels[r, c] == b)
        if side_a != side_b:
            return a if side_a > side_b else b
        if radius >= max(labels.shape):
            return a
        radius += 1


class SyntheticSlideTests(SimpleTestCase):
    def test_same_seed_same_slide(self):
        a = generate_slide(5, SMALL)
        b = generate_slide(5, SMALL)
        for name in ('region_labels', 'tile_latents', 'quadrant_latents', 'tile_labels', 'gene_vector', 'validity'):
            np.testing.assert_array_equal(getattr(a, name), getattr(b, name))
        self.assertEqual(a.slide_label, b.slide_label)

    def test_no_background(self):
        slide = generate_slide(3, replace(SMALL, background_fraction=0.0))
        self.assertTrue(slide.validity.all())

    def test_regions_are_coherent(self):
        for seed in range(5):
            self.assertGreaterEqual(neighbor_agreement(generate_slide(seed, SynthConfig()).region_labels), 0.6)

    def test_bad_config(self):
        with self.assertRaises(ConfigError):
            generate_slide(1, replace(SMALL, regions=1))
        with self.assertRaises(ConfigError):
            generate_slide(1, replace(SMALL, alias_pair=(2, 2)))

    def test_slide_label_follows_dominant_alias(self):
        cfg = SynthConfig()
        slide = generate_slide(9, cfg)
        a, b = cfg.alias_pair
        counts = np.bincount(slide.tile_labels[slide.validity], minlength=cfg.regions)
        self.assertEqual(slide.slide_label, int(counts[b] > counts[a]))

    def test_aliased_pair_is_ambiguous_alone(self):
        cfg = SynthConfig()
        a, b = cfg.alias_pair
        accuracies = []
        for seed in range(10):
            latents, labels = [], []
            for i in range(4):
                slide = generate_slide(1000 * seed + i, cfg)
                keep = np.isin(slide.tile_labels, [a, b])
                latents.append(slide.tile_latents[keep])
                labels.append(slide.tile_labels[keep] == b)
            x = np.concatenate(latents)
            y = np.concatenate(labels).astype(float)
            order = np.random.default_rng(seed).permutation(len(x))
            half = len(x) // 2
            train, test = order[:half], order[half:]
            design = np.hstack([x, np.ones((len(x), 1))])
            w, *_ = np.linalg.lstsq(design[train], 2 * y[train] - 1, rcond=None)
            accuracies.append(np.mean((design[test] @ w > 0) == (y[test] > 0.5)))
        self.assertTrue(0.45 <= np.mean(accuracies) <= 0.55, np.mean(accuracies))

    def test_neighborhood_majority_resolves_the_aliased_pair(self):
        cfg = SynthConfig()
        a, b = cfg.alias_pair
        truth, guesses = [], []
        for seed in range(10):
            labels = generate_slide(seed, cfg).tile_labels
            for r, c in np.argwhere(np.isin(labels, [a, b])):
                truth.append(labels[r, c])
                guesses.append(compartment_vote(labels, r, c, cfg))
        self.assertGreaterEqual(macro_f1(truth, guesses), 0.95)

    def test_raw_embeddings_leave_the_aliased_pair_at_chance(self):
        cfg = SynthConfig()
        a, b = cfg.alias_pair
        registry = EncoderRegistry.from_settings(cfg.latent_dim)
        scores = []
        for seed in range(10):
            features, labels = [], []
            for i in range(6):
                slide = generate_slide(5000 + 10 * seed + i, cfg)
                keep = np.isin(slide.tile_labels, [a, b])
                features.append(encode_tiles(slide, 'enc48', registry).embeddings[keep])
                labels.append(slide.tile_labels[keep])
            x, y = np.concatenate(features), np.concatenate(labels)
            rng = np.random.default_rng(seed)
            per_class = min(np.sum(y == a), np.sum(y == b))
            rows = np.concatenate([rng.choice(np.flatnonzero(y == cls), per_class, replace=False) for cls in (a, b)])
            split = np.array(['train', 'val', 'test'] * (len(rows) // 3 + 1))[:len(rows)][rng.permutation(len(rows))]
            scores.append(knn_probe(ProbeDataset(x[rows], y[rows], split), ks=[1, 5, 15]).value)
        self.assertTrue(0.45 <= np.mean(scores) <= 0.55, np.mean(scores))

    def test_spot_targets(self):
        slide = generate_slide(4, SMALL)
        targets = spot_targets(slide, SMALL, 8, seed=1)
        self.assertEqual(targets.shape, (12, 12, 8))
        self.assertFalse(np.any(targets[~slide.validity]))
        np.testing.assert_array_equal(targets, spot_targets(slide, SMALL, 8, seed=1))

    def test_region_map_preview(self):
        image = region_map_image(generate_slide(2, SMALL), pixels_per_tile=4)
        self.assertEqual(image.size, (48, 48))


class EncoderTests(SimpleTestCase):
    def setUp(self):
        self.registry = EncoderRegistry.from_settings(SMALL.latent_dim)
        self.slide = generate_slide(17, SMALL)

    def test_dims_and_background(self):
        for encoder_id, dim in self.registry.dims().items():
            grid = encode_tiles(self.slide, encoder_id, self.registry)
            self.assertEqual(grid.dim, dim)
            self.assertFalse(np.any(grid.embeddings[~grid.validity]))

    def test_tiles_are_encoded_independently(self):
        spec = self.registry.get('enc48')
        perm = np.random.default_rng(0).permutation(SMALL.rows)
        shuffled = replace(self.slide, tile_latents=self.slide.tile_latents[perm], validity=self.slide.validity[perm])
        np.testing.assert_allclose(
            encode_tiles(shuffled, spec).embeddings, encode_tiles(self.slide, spec).embeddings[perm], atol=1e-6,
        )

    def test_all_background(self):
        empty = replace(self.slide, validity=np.zeros_like(self.slide.validity))
        for encoder_id in ('enc48', 'enc64'):
            self.assertFalse(np.any(encode_tiles(empty, encoder_id, self.registry).embeddings))

    def test_unknown_encoder(self):
        with self.assertRaises(RegistryError):
            encode_tiles(self.slide, 'enc999', self.registry)

    def test_duplicate_seed_rejected(self):
        entries = [{'id': 'a', 'dim': 4, 'scale': 'full-tile', 'seed': 1},
                   {'id': 'b', 'dim': 4, 'scale': 'full-tile', 'seed': 1}]
        with self.assertRaises(ConfigError):
            EncoderRegistry.from_settings(4, entries)

    def test_golden_embeddings(self):
        if not GOLDEN_PATH.exists():
            self.skipTest('golden fixture not generated (run synth --write-golden)')
        stored = json.loads(GOLDEN_PATH.read_text())
        cfg = SynthConfig()
        current = golden_embeddings(EncoderRegistry.from_settings(cfg.latent_dim), cfg)
        self.assertEqual(stored['slide_seed'], GOLDEN_SLIDE_SEED)
        for encoder_id, vector in stored['embeddings'].items():
            np.testing.assert_array_equal(np.array(current['embeddings'][encoder_id]), np.array(vector))


class QuadrantPoolingTests(SimpleTestCase):
    def test_identical_quadrants(self):
        v = np.arange(3.0)
        fine = EmbeddingGrid('q', np.tile(v, (2, 2, 1)), np.ones((2, 2), dtype=bool))
        np.testing.assert_array_equal(pool_quadrants(fine).embeddings[0, 0], v)

    def test_basis_quadrants(self):
        fine = EmbeddingGrid('q', np.eye(4).reshape(2, 2, 4), np.ones((2, 2), dtype=bool))
        np.testing.assert_allclose(pool_quadrants(fine).embeddings[0, 0], [0.25] * 4)

    def test_brute_force_mean_and_strict_validity(self):
        rng = np.random.default_rng(3)
        validity = np.ones((4, 4), dtype=bool)
        validity[0, 1] = False
        fine = EmbeddingGrid('q', rng.standard_normal((4, 4, 5)), validity)
        coarse = pool_quadrants(fine)
        self.assertFalse(coarse.validity[0, 0])
        for r, c in ((0, 1), (1, 0), (1, 1)):
            expected = fine.embeddings[2 * r:2 * r + 2, 2 * c:2 * c + 2].mean(axis=(0, 1))
            np.testing.assert_allclose(coarse.embeddings[r, c], expected, atol=1e-15)
        np.testing.assert_allclose(
            pool_quadrants(EmbeddingGrid('q', 3.0 * fine.embeddings, validity)).embeddings,
            3.0 * coarse.embeddings, atol=1e-12,
        )

    def test_odd_extent(self):
        with self.assertRaises(ShapeError):
            pool_quadrants(EmbeddingGrid('q', np.zeros((3, 2, 1)), np.ones((3, 2), dtype=bool)))


class CandidateTests(SimpleTestCase):
    def test_single_feasible_window(self):
        slide = replace(generate_slide(1, SMALL), validity=np.ones((4, 4), dtype=bool))
        found = sample_candidates(slide, 4, 0.0, 20, seed=1)
        self.assertEqual(len(found), 1)
        self.assertEqual(found[0].origin, (0, 0))

    def test_checkerboard_has_no_window(self):
        checker = (np.indices((12, 12)).sum(axis=0) % 2).astype(bool)
        slide = replace(generate_slide(1, SMALL), validity=checker)
        self.assertEqual(sample_candidates(slide, 4, 0.55, 20, seed=1), [])

    def test_limits_and_determinism(self):
        slide = generate_slide(6, SynthConfig())
        found = sample_candidates(slide, 4, 0.55, 20, seed=99)
        self.assertLessEqual(len(found), 20)
        self.assertEqual(len({c.origin for c in found}), len(found))
        self.assertTrue(all(c.tissue_fraction >= 0.55 for c in found))
        self.assertEqual(found, sample_candidates(slide, 4, 0.55, 20, seed=99))

    def test_window_larger_than_slide(self):
        with self.assertRaises(ShapeError):
            sample_candidates(generate_slide(1, SMALL), 13, 0.5, 20, seed=1)


class GridFileTests(SimpleTestCase):
    def setUp(self):
        self.grid = random_grid(np.random.default_rng(5))

    def test_roundtrip_is_exact(self):
        with tempfile.TemporaryDirectory() as tmp:
            back = grid_roundtrip(self.grid, Path(tmp) / 'g.teg')
        self.assertTrue(back.same_content(self.grid))

    def test_wrong_magic(self):
        blob = bytearray(encode_grid(self.grid))
        blob[:4] = b'NOPE'
        with self.assertRaises(FormatError) as ctx:
            decode_grid(bytes(blob))
        self.assertEqual(ctx.exception.offset, 0)

    def test_truncated_payload(self):
        blob = encode_grid(self.grid)
        with self.assertRaises(FormatError) as ctx:
            decode_grid(blob[:-40])
        self.assertIn('too short', str(ctx.exception))

    def test_checksum(self):
        blob = bytearray(encode_grid(self.grid))
        blob[-10] ^= 0xFF
        with self.assertRaisesMessage(FormatError, 'checksum'):
            decode_grid(bytes(blob))

    def test_unreadable_encoder_id(self):
        blob = bytearray(encode_grid(self.grid))
        id_at = 19
        self.assertEqual(bytes(blob[id_at:id_at + 5]), b'enc48')
        blob[id_at] = 0xFF
        with self.assertRaises(FormatError) as ctx:
            decode_grid(bytes(blob))
        self.assertEqual(ctx.exception.offset, id_at)
        self.assertIn('encoder id', str(ctx.exception))


class StoreTests(SimpleTestCase):
    def test_slides_and_grids_round_trip(self):
        registry = EncoderRegistry.from_settings(SMALL.latent_dim)
        slide = generate_slide(8, SMALL, slide_id='slide000')
        with tempfile.TemporaryDirectory() as tmp:
            store = SlideStore(tmp)
            store.save_slide(slide)
            store.save_grid(slide.slide_id, encode_tiles(slide, 'enc64', registry))
            store.write_manifest(SMALL, {'train': ['slide000'], 'heldout': []}, registry.digest(), ['enc64'])
            loaded = SlideStore(tmp)
            back = loaded.load_slide('slide000')
            np.testing.assert_array_equal(back.gene_vector, slide.gene_vector)
            self.assertEqual(back.slide_label, slide.slide_label)
            self.assertEqual(loaded.synth_config, SMALL)
            loaded.check_registry(registry, ['enc64'])
            with self.assertRaises(RegistryError):
                loaded.check_registry(registry, ['enc48'])

    def test_split_slides(self):
        ids = [f'slide{i:03d}' for i in range(10)]
        splits = split_slides(ids, 0.2, seed=3)
        self.assertEqual(len(splits['heldout']), 2)
        self.assertEqual(sorted(splits['train'] + splits['heldout']), ids)
