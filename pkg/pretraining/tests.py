import json
import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, TestCase

from contextualizer.config import desk_config
from contextualizer.network import decode_predict, encode
from contextualizer.params import init_params
from numerics.gradcheck import grad_check
from numerics.optim import OptState, Schedule
from pretraining.compare import compare_targets, required_wins
from pretraining.masking import make_mask_plan, mask_counts
from pretraining.models import PretrainRun
from pretraining.objective import assemble_batch, check_alignment, cosine_loss, ofmm_loss
from pretraining.training import (
    TrainConfig, TrainState, canonical_mode, choose_input, heldout_loss, load_train_state, new_state, train_loop,
    train_step,
)
from slides.candidates import Candidate
from slides.grids import EmbeddingGrid
from ticon_lab.exceptions import (
    AlignmentError, ConfigError, DegenerateGridError, EmptyInputError, RangeError, ShapeError,
)
from ticon_lab.seeding import stream

DIMS = {'a': 3, 'b': 5}


def make_windows(count, seed=0, k=4, dims=DIMS):
    """Aligned windows where every encoder sees a linear view of one latent."""
    rng = np.random.default_rng(seed)
    maps = {e: rng.standard_normal((4, d)) for e, d in dims.items()}
    windows = []
    for n in range(count):
        latent = rng.standard_normal((k, k, 4)) + 1.5
        validity = np.ones((k, k), dtype=bool)
        validity[rng.integers(k), rng.integers(k)] = False
        grids = {e: EmbeddingGrid(e, latent @ m, validity) for e, m in maps.items()}
        windows.append((Candidate(f'slide{n:03d}', (0, 0), k, float(validity.mean())), grids))
    return windows


class MemoryCorpus:
    def __init__(self, windows):
        self.windows = windows

    def batch(self, root_seed, iteration, batch_size):
        rng = stream(root_seed, 'pretrain', 'batch', iteration)
        return [self.windows[i] for i in rng.choice(len(self.windows), size=batch_size).tolist()]


def train_config(total_iters=6, **overrides):
    options = dict(
        batch_size=2, total_iters=total_iters, sched=Schedule(1e-2, 2, total_iters),
        input_ids=('a', 'b'), target_ids=('a', 'b'), seed=11, eval_interval=3, checkpoint_interval=2,
    )
    options.update(overrides)
    return TrainConfig(**options)


def heldout_items(windows, cfg, input_id='a'):
    return [
        (grids, make_mask_plan(grids[input_id].validity, cfg.mask_ratio, cfg.prediction_ratio, n))
        for n, (_, grids) in enumerate(windows)
    ]


class MaskPlanTests(SimpleTestCase):
    def test_counts_on_a_full_window(self):
        plan = make_mask_plan(np.ones((4, 4), dtype=bool), 0.75, 0.25, seed=5)
        self.assertEqual((len(plan.visible), len(plan.masked), len(plan.predicted)), (4, 12, 4))

    def test_partition_laws(self):
        rng = np.random.default_rng(0)
        for seed in range(300):
            validity = rng.random((5, 5)) < 0.6
            if validity.sum() < 2:
                continue
            plan = make_mask_plan(validity, 0.75, 0.25, seed)
            self.assertEqual((len(plan.masked), len(plan.predicted)), mask_counts(int(validity.sum()), 0.75, 0.25))
            visible = {tuple(p) for p in plan.visible}
            masked = {tuple(p) for p in plan.masked}
            self.assertFalse(visible & masked)
            self.assertEqual(visible | masked, {tuple(p) for p in np.argwhere(validity)})
            self.assertTrue({tuple(p) for p in plan.predicted} <= masked)
            self.assertGreaterEqual(len(visible), 1)
            self.assertGreaterEqual(len(plan.predicted), 1)

    def test_every_position_is_masked_three_times_in_four(self):
        validity = np.ones((4, 4), dtype=bool)
        masked, predicted = np.zeros((4, 4)), np.zeros((4, 4))
        runs = 10_000
        for seed in range(runs):
            plan = make_mask_plan(validity, 0.75, 0.25, seed)
            masked[plan.masked[:, 0], plan.masked[:, 1]] += 1
            predicted[plan.predicted[:, 0], plan.predicted[:, 1]] += 1
        np.testing.assert_allclose(masked / runs, 0.75, rtol=0, atol=0.02)
        np.testing.assert_allclose(predicted / runs, 0.25, rtol=0, atol=0.02)

    def test_half_up_rounding(self):
        self.assertEqual(mask_counts(2, 0.75, 0.25), (1, 1))
        self.assertEqual(mask_counts(6, 0.75, 0.25), (5, 2))
        self.assertEqual(mask_counts(10, 0.75, 0.25), (8, 3))

    def test_same_seed_same_plan(self):
        validity = np.ones((4, 4), dtype=bool)
        a = make_mask_plan(validity, 0.75, 0.25, 9)
        b = make_mask_plan(validity, 0.75, 0.25, 9)
        np.testing.assert_array_equal(a.masked, b.masked)
        np.testing.assert_array_equal(a.predicted, b.predicted)

    def test_degenerate_and_bad_ratios(self):
        single = np.zeros((4, 4), dtype=bool)
        single[1, 1] = True
        with self.assertRaises(DegenerateGridError):
            make_mask_plan(single, 0.75, 0.25, 1)
        with self.assertRaises(RangeError):
            make_mask_plan(np.ones((4, 4), dtype=bool), 1.0, 0.25, 1)
        with self.assertRaises(RangeError):
            make_mask_plan(np.ones((4, 4), dtype=bool), 0.5, 0.6, 1)


class ObjectiveTests(SimpleTestCase):
    def test_cosine_loss_limits(self):
        y = np.random.default_rng(1).standard_normal((4, 6))
        self.assertAlmostEqual(cosine_loss(y, 3.0 * y).item(), 0.0, places=12)
        self.assertAlmostEqual(cosine_loss(y, -y).item(), 2.0, places=12)
        with self.assertRaises(ShapeError):
            cosine_loss(y, y[:, :5])

    def test_per_target_terms_sum_to_total(self):
        params = init_params(desk_config(DIMS, d_model=8, encoder_depth=1, heads=2), 0)
        _, grids = make_windows(1)[0]
        plan = make_mask_plan(grids['a'].validity, 0.75, 0.25, 3)
        total, parts = ofmm_loss(params, 'a', grids, plan, ['a', 'b'])
        self.assertAlmostEqual(total.item(), sum(parts.values()), places=12)
        self.assertTrue(all(0.0 <= v <= 2.0 for v in parts.values()))

    def test_total_matches_a_hand_assembled_forward(self):
        params = init_params(desk_config(DIMS, d_model=8, encoder_depth=1, heads=2), 4)
        rng = np.random.default_rng(3)
        validity = np.ones((2, 2), dtype=bool)
        grids = {e: EmbeddingGrid(e, rng.standard_normal((2, 2, d)), validity) for e, d in DIMS.items()}
        plan = make_mask_plan(validity, 0.75, 0.25, 8)
        visible, predicted = plan.visible, plan.predicted
        self.assertEqual((len(visible), len(plan.masked), len(predicted)), (1, 3, 1))
        ctx = encode(params, 'a', grids['a'].embeddings[visible[:, 0], visible[:, 1]], visible)
        outputs = decode_predict(params, ctx, predicted, ['a', 'b'])
        expected = 0.0
        for j in ('a', 'b'):
            y = outputs[j].data
            t = grids[j].embeddings[predicted[:, 0], predicted[:, 1]]
            cos = (y * t).sum(axis=1) / (np.linalg.norm(y, axis=1) * np.linalg.norm(t, axis=1))
            expected += float(np.mean(1.0 - cos))
        total, _ = ofmm_loss(params, 'a', grids, plan, ['a', 'b'])
        self.assertAlmostEqual(total.item(), expected, delta=1e-12)

    def test_full_loss_gradients(self):
        params = init_params(desk_config(DIMS, d_model=8, encoder_depth=1, heads=2), 2)
        _, grids = make_windows(1, seed=6)[0]
        plan = make_mask_plan(grids['a'].validity, 0.75, 0.25, 4)

        def loss_through(name):
            def f(value):
                params.tensors[name] = value
                return ofmm_loss(params, 'a', grids, plan, ['a', 'b'])[0]
            return f

        for name in ('proj_in.a.b1', 'encoder.0.attn.wk', 'decoder.0.self_attn.wo', 'decoder.0.cross_attn.wv',
                     'decoder.mask_token', 'head_out.b.b2'):
            with self.subTest(tensor=name):
                original = params[name]
                try:
                    self.assertLessEqual(grad_check(loss_through(name), original.data), 1e-4)
                finally:
                    params.tensors[name] = original

    def test_padding_does_not_change_the_mean(self):
        params = init_params(desk_config(DIMS, d_model=8, encoder_depth=1, heads=2), 0)
        windows = make_windows(2, seed=4)
        items = []
        for n, (_, grids) in enumerate(windows):
            validity = grids['a'].validity.copy()
            validity[:n + 1] = False
            trimmed = {e: EmbeddingGrid(e, g.embeddings, validity) for e, g in grids.items()}
            items.append((trimmed, make_mask_plan(validity, 0.75, 0.25, n)))
        separate = np.mean([ofmm_loss(params, 'a', g, p, ['b'])[0].item() for g, p in items])
        together = heldout_loss(params, items, ['a'], lambda _: ['b'])['loss_total']
        self.assertAlmostEqual(separate, together, places=12)

    def test_misaligned_grids(self):
        _, grids = make_windows(1)[0]
        shifted = EmbeddingGrid('b', grids['b'].embeddings, grids['b'].validity, origin=(1, 0))
        with self.assertRaises(AlignmentError):
            check_alignment(grids['a'], shifted)
        with self.assertRaises(EmptyInputError):
            assemble_batch([], 'a', ['b'])


class TrainConfigTests(SimpleTestCase):
    def test_mode_aliases(self):
        self.assertEqual(canonical_mode('omni-multi'), 'omni-multi-target')
        self.assertEqual(canonical_mode('individual'), 'individual')
        with self.assertRaises(ConfigError):
            canonical_mode('omni')

    def test_mode_targets(self):
        self.assertEqual(train_config().targets_for('b'), ['a', 'b'])
        self.assertEqual(train_config(mode='omni-single').targets_for('b'), ['b'])
        with self.assertRaises(ConfigError):
            train_config(mode='individual')

    def test_input_encoder_draw_is_uniform(self):
        cfg = train_config(input_ids=('a', 'b', 'c'), target_ids=('a', 'b', 'c'))
        draws = [choose_input(cfg, iteration) for iteration in range(3000)]
        for encoder_id in ('a', 'b', 'c'):
            self.assertAlmostEqual(draws.count(encoder_id) / 3000, 1 / 3, delta=0.03)
        self.assertEqual(draws, [choose_input(cfg, iteration) for iteration in range(3000)])

    def test_round_trip(self):
        cfg = train_config()
        self.assertEqual(TrainConfig.from_dict(json.loads(json.dumps(cfg.as_dict()))).as_dict(), cfg.as_dict())


class TrainStepTests(SimpleTestCase):
    def setUp(self):
        self.windows = make_windows(6, seed=2)
        self.model_cfg = desk_config(DIMS, d_model=8, encoder_depth=1, heads=2)

    def test_step_record(self):
        cfg = train_config()
        state = new_state(self.model_cfg, cfg)
        state, record = train_step(state, self.windows[:2], cfg)
        self.assertEqual(state.iter, 1)
        self.assertEqual(record['iter'], 0)
        self.assertEqual(record['lr'], 0.0)
        self.assertEqual(record['wallclock_ms'], 0)
        self.assertEqual(sorted(record['loss_per_target']), ['a', 'b'])
        self.assertAlmostEqual(record['loss_total'], sum(record['loss_per_target'].values()), places=12)

    def test_zero_lr_changes_nothing(self):
        cfg = train_config()
        state = new_state(self.model_cfg, cfg)
        before = {n: state.params[n].data.copy() for n in state.params.names()}
        train_step(state, self.windows[:2], cfg)
        for name, value in before.items():
            np.testing.assert_array_equal(state.params[name].data, value)

    def test_training_lowers_heldout_loss(self):
        cfg = train_config(total_iters=40, sched=Schedule(1e-2, 4, 40), eval_interval=40, checkpoint_interval=40)
        state = new_state(self.model_cfg, cfg)
        items = heldout_items(self.windows, cfg)
        before = heldout_loss(state.params, items, cfg.input_ids, cfg.targets_for)['loss_total']
        for _ in range(cfg.total_iters):
            state, _ = train_step(state, MemoryCorpus(self.windows).batch(cfg.seed, state.iter, 2), cfg)
        after = heldout_loss(state.params, items, cfg.input_ids, cfg.targets_for)['loss_total']
        self.assertLess(after, 0.8 * before)

    def test_frozen_core(self):
        params = init_params(self.model_cfg, 0)
        added = params.add_encoder('c', 4, seed=3)
        windows = make_windows(3, seed=5, dims={**DIMS, 'c': 4})
        cfg = train_config(mode='individual', input_ids=('c',), target_ids=('c',), sched=Schedule(1e-2, 1, 6))
        state = TrainState(params=params, opt=OptState.for_params({n: params[n] for n in added}), trainable=added)
        frozen = {n: params[n].data.copy() for n in params.names() if n not in added}
        adapter = params['proj_in.c.w1'].data.copy()
        for _ in range(3):
            state, _ = train_step(state, windows[:2], cfg)
        for name, value in frozen.items():
            np.testing.assert_array_equal(params[name].data, value)
        self.assertFalse(np.array_equal(params['proj_in.c.w1'].data, adapter))


class ResumeTests(SimpleTestCase):
    def test_interrupted_run_matches_uninterrupted(self):
        windows = make_windows(5, seed=8)
        corpus = MemoryCorpus(windows)
        cfg = train_config(total_iters=6)
        model_cfg = desk_config(DIMS, d_model=8, encoder_depth=1, heads=2)
        items = heldout_items(windows[:2], cfg)
        with tempfile.TemporaryDirectory() as tmp:
            straight, split = Path(tmp) / 'straight', Path(tmp) / 'split'
            whole = train_loop(new_state(model_cfg, cfg), cfg, corpus, items, straight)

            first = train_loop(new_state(model_cfg, cfg), cfg, corpus, items, split, stop_at=3)
            self.assertEqual(first.iterations, 3)
            self.assertFalse((split / 'model.tck').exists())
            state, saved_cfg, _ = load_train_state(split / 'checkpoints' / 'train_state.tck')
            self.assertEqual(state.iter, 3)
            resumed = train_loop(state, saved_cfg, corpus, items, split)

            self.assertEqual(resumed.model_hash, whole.model_hash)
            self.assertEqual((split / 'model.tck').read_bytes(), (straight / 'model.tck').read_bytes())
            self.assertEqual((split / 'metrics.jsonl').read_text(), (straight / 'metrics.jsonl').read_text())
            self.assertEqual((split / 'heldout.jsonl').read_text(), (straight / 'heldout.jsonl').read_text())
            records = [json.loads(line) for line in (straight / 'metrics.jsonl').read_text().splitlines()]
        self.assertEqual([r['iter'] for r in records], list(range(6)))


class CompareTests(SimpleTestCase):
    def test_required_wins(self):
        self.assertEqual([required_wins(n) for n in (1, 2, 3, 4, 5, 6)], [1, 2, 2, 3, 4, 4])

    def test_same_model_wins_everywhere(self):
        params = init_params(desk_config(DIMS, d_model=8, encoder_depth=1, heads=2), 0)
        items = heldout_items(make_windows(2), train_config())
        record = compare_targets(params, params, items, ['a', 'b'])
        self.assertEqual(record['wins'], 2)
        self.assertFalse(record['flagged'])
        for row in record['targets'].values():
            self.assertEqual(row['multi_target'], row['single_target'])

    def test_multi_and_single_target_models_from_one_seed(self):
        dims = {'a': 3, 'b': 5, 'c': 4}
        windows = make_windows(6, seed=3, dims=dims)
        model_cfg = desk_config(dims, d_model=8, encoder_depth=1, heads=2)
        trained = {}
        for mode in ('omni-multi', 'omni-single'):
            cfg = train_config(total_iters=8, sched=Schedule(1e-2, 2, 8), mode=mode,
                               input_ids=tuple(dims), target_ids=tuple(dims))
            state = new_state(model_cfg, cfg)
            for _ in range(cfg.total_iters):
                state, _ = train_step(state, MemoryCorpus(windows).batch(cfg.seed, state.iter, 2), cfg)
            trained[mode] = state.params
        multi, single = trained['omni-multi'], trained['omni-single']
        self.assertTrue(any(not np.array_equal(multi[n].data, single[n].data) for n in multi.names()))

        record = compare_targets(multi, single, heldout_items(windows[:3], cfg), list(dims))
        self.assertEqual(sorted(record['targets']), ['a', 'b', 'c'])
        self.assertEqual(record['required'], 2)
        for row in record['targets'].values():
            self.assertEqual(row['multi_wins'], row['multi_target'] <= row['single_target'])
        self.assertEqual(record['wins'], sum(row['multi_wins'] for row in record['targets'].values()))
        self.assertEqual(record['flagged'], record['wins'] < record['required'])


class PretrainRunTests(TestCase):
    def test_loss_reduction(self):
        run = PretrainRun.objects.create(
            kind='PRETRAIN', mode='omni-multi-target', encoders='enc48,enc64', output_dir='runs/p',
            seed=0, iterations=10, initial_loss=1.0, final_loss=0.25,
        )
        self.assertAlmostEqual(run.loss_reduction, 0.75)
        self.assertIn('OFMM pretraining', str(run))
        self.assertIsNone(PretrainRun(kind='ADAPT', seed=0, initial_loss=None).loss_reduction)
