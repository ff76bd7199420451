import hashlib
import tempfile
from io import StringIO
from pathlib import Path

import numpy as np
from django.core.management import CommandError, call_command
from django.test import SimpleTestCase

from contextualizer.checkpoint import (
    canonical_json, decode_checkpoint, encode_checkpoint, load_model, model_from_checkpoint, save_model,
)
from contextualizer.config import desk_config, paper_config
from contextualizer.network import (
    alibi_bias, alibi_matrix, contextualize, contextualize_isolated, contextualize_isolated_batch,
    decode_predict, encode,
)
from contextualizer.params import count, decoder_shapes, encoder_shapes, init_params, param_shapes
from numerics import functional as F
from numerics.gradcheck import grad_check
from slides.gridio import write_grid
from slides.grids import EmbeddingGrid
from ticon_lab.exceptions import ConfigError, EmptyInputError, FormatError, RegistryError, ShapeError

DIMS = {'a': 3, 'b': 5}


def tiny_params(seed=0, **overrides):
    options = dict(d_model=8, encoder_depth=2, decoder_depth=1, heads=2)
    options.update(overrides)
    return init_params(desk_config(DIMS, **options), seed)


def np_norm(p, prefix, x):
    centered = x - x.mean(axis=-1, keepdims=True)
    scaled = centered / np.sqrt((centered * centered).mean(axis=-1, keepdims=True) + 1e-5)
    return scaled * p[f'{prefix}.gamma'].data + p[f'{prefix}.beta'].data


def np_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x ** 3)))


def np_mlp(p, prefix, x):
    hidden = np_gelu(x @ p[f'{prefix}.w1'].data + p[f'{prefix}.b1'].data)
    return hidden @ p[f'{prefix}.w2'].data + p[f'{prefix}.b2'].data


def np_decode_one(p, context, context_positions, position, target_id):
    """Decoder output for a single prediction position, one head at a time."""
    cfg = p.cfg
    head_dim = cfg.d_model // cfg.heads
    distance = np.abs(np.asarray(context_positions) - np.asarray(position)).sum(axis=1)
    z = p['decoder.mask_token'].data.reshape(-1).copy()
    for layer in range(cfg.decoder_depth):
        pre = f'decoder.{layer}'
        if cfg.decoder_self_attention:
            # one query attends only to itself
            h = np_norm(p, f'{pre}.self_norm', z)
            v = h @ p[f'{pre}.self_attn.wv'].data + p[f'{pre}.self_attn.bv'].data
            z = z + v @ p[f'{pre}.self_attn.wo'].data + p[f'{pre}.self_attn.bo'].data
        q = np_norm(p, f'{pre}.cross_norm_q', z) @ p[f'{pre}.cross_attn.wq'].data + p[f'{pre}.cross_attn.bq'].data
        kv = np_norm(p, f'{pre}.cross_norm_kv', context)
        k = kv @ p[f'{pre}.cross_attn.wk'].data + p[f'{pre}.cross_attn.bk'].data
        v = kv @ p[f'{pre}.cross_attn.wv'].data + p[f'{pre}.cross_attn.bv'].data
        mixed = []
        for h in range(cfg.heads):
            part = slice(h * head_dim, (h + 1) * head_dim)
            scores = k[:, part] @ q[part] / np.sqrt(head_dim) - 2.0 ** (-8.0 * (h + 1) / cfg.heads) * distance
            weights = np.exp(scores - scores.max())
            mixed.append((weights / weights.sum()) @ v[:, part])
        z = z + np.concatenate(mixed) @ p[f'{pre}.cross_attn.wo'].data + p[f'{pre}.cross_attn.bo'].data
        z = z + np_mlp(p, f'{pre}.mlp', np_norm(p, f'{pre}.norm2', z))
    return np_mlp(p, f'head_out.{target_id}', np_norm(p, 'decoder.norm', z))


class AlibiTests(SimpleTestCase):
    def test_zero_distance(self):
        for h in range(4):
            self.assertEqual(alibi_bias(h, (2, 3), (2, 3), 4), 0.0)

    def test_slope(self):
        self.assertEqual(alibi_bias(0, (0, 0), (0, 3), 8), -1.5)

    def test_translation(self):
        for h in range(4):
            self.assertEqual(alibi_bias(h, (1, 2), (4, 0), 4), alibi_bias(h, (6, 7), (9, 5), 4))

    def test_matrix_matches_scalar(self):
        q = np.array([[[0, 0], [1, 2]]])
        k = np.array([[[3, 1], [0, 0], [2, 2]]])
        bias = alibi_matrix(q, k, 4)
        self.assertEqual(bias.shape, (1, 4, 2, 3))
        for h in range(4):
            for i in range(2):
                for j in range(3):
                    self.assertAlmostEqual(bias[0, h, i, j], alibi_bias(h, q[0, i], k[0, j], 4), places=15)


class ParamTests(SimpleTestCase):
    def test_same_seed_same_bytes(self):
        a, b = tiny_params(3), tiny_params(3)
        for name in a.names():
            self.assertEqual(a[name].data.tobytes(), b[name].data.tobytes())
        self.assertNotEqual(a['encoder.0.attn.wq'].data.tobytes(), tiny_params(4)['encoder.0.attn.wq'].data.tobytes())

    def test_initial_values(self):
        params = tiny_params()
        self.assertTrue(np.all(params['encoder.0.norm1.gamma'].data == 1.0))
        self.assertFalse(np.any(params['encoder.0.attn.bq'].data))
        self.assertLessEqual(np.abs(params['encoder.0.attn.wq'].data).max(), 0.04 + 1e-12)

    def test_desk_count_closed_form(self):
        dims = {'enc48': 48, 'enc64': 64, 'enc96': 96}
        cfg = desk_config(dims)
        d, hidden, m = cfg.d_model, cfg.hidden, cfg.mlp_hidden
        norm = 2 * d
        attn = 4 * (d * d + d)
        mlp = d * m + m + m * d + d
        encoder = cfg.encoder_depth * (2 * norm + attn + mlp) + norm
        decoder = d + cfg.decoder_depth * (norm + attn + 2 * norm + attn + norm + mlp) + norm
        projectors = sum(k * hidden + hidden + hidden * d + d for k in dims.values())
        heads = sum(d * hidden + hidden + hidden * k + k for k in dims.values())
        expected = projectors + encoder + decoder + heads
        self.assertEqual(count(param_shapes(cfg)), expected)
        self.assertEqual(init_params(cfg, 1).num_params(), expected)

    def test_paper_scale_counts(self):
        cfg = paper_config({'a': 768, 'b': 1536})
        self.assertLess(abs(count(encoder_shapes(cfg)) / 170e6 - 1.0), 0.05)
        self.assertLess(abs(count(decoder_shapes(cfg)) / 28e6 - 1.0), 0.10)

    def test_heads_must_divide_width(self):
        with self.assertRaises(ConfigError):
            desk_config(DIMS, d_model=10, heads=4)

    def test_add_encoder(self):
        params = tiny_params()
        before = {name: params[name].data.copy() for name in params.names()}
        added = params.add_encoder('c', 7, seed=1)
        self.assertEqual(params.cfg.input_dims['c'], 7)
        self.assertTrue(all(name.endswith(('w1', 'b1', 'w2', 'b2')) for name in added))
        for name, value in before.items():
            np.testing.assert_array_equal(params[name].data, value)
        with self.assertRaises(RegistryError):
            params.add_encoder('a', 3, seed=1)


class EncodeTests(SimpleTestCase):
    def setUp(self):
        self.params = tiny_params(1)
        rng = np.random.default_rng(2)
        self.embeddings = rng.standard_normal((5, 3))
        self.positions = np.array([[0, 0], [0, 2], [1, 1], [2, 0], [3, 3]])

    def test_permutation_equivariance(self):
        out = encode(self.params, 'a', self.embeddings, self.positions).embeddings.data
        perm = np.array([3, 0, 4, 1, 2])
        permuted = encode(self.params, 'a', self.embeddings[perm], self.positions[perm]).embeddings.data
        np.testing.assert_allclose(permuted, out[perm], atol=1e-12)

    def test_translation_invariance(self):
        out = encode(self.params, 'a', self.embeddings, self.positions).embeddings.data
        shifted = encode(self.params, 'a', self.embeddings, self.positions + [3, 5]).embeddings.data
        np.testing.assert_allclose(shifted, out, atol=1e-12)

    def test_single_position_is_the_mlp_path(self):
        p = self.params
        e = self.embeddings[:1]
        x = F.linear(F.gelu(F.linear(e, p['proj_in.a.w1'], p['proj_in.a.b1'])), p['proj_in.a.w2'], p['proj_in.a.b2'])
        for layer in range(p.cfg.encoder_depth):
            pre = f'encoder.{layer}'
            h = F.layer_norm(x, p[f'{pre}.norm1.gamma'], p[f'{pre}.norm1.beta'])
            v = F.linear(h, p[f'{pre}.attn.wv'], p[f'{pre}.attn.bv'])
            x = x + F.linear(v, p[f'{pre}.attn.wo'], p[f'{pre}.attn.bo'])
            h = F.layer_norm(x, p[f'{pre}.norm2.gamma'], p[f'{pre}.norm2.beta'])
            x = x + F.linear(F.gelu(F.linear(h, p[f'{pre}.mlp.w1'], p[f'{pre}.mlp.b1'])),
                             p[f'{pre}.mlp.w2'], p[f'{pre}.mlp.b2'])
        expected = F.layer_norm(x, p['encoder.norm.gamma'], p['encoder.norm.beta']).data
        out = encode(p, 'a', e, [[4, 4]]).embeddings.data
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_errors(self):
        with self.assertRaises(RegistryError):
            encode(self.params, 'zzz', self.embeddings, self.positions)
        with self.assertRaises(EmptyInputError):
            encode(self.params, 'a', np.zeros((0, 3)), np.zeros((0, 2)))
        with self.assertRaises(ShapeError):
            encode(self.params, 'a', np.zeros((5, 4)), self.positions)


class DecodeTests(SimpleTestCase):
    def setUp(self):
        self.params = tiny_params(5)
        self.ctx = encode(self.params, 'a', np.random.default_rng(0).standard_normal((1, 3)), [[0, 0]])

    def test_shapes_per_target(self):
        out = decode_predict(self.params, self.ctx, [[1, 1], [2, 0], [0, 3]], ['a', 'b'])
        self.assertEqual(out['a'].shape, (3, 3))
        self.assertEqual(out['b'].shape, (3, 5))

    def test_symmetric_positions_predict_alike(self):
        out = decode_predict(self.params, self.ctx, [[0, 1], [1, 0]], ['b'])['b'].data
        np.testing.assert_allclose(out[0], out[1], atol=1e-12)

    def test_empty_prediction_set(self):
        with self.assertRaises(EmptyInputError):
            decode_predict(self.params, self.ctx, np.zeros((0, 2)), ['a'])

    def test_single_query_matches_unrolled_numpy(self):
        rng = np.random.default_rng(12)
        positions = np.array([[0, 0], [0, 2], [1, 1], [3, 0]])
        for self_attention in (True, False):
            with self.subTest(decoder_self_attention=self_attention):
                params = tiny_params(9, decoder_self_attention=self_attention, decoder_depth=2)
                for name in params.names():
                    params[name].data += 0.05 * rng.standard_normal(params[name].data.shape)
                ctx = encode(params, 'a', rng.standard_normal((4, 3)), positions)
                out = decode_predict(params, ctx, [[2, 3]], ['a', 'b'])
                for target_id in ('a', 'b'):
                    expected = np_decode_one(params, ctx.embeddings.data, positions, (2, 3), target_id)
                    np.testing.assert_allclose(out[target_id].data[0], expected, rtol=0, atol=1e-12)

    def test_pipeline_gradients(self):
        rng = np.random.default_rng(4)
        grid_embeddings = rng.standard_normal((3, 3))
        visible = [[0, 0], [0, 1], [1, 1]]
        target = rng.standard_normal((1, 5))

        def loss_through(name):
            def f(value):
                self.params.tensors[name] = value
                ctx = encode(self.params, 'a', grid_embeddings, visible)
                y = decode_predict(self.params, ctx, [[1, 0]], ['b'])['b']
                return F.sum(F.cosine_similarity(y, target))
            return f

        for name in ('proj_in.a.w1', 'encoder.0.attn.wq', 'decoder.mask_token', 'head_out.b.w2'):
            with self.subTest(tensor=name):
                original = self.params[name]
                try:
                    self.assertLessEqual(grad_check(loss_through(name), original.data), 1e-4)
                finally:
                    self.params.tensors[name] = original


class ContextualizeTests(SimpleTestCase):
    def setUp(self):
        self.params = tiny_params(8)
        self.rng = np.random.default_rng(6)

    def test_one_by_one_grid_is_isolated(self):
        e = self.rng.standard_normal(3)
        grid = EmbeddingGrid('a', e[None, None, :], np.ones((1, 1), dtype=bool))
        np.testing.assert_array_equal(contextualize(self.params, 'a', grid).embeddings[0, 0],
                                      contextualize_isolated(self.params, 'a', e))

    def test_isolated_batch_matches_single_calls(self):
        embeddings = self.rng.standard_normal((100, 3))
        batch = contextualize_isolated_batch(self.params, 'a', embeddings, chunk=32)
        single = np.stack([contextualize_isolated(self.params, 'a', e) for e in embeddings])
        np.testing.assert_allclose(batch, single, atol=1e-12)

    def test_larger_grid_than_training(self):
        validity = self.rng.random((12, 12)) < 0.8
        grid = EmbeddingGrid('b', self.rng.standard_normal((12, 12, 5)), validity)
        out = contextualize(self.params, 'b', grid)
        self.assertEqual(out.embeddings.shape, (12, 12, 8))
        self.assertFalse(np.any(out.embeddings[~validity]))
        self.assertEqual(out.encoder_id, 'ticon:b')

    def test_identical_pair_gives_identical_outputs(self):
        e = self.rng.standard_normal(3)
        grid = EmbeddingGrid('a', np.tile(e, (1, 2, 1)), np.ones((1, 2), dtype=bool))
        out = contextualize(self.params, 'a', grid).embeddings
        np.testing.assert_allclose(out[0, 0], out[0, 1], atol=1e-12)

    def test_isolated_dim_mismatch(self):
        with self.assertRaises(ShapeError):
            contextualize_isolated(self.params, 'a', np.zeros(4))


class CheckpointTests(SimpleTestCase):
    def setUp(self):
        self.params = tiny_params(2)
        self.header = {'kind': 'ticon', 'model': self.params.cfg.as_dict(), 'meta': {}}

    def test_f64_roundtrip_is_exact(self):
        header, arrays = decode_checkpoint(encode_checkpoint(self.header, self.params.arrays(), dtype='f64'))
        self.assertEqual(header, self.header)
        for name, value in self.params.arrays().items():
            np.testing.assert_array_equal(arrays[name], value)
        model_from_checkpoint(header, arrays)

    def test_save_and_load_model(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'model.tck'
            digest = save_model(path, self.params, iterations=7)
            self.assertEqual(digest, hashlib.sha256(path.read_bytes()).hexdigest())
            loaded, meta = load_model(path)
        self.assertEqual(meta['iterations'], 7)
        self.assertEqual(loaded.cfg, self.params.cfg)
        np.testing.assert_array_equal(loaded['decoder.mask_token'].data,
                                      self.params['decoder.mask_token'].data.astype(np.float32))

    def test_corruption(self):
        blob = encode_checkpoint(self.header, self.params.arrays())
        bad_magic = b'XXXX' + blob[4:]
        with self.assertRaisesMessage(FormatError, 'magic'):
            decode_checkpoint(bad_magic)
        flipped = bytearray(blob)
        flipped[-8] ^= 0x01
        with self.assertRaisesMessage(FormatError, 'CRC'):
            decode_checkpoint(bytes(flipped))
        with self.assertRaises(FormatError) as ctx:
            decode_checkpoint(blob[:len(blob) // 2])
        self.assertIsNotNone(ctx.exception.offset)

    def test_unreadable_tensor_name(self):
        blob = bytearray(encode_checkpoint(self.header, self.params.arrays()))
        first = next(iter(self.params.arrays())).encode('utf-8')
        header_end = 10 + len(canonical_json(self.header).encode('utf-8'))
        name_at = blob.index(first, header_end)
        blob[name_at] = 0xFF
        with self.assertRaises(FormatError) as ctx:
            decode_checkpoint(bytes(blob))
        self.assertEqual(ctx.exception.offset, name_at)
        self.assertIn('tensor name', str(ctx.exception))

    def test_manifest_must_match_config(self):
        arrays = self.params.arrays()
        arrays.pop('decoder.mask_token')
        with self.assertRaises(FormatError):
            model_from_checkpoint(self.header, arrays)
        with self.assertRaises(FormatError):
            model_from_checkpoint({**self.header, 'kind': 'abmil'}, self.params.arrays())


class ContextualizeCommandTests(SimpleTestCase):
    def test_grid_in_grid_out(self):
        params = tiny_params(3)
        rng = np.random.default_rng(1)
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            save_model(tmp / 'model.tck', params)
            write_grid(EmbeddingGrid('a', rng.standard_normal((4, 4, 3)).astype(np.float32),
                                     np.ones((4, 4), dtype=bool)), tmp / 'in.teg')
            call_command('contextualize', checkpoint=str(tmp / 'model.tck'), encoder='a',
                         grid_in=str(tmp / 'in.teg'), out=str(tmp / 'run' / 'out.teg'), stdout=StringIO())
            self.assertTrue((tmp / 'run' / 'out.teg').exists())
            self.assertTrue((tmp / 'run' / 'resolved.cfg').exists())

    def test_unknown_encoder_exits_2(self):
        with tempfile.TemporaryDirectory() as tmp:
            tmp = Path(tmp)
            save_model(tmp / 'model.tck', tiny_params(3))
            write_grid(EmbeddingGrid('a', np.ones((2, 2, 3)), np.ones((2, 2), dtype=bool)), tmp / 'in.teg')
            with self.assertRaises(CommandError) as ctx:
                call_command('contextualize', checkpoint=str(tmp / 'model.tck'), encoder='enc999',
                             grid_in=str(tmp / 'in.teg'), out=str(tmp / 'out.teg'), stderr=StringIO())
        self.assertEqual(ctx.exception.returncode, 2)
        self.assertIn('enc999', str(ctx.exception))
