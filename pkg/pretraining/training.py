# pretraining/training.py
"""Omni-feature masked modeling: the training step and loops.

Per optimizer step one input encoder is drawn, every window of the batch gets
its own mask plan, and the loss is the batch mean of the multi-target loss.
All randomness of step ``t`` comes from sub-streams named after ``t``, so a
run restored from a checkpoint at ``t`` continues exactly like the
uninterrupted run.
"""
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from contextualizer.checkpoint import load_checkpoint, load_model, model_from_checkpoint, save_checkpoint, save_model
from contextualizer.config import ModelConfig, desk_config
from contextualizer.params import TiconParams, init_params
from numerics.optim import OptState, Schedule, adamw_step, lr_at
from numerics.tensor import no_grad
from pretraining.masking import make_mask_plan, plan_seed
from pretraining.objective import assemble_batch, batch_loss
from ticon_lab.exceptions import ConfigError, EmptyInputError, FormatError, RegistryError
from ticon_lab.seeding import stream

logger = logging.getLogger(__name__)

MODES = ('omni-multi-target', 'omni-single-target', 'individual')
MODE_ALIASES = {'omni-multi': 'omni-multi-target', 'omni-single': 'omni-single-target'}
RUNNING_DECAY = 0.98


def canonical_mode(mode):
    mode = MODE_ALIASES.get(mode, mode)
    if mode not in MODES:
        raise ConfigError(f'unknown training mode {mode!r} (expected one of {", ".join(MODES)})')
    return mode


@dataclass
class TrainConfig:
    batch_size: int
    total_iters: int
    sched: Schedule
    mask_ratio: float = 0.75
    prediction_ratio: float = 0.25
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    mode: str = 'omni-multi-target'
    input_ids: tuple = ()
    target_ids: tuple = ()
    seed: int = 0
    eval_interval: int = 100
    checkpoint_interval: int = 500
    heldout_items: int = 64
    deterministic: bool = True

    def __post_init__(self):
        self.mode = canonical_mode(self.mode)
        self.input_ids = tuple(self.input_ids)
        self.target_ids = tuple(self.target_ids)
        self.betas = tuple(self.betas)
        if not 0.0 < self.mask_ratio < 1.0:
            raise ConfigError(f'mask_ratio must lie in (0, 1), got {self.mask_ratio}')
        if not 0.0 < self.prediction_ratio <= self.mask_ratio:
            raise ConfigError(f'prediction_ratio must lie in (0, mask_ratio], got {self.prediction_ratio}')
        if self.batch_size < 1:
            raise ConfigError(f'batch_size must be positive, got {self.batch_size}')
        if not self.input_ids:
            raise ConfigError('no input encoders configured')
        if self.mode == 'individual':
            if len(self.input_ids) != 1 or self.target_ids != self.input_ids:
                raise ConfigError('individual mode trains exactly one encoder as its own target')
        elif self.mode == 'omni-single-target':
            missing = set(self.input_ids) - set(self.target_ids)
            if missing:
                raise ConfigError(f'single-target mode needs heads for its inputs: {sorted(missing)}')
        elif not self.target_ids:
            raise ConfigError('no target encoders configured')

    def targets_for(self, input_id):
        if self.mode == 'omni-multi-target':
            return list(self.target_ids)
        return [input_id]

    def as_dict(self):
        data = asdict(self)
        data['betas'] = list(self.betas)
        data['input_ids'] = list(self.input_ids)
        data['target_ids'] = list(self.target_ids)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data['sched'] = Schedule(**data['sched'])
        return cls(**data)

    @classmethod
    def from_run_config(cls, cfg, mode=None, encoder=None):
        """Pretraining config from the ``[pretrain]`` section of a RunConfig."""
        section = cfg.section('pretrain')
        mode = canonical_mode(mode or section['mode'])
        inputs = cfg.list('pretrain', 'input_encoders')
        targets = cfg.list('pretrain', 'target_encoders')
        if mode == 'individual':
            encoder = encoder or inputs[0]
            inputs, targets = [encoder], [encoder]
        return cls(
            batch_size=section['batch_size'],
            total_iters=section['total_iters'],
            sched=Schedule(section['base_lr'], section['warmup_iters'], section['total_iters'],
                           section['floor_fraction']),
            mask_ratio=section['mask_ratio'],
            prediction_ratio=section['prediction_ratio'],
            betas=(section['beta1'], section['beta2']),
            weight_decay=section['weight_decay'],
            mode=mode,
            input_ids=inputs,
            target_ids=targets,
            seed=cfg.seed,
            eval_interval=section['eval_interval'],
            checkpoint_interval=section['checkpoint_interval'],
            heldout_items=section['heldout_items'],
            deterministic=cfg.get('run', 'deterministic'),
        )


@dataclass
class TrainState:
    params: TiconParams
    opt: OptState
    iter: int = 0
    running: dict = field(default_factory=dict)
    trainable: list = field(default_factory=list)

    def __post_init__(self):
        if not self.trainable:
            self.trainable = self.params.names()
        trainable = set(self.trainable)
        for name, tensor in self.params.tensors.items():
            tensor.requires_grad = name in trainable


def new_state(model_cfg: ModelConfig, cfg: TrainConfig):
    params = init_params(model_cfg, cfg.seed)
    return TrainState(params=params, opt=OptState.for_params(params.tensors))


def model_config_for(cfg: TrainConfig, dims, **overrides):
    """Model config whose projectors and heads match the training mode."""
    return desk_config(
        {i: dims[i] for i in cfg.input_ids},
        {j: dims[j] for j in cfg.target_ids},
        **overrides,
    )


def choose_input(cfg, iteration):
    if len(cfg.input_ids) == 1:
        return cfg.input_ids[0]
    rng = stream(cfg.seed, 'pretrain', 'encoder', iteration)
    return cfg.input_ids[int(rng.integers(len(cfg.input_ids)))]


def train_step(state, batch, cfg):
    """One optimizer step over ``batch`` = [(candidate, {encoder id: grid})]."""
    if not batch:
        raise EmptyInputError('train_step needs a non-empty batch')
    started = time.perf_counter()
    iteration = state.iter
    input_id = choose_input(cfg, iteration)
    target_ids = cfg.targets_for(input_id)
    items = [
        (grids, make_mask_plan(
            grids[input_id].validity, cfg.mask_ratio, cfg.prediction_ratio,
            plan_seed(cfg.seed, candidate, iteration),
        ))
        for candidate, grids in batch
    ]

    params = state.params
    for name in state.trainable:
        params[name].zero_grad()
    total, per_target = batch_loss(params, assemble_batch(items, input_id, target_ids), input_id, target_ids)
    total.backward()
    grads = {name: params[name].grad for name in state.trainable if params[name].grad is not None}
    lr = lr_at(iteration, cfg.sched)
    adamw_step(params.tensors, grads, state.opt, lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    state.iter += 1

    losses = {j: t.item() for j, t in per_target.items()}
    for j, value in losses.items():
        previous = state.running.get(j)
        state.running[j] = value if previous is None else RUNNING_DECAY * previous + (1.0 - RUNNING_DECAY) * value
    elapsed = 0 if cfg.deterministic else int(round((time.perf_counter() - started) * 1000))
    return state, {
        'iter': iteration,
        'lr': lr,
        'input_encoder': input_id,
        'loss_total': total.item(),
        'loss_per_target': losses,
        'loss_running': {j: state.running[j] for j in sorted(losses)},
        'wallclock_ms': elapsed,
    }


def heldout_loss(params, items, input_ids, targets_for):
    """Mean held-out loss over ``input_ids``; per-target values averaged where present."""
    totals, per_target = [], {}
    with no_grad():
        for input_id in input_ids:
            targets = targets_for(input_id)
            total, parts = batch_loss(params, assemble_batch(items, input_id, targets), input_id, targets)
            totals.append(total.item())
            for j, t in parts.items():
                per_target.setdefault(j, []).append(t.item())
    return {
        'loss_total': float(np.mean(totals)),
        'loss_per_target': {j: float(np.mean(v)) for j, v in sorted(per_target.items())},
    }


def cross_reconstruction(params, items, input_ids, target_ids):
    """Held-out loss of every (input, target) pair, as ``{target: {input: loss}}``."""
    table = {}
    with no_grad():
        for input_id in input_ids:
            for target_id in target_ids:
                batch = assemble_batch(items, input_id, [target_id])
                total, _ = batch_loss(params, batch, input_id, [target_id])
                table.setdefault(target_id, {})[input_id] = total.item()
    return table


# checkpoints

def save_train_state(path, state, cfg, **meta):
    """Resumable float64 snapshot: parameters plus optimizer moments."""
    arrays = state.params.arrays()
    for name in sorted(state.opt.first_moment):
        arrays[f'opt.m.{name}'] = state.opt.first_moment[name]
        arrays[f'opt.v.{name}'] = state.opt.second_moment[name]
    header = {
        'kind': 'ticon-train',
        'model': state.params.cfg.as_dict(),
        'meta': {
            **meta,
            'iter': state.iter,
            'step_count': state.opt.step_count,
            'running': state.running,
            'trainable': state.trainable,
            'train': cfg.as_dict(),
        },
    }
    return save_checkpoint(path, header, arrays, dtype='f64')


def load_train_state(path):
    header, arrays = load_checkpoint(path)
    if header.get('kind') != 'ticon-train':
        raise FormatError(f'{path} is not a resumable training checkpoint')
    meta = header['meta']
    params = model_from_checkpoint(header, arrays)
    opt = OptState(step_count=meta['step_count'])
    for name in arrays:
        if name.startswith('opt.m.'):
            opt.first_moment[name[len('opt.m.'):]] = arrays[name]
        elif name.startswith('opt.v.'):
            opt.second_moment[name[len('opt.v.'):]] = arrays[name]
    state = TrainState(params=params, opt=opt, iter=meta['iter'], running=dict(meta['running']),
                       trainable=list(meta['trainable']))
    return state, TrainConfig.from_dict(meta['train']), meta


# loops

def _append_jsonl(path, record):
    with open(path, 'a', encoding='utf-8') as handle:
        handle.write(json.dumps(record, sort_keys=True) + '\n')


def _keep_before(path, iteration):
    """Drop records at or after ``iteration`` (a resumed run rewrites them)."""
    if not path.exists():
        return
    kept = [line for line in path.read_text().splitlines() if json.loads(line)['iter'] < iteration]
    path.write_text(''.join(line + '\n' for line in kept))


@dataclass
class RunResult:
    model_path: Path
    model_hash: str
    initial_heldout: float
    final_heldout: float
    iterations: int
    state: TrainState = None


def train_loop(state, cfg, corpus, heldout_items, out_dir, stop_at=None, label='pretrain', meta=None):
    """Run ``train_step`` from ``state.iter`` to ``cfg.total_iters``.

    Writes ``metrics.jsonl`` (one record per step), ``heldout.jsonl`` (every
    ``eval_interval`` steps), rolling resumable checkpoints under
    ``checkpoints/`` and, once finished, the float32 export ``model.tck``.
    ``stop_at`` ends the loop early after writing a resumable checkpoint.
    """
    out_dir = Path(out_dir)
    (out_dir / 'checkpoints').mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / 'metrics.jsonl'
    heldout_path = out_dir / 'heldout.jsonl'
    _keep_before(metrics_path, state.iter)
    _keep_before(heldout_path, state.iter + 1 if state.iter else 0)
    meta = dict(meta or {})

    def evaluate():
        record = {'iter': state.iter, **heldout_loss(state.params, heldout_items, cfg.input_ids, cfg.targets_for)}
        _append_jsonl(heldout_path, record)
        logger.info('%s iter %d held-out loss %.4f', label, state.iter, record['loss_total'])
        return record['loss_total']

    history = [json.loads(line)['loss_total'] for line in heldout_path.read_text().splitlines()] \
        if heldout_path.exists() else []
    if state.iter == 0:
        history.append(evaluate())

    end = cfg.total_iters if stop_at is None else min(stop_at, cfg.total_iters)
    while state.iter < end:
        state, record = train_step(state, corpus.batch(cfg.seed, state.iter, cfg.batch_size), cfg)
        _append_jsonl(metrics_path, record)
        if state.iter % cfg.eval_interval == 0 or state.iter == cfg.total_iters:
            history.append(evaluate())
        if state.iter % cfg.checkpoint_interval == 0 or state.iter == end:
            save_train_state(out_dir / 'checkpoints' / 'train_state.tck', state, cfg, **meta)

    if state.iter < cfg.total_iters:
        logger.info('%s stopped at iter %d of %d', label, state.iter, cfg.total_iters)
        return RunResult(out_dir / 'checkpoints' / 'train_state.tck', '', history[0], history[-1], state.iter, state)

    model_path = out_dir / 'model.tck'
    digest = save_model(model_path, state.params, iterations=state.iter, mode=cfg.mode, **meta)
    logger.info('%s finished: held-out loss %.4f -> %.4f', label, history[0], history[-1])
    return RunResult(model_path, digest, history[0], history[-1], state.iter, state)


def pretrain(corpus, heldout_corpus, cfg, model_cfg, out_dir, resume=None, stop_at=None, registry_digest=''):
    """Pretrain from scratch, or continue from a resumable checkpoint."""
    if resume:
        state, saved_cfg, _ = load_train_state(resume)
        if saved_cfg.as_dict() != cfg.as_dict():
            raise ConfigError(f'{resume} was written by a run with a different training config')
        logger.info('resuming pretraining at iter %d', state.iter)
    else:
        state = new_state(model_cfg, cfg)
    heldout = heldout_corpus.fixed_items(cfg.seed, cfg.heldout_items, cfg.mask_ratio, cfg.prediction_ratio)
    return train_loop(state, cfg, corpus, heldout, out_dir, stop_at=stop_at, label='pretrain',
                      meta={'registry_digest': registry_digest})


def adapt_unseen(base_checkpoint, unseen_id, dim, corpus, heldout_corpus, cfg, out_dir, resume=None,
                 registry_digest=''):
    """Train new projector/head for ``unseen_id`` with the shared core frozen."""
    if resume:
        state, _, _ = load_train_state(resume)
    else:
        params, _ = load_model(base_checkpoint)
        if unseen_id in params.cfg.input_dims or unseen_id in params.cfg.target_dims:
            raise RegistryError(f'encoder {unseen_id!r} is already part of {base_checkpoint}')
        added = params.add_encoder(unseen_id, dim, cfg.seed)
        state = TrainState(
            params=params, opt=OptState.for_params({n: params[n] for n in added}), trainable=added,
        )
        logger.info('adapting %s: %d trainable of %d parameters', unseen_id,
                    sum(params[n].size for n in added), params.num_params())
    heldout = heldout_corpus.fixed_items(cfg.seed, cfg.heldout_items, cfg.mask_ratio, cfg.prediction_ratio)
    return train_loop(state, cfg, corpus, heldout, out_dir, label=f'adapt {unseen_id}',
                      meta={'registry_digest': registry_digest, 'adapted': unseen_id,
                            'base': str(base_checkpoint)})


def adapt_config(cfg, unseen_id, run_cfg):
    """Training config for frozen-core adaptation (same masking as pretraining)."""
    section = run_cfg.section('adapt')
    return TrainConfig(
        batch_size=section['batch_size'],
        total_iters=section['adapt_iters'],
        sched=Schedule(section['base_lr'], section['warmup_iters'], section['adapt_iters'],
                       cfg.sched.floor_fraction),
        mask_ratio=cfg.mask_ratio,
        prediction_ratio=cfg.prediction_ratio,
        betas=cfg.betas,
        weight_decay=cfg.weight_decay,
        mode='individual',
        input_ids=(unseen_id,),
        target_ids=(unseen_id,),
        seed=cfg.seed,
        eval_interval=cfg.eval_interval,
        checkpoint_interval=cfg.checkpoint_interval,
        heldout_items=cfg.heldout_items,
        deterministic=cfg.deterministic,
    )
