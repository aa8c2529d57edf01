"""Training loops: the defender/attacker/generator game, plain training,
and the random regularizer baselines, all under one deterministic harness.

The adversarial loop follows a fixed cadence. Defender and attacker start
bit-identical. For T optimizer steps (one "dropout step") both consume the
same mini-batches: the defender updates on clean forwards, the attacker
under masks sampled per batch item from the generator, and every batch is
cached. At the window boundary both models are scored on T held-out
samples drawn without replacement; the win sign becomes the reward, the
moving-average baseline absorbs it, the generator takes one policy-gradient
step, the cache is released, and both task models are re-synchronized to a
single source sampled with higher probability for the better scorer.

All randomness flows through named counter-based streams, so two runs with
the same config and seed produce byte-identical metrics.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import ptree, tasks
from .config import (
    METHOD_ATTENDOUT,
    METHOD_ATTN_LAYERDROP,
    METHOD_LAYERDROP,
    METHOD_NONE,
    METHOD_SCHEDULED,
    METHOD_VANILLA,
    TASK_BRACKETS,
    TASK_MAJORITY,
    TrainConfig,
)
from .models import (
    GeneratorConfig,
    GeneratorParams,
    ModelConfig,
    TaskModelParams,
    gnet_sample_masks,
    init_generator,
    init_task_model,
    task_backward,
    task_forward,
)
from .numkernel import (
    ConfigError,
    ContractViolation,
    DivergenceError,
    RngState,
    cross_entropy_logits,
    sigmoid,
)
from .policygrad import (
    Baseline,
    compute_rewards,
    reinforce_update,
    update_baseline,
)
from .regularizers import (
    Schedule,
    attn_layerdrop_decision,
    layerdrop_decision,
    load_schedule_file,
    schedule_probability,
    vanilla_attention_mask,
)

# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    algo: str = "sgd"
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    slots: dict = field(default_factory=dict)


def optimizer_step(params, grads, lr: float, state: OptimizerState):
    """One in-place SGD/momentum/Adam step; returns (params, state)."""
    bad = ptree.first_nonfinite(grads)
    if bad is not None:
        raise DivergenceError(f"non-finite gradient in {bad}")
    state.t += 1
    for (name, p), (_, g) in zip(ptree.iter_arrays(params), ptree.iter_arrays(grads)):
        if state.algo == "sgd":
            if state.momentum > 0.0:
                v = state.slots.setdefault(name, np.zeros_like(p))
                v *= state.momentum
                v += g
                p -= lr * v
            else:
                p -= lr * g
        elif state.algo == "adam":
            m = state.slots.setdefault(name + ".m", np.zeros_like(p))
            v = state.slots.setdefault(name + ".v", np.zeros_like(p))
            m *= state.beta1
            m += (1 - state.beta1) * g
            v *= state.beta2
            v += (1 - state.beta2) * g * g
            m_hat = m / (1 - state.beta1 ** state.t)
            v_hat = v / (1 - state.beta2 ** state.t)
            p -= lr * m_hat / (np.sqrt(v_hat) + state.eps)
        else:
            raise ConfigError(f"unknown optimizer {state.algo!r}")
    return params, state


def _copy_opt_state(state: OptimizerState) -> OptimizerState:
    return OptimizerState(state.algo, state.momentum, state.beta1, state.beta2,
                          state.eps, state.t, copy.deepcopy(state.slots))


# ---------------------------------------------------------------------------
# Data flow
# ---------------------------------------------------------------------------


class BatchStream:
    """Epoch-shuffled batches, exactly epochs * ceil(n / batch) of them.

    Reshuffles from a per-epoch derived stream, so the order is a pure
    function of (seed, epoch). Returns None when the step budget is spent;
    within the budget, epoch boundaries are crossed transparently.
    """

    def __init__(self, examples, batch_size: int, epochs: int, rng: RngState):
        if batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
        self.examples = examples
        self.batch_size = batch_size
        self.rng = rng
        n = len(examples)
        self.steps_per_epoch = 0 if n == 0 else -(-n // batch_size)
        self.total_steps = epochs * self.steps_per_epoch
        self.step = 0
        self._epoch = -1
        self._order = None

    @property
    def remaining(self) -> int:
        return self.total_steps - self.step

    def next(self):
        if self.step >= self.total_steps:
            return None
        epoch = self.step // self.steps_per_epoch
        if epoch != self._epoch:
            self._epoch = epoch
            self._order = self.rng.derive(epoch).permutation(len(self.examples))
        pos = (self.step % self.steps_per_epoch) * self.batch_size
        idx = self._order[pos:pos + self.batch_size]
        batch = [self.examples[i] for i in idx]
        step = self.step
        self.step += 1
        return step, epoch, batch


def _batch_hash(batch) -> str:
    h = hashlib.blake2b(digest_size=12)
    for tokens, label in batch:
        h.update(np.ascontiguousarray(tokens, dtype=np.int64).tobytes())
        h.update(int(label).to_bytes(4, "little", signed=True))
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Shared pieces
# ---------------------------------------------------------------------------


def evaluate(params: TaskModelParams, samples) -> float:
    """Clean-forward accuracy (no masks ever apply at evaluation)."""
    if not samples:
        raise ContractViolation("evaluation needs at least one sample")
    correct = 0
    for tokens, label in samples:
        logits, _ = task_forward(params, tokens)
        if int(np.argmax(logits[0])) == int(label):
            correct += 1
    return correct / len(samples)


def sync_models(defender: TaskModelParams, attacker: TaskModelParams,
                eval_defender: float, eval_attacker: float, rng: RngState):
    """Collapse both task models onto one source, sampled with probability
    softmax(eval scores); returns (defender', attacker', source_tag)."""
    if vars(defender.config) != vars(attacker.config):
        raise ContractViolation("defender and attacker are structurally different")
    p_attacker = float(sigmoid(eval_attacker - eval_defender))
    pick_attacker = rng.uniform() < p_attacker
    source = attacker if pick_attacker else defender
    return (ptree.copy_tree(source), ptree.copy_tree(source),
            "attacker" if pick_attacker else "defender")


def _update_on_batch(params, batch, lr, opt_state, mask_for_item=None):
    """Forward the batch (one sequence at a time), average the loss, apply
    one optimizer step. Returns (loss, batch_hash)."""
    logits_rows = []
    caches = []
    labels = []
    for i, (tokens, label) in enumerate(batch):
        kwargs = {} if mask_for_item is None else mask_for_item(i, tokens)
        logits, cache = task_forward(params, tokens, **kwargs)
        logits_rows.append(logits[0])
        caches.append(cache)
        labels.append(label)
    loss, dlogits = cross_entropy_logits(np.stack(logits_rows), labels)
    grads = None
    for i, cache in enumerate(caches):
        g = task_backward(cache, dlogits[i:i + 1])
        if grads is None:
            grads = g
        else:
            ptree.add_scaled(grads, g, 1.0)
    optimizer_step(params, grads, lr, opt_state)
    return loss, _batch_hash(batch)


# ---------------------------------------------------------------------------
# The adversarial loop
# ---------------------------------------------------------------------------


@dataclass
class DropoutStepLedger:
    """Per-window state: cached batches, the decisions taken (grouped by
    optimizer step), batch hashes for the defender/attacker agreement
    check, and the latest evaluation pair."""

    cached_batches: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    hashes_defender: list = field(default_factory=list)
    hashes_attacker: list = field(default_factory=list)
    eval_defender: float | None = None
    eval_attacker: float | None = None

    @property
    def steps_taken(self) -> int:
        return len(self.cached_batches)

    def release(self) -> None:
        self.cached_batches.clear()
        self.decisions.clear()
        self.hashes_defender.clear()
        self.hashes_attacker.clear()


@dataclass
class AttendOutGame:
    defender: TaskModelParams
    attacker: TaskModelParams
    generator: GeneratorParams
    opt_defender: OptimizerState
    opt_attacker: OptimizerState
    ledger: DropoutStepLedger
    baseline: Baseline
    eval_pool: list
    policy_rng: RngState
    eval_rng: RngState
    sync_rng: RngState
    windows_done: int = 0
    g_updates: int = 0
    boundary_identical: bool = True


def dropout_step(game: AttendOutGame, stream: BatchStream, cfg: TrainConfig):
    """Run one window of up to T inner steps plus, when the window fills,
    the evaluate / reward / generator-update / release / re-sync tail.

    Returns the metrics rows produced. A window cut short by the end of the
    training budget performs no generator update (the epoch-boundary signal
    is not an error), but still releases its cache.
    """
    if game.ledger.steps_taken or game.ledger.decisions:
        raise ContractViolation("dropout step started with a non-empty cache")
    num_layers = game.defender.config.num_layers
    rows = []
    for _ in range(cfg.dropout_step):
        item = stream.next()
        if item is None:
            break
        step, epoch, batch = item
        game.ledger.cached_batches.append(batch)

        loss_d, hash_d = _update_on_batch(
            game.defender, batch, cfg.lr, game.opt_defender
        )
        game.ledger.hashes_defender.append(hash_d)

        step_decisions = [
            (tokens, gnet_sample_masks(game.generator, tokens, num_layers, game.policy_rng))
            for tokens, _ in batch
        ]
        loss_a, hash_a = _update_on_batch(
            game.attacker, batch, cfg.lr, game.opt_attacker,
            mask_for_item=lambda i, tokens: {"masks": step_decisions[i][1]},
        )
        game.ledger.hashes_attacker.append(hash_a)
        if hash_a != hash_d:
            raise ContractViolation("defender and attacker consumed different batches")
        game.ledger.decisions.append(step_decisions)

        rows.append({
            "step": step, "epoch": epoch, "method": cfg.method,
            "loss_D": loss_d, "loss_A": loss_a,
        })

    if game.ledger.steps_taken == cfg.dropout_step:
        draw = game.eval_rng.derive(game.windows_done)
        idx = draw.choice_without_replacement(len(game.eval_pool), cfg.dropout_step)
        samples = [game.eval_pool[i] for i in idx]
        eval_d = evaluate(game.defender, samples)
        eval_a = evaluate(game.attacker, samples)
        game.ledger.eval_defender = eval_d
        game.ledger.eval_attacker = eval_a

        flat = [pair for group in game.ledger.decisions for pair in group]
        rewards = compute_rewards(eval_a, eval_d, len(flat), cfg.reward)
        game.baseline = update_baseline(game.baseline, rewards)
        reinforce_update(game.generator, flat, rewards, game.baseline, cfg.gnet_lr)
        game.g_updates += 1

        layer_probs = np.mean(
            [pair[1].layer_mean_prob for pair in flat], axis=0
        )
        rows[-1].update({
            "eval_D": eval_d, "eval_A": eval_a,
            "reward_mean": rewards.mean, "baseline": game.baseline.value,
            "drop_prob": [float(v) for v in layer_probs],
        })

        game.ledger.release()
        d_new, a_new, source = sync_models(
            game.defender, game.attacker, eval_d, eval_a, game.sync_rng
        )
        game.defender, game.attacker = d_new, a_new
        src_state = game.opt_attacker if source == "attacker" else game.opt_defender
        game.opt_defender = _copy_opt_state(src_state)
        game.opt_attacker = _copy_opt_state(src_state)
        game.boundary_identical &= ptree.trees_equal(game.defender, game.attacker)
        game.windows_done += 1
    else:
        game.ledger.release()

    return rows


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    method: str
    metrics: list
    mask_trace: list
    models: dict
    dev_accuracy: float
    extra: dict = field(default_factory=dict)


def _generate_dataset(cfg: TrainConfig) -> tasks.Dataset:
    if cfg.task == TASK_MAJORITY:
        return tasks.gen_majority_token(cfg.data_n, cfg.seq_len, cfg.vocab, cfg.seed)
    if cfg.task == TASK_BRACKETS:
        body = cfg.seq_len - 1
        if body < 2 or body % 2 != 0:
            raise ConfigError(
                f"balanced_brackets needs an odd seq_len >= 3, got {cfg.seq_len}"
            )
        return tasks.gen_balanced_brackets(cfg.data_n, body, cfg.seed)
    raise ConfigError(f"unknown task {cfg.task!r}")


def _model_config(cfg: TrainConfig, num_classes: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=cfg.vocab, max_len=cfg.seq_len, num_layers=cfg.layers,
        d_model=cfg.d_model, d_ff=cfg.d_ff, num_heads=cfg.heads,
        num_classes=num_classes,
    )


def _build_schedule(cfg: TrainConfig) -> Schedule:
    if cfg.schedule_file is not None:
        return load_schedule_file(cfg.schedule_file, cfg.layers)
    p0, slope = cfg.sched_p0, cfg.sched_slope
    for name, vals in (("p0", p0), ("slope", slope)):
        if len(vals) not in (1, cfg.layers):
            raise ConfigError(
                f"[scheduled] {name} needs 1 or {cfg.layers} values, got {len(vals)}"
            )
    p0 = p0 * cfg.layers if len(p0) == 1 else p0
    slope = slope * cfg.layers if len(slope) == 1 else slope
    return Schedule.linear(np.array(p0), np.array(slope), cfg.layers)


def train(config: TrainConfig) -> TrainResult:
    """Run one training job as configured; pure function of the config."""
    full = _generate_dataset(config)
    fractions = (config.train_fraction, config.dev_fraction, config.test_fraction)
    train_ds, dev_ds, test_ds = tasks.split(full, fractions, config.seed)
    mcfg = _model_config(config, full.num_classes)
    root = RngState(config.seed)

    if config.method == METHOD_ATTENDOUT:
        return _train_attendout(config, mcfg, train_ds, dev_ds, root)
    return _train_single(config, mcfg, train_ds, dev_ds, root)


def _train_single(cfg: TrainConfig, mcfg: ModelConfig, train_ds, dev_ds, root):
    model = init_task_model(mcfg, cfg.seed)
    opt = OptimizerState(cfg.opt_algo, cfg.momentum)
    stream = BatchStream(train_ds.examples, cfg.batch_size, cfg.epochs,
                         root.derive("data"))
    mask_rng = root.derive("masks")
    schedule = _build_schedule(cfg) if cfg.method == METHOD_SCHEDULED else None

    metrics = []
    mask_trace = []
    while True:
        item = stream.next()
        if item is None:
            break
        step, epoch, batch = item
        row = {"step": step, "epoch": epoch, "method": cfg.method}

        if cfg.method == METHOD_NONE:
            loss, _ = _update_on_batch(model, batch, cfg.lr, opt)
        elif cfg.method in (METHOD_VANILLA, METHOD_SCHEDULED):
            if cfg.method == METHOD_VANILLA:
                probs = [cfg.p] * cfg.layers
            else:
                probs = [schedule_probability(schedule, i, step) for i in range(cfg.layers)]
                for layer, prob in enumerate(probs):
                    mask_trace.append((step, layer, prob))
            rescale = None
            if cfg.method == METHOD_VANILLA and cfg.vanilla_rescale and cfg.p < 1.0:
                rescale = 1.0 / (1.0 - cfg.p)
            mode = cfg.vanilla_mode if cfg.method == METHOD_VANILLA else "scores"
            batch_masks = [
                [vanilla_attention_mask(tokens.size, probs[i], mask_rng, mode)
                 for i in range(cfg.layers)]
                for tokens, _ in batch
            ]
            loss, _ = _update_on_batch(
                model, batch, cfg.lr, opt,
                mask_for_item=lambda i, tokens: {
                    "layer_masks": batch_masks[i],
                    "weights_rescale": rescale,
                } if rescale is not None else {"layer_masks": batch_masks[i]},
            )
            row["drop_prob"] = [float(p) for p in probs]
        elif cfg.method == METHOD_LAYERDROP:
            skips = layerdrop_decision(cfg.layers, cfg.p, mask_rng)
            loss, _ = _update_on_batch(
                model, batch, cfg.lr, opt,
                mask_for_item=lambda i, tokens: {"skip_blocks": skips},
            )
            row["drop_prob"] = [cfg.p] * cfg.layers
        elif cfg.method == METHOD_ATTN_LAYERDROP:
            bits = attn_layerdrop_decision(cfg.layers, cfg.p, mask_rng)
            loss, _ = _update_on_batch(
                model, batch, cfg.lr, opt,
                mask_for_item=lambda i, tokens: {"constant_attn_layers": bits},
            )
            row["drop_prob"] = [cfg.p] * cfg.layers
        else:
            raise ConfigError(f"method {cfg.method!r} has no single-model loop")

        row["loss_D"] = loss
        metrics.append(row)

    dev_accuracy = evaluate(model, dev_ds.examples) if len(dev_ds) else float("nan")
    return TrainResult(cfg.method, metrics, mask_trace, {"model": model},
                       dev_accuracy, extra={"total_steps": stream.total_steps})


def _train_attendout(cfg: TrainConfig, mcfg: ModelConfig, train_ds, dev_ds, root):
    train_examples = list(train_ds.examples)
    if cfg.eval_pool == "dev":
        eval_pool = list(dev_ds.examples)
    else:
        held = max(1, int(len(train_examples) * cfg.eval_slice_fraction))
        eval_pool = train_examples[-held:]
        train_examples = train_examples[:-held]
    if len(eval_pool) < cfg.dropout_step:
        raise ConfigError(
            f"evaluation pool of {len(eval_pool)} cannot cover T={cfg.dropout_step}"
        )

    defender = init_task_model(mcfg, cfg.seed)
    attacker = ptree.copy_tree(defender)
    generator = init_generator(
        GeneratorConfig(cfg.vocab, cfg.gnet_dim, cfg.tau), cfg.seed
    )
    game = AttendOutGame(
        defender=defender, attacker=attacker, generator=generator,
        opt_defender=OptimizerState(cfg.opt_algo, cfg.momentum),
        opt_attacker=OptimizerState(cfg.opt_algo, cfg.momentum),
        ledger=DropoutStepLedger(),
        baseline=Baseline(decay=cfg.baseline_decay),
        eval_pool=eval_pool,
        policy_rng=root.derive("policy"),
        eval_rng=root.derive("eval"),
        sync_rng=root.derive("sync"),
    )
    game.boundary_identical &= ptree.trees_equal(game.defender, game.attacker)

    stream = BatchStream(train_examples, cfg.batch_size, cfg.epochs,
                         root.derive("data"))
    metrics = []
    mask_trace = []
    while stream.remaining > 0:
        before = game.windows_done
        rows = dropout_step(game, stream, cfg)
        metrics.extend(rows)
        if game.windows_done > before and rows and "drop_prob" in rows[-1]:
            for layer, prob in enumerate(rows[-1]["drop_prob"]):
                mask_trace.append((before, layer, prob))

    dev_accuracy = evaluate(game.defender, dev_ds.examples) if len(dev_ds) else float("nan")
    attacker_accuracy = evaluate(game.attacker, dev_ds.examples) if len(dev_ds) else float("nan")
    return TrainResult(
        cfg.method, metrics, mask_trace,
        {"defender": game.defender, "attacker": game.attacker,
         "generator": game.generator},
        dev_accuracy,
        extra={
            "total_steps": stream.total_steps,
            "g_updates": game.g_updates,
            "boundary_identical": game.boundary_identical,
            "cache_empty": game.ledger.steps_taken == 0,
            "attacker_dev_accuracy": attacker_accuracy,
        },
    )
