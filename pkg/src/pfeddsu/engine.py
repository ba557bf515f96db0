"""Federated simulation: server rounds, two-phase local updates, evaluation.

The main algorithm shares only the feature extractor. Each sampled client
first fine-tunes its private head with the extractor frozen, then trains the
extractor through top-k masked forward parameters with the norm penalty,
uploads the masked, clipped and noised difference, and keeps its head.
The ``dp_fedavg_fb`` baseline instead trains and uploads the whole model and
only fine-tunes a head copy locally at evaluation time.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import model as nn
from .data import ClientShard
from .model import CLASSIFIER, EXTRACTOR, Batch, ModelParams, RegularizerConfig
from .privacy import (PrivacyParams, RdpLedger, add_masked_noise, clip_update, compose,
                      epsilon_at_delta, privacy_report, rdp_vector)
from .sparsify import MaskMatrix, SparseDelta, compute_mask, masked_update
from .tensor import Rng

log = logging.getLogger(__name__)

ALGORITHMS = ("dp_pfeddsu", "dp_fedavg_fb")
CLIP_SLACK = 1e-9


@dataclass(frozen=True)
class TrainConfig:
    """Everything that defines one simulated training run (privacy aside).

    Local work is counted in epochs over the client's train split;
    ``batch_size`` fixes how many SGD iterations an epoch is.
    """

    rounds: int = 50
    ext_epochs: int = 5
    cls_epochs: int = 15
    eval_epochs: int = 15
    lr_ext: float = 0.01
    lr_cls: float = 0.01
    lr_global: float = 1.0
    batch_size: int = 32
    num_clients: int = 20
    sample_prob: float = 0.5
    sparsity: float = 0.05
    masked_layers: int = 4
    lam: float = 0.2
    penalty: str = "square"
    rt_enabled: bool = True
    dan_enabled: bool = True
    algorithm: str = "dp_pfeddsu"
    hidden: tuple = (128, 64)
    activation: str = "tanh"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        checks = [
            (self.rounds >= 1, "rounds", ">= 1"),
            (self.ext_epochs >= 0, "ext_epochs", ">= 0"),
            (self.cls_epochs >= 0, "cls_epochs", ">= 0"),
            (self.eval_epochs >= 0, "eval_epochs", ">= 0"),
            (self.batch_size >= 1, "batch_size", ">= 1"),
            (self.num_clients >= 1, "num_clients", ">= 1"),
            (self.lr_ext > 0, "lr_ext", "> 0"),
            (self.lr_cls > 0, "lr_cls", "> 0"),
            (self.lr_global > 0, "lr_global", "> 0"),
            (0 < self.sample_prob <= 1, "sample_prob", "in (0, 1]"),
            (0 < self.sparsity <= 1, "sparsity", "in (0, 1]"),
            (self.masked_layers >= 0, "masked_layers", ">= 0"),
            (self.lam >= 0, "lam", ">= 0"),
            (self.penalty in ("square", "abs"), "penalty", "'square' or 'abs'"),
            (self.algorithm in ALGORITHMS, "algorithm", f"one of {ALGORITHMS}"),
            (len(self.hidden) >= 1 and min(self.hidden) >= 1, "hidden", "non-empty positive widths"),
            (self.activation in ("tanh", "relu"), "activation", "'tanh' or 'relu'"),
            (0 <= self.seed < 2 ** 63, "seed", "in [0, 2**63)"),
        ]
        for ok, key, allowed in checks:
            if not ok:
                raise ValueError(f"{key}={getattr(self, key)!r} is invalid: must be {allowed}")

    def dense_prefix(self) -> int:
        n_ext = len(self.hidden)
        return n_ext - min(self.masked_layers, n_ext)

    def regularizer(self, clip: float) -> RegularizerConfig:
        return RegularizerConfig(self.lam, clip, self.dan_enabled, self.penalty)


@dataclass
class ClientState:
    client_id: int
    shard: ClientShard
    cls: tuple  # private head, never uploaded


class Channel:
    """The client -> server link; counts everything that crosses it."""

    def __init__(self, keep_payloads: bool = False):
        self.keep_payloads = keep_payloads
        self.counts: Counter = Counter()
        self.payloads: list[tuple[int, int, SparseDelta]] = []

    def upload(self, round_index: int, client_id: int, payload: SparseDelta) -> SparseDelta:
        if not isinstance(payload, SparseDelta):
            raise TypeError(f"only SparseDelta may leave a client, got {type(payload).__name__}")
        self.counts[type(payload).__name__] += 1
        if self.keep_payloads:
            self.payloads.append((round_index, client_id, payload))
        return payload


class BatchSampler:
    """Minibatches without replacement within an epoch, reshuffled every epoch."""

    def __init__(self, n: int, batch_size: int, gen: np.random.Generator):
        self.n, self.batch_size, self.gen = n, batch_size, gen
        self._perm = np.empty(0, dtype=np.intp)
        self._pos = 0

    @property
    def per_epoch(self) -> int:
        return math.ceil(self.n / self.batch_size)

    def next(self) -> np.ndarray:
        if self._pos >= len(self._perm):
            self._perm = self.gen.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos:self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def _batch(shard_train, idx) -> Batch:
    return Batch(shard_train.inputs[idx], shard_train.labels[idx])


@dataclass
class LocalResult:
    upload: SparseDelta
    train_loss: float
    norm_pre_clip: float
    norm_post_clip: float
    passthrough: bool


@dataclass
class TrainingReport:
    config: dict
    privacy: dict
    rounds: list = field(default_factory=list)
    privacy_reports: list = field(default_factory=list)
    uploads: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    params: ModelParams | None = None

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "privacy": self.privacy,
            "rounds": self.rounds,
            "privacy_reports": self.privacy_reports,
            "final": self.final,
        }


def make_arch(config: TrainConfig, in_dim: int, num_classes: int) -> nn.Architecture:
    return nn.mlp(in_dim, config.hidden, num_classes, config.activation)


def _round_mask(ext, config: TrainConfig, step: int = 0) -> MaskMatrix | None:
    if not config.rt_enabled:
        return None
    return compute_mask(ext, config.sparsity, config.dense_prefix(), step)


def train_head(params: ModelParams, shard_train, mask: MaskMatrix | None, iters: int,
               lr: float, sampler: BatchSampler) -> tuple[ModelParams, list[float]]:
    """SGD on the classifier layers only, extractor frozen (plain cross-entropy)."""
    losses = []
    if iters == 0:
        return params, losses
    feats = nn.extract_features(params, shard_train.inputs, mask)
    for _ in range(iters):
        idx = sampler.next()
        loss, grads = nn.head_loss_and_grad(params, feats[idx], shard_train.labels[idx])
        params = nn.sgd_step(params, grads, lr, CLASSIFIER)
        losses.append(loss)
    return params, losses


def local_update(client: ClientState, theta_ext: Sequence[np.ndarray], config: TrainConfig,
                 privacy: PrivacyParams, rng: Rng, arch: nn.Architecture) -> LocalResult:
    """Two-phase local step; updates ``client.cls`` in place and returns the upload."""
    train = client.shard.train
    gen = rng.child("batches").generator()
    sampler = BatchSampler(len(train), config.batch_size, gen)
    params = ModelParams(arch, tuple(theta_ext) + tuple(client.cls))

    # Phase 1: head fine-tuning on the frozen (masked) extractor
    mask = _round_mask(params.ext, config)
    params, losses = train_head(params, train, mask, config.cls_epochs * sampler.per_epoch,
                                config.lr_cls, sampler)
    client.cls = params.cls

    # Phase 2: extractor training through per-step masks with the norm penalty
    anchor = params
    reg = config.regularizer(privacy.clip)
    tau = config.ext_epochs * sampler.per_epoch
    for s in range(tau):
        batch = _batch(train, sampler.next())
        mask = _round_mask(params.ext, config, s)
        _, ce, grads = nn.loss_and_grad(params, anchor, mask, batch, reg, EXTRACTOR)
        params = nn.sgd_step(params, grads, config.lr_ext, EXTRACTOR)
        losses.append(ce)

    final_mask = _round_mask(params.ext, config, tau)
    delta = masked_update(params.ext, anchor.ext, final_mask)
    clipped = clip_update(delta, privacy.clip)
    noisy = add_masked_noise(clipped, privacy, final_mask, rng.child("noise"))
    return LocalResult(noisy, float(np.mean(losses)) if losses else math.nan,
                       delta.norm, clipped.norm, clipped is delta)


def local_update_full(client: ClientState, theta: ModelParams, config: TrainConfig,
                      privacy: PrivacyParams, rng: Rng) -> LocalResult:
    """Baseline local step: plain SGD on the whole model, dense clip and noise."""
    train = client.shard.train
    sampler = BatchSampler(len(train), config.batch_size, rng.child("batches").generator())
    off = RegularizerConfig()
    params = theta
    losses = []
    for _ in range(config.ext_epochs * sampler.per_epoch):
        loss, _, grads = nn.loss_and_grad(params, None, None, _batch(train, sampler.next()), off, "all")
        params = nn.sgd_step(params, grads, config.lr_ext, EXTRACTOR)
        params = nn.sgd_step(params, grads, config.lr_cls, CLASSIFIER)
        losses.append(loss)
    delta = masked_update(params.layers, theta.layers, None)
    clipped = clip_update(delta, privacy.clip)
    noisy = add_masked_noise(clipped, privacy, None, rng.child("noise"))
    return LocalResult(noisy, float(np.mean(losses)) if losses else math.nan,
                       delta.norm, clipped.norm, clipped is delta)


def accuracy(params: ModelParams, data, mask: MaskMatrix | None) -> float:
    if len(data) == 0:
        raise ValueError("empty evaluation split")
    return float(np.mean(nn.predict(params, data.inputs, mask) == data.labels))


def evaluate(theta: ModelParams, clients: Sequence[ClientState], config: TrainConfig,
             rng: Rng, use_client_heads: bool = True) -> dict:
    """Personalized accuracy: fine-tune a head copy per client, score its test split.

    ``theta`` supplies the extractor (and the head when ``use_client_heads`` is
    false, as for the full-model baseline). Client state is not modified.
    """
    mask = _round_mask(theta.ext, config)
    per_client, before = [], []
    for c in clients:
        if c.shard.test is None or len(c.shard.test) == 0:
            raise ValueError(f"client {c.client_id} has no test split")
        params = theta.with_cls(c.cls) if use_client_heads else theta
        before.append(accuracy(params, c.shard.test, mask))
        if len(c.shard.train):
            sampler = BatchSampler(len(c.shard.train), config.batch_size,
                                   rng.child(c.client_id).generator())
            params, _ = train_head(params, c.shard.train, mask, config.eval_epochs * sampler.per_epoch,
                                   config.lr_cls, sampler)
        per_client.append(accuracy(params, c.shard.test, mask))
    return {
        "per_client": per_client,
        "mean": float(np.mean(per_client)),
        "pre_finetune_mean": float(np.mean(before)),
    }


def sample_cohort(num_clients: int, q: float, rng: Rng) -> list[int]:
    """Independent Bernoulli(q) participation, returned in ascending id order."""
    draws = rng.generator().random(num_clients)
    return [i for i in range(num_clients) if draws[i] < q]


def run_training(config: TrainConfig, privacy: PrivacyParams, shards: Sequence[ClientShard],
                 init: ModelParams | None = None, channel: Channel | None = None,
                 evaluate_every: int = 1) -> TrainingReport:
    """Run ``config.rounds`` server rounds and return metrics, privacy log and final model."""
    if len(shards) != config.num_clients:
        raise ValueError(f"got {len(shards)} shards for {config.num_clients} clients")
    if (privacy.num_clients, privacy.sample_prob) != (config.num_clients, config.sample_prob):
        raise ValueError("privacy parameters disagree with the training config on N or q")
    baseline = config.algorithm == "dp_fedavg_fb"
    root = Rng(config.seed)
    first = shards[0].train
    arch = make_arch(config, first.dim, first.num_classes)
    theta = init if init is not None else nn.init_params(arch, root.child("init"))
    if theta.arch != arch:
        raise ValueError("initial parameters do not match the configured architecture")
    channel = channel or Channel()
    clients = [ClientState(s.client_id, s, tuple(v.copy() for v in theta.cls)) for s in shards]

    ledger = RdpLedger()
    per_round_rdp = rdp_vector(privacy.sample_prob, privacy.sigma, ledger.orders)
    report = TrainingReport(config=asdict(config), privacy=asdict(privacy))

    for t in range(config.rounds):
        cohort = sample_cohort(config.num_clients, config.sample_prob, root.child("cohort", t))
        results: list[tuple[int, LocalResult]] = []
        for i in cohort:
            c = clients[i]
            if len(c.shard.train) == 0:
                log.info("round %d: client %d has an empty shard, skipped", t, i)
                continue
            crng = root.child("local", t, i)
            if baseline:
                res = local_update_full(c, theta, config, privacy, crng)
            else:
                res = local_update(c, theta.ext, config, privacy, crng, arch)
            if res.norm_post_clip > privacy.clip + CLIP_SLACK:
                raise AssertionError(f"clipped norm {res.norm_post_clip} exceeds C={privacy.clip}")
            channel.upload(t, i, res.upload)
            results.append((i, res))
            report.uploads.append({"round": t, "client": i, "norm_pre_clip": res.norm_pre_clip,
                                   "norm_post_clip": res.norm_post_clip, "passthrough": res.passthrough})

        if results:
            total = [np.zeros_like(v) for v in results[0][1].upload.layers]
            for _, res in results:
                for acc, v in zip(total, res.upload.layers):
                    acc += v
            step = config.lr_global / len(results)
            if baseline:
                theta = replace(theta, layers=tuple(a + step * d for a, d in zip(theta.layers, total)))
            else:
                theta = theta.with_ext([a + step * d for a, d in zip(theta.ext, total)])
        else:
            log.info("round %d: empty cohort, no aggregation", t)
        ledger = compose(ledger, per_round_rdp)
        preport = privacy_report(ledger, t, privacy)
        report.privacy_reports.append(preport)

        ev = None
        if (t + 1) % evaluate_every == 0 or t == config.rounds - 1:
            ev = evaluate(theta, clients, config, root.child("eval", t), use_client_heads=not baseline)
        norms = [r.norm_pre_clip for _, r in results]
        report.rounds.append({
            "round": t,
            "mean_train_loss": float(np.mean([r.train_loss for _, r in results])) if results else math.nan,
            "mean_accuracy": ev["mean"] if ev else math.nan,
            "epsilon_so_far": preport["epsilon"],
            "cohort_size": len(results),
            "mean_update_norm_pre_clip": float(np.mean(norms)) if norms else math.nan,
            "clip_fraction": float(np.mean([n > privacy.clip for n in norms])) if norms else math.nan,
        })
        if ev:
            report.final = {"round": t, "epsilon": preport["epsilon"], **ev}
        log.debug("round %d: %s", t, report.rounds[-1])

    report.params = theta
    return report


def run_baseline_dp_fedavg_fb(config: TrainConfig, privacy: PrivacyParams,
                              shards: Sequence[ClientShard], **kw) -> TrainingReport:
    return run_training(replace(config, algorithm="dp_fedavg_fb"), privacy, shards, **kw)


def final_epsilon(report: TrainingReport) -> float:
    return report.privacy_reports[-1]["epsilon"]


def ledger_for(report: TrainingReport) -> RdpLedger:
    """Rebuild the composed ledger from the last privacy record."""
    last = report.privacy_reports[-1]
    return RdpLedger(tuple(last["orders"]), (np.array(last["rdp"]),), len(report.privacy_reports))

