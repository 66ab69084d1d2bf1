"""FedAvg training, mutual global/group learning, and ensemble inference."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .data import ClientDataset, Sample, stack
from .metrics import RoundMetrics, accuracy, macro_f1
from .nn import (Architecture, OptimizerConfig, OptimizerState, adamw_step, forward,
                 init_model, loss_and_grad, softmax)
from .rng import SplitMix64, derive_seed, sample_without_replacement

log = logging.getLogger(__name__)

# Labels folded into the master seed so every random stream is independent.
_SCHEDULE, _INIT_GLOBAL, _INIT_GROUP, _LOCAL = 1, 2, 3, 4


@dataclass(frozen=True)
class FederationConfig:
    rounds: int = 10
    local_epochs: int = 10
    client_fraction: float = 0.30
    seed: int = 42

    def __post_init__(self):
        if self.rounds < 1 or self.local_epochs < 0 or self.rounds * self.local_epochs < 1:
            raise ValueError("need rounds >= 1 and at least one local epoch in total")
        if not 0 < self.client_fraction <= 1:
            raise ValueError("client_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class MutualConfig:
    lambda_global: float = 0.33
    lambda_group: float = 0.75

    def __post_init__(self):
        if self.lambda_global < 0 or self.lambda_group < 0:
            raise ValueError("distillation weights must be non-negative")


@dataclass
class ClientUpdate:
    params: np.ndarray
    num_samples: int
    client_id: str
    arch: Architecture


@dataclass
class GroupRegistry:
    """Server-side group models, one per modality id, all of one architecture."""

    arch: Architecture
    models: dict[int, np.ndarray] = field(default_factory=dict)


def clients_per_round(pool_size: int, fraction: float) -> int:
    # The epsilon keeps 10 * 0.3 == 3.0000000000000004 from rounding up to 4.
    return max(1, min(pool_size, math.ceil(pool_size * fraction - 1e-9)))


def sample_clients(pool_size: int, fraction: float, round_index: int, master_seed: int) -> list[int]:
    rng = SplitMix64(derive_seed(master_seed, _SCHEDULE, round_index))
    return sample_without_replacement(pool_size, clients_per_round(pool_size, fraction), rng)


def client_schedule(pool_size: int, fraction: float, rounds: int, master_seed: int) -> list[list[int]]:
    """Whole multi-round schedule, drawn up front so it is shared by every model."""
    return [sample_clients(pool_size, fraction, r, master_seed) for r in range(rounds)]


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def local_train(
    params: np.ndarray,
    arch: Architecture,
    data: ClientDataset,
    epochs: int,
    opt_cfg: OptimizerConfig,
    rng_seed: int,
    history: list[float] | None = None,
) -> ClientUpdate:
    """Mini-batch cross-entropy training with a fresh AdamW state.

    If ``history`` is given, the mean batch loss of every epoch is appended.
    """
    feats, mask, labels = data.arrays()
    rng = np.random.default_rng(rng_seed)
    state = OptimizerState.zeros(params.size)
    params = params.copy()
    for _ in range(epochs):
        losses = []
        for idx in _batches(len(labels), opt_cfg.batch_size, rng):
            loss, grad = loss_and_grad(params, arch, feats[idx], mask[idx], labels[idx])
            params, state = adamw_step(params, grad, state, opt_cfg)
            losses.append(loss)
        if history is not None:
            history.append(float(np.mean(losses)))
    return ClientUpdate(params, len(labels), data.client_id, arch)


def mutual_local_train(
    global_params: np.ndarray,
    global_arch: Architecture,
    group_params: np.ndarray,
    group_arch: Architecture,
    data: ClientDataset,
    epochs: int,
    opt_cfg: OptimizerConfig,
    mutual: MutualConfig,
    rng_seed: int,
) -> tuple[ClientUpdate, ClientUpdate]:
    """Train the global and group models side by side, each distilling from the other.

    Both models see the same batches. Within a batch, each model's peer
    probabilities are taken before either model steps.
    """
    if len(data.modalities) != 1 or 0 in data.modalities:
        raise ValueError(f"client {data.client_id} mixes modalities; mutual training needs one")
    feats, mask, labels = data.arrays()
    rng = np.random.default_rng(rng_seed)
    g_state = OptimizerState.zeros(global_params.size)
    q_state = OptimizerState.zeros(group_params.size)
    g_params, q_params = global_params.copy(), group_params.copy()
    for _ in range(epochs):
        for idx in _batches(len(labels), opt_cfg.batch_size, rng):
            x, mk, y = feats[idx], mask[idx], labels[idx]
            g_probs = softmax(forward(g_params, global_arch, x, mk))
            q_probs = softmax(forward(q_params, group_arch, x, mk))
            _, g_grad = loss_and_grad(g_params, global_arch, x, mk, y, q_probs, mutual.lambda_global)
            _, q_grad = loss_and_grad(q_params, group_arch, x, mk, y, g_probs, mutual.lambda_group)
            g_params, g_state = adamw_step(g_params, g_grad, g_state, opt_cfg)
            q_params, q_state = adamw_step(q_params, q_grad, q_state, opt_cfg)
    n = len(labels)
    return (ClientUpdate(g_params, n, data.client_id, global_arch),
            ClientUpdate(q_params, n, data.client_id, group_arch))


def fedavg(updates: list[ClientUpdate]) -> np.ndarray:
    """Sample-count weighted mean of client parameters.

    Updates are reduced in client_id order so the result does not depend on
    the order they arrived in.
    """
    if not updates:
        raise ValueError("fedavg needs at least one update")
    arch = updates[0].arch
    for u in updates:
        if u.arch != arch or u.params.shape != updates[0].params.shape:
            raise ValueError(f"update from {u.client_id} has a different architecture")
    ordered = sorted(updates, key=lambda u: u.client_id)
    total = sum(u.num_samples for u in ordered)
    out = np.zeros_like(ordered[0].params)
    for u in ordered:
        out += (u.num_samples / total) * u.params
    return out


def predict(params: np.ndarray, arch: Architecture, feats: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Argmax class per row (lowest index wins ties)."""
    return np.argmax(forward(params, arch, feats, mask), axis=1)


def ensemble_predict(registry: GroupRegistry, sample: Sample) -> int:
    """Route a single-modality sample to its modality's group model."""
    if not sample.is_separated:
        raise ValueError("ensemble prediction needs a single-modality sample")
    model = registry.models.get(sample.modality_id)
    if model is None:
        raise ValueError(f"no group model for modality {sample.modality_id}")
    feats, mask = sample.features[None], sample.modality_mask[None]
    return int(predict(model, registry.arch, feats, mask)[0])


def ensemble_predict_batch(registry: GroupRegistry, samples: list[Sample]) -> np.ndarray:
    """Vectorised ``ensemble_predict`` over a list of samples."""
    feats, mask, _ = stack(samples)
    mods = np.array([s.modality_id for s in samples])
    if not np.all(mask.sum(axis=1) == 1):
        raise ValueError("ensemble prediction needs single-modality samples")
    out = np.empty(len(samples), dtype=np.int64)
    for m in np.unique(mods):
        if int(m) not in registry.models:
            raise ValueError(f"no group model for modality {m}")
        sel = mods == m
        out[sel] = predict(registry.models[int(m)], registry.arch, feats[sel], mask[sel])
    return out


@dataclass
class ExperimentResult:
    metrics: list[RoundMetrics]
    global_params: np.ndarray
    registry: GroupRegistry | None
    schedule: list[list[int]]


def run_experiment(
    clients: list[ClientDataset],
    test_set: list[Sample],
    fed_cfg: FederationConfig,
    arch: Architecture,
    opt_cfg: OptimizerConfig | None = None,
    mode: str = "plain",
    mutual: MutualConfig | None = None,
    group_arch: Architecture | None = None,
    partition_label: str = "",
) -> ExperimentResult:
    """Run every federated round and score the holdout set after each one.

    In ``mutual`` mode each client also trains its modality's group model;
    group models are averaged per modality over that round's participants,
    and a modality with no participant keeps last round's model.
    """
    if mode not in ("plain", "mutual"):
        raise ValueError(f"unknown mode {mode!r}")
    opt_cfg = opt_cfg or OptimizerConfig()
    seed = fed_cfg.seed
    num_classes = arch.num_classes
    registry = None
    if mode == "mutual":
        mutual = mutual or MutualConfig()
        group_arch = group_arch or arch
        mods = set()
        for c in clients:
            if len(c.modalities) != 1 or 0 in c.modalities:
                raise ValueError("mutual mode needs single-modality clients (subj+env+mod, separated)")
            mods |= c.modalities
        registry = GroupRegistry(group_arch, {
            m: init_model(group_arch, derive_seed(seed, _INIT_GROUP, m)) for m in sorted(mods)
        })

    schedule = client_schedule(len(clients), fed_cfg.client_fraction, fed_cfg.rounds, seed)
    global_params = init_model(arch, derive_seed(seed, _INIT_GLOBAL))
    test_feats, test_mask, test_labels = stack(test_set)
    global_label = arch.kind if mode == "plain" else f"{arch.kind}+mutual"
    metrics: list[RoundMetrics] = []

    for r, selected in enumerate(schedule):
        updates, group_updates = [], {}
        for idx in selected:
            client = clients[idx]
            rng_seed = derive_seed(seed, _LOCAL, r, idx)
            if registry is None:
                updates.append(local_train(global_params, arch, client, fed_cfg.local_epochs,
                                           opt_cfg, rng_seed))
            else:
                (mod,) = client.modalities
                g_up, q_up = mutual_local_train(global_params, arch, registry.models[mod], group_arch,
                                                client, fed_cfg.local_epochs, opt_cfg, mutual, rng_seed)
                updates.append(g_up)
                group_updates.setdefault(mod, []).append(q_up)
        global_params = fedavg(updates)
        if registry is not None:
            registry = GroupRegistry(registry.arch, {
                m: fedavg(group_updates[m]) if m in group_updates else p
                for m, p in registry.models.items()
            })

        preds = predict(global_params, arch, test_feats, test_mask)
        metrics.append(RoundMetrics(r, seed, accuracy(preds, test_labels),
                                    macro_f1(preds, test_labels, num_classes),
                                    partition_label, global_label))
        if registry is not None:
            ens = ensemble_predict_batch(registry, test_set)
            metrics.append(RoundMetrics(r, seed, accuracy(ens, test_labels),
                                        macro_f1(ens, test_labels, num_classes),
                                        partition_label, "ensemble"))
        log.debug("round %d %s acc=%.3f", r, partition_label, metrics[-1].accuracy)

    return ExperimentResult(metrics, global_params, registry, schedule)
