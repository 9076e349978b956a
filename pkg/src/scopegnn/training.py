"""Stochastic variational training of the scope-adaptive GNN.

Each epoch resamples the dropedge view once, draws S structure samples, and
averages the masked-forward negative log-likelihood over them; the two KL
regularizers are added scaled by 1 / |train mask| (configurable) so the loss
is per labeled node throughout. Early stopping keeps the parameters of the
best validation epoch, ties broken by lower validation loss.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .distributions import (
    StickBreakingPrior,
    VariationalPosterior,
    draw_mask_sample,
    kl_nu,
    kl_z,
    kl_z_mc,
    replay_mask_sample,
)
from .graph import Graph, drop_edges
from .metrics import accuracy
from .model import ModelParams, forward_model, init_params, predict


@dataclass
class TrainConfig:
    epochs: int = 500
    patience: int = 100
    lr: float = 1e-2
    dropout: float = 0.5
    dropedge: float = 0.0
    n_samples: int = 5  # Monte-Carlo structure samples per step
    prior_alpha: float = 5.0
    prior_beta: float = 2.0
    truncation: int = 10
    tau: float = 0.67
    hidden_width: int = 128
    seed: int = 0
    backbone: str = "bna"
    eval_mask_policy: str = "sample"
    eval_samples: int = 5
    kl_scale: str = "train"  # "train" (1/|train mask|) or "one"
    kl_z_method: str = "analytic"  # or "mc"
    scope_threshold: float = 0.5

    def __post_init__(self):
        if self.n_samples < 1 or self.truncation < 1:
            raise ValueError("n_samples and truncation must be >= 1")
        if not (0.0 <= self.dropout < 1.0 and 0.0 <= self.dropedge < 1.0):
            raise ValueError("dropout and dropedge rates must lie in [0, 1)")

    def prior(self):
        return StickBreakingPrior(self.prior_alpha, self.prior_beta)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_acc: float
    val_loss: float
    mean_pi: np.ndarray  # sampled sticks averaged over the S draws
    scope_mode: int


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)
    best_epoch: int = -1
    best_val_acc: float = -1.0
    best_val_loss: float = np.inf

    def mean_pi_at(self, epoch):
        return self.records[epoch].mean_pi


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss; carries the term breakdown."""


def elbo_step(graph, params, posterior, prior, config, rng, samples=None, a_hat=None):
    """Negative-ELBO loss tensor for one optimization step.

    Draws S mask samples (or replays ``samples`` with shared noise), averages
    the train-mask NLL over them, and adds both KL terms under the configured
    scaling. Returns (loss tensor, samples used, term breakdown dict).
    """
    width = params.width
    if samples is None:
        samples = [
            draw_mask_sample(posterior, width, rng, config.scope_threshold)
            for _ in range(config.n_samples)
        ]
    else:
        samples = [replay_mask_sample(posterior, s, config.scope_threshold) for s in samples]

    nll_terms = []
    for sample in samples:
        if config.backbone == "bna":
            trace = forward_model(
                graph, params, mask_sample=sample, mode="bna",
                train_mode=True, dropout_rate=config.dropout, rng=rng, a_hat=a_hat,
            )
        else:
            trace = forward_model(
                graph, params, mode=config.backbone,
                train_mode=True, dropout_rate=config.dropout, rng=rng, a_hat=a_hat,
            )
        nll_terms.append(
            ad.masked_softmax_nll(trace.logits, graph.labels, graph.train_mask)
        )
    nll = nll_terms[0]
    for t in nll_terms[1:]:
        nll = ad.add(nll, t)
    nll = ad.scale(nll, 1.0 / len(nll_terms))

    breakdown = {"nll": float(nll.value)}
    loss = nll
    if config.backbone == "bna":
        pi_prior = prior.expected_sticks(posterior.truncation)
        kl_nu_term = kl_nu(posterior, prior)
        if config.kl_z_method == "mc":
            kl_z_terms = [kl_z_mc(s.z, s.pi, pi_prior, posterior.tau) for s in samples]
        else:
            kl_z_terms = [kl_z(s.pi, pi_prior, width) for s in samples]
        kl_z_term = kl_z_terms[0]
        for t in kl_z_terms[1:]:
            kl_z_term = ad.add(kl_z_term, t)
        kl_z_term = ad.scale(kl_z_term, 1.0 / len(kl_z_terms))
        kl_total = ad.add(kl_nu_term, kl_z_term)
        scale = 1.0 / graph.train_mask.size if config.kl_scale == "train" else 1.0
        loss = ad.add(loss, ad.scale(kl_total, scale))
        breakdown["kl_nu"] = float(kl_nu_term.value)
        breakdown["kl_z"] = float(kl_z_term.value)
    breakdown["loss"] = float(loss.value)
    return loss, samples, breakdown


def train(graph: Graph, config: TrainConfig):
    """Full optimization run; returns (params, posterior, history)."""
    if graph.train_mask.size == 0 or graph.val_mask.size == 0:
        raise ValueError("train requires nonempty train and val masks")

    root = np.random.SeedSequence(config.seed)
    init_ss, train_ss, eval_ss = root.spawn(3)
    rng = np.random.default_rng(train_ss)
    init_rng = np.random.default_rng(init_ss)

    params = init_params(
        graph.n_features, config.hidden_width, graph.n_classes, config.truncation, init_rng
    )
    posterior = VariationalPosterior(truncation=config.truncation, tau=config.tau)
    prior = config.prior()
    all_params = params.parameters() + posterior.parameters()
    opt = ad.AdamState(lr=config.lr)

    history = TrainHistory()
    best_params = params.snapshot()
    best_posterior = [posterior.log_a.value.copy(), posterior.log_b.value.copy()]
    stale = 0

    for epoch in range(config.epochs):
        epoch_graph = graph
        a_hat = None
        if config.dropedge > 0.0:
            epoch_graph = drop_edges(graph, config.dropedge, rng)
            a_hat = ad.constant(epoch_graph.a_hat)

        try:
            loss, samples, breakdown = elbo_step(
                epoch_graph, params, posterior, prior, config, rng, a_hat=a_hat
            )
        except ad.NumericDomainError as exc:
            raise NumericAbort(f"numeric failure at epoch {epoch}: {exc}") from exc
        if not np.isfinite(loss.value):
            raise NumericAbort(f"non-finite loss at epoch {epoch}: {breakdown}")
        touched = loss.backward()
        ad.adam_step(all_params, opt, touched=touched)
        for p in all_params:
            p.zero_grad()

        eval_rng = np.random.default_rng(
            np.random.SeedSequence(entropy=eval_ss.entropy, spawn_key=eval_ss.spawn_key + (epoch,))
        )
        try:
            probs = predict(
                graph, params, posterior, config.eval_samples, eval_rng,
                mode=config.backbone, eval_mask_policy=config.eval_mask_policy,
            )
        except ad.NumericDomainError as exc:
            raise NumericAbort(f"numeric failure at epoch {epoch}: {exc}") from exc
        val_acc = accuracy(probs, graph.labels, graph.val_mask)
        val_loss = _nll_of_probs(probs, graph.labels, graph.val_mask)

        mean_pi = np.mean([s.pi.value for s in samples], axis=0)
        scopes = [s.scope for s in samples]
        record = EpochRecord(
            epoch=epoch,
            train_loss=float(loss.value),
            val_acc=val_acc,
            val_loss=val_loss,
            mean_pi=mean_pi,
            scope_mode=int(np.bincount(scopes).argmax()),
        )
        history.records.append(record)

        improved = val_acc > history.best_val_acc or (
            val_acc == history.best_val_acc and val_loss < history.best_val_loss
        )
        if improved:
            history.best_val_acc = val_acc
            history.best_val_loss = val_loss
            history.best_epoch = epoch
            best_params = params.snapshot()
            best_posterior = [posterior.log_a.value.copy(), posterior.log_b.value.copy()]
            stale = 0
        else:
            stale += 1
            if stale > config.patience:
                break

    params.restore(best_params)
    posterior.log_a.value = best_posterior[0].copy()
    posterior.log_b.value = best_posterior[1].copy()
    return params, posterior, history


def _nll_of_probs(probs, labels, mask):
    p = np.clip(probs[mask, np.asarray(labels)[mask]], 1e-12, None)
    return float(-np.mean(np.log(p)))


@dataclass
class SweepResult:
    settings: dict
    val_acc: float = np.nan
    test_acc: float = np.nan
    error: str = ""


def sweep(graph: Graph, base_config: TrainConfig, grid: list):
    """Train once per grid point (dicts of config overrides) with
    seed-derived streams; failures are recorded, the sweep continues.

    Returns results sorted by validation accuracy, best first.
    """
    if not grid:
        raise ValueError("empty sweep grid")
    results = []
    for i, overrides in enumerate(grid):
        try:
            config = replace(base_config, **overrides, seed=base_config.seed + 1000 * i)
            params, posterior, history = train(graph, config)
            eval_rng = np.random.default_rng(np.random.SeedSequence(config.seed + 77))
            probs = predict(
                graph, params, posterior, config.eval_samples, eval_rng,
                mode=config.backbone, eval_mask_policy=config.eval_mask_policy,
            )
            results.append(
                SweepResult(
                    settings=dict(overrides),
                    val_acc=history.best_val_acc,
                    test_acc=accuracy(probs, graph.labels, graph.test_mask),
                )
            )
        except Exception as exc:  # per-point failures must not kill the sweep
            results.append(SweepResult(settings=dict(overrides), error=str(exc)))
    return sorted(results, key=lambda r: (-(r.val_acc if np.isfinite(r.val_acc) else -np.inf)))
