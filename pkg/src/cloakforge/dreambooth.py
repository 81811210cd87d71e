"""Personalization finetuning with prior preservation.

The training objective per image is

    L(theta, x0) = ||eps - f_theta(x_t, t, c)||^2
                   + lambda * ||eps' - f_theta(x'_t', t', c_pr)||^2

where the second term is evaluated on class-generic images sampled once from
the ORIGINAL weights, never from the model being finetuned. Both the UNet
and the token-embedding table receive gradients unless embeddings are frozen
in the config.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, replace

import numpy as np

from .diffusion import NoiseSchedule, ancestral_sample, loss_cond, loss_cond_grad
from .errors import TrainingDivergedError
from .model import Checkpoint, CondUNet, PromptSpec, embed_prompt, snapshot
from .nn import make_optimizer


@dataclass
class FinetuneConfig:
    instance_prompt: PromptSpec
    prior_prompt: PromptSpec
    steps: int = 400
    learning_rate: float = 1e-4
    batch_size: int = 2
    lambda_prior: float = 1.0
    prior_count: int = 8
    seed: int = 0
    optimizer: str = "sgd"
    train_embeddings: bool = True

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lambda_prior < 0:
            raise ValueError("lambda_prior must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.instance_prompt.has_identifier_slot:
            raise ValueError("instance prompt must contain the identifier slot")

    def to_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if not isinstance(v, PromptSpec)}
        d["instance_prompt"] = self.instance_prompt.to_dict()
        d["prior_prompt"] = self.prior_prompt.to_dict()
        return d

    @staticmethod
    def from_dict(d: dict) -> "FinetuneConfig":
        d = dict(d)
        d["instance_prompt"] = PromptSpec.from_dict(d["instance_prompt"])
        d["prior_prompt"] = PromptSpec.from_dict(d["prior_prompt"])
        return FinetuneConfig(**d)

    def replace(self, **kw) -> "FinetuneConfig":
        return replace(self, **kw)


def _prior_cache_key(ckpt_name: str, prompt: PromptSpec, n: int, seed: int, schedule: NoiseSchedule) -> str:
    payload = json.dumps(
        {
            "checkpoint": ckpt_name,
            "prompt": prompt.to_dict(),
            "n": n,
            "seed": seed,
            "T": schedule.T,
            "beta0": float(schedule.betas[0]),
            "beta1": float(schedule.betas[-1]),
        },
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def generate_prior_set(
    theta_ori: Checkpoint,
    c_pr: PromptSpec,
    n: int,
    seed: int,
    schedule: NoiseSchedule,
    cache_dir=None,
) -> np.ndarray:
    """Sample n class-prior images from the original (pre-finetune) weights.

    Results are cached on disk keyed by (checkpoint name, prompt, seed) when
    cache_dir is given; a second call with the same key loads the cache.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    d = theta_ori.descriptor
    shape = (d["channels"], d["image_size"], d["image_size"])
    if n == 0:
        return np.zeros((0,) + shape)
    cache_path = None
    if cache_dir is not None:
        os.makedirs(cache_dir, exist_ok=True)
        key = _prior_cache_key(theta_ori.name, c_pr, n, seed, schedule)
        cache_path = os.path.join(cache_dir, f"prior_{key}.npz")
        if os.path.exists(cache_path):
            with np.load(cache_path) as z:
                return z["images"]
    mdl = theta_ori.restore()
    cond = embed_prompt(c_pr, mdl)
    images = ancestral_sample(mdl, cond, schedule, seed, n, shape)
    if cache_path is not None:
        np.savez(cache_path, images=images)
    return images


def dreambooth_loss(
    model: CondUNet,
    prior_images: np.ndarray,
    x0: np.ndarray,
    c: np.ndarray,
    c_pr: np.ndarray,
    lambda_prior: float,
    schedule: NoiseSchedule,
    rng: np.random.Generator,
) -> float:
    """Single-image finetuning loss with freshly drawn (t, eps) pairs.

    Draw order is instance (t, eps) first, then prior (index, t', eps'), so
    with lambda_prior == 0 the value equals the plain conditional loss for
    the same rng state.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    batch = x0[None] if x0.ndim == 3 else x0
    t = int(rng.integers(1, schedule.T + 1))
    eps = rng.standard_normal(batch.shape)
    inst = loss_cond(model, batch, c, t, eps, schedule)
    if lambda_prior == 0.0:
        return inst
    if prior_images is None or len(prior_images) == 0:
        raise ValueError("prior image set must be non-empty when lambda_prior > 0")
    j = int(rng.integers(0, len(prior_images)))
    xp = prior_images[j][None]
    t_pr = int(rng.integers(1, schedule.T + 1))
    eps_pr = rng.standard_normal(xp.shape)
    prior = loss_cond(model, xp, c_pr, t_pr, eps_pr, schedule)
    return inst + lambda_prior * prior


def _scatter_token_grad(tok_grad: np.ndarray, d_cond: np.ndarray, indices: list[int]) -> None:
    row = d_cond.sum(axis=0) / len(indices)
    for i in indices:
        tok_grad[i] += row


def _accumulate(dst: dict, src: dict, scale: float = 1.0) -> None:
    for k, v in src.items():
        if k in dst:
            dst[k] = dst[k] + scale * v
        else:
            dst[k] = scale * v if scale != 1.0 else v


def finetune_dreambooth(
    theta_start: Checkpoint,
    instance_images: np.ndarray,
    config: FinetuneConfig,
    schedule: NoiseSchedule,
    prior_images: np.ndarray | None = None,
    prior_cache_dir=None,
    log_path=None,
    out_name: str | None = None,
) -> Checkpoint:
    """Run `config.steps` gradient steps of the prior-preserved objective.

    `prior_images` defaults to a fresh prior set sampled from theta_start;
    callers that finetune an already-adapted model (e.g. the alternating
    defense loop) pass the original checkpoint's prior set explicitly.
    """
    instance_images = np.asarray(instance_images, dtype=np.float64)
    if instance_images.ndim != 4 or len(instance_images) == 0:
        raise ValueError("instance_images must be a non-empty (n, c, h, w) array")
    if instance_images.min() < 0.0 or instance_images.max() > 1.0:
        raise ValueError("instance images must lie in [0, 1]")

    model = theta_start.restore()
    rng = np.random.default_rng(config.seed)
    if config.lambda_prior > 0 and prior_images is None:
        prior_seed = int(np.random.SeedSequence([config.seed, 0x70726972]).generate_state(1)[0])
        prior_images = generate_prior_set(
            theta_start, config.prior_prompt, config.prior_count, prior_seed, schedule, prior_cache_dir
        )
    if config.lambda_prior > 0 and len(prior_images) == 0:
        raise ValueError("prior image set must be non-empty when lambda_prior > 0")

    _, idx_inst = model.encode_prompt(config.instance_prompt)
    _, idx_prior = model.encode_prompt(config.prior_prompt)
    opt = make_optimizer(config.optimizer, config.learning_rate)
    n_inst = len(instance_images)
    bs = config.batch_size
    log_lines = []

    for step in range(config.steps):
        xb = instance_images[rng.integers(0, n_inst, bs)]
        t_b = rng.integers(1, schedule.T + 1, bs)
        eps_b = rng.standard_normal(xb.shape)
        c_vec = model.params["tok_emb"][idx_inst].mean(axis=0)
        inst_loss, grads, _, d_cond = loss_cond_grad(model, xb, c_vec, t_b, eps_b, schedule)
        tok_grad = np.zeros_like(model.params["tok_emb"])
        _scatter_token_grad(tok_grad, d_cond, idx_inst)

        prior_loss = 0.0
        if config.lambda_prior > 0:
            xpb = prior_images[rng.integers(0, len(prior_images), bs)]
            t_p = rng.integers(1, schedule.T + 1, bs)
            eps_p = rng.standard_normal(xpb.shape)
            cpr_vec = model.params["tok_emb"][idx_prior].mean(axis=0)
            prior_loss, pg, _, d_cond_pr = loss_cond_grad(model, xpb, cpr_vec, t_p, eps_p, schedule)
            _accumulate(grads, pg, config.lambda_prior)
            d_tok_pr = np.zeros_like(tok_grad)
            _scatter_token_grad(d_tok_pr, d_cond_pr, idx_prior)
            tok_grad += config.lambda_prior * d_tok_pr

        total = inst_loss + config.lambda_prior * prior_loss
        if not np.isfinite(total):
            raise TrainingDivergedError(
                f"non-finite loss at step {step}: instance={inst_loss} prior={prior_loss}"
            )
        if config.train_embeddings:
            grads["tok_emb"] = tok_grad
        opt.step(model.params, grads)
        log_lines.append(f"{step}\t{inst_loss:.10g}\t{prior_loss:.10g}\t{total:.10g}")

    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("step\tinstance\tprior\ttotal\n")
            fh.write("\n".join(log_lines) + ("\n" if log_lines else ""))

    meta = dict(theta_start.metadata)
    meta["step_count"] = int(meta.get("step_count", 0)) + config.steps
    meta["finetune_seed"] = config.seed
    return snapshot(model, out_name or f"{theta_start.name}+db", meta)


def pretrain_denoiser(
    images: np.ndarray,
    prompt: PromptSpec,
    descriptor: dict,
    schedule: NoiseSchedule,
    steps: int,
    batch_size: int,
    learning_rate: float,
    seed: int,
    optimizer: str = "adam",
    name: str = "pretrained",
    log_path=None,
) -> Checkpoint:
    """Train a fresh denoiser on a pool of images under one generic prompt."""
    images = np.asarray(images, dtype=np.float64)
    model = CondUNet(descriptor, seed=seed)
    rng = np.random.default_rng(seed)
    _, idx = model.encode_prompt(prompt)
    opt = make_optimizer(optimizer, learning_rate)
    log_lines = []
    for step in range(steps):
        xb = images[rng.integers(0, len(images), batch_size)]
        t_b = rng.integers(1, schedule.T + 1, batch_size)
        eps_b = rng.standard_normal(xb.shape)
        c_vec = model.params["tok_emb"][idx].mean(axis=0)
        loss, grads, _, d_cond = loss_cond_grad(model, xb, c_vec, t_b, eps_b, schedule)
        if not np.isfinite(loss):
            raise TrainingDivergedError(f"non-finite pretraining loss at step {step}")
        tok_grad = np.zeros_like(model.params["tok_emb"])
        _scatter_token_grad(tok_grad, d_cond, idx)
        grads["tok_emb"] = tok_grad
        opt.step(model.params, grads)
        log_lines.append(f"{step}\t{loss:.10g}")
    if log_path is not None:
        with open(log_path, "w") as fh:
            fh.write("step\tloss\n")
            fh.write("\n".join(log_lines) + ("\n" if log_lines else ""))
    return snapshot(model, name, {"seed": seed, "step_count": steps})
