"""Inference-time prompt-embedding optimization against one reference anomaly.

The denoiser stays frozen; Adam moves only the prompt-embedding matrix to
minimize the noise-reconstruction error on the reference image, one (t, eps)
draw per step sampled uniformly over the training timesteps. Optimized
embeddings are cached to disk keyed by a content hash of the image, the
template, and the optimizer settings. Negative prompts encode
normal-appearance phrases, padded to the template length, and serve as the
unconditional embedding during guided sampling.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import numerics as nm
from .denoiser import TEMPLATE_LEN, PAD_TOKEN, PromptEmbedding, UNetDenoiser
from .numerics import DTYPE, Tape, Tensor
from .schedule import NoiseSchedule

# example normal-appearance phrases for explicit --neg use; the pipeline's
# default negative is the class-aware marker template instead
DEFAULT_NEGATIVE_PHRASES = {
    "hole": ("no hole", "intact surface"),
    "scratch": ("no scratch", "smooth surface"),
    "color-patch": ("no color-patch", "clean surface"),
}


@dataclass(frozen=True)
class AgoConfig:
    steps: int = 500
    lr: float = 3e-3
    noise_draws: int = 1     # (t, eps) draws averaged per step
    seed: int = 0
    # proximity prior toward the original embedding. The toy's raw token
    # table has no manifold structure, so an unconstrained embedding drifts
    # somewhere the denoiser extrapolates badly and deterministic sampling
    # diverges; the prior is the desk-scale stand-in for a text encoder's
    # tightly structured embedding space.
    prior_weight: float = 3.0

    def validate(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.noise_draws < 1:
            raise ValueError("need at least one noise draw per step")
        if self.prior_weight < 0:
            raise ValueError("prior weight must be >= 0")


def optimize_embedding(e_ori: PromptEmbedding, image: np.ndarray,
                       model: UNetDenoiser, sched: NoiseSchedule,
                       cfg: AgoConfig) -> tuple[PromptEmbedding, list[float]]:
    """Adam on the embedding only; returns (optimized embedding, loss trace).

    Raises if any model weight is still trainable: gradients must flow to the
    prompt matrix alone, which is also checked against the recorded tape.
    """
    cfg.validate()
    params = model.params()
    if any(p.requires_grad for p in params.values()):
        raise ValueError("model weights must be frozen during embedding optimization")
    weight_ids = {id(p) for p in params.values()}
    if cfg.steps == 0:
        return PromptEmbedding(Tensor(e_ori.data.copy()), e_ori.provenance), []

    e = Tensor(e_ori.data.copy(), requires_grad=True)
    anchor = Tensor(e_ori.data.copy())
    state = nm.AdamState.for_params({"embedding": e}, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    x0 = np.asarray(image, dtype=DTYPE)
    # uniform coverage of the schedule via a stratified cycle: every window
    # of 50 steps sees the same timestep profile, so smoothed windows of the
    # loss trace are comparable rather than dominated by timestep luck
    strata = np.linspace(1, sched.train_steps, 50).astype(np.int64)
    offsets = rng.permutation(50)
    stride = sched.train_steps // 50
    trace: list[float] = []
    for step in range(cfg.steps):
        with Tape() as tape:
            loss = None
            for draw in range(cfg.noise_draws):
                base = strata[offsets[(step + draw) % 50]]
                t = int(np.clip(base + rng.integers(-stride // 2, stride // 2 + 1),
                                1, sched.train_steps))
                eps = rng.standard_normal(x0.shape).astype(DTYPE)
                x_t = sched.add_noise(x0, t, eps)
                pred = model.predict_noise(Tensor(x_t), t, PromptEmbedding(e))
                term = nm.mse(Tensor(eps), pred)
                loss = term if loss is None else nm.add(loss, term)
            if cfg.noise_draws > 1:
                loss = nm.mul(loss, Tensor(DTYPE(1.0 / cfg.noise_draws)))
            recon_value = float(loss.data)
            if cfg.prior_weight > 0:
                prior = nm.mul(nm.mse(e, anchor), Tensor(DTYPE(cfg.prior_weight)))
                loss = nm.add(loss, prior)
        value = recon_value
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at optimization step {step}")
        if step == 0:
            leaked = [id(leaf) for leaf in tape.leaves if id(leaf) in weight_ids]
            if leaked:
                raise AssertionError("model weights leaked onto the optimization tape")
        grads = nm.backward(tape, loss)
        nm.adam_step({"embedding": e}, {"embedding": grads[e]}, state)
        trace.append(value)
    result = Tensor(e.data.copy())
    return PromptEmbedding(result, provenance="optimized"), trace


def build_negative_embedding(model: UNetDenoiser, phrases) -> PromptEmbedding:
    """Concatenate phrase tokens, pad to the template length, and encode.

    An empty phrase list falls back to the learned null-prompt embedding
    (the plain unconditional direction of guided sampling).
    """
    phrases = list(phrases)
    if not phrases:
        emb = model.null_embedding()
        return PromptEmbedding(emb.e, provenance="null")
    ids: list[int] = []
    for phrase in phrases:
        ids.extend(model.vocab.tokenize(phrase))
    if len(ids) > TEMPLATE_LEN:
        raise ValueError(f"negative phrases overflow the {TEMPLATE_LEN}-token template "
                         f"({len(ids)} tokens)")
    ids += [model.vocab.token_id(PAD_TOKEN)] * (TEMPLATE_LEN - len(ids))
    emb = model.encode_prompt(ids)
    return PromptEmbedding(emb.e, provenance="negative")


# ---------------------------------------------------------------------------
# disk cache
# ---------------------------------------------------------------------------

def embedding_cache_key(image: np.ndarray, template_ids, cfg: AgoConfig) -> str:
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(image, dtype=DTYPE).tobytes())
    h.update(np.asarray(template_ids, dtype=np.int64).tobytes())
    h.update(f"{cfg.steps}|{cfg.lr}|{cfg.noise_draws}|{cfg.seed}|"
             f"{cfg.prior_weight}".encode())
    return h.hexdigest()


def save_embedding(path, emb: PromptEmbedding, *, source_hash: str,
                   cfg: AgoConfig, final_loss: Optional[float]):
    from .serialization import save_tensor_map
    header = {
        "kind": "prompt-embedding",
        "provenance": emb.provenance,
        "source_hash": source_hash,
        "steps": cfg.steps,
        "lr": cfg.lr,
        "noise_draws": cfg.noise_draws,
        "seed": cfg.seed,
        "prior_weight": cfg.prior_weight,
        "t_sampling": "uniform",
        "final_loss": "" if final_loss is None else f"{final_loss:.6f}",
    }
    save_tensor_map(path, header, {"embedding": emb.data})


def load_embedding(path) -> tuple[PromptEmbedding, dict]:
    from .serialization import load_tensor_map
    header, tensors = load_tensor_map(path)
    if header.get("kind") != "prompt-embedding":
        raise ValueError(f"{path}: not a prompt-embedding file")
    emb = PromptEmbedding(Tensor(tensors["embedding"]),
                          provenance=header.get("provenance", "optimized"))
    return emb, header


def get_or_optimize(cache_dir, e_ori: PromptEmbedding, image: np.ndarray,
                    template_ids, model: UNetDenoiser, sched: NoiseSchedule,
                    cfg: AgoConfig, *, cache_only: bool = False
                    ) -> tuple[PromptEmbedding, dict]:
    """Load a cached optimized embedding or compute and cache it."""
    key = embedding_cache_key(image, template_ids, cfg)
    cache_dir = Path(cache_dir)
    path = cache_dir / f"emb-{key[:16]}.tmap"
    if path.exists():
        return load_embedding(path)
    if cache_only:
        raise FileNotFoundError(f"no cached embedding at {path} and optimization disabled")
    emb, trace = optimize_embedding(e_ori, image, model, sched, cfg)
    save_embedding(path, emb, source_hash=key,
                   cfg=cfg, final_loss=trace[-1] if trace else None)
    return load_embedding(path)
