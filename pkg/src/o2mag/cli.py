"""Command-line interface: dataset building, training, generation, evaluation.

Every command is deterministic for fixed inputs and seed: images, logs, and
reports are byte-identical across repeated runs. Config files are plain
key=value lines with '#' comments. The O2MAG_THREADS environment variable
caps worker counts; results never depend on it.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .ago import AgoConfig, build_negative_embedding, optimize_embedding, save_embedding, \
    embedding_cache_key, load_embedding
from .attention_edit import EditPolicy, pca_attention
from .dataset import (DatasetManifest, build_corpus, png_to_image, png_to_mask,
                      training_set_from_manifest)
from .denoiser import DenoiserConfig, UNetDenoiser, Vocabulary, train_denoiser
from .evaluation import (MetricReport, background_fidelity, evaluate_segmenter,
                         masked_change_ratio, run_ablation, segmenter_training_pairs,
                         train_segmenter)
from .pipeline import (GenerationRequest, generate, generate_batch, load_records,
                       write_record)
from .schedule import NoiseSchedule, SchedulerConfig, ddim_invert


def parse_config(path) -> dict:
    """key=value lines; blank lines and '#' comments ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {raw.rstrip()}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _echo(msg):
    click.echo(msg, err=True)


@click.group()
def main():
    """Training-free anomaly synthesis on a toy diffusion denoiser."""


@main.command("build-dataset")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--anomalies-per-pair", default=180, show_default=True, type=int)
@click.option("--train-normals", default=120, show_default=True, type=int)
@click.option("--test-normals", default=40, show_default=True, type=int)
def build_dataset_cmd(out_dir, seed, anomalies_per_pair, train_normals, test_normals):
    """Render the procedural defect corpus and its manifest."""
    manifest = build_corpus(out_dir, anomalies_per_pair=anomalies_per_pair,
                            train_normals_per_class=train_normals,
                            test_normals_per_class=test_normals, seed=seed,
                            progress=lambda c, k: _echo(f"  rendered {c}/{k}"))
    _echo(f"wrote {len(manifest.records)} records under {out_dir}")


@main.command("train-denoiser")
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
def train_denoiser_cmd(config_path, out_path):
    """Train the noise predictor from a key=value config file."""
    cfg = parse_config(config_path)
    manifest = DatasetManifest.load(cfg["manifest"])
    channels = tuple(int(c) for c in cfg.get("channels", "16,32,64").split(","))
    dconfig = DenoiserConfig(
        image_size=int(cfg.get("image_size", 32)),
        channels=channels,
        heads=int(cfg.get("heads", 1)),
        d_tau=int(cfg.get("d_tau", 64)),
        time_dim=int(cfg.get("time_dim", 128)),
        groups=int(cfg.get("groups", 8)),
    )
    sched = NoiseSchedule(SchedulerConfig(
        train_steps=int(cfg.get("train_timesteps", 1000)),
        sample_steps=int(cfg.get("sample_steps", 50)),
    ))
    vocab = Vocabulary()
    data = training_set_from_manifest(manifest, vocab,
                                      augment=cfg.get("augment", "1") != "0")
    steps = int(cfg.get("steps", 6000))
    seed = int(cfg.get("seed", 0))
    model, info = train_denoiser(
        data, dconfig, steps, seed, vocab=vocab, sched=sched,
        batch_size=int(cfg.get("batch_size", 16)),
        lr=float(cfg.get("lr", 1e-3)),
        null_fraction=float(cfg.get("null_fraction", 0.1)),
        progress=lambda s, l: _echo(f"  step {s}: loss {l:.4f}"))
    model.save(out_path)
    _echo(f"saved checkpoint to {out_path} "
          f"(final running loss {info['final_running_loss']:.4f})")


@main.command("ago")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--ref", "ref_path", required=True, type=click.Path(exists=True))
@click.option("--mask", "mask_path", required=True, type=click.Path(exists=True))
@click.option("--cls", "cls", required=True)
@click.option("--anom", "anomaly", required=True)
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--steps", default=500, show_default=True, type=int)
@click.option("--lr", default=3e-3, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
def ago_cmd(ckpt, ref_path, mask_path, cls, anomaly, out_path, steps, lr, seed):
    """Optimize the prompt embedding against one reference anomaly."""
    model = UNetDenoiser.load(ckpt)
    sched = NoiseSchedule()
    image = png_to_image(ref_path)
    png_to_mask(mask_path)  # validated for existence/format; mask not used by the loss
    cfg = AgoConfig(steps=steps, lr=lr, seed=seed)
    e_ori = model.encode_template(cls, anomaly)
    emb, trace = optimize_embedding(e_ori, image, model, sched, cfg)
    key = embedding_cache_key(image, model.vocab.template_ids(cls, anomaly), cfg)
    save_embedding(out_path, emb, source_hash=key, cfg=cfg,
                   final_loss=trace[-1] if trace else None)
    _echo(f"saved optimized embedding to {out_path} "
          f"(loss {trace[0]:.4f} -> {trace[-1]:.4f})" if trace else
          f"saved embedding to {out_path}")


def _policy_from_flags(no_dae: bool) -> EditPolicy:
    policy = EditPolicy()
    return policy.without_dae() if no_dae else policy


@main.command("generate")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--ref", "ref_path", required=True, type=click.Path(exists=True))
@click.option("--refmask", required=True, type=click.Path(exists=True))
@click.option("--normal", "normal_path", required=True, type=click.Path(exists=True))
@click.option("--targetmask", required=True, type=click.Path(exists=True))
@click.option("--cls", "cls", required=True)
@click.option("--anom", "anomaly", required=True)
@click.option("--neg", "neg", default="", help="semicolon-separated negative phrases")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--no-dae", is_flag=True, help="disable dual-attention enhancement")
@click.option("--no-ago", is_flag=True, help="use the plain template embedding")
@click.option("--emb", "emb_path", type=click.Path(exists=True),
              help="precomputed optimized embedding")
@click.option("--ago-steps", default=500, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
def generate_cmd(ckpt, ref_path, refmask, normal_path, targetmask, cls, anomaly,
                 neg, seed, no_dae, no_ago, emb_path, ago_steps, out_dir):
    """Synthesize one anomaly image from a reference pair and a target mask."""
    model = UNetDenoiser.load(ckpt)
    sched = NoiseSchedule()
    phrases = tuple(p.strip() for p in neg.split(";") if p.strip())
    req = GenerationRequest(
        ref_image=png_to_image(ref_path), ref_mask=png_to_mask(refmask),
        normal_image=png_to_image(normal_path), target_mask=png_to_mask(targetmask),
        cls=cls, anomaly=anomaly, negative_phrases=phrases, seed=seed,
        use_dae=not no_dae, use_ago=not no_ago)
    embedding = load_embedding(emb_path)[0] if emb_path else None
    record = generate(req, model, sched, embedding=embedding,
                      ago_cfg=AgoConfig(steps=ago_steps, seed=seed))
    write_record(record, out_dir, "gen-0000")
    _echo(f"wrote generation to {out_dir}")


@main.command("generate-batch")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--count", required=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--no-dae", is_flag=True)
@click.option("--no-ago", is_flag=True)
@click.option("--normal-reuse", default=4, show_default=True, type=int)
@click.option("--ago-steps", default=500, show_default=True, type=int)
@click.option("--ago-cache", type=click.Path(), default=None,
              help="directory for cached optimized embeddings")
@click.option("--cross", default=None,
              help="zero-shot mode SRC_CLS:DST_CLS:DEFECT")
def generate_batch_cmd(ckpt, manifest_path, count, out_dir, seed, no_dae, no_ago,
                       normal_reuse, ago_steps, ago_cache, cross):
    """Synthesize a batch of image-mask pairs round-robin over references."""
    cross_class = tuple(cross.split(":")) if cross else None
    if cross_class is not None and len(cross_class) != 3:
        raise click.UsageError("--cross expects SRC_CLS:DST_CLS:DEFECT")
    model = UNetDenoiser.load(ckpt)
    sched = NoiseSchedule()
    manifest = DatasetManifest.load(manifest_path)
    records, failures = generate_batch(
        manifest, count, seed=seed, model=model, sched=sched,
        use_dae=not no_dae, use_ago=not no_ago,
        ago_cfg=AgoConfig(steps=ago_steps, seed=seed), ago_cache=ago_cache,
        out_dir=out_dir, cross_class=cross_class, normal_reuse=normal_reuse,
        progress=lambda i, n: _echo(f"  {i}/{n}") if i % 25 == 0 else None)
    _echo(f"wrote {len(records)} generations to {out_dir} "
          f"({len(failures)} failures)")


@main.command("evaluate")
@click.option("--gen", "gen_dir", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--out", "report_dir", required=True, type=click.Path())
@click.option("--epochs", default=12, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--min-pairs", default=50, show_default=True, type=int,
              help="floor on training pairs; lower only for smoke runs")
def evaluate_cmd(gen_dir, manifest_path, report_dir, epochs, seed, min_pairs):
    """Train a segmenter on generated pairs and report detection metrics."""
    from .report import metric_report_files

    manifest = DatasetManifest.load(manifest_path)
    records = load_records(gen_dir)
    if not records:
        raise click.UsageError(f"no generation records under {gen_dir}")
    pairs = segmenter_training_pairs(records, manifest)
    _echo(f"training segmenter on {len(pairs)} pairs ...")
    seg = train_segmenter(pairs, epochs=epochs, seed=seed, min_pairs=min_pairs,
                          progress=lambda e, l: _echo(f"  epoch {e}: loss {l:.4f}"))
    report = evaluate_segmenter(seg, manifest)

    fidelity = []
    ratios = []
    for rec in records:
        if rec.normal_recon is None:
            continue
        fidelity.append(background_fidelity(rec.image, rec.normal_recon, rec.mask))
        inside, outside = masked_change_ratio(rec.image, rec.normal_recon, rec.mask)
        ratios.append(inside / max(outside, 1e-9))
    if fidelity:
        report.background = {
            "mean_background_mad": float(np.mean(fidelity)),
            "p95_background_mad": float(np.percentile(fidelity, 95)),
            "mean_inside_outside_ratio": float(np.mean(ratios)),
            "records": float(len(fidelity)),
        }
    files = metric_report_files(report, report_dir)
    agg = report.aggregate()
    _echo(f"pixel AUROC={agg['pixel_auroc']:.4f} AP={agg['pixel_ap']:.4f} "
          f"F1max={agg['pixel_f1max']:.4f}")
    for f in files:
        _echo(f"  wrote {f}")


@main.command("ablation")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--count", default=100, show_default=True, type=int)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--epochs", default=12, show_default=True, type=int)
@click.option("--ago-steps", default=500, show_default=True, type=int)
@click.option("--ago-cache", type=click.Path(), default=None)
def ablation_cmd(ckpt, manifest_path, count, out_dir, seed, epochs, ago_steps,
                 ago_cache):
    """Run the four-configuration ablation grid with shared seeds."""
    from .report import metric_report_files

    model = UNetDenoiser.load(ckpt)
    sched = NoiseSchedule()
    manifest = DatasetManifest.load(manifest_path)
    configurations = {
        "triag": {"dae": False, "ago": False},
        "triag+dae": {"dae": True, "ago": False},
        "triag+ago": {"dae": False, "ago": True},
        "full": {"dae": True, "ago": True},
    }
    table = run_ablation(manifest, configurations, seed, model=model, sched=sched,
                         count=count, epochs=epochs, out_dir=out_dir,
                         ago_cache=ago_cache,
                         progress=lambda i, n: _echo(f"  {i}/{n}") if i % 25 == 0 else None)
    report = MetricReport()
    report.ablation = table
    files = metric_report_files(report, out_dir, prefix="ablation")
    for row in table:
        _echo(f"{row['config']}: AUROC={row['pixel_auroc']:.4f} "
              f"AP={row['pixel_ap']:.4f} F1max={row['pixel_f1max']:.4f}")
    for f in files:
        _echo(f"  wrote {f}")


@main.command("pca-attn")
@click.option("--ckpt", required=True, type=click.Path(exists=True))
@click.option("--image", "image_path", required=True, type=click.Path(exists=True))
@click.option("--step", required=True, type=int, help="sampling-step ordinal 1..S")
@click.option("--layer", required=True, type=int, help="self-attention layer index")
@click.option("--cls", "cls", default=None, help="class token for conditioning")
@click.option("--anom", "anomaly", default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
def pca_attn_cmd(ckpt, image_path, step, layer, cls, anomaly, out_path):
    """Project a self-attention map onto its top three principal components."""
    from .denoiser import standard_attention
    from .numerics import Tensor
    from .report import component_image_to_png

    model = UNetDenoiser.load(ckpt)
    sched = NoiseSchedule()
    image = png_to_image(image_path)
    emb = model.encode_template(cls, anomaly) if cls else model.null_embedding()
    kinds = {s.layer: s.kind for s in model.attention_sites()}
    if kinds.get(layer) != "self":
        raise click.UsageError(
            f"layer {layer} is not a self-attention layer "
            f"(self layers: {model.self_attention_layers()})")
    if not 1 <= step <= sched.sample_steps:
        raise click.UsageError(f"step must be in 1..{sched.sample_steps}")

    traj = ddim_invert(image, emb, model, sched)
    t = int(sched.anchors[step - 1])
    maps = {}

    def hook(site, q, k, v):
        if site.kind == "self" and site.layer == layer:
            import math as _math
            scale = np.float32(1.0 / _math.sqrt(q.shape[-1]))
            logits = np.matmul(q.data, np.swapaxes(k.data, -1, -2)) * scale
            m = logits.max(axis=-1, keepdims=True)
            e = np.exp(logits - m)
            attn = e / e.sum(axis=-1, keepdims=True)
            maps["attn"] = attn[0].mean(axis=0)  # head-averaged map
        return standard_attention(q, k, v)

    model.predict_noise(Tensor(traj.at(t)), t, emb, hooks=hook)
    channels = pca_attention(maps["attn"])
    component_image_to_png(channels, out_path)
    _echo(f"wrote attention components to {out_path}")


if __name__ == "__main__":
    main()
