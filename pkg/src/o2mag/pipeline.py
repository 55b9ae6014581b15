"""End-to-end anomaly generation: inversion, tri-branch denoising, decoding.

One generation optimizes (or loads) the prompt embedding, inverts the
reference and normal images at guidance 1, starts the target branch from the
normal initial latent, and denoises for S steps. At every step the two side
branches replay their inversion anchors to capture self-attention K/V, and
the target branch runs with edit hooks plus negative-prompt guidance. The
pixel-space decode is a clamp to [-1, 1]. Everything is deterministic for a
fixed request, so records are reproducible byte for byte.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .ago import (AgoConfig, build_negative_embedding, get_or_optimize,
                  optimize_embedding)
from .attention_edit import (BranchCapture, EditLog, EditPolicy, MaskPyramid,
                             capture_hook, edit_hook)
from .dataset import (DatasetManifest, augment_normal, gen_target_masks,
                      image_to_png, mask_to_png, png_to_image, png_to_mask)
from .denoiser import NEGATIVE_MARKERS, PromptEmbedding, UNetDenoiser
from .numerics import DTYPE, Tensor
from .schedule import InversionTrajectory, NoiseSchedule, cfg_predict, ddim_invert, ddim_sample


def decode(z: np.ndarray) -> np.ndarray:
    """Pixel-space decode: clamp the final latent into image range."""
    return np.clip(z, -1.0, 1.0).astype(DTYPE)


def worker_count(requested: Optional[int] = None) -> int:
    """Worker cap from the environment; generation math is worker-agnostic."""
    cap = os.environ.get("O2MAG_THREADS")
    cap = int(cap) if cap else 1
    if requested is None:
        return max(1, cap)
    return max(1, min(requested, cap))


@dataclass
class GenerationRequest:
    ref_image: np.ndarray
    ref_mask: np.ndarray
    normal_image: np.ndarray
    target_mask: np.ndarray
    cls: str
    anomaly: str
    negative_phrases: tuple = ()
    seed: int = 0
    policy: EditPolicy = field(default_factory=EditPolicy)
    use_dae: bool = True
    use_ago: bool = True
    guidance: Optional[float] = None        # None: scheduler default

    def validate(self):
        if self.ref_image.shape != self.normal_image.shape:
            raise ValueError("reference and normal images must share a resolution")
        if np.asarray(self.ref_mask).sum() == 0:
            raise ValueError("reference mask is empty")
        if np.asarray(self.target_mask).sum() == 0:
            raise ValueError("target mask is empty")


@dataclass
class GenerationRecord:
    image: np.ndarray
    mask: np.ndarray
    normal_recon: Optional[np.ndarray]
    log: EditLog
    provenance: dict
    counters: dict
    cross_class: bool = False
    paths: dict = field(default_factory=dict)


class _SideArtifacts:
    """Inversion trajectory plus per-step captures for one side image.

    Inversion runs under the null embedding: the sharper class-conditioned
    predictor occasionally sends high-noise anchors off-manifold (observed
    as rare single-digit-PSNR round trips), while the unconditional path
    stays stable. The branch replay that captures K/V still uses the
    branch's own conditioning.
    """

    def __init__(self, trajectory: InversionTrajectory, embedding: PromptEmbedding):
        self.trajectory = trajectory
        self.embedding = embedding   # replay conditioning for K/V capture
        self.captures: dict = {}     # (s, layer) -> (K, V)
        self.recon: Optional[np.ndarray] = None


def _capture_store(capture: BranchCapture, branch: str, source: dict):
    for (s, layer), (k, v) in source.items():
        capture.put(s, layer, branch, k, v)


def _collecting_hook(store: dict, s: int):
    from .denoiser import standard_attention

    def hook(site, q, k, v):
        if site.kind == "self":
            store[(s, site.layer)] = (k.data[0].copy(), v.data[0].copy())
        return standard_attention(q, k, v)
    return hook


def _side_artifacts(image: np.ndarray, emb: PromptEmbedding, model, sched,
                    counters: dict, kind: str) -> _SideArtifacts:
    traj = ddim_invert(image, model.null_embedding(), model, sched)
    counters["inversion_evals"] += sched.sample_steps
    return _SideArtifacts(traj, emb)


def _side_captures(side: _SideArtifacts, model, sched, counters: dict) -> dict:
    """Replay the inversion anchors once, recording K/V at every self site."""
    if side.captures:
        return side.captures
    anchors = sched.anchors
    for i in range(sched.sample_steps):
        t = int(anchors[i])
        s = i + 1
        hook = _collecting_hook(side.captures, s)
        model.predict_noise(Tensor(side.trajectory.at(t)), t, side.embedding, hooks=hook)
        counters["branch_evals"] += 1
    return side.captures


def _normal_reconstruction(side: _SideArtifacts, model, sched, counters: dict) -> np.ndarray:
    """Plain DDIM reconstruction of the normal image: the unedited baseline."""
    if side.recon is None:
        z0 = ddim_sample(side.trajectory.initial, side.trajectory.embedding,
                         model, sched)
        counters["recon_evals"] += sched.sample_steps
        side.recon = decode(z0)
    return side.recon


def generate(req: GenerationRequest, model: UNetDenoiser, sched: NoiseSchedule, *,
             ago_cfg: Optional[AgoConfig] = None, ago_cache=None,
             ago_mode: str = "fresh", embedding: Optional[PromptEmbedding] = None,
             compute_recon: bool = True,
             ref_side: Optional[_SideArtifacts] = None,
             normal_side: Optional[_SideArtifacts] = None) -> GenerationRecord:
    """Run the full generation pipeline for one request.

    ``ago_mode``: "fresh" optimizes (through the cache when one is given),
    "cached" requires a cached embedding, "off" uses the plain template
    embedding. Side artifacts may be passed in to reuse inversions and
    captures across requests; they are read-only with respect to the target
    branch.
    """
    req.validate()
    counters = {"inversion_evals": 0, "branch_evals": 0, "recon_evals": 0}
    ago_cfg = ago_cfg if ago_cfg is not None else AgoConfig(seed=req.seed)
    template_ids = model.vocab.template_ids(req.cls, req.anomaly)
    e_ori = model.encode_template(req.cls, req.anomaly)

    provenance: dict = {
        "class": req.cls, "anomaly": req.anomaly, "seed": req.seed,
        "use_dae": req.use_dae, "use_ago": req.use_ago,
        "negative_phrases": list(req.negative_phrases),
        "guidance": sched.config.guidance if req.guidance is None else req.guidance,
        "policy": {
            "graft_start": req.policy.graft_start,
            "graft_layers": list(req.policy.resolve_layers(model)),
            "self_enhance": list(req.policy.self_enhance),
            "cross_enhance": list(req.policy.cross_enhance),
            "gamma": req.policy.gamma, "tau_fg": req.policy.tau_fg,
            "cross_scale": req.policy.cross_scale,
            "anomaly_index": req.policy.anomaly_index,
        },
    }

    if not req.use_ago:
        if ago_mode == "cached" and embedding is None:
            raise ValueError("optimized embedding required but optimization disabled")
        e_star = embedding if embedding is not None else e_ori
        provenance["embedding"] = e_star.provenance
    elif embedding is not None:
        e_star = embedding
        provenance["embedding"] = embedding.provenance
    elif ago_cache is not None:
        e_star, header = get_or_optimize(ago_cache, e_ori, req.ref_image, template_ids,
                                         model, sched, ago_cfg,
                                         cache_only=(ago_mode == "cached"))
        provenance["embedding"] = "optimized"
        provenance["embedding_cache"] = {k: header[k] for k in
                                         ("source_hash", "steps", "lr", "seed", "final_loss")
                                         if k in header}
    else:
        if ago_mode == "cached":
            raise FileNotFoundError("optimized embedding required but no cache given")
        e_star, trace = optimize_embedding(e_ori, req.ref_image, model, sched, ago_cfg)
        provenance["embedding"] = "optimized"
        provenance["embedding_final_loss"] = trace[-1] if trace else None

    if req.negative_phrases:
        e_neg = build_negative_embedding(model, req.negative_phrases)
        provenance["negative"] = "phrases"
    elif req.use_ago:
        # class-aware normal-appearance prompt on a trained marker token
        marker = NEGATIVE_MARKERS.get(req.anomaly)
        if marker is not None:
            e_neg = model.encode_prompt(
                model.vocab.negative_template_ids(req.cls, marker))
            e_neg = PromptEmbedding(e_neg.e, provenance="negative")
            provenance["negative"] = f"marker:{marker}"
        else:
            e_neg = build_negative_embedding(model, ())
            provenance["negative"] = "null"
    else:
        e_neg = build_negative_embedding(model, ())
        provenance["negative"] = "null"
    e_normal = model.encode_template(req.cls)
    guidance = sched.config.guidance if req.guidance is None else req.guidance

    # branch trajectories (guidance 1, branch-specific conditioning)
    if ref_side is None:
        ref_side = _side_artifacts(req.ref_image, e_star, model, sched, counters, "ref")
    if normal_side is None:
        normal_side = _side_artifacts(req.normal_image, e_normal, model, sched,
                                      counters, "nor")

    policy = req.policy if req.use_dae else req.policy.without_dae()
    policy.validate(sched.sample_steps)
    graft_layers = policy.resolve_layers(model)
    resolutions = sorted({s.resolution for s in model.attention_sites()})
    pyr_r = MaskPyramid(req.ref_mask, resolutions)
    pyr_t = MaskPyramid(req.target_mask, resolutions)

    ref_caps = _side_captures(ref_side, model, sched, counters)
    nor_caps = _side_captures(normal_side, model, sched, counters)
    capture = BranchCapture()
    _capture_store(capture, "ref", ref_caps)
    _capture_store(capture, "nor", nor_caps)

    log = EditLog()
    anchors = sched.anchors
    # the target branch inherits normal content: Z_T(target) = Z_T(normal)
    z = normal_side.trajectory.initial.copy()
    for i in range(sched.sample_steps):
        t, t_prev = int(anchors[i]), int(anchors[i + 1])
        s = i + 1
        hooks = edit_hook(policy, graft_layers, capture, pyr_r, pyr_t, s, log=log)
        eps = cfg_predict(z, t, e_star, e_neg, guidance, model, hooks=hooks)
        counters["branch_evals"] += 1
        z = sched.ddim_step(z, eps, t, t_prev, clip_x0=True)

    image = decode(z)
    recon = None
    if compute_recon:
        recon = _normal_reconstruction(normal_side, model, sched, counters)
    return GenerationRecord(image=image, mask=np.asarray(req.target_mask, dtype=np.uint8),
                            normal_recon=recon, log=log, provenance=provenance,
                            counters=counters)


def write_record(record: GenerationRecord, out_dir, stem: str) -> GenerationRecord:
    """Persist image, mask, reconstruction, log, and provenance JSON."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "image": f"{stem}.png",
        "mask": f"{stem}-mask.png",
        "log": f"{stem}-edits.tsv",
        "meta": f"{stem}.json",
    }
    image_to_png(record.image, out_dir / paths["image"])
    mask_to_png(record.mask, out_dir / paths["mask"])
    record.log.write(out_dir / paths["log"])
    if record.normal_recon is not None:
        paths["recon"] = f"{stem}-recon.png"
        image_to_png(record.normal_recon, out_dir / paths["recon"])
    meta = {
        "provenance": record.provenance,
        "counters": record.counters,
        "cross_class": record.cross_class,
        "paths": paths,
    }
    with open(out_dir / paths["meta"], "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    record.paths = {k: str(out_dir / v) for k, v in paths.items()}
    return record


def load_records(gen_dir) -> list[GenerationRecord]:
    """Read back generation records from a batch output directory."""
    gen_dir = Path(gen_dir)
    records = []
    for meta_path in sorted(gen_dir.glob("*.json")):
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        if not isinstance(meta, dict) or "paths" not in meta:
            continue  # e.g. failures.json
        paths = meta["paths"]
        image = png_to_image(gen_dir / paths["image"])
        mask = png_to_mask(gen_dir / paths["mask"])
        recon = png_to_image(gen_dir / paths["recon"]) if "recon" in paths else None
        log = EditLog()
        with open(gen_dir / paths["log"], encoding="utf-8") as fh:
            for line in fh:
                s, layer, kind, arm, masked = line.rstrip("\n").split("\t")
                log.log(int(s), int(layer), kind, arm, int(masked))
        records.append(GenerationRecord(image=image, mask=mask, normal_recon=recon,
                                        log=log, provenance=meta["provenance"],
                                        counters=meta["counters"],
                                        cross_class=meta.get("cross_class", False),
                                        paths={k: str(gen_dir / v)
                                               for k, v in paths.items()}))
    return records


def _resolve_pair_embedding(emb_cache: dict, pair_key: tuple, manifest, refs,
                            cls: str, anomaly: str, model, sched,
                            use_ago: bool, ago_cfg, ago_cache) -> PromptEmbedding:
    """One embedding per (class, anomaly-type), optimized on the pair's first reference."""
    if pair_key in emb_cache:
        return emb_cache[pair_key]
    if not use_ago:
        emb = model.encode_template(cls, anomaly)
    else:
        anchor = refs[0]
        e_ori = model.encode_template(cls, anomaly)
        ids = model.vocab.template_ids(cls, anomaly)
        image = manifest.load_image(anchor)
        cfg = ago_cfg if ago_cfg is not None else AgoConfig()
        if ago_cache is not None:
            emb, _ = get_or_optimize(ago_cache, e_ori, image, ids, model, sched, cfg)
        else:
            emb, _ = optimize_embedding(e_ori, image, model, sched, cfg)
    emb_cache[pair_key] = emb
    return emb


def generate_batch(manifest: DatasetManifest, count: int, *, seed: int,
                   model: UNetDenoiser, sched: NoiseSchedule,
                   policy: Optional[EditPolicy] = None,
                   use_dae: bool = True, use_ago: bool = True,
                   ago_cfg: Optional[AgoConfig] = None, ago_cache=None,
                   out_dir=None, cross_class: Optional[tuple] = None,
                   normal_reuse: int = 4, classes: Optional[tuple] = None,
                   defects: Optional[tuple] = None, compute_recon: bool = True,
                   workers: Optional[int] = None,
                   progress=None) -> tuple[list[GenerationRecord], list[dict]]:
    """Round-robin generation over reference pairs.

    Target masks come from the procedural mask sampler and normal images from
    the augmented train-normal split; consecutive requests share a normal
    image ``normal_reuse`` times so its inversion, captures, and
    reconstruction amortize. One optimized embedding serves each (class,
    anomaly-type) pair, computed from the pair's first reference.
    ``cross_class`` = (source class, target class, defect) switches to
    zero-shot mode: references come from the source class, everything else
    from the target class. Individual failures are recorded and skipped;
    more than 10% failing aborts the batch.

    Execution runs group by group; with ``workers`` (capped by the
    O2MAG_THREADS environment variable) groups run as independent jobs whose
    combined result is identical to the serial order.
    """
    if count == 0:
        return [], []
    policy = policy if policy is not None else EditPolicy()
    if cross_class is not None:
        src_cls, dst_cls, defect = cross_class
        refs_by_pair = {(dst_cls, defect):
                        manifest.select(split="reference", cls=src_cls, defect=defect)}
    else:
        refs_by_pair = {}
        for r in manifest.select(split="reference"):
            if classes is not None and r.cls not in classes:
                continue
            if defects is not None and r.defect not in defects:
                continue
            refs_by_pair.setdefault((r.cls, r.defect), []).append(r)
    pairs = sorted(refs_by_pair)
    if not pairs or not any(refs_by_pair.values()):
        raise ValueError("reference split is empty for the requested selection")

    # assignment order is the record order: pairs round-robin, references
    # cycling within each pair, one fresh target mask per index
    assignments = []
    class_progress: dict = {}
    for i in range(count):
        pair = pairs[i % len(pairs)]
        pair_refs = refs_by_pair[pair]
        ref_rec = pair_refs[(i // len(pairs)) % len(pair_refs)]
        cls = pair[0]
        j = class_progress.get(cls, 0)
        class_progress[cls] = j + 1
        normal_group = j // max(1, normal_reuse)
        assignments.append({"index": i, "pair": pair, "ref": ref_rec,
                            "group": (cls, normal_group)})

    # execution order groups by (class, normal group) so inversions and
    # captures amortize; every record stays a pure function of its own
    # assignment, which also makes parallel group jobs equal to serial runs
    groups: dict[tuple, list[int]] = {}
    for i in range(count):
        groups.setdefault(assignments[i]["group"], []).append(i)

    # pair embeddings are resolved once, up front, so jobs share them read-only
    emb_cache: dict = {}
    emb_errors: dict = {}
    for pair in pairs:
        try:
            _resolve_pair_embedding(emb_cache, pair, manifest, refs_by_pair[pair],
                                    pair[0], pair[1], model, sched, use_ago,
                                    ago_cfg, ago_cache)
        except Exception as exc:
            emb_errors[pair] = exc

    by_index: dict[int, GenerationRecord] = {}
    failures: list[dict] = []
    progress_done = [0]

    def run_group(group_key) -> tuple[dict, list]:
        got: dict[int, GenerationRecord] = {}
        bad: list[dict] = []
        traj_cache: dict = {}
        normal_side = None
        scratch = {"inversion_evals": 0, "branch_evals": 0, "recon_evals": 0}
        for i in groups[group_key]:
            a = assignments[i]
            cls, anomaly = a["pair"]
            ref_rec = a["ref"]
            pool = manifest.select(split="train-normal", cls=cls)
            draw_rng = np.random.default_rng([seed, 1, _seed_of(group_key)])
            normal_rec = pool[int(draw_rng.integers(0, len(pool)))]
            mask_seed = int(np.random.default_rng([seed, 2, i]).integers(0, 2 ** 31))
            mask = gen_target_masks(cls, anomaly, 1, seed=mask_seed)[0]
            try:
                if a["pair"] in emb_errors:
                    raise emb_errors[a["pair"]]
                e_star = emb_cache[a["pair"]]
                ref_image = manifest.load_image(ref_rec)
                ref_mask = manifest.load_mask(ref_rec)
                if ref_rec.image not in traj_cache:
                    traj_cache[ref_rec.image] = _side_artifacts(
                        ref_image, e_star, model, sched, scratch, "ref")
                ref_side = traj_cache[ref_rec.image]
                ref_side.captures = {}  # recomputed per generation; kept small
                if normal_side is None:
                    normal_img = augment_normal(
                        manifest.load_image(normal_rec), cls, draw_rng)
                    normal_side = _side_artifacts(
                        normal_img, model.encode_template(cls), model, sched,
                        scratch, "nor")
                req = GenerationRequest(
                    ref_image=ref_image, ref_mask=ref_mask,
                    normal_image=normal_side.trajectory.at(0),
                    target_mask=mask, cls=cls, anomaly=anomaly, seed=seed + i,
                    policy=policy, use_dae=use_dae, use_ago=use_ago)
                record = generate(
                    req, model, sched, ago_cfg=ago_cfg, ago_cache=ago_cache,
                    embedding=e_star, compute_recon=compute_recon,
                    ref_side=ref_side, normal_side=normal_side)
                record.cross_class = cross_class is not None
                record.provenance["reference"] = ref_rec.image
                record.provenance["normal"] = normal_rec.image
                record.provenance["index"] = i
                if out_dir is not None:
                    write_record(record, out_dir, f"gen-{i:04d}")
                got[i] = record
            except Exception as exc:  # per-item isolation; the batch survives
                bad.append({"index": i, "reference": ref_rec.image,
                            "error": str(exc)})
            progress_done[0] += 1
            if progress is not None:
                progress(progress_done[0], count)
        return got, bad

    group_keys = sorted(groups)
    n_workers = worker_count(workers)
    if n_workers <= 1 or len(group_keys) == 1:
        for key in group_keys:
            got, bad = run_group(key)
            by_index.update(got)
            failures.extend(bad)
            if len(failures) > 0.1 * count:
                break
    else:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=n_workers) as pool_:
            for got, bad in pool_.map(run_group, group_keys):
                by_index.update(got)
                failures.extend(bad)

    failures.sort(key=lambda f: f["index"])
    if len(failures) > 0.1 * count:
        raise RuntimeError(f"{len(failures)} of {count} generations failed; "
                           f"first error: {failures[0]['error']}")
    if out_dir is not None and failures:
        with open(Path(out_dir) / "failures.json", "w", encoding="utf-8") as fh:
            json.dump(failures, fh, indent=2, sort_keys=True)
    return [by_index[i] for i in sorted(by_index)], failures


def _seed_of(group_key) -> int:
    import zlib
    cls, group = group_key
    return zlib.crc32(cls.encode()) + 1000003 * int(group)
