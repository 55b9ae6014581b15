"""Session fixtures: the full corpus, the trained denoiser, and shared batches.

Heavy artifacts are cached under tests/_cache keyed by a version string and
their parameters. Everything is seeded, so a cache hit is bit-identical to a
fresh computation; delete the directory to rebuild from scratch.
"""

import json
from pathlib import Path

import numpy as np
import pytest

from o2mag.ago import AgoConfig
from o2mag.dataset import DatasetManifest, build_corpus, training_set_from_manifest
from o2mag.denoiser import DenoiserConfig, UNetDenoiser, Vocabulary, train_denoiser
from o2mag.pipeline import generate_batch, load_records
from o2mag.schedule import NoiseSchedule

CACHE_VERSION = "v1"
CACHE = Path(__file__).parent / "_cache" / CACHE_VERSION

CORPUS_SEED = 0
TRAIN_STEPS = 6000
TRAIN_SEED = 7
BATCH_SEED = 100
MAIN_BATCH_COUNT = 200
ABLATION_COUNT = 100
ZEROSHOT_COUNT = 100
SEG_EPOCHS = 10
AGO_STEPS = 500


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def acceptance_report(pytestconfig):
    def record(num, ok, detail):
        line = f"criterion {num:>2}: {'PASS' if ok else 'FAIL'} - {detail}"
        pytestconfig._acceptance_lines.append(line)
        print(line)
        return ok
    return record


@pytest.fixture(scope="session")
def sched():
    return NoiseSchedule()


@pytest.fixture(scope="session")
def corpus() -> DatasetManifest:
    root = CACHE / "corpus"
    manifest_path = root / "manifest.tsv"
    if manifest_path.exists():
        return DatasetManifest.load(manifest_path)
    return build_corpus(root, seed=CORPUS_SEED)


@pytest.fixture(scope="session")
def model(corpus, sched) -> UNetDenoiser:
    path = CACHE / f"denoiser-s{TRAIN_STEPS}-seed{TRAIN_SEED}.tmap"
    if path.exists():
        return UNetDenoiser.load(path)
    vocab = Vocabulary()
    data = training_set_from_manifest(corpus, vocab)
    trained, info = train_denoiser(data, DenoiserConfig(), TRAIN_STEPS, TRAIN_SEED,
                                   vocab=vocab, sched=sched)
    trained.save(path)
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(info, fh)
    return trained


@pytest.fixture(scope="session")
def training_info(model) -> dict:
    path = CACHE / f"denoiser-s{TRAIN_STEPS}-seed{TRAIN_SEED}.json"
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def ago_cache():
    path = CACHE / "embeddings"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _batch_dir(name: str, count: int) -> Path:
    return CACHE / f"batch-{name}-{count}"


def _ensure_batch(name, count, corpus, model, sched, ago_cache, **kw):
    import shutil
    out = _batch_dir(name, count)
    have = len([p for p in out.glob("*.json") if p.name != "failures.json"]) \
        if out.exists() else 0
    if have < 0.9 * count:
        if out.exists():
            shutil.rmtree(out)  # never mix two generations of a batch
        generate_batch(corpus, count, model=model, sched=sched,
                       ago_cfg=AgoConfig(steps=AGO_STEPS, seed=BATCH_SEED),
                       ago_cache=ago_cache, out_dir=out, **kw)
    return load_records(out)


@pytest.fixture(scope="session")
def main_batch(corpus, model, sched, ago_cache):
    """200 full-configuration generations: the workhorse for criteria 6 and 7."""
    return _ensure_batch("full", MAIN_BATCH_COUNT, corpus, model, sched, ago_cache,
                         seed=BATCH_SEED, use_dae=True, use_ago=True)


@pytest.fixture(scope="session")
def ablation_table(corpus, model, sched, ago_cache):
    """Four-arm ablation grid at shared seeds; cached as a table."""
    path = CACHE / f"ablation-{ABLATION_COUNT}.json"
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    from o2mag.evaluation import run_ablation
    configurations = {
        "triag": {"dae": False, "ago": False},
        "triag+dae": {"dae": True, "ago": False},
        "triag+ago": {"dae": False, "ago": True},
        "full": {"dae": True, "ago": True},
    }
    table = run_ablation(corpus, configurations, BATCH_SEED, model=model,
                         sched=sched, count=ABLATION_COUNT, epochs=SEG_EPOCHS,
                         out_dir=CACHE / "ablation-batches", ago_cache=ago_cache)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(table, fh, indent=2)
    return table


def _run_cli_chain(base: Path) -> dict:
    """One pass of every CLI command inside ``base``; returns {relpath: sha256}.

    Everything runs with relative paths from the work directory so the two
    repetitions see byte-identical inputs.
    """
    import hashlib
    import os

    from click.testing import CliRunner

    from o2mag.cli import main as cli_main

    runner = CliRunner()

    def run(*args):
        result = runner.invoke(cli_main, [str(a) for a in args],
                               catch_exceptions=False)
        assert result.exit_code == 0, result.output
        return result

    old_cwd = os.getcwd()
    os.chdir(base)
    try:
        run("build-dataset", "--out", "corpus", "--seed", 5,
            "--anomalies-per-pair", 6, "--train-normals", 4, "--test-normals", 2)
        manifest = "corpus/manifest.tsv"

        Path("train.cfg").write_text(
            "# smoke-scale training configuration\n"
            f"manifest={manifest}\n"
            "channels=8,16,32\nheads=1\nd_tau=16\ntime_dim=32\n"
            "steps=15\nbatch_size=4\nlr=1e-3\nseed=3\n")
        run("train-denoiser", "--config", "train.cfg", "--out", "model.tmap")

        man = DatasetManifest.load(manifest)
        ref = man.select(split="reference", cls="grid", defect="hole")[0]
        normal = man.select(split="train-normal", cls="grid")[0]
        run("ago", "--ckpt", "model.tmap", "--ref", man.image_path(ref),
            "--mask", man.mask_path(ref), "--cls", "grid", "--anom", "hole",
            "--steps", 20, "--seed", 2, "--out", "emb.tmap")
        run("generate", "--ckpt", "model.tmap", "--ref", man.image_path(ref),
            "--refmask", man.mask_path(ref), "--normal", man.image_path(normal),
            "--targetmask", man.mask_path(ref), "--cls", "grid", "--anom", "hole",
            "--neg", "no hole", "--seed", 1, "--emb", "emb.tmap", "--out", "gen")
        run("generate-batch", "--ckpt", "model.tmap", "--manifest", manifest,
            "--count", 2, "--seed", 2, "--no-ago", "--out", "batch")
        run("evaluate", "--gen", "batch", "--manifest", manifest,
            "--out", "report", "--epochs", 2, "--seed", 0, "--min-pairs", 1)
        run("pca-attn", "--ckpt", "model.tmap", "--image", man.image_path(ref),
            "--step", 30, "--layer", 6, "--cls", "grid", "--out", "pca.png")
    finally:
        os.chdir(old_cwd)

    digests = {}
    for path in sorted(base.rglob("*")):
        if path.is_file():
            digests[str(path.relative_to(base))] = hashlib.sha256(
                path.read_bytes()).hexdigest()
    return digests


@pytest.fixture(scope="session")
def cli_determinism_digests(tmp_path_factory):
    first = _run_cli_chain(tmp_path_factory.mktemp("cli-run-a"))
    second = _run_cli_chain(tmp_path_factory.mktemp("cli-run-b"))
    return first, second


@pytest.fixture(scope="session")
def zero_shot_metrics(corpus, model, sched, ago_cache):
    """Cross-class vs same-class pixel AUROC on the shared defect type."""
    path = CACHE / f"zeroshot-{ZEROSHOT_COUNT}.json"
    if path.exists():
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    from o2mag.evaluation import evaluate_segmenter, train_segmenter

    def detect(records):
        pairs = [(r.image, r.mask) for r in records]
        seg = train_segmenter(pairs, epochs=SEG_EPOCHS, seed=BATCH_SEED)
        report = evaluate_segmenter(seg, corpus)
        for row in report.rows:
            if row["class"] == "stripes" and row["defect"] == "hole":
                return row["pixel_auroc"]
        raise RuntimeError("stripes/hole row missing from the report")

    cross_records = _ensure_batch(
        "cross", ZEROSHOT_COUNT, corpus, model, sched, ago_cache,
        seed=BATCH_SEED + 1, use_dae=True, use_ago=True,
        cross_class=("grid", "stripes", "hole"))
    same_records = _ensure_batch(
        "same", ZEROSHOT_COUNT, corpus, model, sched, ago_cache,
        seed=BATCH_SEED + 1, use_dae=True, use_ago=True,
        classes=("stripes",), defects=("hole",))
    result = {"cross": detect(cross_records), "same": detect(same_records),
              "cross_count": len(cross_records), "same_count": len(same_records)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(result, fh, indent=2)
    return result
