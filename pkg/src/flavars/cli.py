"""Command-line entry point: ``flavars pretrain | eval | data ...``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import functools
import json
import logging
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import click

from flavars import config as cfgio
from flavars.datapipe import grounding
from flavars.datapipe.records import MANIFEST_NAME, load_dataset, write_dataset
from flavars.datapipe.selection import SplitSpec, filter_top_fraction, generate_splits
from flavars.datapipe.synthetic import make_synthetic_records
from flavars.datapipe.vocab import build_vocab
from flavars.errors import CheckpointError, ConfigurationError, CredentialError, DataError, FlavarsError
from flavars.evaluation import PROTOCOLS, KnnConfig, SegProbeConfig, evaluate_split
from flavars.training import LOG_NAME, TrainConfig, fit, load_model

log = logging.getLogger("flavars")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    dataset: str = ""
    split: str | None = None
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2)
    out: str = "runs/flavars"
    train: TrainConfig = field(default_factory=TrainConfig)
    knn: KnnConfig = field(default_factory=KnnConfig)
    probe: SegProbeConfig = field(default_factory=SegProbeConfig)
    vlm: grounding.ClientConfig = field(default_factory=grounding.ClientConfig)


def load_run_config(path, seed: int | None = None) -> RunConfig:
    run = cfgio.from_dict(RunConfig, cfgio.read_config_file(path))
    if seed is not None:
        run = replace(run, seed=seed)
    # the run seed drives every stochastic component
    return replace(run, train=replace(run.train, seed=run.seed), probe=replace(run.probe, seed=run.seed))


class UsageFailure(Exception):
    pass


def handles_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigurationError, DataError, CheckpointError, CredentialError, UsageFailure, FileExistsError) as exc:
            click.echo(f"error: {exc}", err=True)
            sys.exit(2)
        except FlavarsError as exc:
            click.echo(f"runtime failure: {exc}", err=True)
            sys.exit(1)

    return wrapper


def _check_writable(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise UsageFailure(f"{path} exists; pass --force to overwrite")


def _write_text(path: Path, text: str, force: bool) -> None:
    """Identical rewrites are allowed; anything else needs --force."""
    if path.exists() and not force and path.read_text(encoding="utf-8") != text:
        raise UsageFailure(f"{path} exists with different content; pass --force to overwrite")
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _require_dataset(path) -> None:
    if not (Path(path) / MANIFEST_NAME).is_file():
        raise DataError(f"no dataset at {path} (missing {MANIFEST_NAME})")


@click.group()
@click.option("-v", "--verbose", is_flag=True)
def main(verbose):
    """FLAVARS-style vision-language-location pretraining at desk scale."""
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None, help="Output directory; overrides the config's 'out'.")
@click.option("--split", "split_path", type=click.Path(), default=None)
@click.option("--checkpoint", type=click.Path(), default=None, help="Resume from this checkpoint.")
@click.option("--force", is_flag=True)
@handles_errors
def pretrain(config_path, seed, out, split_path, checkpoint, force):
    """Run joint pretraining and write checkpoints plus the loss log."""
    run = load_run_config(config_path, seed)
    out_dir = Path(out or run.out)
    split_path = split_path or run.split
    _require_dataset(run.dataset)
    if split_path and not Path(split_path).is_file():
        raise DataError(f"split file not found: {split_path}")
    if checkpoint is None:
        _check_writable(out_dir / LOG_NAME, force)

    dataset = load_dataset(run.dataset)
    if split_path:
        split = SplitSpec.load(split_path)
    else:
        split = generate_splits([r.id for r in dataset], run.seed, run.fractions)
    out_dir.mkdir(parents=True, exist_ok=True)
    split.save(out_dir / "split.json")
    (out_dir / "run_config.json").write_text(json.dumps(cfgio.to_dict(run), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    result = fit(run.train, dataset, split, out_dir, resume_from=checkpoint)
    last = result.log[-1] if result.log else {}
    click.echo(f"trained {result.state.step} steps; final total loss {last.get('total', float('nan')):.4f}")
    click.echo(f"checkpoint: {result.checkpoint}")


@main.command("eval")
@click.argument("protocol", type=click.Choice(PROTOCOLS))
@click.argument("dataset", type=click.Path())
@click.option("--checkpoint", required=True, type=click.Path())
@click.option("--split", "split_path", required=True, type=click.Path())
@click.option("--config", "config_path", type=click.Path(), default=None, help="Run config whose model must match the checkpoint.")
@click.option("--seed", type=int, default=None)
@click.option("--out", type=click.Path(), default=None, help="MetricReport file (default: <checkpoint>/<protocol>_report.json).")
@click.option("--force", is_flag=True)
@handles_errors
def eval_cmd(protocol, dataset, checkpoint, split_path, config_path, seed, out, force):
    """Evaluate a checkpoint with the knn, zeroshot, seg or locknn protocol."""
    if not Path(checkpoint).is_dir():
        raise CheckpointError(f"checkpoint not found: {checkpoint}")
    _require_dataset(dataset)
    if not Path(split_path).is_file():
        raise DataError(f"split file not found: {split_path}")
    knn, probe, expected = KnnConfig(), SegProbeConfig(seed=seed or 0), None
    if config_path:
        run = load_run_config(config_path, seed)
        knn, probe, expected = run.knn, run.probe, run.train.model.fingerprint
    state = load_model(checkpoint, expected_fingerprint=expected)
    report = evaluate_split(
        protocol,
        state.model,
        load_dataset(dataset),
        SplitSpec.load(split_path),
        vocab=state.vocab,
        knn=knn,
        probe=probe,
        config_fingerprint=state.config.model.fingerprint,
    )
    out_path = Path(out) if out else Path(checkpoint) / f"{protocol}_report.json"
    _write_text(out_path, report.to_json(), force)
    name = Path(checkpoint).name
    header = f"{'model':<20} {protocol + '/' + report.metric:>20}"
    click.echo(header)
    click.echo(f"{name:<20} {100 * report.value:>20.2f}")
    if report.notes.get("deviation"):
        click.echo(f"note: {report.notes['deviation']}")
    click.echo(f"report: {out_path}")


@main.group()
def data():
    """Dataset utilities: filter, splits, ground, vocab, synth."""


@data.command("filter")
@click.argument("dataset", type=click.Path())
@click.option("--fraction", type=float, required=True)
@click.option("--out", type=click.Path(), required=True)
@click.option("--force", is_flag=True)
@handles_errors
def data_filter(dataset, fraction, out, force):
    """Keep the top-scoring fraction of records."""
    _require_dataset(dataset)
    ds = load_dataset(dataset)
    kept = filter_top_fraction(ds.records, fraction)
    write_dataset(out, kept, ds.manifest.tokenizer_fingerprint, force=force)
    click.echo(f"kept {len(kept)} of {len(ds)} records -> {out}")


@data.command("splits")
@click.argument("dataset", type=click.Path())
@click.option("--seed", type=int, default=0)
@click.option("--fractions", default="0.7,0.1,0.2", help="train,val,test")
@click.option("--out", type=click.Path(), required=True)
@click.option("--force", is_flag=True)
@handles_errors
def data_splits(dataset, seed, fractions, out, force):
    """Write a reproducible SplitSpec file."""
    _require_dataset(dataset)
    try:
        fr = tuple(float(x) for x in fractions.split(","))
    except ValueError:
        raise UsageFailure(f"--fractions must be comma-separated numbers, got {fractions!r}") from None
    ds = load_dataset(dataset)
    spec = generate_splits([r.id for r in ds], seed, fr)
    _write_text(Path(out), spec.to_json(), force)
    click.echo(f"train {len(spec.train)} / val {len(spec.val)} / test {len(spec.test)} -> {out}")


@data.command("vocab")
@click.argument("dataset", type=click.Path())
@click.option("--out", type=click.Path(), required=True)
@click.option("--split", "split_path", type=click.Path(), default=None, help="Restrict to the train split.")
@click.option("--max-size", type=int, default=128)
@click.option("--force", is_flag=True)
@handles_errors
def data_vocab(dataset, out, split_path, max_size, force):
    """Build the caption vocabulary."""
    _require_dataset(dataset)
    ds = load_dataset(dataset)
    records = ds.subset(SplitSpec.load(split_path).train) if split_path else ds.records
    vocab = build_vocab([r.caption for r in records], max_size)
    _write_text(Path(out), vocab.to_json(), force)
    click.echo(f"{len(vocab)} tokens, fingerprint {vocab.fingerprint[:12]} -> {out}")


@data.command("ground")
@click.argument("dataset", type=click.Path())
@click.option("--out", type=click.Path(), required=True)
@click.option("--config", "config_path", type=click.Path(), default=None, help="Run config with a 'vlm' section.")
@click.option("--mock-vlm", is_flag=True, help="Use the offline mock service.")
@click.option("--seed", type=int, default=None)
@click.option("--force", is_flag=True, help="Overwrite --out and re-ground records that already have groundings.")
@handles_errors
def data_ground(dataset, out, config_path, mock_vlm, seed, force):
    """Improve and ground captions through the VLM service."""
    _require_dataset(dataset)
    _check_writable(Path(out) / MANIFEST_NAME, force)
    client_cfg = load_run_config(config_path, seed).vlm if config_path else grounding.ClientConfig()
    if seed is not None:
        client_cfg = replace(client_cfg, seed=seed)
    if client_cfg.cache_dir is None:
        client_cfg = replace(client_cfg, cache_dir=str(Path(out) / "vlm_cache"))
    transport = grounding.MockTransport() if mock_vlm else None
    # fail on missing credentials before touching any record
    grounding.VLMClient(client_cfg, transport)
    ds = load_dataset(dataset)
    updated, report = grounding.caption_ground_batch(ds.records, client_cfg, transport, force=force)
    write_dataset(out, updated, ds.manifest.tokenizer_fingerprint, force=True)
    (Path(out) / "ground_status.json").write_text(
        json.dumps([s.__dict__ for s in report.statuses], indent=1) + "\n", encoding="utf-8"
    )
    counts = ", ".join(f"{k}={v}" for k, v in sorted(report.counts().items()))
    click.echo(f"{counts}; service calls {report.network_calls} -> {out}")
    for s in report.statuses:
        if s.status in ("failed", "warning"):
            click.echo(f"  {s.id}: {s.status}: {s.error}", err=True)


@data.command("synth")
@click.argument("out", type=click.Path())
@click.option("--n", "count", type=int, default=512)
@click.option("--seed", type=int, default=0)
@click.option("--force", is_flag=True)
@handles_errors
def data_synth(out, count, seed, force):
    """Generate the synthetic shapes dataset."""
    records = make_synthetic_records(count, seed)
    write_dataset(out, records, force=force)
    click.echo(f"wrote {count} synthetic records -> {out}")


if __name__ == "__main__":
    main()
