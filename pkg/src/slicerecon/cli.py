"""``slicerecon`` command line: synth -> train -> reconstruct -> score -> evaluate.

Every command reads one run configuration (``--config``), applies flag
overrides, echoes the resolved configuration into its output directory and
refuses to replace existing outputs without ``--overwrite``.

Output layout under ``--out``::

    data/          manifest.json, volumes/*.vol          (synth)
    train/         checkpoints/final.pt, train_log.jsonl  (train)
    reconstruct/   <split>/<scan_id>.npz, montages        (reconstruct)
    scores/        <split>.csv                            (score)
    evaluate/      report.json                            (evaluate)
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, flag_keys, load_config, parse_flag_value
from .data import SPLITS, DatasetManifest, generate_phantoms, load_preprocessed
from .errors import ConfigError, MissingInputError, OutputExistsError, SliceReconError
from .evaluation import evaluate_staged
from .nets import Checkpoint
from .scoring import read_score_table, score_scan, select_score, write_score_table
from .trainer import reconstruct_volume, train
from .windowing import make_window_pairs

log = logging.getLogger("slicerecon")

COMMANDS = ("synth", "train", "reconstruct", "score", "evaluate")
RESOLVED_NAME = "resolved_config.yaml"


def _prepare_output(path: Path, overwrite: bool) -> Path:
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise OutputExistsError(f"{path} already exists; pass --overwrite to replace it")
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _echo_config(cfg: RunConfig, out: Path) -> None:
    (out / RESOLVED_NAME).write_text(cfg.to_yaml(), encoding="utf-8")


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"{what} not found: {path}")
    return path


def _manifest(cfg: RunConfig) -> DatasetManifest:
    return DatasetManifest.read(_require(cfg.manifest_path, "dataset manifest"))


def _splits(cfg: RunConfig) -> list[str]:
    bad = [s for s in cfg.reconstruct.splits if s not in SPLITS]
    if bad:
        raise ConfigError(f"reconstruct.splits contains unknown splits {bad}")
    return list(cfg.reconstruct.splits)


def _checkpoint_path(cfg: RunConfig) -> Path:
    return cfg.out_dir / "train" / "checkpoints" / "final.pt"


# ---------------------------------------------------------------- commands


def cmd_synth(cfg: RunConfig, overwrite: bool = False) -> Path:
    if cfg.data.manifest:
        raise ConfigError("synth writes to <out>/data; leave data.manifest unset")
    out = _prepare_output(cfg.out_dir / "data", overwrite)
    manifest = generate_phantoms(cfg.phantom_spec(), out)
    _echo_config(cfg, out)
    log.info("wrote %d phantom scans to %s", len(manifest.entries), out)
    return out


def cmd_train(cfg: RunConfig, overwrite: bool = False) -> Path:
    manifest = _manifest(cfg)
    tcfg = cfg.train_config().resolved()
    out = _prepare_output(cfg.out_dir / "train", overwrite)
    _echo_config(cfg, out)
    ckpt, tlog = train(
        tcfg,
        manifest,
        out_dir=out,
        target_width=cfg.data.target_width,
        slice_fraction=cfg.data.slice_fraction,
    )
    last = tlog.records[-1] if tlog.records else {}
    log.info("trained %d steps; last generator loss %.5g", ckpt.step, last.get("gen_loss", float("nan")))
    return out


def _montage(inp, target, pred) -> np.ndarray:
    """Rows: input slices, ground-truth next slices, reconstructed next slices."""
    rows = [np.concatenate(list(stack), axis=1) for stack in (inp, target, pred)]
    grid = np.concatenate(rows, axis=0)
    return (np.clip(grid, 0, 1) * 255).round().astype(np.uint8)


def cmd_reconstruct(cfg: RunConfig, overwrite: bool = False) -> Path:
    from PIL import Image

    manifest = _manifest(cfg)
    ckpt = Checkpoint.load(_require(_checkpoint_path(cfg), "checkpoint"))
    splits = _splits(cfg)
    out = _prepare_output(cfg.out_dir / "reconstruct", overwrite)
    _echo_config(cfg, out)
    g = ckpt.generator()
    for split in splits:
        sdir = out / split
        sdir.mkdir()
        montaged = set()
        for e in manifest.split(split):
            v = load_preprocessed(manifest, e, cfg.data.target_width, cfg.data.slice_fraction)
            recon = reconstruct_volume(g, v)
            if not recon:
                continue
            preds = np.stack([p for _, p in recon]).astype(np.float32)
            starts = np.array([w.start_index for w, _ in recon], dtype=np.int64)
            np.savez(sdir / f"{e.scan_id}.npz", predictions=preds, start_index=starts)
            # one side-by-side example per CDR stage, from the middle window
            if cfg.reconstruct.montages and e.cdr not in montaged:
                montaged.add(e.cdr)
                w, p = recon[len(recon) // 2]
                Image.fromarray(_montage(w.input_stack, w.target_stack, p)).save(
                    sdir / f"montage_cdr{e.cdr:g}_{e.scan_id}.png"
                )
        log.info("reconstructed split %s", split)
    return out


def cmd_score(cfg: RunConfig, overwrite: bool = False) -> Path:
    manifest = _manifest(cfg)
    splits = _splits(cfg)
    rdir = _require(cfg.out_dir / "reconstruct", "reconstructions")
    for split in splits:
        _require(rdir / split, f"reconstructions for split {split!r}")
    out = _prepare_output(cfg.out_dir / "scores", overwrite)
    _echo_config(cfg, out)
    for split in splits:
        records = []
        for e in manifest.split(split):
            v = load_preprocessed(manifest, e, cfg.data.target_width, cfg.data.slice_fraction)
            pairs = make_window_pairs(v)
            if not pairs:
                log.warning("scan %s has fewer than 6 slices; not scored", e.scan_id)
                continue
            npz = _require(rdir / split / f"{e.scan_id}.npz", f"reconstruction of {e.scan_id}")
            with np.load(npz) as z:
                preds, starts = z["predictions"], z["start_index"]
            if list(starts) != [p.start_index for p in pairs]:
                raise ConfigError(f"{npz}: windows do not align with the preprocessed scan")
            records.append(score_scan(list(preds), [p.target_stack for p in pairs], e.scan_id, e.cdr))
        write_score_table(records, out / f"{split}.csv")
        log.info("scored %d scans in split %s", len(records), split)
    return out


def cmd_evaluate(cfg: RunConfig, overwrite: bool = False) -> Path:
    sdir = cfg.out_dir / "scores"
    val = read_score_table(_require(sdir / "validation.csv", "validation score table"))
    test = read_score_table(_require(sdir / "test.csv", "test score table"))
    out = _prepare_output(cfg.out_dir / "evaluate", overwrite)
    _echo_config(cfg, out)
    selection = select_score(val, cfg.evaluate.positive_cdrs)
    report = evaluate_staged(test, selection, bins=cfg.evaluate.bins)
    report.write(out / "report.json")
    for c in report.comparisons:
        log.info("%s: AUC %.3f (%d vs %d)", c.name, c.auc, c.n_neg, c.n_pos)
    return out


HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "reconstruct": cmd_reconstruct,
    "score": cmd_score,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slicerecon", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML run configuration")
    common.add_argument("--seed", type=int, help="seed for phantoms and training")
    common.add_argument("--out", help="run output directory")
    common.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    common.add_argument("-v", "--verbose", action="store_true")
    group = common.add_argument_group("config overrides (any key of the YAML file)")
    for key in flag_keys():
        if key in ("seed", "out"):
            continue
        group.add_argument(f"--{key}", dest=f"set:{key}", metavar="VALUE", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HANDLERS[name].__name__.replace("cmd_", ""))
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = {k[4:]: parse_flag_value(v) for k, v in vars(args).items() if k.startswith("set:")}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = resolve_config(args)
        HANDLERS[args.command](cfg, overwrite=args.overwrite)
    except SliceReconError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
