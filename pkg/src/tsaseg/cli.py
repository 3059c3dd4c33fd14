"""Command-line entry points.

Subcommands:
  gen-data          write a synthetic two-domain dataset + manifest into --out
  train             run the trainer on a dataset; logs, eval CSVs, checkpoint
  eval              score a checkpoint on a dataset split
  check             run the verification suite; nonzero exit on any failure
  export-features   dump sampled pixel features to CSV for external plotting

Shared flags: --config PATH (key=value file), --seed N (overrides the config
seed), --out DIR. Every run with an --out writes resolved_config.txt so the
result can be reproduced from the echoed values alone.

CSV schemas (fixed column orders):
  step log   iter,loss_total,loss_sup,loss_cons,loss_tsa,alpha,confident_pixels
  eval       iter,split,class,dice,jaccard,hd95,asd,boundary_sentinel_count
             (class is an integer or 'mean'; per-sample files add a sample column)
  features   domain,class,f0..f{d-1}

Exit codes: 0 success, 1 check failure, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checks
from .config import ConfigError, RunConfig, parse_config, render_config
from .network import forward
from .synth_data import FileFormatError, gen_dataset, read_manifest, read_sample
from .trainer import (
    TrainState,
    evaluate,
    init_state,
    load_checkpoint,
    load_training_pools,
    run_training,
    save_checkpoint,
)

STEP_LOG_HEADER = "iter,loss_total,loss_sup,loss_cons,loss_tsa,alpha,confident_pixels"
EVAL_HEADER = "iter,split,class,dice,jaccard,hd95,asd,boundary_sentinel_count"
SAMPLE_EVAL_HEADER = "iter,split,sample,class,dice,jaccard,hd95,asd,boundary_sentinel_count"


def _f(v: float) -> str:
    """Shortest round-trip decimal; identical values give identical bytes."""
    return repr(float(v))


def _load_config(args) -> RunConfig:
    cfg = parse_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be >= 0")
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _prepare_out(args, cfg: RunConfig) -> Path | None:
    if args.out is None:
        return None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(render_config(cfg))
    return out


def _require_out(args, cfg: RunConfig) -> Path:
    if args.out is None:
        raise ConfigError("this subcommand requires --out DIR")
    return _prepare_out(args, cfg)


def _manifest_records(cfg: RunConfig, args):
    data_dir = Path(getattr(args, "data", None) or cfg.data_dir)
    manifest = data_dir / "manifest.txt"
    if not manifest.is_file():
        raise FileNotFoundError(f"no manifest at {manifest}")
    return read_manifest(manifest)


def _eval_rows(result, iteration: int, split: str) -> list[str]:
    rows = []
    for agg in result.per_class + [result.mean]:
        cls = "mean" if agg.class_id < 0 else str(agg.class_id)
        rows.append(
            f"{iteration},{split},{cls},{_f(agg.dice)},{_f(agg.jaccard)},"
            f"{_f(agg.hd95)},{_f(agg.asd)},{agg.sentinel_count}"
        )
    return rows


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = _require_out(args, cfg)
    records = gen_dataset(
        cfg.seed,
        cfg.source_spec(),
        cfg.target_spec(),
        cfg.n_source,
        cfg.n_target,
        cfg.labeled_fraction,
        out,
        h=cfg.height,
        w=cfg.width,
        n_classes=cfg.n_classes,
    )
    n_labeled = sum(r.labeled for r in records)
    print(f"wrote {len(records)} samples ({n_labeled} labeled) to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _require_out(args, cfg)
    records = _manifest_records(cfg, args)
    labeled, unlabeled = load_training_pools(records)
    tc = cfg.train_config()
    if args.resume:
        state = load_checkpoint(args.resume, tc)
    else:
        state = init_state(tc)

    step_path = out / "step_log.csv"
    eval_path = out / "eval_log.csv"
    with open(step_path, "w", newline="") as step_fh, open(eval_path, "w", newline="") as eval_fh:
        step_fh.write(STEP_LOG_HEADER + "\n")
        eval_fh.write(EVAL_HEADER + "\n")

        def on_step(report):
            step_fh.write(
                f"{report.iteration},{_f(report.loss_total)},{_f(report.loss_sup)},"
                f"{_f(report.loss_cons)},{_f(report.loss_tsa)},{_f(report.alpha)},"
                f"{report.confident_total}\n"
            )

        def on_eval(state: TrainState):
            for split in ("source", "target"):
                if any(r.domain == split and r.label_path for r in records):
                    result = evaluate(state.student, records, split)
                    for row in _eval_rows(result, state.iteration, split):
                        eval_fh.write(row + "\n")

        run_training(state, labeled, unlabeled, on_step=on_step, on_eval=on_eval)

    save_checkpoint(out / "checkpoint.bin", state)
    print(f"trained {state.iteration} iterations; checkpoint at {out / 'checkpoint.bin'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    out = _require_out(args, cfg)
    records = _manifest_records(cfg, args)
    ckpt = args.checkpoint or cfg.checkpoint
    if not ckpt:
        raise ConfigError("no checkpoint given (flag --checkpoint or config key 'checkpoint')")
    state = load_checkpoint(ckpt, cfg.train_config())
    result = evaluate(state.student, records, args.split)

    agg_path = out / "eval_aggregate.csv"
    with open(agg_path, "w", newline="") as fh:
        fh.write(EVAL_HEADER + "\n")
        for row in _eval_rows(result, state.iteration, args.split):
            fh.write(row + "\n")
    with open(out / "eval_samples.csv", "w", newline="") as fh:
        fh.write(SAMPLE_EVAL_HEADER + "\n")
        for idx, cls, row in result.per_sample:
            fh.write(
                f"{state.iteration},{args.split},{idx},{cls},{_f(row.dice)},"
                f"{_f(row.jaccard)},{_f(row.hd95)},{_f(row.asd)},{int(row.sentinel)}\n"
            )
    m = result.mean
    print(
        f"split={args.split} iter={state.iteration} dice={m.dice:.4f} "
        f"jaccard={m.jaccard:.4f} hd95={m.hd95:.3f} asd={m.asd:.3f} "
        f"sentinels={m.sentinel_count}"
    )
    return 0


def cmd_check(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(args, cfg)
    results = checks.run_all(mc_samples=cfg.mc_samples)
    lines = [r.line() for r in results]
    for line in lines:
        print(line)
    n_fail = sum(not r.passed for r in results)
    verdict = f"{len(results) - n_fail}/{len(results)} checks passed"
    print(verdict)
    if out is not None:
        (out / "check_report.txt").write_text("\n".join(lines + [verdict]) + "\n")
    return 1 if n_fail else 0


def cmd_export_features(args) -> int:
    cfg = _load_config(args)
    out = _require_out(args, cfg)
    records = _manifest_records(cfg, args)
    ckpt = args.checkpoint or cfg.checkpoint
    if not ckpt:
        raise ConfigError("no checkpoint given (flag --checkpoint or config key 'checkpoint')")
    state = load_checkpoint(ckpt, cfg.train_config())
    d = state.config.feature_dim

    from .numerics import Rng

    rng = Rng(cfg.seed)
    budget = cfg.export_samples
    by_domain = {
        "source": [r for r in records if r.domain == "source" and r.label_path],
        "target": [r for r in records if r.domain == "target" and r.label_path],
    }
    domains = [dom for dom in ("source", "target") if by_domain[dom]]
    if not domains:
        raise ConfigError("manifest has no labeled records to export features from")
    shares = {dom: budget // len(domains) for dom in domains}
    shares[domains[0]] += budget - sum(shares.values())

    feat_cache: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    path = out / "features.csv"
    n_rows = 0
    with open(path, "w", newline="") as fh:
        fh.write("domain,class," + ",".join(f"f{i}" for i in range(d)) + "\n")
        for dom in domains:
            recs = by_domain[dom]
            for _ in range(shares[dom]):
                r = recs[int(rng.integers(0, len(recs)))]
                if r.image_path not in feat_cache:
                    sample = read_sample(r.image_path, r.label_path)
                    feats, _, _ = forward(state.student, sample.image)
                    feat_cache[r.image_path] = (feats, sample.labels)
                feats, labels = feat_cache[r.image_path]
                h, w = labels.shape
                pix = int(rng.integers(0, h * w))
                row, col = divmod(pix, w)
                vals = ",".join(_f(feats[k, row, col]) for k in range(d))
                fh.write(f"{dom},{labels[row, col]},{vals}\n")
                n_rows += 1
    print(f"wrote {n_rows} feature rows to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsaseg",
        description=__doc__,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset into --out")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train on the dataset under data_dir")
    common(p)
    p.add_argument("--data", help="dataset directory (overrides config data_dir)")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    common(p)
    p.add_argument("--data", help="dataset directory (overrides config data_dir)")
    p.add_argument("--checkpoint", help="checkpoint path (overrides config key)")
    p.add_argument("--split", default="target", choices=["source", "target", "all"])
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("check", help="run the verification suite")
    common(p)
    p.set_defaults(fn=cmd_check)

    p = sub.add_parser("export-features", help="dump sampled pixel features to CSV")
    common(p)
    p.add_argument("--data", help="dataset directory (overrides config data_dir)")
    p.add_argument("--checkpoint", help="checkpoint path (overrides config key)")
    p.set_defaults(fn=cmd_export_features)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (FileFormatError, FileNotFoundError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
