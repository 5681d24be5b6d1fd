"""Command-line entry point.

Commands: gen-data | train | adapt | decode | score | inspect | verify.
Exit codes: 0 success, 1 usage, 2 config, 3 data, 4 numerical, 5
verification failure.

Run configuration is a plain ``key=value`` file ('#' starts a comment).
Every key has a default; unknown keys are rejected:

========================  =======  =========================================
key                       default  meaning
========================  =======  =========================================
mode                      tdnn     tdnn | b-tdnn | bd-tdnn | gp0..gp3 | v-tdnn
bayes_layers              1        layer set: "1", "1,2", "1-5", or "all"
mc_samples                1        Monte-Carlo samples per step
lr                        0.05     initial learning rate
epochs                    10       training epochs
batch_frames              512      frames per minibatch
k                         1.0      acoustic scale
f_smooth_lambda           0.1      frame-smoothing interpolation weight
l2_weight                 0.0      L2 penalty weight
prior_sigma               0.25     prior (and initial posterior) deviation
seed                      0        master seed
data_dir                  (none)   corpus directory (train/dev/test + bigram)
out_dir                   out      artifact directory
prior_from                (none)   converged checkpoint for the prior
init_from                 (none)   half-trained checkpoint for the start
========================  =======  =========================================
"""

import argparse
import csv
import sys
from dataclasses import replace
from datetime import datetime
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from .corpus import CorpusSpec, DomainShift, generate, load_bigram, load_split
from .criterion import CriterionConfig, build_denominator_graph
from .decode import decode_corpus, label_error_rate, score_report
from .errors import (BtdnnError, ConfigError, DataError, NumericsError,
                     VerificationError)
from .tdnn import DEFAULT_OFFSETS, MODES
from .trainer import (AdaptConfig, NoiseStream, TrainConfig, adapt,
                      bootstrap_prior, checkpoint_from_stack,
                      load_checkpoint, save_checkpoint,
                      stack_from_checkpoint, train, train_pipeline)
from . import trainer as trainer_mod
from . import verify as verify_mod

CONFIG_DEFAULTS = {
    "mode": "tdnn",
    "bayes_layers": "1",
    "mc_samples": "1",
    "lr": "0.05",
    "epochs": "10",
    "batch_frames": "512",
    "k": "1.0",
    "f_smooth_lambda": "0.1",
    "l2_weight": "0.0",
    "prior_sigma": "0.25",
    "seed": "0",
    "data_dir": "",
    "out_dir": "out",
    "prior_from": "",
    "init_from": "",
}

METRIC_COLUMNS = ("step", "mmi", "kl_total", "ce", "l2", "total", "dev_ler")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def load_run_config(path):
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    values = dict(CONFIG_DEFAULTS)
    for ln, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{ln}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_DEFAULTS:
            raise ConfigError(f"{path}:{ln}: unknown key {key!r}")
        values[key] = value
    return values


def parse_layer_set(text, n_layers):
    if text.strip() == "all":
        return frozenset(range(1, n_layers + 1))
    out = set()
    try:
        for part in text.split(","):
            part = part.strip()
            if "-" in part:
                lo, hi = part.split("-")
                out.update(range(int(lo), int(hi) + 1))
            else:
                out.add(int(part))
    except ValueError as exc:
        raise ConfigError(f"bad layer set {text!r}: {exc}") from exc
    return frozenset(out)


def train_config_from(values, workers=1):
    try:
        layers = parse_layer_set(values["bayes_layers"], len(DEFAULT_OFFSETS))
        return TrainConfig(
            mode=values["mode"],
            bayes_layers=layers,
            lr=float(values["lr"]),
            epochs=int(values["epochs"]),
            batch_frames=int(values["batch_frames"]),
            mc_samples=int(values["mc_samples"]),
            seed=int(values["seed"]),
            prior_sigma=float(values["prior_sigma"]),
            criterion=CriterionConfig(
                acoustic_scale=float(values["k"]),
                f_smooth_lambda=float(values["f_smooth_lambda"]),
                l2_weight=float(values["l2_weight"])),
            workers=workers,
        )
    except ValueError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def _load_corpus(data_dir):
    data_dir = Path(data_dir)
    if not data_dir.is_dir():
        raise DataError(f"data directory not found: {data_dir}")
    train_utts = load_split(data_dir / "train.bcorp")
    dev_utts = load_split(data_dir / "dev.bcorp")
    bigram = load_bigram(data_dir / "bigram.txt")
    return train_utts, dev_utts, bigram


def write_metrics(path, rows, timestamp=True):
    lines = []
    if timestamp:
        lines.append(f"# generated {datetime.now().isoformat()}")
    lines.append(",".join(METRIC_COLUMNS))
    for row in rows:
        cells = [str(int(row["step"]))]
        cells += [format(float(row[c]), ".17g") for c in METRIC_COLUMNS[1:]]
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(args):
    spec = CorpusSpec.toy(num_labels=args.labels, feat_dim=args.feat_dim,
                          separation=args.separation,
                          mean_duration=args.mean_duration,
                          num_utterances=args.utts,
                          utt_frames=(args.min_frames, args.max_frames),
                          seed=args.seed)
    out = Path(args.out)
    generate(spec, out)
    print(f"wrote source corpus under {out}")
    if args.shift_offset != 0.0 or args.shift_duration != 1.0:
        rng = np.random.default_rng([args.seed, 555])
        direction = rng.standard_normal(args.feat_dim)
        direction /= np.linalg.norm(direction)
        shift = DomainShift(np.eye(args.feat_dim),
                            args.shift_offset * direction,
                            args.shift_duration)
        generate(spec.with_shift(shift), out / "target")
        print(f"wrote shifted target corpus under {out / 'target'}")
    return 0


def cmd_train(args):
    values = load_run_config(args.config)
    cfg = train_config_from(values, workers=args.workers)
    train_utts, dev_utts, bigram = _load_corpus(values["data_dir"])
    out_dir = Path(values["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    if values["prior_from"]:
        converged = load_checkpoint(values["prior_from"])
        half = (load_checkpoint(values["init_from"])
                if values["init_from"] else converged)
        stack = bootstrap_prior(converged, half, cfg)
        noise = NoiseStream(trainer_mod._phase_seed(cfg.seed, 2))
        result = train(stack, train_utts, dev_utts, bigram, cfg, noise=noise)
        metrics = result.metrics
        final_step = result.final_step
        phases = {}
    else:
        pipe = train_pipeline(train_utts, dev_utts, bigram, cfg)
        stack, metrics, final_step = pipe.stack, pipe.metrics, pipe.final_step
        phases = pipe.phases

    ckpt = checkpoint_from_stack(stack, seed=cfg.seed, step=final_step)
    save_checkpoint(ckpt, out_dir / "checkpoint.btdn")
    write_metrics(out_dir / "metrics.csv", metrics,
                  timestamp=not args.no_timestamp)
    if phases:
        boot = out_dir / "bootstrap"
        boot.mkdir(exist_ok=True)
        for name, phase_ckpt in phases.items():
            save_checkpoint(phase_ckpt, boot / f"{name}.btdn")
    print(f"wrote {out_dir / 'checkpoint.btdn'} "
          f"({len(metrics)} epochs, final step {final_step})")
    return 0


def cmd_adapt(args):
    values = load_run_config(args.config)
    cfg = train_config_from(values, workers=args.workers)
    train_utts, dev_utts, bigram = _load_corpus(values["data_dir"])
    source = load_checkpoint(args.source)
    reinit = (frozenset(s.strip() for s in args.reinit.split(",") if s.strip())
              if args.reinit else frozenset({"output"}))
    acfg = AdaptConfig(strategy=args.strategy, train=cfg,
                       layers_reinit=reinit)
    out_dir = Path(values["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    result, ft_ckpt = adapt(source, train_utts, dev_utts, bigram, acfg)
    from .trainer import checkpoint_hash
    ckpt = checkpoint_from_stack(result.stack, seed=cfg.seed,
                                 step=result.final_step,
                                 provenance=checkpoint_hash(source))
    save_checkpoint(ckpt, out_dir / "adapted.btdn")
    save_checkpoint(ft_ckpt, out_dir / "fine_tuned.btdn")
    write_metrics(out_dir / "metrics.csv", result.metrics,
                  timestamp=not args.no_timestamp)
    print(f"wrote {out_dir / 'adapted.btdn'} (strategy {args.strategy})")
    return 0


def cmd_decode(args):
    ckpt = load_checkpoint(args.ckpt)
    stack = stack_from_checkpoint(ckpt)
    utts = load_split(args.data)
    graph = build_denominator_graph(load_bigram(args.bigram))
    hyps = decode_corpus(stack, utts, graph, args.k)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["utt_id", "labels", "log_score"])
        for hyp in hyps:
            writer.writerow([hyp.utt_id,
                             " ".join(str(l) for l in hyp.labels),
                             f"{hyp.log_score:.17g}"])
    print(f"wrote {len(hyps)} hypotheses to {args.out}")
    return 0


def cmd_score(args):
    refs = {u.utt_id: u.transcript for u in load_split(args.data)}
    rows = []
    with open(args.hyps, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            utt_id = rec["utt_id"]
            if utt_id not in refs:
                raise DataError(f"hypothesis for unknown utterance {utt_id}")
            hyp = tuple(int(x) for x in rec["labels"].split())
            rate, (subs, ins, dels) = label_error_rate(refs[utt_id], hyp)
            rows.append((utt_id, len(refs[utt_id]), subs + ins + dels, rate))
    report = score_report(rows)
    if args.out:
        Path(args.out).write_text(report)
        print(f"wrote {args.out}")
    else:
        sys.stdout.write(report)
    return 0


def cmd_inspect(args):
    ckpt = load_checkpoint(args.ckpt)
    stack = stack_from_checkpoint(ckpt)
    print(f"checkpoint: {args.ckpt}")
    print(f"version {ckpt.version}  step {ckpt.step}  seed {ckpt.seed}  "
          f"provenance {ckpt.provenance or '-'}")
    print(f"feat_dim {stack.feat_dim}  outputs {stack.num_outputs}  "
          f"layers {len(stack.layers)}")
    for layer in stack.layers:
        counts = layer.param_counts()
        extra = layer.bottleneck_params()
        print(f"layer{layer.index}  mode={layer.mode}  "
              f"in={layer.in_dim} spliced={layer.spliced_dim} "
              f"core={layer.core_in} hidden={layer.hidden}  "
              f"lam-params={counts.lam} w-params={counts.w} "
              f"z-params={counts.z}  bottleneck-params={extra} "
              f"bias={layer.bias.value.size}")
    print(f"output  w-params={stack.out_w.value.size} "
          f"bias={stack.out_bias.value.size}")
    return 0


def cmd_verify(args):
    ok, rows = verify_mod.run_all(quick=not args.full)
    for name, passed, detail in rows:
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
    if not ok:
        raise VerificationError(
            f"{sum(not p for _, p, _ in rows)} verification check(s) failed")
    print("all verification checks passed")
    return 0


# ---------------------------------------------------------------------------

def build_parser():
    parser = _Parser(prog="btdnn",
                     description="desk-scale sequence-discriminative trainer "
                                 "for uncertainty-aware time-delay networks")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--labels", type=int, default=3)
    p.add_argument("--feat-dim", type=int, default=5)
    p.add_argument("--separation", type=float, default=3.0)
    p.add_argument("--mean-duration", type=float, default=3.0)
    p.add_argument("--utts", type=int, default=200)
    p.add_argument("--min-frames", type=int, default=8)
    p.add_argument("--max-frames", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--shift-offset", type=float, default=0.0,
                   help="feature offset magnitude of the target domain")
    p.add_argument("--shift-duration", type=float, default=1.0,
                   help="duration scale of the target domain")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-timestamp", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="port a source checkpoint to a corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--strategy", choices=("fine_tune", "bayes_adapt"),
                   default="bayes_adapt")
    p.add_argument("--reinit", default="",
                   help="comma-separated blocks to reinitialize "
                        "(default: output)")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--no-timestamp", action="store_true")
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("decode", help="Viterbi-decode a corpus split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bigram", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--k", type=float, default=1.0)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("score", help="score hypotheses against references")
    p.add_argument("--hyps", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("inspect", help="print checkpoint metadata and "
                                       "per-layer parameter counts")
    p.add_argument("--ckpt", required=True)
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("verify", help="run the math verification suites")
    p.add_argument("--full", action="store_true",
                   help="check more parameters per mode")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericsError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return 4
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return 5
    except BtdnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
