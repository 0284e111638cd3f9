"""``dense-align`` command line: verify, pretrain, align, eval and sweep.

Exit codes: 0 success, 1 a verification check failed (or a sweep run
failed), 2 usage, configuration or I/O error, 3 training divergence.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import trainer as tr
from .config import RunConfig, apply_overrides, config_from_dict, load_config, parse_override, write_config
from .diffusion import DiffusionPolicy, PromptSet, default_prompts, evaluate_policy, make_schedule, pretrain_base
from .errors import ConfigError, IntegrityError, TrainingDivergenceError

log = logging.getLogger("dense_align")

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


# -- configuration -------------------------------------------------------------

FLAG_KEYS = {
    "seed": "seed",
    "output": "output_dir",
    "prompts_file": "prompts_file",
    "gamma": "loss.gamma",
    "C": "loss.C",
    "clip_eps": "loss.clip_eps",
    "n_step": "loss.n_step",
    "m_tr": "train.m_tr",
    "m_col": "train.m_col",
    "lr": "train.lr",
    "batch_size": "train.batch_size",
    "eval_every": "train.eval_every",
    "iters": "pretrain.iters",
}


def _add_config_flags(p):
    p.add_argument("--config", help="JSON run configuration (defaults apply to missing fields)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any field by dotted path, e.g. train.lr=3e-4")
    # named flags are only applied when given, so they sit above the file values
    opt = {"default": argparse.SUPPRESS}
    p.add_argument("--seed", type=int, **opt)
    p.add_argument("--output", help="output directory", **opt)
    p.add_argument("--prompts-file", dest="prompts_file", **opt)
    p.add_argument("--gamma", type=float, **opt)
    p.add_argument("--C", type=float, **opt)
    p.add_argument("--clip-eps", dest="clip_eps", type=_optional_float, help="a number or 'none'", **opt)
    p.add_argument("--n-step", dest="n_step", type=int, **opt)
    p.add_argument("--m-tr", dest="m_tr", type=int, **opt)
    p.add_argument("--m-col", dest="m_col", type=int, **opt)
    p.add_argument("--lr", type=float, **opt)
    p.add_argument("--batch-size", dest="batch_size", type=int, **opt)
    p.add_argument("--eval-every", dest="eval_every", type=int, **opt)
    p.add_argument("--iters", type=int, help="pretraining iterations", **opt)


def _optional_float(text):
    return None if text.lower() in ("none", "null") else float(text)


def resolve_config(args) -> RunConfig:
    """defaults < config file < --set overrides < named flags."""
    doc = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        load_config(path)  # surfaces decode errors with positions
        doc = json.loads(path.read_text())
    overrides = [parse_override(s) for s in args.set]
    overrides += [(key, getattr(args, flag)) for flag, key in FLAG_KEYS.items() if hasattr(args, flag)]
    return config_from_dict(apply_overrides(doc, overrides))


def _prompt_set(cfg: RunConfig, fallback: PromptSet | None = None) -> PromptSet:
    if cfg.prompts_file:
        path = Path(cfg.prompts_file)
        if not path.is_file():
            raise UsageError(f"prompt-set file not found: {path}")
        return PromptSet.load(path)
    return fallback if fallback is not None else default_prompts()


def _prompt_ids(cfg: RunConfig, prompts: PromptSet):
    ids = []
    for name in cfg.train.prompts:
        if name not in prompts.names:
            raise ConfigError([("train.prompts", f"unknown prompt {name!r}; known: {', '.join(prompts.names)}")])
        ids.append(prompts.index(name))
    return ids


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}")
    return out


def _load_base(path):
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"base checkpoint not found: {path}")
    return tr.load_policy(path)


def _fmt(x):
    return repr(float(x))


# -- subcommands ---------------------------------------------------------------

def cmd_verify(args) -> int:
    from .verify import run_suite

    if args.count < 1:
        raise UsageError("--count must be positive")
    report = run_suite(args.seed, args.count)
    print(report.table())
    if args.json:
        try:
            Path(args.json).write_text(report.to_json() + "\n")
        except OSError as exc:
            print(f"error: cannot write report to {args.json}: {exc}", file=sys.stderr)
            return EXIT_USAGE
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    prompts = _prompt_set(cfg)
    out = _out_dir(cfg)
    write_config(cfg, out / "config.json")
    s, m, p = cfg.schedule, cfg.model, cfg.pretrain
    schedule = make_schedule(s.n_steps, s.beta_start, s.beta_end)
    init = DiffusionPolicy.create(schedule, len(prompts), hidden=m.hidden, activation=m.activation,
                                  n_freqs=m.n_freqs, guidance=m.guidance,
                                  rng=np.random.default_rng([cfg.seed, 100]))
    result = pretrain_base(init, prompts, p.iters, np.random.default_rng([cfg.seed, 101]),
                           batch_size=p.batch_size, lr=p.lr, uncond_prob=p.uncond_prob)
    tr.save_policy(out / "base.ckpt", result.policy, prompts, seed=cfg.seed)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iter", "loss"])
    for i, loss in enumerate(result.losses):
        w.writerow([i, _fmt(loss)])
    (out / "pretrain_metrics.csv").write_text(buf.getvalue())
    ev = evaluate_policy(result.policy, init, prompts, cfg.eval_samples, rng=[cfg.seed, 102])
    print(f"wrote {out / 'base.ckpt'}")
    if result.losses:
        print(f"final denoising loss {np.mean(result.losses[-100:]):.4f}")
    print(f"mean score {ev.mean_score:.4f} (untrained {float(np.mean(ev.baseline_scores)):.4f}), "
          f"win rate vs untrained {ev.win_rate:.3f}")
    return EXIT_OK


def _run_alignment(cfg: RunConfig, base_path, out: Path, resume=None):
    base, stored_prompts, _ = _load_base(base_path)
    prompts = _prompt_set(cfg, stored_prompts)
    ids = _prompt_ids(cfg, prompts)
    tcfg = cfg.trainer_config(ids)
    state = None
    if resume:
        state = tr.load_train_state(resume, base, tcfg)
    ckpt_every = cfg.train.checkpoint_every or tcfg.eval_interval
    ckpt = out / "aligned.ckpt"
    holder = {}

    def on_step(st):
        holder["state"] = st
        if st.step % ckpt_every == 0 or st.step == tcfg.m_tr:
            tr.save_train_state(ckpt, base, st, tcfg)

    try:
        result = tr.train(base, prompts, tcfg, state=state, on_step=on_step)
    except TrainingDivergenceError:
        st = holder.get("state")
        if st is not None:
            tr.write_metrics_csv(out / "metrics.csv", st.metrics)
        raise
    if tcfg.m_tr == 0:
        tr.save_train_state(ckpt, base, result.state, tcfg)
    tr.write_metrics_csv(out / "metrics.csv", result.metrics)
    return result


def cmd_align(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(cfg)
    write_config(cfg, out / "config.json")
    try:
        result = _run_alignment(cfg, args.base, out, resume=args.resume)
    except TrainingDivergenceError as exc:
        print(f"error: training diverged at step {exc.step}: {exc}; last good checkpoint kept in {out}",
              file=sys.stderr)
        return EXIT_DIVERGED
    m = result.metrics
    if m:
        first, last = m[0], m[-1]
        print(f"final mean score {last.mean_score:.4f} (step 0: {first.mean_score:.4f}, "
              f"delta {last.mean_score - first.mean_score:+.4f})")
        print(f"final win rate vs reference {last.win_rate:.3f}")
    else:
        print("no training steps requested; adapter left at its initial value")
    print(f"wrote {out / 'metrics.csv'} and {out / 'aligned.ckpt'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    base, stored, _ = _load_base(args.base)
    prompts = stored or default_prompts()
    if args.prompts_file:
        prompts = PromptSet.load(args.prompts_file)
    policy = base
    if args.aligned:
        if not Path(args.aligned).is_file():
            raise UsageError(f"aligned checkpoint not found: {args.aligned}")
        policy = tr.load_aligned_policy(args.aligned, base)
    ids = None
    if args.prompts:
        unknown = [n for n in args.prompts if n not in prompts.names]
        if unknown:
            raise UsageError(f"unknown prompt(s) {', '.join(unknown)}; known: {', '.join(prompts.names)}")
        ids = [prompts.index(n) for n in args.prompts]
    ev = evaluate_policy(policy, base, prompts, args.n_samples, rng=[args.seed, 7], prompt_ids=ids)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["prompt", "n_samples", "mean_score", "baseline_mean_score", "win_rate"])
    shown = ids if ids is not None else range(len(prompts))
    for k, pid in enumerate(shown):
        w.writerow([prompts.names[pid], args.n_samples, _fmt(ev.scores[k].mean()),
                    _fmt(ev.baseline_scores[k].mean()), _fmt(_wr(ev.scores[k], ev.baseline_scores[k]))])
    text = buf.getvalue()
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as exc:
            raise UsageError(f"cannot write {args.out}: {exc}")
    print(text, end="")
    print(f"overall mean score {ev.mean_score:.4f}, win rate {ev.win_rate:.3f}")
    return EXIT_OK


def _wr(a, b):
    from .preference import win_rate
    return win_rate(a, b)


def _sweep_one(job):
    """Worker: one aligned run; returns (key, rows, error)."""
    key, cfg_doc, base_path, run_dir = job
    cfg = config_from_dict(cfg_doc)
    out = Path(run_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config(cfg, out / "config.json")
    try:
        result = _run_alignment(cfg, base_path, out)
    except Exception as exc:  # recorded, the sweep continues
        return key, [], f"{type(exc).__name__}: {exc}"
    rows = [(m.step, m.mean_score, m.win_rate) for m in result.metrics]
    return key, rows, None


def sweep_threads() -> int:
    raw = os.environ.get("DENSE_ALIGN_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DENSE_ALIGN_THREADS must be a positive integer, got {raw!r}")
    if n < 1:
        raise UsageError(f"DENSE_ALIGN_THREADS must be a positive integer, got {raw!r}")
    return n


def cmd_sweep(args) -> int:
    cfg = resolve_config(args)
    if args.gammas is not None:
        param, key, values = "gamma", "loss.gamma", args.gammas
    else:
        param, key, values = "C", "loss.C", args.Cs
    if not values:
        raise UsageError("need at least one sweep value")
    if len(set(values)) != len(values):
        raise UsageError(f"duplicate sweep values: {values}")
    if args.seeds < 1:
        raise UsageError("--seeds must be positive")
    if not Path(args.base).is_file():
        raise UsageError(f"base checkpoint not found: {args.base}")
    out = _out_dir(cfg)
    write_config(cfg, out / "config.json")
    base_doc = cfg.to_dict()
    jobs = []
    for v in values:
        for i in range(args.seeds):
            seed = cfg.seed + i
            run_dir = out / "runs" / f"{param}={v!r}" / f"seed={seed}"
            doc = apply_overrides(base_doc, [(key, v), ("seed", seed), ("output_dir", str(run_dir))])
            config_from_dict(doc)  # fail fast on invalid values
            jobs.append(((v, seed), doc, str(args.base), str(run_dir)))
    workers = min(sweep_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(j) for j in jobs]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["value", "seed", "step", "mean_score", "win_rate"])
    failures = []
    for (v, seed), rows, err in results:
        if err is not None:
            failures.append({"value": v, "seed": seed, "error": err})
            continue
        for step, score, wr in rows:
            w.writerow([repr(float(v)), seed, step, _fmt(score), _fmt(wr)])
    (out / "sweep.csv").write_text(buf.getvalue())
    (out / "failures.json").write_text(json.dumps(failures, indent=2) + "\n")
    print(f"{len(jobs) - len(failures)}/{len(jobs)} runs completed; wrote {out / 'sweep.csv'}")
    for f in failures:
        print(f"run {param}={f['value']} seed={f['seed']} failed: {f['error']}", file=sys.stderr)
    return EXIT_OK if not failures else EXIT_CHECK


# -- entry point ---------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dense-align", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the exact verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=100)
    p.add_argument("--json", help="write the report as JSON")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("pretrain", help="train the reference denoiser")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("align", help="preference-align a pretrained base")
    _add_config_flags(p)
    p.add_argument("--base", required=True, help="base checkpoint from 'pretrain'")
    p.add_argument("--resume", help="continue from an alignment checkpoint")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("eval", help="score a policy against the base")
    p.add_argument("--base", required=True)
    p.add_argument("--aligned", help="alignment checkpoint (omit to evaluate the base)")
    p.add_argument("--n-samples", dest="n_samples", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--prompts", nargs="+", help="prompt names (default: all)")
    p.add_argument("--prompts-file", dest="prompts_file")
    p.add_argument("--out", help="write the CSV here as well")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="aligned runs over gamma or C values and seeds")
    _add_config_flags(p)
    p.add_argument("--base", required=True)
    grp = p.add_mutually_exclusive_group(required=True)
    grp.add_argument("--gammas", nargs="+", type=float)
    grp.add_argument("--Cs", nargs="+", type=float)
    p.add_argument("--seeds", type=int, default=3, help="number of seeds per value")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print("error: invalid configuration", file=sys.stderr)
        for path, msg in exc.problems:
            print(f"  {path or '<root>'}: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except (UsageError, IntegrityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
