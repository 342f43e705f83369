"""Command-line entry point: ``salguard <command> [--config PATH] [--ns.key VALUE ...]``.

Exit codes: 0 success, 1 verification failure, 2 config error, 3 I/O or
checkpoint error.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import reference_checkpoint_path
from .checkpoint import load_checkpoint, save_checkpoint
from .config import KEYS, RunConfig, format_value, key_help, load_config
from .errors import CheckpointError, ConfigError, InsufficientDataError
from .harness.runs import RunSettings, run_corpus, sample_seed, score_runs, sweep
from .harness.stats import bin_analysis, stats_saliency
from .harness.task import gen_corpus, training_sequences
from .locore import LocoREConfig
from .model import ModelConfig, NanoModel, backward_attention
from .saliency import SaliencyScoreConfig, _atomic_write, build_stack, export_map, export_svg
from .sgrs import MODES, SGRSConfig, write_traces_jsonl

log = logging.getLogger("salguard")

COMMANDS = ("train", "decode", "map", "stats", "bins", "intervene", "sweep", "verify")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


# ---------------------------------------------------------------- config plumbing


def model_config(cfg: RunConfig) -> ModelConfig:
    return ModelConfig(**{k.split(".", 1)[1]: cfg[k] for k in KEYS if k.startswith("model.")})


def run_settings(cfg: RunConfig, mode: str | None = None) -> RunSettings:
    layers = cfg["saliency.target_layers"]
    score = SaliencyScoreConfig(target_layers=layers, mode=cfg["saliency.mode"])
    sgrs = SGRSConfig(
        top_k=cfg["sgrs.top_k"],
        rounds=cfg["sgrs.rounds"] or None,
        alpha=cfg["sgrs.alpha"],
        window=cfg["sgrs.window"],
        temperature=cfg["sgrs.temperature"],
        score_cfg=score,
        history_on_fallback=cfg["sgrs.history_on_fallback"],
        score_with_locore=cfg["sgrs.score_with_locore"],
    )
    locore = LocoREConfig(beta=cfg["locore.beta"], window=cfg["locore.window"], renormalize=cfg["locore.renormalize"])
    return RunSettings(
        mode=mode or cfg["harness.mode"],
        max_new_tokens=cfg["harness.max_new_tokens"],
        seed=cfg.seed,
        text_reading=cfg["layout.text_reading"],
        sgrs=sgrs,
        locore=locore,
        target_layers=tuple(layers),
    )


def _checked(fn):
    """Turn invalid values caught by dataclass validation into config errors."""
    try:
        return fn()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_model(cfg: RunConfig) -> NanoModel:
    path = cfg["harness.checkpoint"] or reference_checkpoint_path()
    return load_checkpoint(path)


def eval_corpus(cfg: RunConfig):
    return gen_corpus(cfg["harness.corpus_seed"], cfg["harness.samples"], cfg["harness.difficulty"])


# ---------------------------------------------------------------- output helpers


def csv_text(rows: list, columns: list, seed: int) -> str:
    buf = io.StringIO()
    buf.write(f"# seed={seed}\n")
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({c: r.get(c, "") for c in columns})
    return buf.getvalue()


def write_csv(path: Path, rows: list, columns: list, seed: int) -> Path:
    _atomic_write(path, csv_text(rows, columns, seed))
    return path


def write_json(path: Path, obj: dict, seed: int) -> Path:
    _atomic_write(path, json.dumps(dict(seed=seed, **obj), indent=2, sort_keys=True) + "\n")
    return path


def _fmt(x):
    return "" if x is None else repr(float(x))


# ---------------------------------------------------------------- commands


def cmd_train(cfg: RunConfig, out: Path) -> int:
    from .train import corpus_loss, train_toy

    mcfg = _checked(lambda: model_config(cfg))
    corpus = gen_corpus(cfg["train.corpus_seed"], cfg["train.samples"], cfg["harness.difficulty"])
    seqs, starts = training_sequences(corpus)
    init = NanoModel(mcfg)
    before = corpus_loss(init, seqs, starts)
    model = train_toy(
        seqs,
        starts,
        mcfg,
        epochs=cfg["train.epochs"],
        lr=cfg["train.lr"],
        batch_size=cfg["train.batch_size"],
        train_precision=cfg["train.precision"],
        log_every=1,
    )
    after = corpus_loss(model, seqs, starts)
    save_checkpoint(model, out / "model.nmdl")
    write_json(out / "train.json", {"loss_init": before, "loss_final": after, "epochs": cfg["train.epochs"]}, cfg.seed)
    print(f"loss {before:.4f} -> {after:.4f}; wrote {out / 'model.nmdl'}")
    return EXIT_OK


def cmd_decode(cfg: RunConfig, out: Path, mode: str | None = None, jobs: int = 1) -> int:
    settings = _checked(lambda: run_settings(cfg, mode))
    if settings.mode not in MODES:
        raise ConfigError(f"unknown mode {settings.mode!r}", key="harness.mode")
    model = load_model(cfg)
    samples = eval_corpus(cfg)
    runs = run_corpus(model, samples, settings, jobs=jobs)
    lines = [f"# seed={cfg.seed}\n"] + [f"{r.sample_id}\t{' '.join(map(str, r.tokens))}\n" for r in runs]
    tag = settings.mode.replace("+", "_")
    _atomic_write(out / f"decode_{tag}.txt", "".join(lines))
    traces = [dict(sample_id=r.sample_id, **t.to_dict()) for r in runs for t in r.traces]
    write_traces_jsonl(traces, out / f"traces_{tag}.jsonl")
    H, C, R, G, T, ms = score_runs(runs, samples)
    row = {"mode": settings.mode, "tokens": T, "total_ms": round(ms, 3), "ms_per_token": round(ms / T if T else 0.0, 4)}
    write_csv(out / f"latency_{tag}.csv", [row], list(row), cfg.seed)
    print(f"{settings.mode}: {len(runs)} samples, hallucination rate {H / max(C, 1):.4f}, recall {R / max(G, 1):.4f}")
    return EXIT_OK


def cmd_map(cfg: RunConfig, out: Path, tokens=None) -> int:
    model = load_model(cfg)
    layer = cfg["map.layer"]
    if not 0 <= layer < model.config.n_layers:
        raise ConfigError(f"map.layer {layer} outside 0..{model.config.n_layers - 1}", key="map.layer")
    if tokens is not None:
        seq, layout = list(tokens), None
    else:
        samples = eval_corpus(cfg)
        k = cfg["map.sample"]
        if not 0 <= k < len(samples):
            raise ConfigError(f"map.sample {k} outside the corpus", key="map.sample")
        s = samples[k]
        seq, layout = s.prefix + s.reference_caption(), s.layout
    n = len(seq)
    P = cfg["map.position"] if cfg["map.position"] >= 0 else n - 1
    if P >= n:
        raise ConfigError(f"map.position {P} outside a sequence of length {n}", key="map.position")
    logits, tape = model.forward(seq)
    target = seq[P + 1] if P + 1 < n else int(logits[P].argmax())
    stack = build_stack(backward_attention(tape, P, target), cfg["saliency.mode"])
    base = out / f"map_l{layer}_p{P}.csv"
    export_map(stack, layer, base, cfg["map.format"], layout)
    export_svg(stack[layer], base.with_suffix(".svg"), layout)
    print(f"wrote {base} ({n}x{n})")
    return EXIT_OK


def _labelled_runs(cfg, jobs):
    settings = _checked(lambda: run_settings(cfg, "baseline"))
    model = load_model(cfg)
    samples = eval_corpus(cfg)
    runs = run_corpus(model, samples, settings, with_labels=True, jobs=jobs)
    return model, samples, settings, runs


LABEL_COLUMNS = ["sample_id", "position", "token", "label", "saliency_prev", "saliency_prompt"]
BIN_COLUMNS = ["index", "lo", "hi", "count", "hallucinated", "rate", "empty"]


def _label_rows(runs):
    return [
        {
            "sample_id": l.sample_id,
            "position": l.position,
            "token": l.token,
            "label": l.label,
            "saliency_prev": _fmt(l.saliency_prev),
            "saliency_prompt": _fmt(l.saliency_prompt),
        }
        for r in runs
        for l in r.labels
    ]


def _bin_rows(bins):
    return [
        {"index": b.index, "lo": repr(b.lo), "hi": repr(b.hi), "count": b.count, "hallucinated": b.hallucinated, "rate": _fmt(b.rate), "empty": int(b.empty)}
        for b in bins
    ]


def cmd_stats(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    _, _, _, runs = _labelled_runs(cfg, jobs)
    labels = [l for r in runs for l in r.labels]
    rep = stats_saliency(labels)
    write_csv(out / "labels.csv", _label_rows(runs), LABEL_COLUMNS, cfg.seed)
    rows = [dict(label=k, **vars(v)) for k, v in sorted(rep.classes.items())]
    write_csv(out / "stats.csv", rows, ["label", "mean", "std", "count"], cfg.seed)
    write_json(out / "stats.json", rep.to_dict(), cfg.seed)
    c, h = rep.classes["correct"], rep.classes["hallucinated"]
    print(f"correct {c.mean:.4f}+-{c.std:.4f} (n={c.count})  hallucinated {h.mean:.4f}+-{h.std:.4f} (n={h.count})  welch p={rep.welch_p:.3g}")
    return EXIT_OK


def cmd_bins(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    _, _, _, runs = _labelled_runs(cfg, jobs)
    bins, rho, p = bin_analysis([l for r in runs for l in r.labels])
    write_csv(out / "bins.csv", _bin_rows(bins), BIN_COLUMNS, cfg.seed)
    write_json(out / "bins.json", {"bins": _bin_rows(bins), "spearman_rho": rho, "spearman_p": p}, cfg.seed)
    print(f"spearman rho {rho}")
    return EXIT_OK


def cmd_intervene(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    from .harness.intervention import intervention

    model, samples, settings, runs = _labelled_runs(cfg, jobs)
    by_id = {s.sample_id: s for s in samples}
    rep = intervention(
        model,
        by_id,
        {r.sample_id: r.tokens for r in runs},
        {r.sample_id: r.labels for r in runs},
        factors=cfg["harness.factors"],
        max_new_tokens=settings.max_new_tokens,
        seeds={s.sample_id: sample_seed(settings.seed, s.sample_id) for s in samples},
        quantile=cfg["harness.quantile"],
    )
    rows = [{"r": row.r, "hallucinated": row.hallucinated, "content": row.content, "rate": repr(row.rate), "changed": row.changed} for row in rep.rows]
    write_csv(out / "intervention.csv", rows, ["r", "hallucinated", "content", "rate", "changed"], cfg.seed)
    write_json(out / "intervention.json", {"threshold": rep.threshold, "targets": len(rep.targets), "rows": rows}, cfg.seed)
    for row in rep.rows:
        print(f"r={row.r:g}  rate={row.rate:.4f}  ({row.hallucinated}/{row.content})")
    return EXIT_OK


SWEEP_COLUMNS = ["mode", "alpha", "beta", "renormalize", "hallucination_rate", "recall", "hallucinated", "content", "tokens", "ms_per_token"]


def cmd_sweep(cfg: RunConfig, out: Path, jobs: int = 1) -> int:
    settings = _checked(lambda: run_settings(cfg))
    model = load_model(cfg)
    samples = eval_corpus(cfg)
    cells = _checked(lambda: sweep(model, samples, cfg["harness.alphas"], cfg["harness.betas"], cfg["harness.modes"], settings, jobs=jobs))
    rows = [c.row() for c in cells]
    write_csv(out / "sweep.csv", rows, SWEEP_COLUMNS, cfg.seed)
    write_json(out / "sweep.json", {"cells": rows}, cfg.seed)
    for r in rows:
        print(f"{r['mode']:<12} alpha={r['alpha']!s:<5} beta={r['beta']!s:<5} hall={r['hallucination_rate']:.4f} recall={r['recall']:.4f} ms/tok={r['ms_per_token']}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, out: Path) -> int:
    from .verify import run_suite

    model = load_model(cfg)
    samples = gen_corpus(cfg["harness.corpus_seed"], 6, cfg["harness.difficulty"])
    checks = run_suite(model, samples)
    text = "".join(c.line() + "\n" for c in checks)
    _atomic_write(out / "verify.txt", f"# seed={cfg.seed}\n" + text)
    sys.stdout.write(text)
    failed = [c for c in checks if not c.ok]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


# ---------------------------------------------------------------- argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="salguard",
        description="Attention-saliency diagnostics and decoding interventions on a toy captioning model.",
        epilog="config keys (set in --config files as key = value, or override with --key VALUE):\n" + key_help(),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, default=0, help="decode seed, written into every report (default 0)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for per-sample loops (default 1)")
    p.add_argument("--out", default="runs", help="output directory (default runs)")
    p.add_argument("--mode", choices=MODES, help="decode mode (decode command)")
    p.add_argument("--max-new", type=int, help="decode budget per sample")
    p.add_argument("--layer", type=int, help="layer to export (map command)")
    p.add_argument("--position", type=int, help="query row of the loss (map command)")
    p.add_argument("--tokens", help="comma-separated token ids to map instead of a corpus sample")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def split_overrides(extra: list) -> list:
    """``['--locore.beta', '0', '--sgrs.alpha=0.3']`` -> ``[('locore.beta', '0'), ('sgrs.alpha', '0.3')]``."""
    pairs, i = [], 0
    while i < len(extra):
        arg = extra[i]
        if not arg.startswith("--") or "." not in arg:
            raise ConfigError(f"unrecognized argument {arg!r}", key=arg)
        key = arg[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"{key}: missing value", key=key)
            value = extra[i + 1]
            i += 2
        pairs.append((key, value))
    return pairs


def main(argv=None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = split_overrides(extra)
        if args.max_new is not None:
            overrides.append(("harness.max_new_tokens", str(args.max_new)))
        if args.layer is not None:
            overrides.append(("map.layer", str(args.layer)))
        if args.position is not None:
            overrides.append(("map.position", str(args.position)))
        cfg = load_config(args.config, overrides)
        cfg.seed = args.seed
        tokens = None
        if args.tokens is not None:
            try:
                tokens = [int(t) for t in args.tokens.split(",") if t.strip()]
            except ValueError:
                raise ConfigError(f"--tokens: cannot parse {args.tokens!r}", key="tokens") from None
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cmd = args.command
        if cmd == "train":
            return cmd_train(cfg, out)
        if cmd == "decode":
            return cmd_decode(cfg, out, args.mode, args.jobs)
        if cmd == "map":
            return cmd_map(cfg, out, tokens)
        if cmd == "stats":
            return cmd_stats(cfg, out, args.jobs)
        if cmd == "bins":
            return cmd_bins(cfg, out, args.jobs)
        if cmd == "intervene":
            return cmd_intervene(cfg, out, args.jobs)
        if cmd == "sweep":
            return cmd_sweep(cfg, out, args.jobs)
        return cmd_verify(cfg, out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, CheckpointError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except InsufficientDataError as exc:
        print(f"insufficient data: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
