"""Command-line driver: generate, compare, bench, analyze, init-config.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from typing import Optional, Sequence

import numpy as np

from tarac import analytics
from tarac.bench import run_bench
from tarac.config import SCHEMA, ConfigError, RunConfig, load_config, template
from tarac.decoding import GenerationResult, build_prompt, compare_runs, generate
from tarac.model import WeightFormatError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3

# named flag -> dotted key
FLAG_KEYS = {
    "alpha": "tarac.alpha",
    "beta": "tarac.beta",
    "layers": "tarac.layers",
    "seed": "model.seed",
    "max_new_tokens": "run.max_new_tokens",
    "image_tokens": "layout.n_image_tokens",
    "prompt_tokens": "layout.n_prompt_tokens",
    "trace_out": "run.trace_out",
    "update_rule": "tarac.update_rule",
    "head_reducer": "tarac.head_reducer",
    "renorm": "tarac.renorm_mode",
    "repeats": "bench.repeats",
}


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--layers", metavar="LO:HI")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-new-tokens", type=int)
    p.add_argument("--image-tokens", type=int)
    p.add_argument("--prompt-tokens", type=int)
    p.add_argument("--trace-out", metavar="PATH")
    p.add_argument("--update-rule", choices=["ema", "literal", "two-step-literal"])
    p.add_argument("--head-reducer", choices=["max", "mean"])
    p.add_argument("--renorm", choices=["rowsum", "softmax", "softmax-diagnostic"])
    p.add_argument("--repeats", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tarac",
        description="Accumulated image-attention injection on a toy KV-cache transformer.",
        epilog="Any config key can also be set with --<dotted.key> VALUE, e.g. --model.n_layers 4.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("generate", "run one generation and write its trace"),
        ("compare", "paired baseline vs intervention run"),
        ("bench", "TPOT ratio and memory overhead"),
    ]:
        _add_run_flags(sub.add_parser(name, help=help_))
    a = sub.add_parser("analyze", help="columnar plot data from a trace")
    a.add_argument("--trace", required=True, metavar="PATH")
    a.add_argument("--labels", metavar="PATH", help="CSV of step,word,class,multi_token")
    a.add_argument("--run-id", help="restrict series/densities to one run")
    a.add_argument("--baseline-run-id", default="baseline", help="run to subtract for the profile difference")
    a.add_argument("--bandwidth", default="scott", help="'scott' or a fixed positive bandwidth")
    a.add_argument("--all-occurrences", action="store_true", help="skip first-occurrence filtering")
    a.add_argument("--grid", type=int, default=256, help="density grid points")
    sub.add_parser("init-config", help="print a commented config template")
    return parser


def _split_overrides(extra: Sequence[str]) -> dict[str, str]:
    out, i = {}, 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(tok, "unexpected argument")
        key, eq, value = tok[2:].partition("=")
        key = key.replace("-", "_")
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        if not eq:
            if i + 1 >= len(extra):
                raise ConfigError(key, "missing value")
            value = extra[i + 1]
            i += 1
        out[key] = value
        i += 1
    return out


def _load(args, extra) -> RunConfig:
    overrides = _split_overrides(extra)
    for flag, key in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = value
    return load_config(args.config, overrides)


def _header(cfg: RunConfig, prompt_len: int) -> dict:
    return {
        "alpha": cfg["tarac.alpha"],
        "beta": cfg["tarac.beta"],
        "layers": cfg["tarac.layers"],
        "tarac_enabled": cfg["tarac.enabled"],
        "seed": cfg["model.seed"],
        "n_image": cfg["layout.n_image_tokens"],
        "n_prompt": cfg["layout.n_prompt_tokens"],
        "image_offset": cfg["layout.image_offset"],
        "prompt_len": prompt_len,
    }


def _record_layers(cfg: RunConfig, n_layers: int):
    if cfg["run.record_layers"] == "all":
        return "all"
    lo, hi = (int(x) for x in cfg["tarac.layers"].split(":"))
    return range(lo, min(hi, n_layers))


def _summary(res: GenerationResult) -> dict:
    return {
        "n_tokens": len(res.tokens),
        "stop_reason": res.stop_reason,
        "mean_image_mass": res.mean_mass(),
        "tpot_ms": res.tpot() * 1e3,
        "tokens": res.tokens,
    }


def cmd_generate(cfg: RunConfig) -> dict:
    weights = cfg.weights()
    layout = cfg.layout()
    prompt = build_prompt(weights.config, layout, cfg["run.seed"])
    res = generate(
        weights,
        layout,
        prompt,
        cfg.tarac(),
        cfg["run.max_new_tokens"],
        cfg.sampler(),
        record_layers=_record_layers(cfg, weights.config.n_layers),
        record_profile=cfg["run.record_profile"],
    )
    run_id = "tarac" if cfg["tarac.enabled"] else "baseline"
    if cfg["run.trace_out"]:
        with analytics.TraceWriter(cfg["run.trace_out"], _header(cfg, len(prompt))) as tw:
            tw.write(res.records, run_id)
    if cfg["run.tokens_out"]:
        with open(cfg["run.tokens_out"], "w") as fh:
            fh.write(" ".join(map(str, res.tokens)) + "\n")
    out = _summary(res)
    out["run_id"] = run_id
    out["uplift"] = res.within_run_uplift()
    out["n_records"] = len(res.records)
    return out


def cmd_compare(cfg: RunConfig) -> dict:
    weights = cfg.weights()
    layout = cfg.layout()
    prompt = build_prompt(weights.config, layout, cfg["run.seed"])
    rep = compare_runs(
        weights,
        layout,
        prompt,
        cfg.tarac(force=True),
        cfg["run.max_new_tokens"],
        cfg.sampler(),
        record_profile=cfg["run.record_profile"],
        record_layers=_record_layers(cfg, weights.config.n_layers),
    )
    if cfg["run.trace_out"]:
        with analytics.TraceWriter(cfg["run.trace_out"], _header(cfg, len(prompt))) as tw:
            tw.write(rep.baseline.records, "baseline")
            tw.write(rep.tarac.records, "tarac")
    return {
        "first_divergence": rep.first_divergence,
        "mean_image_mass_baseline": rep.mean_mass_baseline,
        "mean_image_mass_tarac": rep.mean_mass_tarac,
        "uplift": rep.uplift,
        "baseline": _summary(rep.baseline),
        "tarac": _summary(rep.tarac),
    }


def cmd_bench(cfg: RunConfig) -> dict:
    weights = cfg.weights()
    layout = cfg.layout()
    prompt = build_prompt(weights.config, layout, cfg["run.seed"])
    rep = run_bench(
        weights,
        layout,
        prompt,
        cfg.tarac(),
        cfg["run.max_new_tokens"],
        cfg["bench.repeats"],
        cfg.sampler(),
    )
    return rep.as_dict()


def _table(title: str, columns: dict[str, np.ndarray]) -> str:
    names = list(columns)
    lines = [f"# {title}", "\t".join(names)]
    n = max(len(c) for c in columns.values())
    for i in range(n):
        lines.append("\t".join(f"{columns[k][i]:.8g}" if i < len(columns[k]) else "" for k in names))
    return "\n".join(lines)


def _density_table(title, dens: dict, which: str, n: int) -> Optional[str]:
    kdes = {c: getattr(d, which) for c, d in dens.items() if getattr(d, which) is not None}
    if not kdes:
        return None
    lo = min(k.samples.min() - 6 * k.h for k in kdes.values())
    hi = max(k.samples.max() + 6 * k.h for k in kdes.values())
    x = np.linspace(lo, hi, n)
    cols = {"x": x}
    for c in analytics.CLASSES:
        cols[c] = kdes[c](x) if c in kdes else np.zeros(n)
    return _table(f"{title} (n_correct={dens['correct'].n}, n_hallucinated={dens['hallucinated'].n})", cols)


def cmd_analyze(args) -> str:
    header, records = analytics.read_trace(args.trace)
    run_ids = sorted({r.run_id for r in records})
    target = args.run_id or ("tarac" if "tarac" in run_ids else (run_ids[0] if run_ids else None))
    chosen = [r for r in records if r.run_id == target]
    series = analytics.visual_attention_series(chosen)
    blocks = [
        f"# header {json.dumps(header)}",
        _table(f"visual_attention run={target}", {"step": np.arange(1, len(series) + 1), "attention": series}),
    ]
    if any(r.profile is not None for r in chosen):
        cols = {"token_index": np.arange(0), "mean_attention": analytics.image_token_profile(chosen)}
        cols["token_index"] = np.arange(len(cols["mean_attention"]))
        base = [r for r in records if r.run_id == args.baseline_run_id]
        if target != args.baseline_run_id and any(r.profile is not None for r in base):
            cols["baseline"] = analytics.image_token_profile(base)
            cols["difference"] = cols["mean_attention"] - cols["baseline"]
        blocks.append(_table(f"image_token_profile run={target}", cols))
    if args.labels:
        bw = args.bandwidth if args.bandwidth == "scott" else float(args.bandwidth)
        dens = analytics.class_attention_densities(
            series, analytics.read_labels(args.labels), filter=not args.all_occurrences, bandwidth=bw
        )
        for which, title in (("attention", "attention_density"), ("position", "position_density")):
            t = _density_table(title, dens, which, args.grid)
            if t:
                blocks.append(t)
    return "\n\n".join(blocks) + "\n"


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    try:
        if args.command == "init-config":
            if extra:
                parser.error(f"unrecognized arguments: {' '.join(extra)}")
            sys.stdout.write(template())
            return EXIT_OK
        if args.command == "analyze":
            if extra:
                parser.error(f"unrecognized arguments: {' '.join(extra)}")
            sys.stdout.write(cmd_analyze(args))
            return EXIT_OK
        cfg = _load(args, extra)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    try:
        out = {"generate": cmd_generate, "compare": cmd_compare, "bench": cmd_bench}[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except WeightFormatError as exc:
        print(f"config error: model.weights: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    out["config"] = cfg.effective()
    print(json.dumps(out, indent=2, default=float))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
