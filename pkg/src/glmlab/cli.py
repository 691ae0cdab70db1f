"""Command-line harness: ``glmlab <subcommand> [options]``.

Exit codes: 0 success, 1 contract error (message tagged with the module),
2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import corruption as cr
from . import pipeplan as pp
from . import quant as ql
from . import trainer as tr
from .model import GLMConfig, ModelParams, init_parameters
from .tensor_io import FormatError

SEED_ENV = "GLMLAB_SEED"

# defaults sized for a laptop core; every field can be overridden
TOY_MODEL = GLMConfig(num_layers=2, hidden=64, num_heads=4, vocab=256, dropout=0.1)
TOY_TRAIN = tr.TrainConfig(peak_lr=3e-3, min_lr=3e-4, start_lr=1e-6, lr_warmup_fraction=0.05,
                           batch_start=4, batch_end=8, batch_increment=2,
                           batch_ramp_fraction=0.1)
TOY_CORRUPTION = cr.CorruptionConfig(short_window=32, seq_length=128)
TOY_QUANT = {"bits": 4, "scheme": ql.ABSMAX, "group_axis": ql.ROW}
DEFAULT_CLUSTER = {"gpu_memory_gb": 40.0, "t_f": 1, "t_b": 1, "memory_cap_fraction": 0.8,
                   "tp_overhead_per_rank": 0.01, "hop_latency": 0}

SECTIONS = {
    "corruption": TOY_CORRUPTION,
    "model": TOY_MODEL,
    "train": TOY_TRAIN,
}


class UsageError(Exception):
    pass


class ContractFailure(Exception):
    def __init__(self, module: str, message: str):
        super().__init__(f"[{module}] {message}")
        self.module = module


# -- configuration ----------------------------------------------------------


def _coerce(raw, kind: str):
    if not isinstance(raw, str):
        return raw
    if kind == "bool":
        if raw.lower() in ("1", "true", "yes"):
            return True
        if raw.lower() in ("0", "false", "no"):
            return False
        raise UsageError(f"not a boolean: {raw!r}")
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError as e:
        raise UsageError(str(e)) from None
    return raw


def _field_types(section: str) -> dict[str, str]:
    if section == "quant":
        return {"bits": "int", "scheme": "str", "group_axis": "str"}
    if section == "cluster":
        return {k: "float" for k in DEFAULT_CLUSTER}
    return {f.name: str(f.type) for f in dataclasses.fields(SECTIONS[section])}


def _defaults(section: str) -> dict:
    if section == "quant":
        return dict(TOY_QUANT)
    if section == "cluster":
        return dict(DEFAULT_CLUSTER)
    return dataclasses.asdict(SECTIONS[section])


def effective_config(config_path: str | None, overrides: Sequence[str]) -> dict[str, dict]:
    """Defaults, then the JSON config file, then ``section.key=value`` overrides."""
    cfg = {s: _defaults(s) for s in (*SECTIONS, "quant", "cluster")}
    layers: list[tuple[str, str, object]] = []
    if config_path:
        try:
            data = json.loads(Path(config_path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise UsageError(f"cannot read config {config_path}: {e}") from None
        if not isinstance(data, dict):
            raise UsageError("config file must hold a JSON object of sections")
        for section, values in data.items():
            if not isinstance(values, dict):
                raise UsageError(f"config section {section!r} must be an object")
            layers += [(section, k, v) for k, v in values.items()]
    for item in overrides:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        layers.append((section, name, raw))
    for section, name, value in layers:
        if section not in cfg:
            raise UsageError(f"unknown config section {section!r}")
        types = _field_types(section)
        if name not in types:
            raise UsageError(f"unknown key {section}.{name}")
        cfg[section][name] = _coerce(value, types[name])
    return cfg


def _build(section: str, cfg: dict):
    cls = type(SECTIONS[section])
    try:
        return cls(**cfg[section])
    except (TypeError, ValueError) as e:
        raise ContractFailure(_MODULE_OF[section], str(e)) from None


_MODULE_OF = {"corruption": "corruption", "model": "glmmodel", "train": "trainer"}


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is None:
        raise UsageError(f"this subcommand is stochastic: pass --seed or set {SEED_ENV}")
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None


# -- output -----------------------------------------------------------------


class Emitter:
    """Writes records (JSON lines) and/or tables (TSV) to stdout and the output directory."""

    def __init__(self, out: Path | None, emit: str, stream=None):
        self.out = out
        self.emit = emit
        self.stream = stream if stream is not None else sys.stdout
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path | None:
        return None if self.out is None else self.out / name

    def _write(self, name: str, text: str):
        self.stream.write(text)
        if self.out is not None:
            (self.out / name).write_text(text)

    def records(self, name: str, rows: Sequence[dict]):
        if self.emit in ("records", "both"):
            text = "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in rows)
            self._write(f"{name}.jsonl", text)

    def table(self, name: str, header: Sequence[str], rows: Sequence[Sequence]):
        if self.emit in ("table", "both"):
            lines = ["\t".join(header)] + ["\t".join(_cell(c) for c in row) for row in rows]
            self._write(f"{name}.tsv", "\n".join(lines) + "\n")

    def config(self, cfg: dict):
        if self.out is not None:
            (self.out / "effective_config.json").write_text(
                json.dumps(cfg, sort_keys=True, indent=1, default=str) + "\n")


def _cell(c) -> str:
    if isinstance(c, float):
        return f"{c:.6g}"
    return str(c)


# -- subcommands ------------------------------------------------------------


def _corpus(args, cfg: dict, rng) -> tuple[list[list[int]], cr.ToyTokenizer]:
    lines = cr.read_corpus(args.corpus) if args.corpus else cr.synthetic_corpus(args.docs, rng)
    tok = cr.ToyTokenizer.fit(lines, cfg["model"]["vocab"])
    return [tok.encode(line) for line in lines], tok


def cmd_sample_corpus(args, cfg, em: Emitter):
    seed = _seed(args)
    ccfg = _build("corruption", cfg)
    cfg["run"] = {"seed": seed, "count": args.count}
    rng_corpus, rng_samples = (np.random.default_rng(s)
                               for s in np.random.SeedSequence(seed).spawn(2))
    docs, _ = _corpus(args, cfg, rng_corpus)
    source = cr.TokenSource(docs)
    samples = []
    for _ in range(args.count):
        if cr.draw_kind(ccfg, rng_samples) == cr.GMASK_KIND:
            samples.append(cr.make_gmask_sample(source.take(ccfg.short_window - 2), ccfg,
                                                rng_samples, window=ccfg.short_window))
        else:
            samples.append(cr.make_short_sample(source.take(ccfg.short_window), ccfg, rng_samples))
    em.records("samples", [s.to_record() for s in samples])
    em.table("samples", ["index", "kind", "length", "spans", "targets"],
             [(i, s.kind, len(s), len(s.spans), int(s.target_mask.sum()))
              for i, s in enumerate(samples)])
    em.config(cfg)


def cmd_train_toy(args, cfg, em: Emitter):
    seed = _seed(args)
    cfg["train"]["seed"] = seed
    if em.out is not None and not cfg["train"]["checkpoint_interval"]:
        cfg["train"]["checkpoint_interval"] = args.steps
    mcfg, tcfg, ccfg = _build("model", cfg), _build("train", cfg), _build("corruption", cfg)
    cfg["run"] = {"seed": seed, "steps": args.steps, "docs": args.docs}
    ss = np.random.SeedSequence(seed).spawn(2)
    docs, tok = _corpus(args, cfg, np.random.default_rng(ss[0]))
    if tok.vocab_size > mcfg.vocab:
        raise ContractFailure("glmmodel", "tokenizer vocabulary exceeds model vocab")
    params = init_parameters(mcfg, np.random.default_rng(ss[1]))
    ckpt = em.path("checkpoints")
    try:
        records = tr.train(docs, params, tcfg, ccfg, args.steps, checkpoint_dir=ckpt)
    except tr.TrainingDiverged as e:
        raise ContractFailure("trainer", str(e)) from None
    em.records("metrics", [dataclasses.asdict(r) for r in records])
    em.table("metrics", ["step", "loss", "lr", "batch", "global_norm", "spike", "loss_scale"],
             [(r.step, r.loss, r.lr, r.batch, r.global_norm, r.spike, r.loss_scale)
              for r in records])
    em.config(cfg)


def _load_or_init(args, cfg) -> ModelParams:
    if args.checkpoint:
        try:
            return ModelParams.load(args.checkpoint)
        except (OSError, FormatError, ValueError) as e:
            raise ContractFailure("glmmodel", f"cannot load checkpoint: {e}") from None
    seed = _seed(args)
    cfg["run"] = {"seed": seed, "init": "random"}
    return init_parameters(_build("model", cfg), np.random.default_rng(seed))


def cmd_quantize(args, cfg, em: Emitter):
    params = _load_or_init(args, cfg)
    q = cfg["quant"]
    if q["bits"] not in (4, 8) or q["scheme"] not in (ql.ABSMAX, ql.ZEROPOINT) \
            or q["group_axis"] not in (ql.ROW, ql.COLUMN, ql.WHOLE):
        raise ContractFailure("quantlab", f"invalid quantization policy {q}")
    qmodel = ql.quantize_model(params, ql.QuantPolicy(q["bits"], q["scheme"], q["group_axis"]))
    if em.out is not None:
        qmodel.save(em.out / "quantized")
    rows = []
    for name, qm in qmodel.quantized.items():
        w = params[name].data
        rows.append({"name": name, "bits": qm.bits, "scheme": qm.scheme,
                     "axis": qm.group_axis, "shape": list(qm.shape),
                     "mse": float(np.mean((ql.dequantize(qm) - w) ** 2)),
                     "payload_bytes": qm.payload_bytes(),
                     "degenerate_groups": len(qm.degenerate_groups)})
    em.records("quantization", rows + [{"name": "__memory__", **qmodel.memory_report()}])
    em.table("quantization", ["name", "bits", "scheme", "axis", "mse", "payload_bytes"],
             [(r["name"], r["bits"], r["scheme"], r["axis"], r["mse"], r["payload_bytes"])
              for r in rows])
    em.config(cfg)


def cmd_analyze_weights(args, cfg, em: Emitter):
    params = _load_or_init(args, cfg)
    rows, hist = [], []
    for name, t in params:
        if t.data.ndim < 2:
            continue
        rep = ql.weight_distribution_report(t.data, args.outlier_k, args.bins)
        rows.append({"name": name, "min": rep.minimum, "max": rep.maximum,
                     "variance": rep.variance, "skewness": rep.skewness,
                     "kurtosis": rep.kurtosis, "outlier_share": rep.outlier_share})
        hist += [(name, a, b, c) for a, b, c in rep.histogram_table()]
    em.records("weights", rows)
    em.table("histogram", ["name", "bin_left", "bin_right", "count"], hist)
    em.config(cfg)


def _cluster(args, cfg) -> pp.ClusterSpec:
    c = cfg["cluster"]
    try:
        return pp.ClusterSpec(args.nodes, args.gpus_per_node, c["gpu_memory_gb"],
                              c["t_f"], c["t_b"], c["memory_cap_fraction"],
                              c["tp_overhead_per_rank"], c["hop_latency"])
    except pp.PlanError as e:
        raise ContractFailure("pipeplan", str(e)) from None


def cmd_plan_parallel(args, cfg, em: Emitter):
    cluster = _cluster(args, cfg)
    model = pp.ModelSpec(args.layers)
    plans = pp.enumerate_plans(cluster, model, pp.BatchSpec(args.global_batch, args.micro_batch),
                               allow_cross_node=args.allow_cross_node)
    cfg["run"] = {k: getattr(args, k) for k in
                  ("nodes", "gpus_per_node", "global_batch", "micro_batch", "layers")}
    if not plans:
        raise ContractFailure("pipeplan", "no feasible plan; rejected: " +
                              ", ".join(f"{k} x{v}" for k, v in sorted(plans.rejected.items())))
    top = plans[: args.top]
    em.records("plans", [p.as_record() for p in top])
    em.table("plans", ["rank", "t", "p", "d", "m", "bubble", "memory_gb", "cost"],
             [(i + 1, p.t, p.p, p.d, p.m, pp.humanize_ratio(p.bubble),
               round(p.peak_memory_gb, 2), round(p.step_cost, 4)) for i, p in enumerate(top)])
    em.config(cfg)


def cmd_simulate_pipeline(args, cfg, em: Emitter):
    cluster = _cluster(argparse.Namespace(nodes=1, gpus_per_node=args.p), cfg)
    if args.m < 1 or args.p < 1:
        raise ContractFailure("pipeplan", "need p >= 1 and m >= 1")
    sched = pp.simulate_schedule((args.p, args.m), cluster, args.policy)
    problems = pp.validate_schedule(sched)
    if problems:
        raise ContractFailure("pipeplan", "; ".join(problems[:3]))
    cfg["run"] = {"p": args.p, "m": args.m, "policy": args.policy}
    em.records("schedule", [{"policy": sched.policy, "p": sched.p, "m": sched.m,
                             "makespan": float(sched.makespan),
                             "bubble_fraction": float(sched.bubble_fraction),
                             "peak_inflight": sched.peak_inflight}])
    em.table("trace", ["stage", "phase", "mb", "start", "end"], sched.trace_table())
    em.config(cfg)


def cmd_carbon(args, cfg, em: Emitter):
    try:
        tons = pp.carbon_estimate(args.mwh, args.grid)
    except ValueError as e:
        raise ContractFailure("pipeplan", str(e)) from None
    cfg["run"] = {"mwh": args.mwh, "grid": args.grid}
    em.records("carbon", [{"energy_mwh": args.mwh, "grid_kg_per_kwh": args.grid,
                           "tons_co2": round(tons, 2)}])
    em.table("carbon", ["energy_mwh", "grid_kg_per_kwh", "tons_co2"],
             [(args.mwh, args.grid, f"{tons:.2f}")])
    em.config(cfg)


# -- parser -----------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--out", type=Path, help="output directory for artifacts")
    common.add_argument("--emit", choices=("records", "table", "both"), default="both")
    common.add_argument("--config", help="JSON file of {section: {key: value}} overrides")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE")
    seeded = _Parser(add_help=False)
    seeded.add_argument("--seed", type=int, help=f"RNG seed (fallback: ${SEED_ENV})")

    parser = _Parser(prog="glmlab", description="Desk-scale GLM training/inference laboratory.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("sample-corpus", parents=[common, seeded],
                       help="draw corrupted samples from a corpus")
    p.add_argument("--corpus", help="UTF-8 text, one document per line (default: synthetic)")
    p.add_argument("--docs", type=int, default=200, help="synthetic document count")
    p.add_argument("--count", type=int, default=16)
    p.set_defaults(func=cmd_sample_corpus)

    p = sub.add_parser("train-toy", parents=[common, seeded], help="train a toy GLM")
    p.add_argument("--corpus")
    p.add_argument("--docs", type=int, default=200)
    p.add_argument("--steps", type=int, default=200)
    p.set_defaults(func=cmd_train_toy)

    for name, func, helptext in (("quantize", cmd_quantize, "quantize linear weights"),
                                 ("analyze-weights", cmd_analyze_weights,
                                  "weight distribution report")):
        p = sub.add_parser(name, parents=[common, seeded], help=helptext)
        p.add_argument("--checkpoint", help="checkpoint directory (default: fresh init)")
        if name == "analyze-weights":
            p.add_argument("--outlier-k", type=float, default=3.0)
            p.add_argument("--bins", type=int, default=64)
        p.set_defaults(func=func)

    p = sub.add_parser("plan-parallel", parents=[common], help="rank 3D-parallel plans")
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--gpus-per-node", type=int, required=True)
    p.add_argument("--global-batch", type=int, required=True)
    p.add_argument("--micro-batch", type=int, default=1)
    p.add_argument("--layers", type=int, default=70)
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--allow-cross-node", action="store_true")
    p.set_defaults(func=cmd_plan_parallel)

    p = sub.add_parser("simulate-pipeline", parents=[common], help="simulate a pipeline schedule")
    p.add_argument("--p", type=int, required=True, help="pipeline stages")
    p.add_argument("--m", type=int, required=True, help="micro-batches")
    p.add_argument("--policy", choices=pp.POLICIES, default=pp.PIPEDREAM_FLUSH)
    p.set_defaults(func=cmd_simulate_pipeline)

    p = sub.add_parser("carbon", parents=[common], help="CO2 from energy and grid intensity")
    p.add_argument("--mwh", type=float, required=True)
    p.add_argument("--grid", type=float, required=True, help="kg CO2 per kWh")
    p.set_defaults(func=cmd_carbon)
    return parser


def run(argv: Sequence[str] | None = None, stdout=None, stderr=None) -> int:
    stderr = stderr if stderr is not None else sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = effective_config(args.config, args.overrides)
        em = Emitter(args.out, args.emit, stdout)
        func: Callable = args.func
        func(args, cfg, em)
    except UsageError as e:
        stderr.write(f"glmlab: usage error: {e}\n")
        return 2
    except ContractFailure as e:
        stderr.write(f"glmlab: error {e}\n")
        return 1
    except (cr.ContractError, ql.PackingError) as e:
        tag = "corruption" if isinstance(e, cr.ContractError) else "quantlab"
        stderr.write(f"glmlab: error [{tag}] {e}\n")
        return 1
    return 0


def main() -> None:
    sys.exit(run())
