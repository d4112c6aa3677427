"""Command-line entry point: ``rotshield <command> ...``.

Exit status is 0 on success, 1 on invalid input or a failed check, 2 on an
internal error.
"""
from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import attacks, harness
from .attacks import AttackOutcome, apply_flips, spfa_column_attack, spfa_locate
from .config import ConfigError, RunConfig
from .container import ContainerError, load_model, save_model, write_json
from .defense import DefenseConfig, build_rotation, calibrate, fuse_weights, relative_linf_deviation, verify_lossless
from .linalg import CompactWY
from .model import build_toy_model, forward, layer_inputs, probe_inputs
from .outliers import ChannelStats


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--ber", type=float)
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int, dest="base_seed", help="base seed for attack trials")
    p.add_argument("--workers", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--n-flips", type=int, dest="n_flips")
    p.add_argument("--policy", choices=("saliency", "magnitude"))


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    _overrides(common)
    parser = _Parser(prog="rotshield", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("init-config", help="write the default configuration")
    p.add_argument("out", type=Path)

    p = sub.add_parser("build-model", parents=[common], help="build the seeded toy model")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("calibrate", parents=[common], help="per-layer outlier statistics")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("protect", parents=[common], help="rotate and fuse every layer")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--stats", type=Path)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("attack", parents=[common], help="run an attack and append outcomes as JSON lines")
    p.add_argument("kind", choices=("random", "greedy", "spfa"))
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--protected", type=Path, help="spfa: also run the column attack on this model")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", parents=[common], help="paired baseline/protected Monte Carlo")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--protected", type=Path, required=True)
    p.add_argument("--out-dir", type=Path, required=True)

    p = sub.add_parser("sweep-alpha", parents=[common], help="reflector count and post-attack metric per alpha")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--alphas", type=float, nargs="+")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("verify", parents=[common], help="check that protection is lossless")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--protected", type=Path, required=True)
    p.add_argument("--tol", type=float)
    p.add_argument("--out", type=Path)
    return parser


def _config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    keys = ("ber", "trials", "base_seed", "workers", "alpha", "n_flips", "policy")
    return cfg.updated(**{k: getattr(args, k, None) for k in keys})


def _calib(cfg: RunConfig, d: int) -> np.ndarray:
    return probe_inputs(d, cfg.calib_batches * cfg.calib_tokens, cfg.calib_seed)


def _probe(cfg: RunConfig, d: int) -> np.ndarray:
    return probe_inputs(d, cfg.probe_tokens, cfg.probe_seed)


def _append_jsonl(path: Path, records) -> None:
    with open(path, "a") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def _count_lines(path: Path) -> int:
    if not path.exists():
        return 0
    return sum(1 for line in path.read_text().splitlines() if line.strip())


def cmd_init_config(args) -> int:
    write_json(args.out, RunConfig().to_dict())
    return 0


def cmd_build_model(args) -> int:
    cfg = _config(args)
    model = build_toy_model(cfg.dims, cfg.model_seed, cfg.outliers, cfg.dtype, cfg.scale_mode)
    save_model(args.out, model)
    print(f"wrote {args.out} ({model.n_bits} stored weight bits)")
    return 0


def _stats_doc(stats: dict, cfg: DefenseConfig) -> dict:
    return {"alpha": cfg.alpha, "m_max": cfg.m_max,
            "layers": {str(k): s.to_dict() for k, s in stats.items()}}


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    model, _ = load_model(args.model)
    if model.reflector_count:
        raise ConfigError("model: calibration expects an unprotected model")
    inputs = layer_inputs(model, _calib(cfg, model.dims[0]))
    stats = calibrate(dict(enumerate(inputs)), cfg.defense())
    write_json(args.out, _stats_doc(stats, cfg.defense()))
    for k, s in stats.items():
        print(f"layer{k}: tau={s.tau:.4g} outliers={list(s.outliers)}")
    return 0


def cmd_protect(args) -> int:
    cfg = _config(args)
    model, _ = load_model(args.model)
    dcfg = cfg.defense()
    if args.stats:
        doc = json.loads(Path(args.stats).read_text())
        try:
            stats = {int(k): ChannelStats.from_dict(v) for k, v in doc["layers"].items()}
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"stats: malformed stats document ({e})") from e
        layers = []
        for lid, layer in enumerate(model.layers):
            if lid not in stats:
                raise ConfigError(f"stats: no statistics for layer {lid}")
            if stats[lid].dim != layer.d_in:
                raise ConfigError(f"stats: layer {lid} has {stats[lid].dim} channels, expected {layer.d_in}")
            wy = CompactWY.empty(layer.d_in) if lid in cfg.opt_out else build_rotation(stats[lid])
            layers.append(fuse_weights(layer.fused_weights, wy, dcfg, lid))
        protected = model.with_layers(layers)
    else:
        protected, _ = harness.protect_model(model, _calib(cfg, model.dims[0]), dcfg, cfg.opt_out)
    save_model(args.out, protected, {"defense": {"alpha": dcfg.alpha, "m_max": dcfg.m_max,
                                                 "requantize_fused": dcfg.requantize_fused}})
    print(f"wrote {args.out} with {protected.reflector_count} reflectors")
    return 0


def cmd_verify(args) -> int:
    cfg = _config(args)
    base, _ = load_model(args.model)
    prot, _ = load_model(args.protected)
    if base.dims != prot.dims:
        raise ConfigError(f"protected: dims {prot.dims} do not match model dims {base.dims}")
    probe = _probe(cfg, base.dims[0])
    layers = []
    passed = True
    for lid, (x, b, p) in enumerate(zip(layer_inputs(base, probe), base.layers, prot.layers)):
        tol = args.tol if args.tol is not None else cfg.lossless_tol
        rep = verify_lossless(b.fused_weights, p, x, tol)
        layers.append({"layer": lid, "reflectors": p.m} | rep.to_dict())
        passed &= rep.passed
    doc = {"passed": passed, "layers": layers,
           "model_deviation": relative_linf_deviation(forward(prot, probe), forward(base, probe))}
    if args.out:
        write_json(args.out, doc)
    print(json.dumps(doc, sort_keys=True))
    return 0 if passed else 1


def cmd_attack(args) -> int:
    cfg = _config(args)
    model, _ = load_model(args.model)
    probe = _probe(cfg, model.dims[0])
    rule = cfg.failure_rule()
    bench = harness.Bench(model, probe)
    if args.kind == "random":
        done = _count_lines(args.out)
        for i in range(done, cfg.trials):
            o = attacks.random_ber_attack(model, cfg.ber, cfg.base_seed + i, bench.metric, rule, bench.clean_metric)
            _append_jsonl(args.out, [{"trial": i} | o.to_dict()])
        print(f"{cfg.trials - done} trials appended to {args.out}")
    elif args.kind == "greedy":
        o = harness.greedy_attack(model, probe, cfg.n_flips, cfg.policy, cfg.top_k, rule)
        _append_jsonl(args.out, [o.to_dict()])
        print(f"metric {o.metric_before:.4g} -> {o.metric_after:.4g}, steps to failure: {o.extra['steps_to_failure']}")
    else:
        return _spfa(args, cfg, model, bench, rule)
    return 0


def _spfa(args, cfg, model, bench, rule) -> int:
    """Scan seeds for a failing random attack and bisect it to one fatal flip.

    Failing seeds whose failure needs several flips together are logged as
    non-isolable and the scan continues.
    """
    clean = bench.clean_metric
    records = []
    res = None
    for i in range(cfg.trials):
        seed = cfg.base_seed + i
        o = attacks.random_ber_attack(model, cfg.ber, seed, bench.metric, rule, clean)
        if not o.failed:
            continue
        res = spfa_locate(model, o.flips, bench.metric, rule, clean)
        if res.isolable:
            break
        records.append({"kind": "spfa_locate", "seed": seed, "located": None} | res.to_dict())
    if res is None or not res.isolable:
        records.append({"kind": "spfa_locate", "located": None, "seeds_tried": cfg.trials})
        _append_jsonl(args.out, records)
        print("no isolable fatal flip found")
        return 0
    loc = res.location
    after = bench.metric(apply_flips(model, [loc]))
    located = AttackOutcome([loc], clean, after, rule.failed(after, clean), 1, seed, "spfa_locate",
                            extra=res.to_dict() | {"source_flips": len(o.flips)})
    records.append(located.to_dict())
    print(f"located layer{loc.layer_id}[{loc.row}, {loc.col}] bit {loc.bit} "
          f"in {res.evaluations} evaluations (seed {seed})")
    if args.protected:
        prot, _ = load_model(args.protected)
        if prot.dims != model.dims:
            raise ConfigError(f"protected: dims {prot.dims} do not match model dims {model.dims}")
        pbench = harness.Bench(prot, bench.probe)
        delta = attacks.flip_delta(model.layers[loc.layer_id].fused_weights, loc)

        def metric(layer):
            return pbench.metric(prot.with_weights(loc.layer_id, layer.fused_weights))

        _, col = spfa_column_attack(prot.layers[loc.layer_id], loc.row, loc.col, delta, metric, rule)
        records.append(col.to_dict())
        print(f"column attack on protected model: {col.hamming_cost} bit flips, "
              f"metric {col.metric_after:.4g}")
    _append_jsonl(args.out, records)
    return 0


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    base, _ = load_model(args.model)
    prot, _ = load_model(args.protected)
    probe = _probe(cfg, base.dims[0])
    rule = cfg.failure_rule()
    args.out_dir.mkdir(parents=True, exist_ok=True)
    summary = {"ber": cfg.ber, "trials": cfg.trials, "base_seed": cfg.base_seed}
    for arm, model in (("baseline", base), ("protected", prot)):
        rep = harness.monte_carlo(model, probe, cfg.ber, cfg.trials, cfg.base_seed, rule, cfg.workers)
        summary[arm] = rep.summary()
        rep.write_csv(args.out_dir / f"{arm}_trials.csv")
        path = args.out_dir / f"{arm}_trials.jsonl"
        path.unlink(missing_ok=True)
        _append_jsonl(path, [{"trial": i} | o.to_dict() for i, o in enumerate(rep.outcomes)])
        print(f"{arm}: fail_rate={rep.fail_rate:.4f} mean={rep.mean_metric:.4g} max={rep.max_metric:.4g}")
    write_json(args.out_dir / "report.json", summary)
    return 0


def cmd_sweep_alpha(args) -> int:
    cfg = _config(args)
    model, _ = load_model(args.model)
    alphas = args.alphas or cfg.alphas
    rows = harness.alpha_sweep(model, _calib(cfg, model.dims[0]), _probe(cfg, model.dims[0]), alphas,
                               cfg.n_flips, cfg.policy, cfg.top_k, cfg.defense(), cfg.failure_rule())
    with open(args.out, "w") as fh:
        fh.write("alpha,reflectors,post_attack_metric,steps_to_failure\n")
        for r in rows:
            stf = "" if r["steps_to_failure"] is None else r["steps_to_failure"]
            fh.write(f"{r['alpha']!r},{r['reflectors']},{r['post_attack_metric']!r},{stf}\n")
    for r in rows:
        print(r)
    return 0


COMMANDS = {
    "init-config": cmd_init_config,
    "build-model": cmd_build_model,
    "calibrate": cmd_calibrate,
    "protect": cmd_protect,
    "verify": cmd_verify,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "sweep-alpha": cmd_sweep_alpha,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, ContainerError, FileNotFoundError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
