"""Command-line entry point: ``mesopt <subcommand> [options]``.

Subcommands: generate, simulate, grad, optimize, benchmark, evaluate.
Every run directory receives ``config.resolved.json``; JSON artifacts are
written with sorted keys and carry the build hash, and contain no
timestamps, so repeated runs with the same config and seed are
byte-identical (benchmark timings excepted).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .bom import GeneratorSpec, generate, network_stats
from .errors import ConfigError, MesoptError
from .stochastic import derive_seed, sample_path

log = logging.getLogger("mesopt")


@lru_cache(maxsize=1)
def build_hash() -> str:
    """Digest of the package sources; identifies the build in every output."""
    root = Path(__file__).resolve().parent
    h = hashlib.sha256()
    for f in sorted(root.rglob("*")):
        if f.suffix in (".py", ".json") and "__pycache__" not in f.parts:
            h.update(f.relative_to(root).as_posix().encode())
            h.update(f.read_bytes())
    return h.hexdigest()[:12]


def dump_json(path: Path, obj: dict) -> None:
    obj = dict(obj)
    obj.setdefault("build", build_hash())
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, allow_nan=False) + "\n")


def _out_dir(args, cfg: dict | None, name: str) -> Path:
    out = args.out or (cfg or {}).get("out") or f"runs/{name}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(args) -> dict:
    cfg = cfgmod.load(args.config)
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    if args.workers is not None:
        cfg["workers"] = int(args.workers)
    return cfg


def _write_config(out: Path, cfg: dict) -> None:
    dump_json(out / "config.resolved.json", cfg)


def _policy(args, cfg: dict, inst) -> np.ndarray:
    from .optimizer import default_start

    src = getattr(args, "policy", None) or cfg.get("policy")
    if src is None:
        return default_start(inst.net, inst.models)
    if isinstance(src, list):
        S = np.asarray(src, dtype=np.float64)
    elif isinstance(src, dict) and src.get("fixture") == "gs":
        from .fixtures import kodak

        S = kodak().gs_policy
    else:
        path = src["file"] if isinstance(src, dict) else src
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read policy {path}: {exc}") from None
        S = np.asarray(data["S"] if isinstance(data, dict) else data, dtype=np.float64)
    if S.shape != (inst.n,):
        raise ConfigError(f"policy has {S.size} entries, network has {inst.n} items")
    return S


def _first_path(cfg: dict, inst):
    seed = cfgmod.seed_list(cfg["seeds"])[0]
    return sample_path(inst.models.demand, inst.models.lead, inst.T, inst.n, seed)


def _init(cfg: dict):
    return None if cfg.get("init") is None else np.asarray(cfg["init"], dtype=np.float64)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.spec:
        try:
            spec_dict = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read generator spec {args.spec}: {exc}") from None
    else:
        spec_dict = {"n": args.n, "k": args.k, "topology": args.topology, "layers": args.layers}
    spec = GeneratorSpec.from_dict(spec_dict)
    seed = 0 if args.seed is None else args.seed
    net = generate(spec, seed)
    out = Path(args.out or "network.json")
    if out.suffix != ".json":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "network.json"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)
    net.save(out)
    st = network_stats(net) if net.n >= 2 else None
    print(json.dumps({"file": str(out), "n": net.n, "m": net.m, "n_l": net.n_l,
                      "k_avg": st.k_avg if st else 0.0}, sort_keys=True))
    return 0


def cmd_simulate(args) -> int:
    from .simulator import simulate, summarize

    cfg = _load_config(args)
    out = _out_dir(args, cfg, "simulate")
    _write_config(out, cfg)
    inst = cfgmod.build_instance(cfg)
    S = _policy(args, cfg, inst)
    seeds = cfgmod.seed_list(cfg["seeds"])
    totals = []
    for k, seed in enumerate(seeds):
        path = sample_path(inst.models.demand, inst.models.lead, inst.T, inst.n, seed)
        traj = simulate(inst.net, path, S, inst.costs, _init(cfg))
        if k == 0:
            traj.write_csv(out / "trajectory.csv", inst.names)
        totals.append(traj.total_cost)
    summary = summarize(totals, seeds)
    dump_json(out / "summary.json", {"policy": S.tolist(), **summary.to_dict()})
    print(f"total_cost {summary.mean:.10g}")
    return 0


def cmd_grad(args) -> int:
    from .bp import grad_bp, grad_fd, gradient_rel_diff, gradient_scale
    from .ipa import grad_ipa

    cfg = _load_config(args)
    out = _out_dir(args, cfg, "grad")
    _write_config(out, cfg)
    inst = cfgmod.build_instance(cfg)
    S = _policy(args, cfg, inst)
    path = _first_path(cfg, inst)
    init = _init(cfg)
    if args.check:
        a = grad_ipa(inst.net, path, S, inst.costs, init, keep_trajectory=False)
        b = grad_bp(inst.net, path, S, inst.costs, init)
        diff = gradient_rel_diff(a.grad, b.grad, gradient_scale(inst.costs, inst.T))
        dump_json(out / "check.json", {"ipa": a.to_dict(), "bp": b.to_dict(), "max_rel_diff": diff})
        print(f"max_rel_diff {diff:.3e}")
        return 0
    if args.method == "ipa":
        res = grad_ipa(inst.net, path, S, inst.costs, init, keep_trajectory=False)
    elif args.method == "bp":
        res = grad_bp(inst.net, path, S, inst.costs, init)
    else:
        res = grad_fd(inst.net, path, S, inst.costs, init, step=args.step)
        log.info("fd: %d simulate calls", res.sim_calls)
    body = res.to_dict()
    if res.sim_calls is not None:
        body["sim_calls"] = res.sim_calls
    dump_json(out / f"grad_{args.method}.json", body)
    print(f"method {args.method} total_cost {body['total_cost']} grad_norm {float(np.linalg.norm(res.grad)):.10g}")
    return 0


def cmd_optimize(args) -> int:
    from .optimizer import (
        OptConfig,
        compare_policies,
        epoch_line,
        read_epochs,
        run_method,
        two_stage,
        BatchOracle,
        default_start,
        resolve_step,
    )
    from .runner import ReplicationPool

    cfg = _load_config(args)
    if "optimizer" not in cfg:
        raise ConfigError("optimize needs an 'optimizer' block in the config")
    out = _out_dir(args, cfg, "optimize")
    _write_config(out, cfg)
    inst = cfgmod.build_instance(cfg)
    oc = OptConfig.from_dict(cfg["optimizer"])
    seed = int(cfg["seed"])
    init = _init(cfg)
    logs = {"stage1": out / "stage1.jsonl", "stage2": out / "stage2.jsonl", "single": out / "epochs.jsonl"}
    if not args.resume:
        for p in logs.values():
            p.unlink(missing_ok=True)
    hist = {k: read_epochs(p) for k, p in logs.items()}
    for k, p in logs.items():
        # rewrite without any partial trailing line before appending
        if hist[k]:
            p.write_text("".join(epoch_line(e) for e in hist[k]))

    def on_epoch(entry: dict) -> None:
        with open(logs[entry["stage"]], "a") as fh:
            fh.write(epoch_line(entry))

    workers = cfg.get("workers")
    with ReplicationPool(workers if workers is not None else 1) as pool:
        mapper = pool.map if pool.workers > 1 else None
        S0 = _policy(args, cfg, inst) if (args.policy or cfg.get("policy")) else None
        if args.single_stage:
            oracle = BatchOracle(inst.net, inst.models, inst.costs, inst.T, oc.batch, init, mapper)
            start = default_start(inst.net, inst.models) if S0 is None else S0
            t0 = resolve_step(oc, oracle, start, seed)
            rec = run_method(oc.stage1, oracle, start, oc, seed, t0, stage="single",
                             history=hist["single"], on_epoch=on_epoch)
            body = rec.final_policy()
            body.update(step0=t0)
            dump_json(out / "policy.json", body)
            print(f"epochs {len(rec.epochs)} nonzeros {body['nonzeros']} stop {rec.stop_reason}")
            return 0
        res = two_stage(inst.net, inst.models, inst.costs, inst.T, oc, seed, S0=S0, init=init,
                        mapper=mapper, history1=hist["stage1"], history2=hist["stage2"], on_epoch=on_epoch)
        cmp = compare_policies(inst.net, inst.models, inst.costs, inst.T, res.stage1.S, res.stage2.S,
                               cfgmod.seed_list(cfg["eval_seeds"]), init, mapper)
    dump_json(out / "stage1_policy.json", res.stage1.final_policy())
    dump_json(out / "policy.json", {
        **res.stage2.final_policy(),
        "support": [int(i) for i in np.flatnonzero(res.support)],
        "eps_zero": res.eps_zero,
        "step0": res.step,
    })
    dump_json(out / "comparison.json", cmp)
    print(
        f"stage1_cost {cmp['stage1_cost']:.10g} stage2_cost {cmp['stage2_cost']:.10g} "
        f"improvement_pct {cmp['improvement_pct']:.4f} support {int(res.support.sum())}"
    )
    return 0


def cmd_benchmark(args) -> int:
    from .benchmark import VARIANTS, run_benchmark

    variants = args.variants or list(VARIANTS)
    out = _out_dir(args, None, "benchmark")
    try:
        report = run_benchmark(args.sizes, variants, reps=args.reps, T=args.T, k=args.k,
                               seed=args.seed or 0, workers=args.workers, log=log.info)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    dump_json(out / "benchmark.json", report.to_dict())
    with open(out / "benchmark.csv", "w", newline="") as fh:
        csv.writer(fh).writerows(report.to_csv_rows())
    for v in variants:
        slope = report.slope(v)
        sizes, med = report.medians(v)
        cells = " ".join(f"{n}:{m if isinstance(m, str) else f'{m:.4g}'}" for n, m in zip(sizes, med))
        print(f"{v:>10s} slope {'n/a' if slope is None else f'{slope:.3f}'}  {cells}")
    return 0


def cmd_evaluate(args) -> int:
    from .simulator import evaluate_policy
    from .runner import ReplicationPool

    cfg = _load_config(args)
    out = _out_dir(args, cfg, "evaluate")
    _write_config(out, cfg)
    inst = cfgmod.build_instance(cfg)
    S = _policy(args, cfg, inst)
    seeds = cfgmod.seed_list(cfg["eval_seeds"])
    workers = cfg.get("workers")
    with ReplicationPool(workers if workers is not None else 1) as pool:
        res = evaluate_policy(inst.net, inst.models, S, inst.costs, inst.T, seeds, _init(cfg),
                              mapper=pool.map if pool.workers > 1 else None)
    dump_json(out / "evaluation.json", {"policy": S.tolist(), **res.to_dict()})
    print(f"mean_cost {res.mean:.10g} stderr {res.stderr:.6g} seeds {len(seeds)}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--workers", type=int, default=None, help="worker processes (default: cores - 1)")
    common.add_argument("--out", default=None, help="output directory (file for generate)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mesopt", description=__doc__.splitlines()[0], parents=[common])
    p.add_argument("--version", action="version", version=f"mesopt {__version__} build {build_hash()}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="generate a random BOM network")
    g.add_argument("--spec", help="generator spec JSON {n, k, topology, layers, weight_max}")
    g.add_argument("--n", type=int, default=100)
    g.add_argument("--k", type=float, default=10.0)
    g.add_argument("--topology", choices=["tree", "dag", "shared"], default="dag")
    g.add_argument("--layers", type=int, default=5)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("simulate", parents=[common], help="simulate a policy")
    s.add_argument("config")
    s.add_argument("--policy", help="policy JSON (list or {S: [...]})")
    s.set_defaults(func=cmd_simulate)

    d = sub.add_parser("grad", parents=[common], help="sample-path gradient")
    d.add_argument("config")
    d.add_argument("--method", choices=["ipa", "bp", "fd"], default="bp")
    d.add_argument("--check", action="store_true", help="run bp and ipa and print their max relative difference")
    d.add_argument("--step", type=float, default=None, help="finite-difference step")
    d.add_argument("--policy")
    d.set_defaults(func=cmd_grad)

    o = sub.add_parser("optimize", parents=[common], help="two-stage optimization")
    o.add_argument("config")
    o.add_argument("--single-stage", action="store_true", help="run only the configured stage-1 method")
    o.add_argument("--resume", action="store_true", help="continue from the epoch logs in --out")
    o.add_argument("--policy", help="start point")
    o.set_defaults(func=cmd_optimize)

    b = sub.add_parser("benchmark", parents=[common], help="scaling benchmark")
    b.add_argument("--sizes", type=int, nargs="+", default=[1000, 2000, 4000])
    b.add_argument("--variants", nargs="+", default=None)
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--T", type=int, default=100)
    b.add_argument("--k", type=float, default=10.0)
    b.set_defaults(func=cmd_benchmark)

    e = sub.add_parser("evaluate", parents=[common], help="common-random-number policy evaluation")
    e.add_argument("config")
    e.add_argument("--policy")
    e.set_defaults(func=cmd_evaluate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return args.func(args)
    except MesoptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except KeyboardInterrupt:
        print("interrupted; epoch logs up to the last completed epoch are kept", file=sys.stderr)
        return 130


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
