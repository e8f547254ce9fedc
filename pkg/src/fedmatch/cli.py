"""Command-line entry point.

Subcommands: ``simulate`` (write a synthetic federation with ground truth),
``match`` (match a federation or a set of net files and write the assignment
plus the fused global model), ``pipeline`` (end-to-end train/fuse/evaluate),
``sweep-lambda`` (pipeline across a lambda grid), and ``fold-bn`` (absorb
batch-norm blocks of a layered model file).

Exit codes: 0 ok, 2 config error, 3 degenerate instance, 4 shape mismatch,
5 internal invariant violation. Configuration comes from a JSON file plus
flag overrides; environment variables are never consulted.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

import numpy as np

from . import modelio
from .errors import (
    ConfigError,
    DegenerateInstanceError,
    EXIT_CONFIG,
    EXIT_DEGENERATE,
    EXIT_INVARIANT,
    EXIT_OK,
    EXIT_SHAPE,
    FedmatchError,
    InternalInvariantError,
    ShapeMismatchError,
)
from .generative import generate_federation, log_size_ratio, recovery_metrics
from .layerwise import fold_bn
from .matching import LocalModelNeurons, run_matching
from .modelio import (
    AssignmentDoc,
    AtomsDoc,
    LayeredModelDoc,
    NetDoc,
    RunConfig,
    load_run_config,
)
from .network import net_of, neurons_of
from .pipeline import DEFAULT_LAMBDA_GRID, run_pipeline, run_sweep

_OVERRIDE_FLAGS = (
    "algorithm",
    "lam",
    "gamma0",
    "sigma0_sq",
    "sigma_s_sq",
    "sigma_sq",
    "seed",
    "max_passes",
    "client_order",
)


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--algorithm", choices=("pfnm", "nafi"))
    parser.add_argument("--lambda", dest="lam", type=float)
    parser.add_argument("--gamma0", type=float)
    parser.add_argument("--sigma0-sq", dest="sigma0_sq", type=float)
    parser.add_argument("--sigma-s-sq", dest="sigma_s_sq", type=float)
    parser.add_argument("--sigma-sq", dest="sigma_sq", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--max-passes", dest="max_passes", type=int)
    parser.add_argument("--client-order", dest="client_order", choices=("fixed", "shuffle"))


def _load_config(args) -> RunConfig:
    config = load_run_config(args.config) if args.config else RunConfig()
    overrides = {
        name: getattr(args, name)
        for name in _OVERRIDE_FLAGS
        if getattr(args, name, None) is not None
    }
    if overrides:
        config = dataclasses.replace(config, **overrides)
    try:
        config.validate()
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return config


def cmd_simulate(args) -> int:
    config = _load_config(args)
    fed = generate_federation(
        gamma0=config.gamma0,
        S=config.S,
        dim=config.dim,
        sigma0_sq=config.sigma0_sq,
        sigma_s_sq=config.sigma_s_sq,
        seed=config.seed,
        selection_mode=config.selection_mode,
        bernoulli_p=config.bernoulli_p,
        n_atoms=config.j_true,
    )
    modelio.write_federation(args.out, fed)
    per_client = " ".join(str(l.count) for l in fed.locals)
    print(f"wrote {args.out}: {fed.n_atoms} true atoms, per-client counts {per_client}")
    return EXIT_OK


def cmd_match(args) -> int:
    config = _load_config(args)
    docs = [modelio.read_model(path) for path in args.inputs]
    federation = None
    if len(docs) == 1 and not isinstance(docs[0], (NetDoc,)):
        from .generative import SyntheticFederation

        if isinstance(docs[0], SyntheticFederation):
            federation = docs[0]
        else:
            raise ShapeMismatchError("match expects net files or one federation file")
    elif not all(isinstance(d, NetDoc) for d in docs):
        raise ShapeMismatchError("match expects net files or one federation file")

    if federation is not None:
        locals_ = federation.locals
        # The federation records its own generator parameters; use them for
        # the prior unless explicitly overridden on the command line.
        if args.gamma0 is None:
            config = dataclasses.replace(config, gamma0=federation.gamma0)
        if args.sigma0_sq is None:
            config = dataclasses.replace(config, sigma0_sq=federation.sigma0_sq)
        dims = (None, None)
    else:
        nets = []
        for i, doc in enumerate(docs):
            cid = doc.client_id if doc.client_id is not None else i
            nets.append((cid, doc.net))
        d = nets[0][1].input_dim
        k = nets[0][1].output_dim
        for _, net in nets:
            if net.input_dim != d or net.output_dim != k:
                raise ShapeMismatchError("nets disagree on input/output dimensions")
        locals_ = [
            LocalModelNeurons(client_id=cid, neurons=neurons_of(net), sigma_sq=config.sigma_sq)
            for cid, net in nets
        ]
        dims = (d, k)

    mc = config.match_config()
    state, global_matrix = run_matching(locals_, mc)

    total_neurons = sum(l.count for l in locals_)
    metrics: dict[str, float] = {
        "j_inferred": state.atom_count,
        "log_size_ratio": log_size_ratio(state.atom_count, total_neurons),
    }
    if federation is not None:
        rec = recovery_metrics(federation, state)
        metrics.update(
            ari=rec.ari,
            exact_match=rec.exact_match,
            j_true=rec.j_true,
            atom_count_error=rec.atom_count_error,
            mean_atom_distance=rec.mean_atom_distance,
        )

    doc = AssignmentDoc(
        algorithm=mc.algorithm,
        lam=mc.lam,
        gamma0=mc.gamma0,
        sigma0_sq=mc.sigma0_sq,
        sigma_sq=float(config.sigma_sq),
        seed=mc.seed,
        max_passes=mc.max_passes,
        client_order=mc.client_order,
        n_atoms=state.atom_count,
        per_client={cid: assign for cid, assign in state.per_client.items()},
        metrics=metrics,
    )
    modelio.write_assignment(f"{args.out}.assignment.txt", doc)
    if dims[0] is not None:
        fused = net_of(global_matrix, dims[0], dims[1], config.activation)
        modelio.write_net(f"{args.out}.global.txt", NetDoc(net=fused))
    else:
        modelio.write_atoms(f"{args.out}.global.txt", global_matrix)
    for name, value in metrics.items():
        print(f"{name} {modelio.fmt(value)}")
    return EXIT_OK


def cmd_pipeline(args) -> int:
    config = _load_config(args)
    metrics = run_pipeline(config)
    if args.out:
        modelio.write_metrics(args.out, metrics)
    for name, value in metrics.items():
        print(f"{name} {modelio.fmt(value)}")
    return EXIT_OK


def cmd_sweep_lambda(args) -> int:
    config = _load_config(args)
    if args.grid:
        try:
            grid = [float(tok) for tok in args.grid.split(",") if tok.strip()]
        except ValueError as exc:
            raise ConfigError(f"bad --grid value: {exc}") from exc
        if any(g <= 0 for g in grid):
            raise ConfigError("lambda grid values must be positive")
    else:
        grid = list(DEFAULT_LAMBDA_GRID)
    columns, rows = run_sweep(config, grid)
    modelio.write_table(f"{args.out}.txt", columns, rows)
    modelio.write_table_csv(f"{args.out}.csv", columns, rows)
    print(" ".join(columns))
    for row in rows:
        print(" ".join(modelio.fmt(v) for v in row))
    return EXIT_OK


def cmd_fold_bn(args) -> int:
    doc = modelio.read_model(args.model)
    if not isinstance(doc, LayeredModelDoc):
        raise ShapeMismatchError("fold-bn expects a layered model file")
    if not doc.bn:
        print("warning: model has no bn blocks; writing it unchanged", file=sys.stderr)
        modelio.write_layered(args.out, doc)
        return EXIT_OK
    folded_layers = []
    folded_biases = []
    max_dev = 0.0
    rng = np.random.default_rng(0)
    for n, w in enumerate(doc.weights.layers):
        b = doc.biases[n]
        if n in doc.bn:
            bn = doc.bn[n]
            fw, fb = fold_bn(w, b, bn)
            # Report the worst disagreement between folded affine output and
            # the affine-then-normalize reference on random probes.
            x = rng.standard_normal((100, w.shape[1]))
            ref = bn.gamma * ((x @ w.T + b) - bn.mu) / np.sqrt(bn.sigma_sq + bn.eps) + bn.beta
            dev = float(np.abs(x @ fw.T + fb - ref).max())
            max_dev = max(max_dev, dev)
            folded_layers.append(fw)
            folded_biases.append(fb)
        else:
            folded_layers.append(w)
            folded_biases.append(b)
    out_doc = LayeredModelDoc(
        weights=type(doc.weights)(
            layers=folded_layers,
            client_id=doc.weights.client_id,
            proportions=doc.weights.proportions,
        ),
        biases=folded_biases,
        bn={},
        activation=doc.activation,
    )
    modelio.write_layered(args.out, out_doc)
    print(f"folded {len(doc.bn)} bn block(s); max fold deviation {max_dev:.3e}")
    if max_dev > 1e-9:
        raise InternalInvariantError(f"fold deviation {max_dev} exceeds 1e-9")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedmatch",
        description="Match and fuse federated neural networks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="sample a synthetic federation with ground truth")
    _add_common(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("match", help="match net files or a federation file")
    _add_common(p)
    p.add_argument("inputs", nargs="+", help="net model files, or one federation file")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("pipeline", help="train, fuse, and evaluate end to end")
    _add_common(p)
    p.add_argument("--out", help="metrics document path")
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("sweep-lambda", help="pipeline across a lambda grid")
    _add_common(p)
    p.add_argument("--grid", help="comma-separated lambda values")
    p.add_argument("--out", required=True, help="output prefix")
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("fold-bn", help="fold batch-norm blocks into their layers")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fold_bn)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DegenerateInstanceError as exc:
        print(f"degenerate instance: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except ShapeMismatchError as exc:
        print(f"shape mismatch: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except InternalInvariantError as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except FedmatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVARIANT


if __name__ == "__main__":
    sys.exit(main())
