"""Text file formats and run configuration.

Every document is line-oriented UTF-8 text: a first line naming the document
type and format version, a sequence of `key value` lines and tagged blocks,
and a closing ``end`` line. Reals are serialized with 17 significant digits,
which round-trips IEEE doubles exactly; tooling can diff the files and other
implementations can parse them with a line splitter.

Blocks:

    matrix <name> <rows> <cols>   followed by <rows> lines of <cols> reals
    imatrix <name> <rows> <cols>  same, integer entries
    ints <name> <n>               one line of <n> integers
    vector <name> <n>             one line of <n> reals
    bn <layer> <eps>              followed by gamma/beta/mu/sigma_sq vectors

Model documents (``fedmatch-model 1``) carry a ``role`` line: ``net`` (two
layer blocks ``w0``/``w1``), ``layered`` (N layer blocks with optional bias
vectors and bn blocks), ``federation`` (ground-truth atoms, selection, and
per-client observations), or ``atoms`` (a bare global matrix). Assignment
documents (``fedmatch-assignment 1``) echo the matching configuration, list
one ``assign`` block per client, and end with ``metric`` lines.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InternalInvariantError, ShapeMismatchError
from .generative import SyntheticFederation
from .layerwise import BnParams, LayeredWeights
from .matching import LocalModelNeurons, MatchConfig
from .network import Fcnn

MODEL_MAGIC = "fedmatch-model"
ASSIGN_MAGIC = "fedmatch-assignment"
METRICS_MAGIC = "fedmatch-metrics"
TABLE_MAGIC = "fedmatch-table"
FORMAT_VERSION = "1"


def fmt(x: float) -> str:
    return format(float(x), ".17g")


def _fmt_row(row) -> str:
    return " ".join(fmt(v) for v in row)


def _fmt_int_row(row) -> str:
    return " ".join(str(int(v)) for v in row)


class _Reader:
    def __init__(self, text: str, path: str = "<string>"):
        self.lines = text.splitlines()
        self.pos = 0
        self.path = path

    def error(self, msg: str) -> ShapeMismatchError:
        return ShapeMismatchError(f"{self.path}:{self.pos}: {msg}")

    def peek(self) -> list[str] | None:
        while self.pos < len(self.lines) and not self.lines[self.pos].strip():
            self.pos += 1
        if self.pos >= len(self.lines):
            return None
        return self.lines[self.pos].split()

    def take(self) -> list[str]:
        tokens = self.peek()
        if tokens is None:
            raise self.error("unexpected end of file")
        self.pos += 1
        return tokens

    def expect(self, key: str) -> list[str]:
        tokens = self.take()
        if tokens[0] != key:
            raise self.error(f"expected {key!r}, found {tokens[0]!r}")
        return tokens

    def matrix(self, rows: int, cols: int, dtype=float) -> np.ndarray:
        out = np.empty((rows, cols), dtype=dtype)
        for r in range(rows):
            tokens = self.take()
            if len(tokens) != cols:
                raise self.error(f"matrix row {r} has {len(tokens)} entries, wanted {cols}")
            out[r] = [dtype(t) for t in tokens]
        return out

    def read_tagged_matrix(self, tag: str, name: str | None = None, dtype=float):
        tokens = self.expect(tag)
        if name is not None and tokens[1] != name:
            raise self.error(f"expected {tag} {name!r}, found {tokens[1]!r}")
        rows, cols = int(tokens[2]), int(tokens[3])
        return tokens[1], self.matrix(rows, cols, dtype=dtype)

    def read_ints(self, name: str | None = None) -> tuple[str, np.ndarray]:
        tokens = self.expect("ints")
        if name is not None and tokens[1] != name:
            raise self.error(f"expected ints {name!r}, found {tokens[1]!r}")
        n = int(tokens[2])
        line = self.take()
        if len(line) != n:
            raise self.error(f"ints {tokens[1]} has {len(line)} entries, wanted {n}")
        return tokens[1], np.array([int(t) for t in line], dtype=np.intp)

    def read_vector(self, name: str | None = None) -> tuple[str, np.ndarray]:
        tokens = self.expect("vector")
        if name is not None and tokens[1] != name:
            raise self.error(f"expected vector {name!r}, found {tokens[1]!r}")
        n = int(tokens[2])
        line = self.take()
        if len(line) != n:
            raise self.error(f"vector {tokens[1]} has {len(line)} entries, wanted {n}")
        return tokens[1], np.array([float(t) for t in line])


def _check_magic(reader: _Reader, magic: str) -> None:
    tokens = reader.take()
    if len(tokens) != 2 or tokens[0] != magic:
        raise reader.error(f"not a {magic} document")
    if tokens[1] != FORMAT_VERSION:
        raise reader.error(f"unsupported {magic} version {tokens[1]}")


# ---------------------------------------------------------------------------
# model documents


@dataclass
class NetDoc:
    net: Fcnn
    client_id: int | None = None


@dataclass
class LayeredModelDoc:
    weights: LayeredWeights
    biases: list[np.ndarray] = field(default_factory=list)
    bn: dict[int, BnParams] = field(default_factory=dict)
    activation: str = "relu"

    def __post_init__(self):
        if not self.biases:
            self.biases = [np.zeros(w.shape[0]) for w in self.weights.layers]


@dataclass
class AtomsDoc:
    matrix: np.ndarray


def write_net(path, doc: NetDoc) -> None:
    net = doc.net
    lines = [
        f"{MODEL_MAGIC} {FORMAT_VERSION}",
        "role net",
        f"activation {net.activation}",
        f"dims {net.input_dim} {net.output_dim} {net.hidden}",
    ]
    if doc.client_id is not None:
        lines.append(f"client {doc.client_id}")
    lines.append(f"matrix w0 {net.hidden} {net.input_dim}")
    lines.extend(_fmt_row(r) for r in net.w0)
    lines.append(f"matrix w1 {net.output_dim} {net.hidden}")
    lines.extend(_fmt_row(r) for r in net.w1)
    lines.append("end")
    _write_lines(path, lines)


def write_layered(path, doc: LayeredModelDoc) -> None:
    lw = doc.weights
    dims = [lw.layers[0].shape[1]] + [w.shape[0] for w in lw.layers]
    lines = [
        f"{MODEL_MAGIC} {FORMAT_VERSION}",
        "role layered",
        f"activation {doc.activation}",
    ]
    if lw.client_id is not None:
        lines.append(f"client {lw.client_id}")
    lines.append(f"nlayers {lw.n_layers}")
    lines.append("dims " + " ".join(str(d) for d in dims))
    if lw.proportions is not None:
        lines.append(f"vector proportions {len(lw.proportions)}")
        lines.append(_fmt_row(lw.proportions))
    for n, w in enumerate(lw.layers):
        lines.append(f"matrix layer{n} {w.shape[0]} {w.shape[1]}")
        lines.extend(_fmt_row(r) for r in w)
        bias = doc.biases[n]
        if np.any(bias):
            lines.append(f"vector bias{n} {len(bias)}")
            lines.append(_fmt_row(bias))
        if n in doc.bn:
            bn = doc.bn[n]
            lines.append(f"bn {n} {fmt(bn.eps)}")
            for nm, vec in (
                ("gamma", bn.gamma),
                ("beta", bn.beta),
                ("mu", bn.mu),
                ("sigma_sq", bn.sigma_sq),
            ):
                lines.append(f"vector {nm} {len(vec)}")
                lines.append(_fmt_row(vec))
    lines.append("end")
    _write_lines(path, lines)


def write_federation(path, fed: SyntheticFederation) -> None:
    lines = [
        f"{MODEL_MAGIC} {FORMAT_VERSION}",
        "role federation",
        f"gamma0 {fmt(fed.gamma0)}",
        f"sigma0_sq {fmt(fed.sigma0_sq)}",
        f"sigma_s_sq {fmt(fed.sigma_s_sq)}",
        f"seed {fed.seed}",
        f"selection_mode {fed.selection_mode}",
        f"dim {fed.dim}",
        f"clients {fed.n_clients}",
        f"matrix atoms {fed.n_atoms} {fed.dim}",
    ]
    lines.extend(_fmt_row(r) for r in fed.atoms)
    lines.append(f"imatrix selection {fed.n_clients} {fed.n_atoms}")
    lines.extend(_fmt_int_row(r) for r in fed.selection)
    for local, perm in zip(fed.locals, fed.permutations):
        cid = local.client_id
        lines.append(f"client {cid}")
        lines.append(f"sigma_sq {fmt(local.sigma_sq)}")
        lines.append(f"matrix neurons {local.count} {fed.dim}")
        lines.extend(_fmt_row(r) for r in local.neurons)
        lines.append(f"ints truth {local.count}")
        lines.append(_fmt_int_row(fed.truth_assignment[cid]))
        lines.append(f"ints permutation {len(perm)}")
        lines.append(_fmt_int_row(perm))
    lines.append("end")
    _write_lines(path, lines)


def write_atoms(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype=float)
    lines = [
        f"{MODEL_MAGIC} {FORMAT_VERSION}",
        "role atoms",
        f"matrix atoms {matrix.shape[0]} {matrix.shape[1]}",
    ]
    lines.extend(_fmt_row(r) for r in matrix)
    lines.append("end")
    _write_lines(path, lines)


def read_model(path):
    """Parse a model document; the returned type depends on its role."""
    with open(path, encoding="utf-8") as handle:
        reader = _Reader(handle.read(), str(path))
    _check_magic(reader, MODEL_MAGIC)
    role = reader.expect("role")[1]
    if role == "net":
        return _read_net(reader)
    if role == "layered":
        return _read_layered(reader)
    if role == "federation":
        return _read_federation(reader)
    if role == "atoms":
        _, matrix = reader.read_tagged_matrix("matrix", "atoms")
        reader.expect("end")
        return AtomsDoc(matrix=matrix)
    raise reader.error(f"unknown role {role!r}")


def _read_net(reader: _Reader) -> NetDoc:
    activation = reader.expect("activation")[1]
    dims = [int(t) for t in reader.expect("dims")[1:]]
    if len(dims) != 3:
        raise reader.error("net dims line must hold D K J")
    d, k, j = dims
    client_id = None
    if reader.peek() and reader.peek()[0] == "client":
        client_id = int(reader.take()[1])
    _, w0 = reader.read_tagged_matrix("matrix", "w0")
    _, w1 = reader.read_tagged_matrix("matrix", "w1")
    reader.expect("end")
    if w0.shape != (j, d) or w1.shape != (k, j):
        raise reader.error("declared dims do not match layer shapes")
    return NetDoc(net=Fcnn(w0=w0, w1=w1, activation=activation), client_id=client_id)


def _read_layered(reader: _Reader) -> LayeredModelDoc:
    activation = reader.expect("activation")[1]
    client_id = None
    if reader.peek() and reader.peek()[0] == "client":
        client_id = int(reader.take()[1])
    n_layers = int(reader.expect("nlayers")[1])
    dims = [int(t) for t in reader.expect("dims")[1:]]
    if len(dims) != n_layers + 1:
        raise reader.error("dims line must hold one entry per layer boundary")
    proportions = None
    if reader.peek() and reader.peek()[:2] == ["vector", "proportions"]:
        _, proportions = reader.read_vector("proportions")
    layers = []
    biases = []
    bn = {}
    for n in range(n_layers):
        _, w = reader.read_tagged_matrix("matrix", f"layer{n}")
        if w.shape != (dims[n + 1], dims[n]):
            raise reader.error(f"layer{n} shape {w.shape} does not match dims")
        layers.append(w)
        bias = np.zeros(w.shape[0])
        nxt = reader.peek()
        if nxt and nxt[:2] == ["vector", f"bias{n}"]:
            _, bias = reader.read_vector(f"bias{n}")
        biases.append(bias)
        nxt = reader.peek()
        if nxt and nxt[0] == "bn":
            tokens = reader.take()
            if int(tokens[1]) != n:
                raise reader.error(f"bn block for layer {tokens[1]} out of order")
            eps = float(tokens[2])
            vecs = {}
            for nm in ("gamma", "beta", "mu", "sigma_sq"):
                _, vecs[nm] = reader.read_vector(nm)
            bn[n] = BnParams(eps=eps, **vecs)
            if len(bn[n]) != w.shape[0]:
                raise reader.error(f"bn block length does not match layer{n} output dim")
    reader.expect("end")
    weights = LayeredWeights(layers=layers, client_id=client_id, proportions=proportions)
    return LayeredModelDoc(weights=weights, biases=biases, bn=bn, activation=activation)


def _read_federation(reader: _Reader) -> SyntheticFederation:
    gamma0 = float(reader.expect("gamma0")[1])
    sigma0_sq = float(reader.expect("sigma0_sq")[1])
    sigma_s_sq = float(reader.expect("sigma_s_sq")[1])
    seed = int(reader.expect("seed")[1])
    selection_mode = reader.expect("selection_mode")[1]
    dim = int(reader.expect("dim")[1])
    n_clients = int(reader.expect("clients")[1])
    _, atoms = reader.read_tagged_matrix("matrix", "atoms")
    if atoms.shape[1] != dim:
        raise reader.error("atom matrix width does not match dim")
    tokens = reader.expect("imatrix")
    if tokens[1] != "selection":
        raise reader.error("expected the selection matrix")
    selection = reader.matrix(int(tokens[2]), int(tokens[3]), dtype=int).astype(np.int8)
    if selection.shape != (n_clients, atoms.shape[0]):
        raise reader.error("selection shape does not match clients x atoms")
    locals_ = []
    permutations = []
    truth = {}
    for _ in range(n_clients):
        cid = int(reader.expect("client")[1])
        sigma_sq = float(reader.expect("sigma_sq")[1])
        _, neurons = reader.read_tagged_matrix("matrix", "neurons")
        _, truth_vec = reader.read_ints("truth")
        _, perm = reader.read_ints("permutation")
        if neurons.shape[1] != dim or len(truth_vec) != neurons.shape[0]:
            raise reader.error(f"client {cid} blocks are inconsistent")
        locals_.append(LocalModelNeurons(client_id=cid, neurons=neurons, sigma_sq=sigma_sq))
        permutations.append(perm)
        truth[cid] = truth_vec
    reader.expect("end")
    return SyntheticFederation(
        atoms=atoms,
        selection=selection,
        permutations=permutations,
        locals=locals_,
        truth_assignment=truth,
        gamma0=gamma0,
        sigma0_sq=sigma0_sq,
        sigma_s_sq=sigma_s_sq,
        seed=seed,
        selection_mode=selection_mode,
    )


# ---------------------------------------------------------------------------
# assignment documents


@dataclass
class AssignmentDoc:
    algorithm: str
    lam: float
    gamma0: float
    sigma0_sq: float
    sigma_sq: float
    seed: int
    max_passes: int
    client_order: str
    n_atoms: int
    per_client: dict[int, np.ndarray] = field(default_factory=dict)
    metrics: dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        for cid, assign in self.per_client.items():
            if len(set(assign.tolist())) != len(assign):
                raise InternalInvariantError(f"client {cid}: duplicate atom indices")
            if len(assign) and (assign.min() < 0 or assign.max() >= self.n_atoms):
                raise InternalInvariantError(f"client {cid}: atom index out of range")


def write_assignment(path, doc: AssignmentDoc) -> None:
    doc.validate()
    lines = [
        f"{ASSIGN_MAGIC} {FORMAT_VERSION}",
        f"algorithm {doc.algorithm}",
        f"lambda {fmt(doc.lam)}",
        f"gamma0 {fmt(doc.gamma0)}",
        f"sigma0_sq {fmt(doc.sigma0_sq)}",
        f"sigma_sq {fmt(doc.sigma_sq)}",
        f"seed {doc.seed}",
        f"max_passes {doc.max_passes}",
        f"client_order {doc.client_order}",
        f"atoms {doc.n_atoms}",
    ]
    for cid in sorted(doc.per_client):
        assign = doc.per_client[cid]
        lines.append(f"assign {cid} {len(assign)}")
        lines.append(_fmt_int_row(assign))
    for name, value in doc.metrics.items():
        lines.append(f"metric {name} {fmt(value)}")
    lines.append("end")
    _write_lines(path, lines)


def read_assignment(path) -> AssignmentDoc:
    with open(path, encoding="utf-8") as handle:
        reader = _Reader(handle.read(), str(path))
    _check_magic(reader, ASSIGN_MAGIC)
    doc = AssignmentDoc(
        algorithm=reader.expect("algorithm")[1],
        lam=float(reader.expect("lambda")[1]),
        gamma0=float(reader.expect("gamma0")[1]),
        sigma0_sq=float(reader.expect("sigma0_sq")[1]),
        sigma_sq=float(reader.expect("sigma_sq")[1]),
        seed=int(reader.expect("seed")[1]),
        max_passes=int(reader.expect("max_passes")[1]),
        client_order=reader.expect("client_order")[1],
        n_atoms=int(reader.expect("atoms")[1]),
    )
    while True:
        tokens = reader.take()
        if tokens[0] == "end":
            break
        if tokens[0] == "assign":
            cid, n = int(tokens[1]), int(tokens[2])
            line = reader.take()
            if len(line) != n:
                raise reader.error(f"assign block for client {cid} has wrong length")
            doc.per_client[cid] = np.array([int(t) for t in line], dtype=np.intp)
        elif tokens[0] == "metric":
            doc.metrics[tokens[1]] = float(tokens[2])
        else:
            raise reader.error(f"unexpected token {tokens[0]!r}")
    doc.validate()
    return doc


# ---------------------------------------------------------------------------
# metrics and table documents


def write_metrics(path, metrics: dict) -> None:
    lines = [f"{METRICS_MAGIC} {FORMAT_VERSION}"]
    lines.extend(f"metric {name} {fmt(value)}" for name, value in metrics.items())
    lines.append("end")
    _write_lines(path, lines)


def read_metrics(path) -> dict:
    with open(path, encoding="utf-8") as handle:
        reader = _Reader(handle.read(), str(path))
    _check_magic(reader, METRICS_MAGIC)
    out = {}
    while True:
        tokens = reader.take()
        if tokens[0] == "end":
            break
        if tokens[0] != "metric":
            raise reader.error(f"unexpected token {tokens[0]!r}")
        out[tokens[1]] = float(tokens[2])
    return out


def write_table(path, columns: list[str], rows: list[list[float]]) -> None:
    lines = [f"{TABLE_MAGIC} {FORMAT_VERSION}", "columns " + " ".join(columns)]
    for row in rows:
        if len(row) != len(columns):
            raise ShapeMismatchError("table row width does not match columns")
        lines.append("row " + _fmt_row(row))
    lines.append("end")
    _write_lines(path, lines)


def write_table_csv(path, columns: list[str], rows: list[list[float]]) -> None:
    lines = [",".join(columns)]
    lines.extend(",".join(fmt(v) for v in row) for row in rows)
    _write_lines(path, lines)


def read_table(path) -> tuple[list[str], list[list[float]]]:
    with open(path, encoding="utf-8") as handle:
        reader = _Reader(handle.read(), str(path))
    _check_magic(reader, TABLE_MAGIC)
    columns = reader.expect("columns")[1:]
    rows = []
    while True:
        tokens = reader.take()
        if tokens[0] == "end":
            break
        if tokens[0] != "row":
            raise reader.error(f"unexpected token {tokens[0]!r}")
        values = [float(t) for t in tokens[1:]]
        if len(values) != len(columns):
            raise reader.error("row width does not match columns")
        rows.append(values)
    return columns, rows


def _write_lines(path, lines: list[str]) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        handle.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    """Flat configuration for all CLI commands; unknown keys are rejected on
    load so typos fail loudly. The JSON key for ``lam`` is ``lambda``."""

    # blob data generation
    K: int = 4
    D: int = 20
    per_class: int = 250
    holdout_per_class: int = 250
    spread: float = 1.0
    alpha: float = 0.5
    # synthetic federation simulation
    S: int = 10
    dim: int = 30
    j_true: int = 15
    selection_mode: str = "ibp"
    bernoulli_p: float = 0.8
    sigma_s_sq: float = 0.0025
    # local training
    hidden: int = 20
    lr: float = 0.01
    batch: int = 32
    epochs: int = 10
    activation: str = "relu"
    # matching
    gamma0: float = 1.0
    sigma0_sq: float = 10.0
    sigma_sq: float = 1.0
    lam: float = 0.01
    algorithm: str = "nafi"
    max_passes: int = 10
    client_order: str = "fixed"
    log_clamp: float = 1e-12
    seed: int = 0

    def validate(self) -> None:
        if self.K < 2:
            raise ConfigError("K must be >= 2")
        positives = {
            "D": self.D,
            "per_class": self.per_class,
            "holdout_per_class": self.holdout_per_class,
            "alpha": self.alpha,
            "S": self.S,
            "dim": self.dim,
            "j_true": self.j_true,
            "hidden": self.hidden,
            "lr": self.lr,
            "batch": self.batch,
            "gamma0": self.gamma0,
            "sigma0_sq": self.sigma0_sq,
            "sigma_sq": self.sigma_sq,
            "max_passes": self.max_passes,
            "log_clamp": self.log_clamp,
        }
        for name, value in positives.items():
            if not value > 0:
                raise ConfigError(f"{name} must be positive, got {value}")
        if self.spread < 0 or self.sigma_s_sq < 0 or self.lam < 0 or self.epochs < 0:
            raise ConfigError("spread, sigma_s_sq, lambda, and epochs must be >= 0")
        if self.selection_mode not in ("ibp", "bernoulli"):
            raise ConfigError(f"unknown selection_mode {self.selection_mode!r}")
        if not 0 < self.bernoulli_p <= 1:
            raise ConfigError("bernoulli_p must be in (0, 1]")
        if self.algorithm not in ("pfnm", "nafi"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.client_order not in ("fixed", "shuffle"):
            raise ConfigError(f"unknown client_order {self.client_order!r}")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"unknown activation {self.activation!r}")

    def match_config(self) -> MatchConfig:
        return MatchConfig(
            gamma0=self.gamma0,
            sigma0_sq=self.sigma0_sq,
            sigma_sq=self.sigma_sq,
            lam=self.lam,
            algorithm=self.algorithm,
            max_passes=self.max_passes,
            client_order=self.client_order,
            seed=self.seed,
            log_clamp=self.log_clamp,
        )


_CONFIG_KEYS = {f.name: f for f in dataclasses.fields(RunConfig)}


def load_run_config(path) -> RunConfig:
    """Load and validate a JSON run configuration."""
    try:
        with open(path, encoding="utf-8") as handle:
            raw = json.load(handle)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}: {exc.msg}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top-level value must be an object")
    kwargs = {}
    for key, value in raw.items():
        name = "lam" if key == "lambda" else key
        if name not in _CONFIG_KEYS:
            raise ConfigError(f"{path}: unknown config key {key!r}")
        spec = _CONFIG_KEYS[name]
        if spec.type in ("int",) and not isinstance(value, int):
            raise ConfigError(f"{path}: key {key!r} must be an integer")
        kwargs[name] = value
    config = RunConfig(**kwargs)
    config.validate()
    return config
