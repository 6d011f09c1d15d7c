"""Command-line pipeline: oracle grids -> trace -> align -> fit -> eval.

Each stage reads and writes files under the configured output directory
so that real network predictions can be dropped in at the feature
directory boundary. Logs go to standard error; results only to files
(``print-config`` is the exception and writes YAML to standard output).

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from . import experiments, fitting
from .errors import DataError, NumericalError
from .features import CoarseGrid, NoiseSpec, generate_labels, inject_noise, load_feature_dir, save_feature_dir
from .fitting import FitConfig, run_fitting, write_trajectory
from .mapio import read_mrc
from .metrics import aa_precision_at, ca_precision_recall, greedy_match, rmsd, tm_score, truth_residues
from .seqalign import label_fragments, load_targets, save_labeled
from .structio import read_fasta, read_structure, save_structure
from .synthetic import smooth_perturbation, synthetic_target, with_ca
from .tracing import extract_candidates, load_fragments, prune_fragments, save_fragments, trace_fragments

log = logging.getLogger("fragfit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class Paths:
    structure: str | None = None  # reference model: oracle input and evaluation truth
    sequence: str | None = None
    initial: str | None = None  # starting model for fitting
    map: str | None = None  # optional experimental map
    feature_dir: str | None = None  # defaults to <output_dir>/features
    output_dir: str = "out"


@dataclass
class Thresholds:
    detection: float = 0.5
    epsilon_sq: float = 1.0
    min_len: int = 3
    confidence: float = 3.4
    prune: bool = True

    def validate(self):
        if not 0.0 < self.detection < 1.0:
            raise UsageError(f"detection threshold must lie in (0, 1), got {self.detection}")
        if self.epsilon_sq <= 0:
            raise UsageError("epsilon_sq must be positive")
        if self.min_len < 1:
            raise UsageError("min_len must be >= 1")
        if self.confidence < 0:
            raise UsageError("confidence threshold must be non-negative")


@dataclass
class SyntheticConfig:
    length: int = 120
    tail: int = 15
    perturbation_rmsd: float = 5.0


@dataclass
class SweepConfig:
    n_seeds: int = 20
    length: int = 150
    base_seed: int = 1000
    thresholds: list = field(default_factory=lambda: [0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    noise: NoiseSpec = field(default_factory=lambda: NoiseSpec(ca_dropout=0.1, fp_rate=5.0, score_sigma=0.3))
    aa_alpha: float = 0.1
    aa_min_len: int = 5


@dataclass
class PipelineConfig:
    paths: Paths = field(default_factory=Paths)
    thresholds: Thresholds = field(default_factory=Thresholds)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    fit: FitConfig = field(default_factory=FitConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    grid_padding: float = 6.0
    chain: str | None = None
    seed: int = 0

    @property
    def output_dir(self) -> Path:
        return Path(self.paths.output_dir)

    @property
    def feature_dir(self) -> Path:
        return Path(self.paths.feature_dir) if self.paths.feature_dir else self.output_dir / "features"

    def noise_spec(self) -> NoiseSpec:
        return replace(self.noise, seed=self.seed)

    def require(self, *names: str) -> None:
        """Check that the named ``paths`` entries are set and exist."""
        for name in names:
            value = getattr(self.paths, name)
            if value is None:
                raise UsageError(f"paths.{name} is not set")
            if not Path(value).exists():
                raise UsageError(f"paths.{name} does not exist: {value}")


def config_to_dict(cfg: PipelineConfig) -> dict:
    d = asdict(cfg)
    d["fit"] = fitting.config_to_dict(cfg.fit)
    d["noise"].pop("seed")
    d["sweep"]["noise"].pop("seed")
    return d


def _build(cls, data, where):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise UsageError(f"{where} must be a mapping")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise UsageError(f"unknown keys in {where}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid {where}: {exc}") from exc


def config_from_dict(d: dict | None) -> PipelineConfig:
    d = dict(d or {})
    known = {f.name for f in fields(PipelineConfig)}
    unknown = set(d) - known
    if unknown:
        raise UsageError(f"unknown top-level config keys: {sorted(unknown)}")
    sweep = dict(d.get("sweep") or {})
    sweep_noise = _build(NoiseSpec, sweep.pop("noise", None), "sweep.noise") if "noise" in sweep else None
    sweep_cfg = _build(SweepConfig, sweep, "sweep")
    if sweep_noise is not None:
        sweep_cfg.noise = sweep_noise
    try:
        fit = FitConfig() if d.get("fit") is None else fitting.config_from_dict(d["fit"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid fit section: {exc}") from exc
    cfg = PipelineConfig(
        paths=_build(Paths, d.get("paths"), "paths"),
        thresholds=_build(Thresholds, d.get("thresholds"), "thresholds"),
        noise=_build(NoiseSpec, d.get("noise"), "noise"),
        fit=fit,
        synthetic=_build(SyntheticConfig, d.get("synthetic"), "synthetic"),
        sweep=sweep_cfg,
        grid_padding=float(d.get("grid_padding", 6.0)),
        chain=d.get("chain"),
        seed=int(d.get("seed", 0)),
    )
    cfg.thresholds.validate()
    return cfg


def load_config(path) -> PipelineConfig:
    if path is None:
        return PipelineConfig()
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file not found: {p}")
    try:
        doc = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse {p}: {exc}") from exc
    return config_from_dict(doc)


def _dump_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# Subcommands. Each takes the resolved config and the parsed arguments.


def cmd_synth(cfg: PipelineConfig, args) -> int:
    """Synthetic reference, full sequence and a perturbed starting model."""
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    structure, sequence = synthetic_target(cfg.synthetic.length, cfg.seed, tail=cfg.synthetic.tail)
    rng = np.random.default_rng(cfg.seed + 1)
    start = with_ca(structure, smooth_perturbation(structure.ca_coords(), cfg.synthetic.perturbation_rmsd, rng))
    save_structure(structure, out / "reference.pdb")
    save_structure(start, out / "initial.pdb")
    (out / "sequence.fasta").write_text(f">synthetic seed={cfg.seed}\n{sequence.residues}\n")
    log.info("wrote synthetic target of %d residues to %s", cfg.synthetic.length, out)
    return EXIT_OK


def cmd_oracle(cfg: PipelineConfig, args) -> int:
    """Label grids from the reference structure, with optional noise."""
    cfg.require("structure")
    structure = read_structure(cfg.paths.structure)
    grid = CoarseGrid.around(structure, padding=cfg.grid_padding)
    labels = generate_labels(structure, grid)
    noise = cfg.noise_spec()
    grids = inject_noise(labels, noise)
    save_feature_dir(grids, cfg.feature_dir, extra={"noise": asdict(noise)})
    log.info("wrote feature grids %s to %s", grid.dims, cfg.feature_dir)
    return EXIT_OK


def cmd_trace(cfg: PipelineConfig, args) -> int:
    """Detect CA candidates and link them into fragments."""
    th = cfg.thresholds
    grids = load_feature_dir(cfg.feature_dir)
    candidates = extract_candidates(grids, th.detection)
    fragments = trace_fragments(candidates, th.epsilon_sq)
    n_raw = len(fragments)
    if th.prune:
        fragments = prune_fragments(fragments, th.min_len)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    save_fragments(fragments, cfg.output_dir / "fragments.pdb", cfg.output_dir / "fragments.json")
    log.info("%d candidates, %d fragments traced, %d kept", len(candidates), n_raw, len(fragments))
    if not fragments:
        log.error("no fragments traced from %s", cfg.feature_dir)
        return EXIT_DATA
    return EXIT_OK


def cmd_align(cfg: PipelineConfig, args) -> int:
    """Place fragments on the sequence and gate them by confidence."""
    cfg.require("sequence")
    frag_path = cfg.output_dir / "fragments.json"
    if not frag_path.exists():
        raise UsageError(f"{frag_path} not found; run trace first")
    fragments = load_fragments(frag_path)
    sequence = read_fasta(cfg.paths.sequence)
    accepted, rejected = label_fragments(
        fragments,
        sequence,
        conf_threshold=cfg.thresholds.confidence,
        residue_offset=cfg.fit.residue_offset,
        threads=args.threads,
    )
    save_labeled(accepted, rejected, cfg.output_dir / "labeled.pdb", cfg.output_dir / "labeled.json")
    log.info("%d fragments accepted, %d rejected", len(accepted), len(rejected))
    return EXIT_OK


def cmd_fit(cfg: PipelineConfig, args) -> int:
    """Drive the initial model onto the labeled fragments and maps."""
    cfg.require("initial")
    labeled = cfg.output_dir / "labeled.json"
    if not labeled.exists():
        raise UsageError(f"{labeled} not found; run align first")
    targets = load_targets(labeled)
    if not targets:
        raise DataError("no labeled fragments to fit against")
    initial = read_structure(cfg.paths.initial)
    _check_chain_choice(cfg, initial, "initial model")
    maps = {}
    bb_path = cfg.feature_dir / "bb_prob.mrc"
    if bb_path.exists():
        maps["backbone"] = read_mrc(bb_path)
    if cfg.paths.map:
        cfg.require("map")
        maps["experimental"] = read_mrc(cfg.paths.map)
    fitted, records = run_fitting(initial, targets, cfg.fit, maps=maps, chain_id=cfg.chain)
    save_structure(fitted, cfg.output_dir / "fitted.pdb")
    write_trajectory(records, cfg.output_dir / "trajectory.jsonl")
    stops = [r for r in records if "stop" in r]
    for r in stops:
        log.info("stage %s stopped at step %d (%s)", r["stage"], r["step"], r["stop"])
    return EXIT_OK


def _check_chain_choice(cfg: PipelineConfig, structure, what: str) -> None:
    if cfg.chain is None and len(structure.chains) > 1:
        ids = ", ".join(c.chain_id for c in structure.chains)
        raise UsageError(f"{what} has chains {ids}; pick one with --chain")


def evaluate_outputs(cfg: PipelineConfig) -> dict:
    """Metrics for whichever stage outputs exist in the output directory."""
    cfg.require("structure")
    truth = read_structure(cfg.paths.structure)
    out = cfg.output_dir
    report: dict = {}
    tpos, _ = truth_residues(truth)
    frag_path = out / "fragments.json"
    if frag_path.exists():
        frags = load_fragments(frag_path)
        pos = np.concatenate([f.positions for f in frags]) if frags else np.zeros((0, 3))
        report["detection"] = ca_precision_recall(pos, tpos).as_dict()
        report["detection"]["n_fragments"] = len(frags)
    lab_path = out / "labeled.json"
    if lab_path.exists():
        doc = json.loads(lab_path.read_text())
        rows = doc["accepted"]
        section = {"accepted": len(rows), "rejected": len(doc["rejected"])}
        if rows:
            pos = np.concatenate([np.array(r["positions"]).reshape(-1, 3) for r in rows])
            assigned = "".join(r["aa_assignment"] for r in rows)
            numbers = [n for r in rows for n in r["author_indices"]]
            truth_numbers = [res.index for res in truth.residues()]
            pairs = greedy_match(pos, tpos)
            section["aa_precision"] = aa_precision_at(pos, assigned, truth)
            section["index_accuracy"] = (
                sum(numbers[i] == truth_numbers[j] for i, j in pairs) / len(pairs) if pairs else 0.0
            )
        report["alignment"] = section
    fit_path = out / "fitted.pdb"
    if fit_path.exists():
        fitted = read_structure(fit_path)
        _check_chain_choice(cfg, fitted, "fitted model")
        section = {"tm_score": tm_score(fitted, truth)}
        chain_id = cfg.chain or fitted.chains[0].chain_id
        fc = fitted.chain(chain_id)
        tc = truth.chain(chain_id) if chain_id in {c.chain_id for c in truth.chains} else truth.chains[0]
        tmap = {r.index: r.ca for r in tc.residues}
        common = [(r.ca, tmap[r.index]) for r in fc.residues if r.index in tmap]
        if common:
            a, b = map(np.array, zip(*common))
            section["rmsd_all"] = rmsd(a, b)
        if lab_path.exists():
            covered = {n for t in load_targets(lab_path) for n in t.author_indices}
            cov = [(r.ca, tmap[r.index]) for r in fc.residues if r.index in covered and r.index in tmap]
            if cov:
                a, b = map(np.array, zip(*cov))
                section["rmsd_covered"] = rmsd(a, b)
                section["n_covered"] = len(cov)
        if cfg.paths.initial and Path(cfg.paths.initial).exists():
            section["tm_score_initial"] = tm_score(read_structure(cfg.paths.initial), truth)
        report["fit"] = section
    return report


def cmd_eval(cfg: PipelineConfig, args) -> int:
    """Score outputs against the reference, or run an ablation sweep."""
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    if args.sweep:
        return _run_sweep(cfg, args)
    report = evaluate_outputs(cfg)
    _dump_json(report, out / "report.json")
    log.info("evaluation written to %s", out / "report.json")
    return EXIT_OK


def _run_sweep(cfg: PipelineConfig, args) -> int:
    sw = cfg.sweep
    ens = experiments.EnsembleSpec(n_seeds=sw.n_seeds, length=sw.length, base_seed=sw.base_seed)
    noise = replace(sw.noise, seed=cfg.seed)
    th = cfg.thresholds
    out = cfg.output_dir
    if args.sweep == "threshold":
        rows = experiments.threshold_sweep(ens, noise, sw.thresholds, th.epsilon_sq, th.min_len, threads=args.threads)
        with open(out / "sweep_threshold.jsonl", "w") as fh:
            for row in rows:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    elif args.sweep == "pruning":
        res = experiments.pruning_ablation(ens, noise, th.detection, th.epsilon_sq, th.min_len, threads=args.threads)
        _dump_json(res, out / "sweep_pruning.json")
    elif args.sweep == "aa":
        aa_noise = replace(noise, aa_dirichlet_alpha=sw.aa_alpha, fp_rate=0.0)
        res = experiments.aa_ablation(
            ens, aa_noise, sw.aa_min_len, th.detection, th.epsilon_sq, threads=args.threads
        )
        _dump_json(res, out / "sweep_aa.json")
    log.info("%s sweep written to %s", args.sweep, out)
    return EXIT_OK


def cmd_run(cfg: PipelineConfig, args) -> int:
    """oracle -> trace -> align -> fit -> eval in one go."""
    for step in (cmd_oracle, cmd_trace, cmd_align, cmd_fit):
        code = step(cfg, args)
        if code != EXIT_OK:
            return code
    args.sweep = None
    return cmd_eval(cfg, args)


def cmd_print_config(cfg: PipelineConfig, args) -> int:
    """Print the resolved configuration as YAML."""
    sys.stdout.write(yaml.safe_dump(config_to_dict(cfg), sort_keys=False))
    return EXIT_OK


COMMANDS = {
    "print-config": cmd_print_config,
    "synth": cmd_synth,
    "oracle": cmd_oracle,
    "trace": cmd_trace,
    "align": cmd_align,
    "fit": cmd_fit,
    "eval": cmd_eval,
    "run": cmd_run,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML pipeline configuration")
    common.add_argument("--seed", type=int, help="RNG seed (overrides config)")
    common.add_argument("--threads", type=int, default=1, help="worker threads; results do not depend on it")
    common.add_argument("--chain", help="model chain to fit / evaluate")
    common.add_argument("--output-dir", help="override paths.output_dir")
    common.add_argument("--structure", help="override paths.structure")
    common.add_argument("--sequence", help="override paths.sequence")
    common.add_argument("--initial", help="override paths.initial")
    common.add_argument("--map", help="override paths.map")
    common.add_argument("--feature-dir", help="override paths.feature_dir")
    common.add_argument("--detection-threshold", type=float)
    common.add_argument("--epsilon-sq", type=float)
    common.add_argument("--min-len", type=int)
    common.add_argument("--confidence", type=float)
    common.add_argument("--no-prune", action="store_true", help="keep fragments shorter than min_len")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="fragfit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common], help=(COMMANDS[name].__doc__ or "").split("\n")[0] or None)
        if name == "eval":
            p.add_argument("--sweep", choices=["threshold", "pruning", "aa"], help="run a seeded ablation instead")
    return parser


def apply_overrides(cfg: PipelineConfig, args) -> PipelineConfig:
    if args.seed is not None:
        cfg.seed = args.seed
    if args.chain is not None:
        cfg.chain = args.chain
    for name in ("output_dir", "structure", "sequence", "initial", "map", "feature_dir"):
        value = getattr(args, name)
        if value is not None:
            setattr(cfg.paths, name, value)
    th = cfg.thresholds
    if args.detection_threshold is not None:
        th.detection = args.detection_threshold
    if args.epsilon_sq is not None:
        th.epsilon_sq = args.epsilon_sq
    if args.min_len is not None:
        th.min_len = args.min_len
    if args.confidence is not None:
        th.confidence = args.confidence
    if args.no_prune:
        th.prune = False
    th.validate()
    if args.threads < 1:
        raise UsageError("--threads must be >= 1")
    return cfg


class _StderrHandler(logging.StreamHandler):
    """Writes to whatever ``sys.stderr`` is at emit time, so repeated
    in-process calls never hold on to a stream that has been swapped out."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value):
        pass


def _configure_logging(verbose: bool) -> None:
    pkg = logging.getLogger("fragfit")
    if not any(isinstance(h, _StderrHandler) for h in pkg.handlers):
        handler = _StderrHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        pkg.addHandler(handler)
    pkg.setLevel(logging.DEBUG if verbose else logging.INFO)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    if not hasattr(args, "sweep"):
        args.sweep = None
    _configure_logging(args.verbose)
    try:
        cfg = apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    except DataError as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
