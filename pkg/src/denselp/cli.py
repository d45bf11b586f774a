"""Command-line front end: ``denselp solve``, ``denselp bench`` and ``denselp fixture``."""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .baselines import mean_field, mean_field5, sg_lp
from .bench import bench_filter, doubling_sizes, rows_to_csv
from .fixtures import DEFAULT_KERNELS, synthetic_problem
from .io import (
    FormatError,
    load_image,
    load_scores,
    load_unaries,
    render_labels,
    save_label_indices,
    save_ppm,
    save_unaries,
)
from .model import ConfigError, EnergyModel, SolverConfig, argmax_round, format_config, is_feasible, load_config, uniform_scores
from .proxlp import prox_solve, prox_solve_accelerated

SOLVERS = ("mf", "mf5", "sglp", "proxlp", "proxlp_l", "proxlp_acc")
MF_ITERS = 50
MF_INIT_TOL = 1e-6
SGLP_ITERS = 100


class RunError(Exception):
    """Bad inputs for a run; reported on stderr with a nonzero exit."""


@dataclass(frozen=True)
class RunSpec:
    image: Path
    unaries: Path
    config: Path
    solver: str = "proxlp"
    init: str = "uniform"
    out: Path = Path("out")
    seed: int = 0
    timing: bool = False

    def __post_init__(self):
        for name in ("image", "unaries", "config"):
            path = Path(getattr(self, name))
            if not path.is_file():
                raise RunError(f"{name} file not found: {path}")
            object.__setattr__(self, name, path)
        object.__setattr__(self, "out", Path(self.out))
        if self.solver not in SOLVERS:
            raise RunError(f"unknown solver {self.solver!r}; choose from {', '.join(SOLVERS)}")
        if self.init not in ("uniform", "mf") and not self.init.startswith("file:"):
            raise RunError(f"bad init {self.init!r}; expected uniform, mf or file:<path>")
        if self.init.startswith("file:") and not Path(self.init[5:]).is_file():
            raise RunError(f"init file not found: {self.init[5:]}")


def _initial_scores(spec: RunSpec, model: EnergyModel, cfg: SolverConfig) -> np.ndarray:
    if spec.init == "uniform":
        return uniform_scores(model.n, model.m)
    if spec.init == "mf":
        y, _ = mean_field(model, uniform_scores(model.n, model.m), MF_ITERS, cfg.levels, tol=MF_INIT_TOL)
        return y
    y = load_scores(spec.init[5:])
    if y.shape != (model.n, model.m):
        raise RunError(f"init scores are {y.shape[0]}x{y.shape[1]}, expected {model.n}x{model.m}")
    if not is_feasible(y):
        raise RunError("init scores are not on the probability simplex")
    return y


def solve(model: EnergyModel, y0, cfg: SolverConfig, solver: str):
    """Dispatch to one solver by its CLI name; returns ``(scores, trace)``."""
    if solver == "mf":
        return mean_field(model, y0, MF_ITERS, cfg.levels)
    if solver == "mf5":
        return mean_field5(model, y0, cfg.levels)
    if solver == "sglp":
        return sg_lp(model, y0, SGLP_ITERS, cfg.levels)
    if solver == "proxlp":
        return prox_solve(model, y0, cfg)
    if solver == "proxlp_l":
        return prox_solve_accelerated(model, y0, cfg, "labels_only")
    if solver == "proxlp_acc":
        return prox_solve_accelerated(model, y0, cfg, "labels_and_pixels")
    raise RunError(f"unknown solver {solver!r}")


def _summary(spec: RunSpec, model: EnergyModel, trace) -> str:
    last = trace.rows[-1]
    lines = [
        f"solver = {spec.solver}",
        f"init = {spec.init}",
        f"seed = {spec.seed}",
        f"pixels = {model.n}",
        f"labels = {model.m}",
        f"trace_rows = {len(trace.rows)}",
        f"final_k = {last['k']}",
        f"lp_energy = {last['lp_energy']!r}",
        f"ip_energy = {last['ip_energy']!r}",
        "energy_eval = permutohedral lattice",
    ]
    if spec.timing:
        lines.append(f"wall_ms = {last['wall_ms']:.3f}")
    return "\n".join(lines) + "\n"


def run(spec: RunSpec) -> int:
    """Load inputs, solve and write ``labels.ppm``, ``labels.idx``, ``trace.csv`` and ``summary.txt``."""
    image = load_image(spec.image)
    kernels, cfg = load_config(spec.config)
    if not kernels:
        raise RunError(f"{spec.config}: no kernel lines")
    unaries = load_unaries(spec.unaries, n=image.n)
    if unaries.shape[1] > 256:
        raise RunError(f"{unaries.shape[1]} labels do not fit the one-byte label file")
    model = EnergyModel.from_image(unaries, image, kernels)

    y0 = _initial_scores(spec, model, cfg)
    y, trace = solve(model, y0, cfg, spec.solver)
    labels = argmax_round(y).argmax(axis=1)

    spec.out.mkdir(parents=True, exist_ok=True)
    save_ppm(spec.out / "labels.ppm", image.width, image.height, render_labels(labels))
    save_label_indices(spec.out / "labels.idx", labels)
    (spec.out / "trace.csv").write_text(trace.to_csv(timing=spec.timing))
    (spec.out / "summary.txt").write_text(_summary(spec, model, trace))
    return 0


def write_fixture(out, seed: int = 0, width: int = 64, height: int = 64, labels: int = 4) -> None:
    """Write the synthetic fixture as ``image.ppm``, ``unaries.unr`` and ``fixture.cfg``."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    problem = synthetic_problem(seed=seed, width=width, height=height, m=labels)
    save_ppm(out / "image.ppm", width, height, problem.image.colors)
    save_unaries(out / "unaries.unr", problem.unaries)
    (out / "fixture.cfg").write_text(format_config(DEFAULT_KERNELS, SolverConfig()))


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="denselp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", help="minimize a dense CRF energy on one image")
    p.add_argument("--image", required=True, help="8-bit RGB PPM (P6) or PNG")
    p.add_argument("--unaries", required=True, help="UNR1 unary table, pixel-major")
    p.add_argument("--config", required=True, help="key = value config with kernel lines")
    p.add_argument("--solver", choices=SOLVERS, default="proxlp")
    p.add_argument("--init", default="uniform", help="uniform, mf or file:<LBS1 scores>")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--timing", action="store_true", help="fill wall_ms (makes output run-dependent)")

    b = sub.add_parser("bench", help="time the ordered filter against the brute-force reference")
    b.add_argument("--max-n", type=int, default=1_280_000)
    b.add_argument("--min-n", type=int, default=10_000)
    b.add_argument("--labels", type=int, default=2)
    b.add_argument("--levels", type=int, default=10)
    b.add_argument("--kernel", choices=("spatial", "bilateral"), default="bilateral")
    b.add_argument("--reps", type=int, default=5)
    b.add_argument("--out", default="-", help="CSV path, or - for stdout")

    f = sub.add_parser("fixture", help="write the seeded synthetic test problem")
    f.add_argument("--out", required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--width", type=int, default=64)
    f.add_argument("--height", type=int, default=64)
    f.add_argument("--labels", type=int, default=4)
    return parser


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "solve":
            spec = RunSpec(
                Path(args.image), Path(args.unaries), Path(args.config),
                args.solver, args.init, Path(args.out), args.seed, args.timing,
            )
            return run(spec)
        if args.command == "bench":
            sizes = doubling_sizes(args.max_n, args.min_n)
            if not sizes:
                raise RunError(f"--max-n {args.max_n} is below --min-n {args.min_n}")
            text = rows_to_csv(bench_filter(sizes, args.labels, args.levels, args.kernel, args.reps))
            if args.out == "-":
                sys.stdout.write(text)
            else:
                Path(args.out).write_text(text)
            return 0
        write_fixture(args.out, args.seed, args.width, args.height, args.labels)
        return 0
    except (RunError, ConfigError, FormatError, OSError, ValueError) as exc:
        print(f"denselp: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
