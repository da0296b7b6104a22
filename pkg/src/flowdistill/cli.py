"""``flowdistill`` command-line entry point.

Every subcommand writes deterministic files into ``--out``; wall-clock
timestamps only ever reach the sidecar ``run.log``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from .analytic import GaussianMixture, MixtureField, gmm_sample
from .checkpoint import CheckpointError, checkpoint_for, load_checkpoint, load_model
from .config import PRESETS, ConfigError, ExperimentConfig, load_config, preset_config
from .fgm import DistillState, distill, init_generator
from .flowtrain import NumericalAbort, euler_sample, pretrain
from .metrics import energy_distance, field_mse, sliced_wasserstein
from .nets import OneStepGenerator, TimeDistribution
from .verify import (
    TestFunctionSpec,
    check_fixed_point,
    check_full_gradient,
    check_gradient_identity,
    check_product_identity,
    random_linear_generator,
)

logger = logging.getLogger("flowdistill")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3


class SampleFileError(ValueError):
    pass


# -- CSV helpers -------------------------------------------------------------

def _fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, str):
        return value
    return "%.17g" % float(value)


def write_samples_csv(path, x: np.ndarray, seed: int, source: str) -> None:
    x = np.asarray(x, dtype=np.float64).reshape(len(x), -1) if len(x) else np.zeros((0, x.shape[-1] if x.ndim == 2 else 2))
    dim = x.shape[1]
    lines = [f"dim={dim},seed={seed},source={source}", ",".join(f"x{i}" for i in range(dim))]
    lines += [",".join("%.17g" % v for v in row) for row in x]
    Path(path).write_text("\n".join(lines) + "\n")


def read_samples_csv(path) -> tuple[np.ndarray, dict]:
    """Parse a samples CSV; errors name the offending line (1-based)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise SampleFileError(f"{path}: cannot read: {exc}") from None
    lines = text.splitlines()
    if len(lines) < 2:
        raise SampleFileError(f"{path}: line {len(lines) + 1}: missing header")
    meta = {}
    for part in lines[0].split(","):
        key, sep, value = part.partition("=")
        if not sep:
            raise SampleFileError(f"{path}: line 1: expected key=value provenance header, got {lines[0]!r}")
        meta[key.strip()] = value.strip()
    try:
        dim = int(meta["dim"])
    except (KeyError, ValueError):
        raise SampleFileError(f"{path}: line 1: provenance header lacks an integer dim") from None
    columns = lines[1].split(",")
    if len(columns) != dim:
        raise SampleFileError(f"{path}: line 2: {len(columns)} columns but dim={dim}")
    rows = []
    for lineno, line in enumerate(lines[2:], start=3):
        if not line.strip():
            continue
        fields = line.split(",")
        if len(fields) != dim:
            raise SampleFileError(f"{path}: line {lineno}: expected {dim} values, got {len(fields)}")
        try:
            rows.append([float(f) for f in fields])
        except ValueError:
            raise SampleFileError(f"{path}: line {lineno}: non-numeric value in {line!r}") from None
    x = np.array(rows, dtype=np.float64).reshape(len(rows), dim)
    meta["dim"] = dim
    return x, meta


def write_table_csv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    keys = list(rows[0])
    for row in rows[1:]:
        keys += [k for k in row if k not in keys]
    lines = [",".join(keys)]
    lines += [",".join(_fmt(row[k]) if k in row else "" for k in keys) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def _scatter_png(csv_path: Path) -> None:
    """Best-effort scatter render next to a 2-D samples CSV."""
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib not available; skipping %s", csv_path.with_suffix(".png"))
        return
    x, meta = read_samples_csv(csv_path)
    if meta["dim"] != 2:
        return
    fig, ax = plt.subplots(figsize=(4, 4))
    ax.scatter(x[:, 0], x[:, 1], s=2, alpha=0.3)
    ax.set_xlim(-6, 6)
    ax.set_ylim(-6, 6)
    ax.set_aspect("equal")
    ax.set_title(meta.get("source", ""))
    fig.savefig(csv_path.with_suffix(".png"), dpi=100, metadata={"Software": None})
    plt.close(fig)


# -- shared plumbing ---------------------------------------------------------

def _resolve_config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError("--config", "a config file or preset name is required")
    path = Path(args.config)
    if not path.exists() and args.config in PRESETS:
        cfg = preset_config(args.config)
    else:
        cfg = load_config(path)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args, cfg: ExperimentConfig | None) -> Path:
    out = Path(args.out if args.out is not None else (cfg.out_dir if cfg is not None else "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _attach_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("flowdistill")
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    return handler


def _oracle_data(q0: GaussianMixture, n: int, seed: int) -> np.ndarray:
    return gmm_sample(q0, n, np.random.default_rng([seed, 4]))


def _sw(a, b, cfg: ExperimentConfig, seed: int) -> float:
    return sliced_wasserstein(a, b, cfg.metrics.n_proj, np.random.default_rng([seed, 5]))


# -- subcommands -------------------------------------------------------------

def run_pretrain(args) -> int:
    cfg = _resolve_config(args)
    if args.steps is not None:
        cfg.pretrain.steps = args.steps
    out = _out_dir(args, cfg)
    handler = _attach_log(out)
    try:
        q0 = cfg.target()
        seed = cfg.seed
        net = cfg.network.build(q0.dim).init(np.random.default_rng([seed, 1]))
        # field error is reported away from the endpoints (the criterion window)
        probe_t = TimeDistribution(t_min=0.05, t_max=0.95)
        probe = lambda ema: field_mse(ema, q0, cfg.metrics.probe_n, probe_t, np.random.default_rng([seed, 2]))  # noqa: E731
        logger.info("pretrain start: %d steps, config %s", cfg.pretrain.steps, cfg.digest())
        result = pretrain(q0, cfg.pretrain, net=net, probe=probe)
        write_table_csv(out / "pretrain_curve.csv", result.history)
        ckpt = checkpoint_for(result.net, "teacher", ema=result.ema, step=result.steps, config_hash=cfg.digest())
        ckpt.save(out / "teacher.ckpt")
        samples = euler_sample(result.ema, cfg.metrics.n_samples, cfg.metrics.euler_steps, np.random.default_rng([seed, 3]))
        write_samples_csv(out / "samples_teacher_euler.csv", samples, seed, f"teacher-euler{cfg.metrics.euler_steps}")
        summary = {
            "field_mse": field_mse(result.ema, q0, cfg.metrics.field_mse_n, probe_t, np.random.default_rng([seed, 6])),
            "sliced_w2": _sw(samples, _oracle_data(q0, cfg.metrics.n_samples, seed), cfg, seed),
            "steps": result.steps,
        }
        (out / "pretrain_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        cfg.save(out / "config.json")
        if args.plot:
            _scatter_png(out / "samples_teacher_euler.csv")
        logger.info("pretrain done: %s", summary)
        print(f"field_mse {summary['field_mse']:.6g}  sliced_w2 {summary['sliced_w2']:.6g}")
    finally:
        logging.getLogger("flowdistill").removeHandler(handler)
        handler.close()
    return EXIT_OK


def run_distill(args) -> int:
    cfg = _resolve_config(args)
    if args.steps is not None:
        cfg.distill.steps = args.steps
    if args.teacher is None and not args.analytic_teacher:
        raise ConfigError("--teacher", "give a teacher checkpoint or --analytic-teacher")
    out = _out_dir(args, cfg)
    handler = _attach_log(out)
    try:
        q0 = cfg.target()
        seed = cfg.seed
        expected = cfg.network.build(q0.dim).arch()
        net = None
        if args.teacher is not None:
            ckpt = load_checkpoint(args.teacher)
            if ckpt.kind != "teacher":
                raise CheckpointError(f"{args.teacher} holds a {ckpt.kind} model, not a teacher")
            net = load_model(ckpt, expected_arch=expected)
        if net is None:
            net = cfg.network.build(q0.dim).init(np.random.default_rng([seed, 1]))
        teacher = MixtureField(q0) if args.analytic_teacher else net
        d = cfg.distill
        generator = init_generator(net, d.t_star, d.c_in, d.c_skip, d.c_out, d.c_noise)
        state = DistillState.create(generator, teacher, d)

        z = np.random.default_rng([seed, 3]).standard_normal((cfg.metrics.n_samples, q0.dim))
        data = _oracle_data(q0, cfg.metrics.n_samples, seed)
        probe_z = z[: cfg.metrics.probe_n]
        probe_data = data[: cfg.metrics.probe_n]
        probe = lambda g: {"sliced_w2": _sw(g(probe_z), probe_data, cfg, seed)}  # noqa: E731

        before = generator(z)
        write_samples_csv(out / "samples_before.csv", before, seed, "generator-init")
        logger.info("distill start: %d steps, config %s", d.steps, cfg.digest())
        try:
            distill(state, d, probe=probe)
        finally:
            write_table_csv(out / "distill_curve.csv", state.history)
        final = state.ema_generator()
        after = final(z)
        write_samples_csv(out / "samples_after.csv", after, seed, "generator")
        h = cfg.digest()
        checkpoint_for(state.generator, "generator", ema=final, step=state.step, config_hash=h).save(out / "generator.ckpt")
        checkpoint_for(state.flow, "online-flow", step=state.step, config_hash=h).save(out / "online_flow.ckpt")
        summary = {
            "steps": state.step,
            "sliced_w2_before": _sw(before, data, cfg, seed),
            "sliced_w2_after": _sw(after, data, cfg, seed),
            "energy_after": energy_distance(after, data),
            "teacher": "analytic" if args.analytic_teacher else "network",
        }
        (out / "distill_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        cfg.save(out / "config.json")
        if args.plot:
            _scatter_png(out / "samples_before.csv")
            _scatter_png(out / "samples_after.csv")
        logger.info("distill done: %s", summary)
        print(f"sliced_w2 before {summary['sliced_w2_before']:.6g}  after {summary['sliced_w2_after']:.6g}")
    finally:
        logging.getLogger("flowdistill").removeHandler(handler)
        handler.close()
    return EXIT_OK


def run_sample(args) -> int:
    if args.checkpoint is None:
        raise ConfigError("--checkpoint", "a checkpoint path is required")
    ckpt = load_checkpoint(args.checkpoint)
    model = load_model(ckpt)
    seed = 0 if args.seed is None else args.seed
    n = 1000 if args.n is None else args.n
    if n < 0:
        raise ConfigError("--n", "must be >= 0")
    out = Path(args.out) if args.out is not None else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    if isinstance(model, OneStepGenerator):
        if args.steps is not None and args.steps != 1:
            warnings.warn("one-step model; steps ignored", stacklevel=1)
            print("warning: one-step model; steps ignored", file=sys.stderr)
        x = model(rng.standard_normal((n, model.dim)))
        source = "generator"
    else:
        steps = 50 if args.steps is None else args.steps
        if steps < 1:
            raise ConfigError("--steps", "must be >= 1")
        x = euler_sample(model, n, steps, rng)
        source = f"{ckpt.kind}-euler{steps}"
    path = out / "samples.csv"
    write_samples_csv(path, x, seed, source)
    if args.plot:
        _scatter_png(path)
    print(f"wrote {n} samples to {path}")
    return EXIT_OK


def random_teacher(dim: int, k: int, rng: np.random.Generator) -> GaussianMixture:
    """Random diagonal mixture used as the verification teacher."""
    return GaussianMixture(rng.dirichlet(np.full(k, 2.0)), 2.0 * rng.standard_normal((k, dim)), rng.uniform(0.2, 1.0, (k, dim)))


def verify_suite(
    cfg: ExperimentConfig, n: int | None = None, seed: int | None = None, dim: int = 2, fixed_point: bool = True
) -> list:
    """All identity checks for ``cfg.verify.n_configs`` random linear generators.

    Per generator and time: the product identity with a fixed and a
    parameter-dependent test function, the gradient identity, the full
    gradient against finite differences and (unless ``fixed_point`` is off)
    the fixed-point check.
    """
    v = cfg.verify
    n = v.n if n is None else n
    seed = cfg.seed if seed is None else seed
    n_chunks = min(v.n_chunks, n)
    n = (n // n_chunks) * n_chunks
    reports = []
    for c in range(v.n_configs):
        rng = np.random.default_rng([seed, 100, c])
        gen = random_linear_generator(dim, dim, rng)
        teacher = MixtureField(random_teacher(dim, v.teacher_components, rng))
        f_affine = TestFunctionSpec.random("affine", dim, rng)
        f_param = TestFunctionSpec.random("param", dim, rng)
        for t in v.times:
            batch = [
                check_product_identity(gen, f_affine, t, n, rng),
                check_product_identity(gen, f_param, t, n, rng),
                check_gradient_identity(gen, teacher, t, n, v.fd_step, rng, n_chunks),
                check_full_gradient(gen, teacher, [t], n, rng, n_chunks=n_chunks),
            ]
            if fixed_point:
                batch.append(check_fixed_point(gen, t, n, rng, n_chunks))
            for report in batch:
                report.config.update({"generator": c})
                reports.append(report)
    return reports


def run_verify(args) -> int:
    cfg = _resolve_config(args) if args.config is not None else ExperimentConfig(seed=args.seed or 0)
    out = _out_dir(args, cfg if args.out is None else None) if args.out is not None else None
    reports = verify_suite(cfg, n=args.n)
    print(f"{'identity':<18} {'cfg':>3} {'t':>4} {'max|lhs-rhs|':>13} {'max z':>7} pass")
    for r in reports:
        gap = float(np.max(np.abs(r.lhs - r.rhs)))
        print(f"{r.name:<18} {r.config['generator']:>3} {r.config.get('t', r.config.get('t_grid', [0])[0]):>4} "
              f"{gap:>13.4e} {float(np.max(r.z_scores)):>7.3f} {'ok' if r.passed else 'FAIL'}")
    passed = all(r.passed for r in reports)
    if out is not None:
        report = {"passed": passed, "seed": cfg.seed, "n": reports[0].n, "checks": [r.to_dict() for r in reports]}
        (out / "verify_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    print(f"{sum(r.passed for r in reports)}/{len(reports)} checks passed")
    return EXIT_OK if passed else EXIT_VERIFY


def run_eval(args) -> int:
    if not args.files:
        raise ConfigError("files", "at least one samples CSV is required")
    sets = [(path, *read_samples_csv(path)) for path in args.files]
    dims = {meta["dim"] for _, _, meta in sets}
    if len(dims) != 1:
        raise ConfigError("files", f"dimension mismatch between sample files: {sorted(dims)}")
    cfg = None
    if args.config is not None:
        cfg = _resolve_config(args)
        q0 = cfg.target()
        if q0.dim not in dims:
            raise ConfigError("mixture", f"mixture has dim {q0.dim} but samples have dim {dims.pop()}")
        seed = cfg.seed
        n = cfg.metrics.n_samples if args.n is None else args.n
        reference = ("oracle", _oracle_data(q0, n, seed))
        pairs = [(path, x, reference) for path, x, _ in sets]
    else:
        if len(sets) != 2:
            raise ConfigError("files", "give exactly two sample files, or --config for an oracle reference")
        cfg = ExperimentConfig(seed=args.seed or 0)
        seed = cfg.seed
        pairs = [(sets[0][0], sets[0][1], (str(sets[1][0]), sets[1][1]))]
    rows = []
    for path, x, (ref_name, ref) in pairs:
        if len(x) == 0 or len(ref) == 0:
            raise ConfigError("files", f"{path}: cannot compare an empty sample set")
        rows.append({
            "samples": str(path),
            "reference": ref_name,
            "n": len(x),
            "sliced_w2": _sw(x, ref, cfg, seed),
            "energy": energy_distance(x, ref),
        })
    print(f"{'samples':<40} {'reference':<20} {'n':>7} {'sliced_w2':>12} {'energy':>12}")
    for row in rows:
        print(f"{row['samples']:<40} {row['reference']:<20} {row['n']:>7} {row['sliced_w2']:>12.6g} {row['energy']:>12.6g}")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_table_csv(out / "eval.csv", rows)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowdistill", description="Flow-matching pretraining and one-step distillation on 2-D mixtures.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="config JSON path or preset name (%s)" % ", ".join(PRESETS))
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out", help="output directory")
        return p

    p = common(sub.add_parser("pretrain", help="train a teacher velocity field"))
    p.add_argument("--steps", type=int)
    p.add_argument("--plot", action="store_true", help="also render scatter PNGs")
    p.set_defaults(func=run_pretrain)

    p = common(sub.add_parser("distill", help="distil a teacher into a one-step generator"))
    p.add_argument("--teacher", help="teacher checkpoint (also used to initialise the generator)")
    p.add_argument("--analytic-teacher", action="store_true", help="use the closed-form mixture field as teacher")
    p.add_argument("--steps", type=int)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=run_distill)

    p = common(sub.add_parser("sample", help="draw samples from a checkpoint"), config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--plot", action="store_true")
    p.set_defaults(func=run_sample)

    p = common(sub.add_parser("verify", help="Monte-Carlo identity suite"))
    p.add_argument("--n", type=int, help="Monte-Carlo sample count per check")
    p.set_defaults(func=run_verify)

    p = common(sub.add_parser("eval", help="sliced-W2 and energy distance between sample sets"))
    p.add_argument("files", nargs="*", help="samples CSV files")
    p.add_argument("--n", type=int, help="oracle sample count when --config is given")
    p.set_defaults(func=run_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, CheckpointError, SampleFileError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalAbort as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
