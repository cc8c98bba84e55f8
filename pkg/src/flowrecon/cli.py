"""Command-line front end: ``flowrecon run``, ``design-study`` and ``export-design``.

Configs are flat ``key = value`` text files with dotted section prefixes::

    task = density2d
    seed = 0
    model.kind = rq_spline
    optim.steps = 2000
    problem.phantom = two_blob

Exit codes: 0 success, 2 configuration error, 3 numeric failure.
``FLOWRECON_THREADS`` caps the XLA CPU thread pool; it must be read before
JAX is imported, so the numeric modules are imported lazily here.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from .errors import ConfigError, NumericError

TASKS = ("density2d", "mri", "interferometry", "design_study")


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(text)
        return text
    parse.__name__ = "one of " + "|".join(options)
    return parse


# key -> (parser, default); None default means required, "" means optional/unset
SCHEMA = {
    "task": (_choice(*TASKS), None),
    "seed": (int, None),
    "output_dir": (str, "flowrecon_out"),
    "model.kind": (_choice("affine", "rq_spline", "spline"), "rq_spline"),
    "model.steps": (int, 6),
    "model.layers_per_step": (int, 4),
    "model.hidden": (int, 64),
    "model.blocks": (int, 1),
    "model.bins": (int, 8),
    "model.tail_bound": (float, 3.0),
    "model.s_max": (float, 3.0),
    "sampler.scheme": (str, "LPSS"),
    "sampler.groups": (str, ""),
    "boost.stages": (int, 1),
    "boost.component_steps": (int, -1),
    "boost.warmup_steps": (int, 0),
    "boost.weight_lr": (float, 0.01),
    "boost.weight_tol": (float, 1e-4),
    "boost.weight_iters": (int, 100),
    "boost.weight_samples": (int, 256),
    "fd.weight": (float, 0.0),
    "fd.eps": (float, 1e-3),
    "fd.directions": (int, 1),
    "fd.bidirectional": (_bool, True),
    "optim.steps": (int, 1000),
    "optim.lr": (float, 1e-4),
    "optim.batch_size": (int, 32),
    "problem.image": (str, ""),
    "problem.phantom": (_choice("ring", "two_blob", "shepp_logan_like", "glyph_s", "glyph_x"), "ring"),
    "problem.size": (int, 32),
    "problem.asymmetry": (float, 0.0),
    "problem.sigma": (float, -1.0),
    "problem.lambda": (float, -1.0),
    "problem.omega": (_choice("none", "l1", "tv", "l1+tv"), ""),
    "problem.accel": (float, 4.0),
    "problem.center_fraction": (float, 0.08),
    "problem.mask": (str, ""),
    "problem.uv": (str, ""),
    "problem.n_uv": (int, 40),
    "problem.max_freq": (float, 8.0),
    "problem.amplitude_only": (_bool, False),
    "problem.positive": (_bool, True),
    "problem.noise_seed": (int, -1),
    "output.n_samples": (int, 1000),
    "output.scheme": (str, "SRS"),
    "output.prdc_k": (int, 5),
    "output.k_modes": (int, 1),
    "study.schemes": (str, "SRS,LHS,LPSS,Sobol"),
    "study.g": (str, "additive"),
    "study.n": (int, 64),
    "study.d": (int, 2),
    "study.replicates": (int, 500),
}

PATH_KEYS = ("problem.image", "problem.mask", "problem.uv")


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; later keys override earlier ones."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'", field=line)
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = value
    return out


@dataclass(frozen=True)
class RunConfig:
    values: dict
    base_dir: Path

    @classmethod
    def from_mapping(cls, raw: dict, base_dir=".") -> "RunConfig":
        base_dir = Path(base_dir)
        values = {}
        for key in raw:
            if key not in SCHEMA:
                raise ConfigError(f"unknown config field '{key}'", field=key)
        for key, (parser, default) in SCHEMA.items():
            if key in raw and raw[key] == "" and default == "":
                values[key] = ""
            elif key in raw:
                try:
                    values[key] = parser(raw[key])
                except ValueError:
                    kind = getattr(parser, "__name__", "value")
                    raise ConfigError(f"field '{key}': cannot parse {raw[key]!r} as {kind}", field=key)
            elif default is None:
                raise ConfigError(f"missing required field '{key}'", field=key)
            else:
                values[key] = default
        for key in PATH_KEYS:
            if values[key]:
                p = Path(values[key])
                p = p if p.is_absolute() else base_dir / p
                if not p.exists():
                    raise ConfigError(f"file not found: {p} (field '{key}')", field=key)
                values[key] = str(p.resolve())
        out = Path(values["output_dir"])
        values["output_dir"] = str((out if out.is_absolute() else base_dir / out).resolve())
        cfg = cls(values, base_dir)
        cfg._validate()
        return cfg

    def __getitem__(self, key):
        return self.values[key]

    def _validate(self):
        from . import sampling

        v = self.values
        positive_ints = ("model.layers_per_step", "model.hidden", "model.bins", "optim.batch_size",
                         "boost.stages", "output.n_samples", "output.prdc_k", "output.k_modes",
                         "fd.directions", "boost.weight_iters", "boost.weight_samples", "study.n",
                         "study.d", "problem.size")
        for key in positive_ints:
            if v[key] < 1:
                raise ConfigError(f"field '{key}' must be >= 1", field=key)
        for key in ("optim.steps", "model.steps", "model.blocks", "boost.warmup_steps"):
            if v[key] < 0:
                raise ConfigError(f"field '{key}' must be >= 0", field=key)
        for key in ("optim.lr", "fd.eps", "boost.weight_lr", "boost.weight_tol", "model.tail_bound",
                    "model.s_max"):
            if not v[key] > 0:
                raise ConfigError(f"field '{key}' must be > 0", field=key)
        if v["fd.weight"] < 0:
            raise ConfigError("field 'fd.weight' must be >= 0", field="fd.weight")
        if v["study.replicates"] < 30:
            raise ConfigError("field 'study.replicates' must be >= 30", field="study.replicates")
        for key in ("sampler.scheme", "output.scheme"):
            sampling.check_scheme(v[key])
        for s in v["study.schemes"].split(","):
            try:
                sampling.check_scheme(s.strip())
            except ConfigError:
                raise ConfigError(f"unknown scheme {s.strip()!r} in 'study.schemes'", field="study.schemes")

    def snapshot(self) -> str:
        """Resolved config text; running it reproduces the run."""
        lines = []
        for key in SCHEMA:
            value = self.values[key]
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{key} = {value}")
        return "\n".join(lines) + "\n"


def load_config(path, overrides: dict | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"file not found: {path}", field="config")
    raw = parse_config_text(path.read_text())
    raw.update(overrides or {})
    return RunConfig.from_mapping(raw, path.parent)


# ---------------------------------------------------------------- problem assembly


def _grouping(cfg, d):
    from . import sampling

    text = cfg["sampler.groups"]
    if not text:
        return None
    try:
        groups = [tuple(int(i) for i in g.split()) for g in text.split(";") if g.strip()]
        return sampling.PssGrouping(tuple(groups))
    except (ValueError, ConfigError) as exc:
        raise ConfigError(f"field 'sampler.groups': {exc}", field="sampler.groups")


def _train_config(cfg, d):
    from . import boosting, flows, variational

    kind = "rq_spline" if cfg["model.kind"] in ("spline", "rq_spline") else "affine"
    flow = variational.FlowConfig(kind, cfg["model.steps"], cfg["model.layers_per_step"], cfg["model.hidden"],
                                  cfg["model.blocks"], cfg["model.bins"], cfg["model.tail_bound"],
                                  cfg["model.s_max"])
    fd = flows.FdPenaltyConfig(cfg["fd.eps"], cfg["fd.directions"], cfg["fd.weight"], cfg["fd.bidirectional"])
    weights = boosting.WeightUpdateConfig(cfg["boost.weight_lr"], cfg["boost.weight_tol"],
                                          cfg["boost.weight_iters"], cfg["boost.weight_samples"],
                                          cfg["sampler.scheme"])
    comp = cfg["boost.component_steps"]
    return variational.TrainConfig(
        steps=cfg["optim.steps"], batch_size=cfg["optim.batch_size"], scheme=cfg["sampler.scheme"],
        grouping=_grouping(cfg, d), learning_rate=cfg["optim.lr"], flow=flow, fd=fd,
        stages=cfg["boost.stages"], component_steps=comp if comp >= 0 else None,
        warmup_steps=cfg["boost.warmup_steps"], weights=weights, seed=cfg["seed"],
    )


def _ground_truth_image(cfg):
    from . import forward_ops, io

    if cfg["problem.image"]:
        return io.load_image(cfg["problem.image"])
    return forward_ops.make_phantom(cfg["problem.phantom"], cfg["problem.size"], cfg["problem.asymmetry"])


def _noise_seed(cfg):
    return cfg["problem.noise_seed"] if cfg["problem.noise_seed"] >= 0 else cfg["seed"] + 1


def build_problem(cfg):
    """Return ``(target, ground_truth_image or None, extras dict)`` for the configured task."""
    import numpy as np

    from . import forward_ops, io, variational

    task = cfg["task"]
    truth = _ground_truth_image(cfg)
    if task == "density2d":
        density = forward_ops.image_energy_density(truth)
        return variational.image_density_target(density), truth, {"density": density}
    if task == "mri":
        H, W = truth.shape
        mask = (io.read_mask_csv(cfg["problem.mask"]) if cfg["problem.mask"] else
                forward_ops.make_cartesian_mask(H, W, cfg["problem.accel"], cfg["problem.center_fraction"],
                                                cfg["seed"]))
        if (mask.height, mask.width) != (H, W):
            raise ConfigError("mask shape does not match the image", field="problem.mask")
        sigma = cfg["problem.sigma"]
        if sigma <= 0:
            sigma = 0.01 * abs(truth.sum()) / np.sqrt(truth.size)  # 1% of the unitary DC magnitude
        y = forward_ops.masked_fft_forward(truth, mask, sigma, _noise_seed(cfg))
        lam = max(cfg["problem.lambda"], 0.0)
        omega = cfg["problem.omega"] or "none"
        problem = variational.InverseProblem(forward_ops.masked_fft_operator(mask), y, sigma, omega, lam, truth,
                                             cfg["problem.positive"])
        return problem, truth, {"mask": mask, "measurement": y}
    if task == "interferometry":
        uv = (io.read_uv_csv(cfg["problem.uv"]) if cfg["problem.uv"] else
              forward_ops.random_uv_table(cfg["problem.n_uv"], cfg["problem.max_freq"], 0.0, cfg["seed"]))
        sigma = cfg["problem.sigma"] if cfg["problem.sigma"] > 0 else 0.01 * float(truth.sum())
        uv = forward_ops.UvTable(uv.points, np.where(uv.noise_sigma > 0, uv.noise_sigma, sigma))
        op = forward_ops.visibility_operator(uv, truth.shape, cfg["problem.amplitude_only"])
        y = forward_ops.visibility_forward(truth, uv, _noise_seed(cfg), cfg["problem.amplitude_only"])
        lam = cfg["problem.lambda"] if cfg["problem.lambda"] >= 0 else 1e-4
        omega = cfg["problem.omega"] or "tv"
        problem = variational.InverseProblem(op, y, sigma, omega, lam, truth, cfg["problem.positive"])
        return problem, truth, {"uv": uv, "measurement": y}
    raise ConfigError(f"task {task!r} has no inverse problem", field="task")


# ---------------------------------------------------------------- artifacts


def _metrics_csv(rows) -> str:
    lines = ["metric,value"] + [f"{k},{v!r}" if isinstance(v, float) else f"{k},{v}" for k, v in rows]
    return "\n".join(lines) + "\n"


def _write_map(out, name, image, meta):
    from . import io

    pix, (offset, scale) = io.scaled_pgm(image, 16)
    io.write_pgm(out / f"{name}.pgm", pix, 16)
    io.write_raw(out / f"{name}.f32", image)
    meta[name] = {"offset": offset, "scale": scale, "bits": 16}


def run(cfg: RunConfig) -> Path:
    """Execute a configured run and write all artifacts into ``output_dir``."""
    import json

    import numpy as np

    from . import boosting, flows, forward_ops, io, metrics, variational

    out = Path(cfg["output_dir"])
    out.mkdir(parents=True, exist_ok=True)
    if cfg["task"] == "design_study":
        _design_study_csv(out / "design_study.csv", cfg["study.schemes"].split(","), cfg["study.g"],
                          cfg["study.n"], cfg["study.d"], cfg["study.replicates"], cfg["seed"])
        io.atomic_write_text(out / "config.resolved", cfg.snapshot())
        return out

    target, truth, extras = build_problem(cfg)
    tcfg = _train_config(cfg, target.d)
    model, history = variational.fit_posterior(target, tcfg)
    image_shape = None if cfg["task"] == "density2d" else truth.shape
    ps = variational.posterior_sample(model, cfg["output.n_samples"], cfg["output.scheme"], cfg["seed"] + 12345,
                                      image_shape=image_shape)

    if isinstance(model, flows.FlowStack):
        io.atomic_write(out / "model.flow", flows.flow_to_bytes(model))
    else:
        io.atomic_write(out / "model.boost", boosting.boosted_to_bytes(model))
    variational.write_loss_history(history, out / "loss_history.tmp")
    os.replace(out / "loss_history.tmp", out / "loss_history.csv")
    io.write_raw(out / "samples.f32", ps.samples,
                 {"rows": ps.n, "cols": int(ps.samples.shape[1]),
                  "image_shape": list(image_shape) if image_shape else None})

    rows = [("steps", len(history)), ("final_total", float(history[-1].total) if history else float("nan"))]
    maps_meta = {}
    if cfg["task"] == "density2d":
        density = extras["density"]
        real = density.sample(ps.n, cfg["seed"] + 999)
        rep = metrics.prdc(real, ps.samples, cfg["output.prdc_k"])
        rows += [("precision", rep.precision), ("recall", rep.recall), ("density", rep.density),
                 ("coverage", rep.coverage)]
        H, W = truth.shape
        hist, _, _ = np.histogram2d(1.0 - ps.samples[:, 1], ps.samples[:, 0], bins=(H, W), range=[[0, 1], [0, 1]])
        _write_map(out, "histogram", hist, maps_meta)
    else:
        stats = metrics.posterior_stats(ps, truth)
        rows += [("mean_of_std", stats.mean_of_std), ("mean_abs_error", stats.mean_abs_error),
                 ("psnr_mean", metrics.psnr(stats.mean_image, truth))]
        if cfg["task"] == "mri":
            zf = forward_ops.zero_filled_reconstruction(extras["measurement"], extras["mask"])
            rows.append(("psnr_zero_filled", metrics.psnr(zf, truth)))
        _write_map(out, "mean", stats.mean_image, maps_meta)
        _write_map(out, "std", stats.std_image, maps_meta)
        _write_map(out, "abserr", stats.abs_error_image, maps_meta)
        if cfg["output.k_modes"] > 1:
            labels, reports = metrics.mode_cluster(ps, cfg["output.k_modes"], cfg["seed"], truth)
            for j, r in enumerate(reports):
                rows.append((f"mode{j + 1}_fraction", float(np.mean(labels == j))))
                if r is not None:
                    rows.append((f"mode{j + 1}_mean_abs_error", r.mean_abs_error))
    if isinstance(model, boosting.BoostedFlow):
        for j, w in enumerate(boosting.effective_weights(model)):
            rows.append((f"weight{j + 1}", float(w)))
    io.atomic_write_text(out / "maps.json", json.dumps(maps_meta, sort_keys=True) + "\n")
    io.atomic_write_text(out / "metrics.csv", _metrics_csv(rows))
    io.atomic_write_text(out / "config.resolved", cfg.snapshot())
    return out


def _design_study_csv(path, schemes, g, n, d, replicates, seed):
    from . import io, metrics, sampling

    schemes = [sampling.check_scheme(s.strip()) for s in schemes if s.strip()]
    study = metrics.mc_variance_study(schemes, g, n, d, replicates, seed)
    lines = ["scheme,variance,ratio_vs_srs"]
    lines += [f"{s},{study.variances[s]!r},{study.ratios[s]!r}" for s in schemes]
    io.atomic_write_text(path, "\n".join(lines) + "\n")
    return study


# ---------------------------------------------------------------- entry point


def _configure_threads():
    threads = os.environ.get("FLOWRECON_THREADS")
    if not threads:
        return
    try:
        n = int(threads)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"FLOWRECON_THREADS must be a positive integer, got {threads!r}",
                          field="FLOWRECON_THREADS")
    if n == 1 and "jax" not in sys.modules:
        flags = os.environ.get("XLA_FLAGS", "")
        os.environ["XLA_FLAGS"] = (flags + " --xla_cpu_multi_thread_eigen=false").strip()
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


def _parser():
    p = argparse.ArgumentParser(prog="flowrecon", description="Variational flow posteriors for imaging.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train and sample from a config file")
    r.add_argument("config")
    r.add_argument("--no-fd-penalty", action="store_true", help="set fd.weight = 0")
    r.add_argument("--scheme", help="latent sampling scheme for training")
    r.add_argument("--coupling", choices=("affine", "spline"))
    r.add_argument("--stages", type=int, help="number of boosting components C")
    r.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")

    s = sub.add_parser("design-study", help="variance of design means versus SRS")
    s.add_argument("--schemes", default="SRS,LHS,LPSS,Sobol")
    s.add_argument("--g", default="additive")
    s.add_argument("--n", type=int, default=64)
    s.add_argument("--d", type=int, default=2)
    s.add_argument("--replicates", type=int, default=500)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", default="-", help="CSV path, '-' for stdout")

    e = sub.add_parser("export-design", help="write a unit-cube design as CSV")
    e.add_argument("--scheme", required=True)
    e.add_argument("--n", type=int, required=True)
    e.add_argument("--d", type=int, required=True)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", default="-", help="CSV path, '-' for stdout")
    return p


def _overrides(args) -> dict:
    over = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}", field=item)
        k, v = item.split("=", 1)
        over[k.strip()] = v.strip()
    if args.no_fd_penalty:
        over["fd.weight"] = "0"
    if args.scheme:
        over["sampler.scheme"] = args.scheme
    if args.coupling:
        over["model.kind"] = "rq_spline" if args.coupling == "spline" else "affine"
    if args.stages is not None:
        over["boost.stages"] = str(args.stages)
    return over


def _emit(text, dest):
    from . import io

    if dest == "-":
        sys.stdout.write(text)
    else:
        io.atomic_write_text(dest, text)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        _configure_threads()
        if args.command == "run":
            out = run(load_config(args.config, _overrides(args)))
            print(f"artifacts written to {out}")
        elif args.command == "design-study":
            from . import sampling

            if args.replicates < 30:
                raise ConfigError("replicates must be >= 30", field="replicates")
            schemes = [sampling.check_scheme(s.strip()) for s in args.schemes.split(",") if s.strip()]
            if args.out == "-":
                import tempfile

                with tempfile.TemporaryDirectory() as tmp:
                    path = Path(tmp) / "study.csv"
                    _design_study_csv(path, schemes, args.g, args.n, args.d, args.replicates, args.seed)
                    sys.stdout.write(path.read_text())
            else:
                _design_study_csv(args.out, schemes, args.g, args.n, args.d, args.replicates, args.seed)
        else:
            import io as _stdio

            import numpy as np

            from . import sampling

            design = sampling.make_design(args.scheme, args.n, args.d, args.seed)
            buf = _stdio.StringIO()
            header = ",".join(f"dim{j}" for j in range(design.d))
            np.savetxt(buf, design.points, delimiter=",", header=header, comments="", fmt="%.17g")
            _emit(buf.getvalue(), args.out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename or exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        step = getattr(exc, "step", None)
        where = f" at step {step}" if step is not None else ""
        print(f"error: numeric failure{where}: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
