"""Command-line front end.

Exit codes: 0 success, 2 I/O error, 3 numerical failure, 4 configuration
error. On failure a JSON object ``{"error": {...}}`` is written to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import io as mio
from .energy import Landmarks, NumericalError
from .geometry import Surface, normalize_pair
from .graph import build_graph
from .metrics import overlap_ratio, pointwise_error, rmse, scene_flow_rmse
from .solver import SolverConfig, register
from .synth import add_noise, partial_overlap_crop

EXIT_OK, EXIT_IO, EXIT_NUMERICAL, EXIT_CONFIG = 0, 2, 3, 4

log = logging.getLogger("nrreg")


class ConfigError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with 2, which we reserve for I/O
        raise ConfigError(message)


# option name -> (type, default); shared by flags and the key=value config file
_SOLVER_OPTS = {
    "k-alpha": (float, 100.0),
    "k-beta": (float, 1.0),
    "radius-mult": (float, 5.0),
    "eps": (float, 1e-5),
    "max-iter": (int, 100),
    "anderson-m": (int, 5),
    "nu-a-init": (float, None),
    "nu-a-min": (float, None),
    "nu-r-init": (float, None),
    "seed": (int, 0),
    "gt": (str, "none"),
    "flow": (str, None),
    "complete-target": (str, None),
    "target-mask": (str, None),
    "landmarks": (str, None),
    "figures": (str, None),
    "error-channel": (bool, False),
}


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def read_config_file(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; keys may use ``-`` or ``_``."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("_", "-")
        if key not in _SOLVER_OPTS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        val = val.strip("\"'")
        typ = _SOLVER_OPTS[key][0]
        try:
            out[key] = _parse_bool(val) if typ is bool else typ(val)
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {val!r}") from None
    return out


def _resolve(args) -> dict:
    """Merge defaults < config file < explicit flags."""
    opts = {k: d for k, (_, d) in _SOLVER_OPTS.items()}
    if args.config:
        opts.update(read_config_file(args.config))
    for k in _SOLVER_OPTS:
        v = getattr(args, k.replace("-", "_"), None)
        if v is not None:
            opts[k] = v
    if opts["gt"] not in ("none", "identity"):
        raise ConfigError("--gt must be 'none' or 'identity'")
    return opts


def _solver_config(opts) -> SolverConfig:
    try:
        return SolverConfig(
            k_alpha=opts["k-alpha"],
            k_beta=opts["k-beta"],
            eps=opts["eps"],
            max_iter=opts["max-iter"],
            anderson_m=opts["anderson-m"],
            radius_mult=opts["radius-mult"],
            nu_a_init=opts["nu-a-init"],
            nu_a_min=opts["nu-a-min"],
            nu_r_init=opts["nu-r-init"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _stage_dict(st) -> dict:
    return {
        "nu_a": st.nu_a,
        "nu_r": st.nu_r,
        "alpha": st.alpha,
        "beta": st.beta,
        "converged": st.converged,
        "n_solves": st.n_solves,
        "degenerate_rotations": st.degenerate_rotations,
        "iterations": [
            {
                "E": r.E,
                "E_align": r.E_align,
                "E_reg": r.E_reg,
                "E_rot": r.E_rot,
                "E_landmark": r.E_landmark,
                "kind": r.kind,
                "accepted": r.accepted,
                "aa_accepted": r.aa_accepted,
                "max_disp": r.max_disp,
            }
            for r in st.iterations
        ],
    }


def compute_metrics(
    deformed,
    source_points,
    target: Surface,
    *,
    gt: str = "none",
    flow=None,
    complete_target: Surface | None = None,
    target_mask=None,
    scale: float = 1.0,
) -> tuple[dict, np.ndarray | None]:
    """Metrics in original units; also returns per-vertex errors when a ground truth exists.

    With ``gt == "identity"`` source vertex ``i`` corresponds to vertex ``i``
    of the complete target (or of the target itself when no complete target
    is given). ``target_mask`` flags which complete-target vertices survive in
    the target and enables the overlap ratio and the overlap-restricted RMSE.
    """
    metrics: dict = {}
    errors = None
    if gt == "identity":
        ref = complete_target if complete_target is not None else target
        if len(ref.points) != len(deformed):
            raise ConfigError(
                f"identity ground truth needs equal vertex counts ({len(deformed)} vs {len(ref.points)})"
            )
        errors = pointwise_error(deformed, ref.points) / scale
        metrics["rmse"] = rmse(errors)
        metrics["max_error"] = float(errors.max())
        if target_mask is not None:
            mask = np.asarray(target_mask, dtype=bool)
            if len(mask) != len(ref.points):
                raise ConfigError("target mask length does not match the complete target")
            gt_idx = np.arange(len(deformed))
            metrics["overlap"] = overlap_ratio(gt_idx, mask)
            if mask.any():
                metrics["rmse_overlap"] = rmse(errors[mask])
    if flow is not None:
        idx, vec = flow
        if len(idx) and (idx.min() < 0 or idx.max() >= len(deformed)):
            raise ConfigError("flow file references a vertex outside the source")
        metrics["rs"] = scene_flow_rmse(deformed, source_points, (idx, vec)) / scale
    return metrics, errors


def _cmd_register(args) -> int:
    opts = _resolve(args)
    cfg = _solver_config(opts)
    t0 = time.perf_counter()
    source = mio.load_surface(args.source)
    target = mio.load_surface(args.target)
    complete = mio.load_surface(opts["complete-target"]) if opts["complete-target"] else None
    mask = mio.load_mask(opts["target-mask"]) if opts["target-mask"] else None
    flow = mio.load_flows(opts["flow"]) if opts["flow"] else None
    t_load = time.perf_counter() - t0

    norm, s, t = normalize_pair(source, target)
    landmarks = None
    if opts["landmarks"]:
        si, ti = mio.load_landmarks(opts["landmarks"])
        if len(si) and (si.max() >= len(s.points) or ti.max() >= len(t.points) or min(si.min(), ti.min()) < 0):
            raise ConfigError("landmark index out of range")
        landmarks = Landmarks(si, t.points[ti])

    res = register(s, t, cfg, landmarks=landmarks)
    deformed = norm.invert(res.deformed)

    metrics, errors = compute_metrics(
        deformed, source.points, target,
        gt=opts["gt"], flow=flow, complete_target=complete, target_mask=mask,
    )
    out_surface = Surface(deformed, source.faces, source.edges)
    mio.save_surface(out_surface, args.out, scalar=errors if opts["error-channel"] else None)

    rep = res.report
    report = {
        "config": {
            "source": str(args.source),
            "target": str(args.target),
            "out": str(args.out),
            **{k.replace("-", "_"): v for k, v in opts.items()},
        },
        "normalization": {"center": norm.center.tolist(), "scale": norm.scale},
        "graph": {"n_points": rep.n_points, "n_nodes": rep.n_nodes, "n_edges": rep.n_graph_edges, "radius": rep.radius},
        "stages": [_stage_dict(st) for st in rep.stages],
        "metrics": metrics,
        "timings": {
            "load": t_load,
            **rep.timings,
            "stages": [st.wall_time for st in rep.stages],
        },
    }
    if opts["figures"]:
        from .plotting import plot_energy_trace, plot_error_histogram

        fig_dir = Path(opts["figures"])
        fig_dir.mkdir(parents=True, exist_ok=True)
        figs = [str(plot_energy_trace(rep, fig_dir / "energy.png"))]
        if errors is not None:
            figs.append(str(plot_error_histogram(errors, fig_dir / "errors.png")))
        report["figures"] = figs
    mio.write_json(report, args.report)
    return EXIT_OK


def _parse_vec3(s: str) -> np.ndarray:
    try:
        v = np.array([float(x) for x in s.split(",")])
    except ValueError:
        raise ConfigError(f"expected x,y,z, got {s!r}") from None
    if v.shape != (3,) or not np.linalg.norm(v) > 0:
        raise ConfigError(f"expected a nonzero x,y,z vector, got {s!r}")
    return v


def _cmd_synth_noise(args) -> int:
    surf = mio.load_surface(args.input)
    if args.sigma is not None and args.sigma < 0:
        raise ConfigError("--sigma must be non-negative")
    if not 0 <= args.fraction <= 1:
        raise ConfigError("--fraction must lie in [0, 1]")
    # sigma is given in units of the average edge length
    sigma = None if args.sigma is None else args.sigma * surf.avg_edge_length
    if args.mode == "dense" and sigma is None:
        raise ConfigError("dense noise needs --sigma")
    noisy = add_noise(surf, args.mode, sigma, args.fraction, args.seed)
    mio.save_surface(noisy, args.out)
    return EXIT_OK


def _cmd_synth_crop(args) -> int:
    surf = mio.load_surface(args.input)
    if surf.faces is None:
        raise ConfigError("cropping needs a triangle mesh")
    cropped, mask = partial_overlap_crop(surf, _parse_vec3(args.dir), args.mode, args.resolution)
    mio.save_surface(cropped, args.out)
    mask_path = args.mask or str(Path(args.out).with_suffix(".mask"))
    mio.save_mask(mask_path, mask)
    return EXIT_OK


def _cmd_metrics(args) -> int:
    deformed = mio.load_surface(args.deformed)
    target = mio.load_surface(args.target)
    complete = mio.load_surface(args.complete_target) if args.complete_target else None
    mask = mio.load_mask(args.target_mask) if args.target_mask else None
    flow = mio.load_flows(args.flow) if args.flow else None
    if flow is not None and not args.source:
        raise ConfigError("--flow needs --source")
    src_pts = mio.load_surface(args.source).points if args.source else None
    if src_pts is not None and len(src_pts) != len(deformed.points):
        raise ConfigError("source and deformed meshes differ in vertex count")
    if args.gt not in ("none", "identity"):
        raise ConfigError("--gt must be 'none' or 'identity'")
    metrics, _ = compute_metrics(
        deformed.points, src_pts, target, gt=args.gt, flow=flow, complete_target=complete, target_mask=mask
    )
    mio.write_json({"metrics": metrics}, args.report)
    return EXIT_OK


def _cmd_graph_dump(args) -> int:
    if not args.radius_mult > 0:
        raise ConfigError("--radius-mult must be positive")
    src = mio.load_surface(args.source)
    _, s, _ = normalize_pair(src, src)
    g = build_graph(s, args.radius_mult * s.avg_edge_length)
    mio.write_json(g.to_dict(), args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="nrreg", description="Robust non-rigid surface registration.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("register", help="deform a source surface onto a target")
    r.add_argument("--source", required=True)
    r.add_argument("--target", required=True)
    r.add_argument("--out", required=True, help="deformed mesh (.obj or .ply)")
    r.add_argument("--report", required=True, help="JSON report path, or - for stdout")
    r.add_argument("--config", help="key = value file; explicit flags take precedence")
    for name, (typ, default) in _SOLVER_OPTS.items():
        if typ is bool:
            r.add_argument(f"--{name}", action="store_const", const=True, default=None)
        else:
            r.add_argument(f"--{name}", type=typ, default=None, help=f"default: {default}")
    r.set_defaults(func=_cmd_register)

    n = sub.add_parser("synth-noise", help="add Gaussian vertex noise")
    n.add_argument("--in", dest="input", required=True)
    n.add_argument("--out", required=True)
    n.add_argument("--mode", choices=["dense", "sparse"], default="dense")
    n.add_argument("--sigma", type=float, help="standard deviation in units of the average edge length")
    n.add_argument("--fraction", type=float, default=1.0, help="share of vertices perturbed (sparse mode)")
    n.add_argument("--seed", type=int, default=0)
    n.set_defaults(func=_cmd_synth_noise)

    c = sub.add_parser("synth-crop", help="keep the part visible from a view direction")
    c.add_argument("--in", dest="input", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--dir", required=True, help="view direction x,y,z")
    c.add_argument("--mode", choices=["depth", "backface"], default="depth")
    c.add_argument("--resolution", type=int, default=512)
    c.add_argument("--mask", help="kept-vertex mask file (default: <out>.mask)")
    c.set_defaults(func=_cmd_synth_crop)

    m = sub.add_parser("metrics", help="score a deformed mesh")
    m.add_argument("--deformed", required=True)
    m.add_argument("--target", required=True)
    m.add_argument("--source")
    m.add_argument("--gt", default="identity")
    m.add_argument("--flow")
    m.add_argument("--complete-target")
    m.add_argument("--target-mask")
    m.add_argument("--report", default="-")
    m.set_defaults(func=_cmd_metrics)

    g = sub.add_parser("graph-dump", help="build the deformation graph and write it as JSON")
    g.add_argument("--source", required=True)
    g.add_argument("--radius-mult", type=float, default=5.0)
    g.add_argument("--out", default="-")
    g.set_defaults(func=_cmd_graph_dump)
    return p


def _fail(code: int, kind: str, exc: BaseException) -> int:
    err = {"error": {"type": kind, "exit_code": code, "message": str(exc)}}
    sys.stderr.write(json.dumps(err) + "\n")
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, "config", exc)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERICAL, "numerical", exc)
    except (OSError, mio.MeshFormatError) as exc:
        return _fail(EXIT_IO, "io", exc)
    except ValueError as exc:
        return _fail(EXIT_CONFIG, "config", exc)


if __name__ == "__main__":
    sys.exit(main())
