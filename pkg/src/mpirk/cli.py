"""Command-line front end.

Subcommands: `solve` runs one integration and archives report.json plus an
optional history.csv; `tableau` prints method data as JSON; `stability`
samples |R(z)| on a grid as CSV; `bench` times the four stage-solver
configurations on the graded-spectrum linear problem.

Exit codes: 0 success, 2 solver failure (unrecoverable step or step budget),
3 configuration error, 4 benchmark divergence.  MPIRK_BITS sets the default
precision.  A config file holds flat key=value lines using the long flag
names; explicit flags override file entries.
"""

import argparse
import json
import os
import re
import sys
import time
from fractions import Fraction

import gmpy2
from gmpy2 import mpfr

from .inner import (BICGSTAB, DIRECT_LU, GMRES, PRECOND_BLOCK_LU_S,
                    PRECOND_NONE, NewtonOptions, RefinementConfig)
from .integrate import (MaxStepsExceeded, StepControl, StepFailed, integrate,
                        irk_step)
from .mpnum import (PrecisionContext, mpfr_from_hex, mpfr_to_decimal,
                    mpfr_to_hex)
from .problems import make_linear_random, make_problem
from .tableau import (embedded_weights, gauss_tableau, order_residuals,
                      radau2a_tableau, stability_grid, tableau_to_json,
                      w_transform)


class _ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse variant whose usage errors surface as config errors."""

    def error(self, message):
        raise _ConfigError(message)


_HEX_FLOAT = re.compile(r"^-?[0-9a-f]+p-?\d+$")


def _scalar(ctx, text, what):
    """Parse a scalar config value: hex-float echo form, rational, or
    decimal/scientific literal."""
    text = str(text).strip()
    if _HEX_FLOAT.match(text):
        return mpfr_from_hex(text, ctx)
    try:
        return ctx.scalar(Fraction(text))
    except (ValueError, ZeroDivisionError):
        pass
    try:
        return ctx.scalar(text)
    except ValueError:
        raise _ConfigError(f"{what}: cannot parse {text!r} as a number")


def _interval(ctx, text):
    parts = str(text).split(":")
    if len(parts) != 2:
        raise _ConfigError(f"interval: expected a:b, got {text!r}")
    a = _scalar(ctx, parts[0], "interval start")
    b = _scalar(ctx, parts[1], "interval end")
    if not b > a:
        raise _ConfigError("interval: end must exceed start")
    return a, b


def _int(text, what, minimum=None, maximum=None):
    try:
        v = int(str(text), 10)
    except ValueError:
        raise _ConfigError(f"{what}: {text!r} is not an integer")
    if minimum is not None and v < minimum:
        raise _ConfigError(f"{what}: must be at least {minimum}")
    if maximum is not None and v > maximum:
        raise _ConfigError(f"{what}: must be at most {maximum}")
    return v


def _bool(text, what):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise _ConfigError(f"{what}: {text!r} is not a boolean")


def _default_bits():
    env = os.environ.get("MPIRK_BITS")
    if env is None:
        return 167
    return _int(env, "MPIRK_BITS", minimum=24)


def _versions():
    try:
        from importlib.metadata import version
        own = version("mpirk")
    except Exception:
        own = "unknown"
    import platform

    import numpy
    import scipy
    return {
        "mpirk": own,
        "python": platform.python_version(),
        "gmpy2": gmpy2.version(),
        "mpfr": gmpy2.mpfr_version(),
        "numpy": numpy.__version__,
        "scipy": scipy.__version__,
    }


# solve config: key -> (default, description); None defaults resolve later
_SOLVE_KEYS = {
    "problem": None,
    "stages": "3",
    "family": "gauss",
    "bits": None,
    "rtol": "1e-16",
    "atol": "1e-16",
    "gamma0": "1/8",
    "interval": "0:1",
    "fixed-h": None,
    "h0": None,
    "seed": "1",
    "solver": "direct",
    "s-bits": None,
    "precondition": "none",
    "controller-sign": "-1",
    "bruss-reaction": "linear",
    "max-steps": "10000000",
    "report": "report.json",
    "history": None,
}

_SOLVERS = {"direct": DIRECT_LU, "bicgstab": BICGSTAB, "gmres": GMRES}
_PRECONDS = {"none": PRECOND_NONE, "block-lu-s": PRECOND_BLOCK_LU_S}


def _read_config(path):
    out = {}
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise _ConfigError(f"config file: {exc}")
    for no, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise _ConfigError(f"{path}:{no}: expected key=value")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _SOLVE_KEYS:
            raise _ConfigError(f"{path}:{no}: unknown key {key!r}")
        out[key] = value
    return out


def _resolve_solve_config(args):
    cfg = dict(_SOLVE_KEYS)
    if args.config is not None:
        cfg.update(_read_config(args.config))
    for key in _SOLVE_KEYS:
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            cfg[key] = str(flag)
    if cfg["problem"] is None:
        raise _ConfigError("--problem is required")
    if cfg["bits"] is None:
        cfg["bits"] = str(_default_bits())
    if cfg["s-bits"] is None:
        cfg["s-bits"] = cfg["bits"]
    return cfg


def _build_method(family, m, ctx, gamma0_text):
    if family == "gauss":
        t = gauss_tableau(m, ctx)
        wt = w_transform(t)
        mode = "simplified"
    elif family == "radau2a":
        if m != 3:
            raise _ConfigError("family radau2a is the fixed 3-stage method; "
                               "use --stages 3")
        t = radau2a_tableau(ctx)
        wt = None
        mode = "quasi"
    else:
        raise _ConfigError(f"unknown family {family!r}")
    g0 = _scalar(ctx, gamma0_text, "gamma0")
    e = embedded_weights(t, g0)
    return t, wt, e, mode


def cmd_solve(args):
    cfg = _resolve_solve_config(args)
    bits = _int(cfg["bits"], "bits", minimum=24)
    ctx = PrecisionContext(bits)
    stages = _int(cfg["stages"], "stages", minimum=1)
    seed = _int(cfg["seed"], "seed", minimum=0)
    max_steps = _int(cfg["max-steps"], "max-steps", minimum=1)
    sign = _int(cfg["controller-sign"], "controller-sign")
    if sign not in (-1, 1):
        raise _ConfigError("controller-sign: must be -1 or 1")
    if cfg["bruss-reaction"] not in ("linear", "constant"):
        raise _ConfigError("bruss-reaction: must be linear or constant")
    if cfg["solver"] not in _SOLVERS:
        raise _ConfigError(f"solver: unknown {cfg['solver']!r}")
    if cfg["precondition"] not in _PRECONDS:
        raise _ConfigError(f"precondition: unknown {cfg['precondition']!r}")

    t, wt, e, mode = _build_method(cfg["family"], stages, ctx, cfg["gamma0"])
    if mode == "quasi" and cfg["solver"] != "direct":
        raise _ConfigError("family radau2a solves the full stage system "
                           "directly; --solver must be direct")

    try:
        prob = make_problem(
            cfg["problem"], ctx, seed=seed,
            literal_brusselator=cfg["bruss-reaction"] == "constant")
    except ValueError as exc:
        raise _ConfigError(str(exc))

    x0, alpha = _interval(ctx, cfg["interval"])
    s_bits = _int(cfg["s-bits"], "s-bits", minimum=24)
    try:
        ref = RefinementConfig(PrecisionContext(s_bits), ctx,
                               inner=_SOLVERS[cfg["solver"]],
                               precondition=_PRECONDS[cfg["precondition"]])
        opt = NewtonOptions(ref, mode=mode)
    except ValueError as exc:
        raise _ConfigError(str(exc))

    if cfg["fixed-h"] is not None:
        h0 = _scalar(ctx, cfg["fixed-h"], "fixed-h")
        if not h0 > 0:
            raise _ConfigError("fixed-h: must be positive")
        ctl = None
        cfg["h0"] = mpfr_to_hex(h0)
    else:
        try:
            ctl = StepControl(ctx, e.order_hat,
                              _scalar(ctx, cfg["atol"], "atol"),
                              _scalar(ctx, cfg["rtol"], "rtol"),
                              exponent_sign=sign)
        except ValueError as exc:
            raise _ConfigError(str(exc))
        if cfg["h0"] is None:
            h0 = ctx.div(ctx.sub(alpha, x0), mpfr(100))
            cfg["h0"] = mpfr_to_hex(h0)
        else:
            h0 = _scalar(ctx, cfg["h0"], "h0")
            if not h0 > 0:
                raise _ConfigError("h0: must be positive")

    try:
        rep = integrate(prob, t, wt, e, (x0, alpha), prob.y0, h0, opt,
                        ctl=ctl, max_steps=max_steps)
    except (StepFailed, MaxStepsExceeded) as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return 2

    if prob.seed is not None:
        cfg["seed"] = str(prob.seed)
    newton_total = sum(r[5] for r in rep.history)
    linear_total = sum(r[6] for r in rep.history)
    doc = {
        "config": {k: v for k, v in sorted(cfg.items()) if v is not None},
        "problem": {"name": prob.name, "n": prob.n, "seed": prob.seed},
        "versions": _versions(),
        "result": {
            "steps_accepted": rep.steps_accepted,
            "steps_rejected": rep.steps_rejected,
            "newton_iterations": newton_total,
            "linear_iterations": linear_total,
            "final_x": mpfr_to_hex(rep.final_x),
            "final_y": [mpfr_to_hex(v) for v in rep.final_y.data],
            "max_rel_error": None if rep.max_rel_error is None
            else mpfr_to_hex(rep.max_rel_error),
            "min_rel_error": None if rep.min_rel_error is None
            else mpfr_to_hex(rep.min_rel_error),
        },
        "wall_time": rep.wall_time,
    }
    with open(cfg["report"], "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")

    if cfg["history"] is not None:
        with open(cfg["history"], "w", encoding="utf-8") as fh:
            fh.write("index,x,h,err_norm,accepted,newton_iters,"
                     "linear_iters\n")
            for idx, x, h, err, acc, ni, li in rep.history:
                fh.write(f"{idx},{mpfr_to_decimal(x)},{mpfr_to_decimal(h)},"
                         f"{mpfr_to_decimal(err)},{int(acc)},{ni},{li}\n")

    rel = ("-" if rep.max_rel_error is None
           else mpfr_to_decimal(rep.max_rel_error, 6))
    print(f"accepted={rep.steps_accepted} rejected={rep.steps_rejected} "
          f"final_x={mpfr_to_decimal(rep.final_x, 12)} max_rel_error={rel}")
    return 0


def cmd_tableau(args):
    bits = args.bits if args.bits is not None else _default_bits()
    ctx = PrecisionContext(_int(bits, "bits", minimum=24))
    m = _int(args.stages, "stages", minimum=1)
    t, _, e, _ = _build_method(args.family, m, ctx, args.gamma0)
    doc = json.loads(tableau_to_json(t))
    rb, rc = order_residuals(t)
    doc["gamma0"] = args.gamma0
    doc["bhat"] = [mpfr_to_hex(x) for x in e.bhat]
    doc["order_hat"] = e.order_hat
    doc["residuals"] = {
        "quadrature_max": mpfr_to_decimal(rb, 6),
        "collocation_max": mpfr_to_decimal(rc, 6),
    }
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def cmd_stability(args):
    bits = args.bits if args.bits is not None else _default_bits()
    ctx = PrecisionContext(_int(bits, "bits", minimum=24))
    m = _int(args.stages, "stages", minimum=1)
    t, _, e, _ = _build_method(args.family, m, ctx, args.gamma0)
    if not args.embedded:
        e = None
    re_rng = _pair(ctx, args.re, "re")
    im_rng = _pair(ctx, args.im, "im")
    nx = _int(args.nx, "nx", minimum=1)
    ny = _int(args.ny, "ny", minimum=1)
    rows = stability_grid(t, e, re_rng, im_rng, nx, ny)
    out = sys.stdout if args.out is None else open(args.out, "w",
                                                   encoding="utf-8")
    try:
        out.write("re,im,abs_R\n")
        for zre, zim, mag in rows:
            out.write(f"{mpfr_to_decimal(zre)},{mpfr_to_decimal(zim)},"
                      f"{mpfr_to_decimal(mag)}\n")
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def _pair(ctx, text, what):
    parts = str(text).split(":")
    if len(parts) != 2:
        raise _ConfigError(f"{what}: expected a:b, got {text!r}")
    return (_scalar(ctx, parts[0], what), _scalar(ctx, parts[1], what))


# benchmark cells: name -> (newton mode, S bits or None meaning full width)
_BENCH_ALGOS = (
    ("iterref-dm", "quasi", 53),
    ("wtrans", "simplified", None),
    ("witerref-mm", "simplified", 84),
    ("witerref-dm", "simplified", 53),
)


def cmd_bench(args):
    if args.suite != "linear":
        raise _ConfigError(f"unknown suite {args.suite!r}")
    bits = args.bits if args.bits is not None else _default_bits()
    bits = _int(bits, "bits", minimum=84)
    m_min = _int(args.m_min, "m-min", minimum=3, maximum=12)
    m_max = _int(args.m_max, "m-max", minimum=3, maximum=12)
    if m_min > m_max:
        raise _ConfigError("m-min exceeds m-max")
    dim = _int(args.dim, "dim", minimum=1)
    seed = _int(args.seed, "seed", minimum=0)

    ctx = PrecisionContext(bits)
    prob = make_linear_random(dim, seed, ctx)
    h = ctx.scalar(Fraction(1, 2))
    exact = prob.exact(h)
    exact_norm = exact.norm_inf()

    failures = 0
    lines = ["algorithm,m,rel_error,wall_time,status"]
    for m in range(m_min, m_max + 1):
        t = gauss_tableau(m, ctx)
        wt = w_transform(t)
        for name, mode, s_bits in _BENCH_ALGOS:
            s_ctx = ctx if s_bits is None else PrecisionContext(s_bits)
            opt = NewtonOptions(RefinementConfig(s_ctx, ctx), mode=mode)
            begin = time.perf_counter()
            try:
                res = irk_step(prob, t, wt if mode == "simplified" else None,
                               None, prob.x0, prob.y0, h, opt, None)
                wall = time.perf_counter() - begin
                rel = ctx.div((res.y_next - exact).norm_inf(), exact_norm)
                lines.append(f"{name},{m},{mpfr_to_decimal(rel)},"
                             f"{wall:.6f},ok")
            except Exception as exc:
                wall = time.perf_counter() - begin
                failures += 1
                lines.append(f"{name},{m},,{wall:.6f},diverged")
                print(f"bench cell {name} m={m} failed: {exc}",
                      file=sys.stderr)

    text = "\n".join(lines) + "\n"
    if args.out is None:
        sys.stdout.write(text)
    else:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    return 4 if failures else 0


def _build_parser():
    p = _Parser(prog="mpirk", description=__doc__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    ps = sub.add_parser("solve", help="integrate one problem")
    ps.add_argument("--config", help="key=value config file")
    ps.add_argument("--problem")
    ps.add_argument("--stages", type=int)
    ps.add_argument("--family", choices=("gauss", "radau2a"))
    ps.add_argument("--bits", type=int)
    ps.add_argument("--rtol")
    ps.add_argument("--atol")
    ps.add_argument("--gamma0")
    ps.add_argument("--interval")
    ps.add_argument("--fixed-h", dest="fixed_h")
    ps.add_argument("--h0")
    ps.add_argument("--seed", type=int)
    ps.add_argument("--solver", choices=tuple(_SOLVERS))
    ps.add_argument("--s-bits", dest="s_bits", type=int)
    ps.add_argument("--precondition", choices=tuple(_PRECONDS))
    ps.add_argument("--controller-sign", dest="controller_sign",
                    choices=("-1", "1"))
    ps.add_argument("--bruss-reaction", dest="bruss_reaction",
                    choices=("linear", "constant"))
    ps.add_argument("--max-steps", dest="max_steps", type=int)
    ps.add_argument("--report")
    ps.add_argument("--history")
    ps.set_defaults(func=cmd_solve)

    pt = sub.add_parser("tableau", help="print method data as JSON")
    pt.add_argument("-m", "--stages", default=3)
    pt.add_argument("--family", choices=("gauss", "radau2a"),
                    default="gauss")
    pt.add_argument("--bits", type=int)
    pt.add_argument("--gamma0", default="1/8")
    pt.set_defaults(func=cmd_tableau)

    pg = sub.add_parser("stability", help="sample |R| on a grid as CSV")
    pg.add_argument("-m", "--stages", default=3)
    pg.add_argument("--family", choices=("gauss", "radau2a"),
                    default="gauss")
    pg.add_argument("--bits", type=int)
    pg.add_argument("--embedded", action="store_true")
    pg.add_argument("--gamma0", default="1/8")
    pg.add_argument("--re", default="-6:0")
    pg.add_argument("--im", default="-6:6")
    pg.add_argument("--nx", default=100)
    pg.add_argument("--ny", default=100)
    pg.add_argument("--out")
    pg.set_defaults(func=cmd_stability)

    pb = sub.add_parser("bench", help="compare the four solver paths")
    pb.add_argument("suite")
    pb.add_argument("--bits", type=int)
    pb.add_argument("--m-min", dest="m_min", default=3)
    pb.add_argument("--m-max", dest="m_max", default=12)
    pb.add_argument("--dim", default=128)
    pb.add_argument("--seed", default=1)
    pb.add_argument("--out")
    pb.set_defaults(func=cmd_bench)
    return p


def main(argv=None):
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "func", None) is None:
            parser.print_usage(sys.stderr)
            return 3
        return args.func(args)
    except _ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
