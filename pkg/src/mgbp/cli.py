"""Command-line entry point: ``mgbp <command> [flags]``.

Exit codes: 0 success, 1 runtime/module error, 2 usage error, 3 numeric
contract violation (e.g. uncertified operators with ``--require-certified``).
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backprojection as bp
from .convnet import identity_network, load_network, save_network, toy_network
from .freeze import filter_atlas, freeze
from .metrics import MetricReport, multiscale_l1, psnr, ssim
from .resample import (
    BLUR_SIGMA_PER_SCALE,
    Kernel,
    ResampleSpec,
    bicubic_kernel,
    box_kernel,
    contraction_norm,
    gaussian_kernel,
    identity_kernel,
    multi_level_downscale,
    nearest_kernel,
    operator_matrix,
    save_operator,
    upscale,
)
from .tensor import BoundaryRule, _atomic_write, load_tensor, save_tensor

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_CONTRACT = 0, 1, 2, 3


class UsageError(ValueError):
    pass


class ContractViolation(RuntimeError):
    pass


@dataclass
class RunConfig:
    command: str
    inputs: list[Path] = field(default_factory=list)
    output: Path | None = None
    scale: int = 2
    levels: int | None = None
    mu: int = 2
    method: str = "mgbp"
    boundary: BoundaryRule = BoundaryRule.REPLICATE
    kernel_g: str = "gaussian"
    kernel_p: str = "bicubic"
    net: Path | None = None
    pixels: list[tuple[int, int, int]] = field(default_factory=list)
    trace: Path | None = None
    spectrum: bool = False
    seed: int = 0
    require_certified: bool = False
    size: tuple[int, int] = (16, 16)
    extra: dict = field(default_factory=dict)

    def validate(self, need_input: bool = True, n_inputs: int = 1, output_is_dir: bool = False) -> None:
        if self.scale < 2:
            raise UsageError(f"--scale must be >= 2, got {self.scale}")
        if self.levels is not None and self.levels < 1:
            raise UsageError(f"--levels must be >= 1, got {self.levels}")
        if self.mu < 0:
            raise UsageError(f"--mu must be >= 0, got {self.mu}")
        if need_input:
            if len(self.inputs) != n_inputs:
                raise UsageError(f"{self.command} needs {n_inputs} --input path(s), got {len(self.inputs)}")
            for p in self.inputs:
                if not p.is_file():
                    raise UsageError(f"input file not found: {p}")
        for p in (self.net,):
            if p is not None and not p.is_file():
                raise UsageError(f"network manifest not found: {p}")
        for p in (self.output, self.trace):
            if p is None:
                continue
            parent = p if (output_is_dir and p is self.output) else p.parent
            if output_is_dir and p is self.output:
                if p.exists() and not p.is_dir():
                    raise UsageError(f"output path exists and is not a directory: {p}")
                continue
            if not parent.is_dir():
                raise UsageError(f"output directory does not exist: {parent}")


def parse_pixels(text: str | None) -> list[tuple[int, int, int]]:
    if not text:
        return []
    out = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        parts = chunk.split(",")
        if len(parts) != 3:
            raise UsageError(f"pixel {chunk!r} must be 'row,col,ch'")
        try:
            out.append(tuple(int(p) for p in parts))
        except ValueError:
            raise UsageError(f"pixel {chunk!r} must contain integers") from None
    return out


def _kernel_arg(text: str) -> tuple[str, float | None]:
    name, _, param = text.partition(":")
    try:
        return name, (float(param) if param else None)
    except ValueError:
        raise UsageError(f"bad kernel parameter in {text!r}") from None


def build_spec(cfg: RunConfig, ndim: int = 2) -> ResampleSpec:
    s = cfg.scale
    name, param = _kernel_arg(cfg.kernel_g)
    if name == "gaussian":
        g = gaussian_kernel(param if param is not None else BLUR_SIGMA_PER_SCALE * s, ndim=ndim)
    elif name == "box":
        g = box_kernel(s, ndim)
    elif name == "identity":
        g = identity_kernel()
    else:
        raise UsageError(f"unknown --kernel-g {cfg.kernel_g!r} (gaussian[:sigma], box, identity)")
    name, param = _kernel_arg(cfg.kernel_p)
    if name == "bicubic":
        p = bicubic_kernel(s, param if param is not None else -0.5, ndim)
    elif name == "nearest":
        p = nearest_kernel(s, ndim)
    elif name == "zero":
        p = Kernel(np.zeros((1, 1)), anchor=(0, 0))
    else:
        raise UsageError(f"unknown --kernel-p {cfg.kernel_p!r} (bicubic[:a], nearest, zero)")
    return ResampleSpec(s, g, p, cfg.boundary, ndim)


def _level_path(out: Path, k: int) -> Path:
    return out.with_name(f"{out.stem}_k{k}{out.suffix}")


def _certify_or_fail(cfg: RunConfig, spec: ResampleSpec, coarse_dims) -> float:
    c = bp.certify(spec, coarse_dims)
    print(f"contraction_norm={c:.17g}")
    if cfg.require_certified and not c < 1.0:
        raise ContractViolation(f"operators not certified: ||I-DU||_1 = {c:.6g} >= 1")
    return c


# ---------------------------------------------------------------------------
# commands


def cmd_downscale(cfg: RunConfig) -> int:
    cfg.validate()
    spec = build_spec(cfg)
    y = load_tensor(cfg.inputs[0])
    x = multi_level_downscale(y, spec, cfg.levels or 1)
    if cfg.output is not None:
        save_tensor(x, cfg.output)
    print(f"{'x'.join(map(str, y.shape))} -> {'x'.join(map(str, x.shape))}")
    return EXIT_OK


def cmd_upscale(cfg: RunConfig) -> int:
    cfg.validate()
    spec = build_spec(cfg)
    x = load_tensor(cfg.inputs[0])
    levels = cfg.levels or 2
    if cfg.require_certified and cfg.method != "bicubic":
        _certify_or_fail(cfg, spec, x.shape)
    trace = None
    if cfg.method == "bicubic":
        y = x
        for _ in range(levels - 1):
            y = upscale(y, spec)
        outputs = {levels: y}
    elif cfg.method == "ibp":
        y, trace = bp.ibp(x, spec, cfg.mu)
        outputs = {2: y}
    elif cfg.method == "mgbp":
        stack, trace = bp.mgbp(x, spec, cfg.mu, levels)
        outputs = {k: stack.level(k) for k in range(2, levels + 1)}
    else:
        raise UsageError(f"unknown --method {cfg.method!r} (bicubic, ibp, mgbp)")
    final = outputs[max(outputs)] if outputs else x
    if cfg.output is not None:
        save_tensor(final, cfg.output)
        if cfg.method == "mgbp":
            for k, img in outputs.items():
                save_tensor(img, _level_path(cfg.output, k))
    if cfg.trace is not None:
        if trace is None:
            raise UsageError("--trace needs --method ibp or mgbp")
        trace.to_csv(cfg.trace)
    print(f"{'x'.join(map(str, x.shape))} -> {'x'.join(map(str, final.shape))}")
    return EXIT_OK


def cmd_analyze(cfg: RunConfig) -> int:
    cfg.validate(need_input=False, output_is_dir=True)
    if cfg.inputs:
        h, w = load_tensor(cfg.inputs[0]).shape[:2]
    else:
        h, w = cfg.size
    # a single --size value selects a 1D row signal of that length
    spec = build_spec(cfg, ndim=1 if h == 1 else 2)
    sh, sw = spec.strides
    if h % sh or w % sw:
        raise UsageError(f"grid {h}x{w} not divisible by scale {cfg.scale}")
    D = operator_matrix(spec, "down", (h, w, 1))
    U = operator_matrix(spec, "up", (h // sh, w // sw, 1))
    c = contraction_norm(D, U)
    if cfg.output is not None:
        cfg.output.mkdir(parents=True, exist_ok=True)
        save_operator(D, cfg.output / "D.mgs")
        save_operator(U, cfg.output / "U.mgs")
    print(f"grid={h}x{w} coarse={h // sh}x{w // sw}")
    print(f"contraction_norm={c:.17g}")
    certified = c < 1.0
    print("certified" if certified else "not certified")
    if cfg.require_certified and not certified:
        raise ContractViolation(f"operators not certified: ||I-DU||_1 = {c:.6g} >= 1")
    return EXIT_OK


def cmd_visualize(cfg: RunConfig) -> int:
    cfg.validate(output_is_dir=True)
    if cfg.output is None:
        raise UsageError("visualize needs --output DIR")
    x = load_tensor(cfg.inputs[0])
    if cfg.net is not None:
        net = load_network(cfg.net)
    else:
        net = toy_network(cfg.seed, in_channels=x.shape[2], out_channels=x.shape[2])
    system = freeze(net, x)
    entries = filter_atlas(system, cfg.pixels, cfg.output, normalization=cfg.extra.get("normalization", "minmax"),
                           spectrum=cfg.spectrum, raw=cfg.extra.get("raw", False))
    for e in entries:
        label = "residual" if e["pixel"] is None else ",".join(map(str, e["pixel"]))
        print(f"{label}: {e['path'].name} range [{e['min']:.6g}, {e['max']:.6g}]")
    return EXIT_OK


def cmd_metrics(cfg: RunConfig) -> int:
    cfg.validate(n_inputs=2)
    a, b = (load_tensor(p) for p in cfg.inputs)
    report = MetricReport(
        psnr=psnr(a, b),
        ssim=ssim(a, b),
        msl1=multiscale_l1({(1, 1): a}, {1: b}, levels=(1,)),
    )
    text = report.format()
    sys.stdout.write(text)
    if cfg.output is not None:
        _atomic_write(cfg.output, text.encode())
    return EXIT_OK


def cmd_unfold(cfg: RunConfig) -> int:
    cfg.validate(need_input=False)
    levels = cfg.levels or 3
    schedule = bp.unfold_schedule(cfg.mu, levels)
    text = bp.format_schedule(schedule)
    sys.stdout.write(text)
    # recursion-law counts: BP calls at level j while computing Y_k
    for k in range(2, levels + 1):
        counts = " ".join(f"j={j}:{cfg.mu ** (k - j)}" for j in range(1, k + 1))
        observed = _schedule_counts(schedule, k)
        print(f"# k={k} {counts} observed={' '.join(f'j={j}:{observed.get(j, 0)}' for j in range(1, k + 1))}")
    if cfg.output is not None:
        _atomic_write(cfg.output, text.encode())
    return EXIT_OK


def _schedule_counts(schedule, k: int) -> dict[int, int]:
    """BP calls per level within the block for Y_k: one at k, one per downscale landing at j < k."""
    counts: dict[int, int] = {}
    active = False
    for level, action in schedule:
        if action == "upscale":
            active = level == k
            if active:
                counts[k] = 1
        elif active and action == "downscale":
            counts[level] = counts.get(level, 0) + 1
    return counts


def cmd_toy_net(cfg: RunConfig) -> int:
    cfg.validate(need_input=False)
    if cfg.output is None:
        raise UsageError("toy-net needs --output MANIFEST.json")
    kind = cfg.extra.get("kind", "random")
    if kind == "identity":
        net = identity_network(cfg.extra.get("channels", 1))
    else:
        net = toy_network(
            cfg.seed, n_linear=cfg.extra.get("layers", 3), in_channels=cfg.extra.get("channels", 1),
            out_channels=cfg.extra.get("channels", 1), activation=cfg.extra.get("activation", "relu"),
            bias=not cfg.extra.get("zero_bias", False),
        )
    save_network(net, cfg.output)
    print(f"wrote {cfg.output} ({len(net.layers)} layers)")
    return EXIT_OK


COMMANDS = {
    "downscale": cmd_downscale,
    "upscale": cmd_upscale,
    "analyze": cmd_analyze,
    "visualize": cmd_visualize,
    "metrics": cmd_metrics,
    "unfold": cmd_unfold,
    "toy-net": cmd_toy_net,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgbp", description="Multigrid back-projection and filter visualization")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--input", nargs="+", type=Path, default=[])
        p.add_argument("--output", type=Path)
        p.add_argument("--scale", type=int, default=2)
        p.add_argument("--levels", type=int)
        p.add_argument("--mu", type=int, default=2)
        p.add_argument("--boundary", default=BoundaryRule.REPLICATE.value,
                       choices=[r.value for r in BoundaryRule] + ["replicate", "zero"])
        p.add_argument("--kernel-g", default="gaussian")
        p.add_argument("--kernel-p", default="bicubic")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--require-certified", action="store_true")
        return p

    common(sub.add_parser("downscale", help="(multi-level) downscale an image"))
    p = common(sub.add_parser("upscale", help="bicubic, IBP or MGBP upscaling"))
    p.add_argument("--method", default="mgbp", choices=["bicubic", "ibp", "mgbp"])
    p.add_argument("--trace")
    p = common(sub.add_parser("analyze", help="compute ||I - DU||_1 and certify convergence"))
    p.add_argument("--size", default="16,16", help="high-resolution grid H,W, or N for a 1D signal (ignored with --input)")
    p = common(sub.add_parser("visualize", help="effective filters / residual of a frozen network"))
    p.add_argument("--net", type=Path)
    p.add_argument("--pixels", default="")
    p.add_argument("--spectrum", action="store_true")
    p.add_argument("--normalization", default="minmax", choices=["minmax", "symmetric"])
    p.add_argument("--raw", action="store_true", help="also write unquantised .mgt tensors")
    p = common(sub.add_parser("metrics", help="PSNR / SSIM / L1 between two images"))
    common(sub.add_parser("unfold", help="print the V/W-cycle schedule"))
    p = common(sub.add_parser("toy-net", help="write a seeded random (or identity) network manifest"))
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--channels", type=int, default=1)
    p.add_argument("--activation", default="relu")
    p.add_argument("--kind", default="random", choices=["random", "identity"])
    p.add_argument("--zero-bias", action="store_true")
    return parser


def _config(args) -> RunConfig:
    extra = {}
    for key in ("normalization", "raw", "layers", "channels", "activation", "kind", "zero_bias"):
        if hasattr(args, key):
            extra[key] = getattr(args, key)
    size = (16, 16)
    if getattr(args, "size", None):
        try:
            size = tuple(int(v) for v in args.size.split(","))
        except ValueError:
            raise UsageError(f"--size must be H,W, got {args.size!r}") from None
        if len(size) == 1:
            size = (1, size[0])
        if len(size) != 2 or min(size) < 1:
            raise UsageError(f"--size must be H,W or N, got {args.size!r}")
    return RunConfig(
        command=args.command,
        inputs=list(args.input),
        output=args.output,
        scale=args.scale,
        levels=args.levels,
        mu=args.mu,
        method=getattr(args, "method", "mgbp"),
        boundary=BoundaryRule.parse(args.boundary),
        kernel_g=args.kernel_g,
        kernel_p=args.kernel_p,
        net=getattr(args, "net", None),
        pixels=parse_pixels(getattr(args, "pixels", "")),
        trace=Path(args.trace) if getattr(args, "trace", None) else None,
        spectrum=getattr(args, "spectrum", False),
        seed=args.seed,
        require_certified=args.require_certified,
        size=size,
        extra=extra,
    )


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        cfg = _config(args)
        return COMMANDS[cfg.command](cfg)
    except UsageError as exc:
        print(f"mgbp {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ContractViolation as exc:
        print(f"mgbp {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (ValueError, OSError, KeyError) as exc:
        print(f"mgbp {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
