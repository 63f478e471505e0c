"""Command-line interface.

Exit codes: 0 on success, 1 on configuration or usage errors (including
unreadable or malformed inputs), 2 on numeric divergence.
"""

import argparse
import logging
import sys

from . import io as pio
from .denoiser import make_denoiser
from .exceptions import NumericDivergenceError, PatchEditError
from .inversion import invert, reverse, rms
from .metrics import format_table, masked_report, seam_score
from .pipeline import FAMILIES, TRANSFORMS, AssetSpec, EditJob, ablate_sync, ablate_tau, format_rows, generate_assets, run_edit
from .schedule import make_cosine_schedule

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_DIVERGENCE = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def _cmd_generate_assets(args):
    spec = AssetSpec(
        family=args.family,
        height=args.height,
        width=args.width,
        channels=args.channels,
        factor=args.factor,
        seed=args.seed,
        transform=args.transform,
        hue_degrees=args.hue_degrees,
    )
    paths = generate_assets(spec, args.out)
    for k, p in paths.items():
        print(f"{k}\t{p}")


def _cmd_invert(args):
    img = pio.read_image(args.image)
    schedule = make_cosine_schedule(args.T)
    cfg = {"kind": args.denoiser}
    if args.denoiser == "tinyconv":
        cfg["seed"] = args.seed
    d = make_denoiser(cfg, img.shape, schedule)
    fwd = invert(d, img)
    if args.out:
        pio.write_tensor(fwd.latents, args.out)
    err = rms(reverse(d, fwd[args.T])[0], img)
    print(f"reconstruction_rms\t{err!r}")


def _load_job(args):
    job = EditJob.from_file(args.job)
    if getattr(args, "seed", None) is not None:
        job = job.with_overrides(seed=args.seed)
    return job


def _cmd_edit(args):
    job = _load_job(args)
    rep = run_edit(job, args.out)
    print(f"output\t{rep.output_dir}")
    print((rep.output_dir / "metrics.tsv").read_text(), end="")


def _cmd_metrics(args):
    a = pio.read_image(args.a)
    b = pio.read_image(args.b)
    mask = None if args.mask is None else pio.read_image(args.mask)[0] > 0.5
    rows = masked_report(a, b, mask)
    if args.grid:
        r, c = (int(v) for v in args.grid.lower().split("x"))
        rows.append(("seam", "full", seam_score(a, r, c)))
    print(format_table(rows), end="")


def _cmd_ablate_sync(args):
    rows = ablate_sync(_load_job(args), args.out)
    print(format_rows(("sync", "seam", "psnr", "ssim"), rows), end="")


def _cmd_ablate_tau(args):
    taus = [int(v) for v in args.taus.split(",") if v.strip()]
    rows = ablate_tau(_load_job(args), taus, args.out)
    print(format_rows(("tau", "seam", "psnr", "ssim", "max_final_loss"), rows), end="")


def build_parser():
    p = _Parser(prog="patchedit", description="Patch-wise high-resolution editing over toy diffusion denoisers.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-assets", help="write a procedural source/reference/mask set")
    g.add_argument("--family", choices=FAMILIES, default="gradient-noise")
    g.add_argument("--transform", choices=TRANSFORMS, default="identity")
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.add_argument("--channels", type=int, default=3)
    g.add_argument("--factor", type=int, default=2)
    g.add_argument("--hue-degrees", type=float, default=90.0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_generate_assets)

    i = sub.add_parser("invert", help="invert an image and report the round-trip error")
    i.add_argument("--image", required=True)
    i.add_argument("--T", type=int, default=50)
    i.add_argument("--denoiser", choices=("analytic", "tinyconv"), default="analytic")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--out", help="write the trajectory as a tensor file")
    i.set_defaults(func=_cmd_invert)

    for name, func, helptext in (
        ("edit", _cmd_edit, "run an edit job"),
        ("ablate-sync", _cmd_ablate_sync, "run a job with sync on and off"),
        ("ablate-tau", _cmd_ablate_tau, "sweep the transfer cutoff"),
    ):
        e = sub.add_parser(name, help=helptext)
        e.add_argument("--job", required=True)
        e.add_argument("--out", help="override the job's output directory")
        e.add_argument("--seed", type=int)
        if name == "ablate-tau":
            e.add_argument("--taus", default="15,25,35")
        e.set_defaults(func=func)

    m = sub.add_parser("metrics", help="compare two images")
    m.add_argument("--a", required=True)
    m.add_argument("--b", required=True)
    m.add_argument("--mask")
    m.add_argument("--grid", help="RxC patch grid for a seam score of --a")
    m.set_defaults(func=_cmd_metrics)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except NumericDivergenceError as exc:
        print(f"numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (PatchEditError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
