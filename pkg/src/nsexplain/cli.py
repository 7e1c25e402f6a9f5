"""Command-line entry point: ``nsexplain {explain,eval,sanity,oracle,demo}``.

Exit codes: 0 success (or sanity pass), 1 sanity fail, 2 any error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from nsexplain.causal import CoalitionValueFn, shapley_exact, shapley_sampled
from nsexplain.engine import Model, forward, model_io, probabilities
from nsexplain.errors import ConfigError, NSExplainError
from nsexplain.explainer import ExplainConfig, ExplainRequest, explain
from nsexplain.imaging import find_map, list_images, load_map, preprocess_image
from nsexplain.metrics import (
    BBox,
    EvalReport,
    ImageRecord,
    RECORD_FIELDS,
    attack_flip,
    attack_noise,
    auc,
    deletion_insertion,
    energy_pointing,
    ns_quantification,
    sanity_check,
)
from nsexplain.render import render

log = logging.getLogger("nsexplain")

EXIT_OK, EXIT_SANITY_FAIL, EXIT_ERROR = 0, 1, 2
SANITY_THRESHOLD = 0.5


@dataclass(frozen=True)
class RunConfig:
    model_path: Path
    layer_id: str
    class_index: int | str
    cause_kind: str
    k_n: int
    k_s: int
    permutations: int
    exact_threshold: int
    seed: int
    steps: int
    sigma: float
    output_dir: Path

    @classmethod
    def from_args(cls, args: argparse.Namespace) -> "RunConfig":
        cfg = cls(
            model_path=Path(args.model),
            layer_id=args.layer,
            class_index=args.class_index,
            cause_kind=args.cause,
            k_n=args.k_n,
            k_s=args.k_s,
            permutations=args.perms,
            exact_threshold=args.exact_threshold,
            seed=args.seed,
            steps=getattr(args, "steps", 100),
            sigma=getattr(args, "sigma", 0.1),
            output_dir=Path(args.out),
        )
        for name in ("k_n", "k_s", "permutations", "steps"):
            if getattr(cfg, name) < 1:
                raise ConfigError(f"--{name.replace('_', '-')} must be positive")
        if cfg.sigma <= 0:
            raise ConfigError("--sigma must be positive")
        return cfg

    @property
    def explain_config(self) -> ExplainConfig:
        return ExplainConfig(self.seed, self.k_n, self.k_s, self.permutations, self.exact_threshold)


def _class_arg(value: str) -> int | str:
    if value == "predicted":
        return value
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError("--class must be an integer or 'predicted'") from None


def resolve_class(model: Model, image: np.ndarray, class_index: int | str) -> int:
    if class_index == "predicted":
        return int(np.argmax(probabilities(model, forward(model, image))))
    if not 0 <= class_index < model.class_count:
        raise ConfigError(f"class index {class_index} out of range: valid classes are 0..{model.class_count - 1}")
    return class_index


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1) + "\n")


def _explain_maps(model: Model, image: np.ndarray, cls: int, cfg: RunConfig):
    return explain(ExplainRequest(image, model, cfg.layer_id, cls, cfg.cause_kind, cfg.explain_config))


# ---------------------------------------------------------------------------
# commands


def cmd_explain(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_args(args)
    model = model_io.load(cfg.model_path)
    image = preprocess_image(args.image, model.input_dims)
    cls = resolve_class(model, image, cfg.class_index)
    result = _explain_maps(model, image, cls, cfg)
    render(result, image, cfg.output_dir)

    print(f"class {cls}  p_orig {result.p_orig:.6f}  causes: {cfg.cause_kind} @ {cfg.layer_id}")
    for label, report in (("necessity", result.n_report), ("sufficiency", result.s_report)):
        top = ", ".join(f"{cid}:{v:+.4f}" for cid, v in report.top(5))
        print(f"  top {label} ({report.method}): {top}")
    for w in result.warnings:
        print(f"  warning: {w}")
    print(f"wrote {cfg.output_dir}")
    return EXIT_OK


def load_bboxes(path: str | Path) -> dict[str, BBox]:
    boxes = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            boxes[rec["image"]] = BBox(int(rec["x0"]), int(rec["y0"]), int(rec["x1"]), int(rec["y1"]))
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"{path}:{lineno}: bad bbox record ({exc})") from None
    return boxes


def _eval_image(index: int, path: Path, model: Model, cfg: RunConfig, args, boxes) -> ImageRecord:
    rec = ImageRecord(image=path.name)
    image = preprocess_image(path, model.input_dims)
    cls = resolve_class(model, image, cfg.class_index)
    rec.class_index = cls
    _, h, w = model.input_dims
    if args.maps:
        map_path = find_map(args.maps, path)
        if map_path is None:
            raise ConfigError(f"no saliency map for {path.name} in {args.maps}")
        grid = load_map(map_path, h, w)
    else:
        result = _explain_maps(model, image, cls, cfg)
        rec.warnings.extend(result.warnings)
        grid = (result.s_map if args.direction == "sufficiency" else result.n_map).grid

    dele, ins = deletion_insertion(model, image, cls, grid, steps=cfg.steps)
    rec.deletion_auc, rec.insertion_auc = auc(dele), auc(ins)
    rec.overall = rec.insertion_auc - rec.deletion_auc
    rec.n_score, rec.s_score, rec.map_size, warns = ns_quantification(model, image, cls, grid)
    rec.warnings.extend(warns)
    rng = np.random.default_rng([cfg.seed, index])
    rec.attack_flip = attack_flip(model, image, grid, attack_noise(rng, image.shape, cfg.sigma))
    if path.name in boxes:
        rec.proportion, warns = energy_pointing(grid, boxes[path.name])
        rec.warnings.extend(warns)
    return rec


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_args(args)
    model = model_io.load(cfg.model_path)
    images = list_images(args.dataset)
    if not images:
        raise ConfigError(f"no images found in {args.dataset}")
    boxes = load_bboxes(args.bboxes) if args.bboxes else {}

    records = []
    for index, path in enumerate(images):
        try:
            records.append(_eval_image(index, path, model, cfg, args, boxes))
        except (NSExplainError, OSError, ValueError) as exc:
            log.warning("skipping %s: %s", path.name, exc)
            records.append(ImageRecord(image=path.name, error=str(exc)))

    report = EvalReport(
        records,
        settings={
            "source": "external" if args.maps else f"explain:{args.direction}",
            "cause_kind": cfg.cause_kind,
            "layer_id": cfg.layer_id,
            "seed": cfg.seed,
            "steps": cfg.steps,
            "blur_kernel": 11,
            "blur_sigma": 5.0,
            "attack_sigma": cfg.sigma,
            "bboxes": bool(boxes),
        },
    )
    out = cfg.output_dir
    _write_json(out / "eval_report.json", report.to_dict())
    with open(out / "eval_report.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_FIELDS + ["error"])
        for r in records:
            writer.writerow(["" if getattr(r, f) is None else getattr(r, f) for f in RECORD_FIELDS] + [r.error or ""])

    for key, value in report.aggregates().items():
        print(f"{key:>18}: {'-' if value is None else (f'{value:.4f}' if isinstance(value, float) else value)}")
    return EXIT_OK


def cmd_sanity(args: argparse.Namespace) -> int:
    cfg = RunConfig.from_args(args)
    model = model_io.load(cfg.model_path)
    image = preprocess_image(args.image, model.input_dims)
    cls = resolve_class(model, image, cfg.class_index)

    def explain_fn(m: Model, img: np.ndarray):
        r = _explain_maps(m, img, cls, cfg)
        return r.n_map, r.s_map

    trace = sanity_check(model, explain_fn, image, cfg.seed, std=args.std)
    final = trace[-1].mean_similarity
    passed = final is None or final < SANITY_THRESHOLD
    payload = {
        "class_index": cls,
        "cause_kind": cfg.cause_kind,
        "layer_id": cfg.layer_id,
        "seed": cfg.seed,
        "std": args.std,
        "threshold": SANITY_THRESHOLD,
        "stages": [
            {"stage": s.stage, "n_similarity": s.n_similarity, "s_similarity": s.s_similarity, "mean": s.mean_similarity}
            for s in trace
        ],
        "passed": passed,
    }
    _write_json(cfg.output_dir / "sanity.json", payload)

    fmt = lambda v: "    -" if v is None else f"{v:+.3f}"  # noqa: E731
    print(f"{'stage':>10}  {'N':>6}  {'S':>6}  {'mean':>6}")
    for s in trace:
        print(f"{s.stage:>10}  {fmt(s.n_similarity)}  {fmt(s.s_similarity)}  {fmt(s.mean_similarity)}")
    print("PASS" if passed else "FAIL", f"(final mean similarity {fmt(final).strip()} vs < {SANITY_THRESHOLD})")
    return EXIT_OK if passed else EXIT_SANITY_FAIL


def read_oracle_table(path: str | Path) -> tuple[list[str], CoalitionValueFn]:
    """Read ``{"players": [...], "values": [{"coalition": [...], "value": v}, ...]}``."""
    spec = json.loads(Path(path).read_text())
    players = list(spec["players"])
    n = len(players)
    if n < 1 or n > 10:
        raise ConfigError(f"oracle tables support 1..10 players, got {n}")
    if len(set(players)) != n:
        raise ConfigError("oracle players must be unique")
    index = {p: i for i, p in enumerate(players)}
    table = {}
    for row in spec["values"]:
        unknown = [p for p in row["coalition"] if p not in index]
        if unknown:
            raise ConfigError(f"coalition {row['coalition']} names unknown players {unknown}")
        table[frozenset(index[p] for p in row["coalition"])] = float(row["value"])
    for size in range(n + 1):
        for combo in combinations(range(n), size):
            if frozenset(combo) not in table:
                names = ", ".join(players[i] for i in combo)
                raise ConfigError(f"oracle table is missing coalition {{{names}}}")
    return players, CoalitionValueFn.from_table(table)


def cmd_oracle(args: argparse.Namespace) -> int:
    players, fn = read_oracle_table(args.spec)
    ids = list(range(len(players)))
    exact = shapley_exact(fn, ids)
    print("exact:   " + "  ".join(f"{players[i]}={exact.values[i]:.6f}" for i in ids))
    payload = {"players": players, "exact": [exact.values[i] for i in ids], "sampled": []}
    for budget in args.perms:
        est = shapley_sampled(fn, ids, budget, args.seed)
        dev = max(abs(est.values[i] - exact.values[i]) for i in ids)
        print(f"P={budget:<6d} " + "  ".join(f"{players[i]}={est.values[i]:.6f}" for i in ids) + f"  max|dev|={dev:.6f}")
        payload["sampled"].append(
            {
                "permutations": budget,
                "values": [est.values[i] for i in ids],
                "stderr": [est.stderr[i] for i in ids],
                "max_deviation": dev,
            }
        )
    if args.out:
        _write_json(Path(args.out) / "oracle.json", payload)
    return EXIT_OK


def cmd_demo(args: argparse.Namespace) -> int:
    from nsexplain.fixtures import write_demo

    out = write_demo(args.out, n_images=args.images, seed=args.seed)
    print(f"wrote planted-feature model, {args.images} images and bboxes to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _add_run_flags(p: argparse.ArgumentParser, *, dataset: bool = False) -> None:
    p.add_argument("--model", required=True, help="model.json manifest (or its directory)")
    if dataset:
        p.add_argument("--dataset", required=True, help="directory of PNG/PPM images")
    else:
        p.add_argument("--image", required=True)
    p.add_argument("--layer", required=True, help="id of the explained layer")
    p.add_argument("--class", dest="class_index", type=_class_arg, default="predicted")
    p.add_argument("--cause", choices=["feature", "filter"], default="feature")
    p.add_argument("--k-n", type=int, default=32)
    p.add_argument("--k-s", type=int, default=32)
    p.add_argument("--perms", type=int, default=64)
    p.add_argument("--exact-threshold", type=int, default=10)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nsexplain", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("explain", help="explain one image and render the N/S maps")
    _add_run_flags(p)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval", help="score maps over a directory of images")
    _add_run_flags(p, dataset=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--sigma", type=float, default=0.1)
    p.add_argument("--bboxes", help="JSON-lines file of {image, x0, y0, x1, y1}")
    p.add_argument("--maps", help="directory of external maps named <image stem>.png|.json")
    p.add_argument("--direction", choices=["sufficiency", "necessity"], default="sufficiency")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sanity", help="cascading weight randomization check")
    _add_run_flags(p)
    p.add_argument("--std", type=float, default=0.05, help="std of the re-initialised weights")
    p.set_defaults(func=cmd_sanity)

    p = sub.add_parser("oracle", help="exact vs sampled Shapley on a tabulated set function")
    p.add_argument("spec", help="JSON table of coalition values")
    p.add_argument("--perms", type=int, nargs="+", default=[100, 1000])
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_oracle)

    p = sub.add_parser("demo", help="write the planted-feature model and a small image set")
    p.add_argument("--out", required=True)
    p.add_argument("--images", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_demo)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (NSExplainError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
