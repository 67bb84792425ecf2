"""Command-line entry point: ``gradsep capture | attack | sweep | eval``.

Settings come from three layers, later ones winning: built-in defaults, a
key/value config file (``--config``), then command-line flags. Config files
hold one ``key = value`` per line; attack and inversion settings use the
dotted namespaces ``cpa.`` and ``inversion.``::

    victim = fc2
    batch_size = 8
    cpa.lambda_tv = 1.0
    inversion.lambda_gm = 1.0
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cpa, evalio, fedsim, inversion, nets
from .numerics import NumericalError, SeededRng

log = logging.getLogger("gradsep")

EXIT_USAGE, EXIT_NUMERICAL, EXIT_IO = 2, 3, 4
ATTACKS = ("cpa", "cpa-fi", "cpa-fi-gm", "gm")
VICTIMS = ("fc2", "convnet-s")
SWEEP_RANGE = (1e-5, 10.0)
FAST_ITERS = 2500
SWEEPABLE = ("lambda_tv", "lambda_mi", "temperature_t", "lambda_sp", "lambda_sr")

# Starting points found by sweeps on held-out tuning batches of the synthetic set.
# Image recovery leans on the TV prior; ReLU embeddings need the sign prior and
# a much softer decorrelation term, since embeddings of different inputs overlap.
VICTIM_DEFAULTS = {
    "fc2": {"cpa.lambda_tv": 1.0, "cpa.lambda_mi": 0.01, "cpa.temperature_t": 10.0},
    "convnet-s": {"cpa.lambda_tv": 0.0, "cpa.lambda_mi": 1e-5, "cpa.temperature_t": 10.0, "cpa.lambda_sr": 10.0},
}


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    victim: str = "fc2"
    dataset: str = "synthetic"
    num_classes: int = 10
    batch_size: int = 8
    batch_index: int = 0
    train_size: int = 512
    train_epochs: int = 0
    attack: str = "cpa"
    dp_sigma: float = 0.0
    dp_delta: float = 1e-5
    seed: int = 0
    output_dir: str = "gradsep-out"
    fast: bool = False
    cpa: cpa.AttackConfig = field(default_factory=cpa.AttackConfig)
    inversion: inversion.InversionConfig = field(default_factory=inversion.InversionConfig)

    def validate(self) -> None:
        if self.victim not in VICTIMS:
            raise UsageError(f"unknown victim {self.victim!r}; choose from {', '.join(VICTIMS)}")
        if self.attack not in ATTACKS:
            raise UsageError(f"unknown attack {self.attack!r}; choose from {', '.join(ATTACKS)}")
        if self.attack in ("cpa-fi", "cpa-fi-gm") and self.victim != "convnet-s":
            raise UsageError(f"attack {self.attack} needs victim=convnet-s")
        if self.batch_size < 1 or self.batch_index < 0:
            raise UsageError("batch_size must be >= 1 and batch_index >= 0")
        if self.dataset != "synthetic" and not Path(self.dataset).is_file():
            raise UsageError(f"dataset file not found: {self.dataset}")

    def to_flat(self) -> dict:
        flat = {}
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if dataclasses.is_dataclass(value):
                for sub in dataclasses.fields(value):
                    flat[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
            else:
                flat[f.name] = value
        return flat

    @classmethod
    def defaults(cls, victim: str = "fc2", **fields) -> "RunConfig":
        """Config for ``victim`` with its tuned attack weights; ``fields`` override top-level keys."""
        return cls.from_flat({"victim": victim, **fields})

    @classmethod
    def from_flat(cls, flat: dict) -> "RunConfig":
        """Build from flat keys; unspecified attack weights take the victim's defaults."""
        cfg = cls()
        for key, value in {**VICTIM_DEFAULTS.get(str(flat.get("victim", cfg.victim)), {}), **flat}.items():
            set_key(cfg, key, value)
        return cfg

    def cpa_config(self) -> cpa.AttackConfig:
        mode = "image" if self.victim == "fc2" else "embedding"
        c = dataclasses.replace(self.cpa, mode=mode)
        if mode == "embedding":
            c = dataclasses.replace(c, lambda_tv=0.0)
        if self.fast:
            c = dataclasses.replace(c, iters=min(c.iters, FAST_ITERS))
        return c

    def inversion_config(self) -> inversion.InversionConfig:
        c = self.inversion
        if self.fast:
            c = dataclasses.replace(c, iters=min(c.iters, FAST_ITERS))
        return c


def _coerce(value, like):
    if isinstance(like, bool):
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise UsageError(f"not a boolean: {value!r}")
    try:
        if isinstance(like, int):
            return int(value)
        if isinstance(like, float):
            return float(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value {value!r}") from exc
    return str(value)


def set_key(cfg: RunConfig, key: str, value) -> None:
    target, name = cfg, key
    if "." in key:
        ns, name = key.split(".", 1)
        if ns not in ("cpa", "inversion"):
            raise UsageError(f"unknown config namespace {ns!r}")
        target = getattr(cfg, ns)
    if name not in {f.name for f in dataclasses.fields(target)}:
        raise UsageError(f"unknown config key {key!r}")
    setattr(target, name, _coerce(value, getattr(target, name)))


def read_config_file(path) -> dict:
    flat = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            flat[key] = value.strip('"')
    return flat


def write_config_file(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        for key, value in cfg.to_flat().items():
            fh.write(f"{key} = {value}\n")


# -- data and victims -----------------------------------------------------------

def batch_indices(cfg: RunConfig, batch_index: int | None) -> np.ndarray:
    """Dataset rows of a batch. ``None`` selects the tuning batch.

    Rows ``[0, train_size)`` train the victim, the next ``batch_size`` rows
    form the tuning batch and evaluation batches follow, so tuning and
    evaluation never share inputs.
    """
    slot = 0 if batch_index is None else 1 + batch_index
    start = cfg.train_size + slot * cfg.batch_size
    return np.arange(start, start + cfg.batch_size)


def load_dataset(cfg: RunConfig, rows_needed: int) -> evalio.Dataset:
    if cfg.dataset == "synthetic":
        return evalio.synth_dataset(rows_needed, evalio.CIFAR_SHAPE, cfg.num_classes, cfg.seed)
    ds = evalio.load_cifar10(cfg.dataset)
    if len(ds) < rows_needed:
        raise UsageError(f"{cfg.dataset} has {len(ds)} records, {rows_needed} needed")
    return ds.subset(np.arange(rows_needed))


def build_victim(cfg: RunConfig, ds: evalio.Dataset) -> nets.Network:
    if cfg.victim == "fc2":
        net = nets.fc2(int(np.prod(ds.shape)), cfg.num_classes, seed=cfg.seed)
    else:
        net = nets.convnet_s(cfg.num_classes, seed=cfg.seed, input_shape=ds.shape)
    if cfg.train_epochs and cfg.train_size:
        net = nets.train(net, ds.images[:cfg.train_size], ds.labels[:cfg.train_size],
                         epochs=cfg.train_epochs, lr=1e-3, seed=cfg.seed)
    return net


@dataclass
class Capture:
    net: nets.Network
    bundle: fedsim.GradientBundle
    images: np.ndarray
    labels: np.ndarray
    shape: tuple


def make_capture(cfg: RunConfig, batch_index: int | None) -> Capture:
    idx = batch_indices(cfg, batch_index)
    ds = load_dataset(cfg, int(idx[-1]) + 1)
    net = build_victim(cfg, ds)
    bundle = fedsim.capture(net, ds.images[idx], ds.labels[idx])
    if cfg.dp_sigma > 0:
        bundle = fedsim.apply_dp(bundle, cfg.dp_sigma, seed=SeededRng(cfg.seed).spawn(1000 + (batch_index or 0)).seed,
                                 delta=cfg.dp_delta)
    return Capture(net, bundle, ds.images[idx], ds.labels[idx], ds.shape)


def save_capture(cap: Capture, cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    fedsim.save_bundle(cap.bundle, out / "bundle.gsgrd")
    nets.save_params(cap.net, out / "model.gsnet")
    cpa.save_recovered(out / "truth.gsrec", cap.images)
    manifest = {
        "config": cfg.to_flat(),
        "shape": list(cap.shape),
        "labels": [int(v) for v in cap.labels],
        "epsilon": fedsim.dp_epsilon(cfg.dp_sigma, cfg.dp_delta, cfg.batch_size) if cfg.dp_sigma > 0 else None,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_capture(bundle_path: Path) -> tuple[Capture, dict]:
    root = bundle_path.parent
    manifest = json.loads((root / "manifest.json").read_text())
    net = nets.load_params(root / "model.gsnet")
    cap = Capture(net, fedsim.load_bundle(bundle_path), cpa.load_recovered(root / "truth.gsrec"),
                  np.array(manifest["labels"]), tuple(manifest["shape"]))
    return cap, manifest


# -- attacks ----------------------------------------------------------------------

def warn_out_of_range(cfg: RunConfig) -> list[str]:
    c = cfg.cpa_config()
    names = ["lambda_mi", "temperature_t"] + (["lambda_tv"] if c.mode == "image" else ["lambda_sp", "lambda_sr"])
    msgs = []
    for name in names:
        v = getattr(c, name)
        if v != 0 and not SWEEP_RANGE[0] <= v <= SWEEP_RANGE[1]:
            msgs.append(f"{name}={v:g} lies outside the tuning range [{SWEEP_RANGE[0]:g}, {SWEEP_RANGE[1]:g}]")
    for m in msgs:
        log.warning(m)
    return msgs


def run_attack(cfg: RunConfig, cap: Capture) -> tuple[evalio.AttackReport, np.ndarray]:
    """Run the configured attack on a capture and score it against the truth."""
    start = time.perf_counter()
    n = cap.bundle.batch_size_claimed
    net, attack = cap.net, cfg.attack
    if attack in ("cpa-fi", "cpa-fi-gm") and net.arch != "convnet-s":
        raise UsageError(f"attack {attack} needs a convnet-s victim")
    if attack == "gm":
        recovered = inversion.gradient_match(net, cap.bundle, n, cap.labels, cfg.inversion_config(), shape=cap.shape)
        _, samples = evalio.score_images(recovered, cap.images, cap.shape)
    else:
        ccfg = cfg.cpa_config()
        g = cpa.MixedSignalMatrix.from_bundle(cap.bundle, net.target, cap.shape if ccfg.mode == "image" else None)
        rb = cpa.cpa_image(g, ccfg, n) if ccfg.mode == "image" else cpa.cpa_embedding(g, ccfg, n)
        recovered = rb.sources
        if attack == "cpa" and ccfg.mode == "image":
            _, samples = evalio.score_images(recovered, cap.images, cap.shape)
        elif attack == "cpa":
            _, samples = evalio.score_embeddings(recovered, net.embed(cap.images))
        else:
            icfg = cfg.inversion_config()
            if attack == "cpa-fi":
                recovered = inversion.feature_invert(net, rb.sources, icfg)
            else:
                labels = _labels_for_embeddings(net, rb.sources, cap)
                recovered = inversion.feature_invert_gm(net, rb.sources, cap.bundle, labels, icfg)
            _, samples = evalio.score_images(recovered, cap.images, cap.shape)
    report = evalio.AttackReport(attack, n, cfg.seed, cfg.to_flat(), samples,
                                 wall_time=time.perf_counter() - start)
    return report, recovered


def _labels_for_embeddings(net, z_hat, cap: Capture) -> np.ndarray:
    """Assign the batch's known labels to recovered embeddings.

    With known labels the attacker still has to decide which recovered row
    carries which label; we use the class the victim head predicts from the
    recovered embedding, resolving collisions by optimal assignment.
    """
    from scipy.optimize import linear_sum_assignment

    head_in = np.asarray(z_hat) / np.linalg.norm(z_hat, axis=1, keepdims=True) * np.linalg.norm(
        net.embed(np.full((1, net.input_dim), 0.5)))
    h = np.maximum(head_in @ net.params["fc1.weight"].T + net.params["fc1.bias"], 0)
    logp = np.log(nets.softmax(h @ net.params["fc2.weight"].T + net.params["fc2.bias"]) + 1e-300)
    rows, cols = linear_sum_assignment(-logp[:, cap.labels])
    out = np.empty(len(rows), dtype=np.int64)
    out[rows] = cap.labels[cols]
    return out


def render_montage(recovered, cap: Capture, samples: list[dict]) -> np.ndarray:
    """Truth row above the matched, display-rescaled recoveries."""
    order = sorted(samples, key=lambda s: s["truth_index"])
    rec = cpa.rescale_for_display(np.asarray(recovered)[[s["index"] for s in order]])
    tiles = np.concatenate([cap.images[[s["truth_index"] for s in order]], rec])
    return evalio.montage(tiles, cap.shape, cols=len(order))


# -- sweep ------------------------------------------------------------------------

def sweep_grid(points: int = 7) -> list[float]:
    grid = np.logspace(math.log10(SWEEP_RANGE[0]), math.log10(SWEEP_RANGE[1]), points)
    return [float(f"{v:.6g}") for v in grid]


def _pool_size() -> int:
    try:
        cap = int(os.environ.get("GRADSEP_THREADS", "0"))
    except ValueError:
        cap = 0
    cpus = os.cpu_count() or 1
    return max(1, min(cap, cpus) if cap > 0 else cpus)


def parallel_map(fn, items):
    items = list(items)
    workers = min(_pool_size(), len(items))
    if workers <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _score_point(args):
    cfg_flat, cap = args
    cfg = RunConfig.from_flat(cfg_flat)
    report, _ = run_attack(cfg, cap)
    return report.aggregates.get("mean_abs_cos", 0.0)


def sweep(cfg: RunConfig, params: list[str], grid: list[float] | None = None, cap: Capture | None = None,
          rounds: int = 1) -> tuple[RunConfig, list[dict]]:
    """Coordinate-wise log-grid search on the tuning batch; returns the best config and all trials."""
    for p in params:
        if p not in SWEEPABLE:
            raise UsageError(f"cannot sweep {p!r}; choose from {', '.join(SWEEPABLE)}")
    grid = sweep_grid() if grid is None else list(grid)
    cap = make_capture(cfg, None) if cap is None else cap
    best = RunConfig.from_flat(cfg.to_flat())
    best_score, trials, seen = -math.inf, [], {}
    for _ in range(rounds):
        for p in params:
            candidates = []
            for v in grid:
                c = RunConfig.from_flat(best.to_flat())
                setattr(c.cpa, p, v)
                candidates.append(c)
            # points already scored (the incumbent reappears on every axis) are not rerun
            keys = [json.dumps(c.to_flat(), sort_keys=True) for c in candidates]
            todo = [(k, c) for k, c in zip(keys, candidates) if k not in seen]
            for (k, _), s in zip(todo, parallel_map(_score_point, [(c.to_flat(), cap) for _, c in todo])):
                seen[k] = s
            for k, c in zip(keys, candidates):
                s = seen[k]
                trials.append({"param": p, "value": getattr(c.cpa, p), "score": s})
                if s > best_score:
                    best, best_score = c, s
    return best, trials


# -- eval table -------------------------------------------------------------------

def eval_table(reports: list[evalio.AttackReport]) -> str:
    """Mean of per-run mean |cos| (and PSNR when present), attack x batch size."""
    cells, by_attack = {}, {}
    for r in reports:
        cells.setdefault((r.attack_id, r.batch_size), []).append(r)
        by_attack.setdefault(r.attack_id, set()).add(r.batch_size)
    sizes = sorted({b for _, b in cells})
    attacks = sorted({a for a, _ in cells})
    lines = ["attack".ljust(12) + "".join(f"n={b}".rjust(22) for b in sizes)]
    for a in attacks:
        row = a.ljust(12)
        for b in sizes:
            rs = cells.get((a, b))
            if not rs:
                row += "-".rjust(22)
                continue
            cos = np.mean([r.aggregates["mean_abs_cos"] for r in rs])
            row += f"{cos:.4f} ({len(rs)} runs)".rjust(22)
        lines.append(row)
    for a, bs in sorted(by_attack.items()):
        if len(bs) > 1:
            lines.append(f"note: {a} reports mix batch sizes {sorted(bs)}")
    return "\n".join(lines)


# -- argument parsing -------------------------------------------------------------

def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value config file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. cpa.lambda_tv=0.5")
    for key, value in RunConfig().to_flat().items():
        flag = "--" + key.replace(".", "-").replace("_", "-")
        kind = type(value)
        if kind is bool:
            parser.add_argument(flag, dest=key, default=None, action="store_const", const=True)
        else:
            parser.add_argument(flag, dest=key, default=None, type=str)


# keys that describe how a capture was made; an attack inherits them from its manifest
CAPTURE_KEYS = ("victim", "dataset", "num_classes", "batch_size", "batch_index", "train_size", "train_epochs",
                "dp_sigma", "dp_delta", "seed")


def config_from_args(args, base: dict | None = None) -> RunConfig:
    """Layer the config: ``base`` < --config file < --set < dedicated flags."""
    flat = dict(base or {})
    flat.update(read_config_file(args.config) if args.config else {})
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flat[k.strip()] = v.strip()
    for key in RunConfig().to_flat():
        v = getattr(args, key, None)
        if v is not None:
            flat[key] = v
    cfg = RunConfig.from_flat(flat)
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gradsep", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("capture", help="train/init a victim and capture a client gradient bundle")
    _add_config_flags(p)

    p = sub.add_parser("attack", help="run an attack on a captured bundle")
    p.add_argument("bundle", help="bundle.gsgrd written by 'capture'")
    _add_config_flags(p)

    p = sub.add_parser("sweep", help="tune hyper-parameters on the held-out tuning batch")
    p.add_argument("--params", default="lambda_tv,lambda_mi,temperature_t",
                   help="comma-separated attack parameters to sweep")
    p.add_argument("--points", type=int, default=7, help="grid points per parameter")
    p.add_argument("--rounds", type=int, default=1, help="coordinate-search passes")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="aggregate attack reports into a comparison table")
    p.add_argument("reports", nargs="+")
    return parser


def cmd_capture(cfg: RunConfig) -> Path:
    out = Path(cfg.output_dir)
    cap = make_capture(cfg, cfg.batch_index)
    save_capture(cap, cfg, out)
    log.info("wrote capture to %s", out)
    return out / "bundle.gsgrd"


def cmd_attack(cfg: RunConfig, bundle_path) -> evalio.AttackReport:
    cap, _ = load_capture(Path(bundle_path))
    warn_out_of_range(cfg)
    report, recovered = run_attack(cfg, cap)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / f"report-{cfg.attack}.jsonl")
    cpa.save_recovered(out / f"recovered-{cfg.attack}.gsrec", recovered)
    evalio.write_pnm(out / f"montage-{cfg.attack}.ppm", render_montage(recovered, cap, report.per_sample))
    return report


def cmd_sweep(cfg: RunConfig, params: list[str], points: int = 7, rounds: int = 1) -> Path:
    best, trials = sweep(cfg, params, sweep_grid(points), rounds=rounds)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_config_file(out / "best.conf", best)
    with open(out / "sweep-trials.jsonl", "w") as fh:
        for t in trials:
            fh.write(json.dumps(t) + "\n")
    return out / "best.conf"


def cmd_eval(paths) -> str:
    return eval_table([evalio.AttackReport.load(p) for p in paths])


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "eval":
            print(cmd_eval(args.reports))
            return 0
        base = None
        if args.command == "attack":
            manifest = json.loads((Path(args.bundle).parent / "manifest.json").read_text())
            base = {k: v for k, v in manifest.get("config", {}).items() if k in CAPTURE_KEYS}
        cfg = config_from_args(args, base)
        if args.command == "capture":
            print(cmd_capture(cfg))
        elif args.command == "attack":
            report = cmd_attack(cfg, args.bundle)
            print(json.dumps(report.aggregates))
        elif args.command == "sweep":
            print(cmd_sweep(cfg, [p for p in args.params.split(",") if p], args.points, args.rounds))
    except UsageError as exc:
        print(f"gradsep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, cpa.RankDeficiencyError) as exc:
        print(f"gradsep: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, fedsim.BundleFormatError) as exc:
        print(f"gradsep: I/O failure: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"gradsep: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
