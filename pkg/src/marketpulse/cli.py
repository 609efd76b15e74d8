"""
Command line entry point: ``marketpulse {synth,detect,track,normalize,evaluate}``.

Stages exchange files, so each can be re-run on its own. Exit status is 0 on
success, 2 when some locations failed, 1 on a fatal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
import traceback
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from datetime import date, datetime, timezone
from pathlib import Path
from typing import List, Optional

log = logging.getLogger("marketpulse")

EXIT_OK, EXIT_FATAL, EXIT_PARTIAL = 0, 1, 2
MAX_CUTOFF = 8.36


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@dataclass
class RunConfig:
    command: str
    manifest: Optional[str] = None
    candidates: Optional[str] = None
    out: Optional[str] = None
    detections: Optional[str] = None
    truth: Optional[str] = None
    panel: Optional[str] = None
    cutoff: Optional[float] = None
    strict_quality: bool = False
    ring_monotone: bool = True
    harmonize: bool = True
    ref_window: str = "centered182"
    exclude: List[str] = field(default_factory=list)
    seed: int = 0
    jobs: int = 1
    figures: bool = True

    def check(self):
        if self.cutoff is not None and not 0 < self.cutoff <= MAX_CUTOFF:
            raise UsageError(f"--cutoff must be in (0, {MAX_CUTOFF}]")
        if self.jobs < 1:
            raise UsageError("--jobs must be at least 1")
        if self.out:
            out = Path(self.out)
            out.mkdir(parents=True, exist_ok=True)
            if not os.access(out, os.W_OK):
                raise UsageError(f"output directory {out} is not writable")

    def public(self) -> dict:
        d = asdict(self)
        d.pop("jobs")   # results depend on neither
        d.pop("out")
        return d


def _setup_logging():
    level = os.environ.get("MARKETPULSE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def _write_json(doc, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=str)
        fh.write("\n")


def _volatile(timings) -> dict:
    """Run-specific fields; everything outside this key is reproducible."""
    return {"generated_at": datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ"),
            "timings_s": {k: round(v, 3) for k, v in sorted(timings.items())}}


def _location_seed(seed: int, location_id: str) -> int:
    return (seed * 1000003 + zlib.crc32(location_id.encode())) % (2 ** 32)


def _map(fn, tasks, jobs):
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(min(jobs, len(tasks))) as pool:
        return list(pool.map(fn, tasks))


def _inputs(cfg: RunConfig):
    from .ingest import candidates_crs, read_candidates, read_manifest

    for name in ("manifest", "candidates"):
        p = getattr(cfg, name)
        if not p or not Path(p).is_file():
            raise UsageError(f"--{name} {p!r} not found")
    records = read_manifest(cfg.manifest)
    if not records:
        raise UsageError(f"manifest {cfg.manifest} holds no scenes")
    cands = read_candidates(cfg.candidates)
    if not cands:
        raise UsageError(f"{cfg.candidates} holds no candidate locations")
    return records, sorted(cands, key=lambda c: c.location_id), candidates_crs(cfg.candidates)


def _records_for(records, cand):
    return [r for r in records if r.location_id in (None, cand.location_id)]


def _fail(location_id, exc):
    log.error("%s: %s", location_id, exc)
    log.debug("%s", traceback.format_exc())
    return {"location_id": location_id, "status": "error", "error": f"{type(exc).__name__}: {exc}"}


# workers run in child processes; they take and return plain picklable values

def _detect_worker(task):
    records, cand, crs, cutoff, harmonize, pseudo_days, seed = task
    from .detect import CUTOFF
    from .evaluate import make_pseudo_location
    from .ingest import load_location
    from .pipeline import detect_dataset

    t0 = time.perf_counter()
    try:
        raw = load_location(records, cand, crs)
        if pseudo_days is not None:
            raw = make_pseudo_location(raw, pseudo_days, seed)
        out = detect_dataset(raw, CUTOFF if cutoff is None else cutoff, harmonize)
        return {"location_id": cand.location_id, "status": "ok", "detection": out.detection,
                "report": out.report.to_dict(), "fields": out.fields, "warnings": raw.warnings,
                "time": time.perf_counter() - t0}
    except Exception as exc:  # recorded per location, the run continues
        return _fail(cand.location_id, exc)


def _track_worker(task):
    records, cand, crs, det_path, harmonize, monotone, strict = task
    from .detect import read_geojson
    from .ingest import load_location
    from .pipeline import track_dataset

    t0 = time.perf_counter()
    try:
        det = read_geojson(det_path)
        raw = load_location(records, cand, crs)
        res, report = track_dataset(raw, det, harmonize=harmonize, monotone=monotone, strict=strict)
        return {"location_id": cand.location_id, "status": "ok", "track": res,
                "report": report.to_dict() if report else None, "time": time.perf_counter() - t0}
    except Exception as exc:
        return _fail(cand.location_id, exc)


def _exit_status(results) -> int:
    ok = sum(r["status"] == "ok" for r in results)
    if ok == 0:
        return EXIT_FATAL
    return EXIT_OK if ok == len(results) else EXIT_PARTIAL


def cmd_detect(cfg: RunConfig) -> int:
    from .detect import CUTOFF, summarize_detections, write_geojson

    records, cands, crs = _inputs(cfg)
    out = Path(cfg.out)
    (out / "detections").mkdir(parents=True, exist_ok=True)
    tasks = [(_records_for(records, c), c, crs, cfg.cutoff, cfg.harmonize, None, 0) for c in cands]
    t0 = time.perf_counter()
    results = _map(_detect_worker, tasks, cfg.jobs)
    timings = {"total": time.perf_counter() - t0}
    locs, dets = {}, []
    for r in results:
        lid = r["location_id"]
        timings[lid] = r.pop("time", 0.0)
        if r["status"] != "ok":
            locs[lid] = {"status": "error", "error": r["error"]}
            continue
        det = r["detection"]
        dets.append(det)
        write_geojson(det, out / "detections" / f"{lid}.geojson")
        if cfg.figures:
            from .plotting import plot_detection
            (out / "figures").mkdir(exist_ok=True)
            plot_detection(r["fields"], det, out / "figures" / f"detect_{lid}.png")
        locs[lid] = {"status": "ok", "market_days": [d.label for d in det.market_days],
                     "peak": None if det.peak is None else {"dow": det.peak.day_of_week.label,
                                                            "threshold": det.peak.threshold},
                     "filter": r["report"], "warnings": r["warnings"], **det.info}
    summary = {"command": "detect", "config": cfg.public(),
               "cutoff": CUTOFF if cfg.cutoff is None else cfg.cutoff, "locations": locs,
               "summary": summarize_detections(dets) if dets else None,
               "volatile": _volatile(timings)}
    _write_json(summary, out / "detect_summary.json")
    return _exit_status(results)


def cmd_track(cfg: RunConfig) -> int:
    from .track import write_panel

    if not cfg.detections or not Path(cfg.detections).is_dir():
        raise UsageError(f"--detections {cfg.detections!r} not found; run `marketpulse detect` first")
    records, cands, crs = _inputs(cfg)
    out = Path(cfg.out)
    det_dir = Path(cfg.detections)
    tasks, skipped = [], {}
    for c in cands:
        p = det_dir / f"{c.location_id}.geojson"
        if not p.is_file():
            skipped[c.location_id] = "no detection file"
            continue
        with open(p, encoding="utf-8") as fh:
            if not json.load(fh).get("market_days"):
                skipped[c.location_id] = "no market detected"
                continue
        tasks.append((_records_for(records, c), c, crs, str(p), cfg.harmonize,
                      cfg.ring_monotone, cfg.strict_quality))
    if not tasks:
        raise UsageError(f"no detected markets in {det_dir}; nothing to track")
    t0 = time.perf_counter()
    results = _map(_track_worker, tasks, cfg.jobs)
    timings = {"total": time.perf_counter() - t0}
    panel, locs = [], {k: {"status": "skipped", "reason": v} for k, v in skipped.items()}
    for r in results:
        lid = r["location_id"]
        timings[lid] = r.pop("time", 0.0)
        if r["status"] != "ok":
            locs[lid] = {"status": "error", "error": r["error"]}
            continue
        res = r["track"]
        panel.extend(res.panel)
        locs[lid] = {"status": "ok", "filter": r["report"], "readings": len(res.panel),
                     "dropped_strict": res.dropped_strict,
                     "fringe": {d.label: {"rings": len(res.rings[d].rings), "fringe_ring": res.fringe[d],
                                          "area_px": int(res.areas[d].sum())} for d in res.market_days}}
        if cfg.figures:
            from .plotting import plot_panel
            (out / "figures").mkdir(exist_ok=True)
            plot_panel(res.panel, out / "figures" / f"track_{lid}.png")
    panel.sort(key=lambda a: (a.location_id, int(a.shape_dow), a.acquired_utc, a.scene_id))
    write_panel(panel, out / "panel.csv")
    _write_json({"command": "track", "config": cfg.public(), "locations": locs,
                 "volatile": _volatile(timings)}, out / "track_summary.json")
    return _exit_status(results)


def cmd_normalize(cfg: RunConfig, config_path: Optional[str] = None,
                  bridge_overlap: Optional[str] = None, bridge_base: Optional[str] = None) -> int:
    from .normalize import (NormalizationConfig, bridge_generations, day_number, normalize_panel,
                            parse_interval, seasonal_index, write_normalized)
    from .track import read_panel

    if not cfg.panel or not Path(cfg.panel).is_file():
        raise UsageError(f"--panel {cfg.panel!r} not found; run `marketpulse track` first")
    t0 = time.perf_counter()
    ncfg = NormalizationConfig.from_json(config_path) if config_path else NormalizationConfig()
    if cfg.ref_window != "centered182" or not config_path:
        ncfg.window = type(ncfg.window).parse(cfg.ref_window)
    ncfg.exclusions += [parse_interval(e) for e in cfg.exclude]
    ncfg.strict_quality = ncfg.strict_quality or cfg.strict_quality
    if ncfg.strict_quality:
        log.warning("strict quality acts on scene metadata at tracking time; "
                    "use `marketpulse track --strict-quality` to build a strict panel")
    readings = read_panel(cfg.panel)
    rows = normalize_panel(readings, ncfg)
    out = Path(cfg.out)
    write_normalized(rows, out / "normalized.csv")

    bridged = None
    if bridge_overlap:
        vals, factors = bridge_generations(
            [r.raw_value for r in readings], [r.generation for r in readings],
            [day_number(r.acquired_utc) for r in readings],
            [f"{r.location_id}/{r.shape_dow.label}" for r in readings],
            overlap=parse_interval(bridge_overlap),
            base_period=parse_interval(bridge_base) if bridge_base else None)
        bridged = {"factors": factors}
        import csv
        with open(out / "bridged.csv", "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["location_id", "shape_dow", "scene_id", "generation", "bridged_value"])
            for r, v in zip(readings, vals):
                w.writerow([r.location_id, r.shape_dow.label, r.scene_id, r.generation.value, repr(float(v))])

    seasonal = {}
    lines = ["is_market_day,month,estimate,se,n"]
    for flag in (True, False):
        sel = [n for n in rows if n.reading.is_market_day == flag and not math.isnan(n.normalized_value)]
        clusters = {(n.reading.location_id, int(n.reading.shape_dow)) for n in sel}
        if len(clusters) < 2:
            continue
        est = seasonal_index([n.normalized_value for n in sel], [n.reading.acquired_utc.month for n in sel],
                             [f"{n.reading.location_id}/{int(n.reading.shape_dow)}" for n in sel])
        seasonal["market day" if flag else "non-market day"] = est
        lines += [f"{'true' if flag else 'false'},{e.month},{e.estimate!r},{e.se!r},{e.n}" for e in est]
    (out / "seasonal.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    if cfg.figures and seasonal:
        from .plotting import plot_seasonal
        (out / "figures").mkdir(exist_ok=True)
        plot_seasonal(seasonal, out / "figures" / "seasonal.png")
    flags = {}
    for n in rows:
        if n.flags:
            flags[n.flags] = flags.get(n.flags, 0) + 1
    _write_json({"command": "normalize", "config": cfg.public(), "window": ncfg.window.id,
                 "strict_quality": ncfg.strict_quality,
                 "exclusions": [[a.isoformat(), b.isoformat()] for a, b in ncfg.exclusions],
                 "readings": len(rows), "flagged": flags, "bridge": bridged,
                 "volatile": _volatile({"total": time.perf_counter() - t0})},
                out / "normalize_summary.json")
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    from .detect import THRESHOLDS, read_geojson, write_geojson
    from .evaluate import read_truth, score, write_metrics

    if not cfg.truth or not Path(cfg.truth).is_file():
        raise UsageError(f"--truth {cfg.truth!r} not found")
    if not cfg.detections or not Path(cfg.detections).is_dir():
        raise UsageError(f"--detections {cfg.detections!r} not found; run `marketpulse detect` first")
    truth = read_truth(cfg.truth)
    if not truth:
        raise UsageError("ground truth is empty")
    records, cands, crs = _inputs(cfg)
    by_id = {c.location_id: c for c in cands}
    missing = sorted(set(truth) - set(by_id))
    if missing:
        raise UsageError(f"truth locations without candidate polygons: {missing}")
    det_dir = Path(cfg.detections)
    dets = {}
    for c in cands:
        p = det_dir / f"{c.location_id}.geojson"
        if p.is_file():
            dets[c.location_id] = read_geojson(p)
    out = Path(cfg.out)
    (out / "pseudo").mkdir(parents=True, exist_ok=True)
    tasks = [(_records_for(records, by_id[loc]), by_id[loc], crs, cfg.cutoff, cfg.harmonize,
              truth[loc], _location_seed(cfg.seed, loc)) for loc in sorted(truth)]
    t0 = time.perf_counter()
    results = _map(_detect_worker, tasks, cfg.jobs)
    timings = {"total": time.perf_counter() - t0}
    pseudo, locs = {}, {}
    for r in results:
        lid = r["location_id"]
        timings[lid] = r.pop("time", 0.0)
        if r["status"] != "ok":
            locs[lid] = {"status": "error", "error": r["error"]}
            continue
        pseudo[lid] = r["detection"]
        write_geojson(r["detection"], out / "pseudo" / f"{lid}.geojson")
        locs[lid] = {"status": "ok", "pseudo_market_days": [d.label for d in r["detection"].market_days]}
    truth_eval = {k: v for k, v in truth.items()}
    rows = score({k: v for k, v in dets.items()}, truth_eval, pseudo, THRESHOLDS)
    write_metrics(rows, out / "metrics.csv")
    if cfg.figures:
        from .plotting import plot_metrics
        (out / "figures").mkdir(exist_ok=True)
        plot_metrics(rows, out / "figures" / "metrics.png")
    _write_json({"command": "evaluate", "config": cfg.public(), "locations": locs,
                 "volatile": _volatile(timings)}, out / "evaluate_summary.json")
    return _exit_status(results) if results else EXIT_OK


def cmd_synth(cfg: RunConfig, args) -> int:
    from . import synth

    base = synth.SynthConfig()
    if args.config:
        with open(args.config, encoding="utf-8") as fh:
            base = synth.config_from_dict(json.load(fh))
    changes = {}
    if args.size:
        changes.update(height=args.size, width=args.size)
    if args.start:
        changes["start"] = date.fromisoformat(args.start)
    if args.end:
        changes["end"] = date.fromisoformat(args.end)
    noise = base.noise
    if args.generation_switch:
        noise = replace(noise, generation_switch=date.fromisoformat(args.generation_switch))
    market = base.market or synth.MarketSpec()
    if args.seasonal_amplitude is not None:
        market = replace(market, seasonal_amplitude=args.seasonal_amplitude)
    base = replace(base, noise=noise, market=market, **changes)
    configs = synth.location_configs(args.locations, cfg.seed, base)
    if args.empty:
        configs += [replace(c, location_id=f"empty-{i:03d}", market=None,
                            origin=(c.origin[0], c.origin[1] - 50000.0))
                    for i, c in enumerate(synth.location_configs(args.empty, cfg.seed + 1, base))]
    run = synth.generate(configs, cfg.out)
    _write_json({"command": "synth", "config": cfg.public(), "scenes": run.n_scenes,
                 "locations": [synth.config_to_dict(c) for c in configs]},
                Path(cfg.out) / "synth_config.json")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="marketpulse", description="Periodic market detection and activity tracking "
                "from daily satellite imagery. Exit status: 0 ok, 2 some locations failed, 1 fatal.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, inputs=True):
        if inputs:
            sp.add_argument("--manifest", help="JSON Lines scene manifest")
            sp.add_argument("--candidates", help="GeoJSON candidate polygons")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--seed", type=int, default=0, help="base random seed")
        sp.add_argument("--jobs", type=int, default=os.cpu_count() or 1,
                        help="worker processes (results do not depend on it)")
        sp.add_argument("--no-figures", dest="figures", action="store_false", help="skip PNG figures")

    d = sub.add_parser("detect", help="detect markets and their days")
    common(d)
    d.add_argument("--cutoff", type=float, help="market-day cutoff (default 0.4096)")
    d.add_argument("--no-harmonize", dest="harmonize", action="store_false")

    t = sub.add_parser("track", help="activity panel inside detected markets")
    common(t)
    t.add_argument("--detections", help="detections directory written by `detect`")
    t.add_argument("--strict-quality", action="store_true",
                   help="drop scenes far from the median sun elevation or under 90%% clean")
    t.add_argument("--ring-monotone", dest="ring_monotone", action="store_true", default=True,
                   help="every ring inside the fringe must pass (default)")
    t.add_argument("--no-ring-monotone", dest="ring_monotone", action="store_false")
    t.add_argument("--no-harmonize", dest="harmonize", action="store_false")

    n = sub.add_parser("normalize", help="index the panel against reference windows")
    common(n, inputs=False)
    n.add_argument("--panel", help="panel.csv written by `track`")
    n.add_argument("--ref-window", default="centered182",
                   help="centered182 | trailing365 | calendar:<YEAR>")
    n.add_argument("--exclude", action="append", default=[], metavar="FROM:TO",
                   help="drop readings whose reference window overlaps this date range (repeatable)")
    n.add_argument("--config", help="JSON normalization config")
    n.add_argument("--strict-quality", action="store_true", help="recorded only; see `track --strict-quality`")
    n.add_argument("--bridge-overlap", metavar="FROM:TO", help="write bridged.csv scaling NEW to OLD over this range")
    n.add_argument("--bridge-base", metavar="FROM:TO", help="index OLD readings to 100 over this range first")

    e = sub.add_parser("evaluate", help="precision, recall and false-positive rate")
    common(e)
    e.add_argument("--truth", help="JSON ground truth")
    e.add_argument("--detections", help="detections directory written by `detect`")
    e.add_argument("--cutoff", type=float, help="cutoff recorded for pseudo-location runs")
    e.add_argument("--no-harmonize", dest="harmonize", action="store_false")

    s = sub.add_parser("synth", help="write a synthetic test corpus")
    common(s, inputs=False)
    s.add_argument("--locations", type=int, default=3, help="market locations")
    s.add_argument("--empty", type=int, default=0, help="extra locations without a market")
    s.add_argument("--size", type=int, help="raster side in pixels (default 128)")
    s.add_argument("--start", help="first acquisition date, YYYY-MM-DD")
    s.add_argument("--end", help="last acquisition date, YYYY-MM-DD")
    s.add_argument("--generation-switch", help="scenes before this date are OLD generation")
    s.add_argument("--seasonal-amplitude", type=float, help="relative attendance swing, e.g. 0.25")
    s.add_argument("--config", help="JSON synth config for the base location")
    return p


def main(argv=None) -> int:
    _setup_logging()
    try:
        args = build_parser().parse_args(argv)
        known = {f for f in RunConfig.__dataclass_fields__}
        cfg = RunConfig(**{k: v for k, v in vars(args).items() if k in known})
        cfg.check()
        if args.command == "detect":
            return cmd_detect(cfg)
        if args.command == "track":
            return cmd_track(cfg)
        if args.command == "normalize":
            return cmd_normalize(cfg, args.config, args.bridge_overlap, args.bridge_base)
        if args.command == "evaluate":
            return cmd_evaluate(cfg)
        if args.command == "synth":
            return cmd_synth(cfg, args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FATAL
    except Exception as exc:
        log.debug("%s", traceback.format_exc())
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FATAL
    return EXIT_FATAL


if __name__ == "__main__":
    sys.exit(main())
