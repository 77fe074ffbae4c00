"""Command-line orchestration: gen-scenes, train-victim, attack, render, eval,
export-mesh.

Configuration is a single JSON document; `--set section.key=value` flags
override document keys (flag wins). Relative paths in the document resolve
against the config file's directory. Every command echoes its fully-resolved
config next to its outputs and is idempotent for a fixed config and seed.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

_SCHEMA = {
    "dataset": {
        "dir", "n_scenes", "cars_min", "cars_max", "ground_x", "ground_y",
        "ground_density", "ground_jitter", "car_density", "car_jitter",
        "car_depth", "car_bearing", "car_yaw_spread", "sensor_height",
        "image_width", "image_height", "focal", "image_noise",
        "sprite_brightness", "seed",
    },
    "lidar": {
        "n_beams", "elevation_start_deg", "elevation_end_deg",
        "azimuth_step_deg", "azimuth_start_deg", "azimuth_end_deg",
        "noise_std", "max_range",
    },
    "mesh": {"subdivisions", "radius"},
    "victim": {
        "checkpoint", "seg_hidden", "seg_steps", "seg_batch_frustums", "seg_lr",
        "scorer_steps", "scorer_batch", "scorer_lr", "box_jitter_scale",
        "box_jitter_shift", "clutter_fraction", "clutter_size", "label_margin",
        "seed", "seg_gate", "ap_gate",
    },
    "attack": {
        "epochs", "batch_size", "seed", "lambda_lap", "extent_limits",
        "lr_shape", "lr_texture", "frustum_source", "clearance",
        "texture_iou_gate",
    },
    "eval": {"iou_threshold", "view", "n_recall_points", "seed"},
    "_root": {"seed", "out_dir", "dataset", "lidar", "mesh", "victim", "attack", "eval"},
}


class ConfigError(ValueError):
    pass


def load_config(path: str, overrides: list[str]) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        key, raw = item.split("=", 1)
        parts = key.split(".")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value

    _validate(doc, path)
    doc["_base_dir"] = str(path.parent.resolve())
    return doc


def _validate(doc: dict, path) -> None:
    unknown = set(doc) - _SCHEMA["_root"]
    if unknown:
        raise ConfigError(f"{path}: unknown top-level keys {sorted(unknown)}")
    for section, allowed in _SCHEMA.items():
        if section.startswith("_") or section not in doc:
            continue
        if not isinstance(doc[section], dict):
            raise ConfigError(f"{path}: section {section!r} must be an object")
        bad = set(doc[section]) - allowed
        if bad:
            raise ConfigError(f"{path}: unknown keys in {section!r}: {sorted(bad)}")


def _resolve(doc: dict, dotted: str, default=None):
    node = doc
    for part in dotted.split("."):
        if not isinstance(node, dict) or part not in node:
            return default
        node = node[part]
    return node


def _resolve_path(doc: dict, raw: str) -> Path:
    p = Path(raw)
    return p if p.is_absolute() else Path(doc["_base_dir"]) / p


def _out_dir(doc: dict) -> Path:
    out = _resolve_path(doc, _resolve(doc, "out_dir", "runs/default"))
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(doc: dict, out: Path, command: str) -> None:
    clean = {k: v for k, v in doc.items() if not k.startswith("_")}
    (out / f"{command}.config.json").write_text(
        json.dumps(clean, indent=2, sort_keys=True) + "\n"
    )


def _synth_config(doc: dict):
    from .dataio import SynthConfig

    section = dict(doc.get("dataset", {}))
    section.pop("dir", None)
    section.setdefault("seed", _resolve(doc, "seed", 0))
    for key in ("ground_x", "ground_y", "car_depth", "sprite_brightness"):
        if key in section:
            section[key] = tuple(section[key])
    return SynthConfig(**section)


def _lidar_config(doc: dict):
    import numpy as np

    from .lidar import LidarConfig

    section = dict(doc.get("lidar", {}))
    n_beams = section.pop("n_beams", 72)
    e0 = math.radians(section.pop("elevation_start_deg", -11.0))
    e1 = math.radians(section.pop("elevation_end_deg", 9.0))
    kwargs = {
        "elevations": np.linspace(e0, e1, n_beams),
        "azimuth_step": math.radians(section.pop("azimuth_step_deg", 0.22)),
        "azimuth_start": math.radians(section.pop("azimuth_start_deg", -45.0)),
        "azimuth_end": math.radians(section.pop("azimuth_end_deg", 45.0)),
        "noise_std": section.pop("noise_std", 0.008),
        "max_range": section.pop("max_range", 60.0),
    }
    if section:
        raise ConfigError(f"unknown lidar keys: {sorted(section)}")
    return LidarConfig(**kwargs)


def _base_mesh(doc: dict):
    from .geometry import make_icosphere

    mesh = doc.get("mesh", {})
    return make_icosphere(mesh.get("subdivisions", 2), mesh.get("radius", 0.4))


def _attack_config(doc: dict, phase: str):
    from .attack import AttackConfig

    section = dict(doc.get("attack", {}))
    section.setdefault("seed", _resolve(doc, "seed", 0))
    if "extent_limits" in section:
        section["extent_limits"] = tuple(section["extent_limits"])
    return AttackConfig(phase=phase, **section)


def _eval_config(doc: dict):
    from .metrics import EvalConfig

    section = dict(doc.get("eval", {}))
    section.pop("seed", None)
    return EvalConfig(**section)


def _dataset_dir(doc: dict) -> Path:
    raw = _resolve(doc, "dataset.dir")
    if raw is None:
        raise ConfigError("config needs dataset.dir")
    return _resolve_path(doc, raw)


def _load_split(doc: dict):
    from .dataio import load_dataset, split_scene_ids

    scenes = load_dataset(_dataset_dir(doc))
    train_ids, val_ids = split_scene_ids([s.scene_id for s in scenes])
    by_id = {s.scene_id: s for s in scenes}
    return [by_id[i] for i in train_ids], [by_id[i] for i in val_ids]


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(
            f"missing prerequisite {path}; run `advmesh {producer}` first"
        )
    return path


# --- commands ----------------------------------------------------------------

def cmd_gen_scenes(args) -> int:
    from .dataio import gen_synthetic, write_kitti_scene

    doc = load_config(args.config, args.set)
    out = _out_dir(doc)
    dataset_dir = _dataset_dir(doc)
    dataset_dir.mkdir(parents=True, exist_ok=True)
    scenes = gen_synthetic(_synth_config(doc))
    for scene in scenes:
        write_kitti_scene(dataset_dir, scene)
    _echo_config(doc, out, "gen-scenes")
    print(f"wrote {len(scenes)} scenes to {dataset_dir}")
    return 0


def cmd_train_victim(args) -> int:
    from .metrics import EvalConfig
    from .victim import VictimTrainConfig, save_victim, train_victim

    doc = load_config(args.config, args.set)
    out = _out_dir(doc)
    train, val = _load_split(doc)
    section = dict(doc.get("victim", {}))
    ckpt_name = section.pop("checkpoint", "victim.ckpt")
    seg_gate = section.pop("seg_gate", 0.90)
    ap_gate = section.pop("ap_gate", 0.80)
    if "clutter_size" in section:
        section["clutter_size"] = tuple(section["clutter_size"])
    section.setdefault("seed", _resolve(doc, "seed", 0))
    cfg = VictimTrainConfig(**section)
    eval_cfg = EvalConfig(iou_threshold=0.5, view="bev")
    victim, report = train_victim(train, val, cfg, eval_cfg)
    save_victim(out / ckpt_name, victim)
    (out / "victim_report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _echo_config(doc, out, "train-victim")
    print(
        f"victim trained: seg_accuracy={report['seg_accuracy']:.4f} "
        f"clean_bev_ap={report['clean_bev_ap']:.4f} "
        f"(gates: seg >= {seg_gate}, ap >= {ap_gate})"
    )
    if report["seg_accuracy"] < seg_gate or report["clean_bev_ap"] < ap_gate:
        print("victim accuracy gate unmet", file=sys.stderr)
        return 3
    return 0


_PHASE_OUTPUTS = {
    ("shape", False): "mesh_shape.ckpt",
    ("texture", True): "mesh_combined.ckpt",
    ("texture", False): "mesh_texture_only.ckpt",
}


def cmd_attack(args) -> int:
    from .attack import loss_csv, run_attack, save_attack_params, load_attack_params
    from .victim import load_victim

    doc = load_config(args.config, args.set)
    out = _out_dir(doc)
    victim = load_victim(_require(out / _resolve(doc, "victim.checkpoint", "victim.ckpt"), "train-victim"))
    train, _ = _load_split(doc)
    cfg = _attack_config(doc, args.phase)
    base = _base_mesh(doc)
    params = None
    if args.init:
        params = load_attack_params(_resolve_path(doc, args.init))
    params, reports = run_attack(cfg, train, victim, base, _lidar_config(doc), params)
    name = args.out or _PHASE_OUTPUTS[(args.phase, bool(args.init))]
    save_attack_params(out / name, params, phase=args.phase)
    csv_path = out / f"loss_{Path(name).stem}.csv"
    csv_path.write_text(loss_csv(reports))
    _echo_config(doc, out, f"attack-{args.phase}")
    final = reports[-1] if reports else None
    print(f"attack ({args.phase}) done: checkpoint {out / name}, losses {csv_path}")
    if final is not None:
        print(f"final batch: total={final.total:.6f} image={final.image_loss:.6f}")
    return 0


def cmd_render(args) -> int:
    from .attack import apply_mesh_to_scene, load_attack_params
    from .dataio import write_png, write_velodyne

    doc = load_config(args.config, args.set)
    out = _out_dir(doc)
    _, val = _load_split(doc)
    by_id = {s.scene_id: s for s in val}
    if args.scene not in by_id:
        raise ConfigError(f"scene {args.scene!r} not in the validation split")
    scene = by_id[args.scene]
    params = load_attack_params(_require(_resolve_path(doc, args.params), "attack"))
    attacked = apply_mesh_to_scene(
        scene, params, _lidar_config(doc), seed=_resolve(doc, "eval.seed", 0)
    )
    write_png(out / f"{scene.scene_id}_clean.png", scene.image)
    write_png(out / f"{scene.scene_id}_attacked.png", attacked.image)
    write_velodyne(out / f"{scene.scene_id}_clean.bin", scene.cloud)
    write_velodyne(out / f"{scene.scene_id}_attacked.bin", attacked.cloud)
    _echo_config(doc, out, "render")
    print(f"wrote before/after pair for scene {scene.scene_id} to {out}")
    return 0


def cmd_eval(args) -> int:
    from .attack import load_attack_params
    from .experiment import evaluate_variants
    from .metrics import ap_table_csv, format_ap_table
    from .victim import load_victim

    doc = load_config(args.config, args.set)
    out = _out_dir(doc)
    victim = load_victim(_require(out / _resolve(doc, "victim.checkpoint", "victim.ckpt"), "train-victim"))
    _, val = _load_split(doc)

    wanted = ["none", "pc", "img", "pc+img"] if args.attack == "all" else [args.attack]
    ckpt_for = {
        "pc": out / "mesh_shape.ckpt",
        "img": out / "mesh_texture_only.ckpt",
        "pc+img": out / "mesh_combined.ckpt",
    }
    producer_for = {
        "pc": "attack --phase shape",
        "img": "attack --phase texture",
        "pc+img": "attack --phase texture --init mesh_shape.ckpt",
    }
    params = {}
    for variant in wanted:
        if variant == "none":
            continue
        params[variant] = load_attack_params(
            _require(ckpt_for[variant], producer_for[variant])
        )

    reports, table_rows, extras = evaluate_variants(
        wanted, params, victim, val, _lidar_config(doc), _eval_config(doc),
        seed=_resolve(doc, "eval.seed", 0),
    )
    table = format_ap_table(table_rows)
    (out / "ap_table.txt").write_text(table + "\n")
    (out / "ap_table.csv").write_text(ap_table_csv(table_rows))
    (out / "eval_metrics.json").write_text(json.dumps(extras, indent=2, sort_keys=True) + "\n")
    _echo_config(doc, out, "eval")
    print(table)
    return 0


def cmd_export_mesh(args) -> int:
    from .attack import load_attack_params
    from .meshio import write_ply

    params = load_attack_params(_require(Path(args.checkpoint), "attack"))
    write_ply(params.local_mesh(), args.output, binary=not args.ascii)
    print(f"wrote {args.output}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="advmesh",
        description="Universal adversarial mesh attacks on a cascaded camera-LiDAR car detector",
    )
    parser.add_argument("--threads", type=int, default=1, help="cap worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **extra):
        p = sub.add_parser(name)
        if name != "export-mesh":
            p.add_argument("config", help="JSON run configuration")
            p.add_argument(
                "--set", action="append", default=[], metavar="KEY=VALUE",
                help="override a config key (dotted path); flag wins over the document",
            )
        p.set_defaults(fn=fn)
        return p

    add("gen-scenes", cmd_gen_scenes)
    add("train-victim", cmd_train_victim)
    p = add("attack", cmd_attack)
    p.add_argument("--phase", choices=("shape", "texture"), required=True)
    p.add_argument("--init", help="warm-start from an attack checkpoint")
    p.add_argument("--out", help="checkpoint filename override")
    p = add("render", cmd_render)
    p.add_argument("--scene", required=True, help="scene id from the validation split")
    p.add_argument("--params", default="mesh_combined.ckpt", help="attack checkpoint")
    p = add("eval", cmd_eval)
    p.add_argument(
        "--attack", choices=("none", "pc", "img", "pc+img", "all"), default="all"
    )
    p = add("export-mesh", cmd_export_mesh)
    p.add_argument("checkpoint", help="attack checkpoint path")
    p.add_argument("output", help="output .ply path")
    p.add_argument("--ascii", action="store_true", help="write ASCII PLY")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(args.threads))
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
