"""High-level runnable workflows shared by the CLI and the test suite.

Every run echoes its effective configuration and a content hash of its inputs
into the output directory for provenance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgmod
from .config import Config, ConfigError
from .data import generate_synthetic, load_manifest
from .evaluation import (EmbeddingTable, Metrics, ProtocolSetting, cmc_map,
                         cosine_distance, extract_all, metrics_json,
                         rank_list, validity_mask, write_rank_list)
from .gradcheck import GradCheckReport, run_gradcheck
from .model import ModelConfig, build_model, count_params
from .training import (TrainResult, load_model_from_checkpoint, train,
                       write_param_report)

# Ablation presets named after the reported ablation rows: the SMR-free
# baseline, SMR without local mining / refinement, single-SMR and
# single-branch variants, and the parallel single-SMR pair.
ABLATION_PRESETS: dict[str, dict[str, bool]] = {
    "full": {},
    "wo_smr": {"disable_branch2": True, "disable_second_smr": True,
               "disable_local_mining": True, "disable_refinement": True},
    "wo_local": {"disable_local_mining": True},
    "wo_refine": {"disable_refinement": True},
    "smr_c": {"disable_branch2": True, "disable_second_smr": True},
    "smr_s": {"disable_branch2": True, "disable_second_smr": True,
              "swap_branch_order": True},
    "parallel_c_s": {"disable_second_smr": True},
    "smr_c_s": {"disable_branch2": True},
    "smr_s_c": {"disable_branch2": True, "swap_branch_order": True},
}


def git_blob_hash(data: bytes) -> str:
    """Content hash in git blob style: sha1 over 'blob <len>\\0<data>'."""
    h = hashlib.sha1()
    h.update(f"blob {len(data)}\0".encode("ascii"))
    h.update(data)
    return h.hexdigest()


def prepare_output_dir(cfg: Config, out_dir: str | Path,
                       config_path: Optional[Path] = None) -> Path:
    """Create the output directory and write the effective config plus input
    content hashes."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.effective.txt").write_text(
        "\n".join(cfg.lines()) + "\n", encoding="utf-8")
    hashes: dict[str, str] = {
        "effective_config": git_blob_hash(
            ("\n".join(cfg.lines()) + "\n").encode("utf-8"))}
    if config_path is not None and Path(config_path).is_file():
        hashes["config_file"] = git_blob_hash(Path(config_path).read_bytes())
    manifest = cfg["data.manifest"]
    if manifest and Path(manifest).is_file():
        hashes["manifest"] = git_blob_hash(Path(manifest).read_bytes())
    with open(out_dir / "provenance.json", "w", encoding="utf-8") as fh:
        json.dump(hashes, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir


def apply_preset(model_cfg: ModelConfig, preset: str) -> ModelConfig:
    if preset not in ABLATION_PRESETS:
        raise ConfigError(f"unknown ablation preset '{preset}'; known: "
                          f"{', '.join(sorted(ABLATION_PRESETS))}")
    return replace(model_cfg, **ABLATION_PRESETS[preset])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def run_synth(cfg: Config, out_dir: Path) -> Path:
    """Generate the synthetic dataset under ``out_dir / dataset``."""
    manifest = generate_synthetic(cfgmod.synth_spec(cfg), out_dir / "dataset")
    return manifest.root / "manifest.csv"


def _load_manifest(cfg: Config):
    path = cfg["data.manifest"]
    if not path:
        raise ConfigError("data.manifest must point at a manifest CSV")
    return load_manifest(path)


def run_train(cfg: Config, out_dir: Path,
              model_cfg: Optional[ModelConfig] = None,
              seed: Optional[int] = None) -> TrainResult:
    manifest = _load_manifest(cfg)
    if model_cfg is None:
        model_cfg = cfgmod.model_config(cfg, manifest.num_identities)
    train_cfg = cfgmod.train_config(cfg, seed=seed)
    write_param_report(build_model(model_cfg, seed=train_cfg.seed),
                       out_dir / "param_report.json")
    return train(model_cfg, train_cfg, manifest, out_dir,
                 aug_cfg=cfgmod.aug_config(cfg),
                 loss_cfg=cfgmod.loss_config(cfg))


def _protocol(cfg: Config, name: str) -> ProtocolSetting:
    if name == "camera_split":
        return ProtocolSetting(
            name=name,
            query_cameras=frozenset(cfg["eval.query_cameras"]),
            gallery_cameras=frozenset(cfg["eval.gallery_cameras"]))
    return ProtocolSetting(name=name)


def run_eval(cfg: Config, out_dir: Path,
             checkpoint: Optional[Path] = None) -> dict[str, Metrics]:
    """Evaluate a checkpoint under every requested protocol setting."""
    ckpt_path = checkpoint or cfg["eval.checkpoint"]
    if not ckpt_path:
        raise ConfigError("eval.checkpoint must point at a trained checkpoint")
    manifest = _load_manifest(cfg)
    model, _ = load_model_from_checkpoint(ckpt_path)
    model.eval()

    query = extract_all(model, manifest, "query", cfg["eval.batch_size"])
    gallery = extract_all(model, manifest, "gallery", cfg["eval.batch_size"])
    dist = cosine_distance(query.embeddings, gallery.embeddings)

    results: dict[str, Metrics] = {}
    for name in cfg["eval.settings"]:
        setting = _protocol(cfg, name)
        mask = validity_mask(query.identities, query.cameras,
                             gallery.identities, gallery.cameras, setting,
                             query_clothing=query.clothing,
                             gallery_clothing=gallery.clothing)
        metrics = cmc_map(dist, query.identities, gallery.identities, mask,
                          max_rank=cfg["eval.max_rank"])
        results[name] = metrics
        (out_dir / f"metrics_{name}.json").write_text(
            metrics_json(metrics, name), encoding="utf-8")
        lists = rank_list(dist, mask, query.identities, gallery.identities,
                          gallery.paths, k=cfg["eval.rank_list_k"])
        write_rank_list(lists, query.paths, out_dir / f"ranklist_{name}.tsv")
    return results


def run_extract(cfg: Config, out_dir: Path) -> Path:
    """Write the embedding table of one split to an ``.npz`` file."""
    ckpt_path = cfg["eval.checkpoint"]
    if not ckpt_path:
        raise ConfigError("eval.checkpoint must point at a trained checkpoint")
    manifest = _load_manifest(cfg)
    model, _ = load_model_from_checkpoint(ckpt_path)
    model.eval()
    split = cfg["extract.split"]
    table = extract_all(model, manifest, split, cfg["eval.batch_size"])
    path = out_dir / f"embeddings_{split}.npz"
    np.savez(path, embeddings=table.embeddings, identities=table.identities,
             cameras=table.cameras, clothing=table.clothing,
             paths=np.array(table.paths))
    return path


def run_gradcheck_cmd(cfg: Config, out_dir: Path) -> GradCheckReport:
    report = run_gradcheck(seed=cfg["gradcheck.seed"], eps=cfg["gradcheck.eps"],
                           threshold=cfg["gradcheck.threshold"])
    with open(out_dir / "gradcheck_report.json", "w", encoding="utf-8") as fh:
        json.dump(report.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return report


def run_pipeline(cfg: Config, out_dir: Path, preset: str = "full",
                 seed: Optional[int] = None) -> dict[str, Metrics]:
    """synth (if no manifest configured) -> train -> eval, in one directory."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not cfg["data.manifest"]:
        manifest_path = run_synth(cfg, out_dir)
        cfg = Config({**cfg.to_dict(), "data.manifest": str(manifest_path)})
    manifest = _load_manifest(cfg)
    model_cfg = apply_preset(
        cfgmod.model_config(cfg, manifest.num_identities), preset)
    result = run_train(cfg, out_dir, model_cfg=model_cfg, seed=seed)
    return run_eval(cfg, out_dir, checkpoint=result.checkpoint_path)


def run_ablate(cfg: Config, out_dir: Path) -> dict:
    """Train and evaluate every requested preset over the requested seeds and
    emit a comparison table."""
    out_dir = Path(out_dir)
    setting = cfg["ablate.setting"]
    if setting not in cfg["eval.settings"]:
        raise ConfigError(f"ablate.setting '{setting}' must be included in "
                          f"eval.settings")
    table: dict[str, dict] = {}
    for preset in cfg["ablate.presets"]:
        if preset not in ABLATION_PRESETS:
            raise ConfigError(f"unknown ablation preset '{preset}'")
        rank1s, maps = [], []
        for seed in cfg["ablate.seeds"]:
            run_dir = out_dir / preset / f"seed{seed}"
            metrics = run_pipeline(cfg, run_dir, preset=preset, seed=seed)
            rank1s.append(metrics[setting].rank(1))
            maps.append(metrics[setting].map)
        table[preset] = {
            "rank1_mean": float(np.mean(rank1s)),
            "rank1_per_seed": [float(r) for r in rank1s],
            "map_mean": float(np.mean(maps)),
            "map_per_seed": [float(m) for m in maps],
        }
    payload = {"setting": setting, "seeds": list(cfg["ablate.seeds"]),
               "results": table}
    with open(out_dir / "ablation_table.json", "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "ablation_table.tsv", "w", encoding="utf-8") as fh:
        fh.write("preset\trank1_mean\tmap_mean\n")
        for preset, row in table.items():
            fh.write(f"{preset}\t{row['rank1_mean']:.4f}\t"
                     f"{row['map_mean']:.4f}\n")
    return payload


def param_accounting(num_train_identities: int = 77) -> dict:
    """Parameter report for the full-scale architecture."""
    from .backbone import BackboneConfig
    from .model import SMRTemplate
    model_cfg = ModelConfig(
        backbone=BackboneConfig(scale="full", input_height=384,
                                input_width=192, channels_out=1024),
        smr=SMRTemplate(num_parts=8, embed_channels=2048, part_channels=256,
                        reduction_ratio=16),
        num_train_identities=num_train_identities)
    model = build_model(model_cfg, seed=0)
    total, breakdown = count_params(model)
    return {"total": total, "breakdown": dict(sorted(breakdown.items()))}
