"""Experiment runners behind the CLI: single runs and the fixed presets."""

from __future__ import annotations

import json
import logging
import statistics
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import io as pio
from . import model as M
from .channel import ChannelConfig, generate_bits
from .training import (MetricsRecord, TrainConfig, evaluate, phase_nmse, predict, time_inference,
                       train)

log = logging.getLogger(__name__)


def data_seeds(seed: int) -> tuple[int, int, int]:
    """Train/validation/test dataset seeds derived from one experiment seed."""
    return 1000 + seed, 2000 + seed, 3000 + seed


@dataclass
class TrainedModel:
    spec: M.NetworkSpec
    params: M.ParameterStore
    records: list[MetricsRecord]

    @property
    def final_nmse(self) -> float:
        return self.records[-1].val_nmse_linear


def train_model(model: str, C: int, seed: int, cfg: TrainConfig, n_train: int, n_val: int,
                K: int = M.DEFAULT_K, N: int = M.DEFAULT_N, train_data=None, val_data=None,
                progress: bool = False) -> TrainedModel:
    """Build, initialise and train one model.  ``seed`` drives init, data and noise."""
    spec = M.build_network(model, K, C, N)
    s_train, s_val, _ = data_seeds(seed)
    train_data = generate_bits(n_train, K, s_train) if train_data is None else train_data
    val_data = generate_bits(n_val, K, s_val) if val_data is None else val_data
    params = M.init_parameters(spec, seed)
    params, records = train(spec, params, train_data, replace(cfg, seed=seed), val_data, progress)
    return TrainedModel(spec, params, records)


def _manifest(cfg: pio.ExperimentConfig, extra: dict) -> dict:
    return {
        "package_version": __version__,
        "config": pio.format_config(cfg),
        "seed": cfg.seed,
        "seeds": [cfg.seed + i for i in range(cfg.seeds)],
        "data_seeds": [data_seeds(cfg.seed + i) for i in range(cfg.seeds)],
        **extra,
    }


def _write_manifest(out: Path, cfg: pio.ExperimentConfig, extra: dict | None = None) -> None:
    (out / "manifest.json").write_text(json.dumps(_manifest(cfg, extra or {}), indent=2) + "\n")


def _test_data(cfg: pio.ExperimentConfig, seed: int, K: int) -> np.ndarray:
    if cfg.test_data:
        return pio.load_dataset(cfg.test_data)
    return generate_bits(cfg.n_test, K, data_seeds(seed)[2])


def _loaded(path):
    return pio.load_dataset(path) if path else None


def run_single(cfg: pio.ExperimentConfig, progress: bool = False) -> dict:
    """Train (or load) one model, evaluate it and write weights, metrics and a manifest."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.weights:
        params, spec = pio.load_weights(cfg.weights)
        records = []
    else:
        trained = train_model(cfg.model, cfg.C, cfg.seed, cfg.train, cfg.n_train, cfg.n_val, cfg.K, cfg.N,
                              _loaded(cfg.train_data), _loaded(cfg.val_data), progress)
        spec, params, records = trained.spec, trained.params, trained.records
        pio.save_weights(params, spec, out / "weights.pscd")
        pio.export_metrics_csv(records, out / "metrics.csv")
    test = _test_data(cfg, cfg.seed, spec.K)
    result = evaluate(spec, params, test, cfg.eval_snr_db, trials_seed=cfg.seed, g=cfg.train.g)
    pio.export_metrics_csv([result], out / "eval.csv")
    summary = {
        "model": spec.name, "K": spec.K, "C": spec.C, "N": spec.N, "cr": spec.cr,
        "eval_snr_db": cfg.eval_snr_db, "test_nmse": result.val_nmse_linear,
        "test_nmse_db": result.val_nmse_db, "test_ber": result.bit_error_rate,
        "parameters": M.count_parameters(spec),
    }
    _write_manifest(out, cfg, {"summary": summary})
    return summary


def run_table1(cfg: pio.ExperimentConfig, crs=((2, 9), (3, 9)), progress: bool = False) -> dict:
    """BN ablation: PSCN variants a-f (plus PSCDN) at each CR, median over seeds.

    Writes ``table1.csv`` (variant x CR grid of median final validation NMSE)
    and ``table1_runs.csv`` with every individual run.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    models = [f"pscn-{v}" for v in M.VARIANTS] + ["pscdn"]
    runs = []
    for model in models:
        for C, K in crs:
            for i in range(cfg.seeds):
                seed = cfg.seed + i
                t = train_model(model, C, seed, cfg.train, cfg.n_train, cfg.n_val, K, cfg.N, progress=progress)
                runs.append([model, f"{C}/{K}", seed, t.final_nmse])
                log.info("%s CR=%d/%d seed=%d nmse=%.4f", model, C, K, seed, t.final_nmse)
    grid = {m: {f"{C}/{K}": statistics.median(r[3] for r in runs if r[0] == m and r[1] == f"{C}/{K}")
                for C, K in crs} for m in models}
    header = ["variant"] + [f"cr_{C}_{K}" for C, K in crs]
    pio.write_table_csv(header, [[m[5:]] + [grid[m][f"{C}/{K}"] for C, K in crs] for m in models[:-1]],
                        out / "table1.csv")
    pio.write_table_csv(["model", "cr", "seed", "final_val_nmse"], runs, out / "table1_runs.csv")
    _write_manifest(out, cfg, {"preset": "table1", "median_nmse": grid})
    return grid


def run_fig3(cfg: pio.ExperimentConfig, crs=pio.PRESET_CRS, progress: bool = False) -> list[list]:
    """PSCDN NMSE over CR x SNR; one trained model per CR, evaluated at every SNR."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for C, K in crs:
        t = train_model("pscdn", C, cfg.seed, cfg.train, cfg.n_train, cfg.n_val, K, cfg.N, progress=progress)
        test = _test_data(cfg, cfg.seed, K)
        for snr in cfg.snr_grid:
            r = evaluate(t.spec, t.params, test, snr, trials_seed=cfg.seed, g=cfg.train.g)
            out_bits = predict(t.spec, t.params, test, ChannelConfig(cfg.train.g, snr),
                               np.random.default_rng(cfg.seed))
            rows.append([f"{C}/{K}", C, float(snr), r.val_nmse_linear, r.val_nmse_db, r.bit_error_rate,
                         phase_nmse(out_bits, test)])
    pio.write_table_csv(["cr", "C", "snr_db", "nmse_linear", "nmse_db", "ber", "phase_nmse"], rows,
                        out / "fig3.csv")
    _write_manifest(out, cfg, {"preset": "fig3-pscdn"})
    return rows


def run_table2(cfg: pio.ExperimentConfig, progress: bool = False) -> dict:
    """PSCDN model size and median inference time over the test set."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.weights:
        params, spec = pio.load_weights(cfg.weights)
    else:
        t = train_model("pscdn", cfg.C, cfg.seed, cfg.train, cfg.n_train, cfg.n_val, cfg.K, cfg.N,
                        progress=progress)
        spec, params = t.spec, t.params
    test = _test_data(cfg, cfg.seed, spec.K)
    seconds = time_inference(spec, params, test, cfg.timing_repetitions)
    row = {"model": spec.name, "cr": f"{spec.C}/{spec.K}", "parameters": M.count_parameters(spec),
           "running_time_s": seconds, "test_samples": len(test)}
    pio.write_table_csv(list(row), [list(row.values())], out / "table2.csv")
    _write_manifest(out, cfg, {"preset": "table2-pscdn", "table2": row})
    return row


def run_experiment(cfg: pio.ExperimentConfig, progress: bool = False):
    cfg.validate()
    if cfg.preset == "table1":
        return run_table1(cfg, progress=progress)
    if cfg.preset == "fig3-pscdn":
        return run_fig3(cfg, progress=progress)
    if cfg.preset == "table2-pscdn":
        return run_table2(cfg, progress=progress)
    return run_single(cfg, progress=progress)
