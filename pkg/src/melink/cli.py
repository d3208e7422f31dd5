"""Command-line interface tying the toolkit into reproducible experiments.

Every command prints a JSON result summary on stdout and exits 0 on success;
failures print a machine-readable JSON error object on stderr and exit
nonzero.  Commands that involve randomness require a seed (from the config
file or --seed), and the seed is echoed into every output.  Output files are
written atomically.
"""

from __future__ import annotations

import json
import os
import sys
import tempfile
from dataclasses import dataclass, replace
from pathlib import Path

import click
import numpy as np

from . import __version__, scee, timing
from .channel import DEFAULT_NOISE_RMS, LinkConfig, save_capture, load_capture
from .engine import STEPS_PER_CYCLE
from .mlp import (TrainConfig, load_dataset, load_mlp, mlp_infer, save_dataset,
                  save_mlp, train_mlp)
from .recording import (RecordingConfig, load_lfp, save_lfp, stream_pipeline)
from .timing import ZcdConfig
from .transducer import (fit_impedance, load_model, load_samples,
                         reference_model, resonance_frequencies, save_model)
from .uplink import (DecodeError, FrameFormat, FrameSimulator, ber_sweep,
                     demod_drop, frame_stream, symbols_to_bits,
                     window_from_capture)

# ---------------------------------------------------------------------------
# experiment configuration


@dataclass
class ExperimentConfig:
    """Validated contents of an experiment config JSON file."""

    model_path: str | None
    frame: FrameFormat
    link: LinkConfig
    zcd: ZcdConfig
    bank: scee.SceeBank
    carrier_hz: float
    drive_amplitude: float
    steps_per_cycle: int
    seed: int | None
    recording: RecordingConfig
    grid_distances_m: list[float] | None
    grid_noise_rms: list[float] | None


def _expect(doc: dict, key: str, typ, default):
    if key not in doc:
        return default
    val = doc[key]
    if typ is float and isinstance(val, int):
        val = float(val)
    if not isinstance(val, typ):
        raise ValueError(f"config field {key!r} must be {typ.__name__}")
    return val


def load_experiment(path: str | Path | None) -> ExperimentConfig:
    """Load and validate an experiment config; all fields optional."""
    doc = {}
    if path is not None:
        doc = json.loads(Path(path).read_text())
        if not isinstance(doc, dict):
            raise ValueError("config root must be a JSON object")
    frame_doc = _expect(doc, "frame", dict, {})
    link_doc = _expect(doc, "link", dict, {})
    zcd_doc = _expect(doc, "timing", dict, {})
    bank_doc = _expect(doc, "bank", dict, {})
    rec_doc = _expect(doc, "recording", dict, {})
    grid_doc = _expect(doc, "grid", dict, {})
    frame = FrameFormat(
        excitation_cycles=int(_expect(frame_doc, "excitation_cycles", int, 24)),
        ringdown_cycles=int(_expect(frame_doc, "ringdown_cycles", int, 32)),
        symbol_bits=int(_expect(frame_doc, "symbol_bits", int, 3)),
        cycle_spacing=int(_expect(frame_doc, "cycle_spacing", int, 3)),
        base_cycle=int(_expect(frame_doc, "base_cycle", int, 3)))
    link = LinkConfig(
        distance=_expect(link_doc, "distance_m", float, 0.05),
        k0=_expect(link_doc, "k0_v_per_a", float, 200.0),
        d0=_expect(link_doc, "d0_m", float, 0.01),
        noise_rms=_expect(link_doc, "noise_rms_v", float, 0.0),
        rx_gain=_expect(link_doc, "rx_gain", float, 1.0),
        adc_bits=int(_expect(link_doc, "adc_bits", int, 12)),
        adc_fs=_expect(link_doc, "adc_fs_hz", float, 2e6),
        adc_range=_expect(link_doc, "adc_range_v", float, 2.0),
        seed=int(_expect(link_doc, "seed", int, 0)))
    zcd = ZcdConfig(
        t_delay_step=_expect(zcd_doc, "t_delay_step_s", float, 15e-9),
        base_delay=_expect(zcd_doc, "base_delay_s", float, 0.0),
        adaptive_coeff=_expect(zcd_doc, "adaptive_coeff", float, 0.0))
    bank = scee.SceeBank(
        n_fly=int(_expect(bank_doc, "n_fly", int, 4)),
        c_fly_total=_expect(bank_doc, "c_fly_total_farad", float, 1.2e-9))
    recording = RecordingConfig(
        fs_in=_expect(rec_doc, "fs_in_hz", float, 16000.0),
        lna_gain=_expect(rec_doc, "lna_gain", float, 15.0),
        v_range=_expect(rec_doc, "v_range_v", float, 0.2))
    seed = doc.get("seed")
    if seed is not None and not isinstance(seed, int):
        raise ValueError("config field 'seed' must be an integer")
    distances = grid_doc.get("distances_m")
    noises = grid_doc.get("noise_rms_v")
    for name, lst in (("distances_m", distances), ("noise_rms_v", noises)):
        if lst is not None and (not isinstance(lst, list) or
                                any(not isinstance(x, (int, float)) for x in lst)):
            raise ValueError(f"config field grid.{name} must be a number list")
    return ExperimentConfig(
        model_path=doc.get("model"),
        frame=frame, link=link, zcd=zcd, bank=bank,
        carrier_hz=_expect(doc, "carrier_hz", float, 331e3),
        drive_amplitude=_expect(doc, "drive_amplitude", float, 1.0),
        steps_per_cycle=int(_expect(doc, "steps_per_cycle", int, STEPS_PER_CYCLE)),
        seed=seed, recording=recording,
        grid_distances_m=distances, grid_noise_rms=noises)


def _make_sim(cfg: ExperimentConfig, model_path: str | None) -> FrameSimulator:
    path = model_path or cfg.model_path
    model = load_model(path) if path else reference_model()
    return FrameSimulator(model, cfg.frame, cfg.bank, cfg.carrier_hz,
                          cfg.drive_amplitude, cfg.zcd, cfg.steps_per_cycle)


# ---------------------------------------------------------------------------
# plumbing


def _emit(doc: dict) -> None:
    click.echo(json.dumps(doc, indent=2, sort_keys=True))


def _fail(exc: Exception) -> None:
    err = {"error": type(exc).__name__, "message": str(exc)}
    click.echo(json.dumps(err, sort_keys=True), err=True)
    sys.exit(2)


def _atomic_write_text(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _require_seed(cfg_seed, cli_seed) -> int:
    seed = cli_seed if cli_seed is not None else cfg_seed
    if seed is None:
        raise ValueError("this command is stochastic: provide --seed or a "
                         "'seed' field in the config")
    return int(seed)


def _parse_bits(spec: str) -> list[int]:
    """Bits from a hex string ('0xA5F' or 'A5F') or a file of 0/1 text."""
    p = Path(spec)
    if p.exists():
        text = "".join(p.read_text().split())
        if set(text) <= {"0", "1"} and text:
            return [int(c) for c in text]
        raise ValueError(f"bit file {spec} must contain only 0/1 characters")
    text = spec[2:] if spec.lower().startswith("0x") else spec
    try:
        bits = []
        for ch in text:
            v = int(ch, 16)
            bits += [(v >> 3) & 1, (v >> 2) & 1, (v >> 1) & 1, v & 1]
        return bits
    except ValueError:
        raise ValueError(f"--bits must be a hex string or a file of 0/1 text")


@click.group()
@click.version_option(__version__)
def main():
    """Magnetoelectric backscatter telemetry toolkit."""


# ---------------------------------------------------------------------------
# commands


@main.command()
@click.option("--input", "input_csv", required=True, type=click.Path(exists=True),
              help="Impedance sweep CSV (freq_hz,re_ohm,im_ohm).")
@click.option("--order", required=True, type=int, help="Number of resonance branches.")
@click.option("--out", "out_path", required=True, type=click.Path(),
              help="Output model JSON.")
def fit(input_csv, order, out_path):
    """Fit an equivalent-circuit model to a measured impedance sweep."""
    try:
        samples = load_samples(input_csv)
        model, residual = fit_impedance(samples, order)
        save_model(model, out_path)
        _emit({
            "residual": residual,
            "order": order,
            "c_p_farad": model.c_p,
            "f_sc_hz": [f for f, _ in resonance_frequencies(model)],
            "f_oc_hz": [f for _, f in resonance_frequencies(model)],
            "out": str(out_path),
        })
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command()
@click.option("--model", "model_path", type=click.Path(exists=True), default=None,
              help="Model JSON (defaults to the built-in reference model).")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--scee-code", type=int, default=1, show_default=True,
              help="Uplink code whose frame to simulate (0 = no extraction).")
@click.option("--out", "out_dir", required=True, type=click.Path())
def simulate(model_path, config_path, scee_code, out_dir):
    """Simulate one uplink frame and write waveform CSVs."""
    try:
        cfg = load_experiment(config_path)
        sim = _make_sim(cfg, model_path)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        tr = sim.waveform(scee_code)
        tr.to_csv(out / "waveform.csv")
        sched = sim.schedule(scee_code)
        summary = {
            "scee_code": scee_code,
            "carrier_hz": sim.f_carrier,
            "dt_s": sim.dt,
            "probes": tr.probes,
            "out": str(out / "waveform.csv"),
            "backend": tr.meta["backend"],
        }
        if sched is not None:
            scee.save_schedule(sched, out / "schedule.json")
            t_f = sched.flip_times[0]
            summary["flip_times_s"] = list(sched.flip_times)
            summary["amplitude_reduction_current"] = scee.amplitude_reduction(
                tr, t_f, window_cycles=2, settle_cycles=4, probe="i_b0")
            summary["schedule"] = str(out / "schedule.json")
        _emit(summary)
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command()
@click.option("--bits", required=True,
              help="Hex string or path to a 0/1 text file.")
@click.option("--model", "model_path", type=click.Path(exists=True), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None, help="Capture noise seed.")
@click.option("--out", "out_dir", required=True, type=click.Path())
def modulate(bits, model_path, config_path, seed, out_dir):
    """Encode a bit stream into frames and write the received captures."""
    try:
        cfg = load_experiment(config_path)
        sim = _make_sim(cfg, model_path)
        bit_list = _parse_bits(bits)
        symbols, pad = frame_stream(bit_list)
        link = cfg.link
        if seed is not None or cfg.seed is not None:
            link = replace(link, seed=_require_seed(cfg.seed, seed))
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for i, sym in enumerate(symbols):
            cap = sim.capture(sym, replace(link, seed=link.seed ^ i))
            name = f"frame_{i:05d}.csv"
            save_capture(cap, out / name)
            files.append(name)
        packets = {"symbols": symbols, "pad_bits": pad, "files": files,
                   "n_bits": len(bit_list), "seed": link.seed}
        _atomic_write_text(out / "packets.json",
                           json.dumps(packets, indent=2, sort_keys=True) + "\n")
        _emit({"frames": len(symbols), "pad_bits": pad, "seed": link.seed,
               "out": str(out)})
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command()
@click.option("--captures", "cap_dir", required=True, type=click.Path(exists=True),
              help="Directory produced by 'modulate'.")
@click.option("--method", type=click.Choice(["drop", "mlp"]), default="drop",
              show_default=True)
@click.option("--model-mlp", "mlp_path", type=click.Path(exists=True), default=None)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def demodulate(cap_dir, method, mlp_path, config_path):
    """Decode captures back into bits; reports BER against packets.json."""
    try:
        cfg = load_experiment(config_path)
        if method == "mlp" and mlp_path is None:
            raise ValueError("--model-mlp is required with --method mlp")
        mlp = load_mlp(mlp_path) if mlp_path else None
        packets = json.loads((Path(cap_dir) / "packets.json").read_text())
        decoded = []
        decode_errors = 0
        for name in packets["files"]:
            cap = load_capture(Path(cap_dir) / name)
            if method == "drop":
                try:
                    decoded.append(demod_drop(cap, cfg.frame, cfg.carrier_hz))
                except DecodeError:
                    decoded.append(0)
                    decode_errors += 1
            else:
                code, _ = mlp_infer(mlp, window_from_capture(cap))
                decoded.append(code)
        rx_bits = symbols_to_bits(decoded, packets["pad_bits"])
        tx = packets["symbols"]
        bit_errors = sum(bin(a ^ b).count("1") for a, b in zip(tx, decoded))
        hex_out = "".join(
            f"{int(''.join(str(b) for b in rx_bits[i:i + 4]).ljust(4, '0'), 2):x}"
            for i in range(0, len(rx_bits), 4))
        _emit({
            "method": method,
            "frames": len(decoded),
            "bits": 3 * len(tx),
            "bit_errors": bit_errors,
            "ber": bit_errors / (3 * len(tx)) if tx else 0.0,
            "decode_errors": decode_errors,
            "bits_hex": hex_out,
        })
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command("ber-sweep")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--model", "model_path", type=click.Path(exists=True), default=None)
@click.option("--packets", type=int, required=True)
@click.option("--decoders", default="drop", show_default=True,
              help="Comma-separated subset of drop,mlp.")
@click.option("--mlp", "mlp_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", required=True, type=click.Path())
def ber_sweep_cmd(config_path, model_path, packets, decoders, mlp_path, seed,
                  out_path):
    """Monte-Carlo BER over the distance or noise grid in the config."""
    try:
        cfg = load_experiment(config_path)
        seed = _require_seed(cfg.seed, seed)
        sim = _make_sim(cfg, model_path)
        decs = tuple(d.strip() for d in decoders.split(",") if d.strip())
        mlp = load_mlp(mlp_path) if mlp_path else None
        grid: list[LinkConfig] = []
        labels: list[str] = []
        if cfg.grid_distances_m:
            for i, d in enumerate(cfg.grid_distances_m):
                grid.append(replace(cfg.link, distance=float(d), seed=seed + i))
                labels.append(f"distance={d:g}m")
        elif cfg.grid_noise_rms:
            for i, nz in enumerate(cfg.grid_noise_rms):
                grid.append(replace(cfg.link, noise_rms=float(nz), seed=seed + i))
                labels.append(f"noise={nz:g}V")
        else:
            grid.append(replace(cfg.link, seed=seed))
            labels.append(f"distance={cfg.link.distance:g}m")
        rows = ber_sweep(sim, grid, packets, decs, mlp=mlp, labels=labels)
        lines = ["condition,decoder,packets,bits,bit_errors,decode_errors,ber"]
        for r in rows:
            lines.append(f"{r.label},{r.decoder},{r.packets},{r.bits},"
                         f"{r.bit_errors},{r.decode_errors},{r.ber:.6e}")
        _atomic_write_text(Path(out_path), "\n".join(lines) + "\n")
        _emit({"rows": len(rows), "seed": seed, "out": str(out_path),
               "ber": {f"{r.label}/{r.decoder}": r.ber for r in rows}})
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command("train-mlp")
@click.option("--dataset", "dataset_dir", required=True,
              type=click.Path(exists=True))
@click.option("--seed", type=int, required=True)
@click.option("--epochs", type=int, default=60, show_default=True)
@click.option("--out", "out_path", required=True, type=click.Path())
def train_mlp_cmd(dataset_dir, seed, epochs, out_path):
    """Train the 5-bit quantized MLP demodulator on a dataset directory."""
    try:
        windows, labels = load_dataset(dataset_dir)
        qmlp, fnet, acc = train_mlp(windows, labels,
                                    TrainConfig(epochs=epochs, seed=seed))
        save_mlp(qmlp, out_path)
        from .mlp import mlp_infer_batch, normalize_window
        agree = float(np.mean(mlp_infer_batch(qmlp, windows)
                              == fnet.predict(normalize_window(windows))))
        _emit({
            "windows": int(len(windows)),
            "float_train_accuracy": acc,
            "quant_float_agreement": agree,
            "seed": seed,
            "model_bytes": os.path.getsize(out_path),
            "out": str(out_path),
        })
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command("synth-dataset")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--model", "model_path", type=click.Path(exists=True), default=None)
@click.option("--per-class", type=int, default=50, show_default=True,
              help="Windows per code per distance.")
@click.option("--distances", default="0.01,0.02,0.03,0.04,0.05", show_default=True,
              help="Comma-separated distances in meters.")
@click.option("--noise-rms", type=float, default=DEFAULT_NOISE_RMS,
              show_default=True)
@click.option("--seed", type=int, required=True)
@click.option("--out", "out_dir", required=True, type=click.Path())
def synth_dataset(config_path, model_path, per_class, distances, noise_rms,
                  seed, out_dir):
    """Generate a labeled capture dataset from the simulator."""
    try:
        cfg = load_experiment(config_path)
        sim = _make_sim(cfg, model_path)
        caps, labels = [], []
        for di, d in enumerate(float(x) for x in distances.split(",")):
            for code in range(cfg.frame.n_codes):
                for r in range(per_class):
                    s = seed ^ ((di * cfg.frame.n_codes + code) * 100003 + r)
                    link = replace(cfg.link, distance=d, noise_rms=noise_rms,
                                   seed=s)
                    caps.append(sim.capture(code, link))
                    labels.append(code)
        save_dataset(caps, labels, out_dir)
        _emit({"windows": len(caps), "seed": seed, "out": str(out_dir)})
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


@main.command("stream-lfp")
@click.option("--input", "input_csv", required=True, type=click.Path(exists=True),
              help="LFP CSV (time_s,volts) at the recording input rate.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--model", "model_path", type=click.Path(exists=True), default=None)
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
def stream_lfp(input_csv, config_path, model_path, seed, out_dir):
    """End-to-end demo: record, compress, uplink, and reconstruct an LFP file."""
    try:
        cfg = load_experiment(config_path)
        link = cfg.link
        if link.noise_rms > 0 or seed is not None or cfg.seed is not None:
            link = replace(link, seed=_require_seed(
                cfg.seed if cfg.seed is not None else 0, seed))
        sim = _make_sim(cfg, model_path)
        volts = load_lfp(input_csv, cfg.recording)
        result = stream_pipeline(volts, cfg.recording, sim, link)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        fs_out = cfg.recording.fs_in / 8
        t = np.arange(len(result.reconstructed_volts)) / fs_out
        save_lfp(t, result.reconstructed_volts, out / "reconstruction.csv")
        _atomic_write_text(out / "report.json",
                           json.dumps(result.report, indent=2, sort_keys=True) + "\n")
        _emit({**result.report, "seed": link.seed, "out": str(out)})
    except Exception as exc:  # noqa: BLE001
        _fail(exc)


if __name__ == "__main__":
    main()
