"""CSV tables and vector figures for an ``EvalResult``."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import EvalResult, StrategyId  # noqa: E402

NMSE_HEADER = ("strategy", "snr_db", "nmse_mean", "nmse_std", "n", "nmse_mean_db")
LOSS_HEADER = ("strategy", "epoch", "loss")
FLAGS_HEADER = ("strategy", "type", "rate")

STYLE = {
    StrategyId.HALLUCINATION: dict(color="#c0392b", marker="o"),
    StrategyId.NO_ATTENTION: dict(color="#2980b9", marker="s"),
    StrategyId.NO_LLM: dict(color="#8e44ad", marker="^"),
    StrategyId.INTEGRATED: dict(color="#27ae60", marker="D"),
}


class ReportError(OSError):
    pass


def _fmt(x: float) -> str:
    # repr round-trips a float exactly
    return repr(float(x))


def _db(x: float) -> float:
    return 10 * math.log10(x) if x > 0 and math.isfinite(x) else float("nan") if x <= 0 else float("inf")


def _write_csv(path: Path, header, rows) -> Path:
    try:
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc
    return path


def nmse_rows(result: EvalResult):
    for sid, snr in result.cells():
        mean, std, n = result.summary(sid, snr)
        yield sid.value, _fmt(snr), _fmt(mean), _fmt(std), n, _fmt(_db(mean))


def loss_rows(result: EvalResult):
    for sid, r in result.strategies.items():
        for epoch, loss in enumerate(r.loss, start=1):
            yield sid.value, epoch, _fmt(loss)


def flag_rows(result: EvalResult):
    for sid, r in result.strategies.items():
        for kind, rate in r.flag_rates().items():
            yield sid.value, kind, _fmt(rate)


def read_nmse_csv(path: str | Path) -> list[dict]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        for k in ("snr_db", "nmse_mean", "nmse_std", "nmse_mean_db"):
            r[k] = float(r[k])
        r["n"] = int(r["n"])
    return rows


def plot_loss(result: EvalResult, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for sid, r in result.strategies.items():
        if r.loss:
            ax.plot(range(1, len(r.loss) + 1), r.loss, label=sid.label, **STYLE[sid], ms=4)
    ax.set_xlabel("epoch")
    ax.set_ylabel("denoising loss")
    ax.grid(alpha=0.3)
    if result.strategies:
        ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)
    return path


def plot_nmse(result: EvalResult, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(4.5, 3.2))
    for sid in result.strategies:
        snrs = [s for s in result.snr_db if result.strategies[sid].nmse.get(s)]
        stats = [result.summary(sid, s) for s in snrs]
        means = [m for m, _, _ in stats]
        err = [sd / math.sqrt(n) for _, sd, n in stats]
        ax.errorbar(snrs, means, yerr=err, label=sid.label, capsize=2, ms=4, **STYLE[sid])
    ax.set_xlabel("SNR (dB)")
    ax.set_ylabel("NMSE")
    ax.set_yscale("log")
    ax.grid(alpha=0.3, which="both")
    if result.strategies:
        ax.legend(frameon=False)
    fig.tight_layout()
    _save(fig, path)
    return path


def _save(fig, path: Path) -> None:
    try:
        # no timestamp so reruns give identical files
        fig.savefig(path, metadata={"Date": None} if path.suffix == ".svg" else {"CreationDate": None})
    except OSError as exc:
        raise ReportError(f"cannot write {path}: {exc}") from exc
    finally:
        plt.close(fig)


def emit_report(result: EvalResult, out_dir: str | Path, figures: bool = True) -> dict[str, Path]:
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ReportError(f"cannot create {out}: {exc}") from exc
    files = {
        "nmse": _write_csv(out / "nmse.csv", NMSE_HEADER, nmse_rows(result)),
        "loss": _write_csv(out / "loss.csv", LOSS_HEADER, loss_rows(result)),
        "flags": _write_csv(out / "flags.csv", FLAGS_HEADER, flag_rows(result)),
    }
    (out / "result.json").write_text(result.to_json(), encoding="utf-8")
    files["result"] = out / "result.json"
    if figures:
        for ext in ("svg", "pdf"):
            files[f"loss_{ext}"] = plot_loss(result, out / f"loss.{ext}")
            files[f"nmse_{ext}"] = plot_nmse(result, out / f"nmse.{ext}")
    return files
