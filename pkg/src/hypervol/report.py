"""Evaluation report bundle: structured text, CSV curves, matplotlib figures."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np


def _write_csv(path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(f"{v:.8g}" if isinstance(v, float) else str(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def write_report_bundle(out_dir, cfg, summary: dict, tau_mean: np.ndarray,
                        true_taus: np.ndarray | None) -> None:
    out_dir = Path(out_dir)
    lines = ["reconstruction evaluation", "=" * 40, ""]
    lines.append(f"snapshots total/post-burn-in: {summary['n_snapshots']}/{summary['n_post']}")
    lines.append(f"global alignment correlation: {summary['alignment_score']:.4f}")
    lines.append(f"alignment reflected: {summary['alignment_reflected']}")
    third = summary["third_nyquist_shell"]
    lines.append("")
    lines.append("masked FSC at reference state points")
    for i, (ref, res) in enumerate(zip(summary["reference_particles"], summary["fsc"])):
        ok = bool(np.all(res["curve"][:third + 1] >= 0.5))
        lines.append(f"  point {i} (particle {ref}): crossing shell {res['crossing_shell']}"
                     f"  fsc>=0.5 to 1/3 Nyquist (shell {third}): {ok}")
        _write_csv(out_dir / f"fsc_point{i}.csv", ["shell", "freq_cyc_per_vox", "fsc"],
                   zip(res["shells"].tolist(), res["freq"].tolist(),
                       [float(v) for v in res["curve"]]))
    if summary["states"] is not None:
        sc = summary["states"]
        lines.append("")
        lines.append("state recovery (|Spearman| per dimension, label switching resolved)")
        for j, s in enumerate(sc["scores"]):
            flag = " [degenerate]" if sc["degenerate"][j] else ""
            lines.append(f"  dim {j}: {s:.4f}{flag}")
        lines.append(f"  permutation used: {sc['permutation']}")
    if summary["tau_drift_flag"]:
        lines.append("")
        lines.append("WARNING: per-particle state estimates drifted between early and "
                     "late samples (Spearman < 0.9); the state parameterization may "
                     "have re-anchored during the run.")
    if summary["occupancy"] is not None:
        occ = summary["occupancy"]
        lines.append("")
        lines.append(f"state occupancy: {occ['counts'].sum()} particles over "
                     f"{occ['counts'].size} bins")
        if occ["counts"].ndim == 1:
            _write_csv(out_dir / "occupancy.csv", ["bin_lo", "bin_hi", "count"],
                       zip(occ["edges"][:-1].tolist(), occ["edges"][1:].tolist(),
                           occ["counts"].tolist()))
    lines.append("")
    lines.append("acceptance history (iteration, rates, log posterior)")
    rows = []
    for it, rates, logpost in summary["accept_history"]:
        rate_s = " ".join(f"{k}={v:.2f}" for k, v in sorted(rates.items()))
        lines.append(f"  iter {it}: {rate_s} logpost={logpost:.6e}")
        row = {"iteration": it, "log_posterior": logpost}
        row.update(rates)
        rows.append(row)
    keys = sorted({k for r in rows for k in r})
    _write_csv(out_dir / "acceptance.csv", keys,
               [[float(r.get(k, np.nan)) for k in keys] for r in rows])

    if true_taus is not None and tau_mean.shape[1] > 0:
        header = [f"true_tau{j}" for j in range(true_taus.shape[1])] + \
                 [f"est_tau{j}" for j in range(tau_mean.shape[1])]
        _write_csv(out_dir / "states.csv", header,
                   [list(map(float, np.concatenate([t, e])))
                    for t, e in zip(true_taus, tau_mean)])

    (out_dir / "report.txt").write_text("\n".join(lines) + "\n")
    _render_figures(out_dir, summary, tau_mean, true_taus)


def _render_figures(out_dir: Path, summary: dict, tau_mean, true_taus) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for i, res in enumerate(summary["fsc"]):
        ax.plot(res["shells"], res["curve"], label=f"point {i}")
    ax.axhline(0.5, color="k", ls="--", lw=0.8)
    ax.axvline(summary["third_nyquist_shell"], color="gray", ls=":", lw=0.8)
    ax.set_xlabel("radial shell")
    ax.set_ylabel("masked FSC")
    ax.set_ylim(-0.1, 1.05)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_dir / "fsc.png", dpi=120)
    plt.close(fig)

    its = [h[0] for h in summary["accept_history"]]
    lps = [h[2] for h in summary["accept_history"]]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.plot(its, lps, marker=".")
    ax.set_xlabel("iteration")
    ax.set_ylabel("log posterior")
    fig.tight_layout()
    fig.savefig(out_dir / "trace.png", dpi=120)
    plt.close(fig)

    if summary["occupancy"] is not None:
        occ = summary["occupancy"]
        fig, ax = plt.subplots(figsize=(5, 3.2))
        if occ["counts"].ndim == 1:
            centers = 0.5 * (occ["edges"][:-1] + occ["edges"][1:])
            ax.bar(centers, occ["counts"], width=occ["edges"][1] - occ["edges"][0])
            ax.set_xlabel("state")
            ax.set_ylabel("particles")
        else:
            im = ax.imshow(occ["counts"].T, origin="lower",
                           extent=(-1, 1, -1, 1), aspect="auto")
            fig.colorbar(im, ax=ax)
            ax.set_xlabel("state 1")
            ax.set_ylabel("state 2")
        fig.tight_layout()
        fig.savefig(out_dir / "occupancy.png", dpi=120)
        plt.close(fig)

    if true_taus is not None and tau_mean.shape[1] > 0:
        d = tau_mean.shape[1]
        fig, axes = plt.subplots(1, d, figsize=(4 * d, 3.5), squeeze=False)
        for j in range(d):
            axes[0][j].plot(true_taus[:, j], tau_mean[:, j], ".", ms=2, alpha=0.5)
            axes[0][j].set_xlabel(f"true state {j}")
            axes[0][j].set_ylabel(f"estimated state {j}")
        fig.tight_layout()
        fig.savefig(out_dir / "states_scatter.png", dpi=120)
        plt.close(fig)
