from typing import Any, Dict, List, Sequence

import numpy as np


def format_seconds(seconds: float) -> str:
    """Human-readable wall-clock duration."""
    if seconds < 60:
        return f"{seconds:.1f} s"
    minutes, seconds = divmod(seconds, 60)
    if minutes < 60:
        return f"{int(minutes)} min {seconds:.0f} s"
    hours, minutes = divmod(minutes, 60)
    return f"{int(hours)} h {int(minutes)} min"


def step_statistics(history: Sequence) -> Dict[str, Any]:
    """Accepted/rejected counts and step-size range of a step history."""
    accepted = [r for r in history if r.accepted and r.step > 0]
    steps = np.array([r.k for r in accepted]) if accepted else np.zeros(0)
    iterations = np.array([r.gmres_iterations for r in accepted]) if accepted else np.zeros(0, dtype=int)
    return {
        "accepted": len(accepted),
        "rejected": sum(1 for r in history if not r.accepted),
        "averaged": sum(1 for r in accepted if r.averaged),
        "final_time": accepted[-1].t if accepted else 0.0,
        "min_step": float(steps.min()) if steps.size else None,
        "max_step": float(steps.max()) if steps.size else None,
        "gmres_median": float(np.median(iterations)) if iterations.size else None,
        "gmres_max": int(iterations.max()) if iterations.size else None,
    }


def format_run_summary(summary: Dict[str, Any]) -> str:
    """Multi-line console summary of a finished run."""
    lines = [f"Mode: {summary.get('mode', '?')}  |  output: {summary.get('output_directory', '?')}"]
    mesh = summary.get("mesh")
    if mesh:
        lines.append(f"Mesh: {mesh['elements']} elements, {mesh['velocity_dofs']} velocity / "
                     f"{mesh['pressure_dofs']} pressure dofs (h={mesh['spacing']:g})")
    if "n_xi" in summary:
        lines.append(f"gPC: n_xi={summary['n_xi']}, n_nu={summary.get('n_nu', '?')}")
    steps = summary.get("steps")
    if steps:
        lines.append(f"Steps: {steps['accepted']} accepted, {steps['rejected']} rejected, "
                     f"{steps['averaged']} averaged; final t={steps['final_time']:.6g}")
        if steps.get("min_step") is not None:
            lines.append(f"Step sizes: {steps['min_step']:.3e} .. {steps['max_step']:.3e}")
        if steps.get("gmres_max"):
            lines.append(f"fGMRES iterations: median {steps['gmres_median']:g}, max {steps['gmres_max']}")
    if "samples" in summary:
        lines.append(f"Samples: {summary['samples']} ({summary.get('failed_samples', 0)} failed)")
    if "wall_clock" in summary:
        lines.append(f"Wall clock: {format_seconds(summary['wall_clock'])}")
    return "\n".join(lines)


def format_comparison_table(rows: List[Dict[str, Any]]) -> str:
    """Fixed-width comparison table, one line per (barrier, probe, component, method)."""
    header = (f"{'t':>8} {'probe':>5} {'comp':>4} {'method':>6} {'mean':>13} {'variance':>13} "
              f"{'|d mean|':>10} {'|d var|':>10} {'MC s.e.':>10}")
    lines = [header, "-" * len(header)]
    for row in rows:
        se = row["std_error"]
        lines.append(
            f"{row['barrier']:>8g} {row['probe']:>5d} {row['component']:>4} {row['method']:>6} "
            f"{row['mean']:>13.6e} {row['variance']:>13.6e} {row['abs_diff_mean']:>10.2e} "
            f"{row['abs_diff_variance']:>10.2e} {'-' if np.isnan(se) else f'{se:.2e}':>10}"
        )
    return "\n".join(lines)
