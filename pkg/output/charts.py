"""
SEAL Chart Generation
Plotly charts for step sweeps, rate sweeps, robustness tables and the
method-transfer matrix, written as PNG through kaleido.
"""

import logging
import os
from typing import Optional

import pandas as pd
import plotly.graph_objects as go

from config.parameters import METHOD_LABELS

logger = logging.getLogger(__name__)

# --- Palette ---
SEAL_COLORS = [
    "#2d5f4a",  # primary green
    "#3d8b6e",  # light green
    "#9a6b2f",  # amber
    "#3a5a80",  # blue
    "#a83a2f",  # red
    "#6b8f71",  # sage
    "#c4956a",  # tan
]

OPTIMISED_COLOR = "#2d5f4a"
RANDOM_COLOR = "#a83a2f"

# --- Global Chart Layout ---
SEAL_CHART_LAYOUT = dict(
    font=dict(family="Source Sans 3, sans-serif", size=12, color="#2c2a26"),
    paper_bgcolor="white",
    plot_bgcolor="white",
    margin=dict(l=60, r=20, t=50, b=60),
    title=dict(font=dict(family="Libre Franklin, sans-serif", size=15, color="#2c2a26"), x=0, xanchor="left"),
    legend=dict(
        orientation="h",
        yanchor="top",
        y=-0.15,
        xanchor="left",
        x=0,
        font=dict(size=11),
    ),
    xaxis=dict(gridcolor="#f0eeea", linecolor="#ddd9d1", linewidth=1),
    yaxis=dict(gridcolor="#f0eeea", linecolor="#ddd9d1", linewidth=1),
)


def _apply_layout(fig: go.Figure, title: str, **overrides) -> go.Figure:
    layout = {**SEAL_CHART_LAYOUT, **overrides}
    layout["title"] = {**SEAL_CHART_LAYOUT["title"], "text": title}
    fig.update_layout(**layout)
    return fig


def _label(method: str) -> str:
    return METHOD_LABELS.get(method, method)


def _mean_by(frame: pd.DataFrame, keys: list[str], value: str) -> pd.DataFrame:
    ok = frame[frame["error"].isna()] if "error" in frame.columns else frame
    return ok.groupby(keys, as_index=False)[value].mean()


def create_step_sweep_chart(frame: pd.DataFrame, column: str = "expert") -> go.Figure:
    """
    Mean TPR against fine-tuning steps, optimised vs random watermarks, one
    line pair per method; FID to the final step on a secondary axis.

    Args:
        frame: Rows with steps, method, watermark, column, tpr and optionally fid_to_final
    """
    if frame.empty:
        return _empty_figure("No step-sweep results")
    data = frame[frame["column"] == column]
    fig = go.Figure()
    tpr = _mean_by(data, ["method", "watermark", "steps"], "tpr")
    for i, (method, group) in enumerate(tpr.groupby("method")):
        for watermark, dash in (("optimized", "solid"), ("random", "dot")):
            g = group[group["watermark"] == watermark]
            if g.empty:
                continue
            fig.add_trace(go.Scatter(
                x=g["steps"], y=g["tpr"], mode="lines+markers",
                name=f"{_label(method)} ({watermark})",
                line=dict(color=SEAL_COLORS[i % len(SEAL_COLORS)], dash=dash, width=2),
                hovertemplate="%{x} steps: TPR %{y:.2f}<extra></extra>",
            ))
    if "fid_to_final" in data.columns and data["fid_to_final"].notna().any():
        fid = _mean_by(data[data["watermark"] == "optimized"].dropna(subset=["fid_to_final"]),
                       ["steps"], "fid_to_final")
        fig.add_trace(go.Bar(
            x=fid["steps"], y=fid["fid_to_final"], name="FID to final step",
            marker_color="#ddd9d1", opacity=0.6, yaxis="y2",
        ))
    _apply_layout(fig, "Detection Rate under Fewer Fine-Tuning Steps",
                  xaxis_title="Fine-tuning steps", yaxis_title="TPR",
                  yaxis=dict(range=[0, 1.05], gridcolor="#f0eeea"),
                  yaxis2=dict(title="FID", overlaying="y", side="right", showgrid=False),
                  height=420)
    return fig


def create_rate_sweep_chart(frame: pd.DataFrame) -> go.Figure:
    """Mean TPR against the watermarked fraction of the dataset, per method and detector column."""
    if frame.empty:
        return _empty_figure("No rate-sweep results")
    tpr = _mean_by(frame, ["method", "column", "rate"], "tpr")
    fig = go.Figure()
    for i, (method, group) in enumerate(tpr.groupby("method")):
        for column, dash in (("expert", "solid"), ("moe", "dash")):
            g = group[group["column"] == column]
            if g.empty:
                continue
            fig.add_trace(go.Scatter(
                x=g["rate"] * 100, y=g["tpr"], mode="lines+markers",
                name=f"{_label(method)} / {column}",
                line=dict(color=SEAL_COLORS[i % len(SEAL_COLORS)], dash=dash, width=2),
            ))
    _apply_layout(fig, "Detection Rate under Different Watermark Rates",
                  xaxis_title="Watermarked share of the dataset (%)", yaxis_title="TPR",
                  yaxis=dict(range=[0, 1.05], gridcolor="#f0eeea"), height=400)
    return fig


def create_robustness_chart(table: pd.DataFrame, with_col: str = "expert_aug", without_col: str = "expert_plain") -> go.Figure:
    """Grouped bars of accuracy per corruption, augmented vs non-augmented detectors."""
    if table.empty or with_col not in table.columns:
        return _empty_figure("No robustness results")
    means = table.groupby("corruption", as_index=False)[[with_col, without_col]].mean()
    fig = go.Figure()
    fig.add_trace(go.Bar(x=means["corruption"], y=means[without_col], name="Without augmentation",
                         marker_color=RANDOM_COLOR, text=[f"{v:.0%}" for v in means[without_col]],
                         textposition="outside"))
    fig.add_trace(go.Bar(x=means["corruption"], y=means[with_col], name="With augmentation",
                         marker_color=OPTIMISED_COLOR, text=[f"{v:.0%}" for v in means[with_col]],
                         textposition="outside"))
    _apply_layout(fig, "Robustness against Image Corruptions", barmode="group",
                  yaxis_title="Accuracy (TPR + TNR) / 2",
                  yaxis=dict(range=[0, 1.1], gridcolor="#f0eeea"), height=400)
    return fig


def create_transfer_heatmap(matrix: pd.DataFrame) -> go.Figure:
    """Accuracy of each expert (columns) on each method's generations (rows)."""
    if matrix.empty:
        return _empty_figure("No transfer results")
    fig = go.Figure(go.Heatmap(
        z=matrix.values,
        x=[_label(c) for c in matrix.columns],
        y=[_label(r) for r in matrix.index],
        zmin=0.0, zmax=1.0,
        colorscale=[[0.0, "#f7f5f0"], [0.5, "#6b8f71"], [1.0, "#2d5f4a"]],
        text=[[f"{v:.2f}" for v in row] for row in matrix.values],
        texttemplate="%{text}",
        hovertemplate="expert %{x}<br>applied to %{y}<br>accuracy %{z:.3f}<extra></extra>",
    ))
    _apply_layout(fig, "Transferability across Fine-Tuning Methods",
                  xaxis_title="Expert trained on", yaxis_title="Images generated by",
                  yaxis=dict(autorange="reversed"), height=450, margin=dict(l=220, r=20, t=50, b=160))
    return fig


def save_figure(fig: go.Figure, path: str, width: int = 800, height: Optional[int] = None) -> Optional[str]:
    """Write a PNG via kaleido; returns the path, or None with a warning when export is unavailable."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    try:
        fig.write_image(path, width=width, height=height or fig.layout.height or 400, scale=2)
    except Exception as exc:
        # kaleido not available or chart export failed
        logger.warning("Skipping chart %s: %s", os.path.basename(path), exc)
        return None
    return path


def _empty_figure(message: str) -> go.Figure:
    """Create an empty figure with a message."""
    fig = go.Figure()
    fig.add_annotation(
        text=message, xref="paper", yref="paper",
        x=0.5, y=0.5, showarrow=False, font=dict(size=16, color="#8a8578"),
    )
    fig.update_layout(
        paper_bgcolor="white", plot_bgcolor="white", height=300,
        xaxis=dict(visible=False), yaxis=dict(visible=False),
    )
    return fig
