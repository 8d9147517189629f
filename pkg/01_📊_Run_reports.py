import os
from pathlib import Path

import pandas as pd
import plotly.express as px
import plotly.graph_objects as go
import streamlit as st
from pandas import DataFrame

from glucose_iit.config import OUTPUT_ENV_VAR
from glucose_iit.evaluation import RunReport
from glucose_iit.plots import GRID_MAX, ZONE_BOUNDARIES


@st.cache_data
def load_data(filepath: str) -> DataFrame:
    """
    Load one report table from a CSV file.

    Args:
        filepath (str): Path of a CSV written by `python -m glucose_iit report`.

    Returns:
        DataFrame: The table, or an empty DataFrame if it cannot be read.
    """
    try:
        data = pd.read_csv(filepath)
        if data.empty:
            st.error(f"No rows in {filepath}.", icon="🚨")
        return data
    except FileNotFoundError:
        st.error(
            f"File not found: {filepath}. Run `python -m glucose_iit report` first.",
            icon="🚨",
        )
    except pd.errors.EmptyDataError:
        st.error(f"No data found in {filepath}.", icon="🚨")
    except Exception as e:
        st.error(f"An error occurred while loading the data: {e}", icon="🚨")
    return pd.DataFrame()


@st.cache_data
def load_predictions(report_path: str) -> DataFrame:
    """Per-patient reference and predicted BG of one run."""
    try:
        report = RunReport.load(report_path)
    except FileNotFoundError:
        st.error(f"File not found: {report_path}.", icon="🚨")
        return pd.DataFrame()
    except Exception as e:
        st.error(f"Could not read {report_path}: {e}", icon="🚨")
        return pd.DataFrame()
    return pd.DataFrame([row.model_dump(mode="json") for row in report.predictions])


def filter_runs(data: DataFrame, key: str) -> DataFrame:
    """Filters shared by the tabs: architecture, PH and mode."""
    if data.empty:
        return data
    col1, col2, col3 = st.columns(3)
    architectures = col1.multiselect(
        "Architecture",
        sorted(data["architecture"].unique()),
        default=sorted(data["architecture"].unique()),
        key=f"{key}-arch",
    )
    phs = sorted(int(p) for p in data["ph"].unique())
    ph_range = col2.select_slider(
        "Prediction horizon (min)", options=phs, value=(phs[0], phs[-1]), key=f"{key}-ph"
    )
    modes = col3.multiselect(
        "Mode",
        sorted(data["mode"].unique()) if "mode" in data else [],
        default=sorted(data["mode"].unique()) if "mode" in data else [],
        key=f"{key}-mode",
    )
    mask = (
        data["architecture"].isin(architectures)
        & data["ph"].between(ph_range[0], ph_range[1])
    )
    if "mode" in data:
        mask &= data["mode"].isin(modes)
    return data[mask]


def error_grid_figure(predictions: DataFrame, title: str) -> go.Figure:
    fig = px.scatter(
        predictions,
        x="reference",
        y="predicted",
        color="zone",
        hover_data=["patient_id"],
        category_orders={"zone": ["A", "B", "C", "D", "E"]},
        title=title,
    )
    for zone, (segments, (lx, ly)) in ZONE_BOUNDARIES.items():
        for segment in segments:
            xs, ys = zip(*segment)
            fig.add_trace(
                go.Scatter(
                    x=xs,
                    y=ys,
                    mode="lines",
                    line={"color": "gray" if zone == "B" else "black", "width": 1},
                    showlegend=False,
                    hoverinfo="skip",
                )
            )
        fig.add_annotation(x=lx, y=ly, text=zone, showarrow=False, font={"size": 16})
    fig.update_xaxes(range=[0, GRID_MAX], title="Reference BG (mg/dL)")
    fig.update_yaxes(range=[0, GRID_MAX], title="Predicted BG (mg/dL)", scaleanchor="x")
    return fig


def main():
    st.set_page_config(layout="wide", page_icon="📊")
    st.title("📊 Glucose IIT Run Reports", anchor=False)

    default_root = os.environ.get(OUTPUT_ENV_VAR, "runs_output")
    root = Path(st.text_input("Output root", value=default_root))
    report_dir = root / "report"

    tab1, tab2, tab3, tab4 = st.tabs(
        ["📋 Metrics", "⚖️ Aggregate", "🎯 Error grid", "🧩 L_INT per module"]
    )

    with tab1:
        st.subheader("Test metrics per run")
        st.info("One row per (variant, architecture, PH, mode, seed).", icon="ℹ️")

        metrics = load_data(str(report_dir / "metrics.csv"))
        filtered = filter_runs(metrics, "metrics")
        if not filtered.empty:
            with st.expander("Show raw data"):
                st.dataframe(filtered)

            metric = st.selectbox("Metric", ["rmse", "mae", "mse", "ega_ab"])
            col1, col2, col3 = st.columns(3)
            col1.metric("Runs", len(filtered))
            col2.metric(f"Mean {metric}", f"{filtered[metric].mean():.2f}")
            col3.metric(f"Best {metric}", f"{(filtered[metric].max() if metric == 'ega_ab' else filtered[metric].min()):.2f}")

            fig = px.box(
                filtered,
                x="ph",
                y=metric,
                color="mode",
                facet_col="architecture",
                points="all",
                title=f"{metric} across seeds",
            )
            st.plotly_chart(fig, use_container_width=True)

    with tab2:
        st.subheader("IIT against standard training")
        st.info("Mean ± SD over seeds; Δ is IIT minus standard.", icon="ℹ️")

        aggregate = load_data(str(report_dir / "aggregate.csv"))
        filtered = filter_runs(aggregate, "aggregate")
        if not filtered.empty:
            st.dataframe(filtered, use_container_width=True)

            metric = st.selectbox("Metric", ["rmse", "mae", "mse", "ega_ab"], key="agg-metric")
            long = filtered.melt(
                id_vars=["architecture", "ph"],
                value_vars=[f"{metric}_iit_mean", f"{metric}_standard_mean"],
                var_name="mode",
                value_name=metric,
            )
            long["mode"] = long["mode"].str.replace(f"{metric}_", "").str.replace("_mean", "")
            fig = px.bar(
                long,
                x="ph",
                y=metric,
                color="mode",
                barmode="group",
                facet_col="architecture",
                title=f"Mean {metric} by prediction horizon",
            )
            st.plotly_chart(fig, use_container_width=True)

    with tab3:
        st.subheader("Clarke error grid")
        st.info("Zones A and B are clinically acceptable.", icon="ℹ️")

        metrics = load_data(str(report_dir / "metrics.csv"))
        if not metrics.empty:
            run_id = st.selectbox("Run", metrics["run_id"].tolist())
            predictions = load_predictions(str(root / "runs" / run_id / "report.json"))
            if not predictions.empty:
                chart, dataset = st.columns(2)
                with chart:
                    st.plotly_chart(error_grid_figure(predictions, run_id), use_container_width=True)
                with dataset:
                    st.dataframe(predictions["zone"].value_counts().sort_index())
                    st.dataframe(predictions)

    with tab4:
        st.subheader("Counterfactual error per module")
        st.info("Absolute error (mg/dL) of every test interchange intervention.", icon="ℹ️")

        interventions = load_data(str(report_dir / "lint_modules.csv"))
        filtered = filter_runs(interventions, "lint")
        if not filtered.empty:
            fig = px.box(
                filtered,
                x="module",
                y="abs_error",
                color="mode",
                title="Absolute counterfactual error by module",
            )
            st.plotly_chart(fig, use_container_width=True)

            run_id = st.selectbox("Run", sorted(filtered["run_id"].unique()), key="lint-run")

            @st.experimental_fragment
            def plot_curve() -> None:
                """Training L_INT per module"""
                log = load_data(str(root / "runs" / run_id / "lint_log.csv"))
                if log.empty:
                    return
                fig = px.line(
                    log,
                    x="epoch",
                    y="mse",
                    color="module",
                    labels={"mse": "L_INT (MSE)"},
                    title=f"L_INT during training, {run_id}",
                )
                st.plotly_chart(fig, use_container_width=True)

            plot_curve()


if __name__ == "__main__":
    main()
