"""DC-NAS — Streamlit results browser.

Read-only view over an output directory written by the CLI:
    1. Pick a run directory (``--out`` of a pipeline / oracle / compare run)
    2. View the summary metrics of the search
    3. Browse results, oracle, cluster and comparison tables
    4. Download any artefact

Constraints:
    - No plotting libraries
    - No training from the UI (runs are started from the CLI)
"""

from __future__ import annotations

import sys
from pathlib import Path

import pandas as pd
import streamlit as st

# Ensure the project root is importable
_PROJECT_ROOT = Path(__file__).resolve().parents[1]
if str(_PROJECT_ROOT) not in sys.path:
    sys.path.insert(0, str(_PROJECT_ROOT))

from src.harness import store  # noqa: E402
from src.harness.compare import BIAS_CSV, COMPARE_CSV, PROBE_CSV, summarize_compare  # noqa: E402

# ── Page config ───────────────────────────────────────────────
st.set_page_config(
    page_title="DC-NAS — Results Browser",
    page_icon="🧭",
    layout="wide",
)

st.title("🧭 DC-NAS — Results Browser")
st.markdown(
    "Browse the artefacts of a divide-and-conquer search run: early-stop scores, "
    "clusters, champions, the merged winner and the oracle comparison."
)
st.divider()

# ── Run directory ─────────────────────────────────────────────
root = Path(st.text_input("Output directory", value=str(_PROJECT_ROOT / "runs" / "latest")))
if not root.exists():
    st.info("Directory not found. Run `python -m src.main --out DIR pipeline` first.")
    st.stop()

run_dirs = sorted({p.parent for p in root.rglob(store.STATE)} | {p.parent for p in root.rglob(store.ORACLE)})
run = st.selectbox("Run", run_dirs, format_func=lambda p: str(p.relative_to(root)) or ".") if run_dirs else root

# ── Summary ───────────────────────────────────────────────────
summary_path = Path(run) / store.SUMMARY
if summary_path.exists():
    summary = store.read_json(summary_path)
    st.subheader("Summary")
    c1, c2, c3, c4 = st.columns(4)
    c1.metric("Winner", summary["winner_arch"])
    c2.metric("Winner accuracy", f"{summary['winner_y']:.4f}")
    c3.metric("Full trainings", summary["full_trainings"])
    rs = summary.get("rs_baseline_y")
    c4.metric("Random search (mean best)", "—" if rs is None else f"{rs:.4f}")
    st.caption(
        f"K={summary['K']} · η={summary['eta']} · σ={summary['sigma']} · s={summary['s']} · "
        f"seed={summary['seed']} · {summary['mode']} · {summary['feature_source']} features"
    )
    st.caption(summary["orientation"])

# ── Tables ────────────────────────────────────────────────────
tables = {
    "Results": Path(run) / store.RESULTS,
    "Oracle": Path(run) / store.ORACLE,
}
for label, path in tables.items():
    if path.exists():
        st.subheader(label)
        st.dataframe(store.read_table(path), use_container_width=True, height=320)

clusters_path = Path(run) / store.CLUSTERS
if clusters_path.exists():
    st.subheader("Clusters")
    clusters = store.read_json(clusters_path)
    st.write(f"K = {clusters['K']}, inertia = {clusters['inertia']:.6g}, iterations = {clusters['iterations']}")
    st.dataframe(pd.DataFrame(clusters["assignments"]), use_container_width=True, height=240)

compare_path = root / COMPARE_CSV
if compare_path.exists():
    st.subheader("Strategy comparison")
    compare = store.read_table(compare_path)
    st.dataframe(summarize_compare(compare), use_container_width=True)
    with st.expander("Per-seed rows"):
        st.dataframe(compare, use_container_width=True)

for label, name in (("Early-stopping bias", BIAS_CSV), ("Probe sensitivity", PROBE_CSV)):
    if (root / name).exists():
        st.subheader(label)
        st.dataframe(store.read_table(root / name), use_container_width=True)

report_path = Path(run) / store.REPORT
if report_path.exists():
    with st.expander("report.txt"):
        st.code(report_path.read_text(encoding="utf-8"))

# ── Downloads ─────────────────────────────────────────────────
st.subheader("Downloads")
for path in sorted(p for p in Path(run).iterdir() if p.is_file()):
    st.download_button(
        label=f"⬇  {path.name}",
        data=path.read_bytes(),
        file_name=path.name,
        key=str(path),
    )
