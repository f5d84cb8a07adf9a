"""Skill scores and significance for the bundled solar and wind RMSE tables.

    python scripts/table_skill_scores.py [--out runs/tables]
"""
import argparse
from pathlib import Path

from mtl_forge.report import build_report, read_rmse_table, render_summary, write_report

TABLES = Path(__file__).resolve().parents[1] / "data" / "tables"


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("runs/tables"))
    args = ap.parse_args()
    for name in ("solar", "wind"):
        rep = build_report(*read_rmse_table(TABLES / f"{name}_rmse.csv"))
        write_report(rep, args.out / name)
        print(f"== {name} ({len(rep.tasks)} parks)")
        print(render_summary(rep))


if __name__ == "__main__":
    main()
