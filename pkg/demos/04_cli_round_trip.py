"""Command-line workflow: export data, fit, simulate a tiny grid, report.

    python3 demos/04_cli_round_trip.py
"""

import json
import subprocess
import sys
import tempfile
from pathlib import Path

from metamob.simgen import ScenarioConfig, gen_dataset

work = Path(tempfile.mkdtemp(prefix="metamob-demo-"))
data, _ = gen_dataset(ScenarioConfig("simA", K=5, n_total=1000, tau1=5.0, seed=2))
data.to_csv(work / "simA.csv")


def cli(*args):
    cmd = [sys.executable, "-m", "metamob", *map(str, args)]
    print("$", " ".join(cmd[2:]))
    subprocess.run(cmd, check=True)


cli("fit", work / "simA.csv", "--method", "metamob-si", "--out", work / "tree.json")
doc = json.loads((work / "tree.json").read_text())
print("subgroup effects:", [t["theta"] for t in doc["terminals"]])

grid = {"scenario": "null", "K": 5, "N": 500, "tau0": [0.0, 10.0], "corr_target": "b0_with_nonsplitter"}
(work / "grid.json").write_text(json.dumps(grid))
cli("simulate", work / "grid.json", "--reps", 20, "--method", "mob,metamob-si", "--out", work / "res.csv")
cli("report", work / "res.csv", "--layout", "fig2", "--out", work / "report")
print((work / "report" / "fig2.csv").read_text())
