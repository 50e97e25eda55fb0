"""Walkthrough: the out-of-sample market pays for genuine forecast skill.

In-sample fit is only a proxy: the buyer ultimately cares about forecast
accuracy on data the models never saw.  Here coalition models are trained
on the first half of the data and the market pays per evaluation step for
the realised improvement of the grand coalition's forecasts over the
central agent's own model.
"""

import numpy as np

import regmarket as rm

rng = np.random.default_rng(7)
T = 4000
feats = {"x2": rng.normal(size=T), "x3": rng.normal(size=T)}
y = 0.6 * feats["x2"] - 0.5 * feats["x3"] + rng.normal(0, 0.3, T)
ownership = {"x2": "a2", "x3": "a3"}
dataset = rm.Dataset(np.arange(T), y, feats, ownership, target_owner="a1")

task = rm.TaskSpec(central_agent="a1", ownership=ownership,
                   loss=rm.LossSpec("quadratic"),
                   phi_oos=1.5, train_rows=2000)

report = rm.run_oos_market(dataset, task, model_source="batch")

m = report.metrics
print(f"evaluation rows: {report.rows}")
print(f"forecast loss without support agents: {m['without_support']:.4f}")
print(f"forecast loss with support agents:    {m['with_support']:.4f}")

print("\nwindow-by-window comparison (support data should never hurt):")
for w in m["windows"]:
    marker = "ok" if w["with_support"] <= w["without_support"] else "!!"
    print(f"  rows {w['start']:4d}-{w['end']:4d}:  "
          f"with {w['with_support']:.4f}  without {w['without_support']:.4f}  {marker}")

print("\npayments over the evaluation period:")
for k in report.support:
    print(f"  {k}: {report.payments[k]:8.2f}  (period share {100 * report.allocations[k]:.1f}%)")
print(f"  central agent pays {report.central_total:.2f}")

# steps where the central agent's own forecast happened to win pay nothing
surplus = np.asarray(report.series["surplus"])
paid = np.asarray(report.series["central_payment"])
print(f"\n{np.sum(surplus <= 0)} of {report.rows} steps had no surplus; "
      f"all of them paid exactly {paid[surplus <= 0].sum():.1f}")
