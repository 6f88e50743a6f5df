"""Render patched clips and compare the amortized AO and PO pipelines with a
full per-frame defense, in accuracy and in modeled cycles."""
from lisfguard import costmodel as cm
from lisfguard.experiments import desk_pipeline, run_scenario, train_default_patch
from lisfguard.pipeline import split_network
from lisfguard.scenario import ScenarioConfig, build_scenario
from lisfguard.victim import default_victim

net = default_victim()
patch = train_default_patch(net).patch
sc = build_scenario(ScenarioConfig(clips=4, frames=20, speed=0.5), seed=3, patch=patch)

for mode, defense in [("ao", "off"), ("ao", "full"), ("ao", "amortized"), ("po", "amortized")]:
    pcfg = desk_pipeline(mode, defense)
    _, summary, schedule = run_scenario(net, sc, pcfg)
    split = split_network(net, pcfg.split_fraction)[0].stop if mode == "po" else None
    cost = cm.pipeline_cost(schedule, net, cm.HwConfig(), pcfg.flow_radius, split)
    print(f"{mode}/{defense:9s}  attacked {summary.attacked_accuracy:.3f}  recovered "
          f"{summary.recovered_accuracy:.3f}  detect {summary.detection_rate}  cycles/frame "
          f"{cost.cycles / cost.frames:,.0f}")
