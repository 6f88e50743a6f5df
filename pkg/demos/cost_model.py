"""Roofline estimates for the two reference nets: how much a masked
recomputation saves and what the search and vote add."""
from lisfguard import costmodel as cm
from lisfguard.region import trace_regions

hw = cm.HwConfig()
for net in (cm.deep_reference(), cm.shallow_reference()):
    box = cm.centered_box(net.input_shape[1], 0.02)
    trace = trace_regions(net, box)
    full = cm.inference_cost(net, hw)
    masked = cm.inference_cost(net, hw, trace)
    extra = cm.search_cycles(net, hw) + cm.vote_cycles(3)
    print(f"{net.name}: full {full.cycles:,} cycles, masked {masked.cycles:,} "
          f"({1 - masked.cycles / full.cycles:.1%} saved), search+vote "
          f"{extra / (full.cycles + 3 * masked.cycles):.3%} of a 3-candidate test")
    mnb = cm.mnb_feasibility(trace, hw)
    print(f"  buffer peak {mnb.peak_bytes:,} B of {mnb.capacity_bytes:,} B, feasible={mnb.feasible}")
