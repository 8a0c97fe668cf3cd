#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stepstone/grouping.hpp"
#include "stepstone/timing.hpp"

namespace stepstone {

// One evaluated execution configuration: a placement level, the fraction of
// its units enlisted, and the layout pins that realize that fraction.  Cycle
// fields are a first-order estimate in memory clocks covering cross-unit data
// movement and arithmetic; buffer recirculation inside a unit is not part of
// the estimate.
struct PlanCandidate {
  PimLevel level = PimLevel::Channel;
  std::uint64_t subset_denominator = 1;
  std::uint64_t active_pims = 0;
  std::vector<std::pair<int, int>> pinned_bits;  // layout achieving the subset
  std::vector<std::uint64_t> subset_ids;         // claimed unit ids, sorted
  bool feasible = false;
  std::string note;  // why the candidate is out, empty when feasible

  double localization_cycles = 0.0;
  double stream_cycles = 0.0;
  double simd_cycles = 0.0;
  double reduction_cycles = 0.0;
  double total_cycles = 0.0;
  double total_ns = 0.0;
};

struct LevelChoice {
  PlanCandidate chosen;
  // Every candidate in fixed order: level (channel, device, bank group) outer,
  // subset denominator inner.  Infeasible rows stay in the table with a note.
  std::vector<PlanCandidate> table;
};

struct PlannerOptions {
  TimingParams timing{};
  bool quarters = false;  // also consider enlisting a quarter of the units
};

// Pick the placement level and unit subset with the smallest estimated time
// for C = A * B, A of the given geometry, B with batch_n columns.  Ties fall
// to fewer active units, then to the coarser level.  The topology supplies
// clocks and module counts; per-level compute width and scratchpad capacity
// come from the level provisioning table.
LevelChoice choose_level(const AddressMapping& map, const MatrixGeometry& geom,
                         std::uint64_t batch_n, const PimTopology& topo,
                         const PlannerOptions& opts = {});

struct AllocationViolation {
  Addr address = 0;
  std::uint64_t pim = 0;  // unit the block actually lands on
  std::string reason;
};

// Result of vetting a geometry against a claimed unit subset: the allocation
// unit the pins demand from the OS, plus every block that escapes the claim.
struct AllocationCheck {
  bool ok = false;
  std::uint64_t min_granularity_bytes = 0;
  std::uint64_t checked_blocks = 0;
  std::uint64_t violating_blocks = 0;
  std::vector<AllocationViolation> violations;  // detail capped, count exact
  std::vector<std::string> warnings;
};

// Never throws; structural problems become violations in the report.
AllocationCheck check_allocation(const AddressMapping& map,
                                 const MatrixGeometry& geom, PimLevel level,
                                 const std::vector<std::uint64_t>& subset);

}  // namespace stepstone
