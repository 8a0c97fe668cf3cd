#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "stepstone/energy.hpp"
#include "stepstone/exec.hpp"
#include "stepstone/planner.hpp"
#include "stepstone/timing.hpp"

namespace stepstone {

// One GEMM shape in a model, A being m x k, executed repeat times per pass.
// cpu_other_ns is host-side time around each execution (activation functions,
// reshapes) that repeat multiplies along with the GEMM time.
struct WorkloadLayer {
  std::string name;
  std::uint64_t m = 0;
  std::uint64_t k = 0;
  std::uint64_t repeat = 1;
  double cpu_other_ns = 0.0;
};

// A model as a flat list of GEMM layers plus its batching discipline.  A pass
// runs every layer once (times its repeat).  reshape_seq folds the sequence
// into the batch for one wide pass; grow_seq runs seq_len passes with the
// batch growing by the base batch each pass.  At most one of the two applies.
struct WorkloadSpec {
  std::string name;
  std::vector<WorkloadLayer> layers;
  std::uint64_t batch = 4;
  std::uint64_t seq_len = 1;
  bool reshape_seq = false;
  bool grow_seq = false;

  static const std::vector<WorkloadSpec>& builtins();
  static const WorkloadSpec& builtin(std::string_view name);
};

// Everything outside the model needed to price it.  Only the channel and rank
// shape of the topology matters; per-level widths and scratchpads come from
// the level defaults.  With exhaustive set, every feasible candidate in the
// planner table is simulated and the fastest one wins instead of the
// estimate's pick.
struct WorkloadSystem {
  AddressMapping map;
  TimingParams timing;
  EnergyParams energy;
  PimTopology base = PimTopology::for_level(PimLevel::Channel);
  ContentionProfile bus;
  GemmMode mode = GemmMode::Stp;
  bool exhaustive = false;
};

// One simulated power-of-two panel of a layer.
struct PanelRun {
  std::uint64_t m = 0;
  std::uint64_t k = 0;
  std::uint64_t row0 = 0;
  std::uint64_t col0 = 0;
  PimLevel level = PimLevel::Channel;
  std::uint64_t subset_denominator = 1;
  std::uint64_t active_pims = 0;
  std::uint64_t total_cycles = 0;
  double ns = 0.0;
  double energy_j = 0.0;
};

// One layer executed once in one pass.  m and k are the executed shape, with
// k padded up to a whole block.  ns and energy_j cover a single execution;
// repeat is applied in the report totals.
struct LayerRun {
  std::string layer;
  std::uint64_t iteration = 1;
  std::uint64_t m = 0;
  std::uint64_t k = 0;
  std::uint64_t n = 0;
  std::uint64_t repeat = 1;
  std::vector<PanelRun> panels;
  double ns = 0.0;
  double energy_j = 0.0;
};

struct WorkloadReport {
  std::string workload;
  std::uint64_t iterations = 0;
  std::vector<LayerRun> runs;  // pass-major, layers in spec order
  double gemm_ns = 0.0;        // repeats applied
  double cpu_other_ns = 0.0;
  double total_ns = 0.0;
  double energy_j = 0.0;
};

WorkloadReport run_workload(const WorkloadSpec& spec, const WorkloadSystem& sys);

}  // namespace stepstone
