#pragma once

#include <cstdint>
#include <vector>

#include "stepstone/exec.hpp"

namespace stepstone {

struct UnreconciledTrace : Error { using Error::Error; };

// DDR4 core timings in memory-clock cycles; defaults describe DDR4-2400,
// where one cycle is 1/1.2 ns.  tBL is the time one 64B burst occupies the
// data pins, so a channel moves block_bytes / tBL bytes per cycle at peak.
struct TimingParams {
  int tBL = 4;
  int tCCDS = 4;
  int tCCDL = 6;
  int tRTRS = 2;
  int tCL = 16;
  int tRCD = 16;
  int tRP = 16;
  int tCWL = 12;
  int tRAS = 39;
  int tRC = 55;
  int tRTP = 9;
  int tWTRS = 3;
  int tWTRL = 9;
  int tWR = 18;
  int tRRDS = 4;
  int tRRDL = 6;
  int tFAW = 26;
  int mt_per_s = 2400;
  int device_width_bits = 8;

  double memory_clock_ghz() const { return mt_per_s / 2000.0; }
  // 64-bit channel, 8 bytes per transfer, two transfers per clock.
  double channel_peak_gbps() const { return mt_per_s * 8.0 / 1000.0; }
  void validate() const;
};

// Compute resources of one unit at a placement level, plus the module counts
// that turn per-unit rates into aggregate ones.
struct PimTopology {
  PimLevel level = PimLevel::Channel;
  int simd_width = 256;  // multiply-accumulate lanes
  std::uint64_t scratchpad_bytes = 256 * 1024;
  double clock_ghz = 1.2;
  int pipeline_depth = 20;  // kernel start-up, in unit clocks
  int channels = 2;
  int ranks_per_channel = 2;
  int bank_groups = 4;

  int unit_count() const;
  void validate() const;
  static PimTopology for_level(PimLevel level, int channels = 2,
                               int ranks_per_channel = 2);
};

// Host activity sharing the command bus.  Each kernel launch or operand
// packet needs packet_slots bus cycles, and the share of slots left for PIM
// dispatch shrinks by the background utilization.
struct ContentionProfile {
  double utilization = 0.0;  // in [0, 1)
  int packet_slots = 4;
};

struct SimFlags {
  bool naive_agen = false;    // per-block bubbles from the naive address walker
  bool overlap_fill = false;  // hide buffer fill/drain under streaming
};

struct PhaseCycles {
  std::uint64_t localization = 0;
  std::uint64_t buffer_fill = 0;
  std::uint64_t buffer_drain = 0;
  std::uint64_t streaming = 0;
  std::uint64_t simd = 0;  // compute cycles not hidden under streaming
  std::uint64_t reduction = 0;
  std::uint64_t command_bus = 0;
};

struct TrafficBytes {
  std::uint64_t localization = 0;  // source reads plus private copies written
  std::uint64_t a_stream = 0;
  std::uint64_t buffer_fill = 0;
  std::uint64_t buffer_drain = 0;
  std::uint64_t reduction = 0;  // partials read plus the final result written
  bool operator==(const TrafficBytes&) const = default;
};

// Cycle counts are memory-clock cycles.  Phase cycles are attributed to the
// unit that finishes last; traffic, stalls and bus waits sum over all units.
struct SimReport {
  PhaseCycles phase_cycles;
  TrafficBytes traffic;
  std::uint64_t total_cycles = 0;
  double total_ns = 0.0;
  std::uint64_t stall_cycles = 0;
  std::uint64_t command_bus_wait = 0;
  std::uint64_t simd_work_cycles = 0;  // raw compute demand of the busiest unit
  std::uint64_t mac_count = 0;         // across all units
  std::uint64_t simd_issues = 0;       // width-wide issues across all units
  std::uint64_t device_count = 0;      // DRAM devices behind the mapping
  std::uint64_t act_count = 0;
  double bandwidth_utilization = 0.0;  // critical unit, against the burst peak
  std::size_t critical_pim = 0;        // index into trace.pim_ids
  // Activate issue times per (channel, rank) ledger, ascending.
  std::vector<std::vector<std::uint64_t>> act_times;
};

SimReport simulate(const EventTrace& trace, const PimTopology& topo,
                   const TimingParams& timing, const ContentionProfile& bus = {},
                   const SimFlags& flags = {});

struct RooflinePoint {
  double intensity = 0.0;  // flops per byte of A, B and C moved once
  double bound_gflops = 0.0;
  double peak_gflops = 0.0;
  double bandwidth_gbps = 0.0;
};

// Arithmetic-intensity bound for C = A * B with A of the given geometry and
// batch_n columns of B, against the topology's aggregate compute and the
// stream bandwidth of its level.
RooflinePoint roofline(const PimTopology& topo, const TimingParams& timing,
                       const MatrixGeometry& geom, std::uint64_t batch_n);

}  // namespace stepstone
