#pragma once

#include <cstdint>
#include <vector>

#include "stepstone/localize.hpp"

namespace stepstone {

struct InfeasiblePlan : Error {
  using Error::Error;
};
struct PlanGeometryMismatch : Error {
  using Error::Error;
};

// How the work is carved into PIM invocations:
//   Stp   one coarse kernel per (pim, group, partition) tile
//   Echo  same flow, but one kernel per A row dot-product inside each tile
//   Ncho  per-batch-column GEMV passes with no block grouping, A re-streamed
//   Pei   one controller command packet per A block, operands pushed by the CPU
enum class GemmMode { Stp, Echo, Ncho, Pei };

const char* to_string(GemmMode mode);

// Half-open range of A rows; always a whole number of 16-row C blocks.
struct RowRange {
  std::uint64_t lo = 0;
  std::uint64_t hi = 0;
  std::uint64_t rows() const { return hi - lo; }
};

// Power-of-two tile of a larger matrix, positioned at (row0, col0).
struct Panel {
  std::uint64_t m = 0;
  std::uint64_t k = 0;
  std::uint64_t row0 = 0;
  std::uint64_t col0 = 0;
};

// Greedy binary split of each dimension, largest piece first; panels are
// executed serially and their results concatenated along rows and summed
// along the shared K dimension.
std::vector<Panel> decompose_non_pow2(std::uint64_t m, std::uint64_t k);

enum class EventKind {
  BufferFillB,
  BufferFillC,
  BufferDrainC,
  DramBlockRead,
  SimdOp,
  KernelLaunch,
  AgenStep,
  Localize,
  Reduce,
  CommandPacket,
};

// Payload use by kind:
//   DramBlockRead   addr = block address
//   SimdOp          count = multiply-accumulates
//   AgenStep        count = correction iterations, aux = naive increment steps
//   BufferFill/Drain  count = bytes moved
//   Localize        addr = private regions written, count = bytes written to
//                   private copies, aux = source bytes read
//   Reduce          addr = partial regions read, count = partial bytes read
//                   back, aux = final C bytes written
//   CommandPacket   addr = A block address
struct Event {
  EventKind kind = EventKind::KernelLaunch;
  Addr addr = 0;
  std::uint64_t count = 0;
  std::uint64_t aux = 0;
  bool operator==(const Event&) const = default;
};

struct EventTrace {
  // Context a consumer needs to interpret the event streams on their own:
  // the mapping decodes block addresses into DRAM coordinates.
  AddressMapping map;
  PimLevel level = PimLevel::Channel;
  GemmMode mode = GemmMode::Stp;
  std::uint64_t batch_n = 1;

  std::vector<std::uint64_t> pim_ids;  // ascending, aligned with per_pim
  std::vector<std::vector<Event>> per_pim;
  std::vector<Event> controller;

  std::uint64_t count_events(EventKind kind) const;
  std::uint64_t sum_counts(EventKind kind) const;
  std::uint64_t pim_events(std::size_t pim_index, EventKind kind) const;
};

struct GemmPlan {
  AddressMapping map;
  GroupSpec spec;
  LocalizationPlan loc;
  MatrixGeometry geom;
  std::uint64_t batch_n = 1;
  PimLevel level = PimLevel::Channel;
  GemmMode mode = GemmMode::Stp;
  std::uint64_t scratchpad_budget = 0;
  std::vector<std::uint64_t> groups;       // ascending
  std::vector<RowRange> row_partitions;
  std::vector<BlockRange> col_partitions;  // A column-block ranges
};

struct PlanOverrides {
  std::uint64_t row_partitions = 0;  // 0 picks the minimal feasible count
  std::uint64_t col_partitions = 0;
};

// Derives grouping and localization, then picks the smallest partition grid
// whose every (group, row, column) tile fits B slice + C slice in the
// scratchpad, exhausting row splits before column splits.
GemmPlan make_plan(const AddressMapping& map, const MatrixGeometry& geom,
                   std::uint64_t batch_n, PimLevel level, GemmMode mode,
                   std::uint64_t scratchpad_bytes, const PlanOverrides& over = {});

struct GemmResult {
  Eigen::MatrixXf c;
  EventTrace trace;
};

// The exact event trace run_gemm would emit for this plan, without touching
// matrix data.  Lets timing studies skip the arithmetic.
EventTrace plan_trace(const GemmPlan& plan);

// C = A x B with per-PIM double partial sums accumulated in ascending
// column-block then ascending element order, drained to single precision once
// per row partition, and reduced across PIMs in ascending id order.  All four
// modes produce bit-identical C; they differ only in trace shape.
GemmResult run_gemm(const Eigen::MatrixXf& a, const Eigen::MatrixXf& b,
                    const GemmPlan& plan);

}  // namespace stepstone
