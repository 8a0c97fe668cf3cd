#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <vector>

#include "stepstone/agen.hpp"
#include "stepstone/grouping.hpp"

namespace stepstone {

struct RegionTooSmall : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct MissingPartial : Error { using Error::Error; };

// Blocks one PIM streams for one group, and the B row-blocks it must hold
// privately to serve them.  b_row_blocks lists column-block indices of A
// (equivalently 16-row slices of B) deduplicated in stream order, so the PIM
// reads its private copy sequentially while walking the stream.
struct StreamShare {
  std::uint64_t pim = 0;
  std::uint64_t group = 0;
  std::vector<std::uint64_t> b_row_blocks;
  std::vector<std::uint64_t> rows;  // A rows touched, ascending
  std::uint64_t blocks = 0;
};

// Per-PIM memory reserved for the private B copy and C partial, laid out
// B-then-C in stream order.  Backed either by the PIM's scratchpad or by DRAM
// blocks that all decode to the owning PIM.
struct PrivateRegion {
  std::uint64_t pim = 0;
  Addr base = 0;
  std::uint64_t length = 0;
  bool scratchpad_resident = false;
  std::vector<Addr> blocks;
};

struct PimFootprint {
  std::uint64_t pim = 0;
  std::vector<std::uint64_t> c_rows;  // ascending
  std::uint64_t b_bytes = 0;
  std::uint64_t c_bytes = 0;
  PrivateRegion region;
};

struct LocalizationTraffic {
  std::uint64_t replication_bytes = 0;   // B rows copied into private regions
  std::uint64_t reduction_bytes = 0;     // C partial rows read back
  std::uint64_t b_source_blocks = 0;     // distinct B blocks, each read once
  std::uint64_t b_copy_blocks = 0;       // private-copy writes, counts fan-out
};

struct LocalizationPlan {
  std::uint64_t m_rows = 0;
  std::uint64_t k_cols = 0;
  std::uint64_t batch_n = 0;
  int elem_bytes = 4;
  std::uint64_t elems_per_block = 16;
  std::vector<StreamShare> shares;       // (pim, group) ascending, nonempty
  std::vector<PimFootprint> pims;        // active PIMs ascending
  LocalizationTraffic traffic;

  const PimFootprint* footprint(std::uint64_t pim) const;
  const StreamShare* share(std::uint64_t pim, std::uint64_t group) const;
};

// Ascending DRAM blocks owned by one PIM starting at `start`; throws
// RegionTooSmall when the address space cannot supply `count` blocks.
std::vector<Addr> pim_region_blocks(const AddressMapping& map, PimLevel level,
                                    std::uint64_t pim, Addr start,
                                    std::uint64_t count);

// Derives the replication plan for B and C.  Regions land in the PIM
// scratchpad when the whole footprint fits in scratchpad_bytes, otherwise in
// DRAM after the matrix; a nonzero region_limit_bytes caps the per-PIM DRAM
// region.
LocalizationPlan plan_localization(const AddressMapping& map, const GroupSpec& spec,
                                   const MatrixGeometry& geom, std::uint64_t batch_n,
                                   std::uint64_t scratchpad_bytes = 0,
                                   std::uint64_t region_limit_bytes = 0);

// Private B buffers per active PIM: the planned 16-row slices stacked in
// share order (groups ascending, blocks in stream order).
std::vector<Eigen::MatrixXf> localize_b(const Eigen::MatrixXf& b,
                                        const LocalizationPlan& plan);

// Zeroed C partial buffers per active PIM (c_rows x N).
std::vector<Eigen::MatrixXf> make_c_partials(const LocalizationPlan& plan);

// Sums per-PIM partials into the full C in ascending-PIM order.
Eigen::MatrixXf reduce_c(const std::vector<Eigen::MatrixXf>& partials,
                         const LocalizationPlan& plan);

}  // namespace stepstone
