#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "stepstone/grouping.hpp"

namespace stepstone {

// One linear condition on a block address: parity(addr & mask) == target.
struct ParityConstraint {
  Addr mask = 0;
  int target = 0;
};

// Solution set of a parity-constraint system over the block-address bits
// [block_offset, total).  solve() returns nothing when the system is
// inconsistent (no address satisfies it).
class AffineSpace {
 public:
  static std::optional<AffineSpace> solve(const std::vector<ParityConstraint>& cs,
                                          int block_offset_bits, int total_bits);

  std::uint64_t count() const { return std::uint64_t{1} << __builtin_popcountll(free_mask_); }
  Addr free_mask() const { return free_mask_; }
  bool disjoint_masks() const { return disjoint_; }

  Addr min_element() const;
  // Smallest member >= x, if any.
  std::optional<Addr> min_geq(Addr x) const;

  // Member for a free-bit counter value.  Counting the counter upward visits
  // every member exactly once; the visit order is ascending address order
  // when the constraint masks are pairwise disjoint.
  Addr at_counter(Addr counter) const;
  Addr counter_of(Addr addr) const { return compact_bits(addr, free_mask_); }

 private:
  std::vector<ParityConstraint> reduced_;  // RREF, pivot = lowest mask bit
  std::vector<Addr> pivots_;
  std::vector<Addr> basis_by_top_;         // null-space basis, indexed by top bit
  Addr particular_ = 0;
  Addr free_mask_ = 0;
  bool disjoint_ = false;
  int bo_ = 6;
  int total_ = 0;
};

// Half-open index ranges at block granularity; {0, 0} means the full range.
struct BlockRange {
  std::uint64_t lo = 0;
  std::uint64_t hi = 0;
  bool full() const { return lo == 0 && hi == 0; }
};

// Constraint system tying a stream to one (pim, group) assignment: the pinned
// out-of-span bits, the column-interleave parities, and the group/row-select
// parities.  Empty optional when the pim can never own a block of this group.
std::optional<std::vector<ParityConstraint>> stream_constraints(
    const GroupSpec& spec, std::uint64_t pim, std::uint64_t group);

// Ascending enumerator of the block addresses one PIM touches for one group,
// optionally clamped to row and column-block ranges.  Mirrors an address
// generator that increments by one block, corrects the ID-affecting bits to
// restore the target parities, and forwards carries over bit chains whose
// values are locked; per-step costs for both that scheme and the plain
// increment-and-check baseline are reported.
class AgenStream {
 public:
  AgenStream(const GroupSpec& spec, std::uint64_t pim, std::uint64_t group,
             BlockRange rows = {}, BlockRange cols = {});
  // Same enumerator over an explicit constraint system, for streams that are
  // not tied to a group (a whole-PIM walk, for example).
  AgenStream(const MatrixLayout& layout, std::vector<ParityConstraint> constraints,
             int block_offset_bits, int total_bits, BlockRange rows = {},
             BlockRange cols = {});

  std::optional<Addr> next();
  bool exhausted() const { return done_; }

  // Correction iterations used by the last next(): one per instant-correction
  // run (adjacent bits feeding the same ID bit settle together) or forwarded
  // carry chain, plus one when the final carry lands on an unconstrained bit.
  // Zero when the plain increment already hit a valid block.
  int last_iterations() const { return last_iters_; }
  // Single-block increments the increment-and-check baseline needs for the
  // same step.
  std::uint64_t last_naive_steps() const { return last_naive_; }

  // Distinct ID-affecting bit positions inside the matrix span; every step
  // satisfies last_iterations() <= affecting_bits() + 1.
  int affecting_bits() const;

  std::vector<Addr> drain(std::size_t limit = SIZE_MAX);

 private:
  void init_ranges(BlockRange rows, BlockRange cols);
  void init_space(std::vector<ParityConstraint> cs, int total_bits);
  std::optional<Addr> seek(Addr from);
  int correction_iterations(Addr prev, Addr next, bool from_increment) const;
  bool locally_fixed(int pos, int settle) const;

  MatrixLayout layout_;
  std::optional<AffineSpace> space_;
  std::vector<ParityConstraint> constraints_;
  Addr affecting_ = 0;
  int bo_ = 6;
  std::uint64_t row_lo_ = 0, row_hi_ = 0;  // rows
  std::uint64_t col_lo_ = 0, col_hi_ = 0;  // column blocks
  Addr block_ = 64;
  Addr start_ = 0, end_ = 0;               // first/last candidate addresses
  bool fast_ = false;
  Addr counter_ = 0;
  Addr cur_ = 0;
  bool started_ = false;
  bool done_ = false;
  int last_iters_ = 0;
  std::uint64_t last_naive_ = 0;
};

}  // namespace stepstone
