#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "stepstone/addrmap.hpp"

namespace stepstone {

struct MatrixSmallerThanBlock : Error { using Error::Error; };
struct AddressOutsideMatrix : Error { using Error::Error; };
struct UnalignedAddress : Error { using Error::Error; };

// Row-major matrix placed in the physical address space.  pinned_bits fixes
// address bits to constant values, leaving the dense element index to occupy
// the remaining low bits; this mimics an allocator that can only hand out
// frames with particular bit values.
struct MatrixGeometry {
  std::uint64_t m_rows = 0;
  std::uint64_t k_cols = 0;
  int elem_bytes = 4;
  Addr base_addr = 0;
  std::vector<std::pair<int, int>> pinned_bits;  // (physical bit, value)

  std::uint64_t bytes() const { return m_rows * k_cols * elem_bytes; }
  std::uint64_t row_pitch() const { return k_cols * elem_bytes; }
};

// Physical placement of a geometry: which address bits carry the byte index.
// The low col_bits of the index walk within a row (mcol), the next row_bits
// select the row (mrow).
struct MatrixLayout {
  Addr base = 0;  // base_addr plus the pinned bit values
  Addr span_mask = 0;
  Addr mcol_mask = 0;
  Addr mrow_mask = 0;
  int col_bits = 0;
  int row_bits = 0;
  std::uint64_t row_pitch = 0;

  Addr addr_of(std::uint64_t row, std::uint64_t byte_in_row) const {
    return base | spread_bits(row * row_pitch + byte_in_row, span_mask);
  }
  bool contains(Addr a) const { return (a & ~span_mask) == base; }
  // (row, byte_in_row) of an address inside the matrix.
  std::pair<std::uint64_t, std::uint64_t> index_of(Addr a) const;
};

MatrixLayout resolve_layout(const AddressMapping& map, const MatrixGeometry& geom);

// How one PIM id bit behaves while a matrix is streamed row-major:
//   Pinned            no sources inside the matrix span, value is constant
//   ColumnInterleave  sources only within a row, blocks of every row spread
//                     across PIMs differing in this bit
//   RowSelect         sources only in the row index, whole rows go to one
//                     side of this bit
//   Group             sources in both, the row-dependent half must be fixed
//                     per execution pass
enum class IdFieldRole { Pinned, ColumnInterleave, RowSelect, Group };

std::string_view id_field_role_name(IdFieldRole role);

struct IdFieldSplit {
  std::string name;
  int id_pos = 0;
  IdFieldRole role = IdFieldRole::Pinned;
  Addr col_sources = 0;           // physical bits, within mcol
  Addr row_sources = 0;           // physical bits, within mrow
  std::uint64_t col_mask = 0;     // same bits over the byte-in-row index
  std::uint64_t row_mask = 0;     // same bits over the row index
  int base_parity = 0;            // constant part from base and pinned bits
};

struct GroupSpec {
  PimLevel level = PimLevel::Channel;
  int block_offset_bits = 6;
  int total_bits = 0;
  MatrixLayout layout;
  std::vector<IdFieldSplit> id_splits;         // id bit order
  std::vector<std::uint64_t> group_values;     // realized row tuples, sorted
  std::vector<std::uint64_t> active_ids;       // realized pim ids, sorted
  std::uint64_t rows_per_group = 0;
  std::uint64_t pinned_id_mask = 0;            // id bits with constant value
  std::uint64_t pinned_id_value = 0;

  int id_bits() const { return static_cast<int>(id_splits.size()); }
  std::uint64_t num_groups() const { return group_values.size(); }
  std::uint64_t num_active_pims() const { return active_ids.size(); }
  bool is_active(std::uint64_t pim) const;

  // Tuple of the Group-role bits (ascending id position) for a row.
  std::uint64_t group_of_row(std::uint64_t row) const;
  // Full PIM id owning the block at (row, byte_in_row).
  std::uint64_t pim_of(std::uint64_t row, std::uint64_t byte_in_row) const;
};

GroupSpec derive_groups(const AddressMapping& map, const MatrixGeometry& geom,
                        PimLevel level);

}  // namespace stepstone
