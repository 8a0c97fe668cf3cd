#include "stepstone/grouping.hpp"

#include <algorithm>
#include <sstream>

namespace stepstone {

namespace {

bool is_pow2(std::uint64_t v) { return v && !(v & (v - 1)); }

int log2_exact(std::uint64_t v) { return 63 - __builtin_clzll(v); }

std::string hex(Addr v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

// All XOR combinations of the generators, sorted.
std::vector<std::uint64_t> gf2_span(const std::vector<std::uint64_t>& gens) {
  std::vector<std::uint64_t> basis;
  for (std::uint64_t g : gens) {
    for (std::uint64_t b : basis) g = std::min(g, g ^ b);
    if (g) basis.push_back(g);
  }
  std::vector<std::uint64_t> out{0};
  for (std::uint64_t b : basis) {
    size_t n = out.size();
    for (size_t i = 0; i < n; ++i) out.push_back(out[i] ^ b);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace

std::string_view id_field_role_name(IdFieldRole role) {
  switch (role) {
    case IdFieldRole::Pinned: return "pinned";
    case IdFieldRole::ColumnInterleave: return "column-interleave";
    case IdFieldRole::RowSelect: return "row-select";
    case IdFieldRole::Group: return "group";
  }
  return "?";
}

std::pair<std::uint64_t, std::uint64_t> MatrixLayout::index_of(Addr a) const {
  if (!contains(a))
    throw AddressOutsideMatrix("address " + hex(a) + " is not inside the matrix");
  std::uint64_t idx = compact_bits(a, span_mask);
  return {idx / row_pitch, idx % row_pitch};
}

MatrixLayout resolve_layout(const AddressMapping& map, const MatrixGeometry& g) {
  if (!is_pow2(g.m_rows) || !is_pow2(g.k_cols) || !is_pow2(g.elem_bytes))
    throw ConfigError("matrix dimensions must be powers of two, got " +
                      std::to_string(g.m_rows) + "x" + std::to_string(g.k_cols) +
                      " with " + std::to_string(g.elem_bytes) + "B elements");
  if (g.row_pitch() < map.block_bytes())
    throw MatrixSmallerThanBlock(
        "one matrix row covers " + std::to_string(g.row_pitch()) +
        " bytes, less than the " + std::to_string(map.block_bytes()) +
        "B block (pad the inner dimension)");

  Addr pin_mask = 0, pin_values = 0;
  for (auto [pos, val] : g.pinned_bits) {
    if (pos < map.block_offset_bits() || pos >= map.total_bits())
      throw ConfigError("pinned bit b" + std::to_string(pos) +
                        " outside the usable address bits");
    if (val != 0 && val != 1)
      throw ConfigError("pinned bit b" + std::to_string(pos) + " wants value 0 or 1");
    if (pin_mask >> pos & 1)
      throw ConfigError("pinned bit b" + std::to_string(pos) + " given twice");
    pin_mask |= Addr{1} << pos;
    if (val) pin_values |= Addr{1} << pos;
  }

  MatrixLayout lay;
  lay.row_pitch = g.row_pitch();
  lay.col_bits = log2_exact(lay.row_pitch);
  lay.row_bits = log2_exact(g.m_rows);
  const int size_bits = lay.col_bits + lay.row_bits;
  int got = 0;
  for (int pos = 0; got < size_bits; ++pos) {
    if (pos >= map.total_bits())
      throw AddressOutOfRange("matrix of " + std::to_string(g.bytes()) +
                              " bytes does not fit the address space" +
                              (pin_mask ? " with the pinned bits" : ""));
    if (pin_mask >> pos & 1) continue;
    lay.span_mask |= Addr{1} << pos;
    ++got;
  }

  Addr rest = lay.span_mask;
  for (int i = 0; i < lay.col_bits; ++i) {
    Addr low = rest & (~rest + 1);
    lay.mcol_mask |= low;
    rest ^= low;
  }
  lay.mrow_mask = rest;

  if (g.base_addr & lay.span_mask)
    throw UnalignedAddress("base address " + hex(g.base_addr) +
                           " sets bits inside the matrix span " + hex(lay.span_mask));
  if (g.base_addr & (map.block_bytes() - 1))
    throw UnalignedAddress("base address " + hex(g.base_addr) +
                           " is not block aligned");
  if (g.base_addr & pin_mask)
    throw ConfigError("base address sets a pinned bit (give the value via the pin)");
  if (g.base_addr >= map.space_bytes())
    throw AddressOutOfRange("base address " + hex(g.base_addr) +
                            " exceeds the address space");
  lay.base = g.base_addr | pin_values;
  return lay;
}

bool GroupSpec::is_active(std::uint64_t pim) const {
  return std::binary_search(active_ids.begin(), active_ids.end(), pim);
}

std::uint64_t GroupSpec::group_of_row(std::uint64_t row) const {
  std::uint64_t tuple = 0;
  int pos = 0;
  for (const IdFieldSplit& sp : id_splits) {
    if (sp.role != IdFieldRole::Group) continue;
    tuple |= static_cast<std::uint64_t>(parity64(row & sp.row_mask)) << pos;
    ++pos;
  }
  return tuple;
}

std::uint64_t GroupSpec::pim_of(std::uint64_t row, std::uint64_t byte_in_row) const {
  std::uint64_t id = 0;
  for (const IdFieldSplit& sp : id_splits) {
    int bit = sp.base_parity ^ parity64(row & sp.row_mask) ^
              parity64(byte_in_row & sp.col_mask);
    id |= static_cast<std::uint64_t>(bit) << sp.id_pos;
  }
  return id;
}

GroupSpec derive_groups(const AddressMapping& map, const MatrixGeometry& geom,
                        PimLevel level) {
  GroupSpec s;
  s.level = level;
  s.block_offset_bits = map.block_offset_bits();
  s.total_bits = map.total_bits();
  s.layout = resolve_layout(map, geom);

  const auto& ids = map.id_fields(level);
  for (size_t i = 0; i < ids.size(); ++i) {
    const DramField& f = *ids[i];
    IdFieldSplit sp;
    sp.name = f.name;
    sp.id_pos = static_cast<int>(i);
    sp.col_sources = f.source_mask & s.layout.mcol_mask;
    sp.row_sources = f.source_mask & s.layout.mrow_mask;
    sp.col_mask = compact_bits(sp.col_sources, s.layout.span_mask);
    sp.row_mask = compact_bits(sp.row_sources, s.layout.span_mask) >> s.layout.col_bits;
    sp.base_parity = parity64(s.layout.base & f.source_mask);
    if (sp.col_sources)
      sp.role = sp.row_sources ? IdFieldRole::Group : IdFieldRole::ColumnInterleave;
    else
      sp.role = sp.row_sources ? IdFieldRole::RowSelect : IdFieldRole::Pinned;
    if (sp.role == IdFieldRole::Pinned) {
      s.pinned_id_mask |= std::uint64_t{1} << i;
      s.pinned_id_value |= static_cast<std::uint64_t>(sp.base_parity) << i;
    }
    s.id_splits.push_back(std::move(sp));
  }

  std::vector<std::uint64_t> tuple_gens;
  for (int j = 0; j < s.layout.row_bits; ++j) {
    std::uint64_t t = 0;
    int pos = 0;
    for (const IdFieldSplit& sp : s.id_splits) {
      if (sp.role != IdFieldRole::Group) continue;
      t |= static_cast<std::uint64_t>(parity64((std::uint64_t{1} << j) & sp.row_mask))
           << pos;
      ++pos;
    }
    if (t) tuple_gens.push_back(t);
  }
  s.group_values = gf2_span(tuple_gens);
  s.rows_per_group = geom.m_rows / s.group_values.size();

  std::vector<std::uint64_t> id_gens;
  std::uint64_t base_id = 0;
  for (const IdFieldSplit& sp : s.id_splits)
    base_id |= static_cast<std::uint64_t>(sp.base_parity) << sp.id_pos;
  for (int j = 0; j < s.layout.col_bits + s.layout.row_bits; ++j) {
    std::uint64_t v = 0;
    for (const IdFieldSplit& sp : s.id_splits) {
      std::uint64_t idx_mask =
          sp.col_mask | (sp.row_mask << s.layout.col_bits);
      v |= static_cast<std::uint64_t>(parity64((std::uint64_t{1} << j) & idx_mask))
           << sp.id_pos;
    }
    if (v) id_gens.push_back(v);
  }
  s.active_ids = gf2_span(id_gens);
  for (std::uint64_t& v : s.active_ids) v ^= base_id;
  std::sort(s.active_ids.begin(), s.active_ids.end());
  return s;
}

}  // namespace stepstone
