#pragma once

#include <algorithm>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "stepstone/addrmap.hpp"

namespace testutil {

struct RandomMappingOpts {
  int total_bits = 22;
  int ch = 1;
  int rk = 1;
  int bg = 2;
  int ba = 1;
  int cols = 7;  // column coordinate bits beyond the block offset
  int donations = 6;
  bool disjoint_ids = false;
};

// Random invertible XOR mapping: start from a bit permutation, then sprinkle
// extra taps into the id fields by adding rows of non-id unit fields.  Row
// additions keep the matrix invertible.
inline stepstone::AddressMapping make_random_mapping(std::mt19937_64& rng,
                                                     RandomMappingOpts o = {}) {
  using namespace stepstone;
  const int bo = 6;
  const int n = o.total_bits - bo;
  const int rows = n - (o.ch + o.rk + o.bg + o.ba + o.cols);
  if (rows < 0) throw std::runtime_error("make_random_mapping: too many fields");

  std::vector<DramField> fields;
  auto push = [&](FieldKind kind, const std::string& prefix, int count, int index0) {
    for (int i = 0; i < count; ++i) {
      DramField f;
      f.kind = kind;
      f.index = index0 + i;
      f.name = prefix + std::to_string(f.index);
      fields.push_back(f);
    }
  };
  push(FieldKind::Channel, "CH", o.ch, 0);
  push(FieldKind::Rank, "RK", o.rk, 0);
  push(FieldKind::BankGroup, "BG", o.bg, 0);
  push(FieldKind::Bank, "BA", o.ba, 0);
  push(FieldKind::Column, "COL", o.cols, bo);
  push(FieldKind::Row, "ROW", rows, 0);

  std::vector<int> bits(n);
  for (int i = 0; i < n; ++i) bits[i] = bo + i;
  std::shuffle(bits.begin(), bits.end(), rng);
  for (int i = 0; i < n; ++i) fields[i].source_mask = Addr{1} << bits[i];

  const int id_count = o.ch + o.rk + o.bg;
  std::vector<int> donors;
  for (int i = id_count + o.ba; i < n; ++i) donors.push_back(i);  // COL and ROW fields
  std::shuffle(donors.begin(), donors.end(), rng);
  size_t donor_next = 0;
  for (int d = 0; d < o.donations && id_count > 0; ++d) {
    int target = static_cast<int>(rng() % id_count);
    int donor;
    if (o.disjoint_ids) {
      if (donor_next >= donors.size()) break;
      donor = donors[donor_next++];
    } else {
      donor = donors[rng() % donors.size()];
    }
    fields[target].source_mask ^= fields[donor].source_mask;
  }

  std::shuffle(fields.begin(), fields.end(), rng);
  return AddressMapping::from_fields(bo, o.total_bits, std::move(fields));
}

inline std::string config_path(const std::string& name) {
  return std::string(TEST_CONFIG_DIR) + "/" + name;
}

}  // namespace testutil
