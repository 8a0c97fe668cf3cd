#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <array>
#include <map>
#include <random>
#include <set>
#include <vector>

#include "doctest.h"
#include "stepstone/localize.hpp"
#include "test_util.hpp"

using namespace stepstone;
using testutil::RandomMappingOpts;
using testutil::make_random_mapping;

namespace {

MatrixGeometry geom(std::uint64_t m, std::uint64_t k, Addr base = 0) {
  MatrixGeometry g;
  g.m_rows = m;
  g.k_cols = k;
  g.base_addr = base;
  return g;
}

// Independent ownership scan: owned column blocks and rows per (pim, group).
struct ScanShare {
  std::set<std::uint64_t> col_blocks;
  std::set<std::uint64_t> rows;
  std::uint64_t blocks = 0;
};

std::map<std::pair<std::uint64_t, std::uint64_t>, ScanShare> scan_shares(
    const AddressMapping& m, const MatrixGeometry& g, const GroupSpec& s,
    PimLevel level) {
  std::map<std::pair<std::uint64_t, std::uint64_t>, ScanShare> out;
  std::uint64_t row_blocks = g.row_pitch() >> m.block_offset_bits();
  for (std::uint64_t r = 0; r < g.m_rows; ++r) {
    std::uint64_t grp = s.group_of_row(r);
    for (std::uint64_t cb = 0; cb < row_blocks; ++cb) {
      Addr a = s.layout.addr_of(r, cb << m.block_offset_bits());
      std::uint64_t owner = m.pim_id(a, level).value;
      ScanShare& sh = out[{owner, grp}];
      sh.col_blocks.insert(cb);
      sh.rows.insert(r);
      ++sh.blocks;
    }
  }
  return out;
}

Eigen::MatrixXf iota_matrix(std::uint64_t rows, std::uint64_t cols) {
  Eigen::MatrixXf m(rows, cols);
  for (std::uint64_t r = 0; r < rows; ++r)
    for (std::uint64_t c = 0; c < cols; ++c)
      m(r, c) = float(r * cols + c);
  return m;
}

}  // namespace

TEST_CASE("toy plan replicates sixteen B rows per stream") {
  AddressMapping m = AddressMapping::toy_r4();
  MatrixGeometry g = geom(16, 64);
  GroupSpec s = derive_groups(m, g, PimLevel::Device);
  LocalizationPlan p = plan_localization(m, s, g, 1, 8192);

  CHECK(p.shares.size() == 16);
  for (const StreamShare& sh : p.shares) {
    CHECK(sh.b_row_blocks.size() == 1);
    CHECK(sh.blocks == 4);
    CHECK(sh.rows.size() == 4);
  }
  CHECK(p.traffic.replication_bytes == 1024);
  CHECK(p.pims.size() == 4);
  for (const PimFootprint& f : p.pims) {
    CHECK(f.c_rows.size() == 16);
    CHECK(f.b_bytes == 256);
    CHECK(f.c_bytes == 64);
    CHECK(f.region.scratchpad_resident);
  }
  CHECK(p.traffic.reduction_bytes == 256);
}

TEST_CASE("row-selected ids make every pim hold all of B") {
  AddressMapping m = AddressMapping::parse_string(
      "TOTAL_BITS = 12\n"
      "FIELD COL6 = XOR(b6)\n"
      "FIELD COL7 = XOR(b7)\n"
      "FIELD ROW0 = XOR(b8)\n"
      "FIELD ROW1 = XOR(b9)\n"
      "FIELD RK0 = XOR(b10)\n"
      "FIELD RK1 = XOR(b11)\n");
  MatrixGeometry g = geom(16, 64);
  GroupSpec s = derive_groups(m, g, PimLevel::Device);
  REQUIRE(s.num_groups() == 1);

  LocalizationPlan p = plan_localization(m, s, g, 2, 8192);
  REQUIRE(p.pims.size() == 4);
  std::uint64_t full_b = 64 * 2 * 4;
  for (const PimFootprint& f : p.pims) {
    CHECK(f.b_bytes == full_b);
    CHECK(f.c_rows.size() == 4);
  }
  CHECK(p.traffic.replication_bytes == 4 * full_b);

  // Each B slice is read once but written to all four private copies.
  std::uint64_t slice_blocks = (16 * 2 * 4 + 63) / 64;
  CHECK(p.traffic.b_source_blocks == 4 * slice_blocks);
  CHECK(p.traffic.b_copy_blocks == 16 * slice_blocks);
}

TEST_CASE("plans agree with the ownership scan") {
  std::mt19937_64 rng(0x10CA1);
  for (int cfg = 0; cfg < 12; ++cfg) {
    RandomMappingOpts opts;
    opts.total_bits = 19;
    opts.ch = int(rng() % 2);
    opts.rk = 1 + int(rng() % 2);
    opts.bg = 1;
    AddressMapping m = make_random_mapping(rng, opts);
    MatrixGeometry g = geom(16, 64);
    PimLevel lvl = std::array{PimLevel::Device, PimLevel::BankGroup}[rng() % 2];
    GroupSpec s = derive_groups(m, g, lvl);
    auto oracle = scan_shares(m, g, s, lvl);
    LocalizationPlan p = plan_localization(m, s, g, 4, 1 << 20);

    std::size_t found = 0;
    for (const StreamShare& sh : p.shares) {
      auto it = oracle.find({sh.pim, sh.group});
      REQUIRE(it != oracle.end());
      ++found;
      std::set<std::uint64_t> got(sh.b_row_blocks.begin(), sh.b_row_blocks.end());
      CHECK(got.size() == sh.b_row_blocks.size());
      CHECK(got == it->second.col_blocks);
      std::set<std::uint64_t> rows(sh.rows.begin(), sh.rows.end());
      CHECK(rows == it->second.rows);
      CHECK(sh.blocks == it->second.blocks);
    }
    CHECK(found == oracle.size());

    std::uint64_t repl = 0;
    for (const StreamShare& sh : p.shares)
      repl += sh.b_row_blocks.size() * 16 * p.batch_n * 4;
    CHECK(repl == p.traffic.replication_bytes);
    std::uint64_t redu = 0;
    for (const PimFootprint& f : p.pims) redu += f.c_rows.size() * p.batch_n * 4;
    CHECK(redu == p.traffic.reduction_bytes);
  }
}

TEST_CASE("localized buffers hold the planned rows in stream order") {
  AddressMapping m = AddressMapping::toy_r4();
  MatrixGeometry g = geom(16, 64);
  GroupSpec s = derive_groups(m, g, PimLevel::Device);
  LocalizationPlan p = plan_localization(m, s, g, 3, 8192);
  Eigen::MatrixXf b = iota_matrix(64, 3);
  auto bufs = localize_b(b, p);
  REQUIRE(bufs.size() == p.pims.size());

  const StreamShare* sh = p.share(0, 1);
  REQUIRE(sh != nullptr);
  REQUIRE(sh->b_row_blocks == std::vector<std::uint64_t>{1});

  for (std::size_t i = 0; i < p.pims.size(); ++i) {
    std::uint64_t at = 0;
    for (const StreamShare& share : p.shares) {
      if (share.pim != p.pims[i].pim) continue;
      for (std::uint64_t cb : share.b_row_blocks) {
        Eigen::MatrixXf want = b.middleRows(cb * 16, 16);
        Eigen::MatrixXf got = bufs[i].middleRows(at, 16);
        CHECK(got == want);
        at += 16;
      }
    }
    CHECK(at == std::uint64_t(bufs[i].rows()));
  }

  Eigen::MatrixXf wrong = Eigen::MatrixXf::Zero(32, 3);
  CHECK_THROWS_AS(localize_b(wrong, p), ShapeMismatch);
}

TEST_CASE("single pim localization is the identity") {
  AddressMapping m = AddressMapping::toy_r4();
  MatrixGeometry g = geom(16, 64);
  GroupSpec s = derive_groups(m, g, PimLevel::Channel);
  LocalizationPlan p = plan_localization(m, s, g, 2, 8192);
  REQUIRE(p.pims.size() == 1);
  REQUIRE(p.shares.size() == 1);

  Eigen::MatrixXf b = iota_matrix(64, 2);
  auto bufs = localize_b(b, p);
  CHECK(bufs[0] == b);

  auto partials = make_c_partials(p);
  partials[0] = iota_matrix(16, 2);
  Eigen::MatrixXf c = reduce_c(partials, p);
  CHECK(c == partials[0]);
}

TEST_CASE("reduction sums contributions row by row in pim order") {
  AddressMapping m = AddressMapping::toy_r4();
  MatrixGeometry g = geom(16, 64);
  GroupSpec s = derive_groups(m, g, PimLevel::Device);
  LocalizationPlan p = plan_localization(m, s, g, 2, 8192);
  REQUIRE(p.pims.size() == 4);

  auto partials = make_c_partials(p);
  for (std::size_t i = 0; i < partials.size(); ++i)
    partials[i].setConstant(float(p.pims[i].pim + 1));

  Eigen::MatrixXf c = reduce_c(partials, p);
  // Every pim covers every row of the toy matrix, so each C element collects
  // 1 + 2 + 3 + 4.
  CHECK(c.isApprox(Eigen::MatrixXf::Constant(16, 2, 10.0f)));

  auto zeros = make_c_partials(p);
  CHECK(reduce_c(zeros, p) == Eigen::MatrixXf::Zero(16, 2));

  auto missing = partials;
  missing.pop_back();
  CHECK_THROWS_AS(reduce_c(missing, p), MissingPartial);
  partials[1] = Eigen::MatrixXf::Zero(3, 2);
  CHECK_THROWS_AS(reduce_c(partials, p), ShapeMismatch);
}

TEST_CASE("dram private regions decode to their owner") {
  AddressMapping m = AddressMapping::skl_ddr4();
  MatrixGeometry g = geom(16, 512);
  GroupSpec s = derive_groups(m, g, PimLevel::BankGroup);
  LocalizationPlan p = plan_localization(m, s, g, 4);

  Addr matrix_end = (s.layout.base | s.layout.span_mask) + 64;
  for (const PimFootprint& f : p.pims) {
    CHECK(!f.region.scratchpad_resident);
    CHECK(f.region.length == f.b_bytes + f.c_bytes);
    REQUIRE(f.region.blocks.size() == (f.region.length + 63) / 64);
    CHECK(f.region.base == f.region.blocks.front());
    Addr prev = 0;
    for (Addr a : f.region.blocks) {
      CHECK(a >= matrix_end);
      if (prev) CHECK(a > prev);
      prev = a;
      CHECK(m.pim_id(a, PimLevel::BankGroup).value == f.pim);
    }
  }
}

TEST_CASE("regions that cannot be placed are rejected") {
  AddressMapping m = AddressMapping::toy_r4();
  MatrixGeometry g = geom(16, 64);
  GroupSpec s = derive_groups(m, g, PimLevel::Device);

  // The toy matrix fills the whole address space, leaving no room for
  // private regions in DRAM.
  CHECK_THROWS_AS(plan_localization(m, s, g, 1, 0), RegionTooSmall);
  CHECK_THROWS_AS(plan_localization(m, s, g, 1, 8192, 100), RegionTooSmall);
  CHECK_NOTHROW(plan_localization(m, s, g, 1, 8192));
  CHECK_THROWS_AS(plan_localization(m, s, g, 0, 8192), ConfigError);
}
