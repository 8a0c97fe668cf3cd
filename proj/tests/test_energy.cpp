#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "stepstone/energy.hpp"

#include <cmath>
#include <random>
#include <vector>

#include "doctest.h"
#include "stepstone/timing.hpp"
#include "test_util.hpp"

using namespace stepstone;

namespace {

// Single channel, four ranks of four bank groups, id sources in the row bits
// of a 256x1024 float matrix: sixteen bank-group units or four device units.
AddressMapping bus_map() {
  return AddressMapping::parse_file(testutil::config_path("flat-1ch-ddr4.map"));
}

Eigen::MatrixXf random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  Eigen::MatrixXf m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

EnergyReport measure(PimLevel level, std::uint64_t batch_n) {
  AddressMapping map = bus_map();
  MatrixGeometry geom;
  geom.m_rows = 256;
  geom.k_cols = 1024;
  PimTopology topo = PimTopology::for_level(level, 1, 4);
  GemmPlan plan = make_plan(map, geom, batch_n, level, GemmMode::Stp,
                            topo.scratchpad_bytes);
  Eigen::MatrixXf a = random_matrix(256, 1024, 21);
  Eigen::MatrixXf b = random_matrix(1024, Eigen::Index(batch_n), 22);
  GemmResult res = run_gemm(a, b, plan);
  SimReport rep = simulate(res.trace, topo, TimingParams{});
  return energy(rep, EnergyParams{}, level);
}

double round3(double nj) { return std::round(nj * 100.0) / 100.0; }

}  // namespace

TEST_CASE("block transfer constants reproduce to three figures") {
  EnergyParams p;
  SimReport r;
  r.traffic.a_stream = 64;

  EnergyReport off = energy(r, p, PimLevel::Channel);
  CHECK(off.stream_j * 1e9 == doctest::Approx(64 * 8 * 25.7e-3));
  CHECK(round3(off.stream_j * 1e9) == doctest::Approx(13.16));

  EnergyReport in = energy(r, p, PimLevel::BankGroup);
  CHECK(in.stream_j * 1e9 == doctest::Approx(64 * 8 * 11.3e-3));
  CHECK(round3(in.stream_j * 1e9) == doctest::Approx(5.79));

  EnergyReport dv = energy(r, p, PimLevel::Device);
  CHECK(dv.stream_j == doctest::Approx(off.stream_j));
}

TEST_CASE("an empty report carries no energy") {
  EnergyReport e = energy(SimReport{}, EnergyParams{}, PimLevel::BankGroup);
  CHECK(e.stream_j == 0.0);
  CHECK(e.localization_j == 0.0);
  CHECK(e.reduction_j == 0.0);
  CHECK(e.buffer_j == 0.0);
  CHECK(e.scratchpad_j == 0.0);
  CHECK(e.simd_j == 0.0);
  CHECK(e.total_j == 0.0);
  CHECK(e.pj_per_flop == 0.0);
  CHECK(e.watts_per_device == 0.0);
}

TEST_CASE("localization and reduction cross the chip boundary at every level") {
  EnergyParams p;
  SimReport r;
  r.traffic.localization = 1000;
  r.traffic.reduction = 500;
  EnergyReport e = energy(r, p, PimLevel::BankGroup);
  CHECK(e.localization_j == doctest::Approx(1000 * 8 * 25.7e-12));
  CHECK(e.reduction_j == doctest::Approx(500 * 8 * 25.7e-12));
  CHECK(e.total_j == doctest::Approx(e.localization_j + e.reduction_j));
}

TEST_CASE("component sums and rate conversions agree") {
  EnergyParams p;
  SimReport r;
  r.traffic.a_stream = 640;
  r.traffic.buffer_fill = 128;
  r.traffic.buffer_drain = 64;
  r.simd_issues = 1000;
  r.mac_count = 8000;
  r.total_ns = 1000.0;
  r.device_count = 8;

  EnergyReport e = energy(r, p, PimLevel::Device);
  CHECK(e.stream_j == doctest::Approx(640 * 8 * 25.7e-12));
  CHECK(e.buffer_j == doctest::Approx((128 + 64) * 8 * 25.7e-12));
  CHECK(e.simd_j == doctest::Approx(1000 * 11.3e-12));
  // 1000 issues plus three buffer blocks at the device rate.
  CHECK(e.scratchpad_j == doctest::Approx((1000 + 2 + 1) * 0.1e-9));
  double total = e.stream_j + e.buffer_j + e.scratchpad_j + e.simd_j;
  CHECK(e.total_j == doctest::Approx(total));
  CHECK(e.pj_per_flop == doctest::Approx(total / (2.0 * 8000) * 1e12));
  CHECK(e.watts_per_device == doctest::Approx(total / 1e-6 / 8));
}

TEST_CASE("parameters must be positive") {
  EnergyParams p;
  p.off_chip_pj_per_bit = 0.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p = EnergyParams{};
  p.scratchpad_bg_nj = -1.0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  CHECK_NOTHROW(EnergyParams{}.validate());
}

TEST_CASE("localization and reduction energy grows with batch size") {
  double prev = -1.0;
  for (std::uint64_t n : {1, 2, 4, 8, 16}) {
    EnergyReport e = measure(PimLevel::BankGroup, n);
    double moved = e.localization_j + e.reduction_j;
    CHECK(moved >= prev);
    prev = moved;
  }
}

TEST_CASE("device access placement decides the efficient level per batch size") {
  // Streaming A from inside the device favors the bank-group units while the
  // batch is small; their four-fold replication fan-out loses once operand
  // and result movement grows with the batch.
  EnergyReport bg_small = measure(PimLevel::BankGroup, 1);
  EnergyReport dv_small = measure(PimLevel::Device, 1);
  CHECK(bg_small.pj_per_flop < dv_small.pj_per_flop);

  EnergyReport bg_large = measure(PimLevel::BankGroup, 64);
  EnergyReport dv_large = measure(PimLevel::Device, 64);
  CHECK(bg_large.pj_per_flop > dv_large.pj_per_flop);
}
