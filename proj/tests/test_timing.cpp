#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "stepstone/timing.hpp"

#include <algorithm>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "test_util.hpp"

using namespace stepstone;

namespace {

// Single channel whose bank-group bits sit below the column bits, so
// consecutive blocks rotate across all four bank groups.
AddressMapping interleaved_map() {
  return AddressMapping::parse_string(
      "TOTAL_BITS = 24\n"
      "BLOCK_OFFSET_BITS = 6\n"
      "FIELD BG0 = XOR(b6)\n"
      "FIELD BG1 = XOR(b7)\n"
      "FIELD COL6 = XOR(b8)\n"
      "FIELD COL7 = XOR(b9)\n"
      "FIELD COL8 = XOR(b10)\n"
      "FIELD COL9 = XOR(b11)\n"
      "FIELD COL10 = XOR(b12)\n"
      "FIELD COL11 = XOR(b13)\n"
      "FIELD COL12 = XOR(b14)\n"
      "FIELD BA0 = XOR(b15)\n"
      "FIELD BA1 = XOR(b16)\n"
      "FIELD ROW0 = XOR(b17)\n"
      "FIELD ROW1 = XOR(b18)\n"
      "FIELD ROW2 = XOR(b19)\n"
      "FIELD ROW3 = XOR(b20)\n"
      "FIELD ROW4 = XOR(b21)\n"
      "FIELD ROW5 = XOR(b22)\n"
      "FIELD ROW6 = XOR(b23)\n");
}

// Single channel, four ranks of four bank groups, with every id source bit in
// the row range of a 256x1024 float matrix.  Sixteen bank-group units share
// one command bus.
AddressMapping bus_map() {
  return AddressMapping::parse_string(
      "TOTAL_BITS = 26\n"
      "BLOCK_OFFSET_BITS = 6\n"
      "FIELD COL6 = XOR(b6)\n"
      "FIELD COL7 = XOR(b7)\n"
      "FIELD COL8 = XOR(b8)\n"
      "FIELD COL9 = XOR(b9)\n"
      "FIELD COL10 = XOR(b10)\n"
      "FIELD COL11 = XOR(b11)\n"
      "FIELD RK0 = XOR(b12)\n"
      "FIELD RK1 = XOR(b13)\n"
      "FIELD BG0 = XOR(b14)\n"
      "FIELD BG1 = XOR(b15)\n"
      "FIELD BA0 = XOR(b16)\n"
      "FIELD ROW0 = XOR(b17)\n"
      "FIELD ROW1 = XOR(b18)\n"
      "FIELD ROW2 = XOR(b19)\n"
      "FIELD ROW3 = XOR(b20)\n"
      "FIELD ROW4 = XOR(b21)\n"
      "FIELD ROW5 = XOR(b22)\n"
      "FIELD ROW6 = XOR(b23)\n"
      "FIELD ROW7 = XOR(b24)\n"
      "FIELD ROW8 = XOR(b25)\n");
}

struct StreamSpec {
  std::uint64_t pim = 0;
  std::vector<Addr> blocks;
  std::uint64_t macs_per_block = 0;
  std::uint64_t naive = 1;
  std::vector<std::uint64_t> naive_per_block;  // overrides naive when set
  bool kernel = true;
};

EventTrace make_trace(AddressMapping map, PimLevel level, GemmMode mode,
                      std::vector<StreamSpec> streams) {
  EventTrace tr;
  tr.map = std::move(map);
  tr.level = level;
  tr.mode = mode;
  for (const StreamSpec& s : streams) {
    tr.pim_ids.push_back(s.pim);
    std::vector<Event> ev;
    if (s.kernel) ev.push_back({EventKind::KernelLaunch, 0, 0, 0});
    for (std::size_t i = 0; i < s.blocks.size(); ++i) {
      if (mode == GemmMode::Pei) {
        tr.controller.push_back({EventKind::CommandPacket, s.blocks[i], 0, 0});
      } else {
        std::uint64_t n = s.naive_per_block.empty() ? s.naive : s.naive_per_block[i];
        ev.push_back({EventKind::AgenStep, 0, 1, n});
      }
      ev.push_back({EventKind::DramBlockRead, s.blocks[i], 0, 0});
      if (s.macs_per_block) ev.push_back({EventKind::SimdOp, 0, s.macs_per_block, 0});
    }
    tr.per_pim.push_back(std::move(ev));
  }
  return tr;
}

std::vector<Addr> seq_blocks(std::uint64_t n, Addr base = 0) {
  std::vector<Addr> v(n);
  for (std::uint64_t i = 0; i < n; ++i) v[i] = base + i * 64;
  return v;
}

Eigen::MatrixXf random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  Eigen::MatrixXf m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = dist(rng);
  return m;
}

}  // namespace

TEST_CASE("default timing parameters describe a coherent device") {
  TimingParams t;
  CHECK_NOTHROW(t.validate());
  CHECK(t.memory_clock_ghz() == doctest::Approx(1.2));
  CHECK(t.channel_peak_gbps() == doctest::Approx(19.2));

  TimingParams bad = t;
  bad.tRC = 50;  // below tRAS + tRP
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = t;
  bad.tBL = 0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  bad = t;
  bad.tCCDS = 3;  // a burst cannot outlive its own slot
  CHECK_THROWS_AS(bad.validate(), ConfigError);

  PimTopology ch = PimTopology::for_level(PimLevel::Channel);
  PimTopology dv = PimTopology::for_level(PimLevel::Device);
  PimTopology bg = PimTopology::for_level(PimLevel::BankGroup);
  CHECK(ch.simd_width == 256);
  CHECK(dv.simd_width == 32);
  CHECK(bg.simd_width == 8);
  CHECK(ch.scratchpad_bytes == 256 * 1024);
  CHECK(dv.scratchpad_bytes == 32 * 1024);
  CHECK(bg.scratchpad_bytes == 8 * 1024);
  // Lane counts nest: a channel unit aggregates its ranks, a rank its groups.
  CHECK(dv.simd_width * 8 == ch.simd_width);
  CHECK(bg.simd_width * 4 == dv.simd_width);
  CHECK(ch.unit_count() == 2);
  CHECK(dv.unit_count() == 4);
  CHECK(bg.unit_count() == 16);

  PimTopology broken = ch;
  broken.simd_width = 0;
  CHECK_THROWS_AS(broken.validate(), ConfigError);

  EventTrace empty;
  empty.map = AddressMapping::toy_r4();
  CHECK_THROWS_AS(simulate(empty, ch, t, ContentionProfile{1.0, 4}), ConfigError);
  CHECK_THROWS_AS(simulate(empty, ch, t, ContentionProfile{0.0, 0}), ConfigError);
}

TEST_CASE("an empty trace costs nothing") {
  EventTrace tr;
  tr.map = AddressMapping::toy_r4();
  SimReport rep = simulate(tr, PimTopology::for_level(PimLevel::Channel), TimingParams{});
  CHECK(rep.total_cycles == 0);
  CHECK(rep.total_ns == 0.0);
  CHECK(rep.phase_cycles.localization == 0);
  CHECK(rep.phase_cycles.streaming == 0);
  CHECK(rep.phase_cycles.simd == 0);
  CHECK(rep.phase_cycles.reduction == 0);
  CHECK(rep.traffic.a_stream == 0);
  CHECK(rep.traffic.localization == 0);
  CHECK(rep.act_count == 0);
  CHECK(rep.bandwidth_utilization == 0.0);
}

TEST_CASE("a channel unit streams at the channel peak") {
  // 16 MiB of sequential blocks through one channel unit.  With bank groups
  // rotating under the column bits, bursts chain at tBL and the whole stream
  // should land within 10% of bytes / 19.2 GB/s.
  const std::uint64_t blocks = (16u << 20) / 64;
  EventTrace tr = make_trace(interleaved_map(), PimLevel::Channel, GemmMode::Stp,
                             {{0, seq_blocks(blocks), 0, 1, {}, true}});
  SimReport rep = simulate(tr, PimTopology::for_level(PimLevel::Channel), TimingParams{});

  CHECK(rep.traffic.a_stream == 16u << 20);
  const std::uint64_t ideal_cycles = blocks * 4;
  CHECK(rep.phase_cycles.streaming >= ideal_cycles);
  CHECK(rep.phase_cycles.streaming <= ideal_cycles + ideal_cycles / 10);

  const double ideal_ns = double(16u << 20) / 19.2;  // bytes / (GB/s) = ns
  CHECK(rep.total_ns >= 0.9 * ideal_ns);
  CHECK(rep.total_ns <= 1.1 * ideal_ns);
  CHECK(rep.bandwidth_utilization >= 0.9);
  CHECK(rep.bandwidth_utilization <= 1.0);
}

TEST_CASE("a bank group unit is paced by the long burst gap") {
  // One bank-group unit draining 256 blocks of its own group: every burst is
  // same-group, so blocks cannot chain faster than tCCDL even though the
  // channel itself could take one every tBL.
  std::vector<Addr> blocks;
  for (std::uint64_t r = 0; r < 4; ++r)
    for (std::uint64_t c = 0; c < 64; ++c) blocks.push_back(r << 17 | c << 6);
  EventTrace tr = make_trace(bus_map(), PimLevel::BankGroup, GemmMode::Stp,
                             {{0, blocks, 0, 1, {}, true}});
  SimReport rep = simulate(tr, PimTopology::for_level(PimLevel::BankGroup), TimingParams{});

  CHECK(rep.phase_cycles.streaming >= 256 * 6);
  CHECK(rep.phase_cycles.streaming <= 256 * 6 + 160);  // four row openings
  CHECK(rep.act_count == 4);
}

TEST_CASE("simd throughput follows the unit width") {
  // 512 multiply-accumulates per block on a 32-lane unit is 16 cycles per
  // block, and with bursts arriving every 4 cycles the run is compute bound.
  EventTrace tr = make_trace(interleaved_map(), PimLevel::Device, GemmMode::Stp,
                             {{0, seq_blocks(64), 512, 1, {}, true}});
  SimReport rep = simulate(tr, PimTopology::for_level(PimLevel::Device), TimingParams{});

  CHECK(rep.simd_work_cycles == 64 * 16);
  CHECK(rep.simd_work_cycles / 64 == 16);
  CHECK(rep.total_cycles >= 64 * 16 + 20);
  CHECK(rep.total_cycles <= 64 * 16 + 20 + 120);
  CHECK(rep.phase_cycles.simd + rep.phase_cycles.streaming == rep.total_cycles);
}

TEST_CASE("every kernel launch pays the pipeline depth") {
  EventTrace tr;
  tr.map = AddressMapping::toy_r4();
  tr.level = PimLevel::Channel;
  tr.pim_ids = {0};
  tr.per_pim.resize(1);
  for (int i = 0; i < 5; ++i) tr.per_pim[0].push_back({EventKind::KernelLaunch, 0, 0, 0});
  SimReport rep = simulate(tr, PimTopology::for_level(PimLevel::Channel), TimingParams{});
  CHECK(rep.total_cycles == 5 * 20);
  CHECK(rep.phase_cycles.simd == 5 * 20);
  CHECK(rep.command_bus_wait == 0);
}

TEST_CASE("buffer moves serialize unless overlap is requested") {
  EventTrace tr;
  tr.map = interleaved_map();
  tr.level = PimLevel::Channel;
  tr.pim_ids = {0};
  tr.per_pim.resize(1);
  std::vector<Event>& ev = tr.per_pim[0];
  ev.push_back({EventKind::BufferFillB, 0, 4096, 0});
  for (Addr a : seq_blocks(16)) {
    ev.push_back({EventKind::AgenStep, 0, 1, 1});
    ev.push_back({EventKind::DramBlockRead, a, 0, 0});
  }
  ev.push_back({EventKind::BufferDrainC, 0, 1024, 0});

  PimTopology topo = PimTopology::for_level(PimLevel::Channel);
  SimReport serial = simulate(tr, topo, TimingParams{});
  SimReport overlap = simulate(tr, topo, TimingParams{}, {}, SimFlags{false, true});

  CHECK(serial.phase_cycles.buffer_fill == 64 * 4);
  CHECK(serial.phase_cycles.buffer_drain == 16 * 4);
  CHECK(overlap.phase_cycles.buffer_fill == 64 * 4);
  CHECK(serial.total_cycles - overlap.total_cycles == 64 * 4 + 16 * 4);
  CHECK(serial.traffic == overlap.traffic);
  CHECK(serial.traffic.buffer_fill == 4096);
  CHECK(serial.traffic.buffer_drain == 1024);
}

TEST_CASE("localization and reduction ride the channel at their byte counts") {
  EventTrace tr;
  tr.map = AddressMapping::toy_r4();  // one channel: 16 bytes per cycle
  tr.level = PimLevel::Device;
  tr.controller.push_back({EventKind::Localize, 0, 1048576, 262144});
  tr.controller.push_back({EventKind::Reduce, 0, 4096, 1024});

  PimTopology topo = PimTopology::for_level(PimLevel::Device);
  SUBCASE("dma localization reads sources once and writes every copy") {
    tr.mode = GemmMode::Stp;
    SimReport rep = simulate(tr, topo, TimingParams{});
    CHECK(rep.phase_cycles.localization == (1048576 + 262144) / 16);
    CHECK(rep.phase_cycles.reduction == (4096 + 1024) / 16);
    CHECK(rep.traffic.localization == 1048576 + 262144);
    CHECK(rep.traffic.reduction == 4096 + 1024);
    CHECK(rep.total_cycles == rep.phase_cycles.localization + rep.phase_cycles.reduction);
    CHECK(rep.total_ns == doctest::Approx(double(rep.total_cycles) / 1.2));
  }
  SUBCASE("host-mediated copies pay a read and a write per copy") {
    tr.mode = GemmMode::Echo;
    SimReport rep = simulate(tr, topo, TimingParams{});
    CHECK(rep.phase_cycles.localization == 2 * 1048576 / 16);
    CHECK(rep.traffic.localization == 2 * 1048576);
    CHECK(rep.phase_cycles.reduction == (4096 + 1024) / 16);
  }
  SUBCASE("every region adds a row open, write recovery and close") {
    tr.mode = GemmMode::Stp;
    tr.controller[0].addr = 16;
    tr.controller[1].addr = 7;
    TimingParams t;
    std::uint64_t per_region = std::uint64_t(t.tRCD + t.tWR + t.tRP);
    SimReport rep = simulate(tr, topo, t);
    CHECK(rep.phase_cycles.localization ==
          (1048576 + 262144) / 16 + 16 * per_region);
    CHECK(rep.phase_cycles.reduction == (4096 + 1024) / 16 + 7 * per_region);
    CHECK(rep.traffic.localization == 1048576 + 262144);
  }
}

TEST_CASE("naive address generation adds only stall cycles") {
  // 64 blocks inside one DRAM row, bank groups rotating: bursts chain exactly
  // at tBL, so every bubble the naive walker injects lands on the total.
  std::vector<std::uint64_t> steps(64);
  std::uint64_t expected = 0;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    steps[i] = 1 + (i % 9);
    expected += steps[i] > 4 ? steps[i] - 4 : 0;
  }
  StreamSpec s{0, seq_blocks(64), 0, 1, steps, true};
  EventTrace tr = make_trace(interleaved_map(), PimLevel::Channel, GemmMode::Stp, {s});
  PimTopology topo = PimTopology::for_level(PimLevel::Channel);

  SimReport fast = simulate(tr, topo, TimingParams{});
  SimReport slow = simulate(tr, topo, TimingParams{}, {}, SimFlags{true, false});

  CHECK(fast.stall_cycles == 0);
  CHECK(slow.stall_cycles == expected);
  CHECK(slow.total_cycles - fast.total_cycles == expected);
  CHECK(fast.traffic == slow.traffic);
  CHECK(fast.phase_cycles.localization == slow.phase_cycles.localization);
  CHECK(fast.phase_cycles.buffer_fill == slow.phase_cycles.buffer_fill);
  CHECK(fast.act_count == slow.act_count);
}

TEST_CASE("activate pacing holds for random streams") {
  std::mt19937_64 rng(20260816);
  TimingParams t;
  for (int iter = 0; iter < 100; ++iter) {
    testutil::RandomMappingOpts opts;
    opts.total_bits = 20;
    opts.ch = 0;
    opts.rk = 1;
    opts.bg = 2;
    opts.ba = 1;
    opts.cols = 6;
    AddressMapping map = testutil::make_random_mapping(rng, opts);
    PimLevel level = iter % 2 ? PimLevel::BankGroup : PimLevel::Device;

    std::vector<StreamSpec> streams;
    std::vector<std::uint64_t> blocks_of;
    for (std::uint64_t p = 0; p < map.pim_count(level); ++p)
      streams.push_back({p, {}, 16, 1, {}, true});
    for (int i = 0; i < 200; ++i) {
      Addr a = rng() & (map.space_bytes() - 1) & ~Addr{63};
      streams[map.pim_id(a, level).value].blocks.push_back(a);
    }
    EventTrace tr = make_trace(map, level, GemmMode::Stp, streams);
    SimReport rep = simulate(tr, PimTopology::for_level(level), t);

    // Activate spacing and the four-activate window on every rank ledger.
    for (const std::vector<std::uint64_t>& acts : rep.act_times) {
      for (std::size_t i = 0; i + 1 < acts.size(); ++i)
        CHECK(acts[i + 1] - acts[i] >= std::uint64_t(t.tRRDS));
      for (std::size_t i = 0; i + 4 < acts.size(); ++i)
        CHECK(acts[i + 4] - acts[i] >= std::uint64_t(t.tFAW));
      for (std::size_t i = 0; i < acts.size(); ++i) {
        std::size_t in_window = 0;
        for (std::size_t j = i; j < acts.size() && acts[j] < acts[i] + 2 * t.tFAW; ++j)
          ++in_window;
        CHECK(in_window <= 8);
      }
    }

    // Work conservation: streaming can never beat one burst slot per block.
    std::uint64_t crit_blocks = 0;
    for (const Event& e : tr.per_pim[rep.critical_pim])
      if (e.kind == EventKind::DramBlockRead) ++crit_blocks;
    CHECK(rep.phase_cycles.streaming >= crit_blocks * t.tBL);
    CHECK(rep.bandwidth_utilization <= 1.0);
    CHECK(rep.total_cycles >= rep.phase_cycles.streaming);
  }
}

TEST_CASE("dispatch overhead orders the execution modes") {
  AddressMapping map = bus_map();
  MatrixGeometry geom;
  geom.m_rows = 256;
  geom.k_cols = 1024;
  geom.base_addr = 0;
  Eigen::MatrixXf a = random_matrix(256, 1024, 11);
  Eigen::MatrixXf b = random_matrix(1024, 4, 12);

  PimTopology topo = PimTopology::for_level(PimLevel::BankGroup, 1, 4);
  ContentionProfile busy{0.5, 4};
  TimingParams t;

  auto run = [&](GemmMode mode) {
    GemmPlan plan = make_plan(map, geom, 4, PimLevel::BankGroup, mode, 8192);
    GemmResult res = run_gemm(a, b, plan);
    return simulate(res.trace, topo, t, busy);
  };
  SimReport stp = run(GemmMode::Stp);
  SimReport echo = run(GemmMode::Echo);
  SimReport ncho = run(GemmMode::Ncho);
  SimReport pei = run(GemmMode::Pei);

  CHECK(stp.total_cycles < echo.total_cycles);
  CHECK(echo.total_cycles < pei.total_cycles);
  CHECK(stp.total_cycles < ncho.total_cycles);
  CHECK(echo.command_bus_wait >= stp.command_bus_wait);
  CHECK(pei.command_bus_wait > echo.command_bus_wait);

  // More background traffic on the bus never speeds anything up.
  GemmPlan plan = make_plan(map, geom, 4, PimLevel::BankGroup, GemmMode::Pei, 8192);
  GemmResult res = run_gemm(a, b, plan);
  SimReport calm = simulate(res.trace, topo, t, ContentionProfile{0.0, 4});
  CHECK(calm.total_cycles <= pei.total_cycles);
}

TEST_CASE("roofline points sit on the memory and compute bounds") {
  TimingParams t;
  MatrixGeometry geom;
  geom.m_rows = 1024;
  geom.k_cols = 4096;

  PimTopology ch = PimTopology::for_level(PimLevel::Channel);
  RooflinePoint p = roofline(ch, t, geom, 1);
  const double bytes = 16.0 * (1 << 20) + 4096 * 4 + 1024 * 4;
  const double flops = 2.0 * 1024 * 4096;
  CHECK(p.intensity == doctest::Approx(flops / bytes));
  CHECK(p.intensity == doctest::Approx(0.4994).epsilon(0.001));
  CHECK(p.bandwidth_gbps == doctest::Approx(2 * 19.2));
  CHECK(p.peak_gflops == doctest::Approx(2 * 256 * 1.2 * 2));
  CHECK(p.bound_gflops == doctest::Approx(p.intensity * 38.4));

  PimTopology bg = PimTopology::for_level(PimLevel::BankGroup);
  RooflinePoint q = roofline(bg, t, geom, 1);
  CHECK(q.bandwidth_gbps == doctest::Approx(16 * 19.2 * 4.0 / 6.0));
  CHECK(q.bound_gflops < q.peak_gflops);

  RooflinePoint big = roofline(bg, t, geom, 512);
  CHECK(big.bound_gflops == doctest::Approx(big.peak_gflops));

  CHECK_THROWS_AS(roofline(ch, t, geom, 0), ConfigError);
}

TEST_CASE("inconsistent traces are rejected") {
  AddressMapping map = AddressMapping::toy_r4();
  PimTopology topo = PimTopology::for_level(PimLevel::Channel);
  TimingParams t;

  EventTrace tr;
  tr.map = map;
  tr.pim_ids = {0};
  CHECK_THROWS_AS(simulate(tr, topo, t), UnreconciledTrace);  // ids without streams

  tr.per_pim.resize(1);
  tr.per_pim[0].push_back({EventKind::AgenStep, 0, 1, 1});
  CHECK_THROWS_AS(simulate(tr, topo, t), UnreconciledTrace);  // step without a read

  tr.per_pim[0].clear();
  tr.per_pim[0].push_back({EventKind::DramBlockRead, 0, 0, 0});
  tr.controller.push_back({EventKind::CommandPacket, 0, 0, 0});
  CHECK_THROWS_AS(simulate(tr, topo, t), UnreconciledTrace);  // packets outside PEI

  tr.mode = GemmMode::Pei;
  tr.controller.push_back({EventKind::CommandPacket, 64, 0, 0});
  CHECK_THROWS_AS(simulate(tr, topo, t), UnreconciledTrace);  // packet/read mismatch

  tr.controller.pop_back();
  CHECK_NOTHROW(simulate(tr, topo, t));

  EventTrace order;
  order.map = map;
  order.mode = GemmMode::Stp;
  order.controller.push_back({EventKind::Reduce, 0, 64, 64});
  order.controller.push_back({EventKind::Localize, 0, 64, 64});
  CHECK_THROWS_AS(simulate(order, topo, t), UnreconciledTrace);  // reduce before localize

  EventTrace twice;
  twice.map = map;
  twice.controller.push_back({EventKind::Localize, 0, 64, 64});
  twice.controller.push_back({EventKind::Localize, 0, 64, 64});
  CHECK_THROWS_AS(simulate(twice, topo, t), UnreconciledTrace);
}
