#include "stepstone/timing.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <unordered_map>
#include <vector>

namespace stepstone {

namespace {

constexpr std::size_t kReorderWindow = 8;

std::uint64_t ceil_div(std::uint64_t a, std::uint64_t b) { return (a + b - 1) / b; }

void require(bool ok, const char* what) {
  if (!ok) throw ConfigError(what);
}

// One activate ledger per (channel, rank): activates from every unit on the
// rank pass through it, spaced by tRRD and held to four per tFAW.
struct ActLedger {
  std::vector<std::uint64_t> times;
  std::uint64_t last_group = ~std::uint64_t{0};

  std::uint64_t reserve(std::uint64_t earliest, std::uint64_t group, const TimingParams& t) {
    std::uint64_t at = earliest;
    if (!times.empty()) {
      std::uint64_t rrd = group == last_group ? t.tRRDL : t.tRRDS;
      at = std::max(at, times.back() + rrd);
      if (times.size() >= 4)
        at = std::max(at, times[times.size() - 4] + std::uint64_t(t.tFAW));
    }
    times.push_back(at);
    last_group = group;
    return at;
  }
};

struct BankState {
  bool open = false;
  std::uint64_t row = 0;
  std::uint64_t last_act = 0;
  bool ever = false;
};

struct BlockDesc {
  Addr addr = 0;
  DramCoord coord;
  std::uint64_t stall = 0;
  bool gated = false;  // needs a command-bus packet before it can issue
};

struct Op {
  enum Kind { Fill, Drain, Kernel, Stream } kind = Kernel;
  std::uint64_t bytes = 0;
  std::vector<BlockDesc> blocks;
  std::uint64_t simd_unit_cycles = 0;
};

struct UnitState {
  std::vector<Op> ops;
  std::size_t op = 0;
  std::size_t next_block = 0;
  std::vector<BlockDesc> window;
  bool in_stream = false;
  std::uint64_t seg_start = 0;

  std::uint64_t cursor = 0;
  std::uint64_t last_burst = 0;
  std::uint64_t last_group = ~std::uint64_t{0};
  std::uint64_t last_rank = ~std::uint64_t{0};
  bool any_burst = false;
  std::uint64_t last_grant = 0;
  bool any_grant = false;

  std::uint64_t fill = 0, drain = 0, stream = 0, simd = 0, bus = 0, stall = 0;
  std::uint64_t simd_work = 0;
  std::uint64_t bytes = 0;

  bool done() const { return op >= ops.size(); }
};

std::uint64_t bank_key(const DramCoord& c) {
  return c.channel << 48 | c.rank << 40 | c.bank_group << 20 | c.bank;
}

std::uint64_t rank_key(const DramCoord& c) { return c.channel << 16 | c.rank; }

}  // namespace

void TimingParams::validate() const {
  const int all[] = {tBL,  tCCDS, tCCDL, tRTRS, tCL,   tRCD, tRP,  tCWL, tRAS,
                     tRC,  tRTP,  tWTRS, tWTRL, tWR,   tRRDS, tRRDL, tFAW,
                     mt_per_s, device_width_bits};
  for (int v : all) require(v > 0, "timing parameters must be positive");
  require(tRC >= tRAS + tRP, "tRC must cover tRAS + tRP");
  require(tCCDS >= tBL, "bursts cannot issue faster than the data pins drain");
  require(tCCDL >= tCCDS, "same-group burst spacing cannot beat cross-group");
  require(tRRDL >= tRRDS, "same-group activate spacing cannot beat cross-group");
  require(tFAW >= tRRDS, "the four-activate window cannot beat a single gap");
}

int PimTopology::unit_count() const {
  switch (level) {
    case PimLevel::Channel: return channels;
    case PimLevel::Device: return channels * ranks_per_channel;
    case PimLevel::BankGroup: return channels * ranks_per_channel * bank_groups;
  }
  return channels;
}

void PimTopology::validate() const {
  require(simd_width > 0, "simd width must be positive");
  require(clock_ghz > 0.0, "unit clock must be positive");
  require(pipeline_depth >= 0, "pipeline depth cannot be negative");
  require(channels > 0 && ranks_per_channel > 0 && bank_groups > 0,
          "module counts must be positive");
}

PimTopology PimTopology::for_level(PimLevel level, int channels, int ranks_per_channel) {
  PimTopology t;
  t.level = level;
  t.channels = channels;
  t.ranks_per_channel = ranks_per_channel;
  switch (level) {
    case PimLevel::Channel:
      t.simd_width = 256;
      t.scratchpad_bytes = 256 * 1024;
      break;
    case PimLevel::Device:
      t.simd_width = 32;
      t.scratchpad_bytes = 32 * 1024;
      break;
    case PimLevel::BankGroup:
      t.simd_width = 8;
      t.scratchpad_bytes = 8 * 1024;
      break;
  }
  return t;
}

SimReport simulate(const EventTrace& trace, const PimTopology& topo,
                   const TimingParams& timing, const ContentionProfile& bus,
                   const SimFlags& flags) {
  timing.validate();
  topo.validate();
  require(bus.utilization >= 0.0 && bus.utilization < 1.0,
          "bus utilization must lie in [0, 1)");
  require(bus.packet_slots > 0, "packet slots must be positive");

  if (trace.pim_ids.size() != trace.per_pim.size())
    throw UnreconciledTrace("trace lists ids and event streams of different lengths");

  const AddressMapping& map = trace.map;
  const std::uint64_t block_bytes = map.block_bytes();
  // Unit clocks to memory clocks; 1:1 at the defaults.
  const double clock_ratio = timing.memory_clock_ghz() / topo.clock_ghz;
  auto to_mem = [&](std::uint64_t unit_cycles) {
    return std::uint64_t(std::ceil(double(unit_cycles) * clock_ratio));
  };
  const std::uint64_t pipeline_mem = to_mem(std::uint64_t(topo.pipeline_depth));
  const std::uint64_t fill_block_cycles =
      trace.level == PimLevel::BankGroup ? timing.tCCDL : timing.tBL;

  const std::uint64_t channels = map.pim_count(PimLevel::Channel);
  const std::uint64_t units_per_channel =
      std::uint64_t{1} << (map.pim_bits(trace.level) - map.pim_bits(PimLevel::Channel));
  const std::uint64_t grant_interval = std::uint64_t(std::ceil(
      double(units_per_channel) * bus.packet_slots / (1.0 - bus.utilization)));

  SimReport rep;
  {
    const std::uint64_t ranks = std::uint64_t{1}
                                << (map.pim_bits(PimLevel::Device) -
                                    map.pim_bits(PimLevel::Channel));
    rep.device_count = channels * ranks * (64 / std::uint64_t(timing.device_width_bits));
  }

  // Controller events: one localization up front, one reduction at the end,
  // and in operand-push mode one packet per streamed block.
  const Event* localize = nullptr;
  const Event* reduce = nullptr;
  std::uint64_t packets = 0;
  for (std::size_t i = 0; i < trace.controller.size(); ++i) {
    const Event& e = trace.controller[i];
    switch (e.kind) {
      case EventKind::Localize:
        if (localize || i != 0)
          throw UnreconciledTrace("localization must be the single first controller event");
        localize = &e;
        break;
      case EventKind::Reduce:
        if (reduce || i + 1 != trace.controller.size())
          throw UnreconciledTrace("reduction must be the single last controller event");
        reduce = &e;
        break;
      case EventKind::CommandPacket:
        if (trace.mode != GemmMode::Pei)
          throw UnreconciledTrace("command packets outside operand-push mode");
        ++packets;
        break;
      default:
        throw UnreconciledTrace("unit event in the controller stream");
    }
  }

  // Per-unit event streams become op lists with pre-decoded block coordinates.
  std::vector<UnitState> units(trace.per_pim.size());
  std::uint64_t total_reads = 0;
  for (std::size_t i = 0; i < trace.per_pim.size(); ++i) {
    UnitState& u = units[i];
    std::vector<std::uint64_t> pending_stalls;
    std::size_t stall_head = 0;
    std::uint64_t agen_count = 0, read_count = 0;
    auto stream_op = [&]() -> Op& {
      if (u.ops.empty() || u.ops.back().kind != Op::Stream) {
        Op o;
        o.kind = Op::Stream;
        u.ops.push_back(std::move(o));
      }
      return u.ops.back();
    };
    for (const Event& e : trace.per_pim[i]) {
      switch (e.kind) {
        case EventKind::KernelLaunch: {
          Op o;
          o.kind = Op::Kernel;
          u.ops.push_back(o);
          break;
        }
        case EventKind::BufferFillB:
        case EventKind::BufferFillC: {
          Op o;
          o.kind = Op::Fill;
          o.bytes = e.count;
          u.ops.push_back(o);
          break;
        }
        case EventKind::BufferDrainC: {
          Op o;
          o.kind = Op::Drain;
          o.bytes = e.count;
          u.ops.push_back(o);
          break;
        }
        case EventKind::AgenStep: {
          ++agen_count;
          std::uint64_t naive = e.aux;
          pending_stalls.push_back(
              flags.naive_agen && naive > std::uint64_t(timing.tBL)
                  ? naive - timing.tBL
                  : 0);
          break;
        }
        case EventKind::DramBlockRead: {
          ++read_count;
          BlockDesc d;
          d.addr = e.addr;
          d.coord = map.decode(e.addr);
          if (stall_head < pending_stalls.size()) d.stall = pending_stalls[stall_head++];
          d.gated = trace.mode == GemmMode::Pei;
          stream_op().blocks.push_back(d);
          break;
        }
        case EventKind::SimdOp: {
          const std::uint64_t issues = ceil_div(e.count, std::uint64_t(topo.simd_width));
          stream_op().simd_unit_cycles += issues;
          rep.mac_count += e.count;
          rep.simd_issues += issues;
          break;
        }
        default:
          throw UnreconciledTrace("controller event in a unit stream");
      }
    }
    if (agen_count > 0 && agen_count != read_count)
      throw UnreconciledTrace("address generation steps do not match block reads");
    total_reads += read_count;
  }
  if (trace.mode == GemmMode::Pei && packets != total_reads)
    throw UnreconciledTrace("command packets do not match block reads");

  std::unordered_map<std::uint64_t, BankState> banks;
  std::map<std::uint64_t, ActLedger> ledgers;

  auto grant = [&](UnitState& u) {
    std::uint64_t g = u.any_grant ? std::max(u.cursor, u.last_grant + grant_interval)
                                  : u.cursor;
    u.bus += g - u.cursor;
    u.cursor = g;
    u.last_grant = g;
    u.any_grant = true;
  };

  auto issue_block = [&](UnitState& u, const BlockDesc& d) {
    if (d.gated) grant(u);
    const std::uint64_t before = u.cursor;
    std::uint64_t ready = u.cursor + d.stall;
    u.stall += d.stall;

    BankState& bank = banks[bank_key(d.coord)];
    std::uint64_t row_ready = ready;
    if (!bank.open || bank.row != d.coord.row) {
      std::uint64_t act_earliest = ready + (bank.open ? timing.tRP : 0);
      if (bank.ever)
        act_earliest = std::max(act_earliest, bank.last_act + std::uint64_t(timing.tRC));
      std::uint64_t act = ledgers[rank_key(d.coord)].reserve(act_earliest,
                                                             d.coord.bank_group, timing);
      bank.open = true;
      bank.row = d.coord.row;
      bank.last_act = act;
      bank.ever = true;
      row_ready = act + timing.tRCD;
    }

    std::uint64_t start = std::max(ready, row_ready);
    if (u.any_burst) {
      std::uint64_t spacing =
          d.coord.bank_group == u.last_group ? timing.tCCDL : timing.tCCDS;
      if (d.coord.rank != u.last_rank)
        spacing = std::max(spacing, std::uint64_t(timing.tBL + timing.tRTRS));
      start = std::max(start, u.last_burst + spacing);
    }
    u.cursor = start + timing.tBL;
    u.stream += u.cursor - before;
    u.last_burst = start;
    u.last_group = d.coord.bank_group;
    u.last_rank = d.coord.rank;
    u.any_burst = true;
    u.bytes += block_bytes;
  };

  // Pick the window entry that avoids a same-group burst and an unopened row.
  auto pick_block = [&](UnitState& u) -> std::size_t {
    std::size_t best = 0;
    int best_score = 100;
    for (std::size_t i = 0; i < u.window.size(); ++i) {
      const BlockDesc& d = u.window[i];
      bool diff_group = !u.any_burst || d.coord.bank_group != u.last_group;
      bool row_hit = false;
      auto it = banks.find(bank_key(d.coord));
      if (it != banks.end()) row_hit = it->second.open && it->second.row == d.coord.row;
      int score = (diff_group ? 0 : 2) + (row_hit ? 0 : 1);
      if (score < best_score) {
        best_score = score;
        best = i;
        if (score == 0) break;
      }
    }
    return best;
  };

  // Advance one unit by one step: a whole non-stream op, or one block.
  auto advance = [&](UnitState& u) {
    Op& o = u.ops[u.op];
    switch (o.kind) {
      case Op::Kernel:
        grant(u);
        u.cursor += pipeline_mem;
        u.simd += pipeline_mem;
        ++u.op;
        return;
      case Op::Fill:
      case Op::Drain: {
        std::uint64_t cycles = ceil_div(o.bytes, block_bytes) * fill_block_cycles;
        (o.kind == Op::Fill ? u.fill : u.drain) += cycles;
        if (!flags.overlap_fill) u.cursor += cycles;
        ++u.op;
        return;
      }
      case Op::Stream: {
        if (!u.in_stream) {
          u.in_stream = true;
          u.seg_start = u.cursor;
        }
        while (u.window.size() < kReorderWindow && u.next_block < o.blocks.size())
          u.window.push_back(o.blocks[u.next_block++]);
        if (!u.window.empty()) {
          std::size_t i = pick_block(u);
          BlockDesc d = u.window[i];
          u.window.erase(u.window.begin() + std::ptrdiff_t(i));
          issue_block(u, d);
          return;
        }
        // Stream exhausted: let the lagging compute catch up.
        std::uint64_t target = u.seg_start + to_mem(o.simd_unit_cycles);
        u.simd_work += to_mem(o.simd_unit_cycles);
        if (target > u.cursor) {
          u.simd += target - u.cursor;
          u.cursor = target;
        }
        u.in_stream = false;
        u.next_block = 0;
        ++u.op;
        return;
      }
    }
  };

  // Interleave the units in global time order so shared activate ledgers see
  // a consistent sequence.
  while (true) {
    UnitState* next = nullptr;
    for (UnitState& u : units)
      if (!u.done() && (!next || u.cursor < next->cursor)) next = &u;
    if (!next) break;
    advance(*next);
  }

  // Phase schedule: localization, then the grouped execution span, then the
  // reduction, each serialized behind the previous one.
  std::uint64_t loc_cycles = 0, red_cycles = 0;
  const std::uint64_t channel_bytes_per_cycle = (block_bytes / timing.tBL) * channels;
  // Each private region switch opens a fresh row for the copy stream and
  // recovers before the next: tRCD to open, tWR to settle, tRP to close.
  const std::uint64_t region_cycles =
      std::uint64_t(timing.tRCD + timing.tWR + timing.tRP);
  if (localize) {
    std::uint64_t bytes = trace.mode == GemmMode::Stp
                              ? localize->count + localize->aux
                              : 2 * localize->count;
    rep.traffic.localization = bytes;
    loc_cycles = ceil_div(bytes, channel_bytes_per_cycle) +
                 localize->addr * region_cycles;
  }
  if (reduce) {
    std::uint64_t bytes = reduce->count + reduce->aux;
    rep.traffic.reduction = bytes;
    red_cycles = ceil_div(bytes, channel_bytes_per_cycle) +
                 reduce->addr * region_cycles;
  }

  std::uint64_t span = 0;
  std::size_t critical = 0;
  for (std::size_t i = 0; i < units.size(); ++i) {
    const UnitState& u = units[i];
    if (u.cursor > span) {
      span = u.cursor;
      critical = i;
    }
    rep.stall_cycles += u.stall;
    rep.command_bus_wait += u.bus;
    rep.simd_work_cycles = std::max(rep.simd_work_cycles, u.simd_work);
    rep.traffic.a_stream += u.bytes;
  }
  for (std::size_t i = 0; i < trace.per_pim.size(); ++i)
    for (const Event& e : trace.per_pim[i]) {
      if (e.kind == EventKind::BufferFillB || e.kind == EventKind::BufferFillC)
        rep.traffic.buffer_fill += e.count;
      if (e.kind == EventKind::BufferDrainC) rep.traffic.buffer_drain += e.count;
    }

  if (!units.empty()) {
    const UnitState& u = units[critical];
    rep.phase_cycles.buffer_fill = u.fill;
    rep.phase_cycles.buffer_drain = u.drain;
    rep.phase_cycles.streaming = u.stream;
    rep.phase_cycles.simd = u.simd;
    rep.phase_cycles.command_bus = u.bus;
    rep.critical_pim = critical;
    if (u.stream > 0)
      rep.bandwidth_utilization =
          double(u.bytes) / (double(u.stream) * double(block_bytes / timing.tBL));
  }
  rep.phase_cycles.localization = loc_cycles;
  rep.phase_cycles.reduction = red_cycles;
  rep.total_cycles = loc_cycles + span + red_cycles;
  rep.total_ns = double(rep.total_cycles) / timing.memory_clock_ghz();

  for (const auto& [key, ledger] : ledgers) {
    rep.act_count += ledger.times.size();
    rep.act_times.push_back(ledger.times);
  }
  return rep;
}

RooflinePoint roofline(const PimTopology& topo, const TimingParams& timing,
                       const MatrixGeometry& geom, std::uint64_t batch_n) {
  timing.validate();
  topo.validate();
  require(batch_n >= 1, "batch size must be at least 1");

  const double a = double(geom.m_rows) * double(geom.k_cols) * geom.elem_bytes;
  const double b = double(geom.k_cols) * double(batch_n) * geom.elem_bytes;
  const double c = double(geom.m_rows) * double(batch_n) * geom.elem_bytes;
  const double flops = 2.0 * double(geom.m_rows) * double(geom.k_cols) * double(batch_n);

  RooflinePoint p;
  p.intensity = flops / (a + b + c);
  double per_unit = timing.channel_peak_gbps();
  if (topo.level == PimLevel::BankGroup)
    per_unit = per_unit * timing.tBL / timing.tCCDL;
  p.bandwidth_gbps = per_unit * topo.unit_count();
  p.peak_gflops = 2.0 * topo.simd_width * topo.clock_ghz * topo.unit_count();
  p.bound_gflops = std::min(p.peak_gflops, p.intensity * p.bandwidth_gbps);
  return p;
}

}  // namespace stepstone
