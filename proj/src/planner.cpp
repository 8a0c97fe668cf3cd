#include "stepstone/planner.hpp"

#include <algorithm>
#include <optional>
#include <set>

#include "stepstone/localize.hpp"

namespace stepstone {

namespace {

// OS page frames fix nothing below this bit, so layouts cannot pin there.
constexpr int kMinPinBit = 12;
constexpr std::uint64_t kHugeGranularity = std::uint64_t{2} << 20;
constexpr std::size_t kViolationDetailCap = 8;

std::uint64_t reach_of(const AddressMapping& map, const MatrixGeometry& geom,
                       PimLevel level) {
  try {
    return derive_groups(map, geom, level).num_active_pims();
  } catch (const Error&) {
    return 0;
  }
}

bool has_pin(const std::vector<std::pair<int, int>>& pins, int bit) {
  for (const auto& [b, v] : pins)
    if (b == bit) return true;
  return false;
}

MatrixGeometry with_pins(const MatrixGeometry& geom,
                         std::vector<std::pair<int, int>> pins) {
  MatrixGeometry g = geom;
  std::sort(pins.begin(), pins.end());
  g.pinned_bits = std::move(pins);
  return g;
}

// Greedy: pin the lowest legal bit that raises the active count, restart, and
// stop once the level's full population answers or no single pin helps.
MatrixGeometry full_layout(const AddressMapping& map, const MatrixGeometry& geom,
                           PimLevel level, std::uint64_t& reach) {
  MatrixGeometry cur = geom;
  reach = reach_of(map, cur, level);
  const std::uint64_t want = map.pim_count(level);
  bool improved = true;
  while (reach < want && improved) {
    improved = false;
    for (int b = kMinPinBit; b < map.total_bits(); ++b) {
      if (has_pin(cur.pinned_bits, b)) continue;
      std::vector<std::pair<int, int>> pins = cur.pinned_bits;
      pins.emplace_back(b, 0);
      MatrixGeometry trial = with_pins(cur, std::move(pins));
      std::uint64_t r = reach_of(map, trial, level);
      if (r > reach) {
        cur = std::move(trial);
        reach = r;
        improved = true;
        break;
      }
    }
  }
  return cur;
}

// Pinnable physical bits feeding the level's id fields, ascending.
std::vector<int> pin_pool(const AddressMapping& map, PimLevel level) {
  std::set<int> bits;
  for (const DramField* f : map.id_fields(level))
    for (int b = kMinPinBit; b < map.total_bits(); ++b)
      if ((f->source_mask >> b) & 1) bits.insert(b);
  return {bits.begin(), bits.end()};
}

// Smallest pin sets first, bits ascending within a size, so the search lands
// on the layout with the fewest and lowest pins that hits the target count.
std::optional<MatrixGeometry> subset_layout(const AddressMapping& map,
                                            const MatrixGeometry& geom,
                                            const MatrixGeometry& full_geom,
                                            PimLevel level,
                                            std::uint64_t target) {
  std::vector<std::vector<std::pair<int, int>>> bases;
  bases.push_back(geom.pinned_bits);
  if (full_geom.pinned_bits != geom.pinned_bits)
    bases.push_back(full_geom.pinned_bits);

  const std::vector<int> pool = pin_pool(map, level);
  const int max_extra = 4;
  for (int k = 0; k <= max_extra; ++k) {
    for (const auto& base : bases) {
      std::vector<int> avail;
      for (int b : pool)
        if (!has_pin(base, b)) avail.push_back(b);
      if (static_cast<int>(avail.size()) < k) continue;

      std::vector<int> idx(k);
      for (int i = 0; i < k; ++i) idx[i] = i;
      while (true) {
        std::vector<std::pair<int, int>> pins = base;
        for (int i : idx) pins.emplace_back(avail[i], 0);
        MatrixGeometry trial = with_pins(geom, std::move(pins));
        if (reach_of(map, trial, level) == target) return trial;

        int i = k - 1;
        while (i >= 0 && idx[i] == static_cast<int>(avail.size()) - k + i) --i;
        if (i < 0) break;
        ++idx[i];
        for (int j = i + 1; j < k; ++j) idx[j] = idx[j - 1] + 1;
      }
    }
  }
  return std::nullopt;
}

int coarse_rank(PimLevel level) {
  switch (level) {
    case PimLevel::Channel: return 0;
    case PimLevel::Device: return 1;
    case PimLevel::BankGroup: return 2;
  }
  return 3;
}

// Full-set distribution volumes at one level, measured on the realized layout.
struct LevelBasis {
  bool valid = false;
  std::string note;
  MatrixGeometry all_geom;
  std::uint64_t reach = 0;
  std::vector<std::uint64_t> all_ids;
  double replication_bytes = 0.0;
  double source_bytes = 0.0;
  double reduction_bytes = 0.0;
  double final_bytes = 0.0;
  double localize_regions = 0.0;
  double reduce_regions = 0.0;
};

LevelBasis make_basis(const AddressMapping& map, const MatrixGeometry& geom,
                      PimLevel level, std::uint64_t batch_n,
                      const PimTopology& topo) {
  LevelBasis basis;
  basis.all_geom = full_layout(map, geom, level, basis.reach);
  if (basis.reach == 0) {
    basis.note = "no layout reaches any unit at this level";
    return basis;
  }
  try {
    GroupSpec spec = derive_groups(map, basis.all_geom, level);
    PimTopology unit = PimTopology::for_level(level, topo.channels,
                                              topo.ranks_per_channel);
    LocalizationPlan loc = plan_localization(map, spec, basis.all_geom, batch_n,
                                             unit.scratchpad_bytes);
    basis.all_ids = spec.active_ids;
    basis.replication_bytes = double(loc.traffic.replication_bytes);
    basis.source_bytes = double(loc.traffic.b_source_blocks) * map.block_bytes();
    basis.reduction_bytes = double(loc.traffic.reduction_bytes);
    basis.final_bytes = double(geom.m_rows * batch_n * geom.elem_bytes);
    basis.localize_regions = double(loc.shares.size());
    basis.reduce_regions = double(loc.pims.size());
    basis.valid = true;
  } catch (const Error& e) {
    basis.note = e.what();
  }
  return basis;
}

// First-order time estimate, in memory clocks, of one candidate.  Movement
// phases ride the aggregate channel bandwidth; streaming runs at the level's
// per-unit burst gap; arithmetic runs at the unit width, capped at the
// bandwidth-to-compute provisioning of a device-level unit because a wider
// engine cannot be fed past its stream rate.  Subsets scale the distribution
// volumes and region counts by the active fraction while the gather volume
// (every unit's partials still return) stays whole.  Buffer recirculation
// inside a unit is deliberately absent: it does not cross unit boundaries.
PlanCandidate estimate(const AddressMapping& map, const MatrixGeometry& geom,
                       std::uint64_t batch_n, const PimTopology& topo,
                       const PlannerOptions& opts, const LevelBasis& basis,
                       PimLevel level, std::uint64_t denom) {
  PlanCandidate cand;
  cand.level = level;
  cand.subset_denominator = denom;
  if (!basis.valid) {
    cand.note = basis.note;
    return cand;
  }
  if (basis.reach % denom != 0 || basis.reach < denom) {
    cand.note = "active units do not divide by " + std::to_string(denom);
    return cand;
  }
  cand.active_pims = basis.reach / denom;

  if (denom == 1) {
    cand.pinned_bits = basis.all_geom.pinned_bits;
    cand.subset_ids = basis.all_ids;
  } else {
    std::optional<MatrixGeometry> sub =
        subset_layout(map, geom, basis.all_geom, level, cand.active_pims);
    if (!sub) {
      cand.note = "no pinned layout lands on " +
                  std::to_string(cand.active_pims) + " units";
      return cand;
    }
    cand.pinned_bits = sub->pinned_bits;
    cand.subset_ids = derive_groups(map, *sub, level).active_ids;
  }

  const TimingParams& t = opts.timing;
  const double block = double(map.block_bytes());
  const double channel_rate = double(map.pim_count(PimLevel::Channel)) * block /
                              t.tBL;
  const double region_cycles = double(t.tRCD) + t.tWR + t.tRP;
  const double frac = 1.0 / double(denom);
  const double gap = level == PimLevel::BankGroup ? t.tCCDL : t.tBL;

  PimTopology unit =
      PimTopology::for_level(level, topo.channels, topo.ranks_per_channel);
  PimTopology device =
      PimTopology::for_level(PimLevel::Device, topo.channels,
                             topo.ranks_per_channel);
  const double feed_cap = device.simd_width * double(t.tBL) / gap;
  const double eff_width = std::min(double(unit.simd_width), feed_cap);

  const double active = double(cand.active_pims);
  const double macs =
      double(geom.m_rows) * double(geom.k_cols) * double(batch_n);

  cand.localization_cycles =
      (basis.replication_bytes * frac + basis.source_bytes) / channel_rate +
      basis.localize_regions * frac * region_cycles;
  cand.reduction_cycles =
      (basis.reduction_bytes + basis.final_bytes) / channel_rate +
      basis.reduce_regions * frac * region_cycles;
  cand.stream_cycles = double(geom.bytes()) / active * gap / block;
  cand.simd_cycles = macs / (active * eff_width) *
                     (t.memory_clock_ghz() / topo.clock_ghz);
  cand.total_cycles = cand.localization_cycles + cand.stream_cycles +
                      cand.simd_cycles + cand.reduction_cycles;
  cand.total_ns = cand.total_cycles / t.memory_clock_ghz();
  cand.feasible = true;
  return cand;
}

}  // namespace

LevelChoice choose_level(const AddressMapping& map, const MatrixGeometry& geom,
                         std::uint64_t batch_n, const PimTopology& topo,
                         const PlannerOptions& opts) {
  opts.timing.validate();
  topo.validate();
  if (batch_n == 0) throw ConfigError("choose_level: batch_n must be positive");

  std::vector<std::uint64_t> denoms = {1, 2};
  if (opts.quarters) denoms.push_back(4);

  LevelChoice choice;
  const PimLevel levels[] = {PimLevel::Channel, PimLevel::Device,
                             PimLevel::BankGroup};
  for (PimLevel level : levels) {
    LevelBasis basis = make_basis(map, geom, level, batch_n, topo);
    for (std::uint64_t denom : denoms)
      choice.table.push_back(
          estimate(map, geom, batch_n, topo, opts, basis, level, denom));
  }

  const PlanCandidate* best = nullptr;
  for (const PlanCandidate& cand : choice.table) {
    if (!cand.feasible) continue;
    if (!best) {
      best = &cand;
      continue;
    }
    if (cand.total_cycles != best->total_cycles) {
      if (cand.total_cycles < best->total_cycles) best = &cand;
      continue;
    }
    if (cand.active_pims != best->active_pims) {
      if (cand.active_pims < best->active_pims) best = &cand;
      continue;
    }
    if (coarse_rank(cand.level) < coarse_rank(best->level)) best = &cand;
  }
  if (!best)
    throw Error("choose_level: no feasible candidate for this geometry");
  choice.chosen = *best;
  return choice;
}

AllocationCheck check_allocation(const AddressMapping& map,
                                 const MatrixGeometry& geom, PimLevel level,
                                 const std::vector<std::uint64_t>& subset) {
  AllocationCheck chk;

  int min_pin = map.total_bits();
  bool bad_pin = false;
  for (const auto& [bit, value] : geom.pinned_bits) {
    min_pin = std::min(min_pin, bit);
    if (bit < kMinPinBit) {
      bad_pin = true;
      AllocationViolation v;
      v.reason = "pin at bit " + std::to_string(bit) +
                 " sits below the 4 KiB frame";
      chk.violations.push_back(std::move(v));
    }
  }
  chk.min_granularity_bytes = geom.pinned_bits.empty()
                                  ? std::uint64_t{1} << kMinPinBit
                                  : std::uint64_t{1} << (min_pin + 1);
  if (chk.min_granularity_bytes >= kHugeGranularity)
    chk.warnings.push_back(
        "allocation unit of " + std::to_string(chk.min_granularity_bytes) +
        " bytes needs huge pages");

  std::vector<std::uint64_t> claim = subset;
  std::sort(claim.begin(), claim.end());

  MatrixLayout layout;
  try {
    layout = resolve_layout(map, geom);
  } catch (const Error& e) {
    AllocationViolation v;
    v.reason = e.what();
    chk.violations.push_back(std::move(v));
    return chk;
  }

  const std::uint64_t block = map.block_bytes();
  const std::uint64_t pitch = geom.row_pitch();
  const std::uint64_t total = geom.bytes();
  for (std::uint64_t off = 0; off < total; off += block) {
    Addr addr = layout.addr_of(off / pitch, off % pitch);
    ++chk.checked_blocks;
    std::uint64_t pim = map.pim_id(addr, level).value;
    if (std::binary_search(claim.begin(), claim.end(), pim)) continue;
    ++chk.violating_blocks;
    if (chk.violations.size() < kViolationDetailCap) {
      AllocationViolation v;
      v.address = addr;
      v.pim = pim;
      v.reason = "block lands on unit " + std::to_string(pim) +
                 " outside the claimed subset";
      chk.violations.push_back(std::move(v));
    }
  }

  chk.ok = !bad_pin && chk.violating_blocks == 0 && chk.violations.empty();
  return chk;
}

}  // namespace stepstone
