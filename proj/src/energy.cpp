#include "stepstone/energy.hpp"

namespace stepstone {

namespace {

constexpr double kPj = 1e-12;
constexpr double kNj = 1e-9;

std::uint64_t blocks_of(std::uint64_t bytes, std::uint64_t block_bytes) {
  return (bytes + block_bytes - 1) / block_bytes;
}

}  // namespace

double EnergyParams::scratchpad_nj(PimLevel level) const {
  switch (level) {
    case PimLevel::Channel: return scratchpad_ch_nj;
    case PimLevel::Device: return scratchpad_dv_nj;
    case PimLevel::BankGroup: return scratchpad_bg_nj;
  }
  throw ConfigError("unknown pim level");
}

void EnergyParams::validate() const {
  const double rates[] = {in_device_pj_per_bit, off_chip_pj_per_bit,
                          simd_pj_per_op,       scratchpad_ch_nj,
                          scratchpad_dv_nj,     scratchpad_bg_nj};
  for (double r : rates)
    if (!(r > 0.0)) throw ConfigError("energy rates must be positive");
}

EnergyReport energy(const SimReport& report, const EnergyParams& params,
                    PimLevel level) {
  params.validate();
  const double access_rate = level == PimLevel::BankGroup
                                 ? params.in_device_pj_per_bit
                                 : params.off_chip_pj_per_bit;
  const TrafficBytes& t = report.traffic;

  EnergyReport e;
  e.stream_j = double(t.a_stream) * 8.0 * access_rate * kPj;
  e.buffer_j = double(t.buffer_fill + t.buffer_drain) * 8.0 * access_rate * kPj;
  e.localization_j =
      double(t.localization) * 8.0 * params.off_chip_pj_per_bit * kPj;
  e.reduction_j = double(t.reduction) * 8.0 * params.off_chip_pj_per_bit * kPj;
  e.simd_j = double(report.simd_issues) * params.simd_pj_per_op * kPj;

  std::uint64_t accesses = report.simd_issues;
  if (t.buffer_fill) accesses += blocks_of(t.buffer_fill, 64);
  if (t.buffer_drain) accesses += blocks_of(t.buffer_drain, 64);
  e.scratchpad_j = double(accesses) * params.scratchpad_nj(level) * kNj;

  e.total_j = e.stream_j + e.localization_j + e.reduction_j + e.buffer_j +
              e.scratchpad_j + e.simd_j;
  if (report.mac_count)
    e.pj_per_flop = e.total_j / (2.0 * double(report.mac_count)) / kPj;
  if (report.total_ns > 0.0 && report.device_count)
    e.watts_per_device =
        e.total_j / (report.total_ns * kNj) / double(report.device_count);
  return e;
}

}  // namespace stepstone
