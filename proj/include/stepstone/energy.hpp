#pragma once

#include <cstdint>

#include "stepstone/addrmap.hpp"
#include "stepstone/timing.hpp"

namespace stepstone {

// Energy rates for the movement and compute a simulation report counts.
// DRAM transfers are priced per bit: traffic that stays inside a device pays
// the in-device rate, traffic that crosses the device pins pays the off-chip
// rate.  SIMD work is priced per unit operation, one width-wide MAC issue,
// the same constant at every level.  Scratchpad rates are per access and
// grow toward the finer levels, which use smaller but more numerous buffers.
struct EnergyParams {
  double in_device_pj_per_bit = 11.3;
  double off_chip_pj_per_bit = 25.7;
  double simd_pj_per_op = 11.3;
  double scratchpad_ch_nj = 0.03;
  double scratchpad_dv_nj = 0.1;
  double scratchpad_bg_nj = 0.3;

  double scratchpad_nj(PimLevel level) const;
  void validate() const;  // every rate must be positive
};

// Joules by component plus the two derived figures of merit.  A flop is one
// multiply or one add, so each MAC contributes two.
struct EnergyReport {
  double stream_j = 0.0;        // A block reads
  double localization_j = 0.0;  // B replication into private regions
  double reduction_j = 0.0;     // partial C gathering
  double buffer_j = 0.0;        // scratchpad fill and drain transfers
  double scratchpad_j = 0.0;    // buffer access energy
  double simd_j = 0.0;
  double total_j = 0.0;
  double pj_per_flop = 0.0;      // 0 when the report holds no MACs
  double watts_per_device = 0.0;  // 0 when the report spans no time
};

// Prices a simulation report.  Block streams and buffer transfers stay
// in-device only for bank-group units; localization and reduction move data
// between PIMs through the host path, so they pay the off-chip rate at every
// level.  Scratchpad accesses are one per SIMD issue plus one per buffer
// block moved.
EnergyReport energy(const SimReport& report, const EnergyParams& params,
                    PimLevel level);

}  // namespace stepstone
