#include "stepstone/localize.hpp"

#include <algorithm>
#include <string>

namespace stepstone {

namespace {

std::uint64_t div_ceil(std::uint64_t a, std::uint64_t b) { return (a + b - 1) / b; }

}  // namespace

const PimFootprint* LocalizationPlan::footprint(std::uint64_t pim) const {
  for (const PimFootprint& f : pims)
    if (f.pim == pim) return &f;
  return nullptr;
}

const StreamShare* LocalizationPlan::share(std::uint64_t pim, std::uint64_t group) const {
  for (const StreamShare& s : shares)
    if (s.pim == pim && s.group == group) return &s;
  return nullptr;
}

std::vector<Addr> pim_region_blocks(const AddressMapping& map, PimLevel level,
                                    std::uint64_t pim, Addr start,
                                    std::uint64_t count) {
  std::vector<ParityConstraint> cs;
  const auto& ids = map.id_fields(level);
  for (std::size_t i = 0; i < ids.size(); ++i)
    cs.push_back({ids[i]->source_mask, static_cast<int>(pim >> i & 1)});

  auto sp = AffineSpace::solve(cs, map.block_offset_bits(), map.total_bits());
  std::vector<Addr> out;
  if (sp) {
    if (sp->disjoint_masks()) {
      if (auto first = sp->min_geq(start)) {
        Addr c = sp->counter_of(*first);
        Addr n = sp->count();
        while (out.size() < count && c < n) out.push_back(sp->at_counter(c++));
      }
    } else {
      Addr a = start;
      while (out.size() < count) {
        auto nx = sp->min_geq(a);
        if (!nx) break;
        out.push_back(*nx);
        a = *nx + map.block_bytes();
      }
    }
  }
  if (out.size() < count)
    throw RegionTooSmall("address space holds only " + std::to_string(out.size()) +
                         " of " + std::to_string(count) +
                         " private blocks for pim " + std::to_string(pim));
  return out;
}

LocalizationPlan plan_localization(const AddressMapping& map, const GroupSpec& spec,
                                   const MatrixGeometry& geom, std::uint64_t batch_n,
                                   std::uint64_t scratchpad_bytes,
                                   std::uint64_t region_limit_bytes) {
  if (batch_n == 0) throw ConfigError("batch size must be at least 1");

  LocalizationPlan p;
  p.m_rows = geom.m_rows;
  p.k_cols = geom.k_cols;
  p.batch_n = batch_n;
  p.elem_bytes = geom.elem_bytes;
  p.elems_per_block = map.block_bytes() / geom.elem_bytes;

  int bo = map.block_offset_bits();
  std::uint64_t row_blocks = geom.row_pitch() >> bo;
  std::uint64_t slice_bytes = p.elems_per_block * batch_n * geom.elem_bytes;
  std::uint64_t slice_blocks = div_ceil(slice_bytes, map.block_bytes());
  std::vector<char> referenced(row_blocks, 0);

  for (std::uint64_t pim = 0; pim < map.pim_count(spec.level); ++pim) {
    std::vector<std::uint64_t> c_rows;
    std::uint64_t b_bytes = 0;
    bool any = false;
    for (std::uint64_t grp : spec.group_values) {
      AgenStream st(spec, pim, grp);
      StreamShare sh;
      sh.pim = pim;
      sh.group = grp;
      std::vector<char> seen(row_blocks, 0);
      while (auto a = st.next()) {
        auto [r, byte] = spec.layout.index_of(*a);
        std::uint64_t cb = byte >> bo;
        if (!seen[cb]) {
          seen[cb] = 1;
          referenced[cb] = 1;
          sh.b_row_blocks.push_back(cb);
        }
        if (sh.rows.empty() || sh.rows.back() != r) sh.rows.push_back(r);
        ++sh.blocks;
      }
      if (sh.blocks == 0) continue;
      any = true;
      b_bytes += sh.b_row_blocks.size() * slice_bytes;
      c_rows.insert(c_rows.end(), sh.rows.begin(), sh.rows.end());
      p.shares.push_back(std::move(sh));
    }
    if (!any) continue;
    std::sort(c_rows.begin(), c_rows.end());
    c_rows.erase(std::unique(c_rows.begin(), c_rows.end()), c_rows.end());
    PimFootprint f;
    f.pim = pim;
    f.c_rows = std::move(c_rows);
    f.b_bytes = b_bytes;
    f.c_bytes = f.c_rows.size() * batch_n * geom.elem_bytes;
    p.pims.push_back(std::move(f));
  }

  for (const PimFootprint& f : p.pims) {
    p.traffic.replication_bytes += f.b_bytes;
    p.traffic.reduction_bytes += f.c_bytes;
  }
  std::uint64_t distinct = 0;
  for (char c : referenced) distinct += c;
  p.traffic.b_source_blocks = distinct * slice_blocks;
  for (const StreamShare& sh : p.shares)
    p.traffic.b_copy_blocks += sh.b_row_blocks.size() * slice_blocks;

  Addr region_start = (spec.layout.base | spec.layout.span_mask) + map.block_bytes();
  for (PimFootprint& f : p.pims) {
    std::uint64_t fp = f.b_bytes + f.c_bytes;
    if (region_limit_bytes && fp > region_limit_bytes)
      throw RegionTooSmall("pim " + std::to_string(f.pim) + " needs " +
                           std::to_string(fp) + " bytes but the region is capped at " +
                           std::to_string(region_limit_bytes));
    f.region.pim = f.pim;
    f.region.length = fp;
    if (scratchpad_bytes && fp <= scratchpad_bytes) {
      f.region.scratchpad_resident = true;
      continue;
    }
    f.region.blocks = pim_region_blocks(map, spec.level, f.pim, region_start,
                                        div_ceil(fp, map.block_bytes()));
    f.region.base = f.region.blocks.empty() ? 0 : f.region.blocks.front();
  }
  return p;
}

std::vector<Eigen::MatrixXf> localize_b(const Eigen::MatrixXf& b,
                                        const LocalizationPlan& plan) {
  if (std::uint64_t(b.rows()) != plan.k_cols || std::uint64_t(b.cols()) != plan.batch_n)
    throw ShapeMismatch("B is " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()) + ", expected " +
                        std::to_string(plan.k_cols) + "x" +
                        std::to_string(plan.batch_n));

  std::vector<Eigen::MatrixXf> out;
  std::uint64_t epb = plan.elems_per_block;
  for (const PimFootprint& f : plan.pims) {
    std::uint64_t rows = f.b_bytes / (plan.batch_n * plan.elem_bytes);
    Eigen::MatrixXf buf(rows, plan.batch_n);
    std::uint64_t at = 0;
    for (const StreamShare& sh : plan.shares) {
      if (sh.pim != f.pim) continue;
      for (std::uint64_t cb : sh.b_row_blocks) {
        buf.middleRows(at, epb) = b.middleRows(cb * epb, epb);
        at += epb;
      }
    }
    out.push_back(std::move(buf));
  }
  return out;
}

std::vector<Eigen::MatrixXf> make_c_partials(const LocalizationPlan& plan) {
  std::vector<Eigen::MatrixXf> out;
  for (const PimFootprint& f : plan.pims)
    out.push_back(Eigen::MatrixXf::Zero(f.c_rows.size(), plan.batch_n));
  return out;
}

Eigen::MatrixXf reduce_c(const std::vector<Eigen::MatrixXf>& partials,
                         const LocalizationPlan& plan) {
  if (partials.size() != plan.pims.size())
    throw MissingPartial("got " + std::to_string(partials.size()) +
                         " partials for " + std::to_string(plan.pims.size()) +
                         " active pims");
  Eigen::MatrixXf c = Eigen::MatrixXf::Zero(plan.m_rows, plan.batch_n);
  for (std::size_t i = 0; i < plan.pims.size(); ++i) {
    const PimFootprint& f = plan.pims[i];
    const Eigen::MatrixXf& part = partials[i];
    if (std::uint64_t(part.rows()) != f.c_rows.size() ||
        std::uint64_t(part.cols()) != plan.batch_n)
      throw ShapeMismatch("partial for pim " + std::to_string(f.pim) + " is " +
                          std::to_string(part.rows()) + "x" +
                          std::to_string(part.cols()));
    for (std::size_t r = 0; r < f.c_rows.size(); ++r)
      c.row(f.c_rows[r]) += part.row(r);
  }
  return c;
}

}  // namespace stepstone
