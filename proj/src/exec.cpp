#include "stepstone/exec.hpp"

#include <algorithm>
#include <utility>

#include "stepstone/agen.hpp"

namespace stepstone {

namespace {

std::vector<std::pair<std::uint64_t, std::uint64_t>> split_even(std::uint64_t total,
                                                                std::uint64_t parts) {
  std::vector<std::pair<std::uint64_t, std::uint64_t>> out;
  out.reserve(parts);
  std::uint64_t at = 0;
  for (std::uint64_t i = 0; i < parts; ++i) {
    std::uint64_t len = total / parts + (i < total % parts ? 1 : 0);
    out.emplace_back(at, at + len);
    at += len;
  }
  return out;
}

std::uint64_t count_in(const std::vector<std::uint64_t>& sorted, std::uint64_t lo,
                       std::uint64_t hi) {
  auto b = std::lower_bound(sorted.begin(), sorted.end(), lo);
  auto e = std::lower_bound(sorted.begin(), sorted.end(), hi);
  return static_cast<std::uint64_t>(e - b);
}

}  // namespace

const char* to_string(GemmMode mode) {
  switch (mode) {
    case GemmMode::Stp: return "stp";
    case GemmMode::Echo: return "echo";
    case GemmMode::Ncho: return "ncho";
    case GemmMode::Pei: return "pei";
  }
  return "?";
}

std::vector<Panel> decompose_non_pow2(std::uint64_t m, std::uint64_t k) {
  auto pieces = [](std::uint64_t v) {
    std::vector<std::uint64_t> out;
    while (v) {
      std::uint64_t p = std::uint64_t{1} << (63 - __builtin_clzll(v));
      out.push_back(p);
      v -= p;
    }
    return out;
  };
  std::vector<Panel> panels;
  std::uint64_t r0 = 0;
  for (std::uint64_t pm : pieces(m)) {
    std::uint64_t c0 = 0;
    for (std::uint64_t pk : pieces(k)) {
      panels.push_back({pm, pk, r0, c0});
      c0 += pk;
    }
    r0 += pm;
  }
  return panels;
}

std::uint64_t EventTrace::count_events(EventKind kind) const {
  std::uint64_t n = 0;
  for (const auto& v : per_pim)
    for (const Event& e : v) n += e.kind == kind;
  for (const Event& e : controller) n += e.kind == kind;
  return n;
}

std::uint64_t EventTrace::sum_counts(EventKind kind) const {
  std::uint64_t n = 0;
  for (const auto& v : per_pim)
    for (const Event& e : v)
      if (e.kind == kind) n += e.count;
  for (const Event& e : controller)
    if (e.kind == kind) n += e.count;
  return n;
}

std::uint64_t EventTrace::pim_events(std::size_t pim_index, EventKind kind) const {
  std::uint64_t n = 0;
  for (const Event& e : per_pim.at(pim_index)) n += e.kind == kind;
  return n;
}

GemmPlan make_plan(const AddressMapping& map, const MatrixGeometry& geom,
                   std::uint64_t batch_n, PimLevel level, GemmMode mode,
                   std::uint64_t scratchpad_bytes, const PlanOverrides& over) {
  GemmPlan p;
  p.map = map;
  p.geom = geom;
  p.batch_n = batch_n;
  p.level = level;
  p.mode = mode;
  p.scratchpad_budget = scratchpad_bytes;
  if (geom.m_rows % 16)
    throw InfeasiblePlan("matrix rows " + std::to_string(geom.m_rows) +
                         " are not a whole number of 16-row C blocks");
  p.spec = derive_groups(map, geom, level);
  p.loc = plan_localization(map, p.spec, geom, batch_n, scratchpad_bytes);
  p.groups = p.spec.group_values;
  const std::uint64_t elem = static_cast<std::uint64_t>(geom.elem_bytes);
  const std::uint64_t row16 = geom.m_rows / 16;
  const std::uint64_t col_blocks = geom.row_pitch() / map.block_bytes();
  const std::uint64_t epb = map.block_bytes() / elem;

  std::vector<std::vector<std::uint64_t>> share_cbs;
  share_cbs.reserve(p.loc.shares.size());
  for (const StreamShare& s : p.loc.shares) {
    share_cbs.push_back(s.b_row_blocks);
    std::sort(share_cbs.back().begin(), share_cbs.back().end());
  }

  auto c_slice = [&](std::uint64_t parts) {
    std::uint64_t worst = 0;
    for (auto [lo, hi] : split_even(row16, parts))
      for (const PimFootprint& f : p.loc.pims)
        worst = std::max(worst, count_in(f.c_rows, lo * 16, hi * 16));
    return worst * batch_n * elem;
  };
  auto b_slice = [&](std::uint64_t parts) {
    std::uint64_t worst = 0;
    for (auto [lo, hi] : split_even(col_blocks, parts))
      for (const auto& v : share_cbs) worst = std::max(worst, count_in(v, lo, hi));
    return worst * epb * batch_n * elem;
  };
  std::vector<std::uint64_t> c_memo(row16 + 1, UINT64_MAX);
  auto c_slice_memo = [&](std::uint64_t parts) {
    if (c_memo[parts] == UINT64_MAX) c_memo[parts] = c_slice(parts);
    return c_memo[parts];
  };

  std::uint64_t pr = 0;
  std::uint64_t pc = 0;
  if (over.row_partitions || over.col_partitions) {
    pr = over.row_partitions ? over.row_partitions : 1;
    pc = over.col_partitions ? over.col_partitions : 1;
    if (pr > row16 || pc > col_blocks)
      throw InfeasiblePlan("partition grid " + std::to_string(pr) + "x" +
                           std::to_string(pc) + " exceeds " + std::to_string(row16) +
                           " row blocks by " + std::to_string(col_blocks) +
                           " column blocks");
    std::uint64_t need = b_slice(pc) + c_slice_memo(pr);
    if (need > scratchpad_bytes)
      throw InfeasiblePlan("requested tiles need " + std::to_string(need) +
                           " bytes but the scratchpad holds " +
                           std::to_string(scratchpad_bytes));
  } else {
    std::uint64_t floor_need = b_slice(col_blocks) + c_slice_memo(row16);
    if (floor_need > scratchpad_bytes)
      throw InfeasiblePlan("a 16-row, single-block tile needs " +
                           std::to_string(floor_need) +
                           " bytes but the scratchpad holds " +
                           std::to_string(scratchpad_bytes));
    for (std::uint64_t cand_c = 1; !pr && cand_c <= col_blocks; ++cand_c) {
      std::uint64_t bb = b_slice(cand_c);
      if (bb + c_slice_memo(row16) > scratchpad_bytes) continue;
      for (std::uint64_t cand_r = 1; cand_r <= row16; ++cand_r) {
        if (bb + c_slice_memo(cand_r) <= scratchpad_bytes) {
          pr = cand_r;
          pc = cand_c;
          break;
        }
      }
    }
  }
  for (auto [lo, hi] : split_even(row16, pr))
    p.row_partitions.push_back({lo * 16, hi * 16});
  for (auto [lo, hi] : split_even(col_blocks, pc)) p.col_partitions.push_back({lo, hi});
  return p;
}

namespace {

// Position of row r in a pim's ascending c_rows list.
Eigen::Index row_index(const std::vector<std::uint64_t>& rows, std::uint64_t r) {
  return std::lower_bound(rows.begin(), rows.end(), r) - rows.begin();
}

// Single source of the trace shape.  mac(i, row, cb, n_lo, n_hi) fires per
// owned block, col_done(i, n) after each Ncho batch column, rows_done(i, rp)
// after each row partition; plan_trace passes no-ops, run_gemm the numerics.
template <class MacFn, class ColDoneFn, class RowsDoneFn>
EventTrace walk_plan(const GemmPlan& plan, MacFn&& mac, ColDoneFn&& col_done,
                     RowsDoneFn&& rows_done) {
  const MatrixGeometry& g = plan.geom;
  const std::uint64_t N = plan.batch_n;
  const int bo = plan.map.block_offset_bits();
  const std::uint64_t elem = static_cast<std::uint64_t>(g.elem_bytes);
  const std::uint64_t epb = plan.map.block_bytes() / elem;
  const std::uint64_t col_blocks = g.row_pitch() / plan.map.block_bytes();

  EventTrace tr;
  tr.map = plan.map;
  tr.level = plan.level;
  tr.mode = plan.mode;
  tr.batch_n = plan.batch_n;
  const std::size_t np = plan.loc.pims.size();
  tr.per_pim.resize(np);
  for (const PimFootprint& f : plan.loc.pims) tr.pim_ids.push_back(f.pim);
  tr.controller.push_back({EventKind::Localize, plan.loc.shares.size(),
                           plan.loc.traffic.replication_bytes,
                           plan.loc.traffic.b_source_blocks * plan.map.block_bytes()});

  if (plan.mode == GemmMode::Ncho) {
    struct Step {
      Addr addr = 0;
      int iters = 0;
      std::uint64_t naive = 0;
    };
    for (std::size_t i = 0; i < np; ++i) {
      const PimFootprint& f = plan.loc.pims[i];
      std::vector<ParityConstraint> cs;
      const auto& ids = plan.map.id_fields(plan.level);
      for (std::size_t bit = 0; bit < ids.size(); ++bit)
        cs.push_back({ids[bit]->source_mask, static_cast<int>(f.pim >> bit & 1)});
      for (int pos = bo; pos < plan.map.total_bits(); ++pos)
        if (!(plan.spec.layout.span_mask >> pos & 1))
          cs.push_back({Addr{1} << pos, static_cast<int>(plan.spec.layout.base >> pos & 1)});
      AgenStream st(plan.spec.layout, std::move(cs), bo, plan.map.total_bits());

      std::vector<Step> steps;
      std::vector<char> cb_seen(col_blocks, 0);
      std::uint64_t distinct_cbs = 0;
      while (auto addr = st.next()) {
        steps.push_back({*addr, st.last_iterations(), st.last_naive_steps()});
        std::uint64_t cb = plan.spec.layout.index_of(*addr).second >> bo;
        if (!cb_seen[cb]) {
          cb_seen[cb] = 1;
          ++distinct_cbs;
        }
      }

      std::vector<Event>& ev = tr.per_pim[i];
      const std::uint64_t c_count = f.c_rows.size();
      for (std::uint64_t n = 0; n < N; ++n) {
        ev.push_back({EventKind::KernelLaunch, 0, 0, 0});
        ev.push_back({EventKind::BufferFillC, 0, c_count * elem, 0});
        ev.push_back({EventKind::BufferFillB, 0, distinct_cbs * epb * elem, 0});
        for (const Step& s : steps) {
          ev.push_back({EventKind::AgenStep, 0, static_cast<std::uint64_t>(s.iters), s.naive});
          ev.push_back({EventKind::DramBlockRead, s.addr, 0, 0});
          ev.push_back({EventKind::SimdOp, 0, epb, 0});
          auto [row, byte] = plan.spec.layout.index_of(s.addr);
          mac(i, row, byte >> bo, n, n + 1);
        }
        ev.push_back({EventKind::BufferDrainC, 0, c_count * elem, 0});
        col_done(i, n);
      }
    }
    tr.controller.push_back({EventKind::Reduce, plan.loc.pims.size(),
                             plan.loc.traffic.reduction_bytes,
                             g.m_rows * plan.batch_n * g.elem_bytes});
    return tr;
  }

  for (std::size_t i = 0; i < np; ++i) {
    const PimFootprint& f = plan.loc.pims[i];
    std::vector<Event>& ev = tr.per_pim[i];
    for (const RowRange& rp : plan.row_partitions) {
      std::uint64_t c_rows_in = count_in(f.c_rows, rp.lo, rp.hi);
      ev.push_back({EventKind::BufferFillC, 0, c_rows_in * N * elem, 0});
      for (std::uint64_t grp : plan.groups) {
        const StreamShare* sh = plan.loc.share(f.pim, grp);
        if (!sh) continue;
        std::vector<std::uint64_t> cbs = sh->b_row_blocks;
        std::sort(cbs.begin(), cbs.end());
        for (const BlockRange& cp : plan.col_partitions) {
          std::uint64_t cbs_in = count_in(cbs, cp.lo, cp.hi);
          std::uint64_t fill_b = cbs_in * epb * N * elem;
          if (plan.mode == GemmMode::Stp) {
            ev.push_back({EventKind::BufferFillB, 0, fill_b, 0});
            ev.push_back({EventKind::KernelLaunch, 0, 0, 0});
            AgenStream st(plan.spec, f.pim, grp, BlockRange{rp.lo, rp.hi}, cp);
            while (auto addr = st.next()) {
              ev.push_back({EventKind::AgenStep, 0,
                            static_cast<std::uint64_t>(st.last_iterations()),
                            st.last_naive_steps()});
              ev.push_back({EventKind::DramBlockRead, *addr, 0, 0});
              ev.push_back({EventKind::SimdOp, 0, epb * N, 0});
              auto [row, byte] = plan.spec.layout.index_of(*addr);
              mac(i, row, byte >> bo, 0, N);
            }
          } else if (plan.mode == GemmMode::Echo) {
            if (!cbs_in) continue;
            ev.push_back({EventKind::BufferFillB, 0, fill_b, 0});
            auto r_lo = std::lower_bound(sh->rows.begin(), sh->rows.end(), rp.lo);
            auto r_hi = std::lower_bound(sh->rows.begin(), sh->rows.end(), rp.hi);
            for (auto it = r_lo; it != r_hi; ++it) {
              ev.push_back({EventKind::KernelLaunch, 0, 0, 0});
              AgenStream st(plan.spec, f.pim, grp, BlockRange{*it, *it + 1}, cp);
              while (auto addr = st.next()) {
                ev.push_back({EventKind::AgenStep, 0,
                              static_cast<std::uint64_t>(st.last_iterations()),
                              st.last_naive_steps()});
                ev.push_back({EventKind::DramBlockRead, *addr, 0, 0});
                ev.push_back({EventKind::SimdOp, 0, epb * N, 0});
                auto [row, byte] = plan.spec.layout.index_of(*addr);
                mac(i, row, byte >> bo, 0, N);
              }
            }
          } else {  // Pei
            AgenStream st(plan.spec, f.pim, grp, BlockRange{rp.lo, rp.hi}, cp);
            while (auto addr = st.next()) {
              tr.controller.push_back({EventKind::CommandPacket, *addr, 0, 0});
              ev.push_back({EventKind::BufferFillB, 0, epb * N * elem, 0});
              ev.push_back({EventKind::DramBlockRead, *addr, 0, 0});
              ev.push_back({EventKind::SimdOp, 0, epb * N, 0});
              auto [row, byte] = plan.spec.layout.index_of(*addr);
              mac(i, row, byte >> bo, 0, N);
            }
          }
        }
      }
      ev.push_back({EventKind::BufferDrainC, 0, c_rows_in * N * elem, 0});
      rows_done(i, rp);
    }
  }

  tr.controller.push_back({EventKind::Reduce, plan.loc.pims.size(),
                           plan.loc.traffic.reduction_bytes,
                           g.m_rows * plan.batch_n * g.elem_bytes});
  return tr;
}

}  // namespace

EventTrace plan_trace(const GemmPlan& plan) {
  return walk_plan(
      plan,
      [](std::size_t, std::uint64_t, std::uint64_t, std::uint64_t, std::uint64_t) {},
      [](std::size_t, std::uint64_t) {}, [](std::size_t, const RowRange&) {});
}

GemmResult run_gemm(const Eigen::MatrixXf& a, const Eigen::MatrixXf& b,
                    const GemmPlan& plan) {
  const MatrixGeometry& g = plan.geom;
  const std::uint64_t N = plan.batch_n;
  if (static_cast<std::uint64_t>(a.rows()) != g.m_rows ||
      static_cast<std::uint64_t>(a.cols()) != g.k_cols)
    throw PlanGeometryMismatch("A is " + std::to_string(a.rows()) + "x" +
                               std::to_string(a.cols()) + " but the plan covers " +
                               std::to_string(g.m_rows) + "x" + std::to_string(g.k_cols));
  if (static_cast<std::uint64_t>(b.rows()) != g.k_cols ||
      static_cast<std::uint64_t>(b.cols()) != N)
    throw ShapeMismatch("B is " + std::to_string(b.rows()) + "x" +
                        std::to_string(b.cols()) + " but the plan needs " +
                        std::to_string(g.k_cols) + "x" + std::to_string(N));

  const std::uint64_t epb = plan.map.block_bytes() / g.elem_bytes;
  const std::size_t np = plan.loc.pims.size();
  std::vector<Eigen::MatrixXd> acc(np);
  for (std::size_t i = 0; i < np; ++i)
    acc[i] = Eigen::MatrixXd::Zero(
        static_cast<Eigen::Index>(plan.loc.pims[i].c_rows.size()),
        static_cast<Eigen::Index>(N));
  std::vector<Eigen::MatrixXf> partials = make_c_partials(plan.loc);

  GemmResult out;
  out.trace = walk_plan(
      plan,
      [&](std::size_t i, std::uint64_t row, std::uint64_t cb, std::uint64_t n_lo,
          std::uint64_t n_hi) {
        Eigen::Index ri = row_index(plan.loc.pims[i].c_rows, row);
        for (std::uint64_t n = n_lo; n < n_hi; ++n) {
          double s = acc[i](ri, static_cast<Eigen::Index>(n));
          for (std::uint64_t j = 0; j < epb; ++j) {
            Eigen::Index k = static_cast<Eigen::Index>(cb * epb + j);
            s += static_cast<double>(a(static_cast<Eigen::Index>(row), k)) *
                 static_cast<double>(b(k, static_cast<Eigen::Index>(n)));
          }
          acc[i](ri, static_cast<Eigen::Index>(n)) = s;
        }
      },
      [&](std::size_t i, std::uint64_t n) {
        partials[i].col(static_cast<Eigen::Index>(n)) =
            acc[i].col(static_cast<Eigen::Index>(n)).cast<float>();
      },
      [&](std::size_t i, const RowRange& rp) {
        const auto& rows = plan.loc.pims[i].c_rows;
        auto lo_it = std::lower_bound(rows.begin(), rows.end(), rp.lo);
        auto hi_it = std::lower_bound(rows.begin(), rows.end(), rp.hi);
        for (auto it = lo_it; it != hi_it; ++it) {
          Eigen::Index ri = it - rows.begin();
          partials[i].row(ri) = acc[i].row(ri).cast<float>();
        }
      });
  out.c = reduce_c(partials, plan.loc);
  return out;
}

}  // namespace stepstone
