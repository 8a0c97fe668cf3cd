#include "stepstone/agen.hpp"

#include <algorithm>

namespace stepstone {

namespace {

int top_bit(Addr v) { return 63 - __builtin_clzll(v); }

// Bits [0, b] as a mask; b < 63.
Addr up_to(int b) { return (Addr{2} << b) - 1; }

}  // namespace

std::optional<AffineSpace> AffineSpace::solve(const std::vector<ParityConstraint>& cs,
                                              int block_offset_bits, int total_bits) {
  AffineSpace sp;
  sp.bo_ = block_offset_bits;
  sp.total_ = total_bits;
  sp.basis_by_top_.assign(64, 0);

  for (ParityConstraint c : cs) {
    for (std::size_t i = 0; i < sp.reduced_.size(); ++i) {
      if (c.mask & sp.pivots_[i]) {
        c.mask ^= sp.reduced_[i].mask;
        c.target ^= sp.reduced_[i].target;
      }
    }
    if (!c.mask) {
      if (c.target) return std::nullopt;
      continue;
    }
    Addr pivot = c.mask & (~c.mask + 1);
    for (std::size_t i = 0; i < sp.reduced_.size(); ++i) {
      if (sp.reduced_[i].mask & pivot) {
        sp.reduced_[i].mask ^= c.mask;
        sp.reduced_[i].target ^= c.target;
      }
    }
    sp.reduced_.push_back(c);
    sp.pivots_.push_back(pivot);
  }

  sp.free_mask_ = 0;
  for (int b = sp.bo_; b < sp.total_; ++b) sp.free_mask_ |= Addr{1} << b;
  for (Addr p : sp.pivots_) sp.free_mask_ &= ~p;

  // Ascending counter enumeration needs every dependent bit to sit below the
  // free bits it is computed from.
  sp.disjoint_ = true;
  for (std::size_t i = 0; i < sp.reduced_.size(); ++i) {
    Addr low = sp.reduced_[i].mask & (~sp.reduced_[i].mask + 1);
    if (low != sp.pivots_[i]) sp.disjoint_ = false;
  }

  for (int f = sp.bo_; f < sp.total_; ++f) {
    if (!(sp.free_mask_ >> f & 1)) continue;
    Addr v = Addr{1} << f;
    for (std::size_t i = 0; i < sp.reduced_.size(); ++i)
      if (sp.reduced_[i].mask >> f & 1) v |= sp.pivots_[i];
    while (v) {
      int t = top_bit(v);
      if (!sp.basis_by_top_[t]) {
        sp.basis_by_top_[t] = v;
        break;
      }
      v ^= sp.basis_by_top_[t];
    }
  }

  sp.particular_ = sp.at_counter(0);
  return sp;
}

Addr AffineSpace::at_counter(Addr counter) const {
  Addr a = spread_bits(counter, free_mask_);
  for (std::size_t i = 0; i < reduced_.size(); ++i) {
    int bit = reduced_[i].target ^ parity64(a & (reduced_[i].mask ^ pivots_[i]));
    if (bit) a |= pivots_[i];
  }
  return a;
}

Addr AffineSpace::min_element() const { return *min_geq(0); }

std::optional<Addr> AffineSpace::min_geq(Addr x) const {
  if (total_ < 64 && (x >> total_)) return std::nullopt;
  Addr cur = particular_;
  std::optional<Addr> best;
  for (int b = total_ - 1; b >= 0; --b) {
    Addr vb = basis_by_top_[b];
    int xb = static_cast<int>(x >> b & 1);
    int cb = static_cast<int>(cur >> b & 1);
    if (vb) {
      if (xb == 0) {
        // Branch: exceed x at this bit, then take the smallest completion.
        Addr cand = cb ? cur : (cur ^ vb);
        for (int t = b - 1; t >= 0; --t)
          if (basis_by_top_[t] && (cand >> t & 1)) cand ^= basis_by_top_[t];
        best = cand;
      }
      if (cb != xb) cur ^= vb;
    } else if (cb != xb) {
      if (cb > xb) {
        // Prefix already exceeds x; smallest completion wins outright.
        for (int t = b - 1; t >= 0; --t)
          if (basis_by_top_[t] && (cur >> t & 1)) cur ^= basis_by_top_[t];
        return cur;
      }
      return best;
    }
  }
  return cur;
}

std::optional<std::vector<ParityConstraint>> stream_constraints(
    const GroupSpec& spec, std::uint64_t pim, std::uint64_t group) {
  std::vector<ParityConstraint> cs;
  int tuple_pos = 0;
  for (const IdFieldSplit& sp : spec.id_splits) {
    int want = static_cast<int>(pim >> sp.id_pos & 1);
    switch (sp.role) {
      case IdFieldRole::Pinned:
        if (want != sp.base_parity) return std::nullopt;
        break;
      case IdFieldRole::ColumnInterleave:
        cs.push_back({sp.col_sources, want ^ sp.base_parity});
        break;
      case IdFieldRole::RowSelect:
        cs.push_back({sp.row_sources, want ^ sp.base_parity});
        break;
      case IdFieldRole::Group: {
        int g = static_cast<int>(group >> tuple_pos & 1);
        ++tuple_pos;
        cs.push_back({sp.row_sources, g});
        cs.push_back({sp.col_sources, want ^ sp.base_parity ^ g});
        break;
      }
    }
  }
  for (int b = spec.block_offset_bits; b < spec.total_bits; ++b) {
    Addr bit = Addr{1} << b;
    if (spec.layout.span_mask & bit) continue;
    cs.push_back({bit, static_cast<int>(spec.layout.base >> b & 1)});
  }
  return cs;
}

AgenStream::AgenStream(const GroupSpec& spec, std::uint64_t pim, std::uint64_t group,
                       BlockRange rows, BlockRange cols)
    : layout_(spec.layout), bo_(spec.block_offset_bits) {
  init_ranges(rows, cols);
  auto cs = stream_constraints(spec, pim, group);
  if (!cs) {
    done_ = true;
    return;
  }
  init_space(std::move(*cs), spec.total_bits);
}

AgenStream::AgenStream(const MatrixLayout& layout, std::vector<ParityConstraint> constraints,
                       int block_offset_bits, int total_bits, BlockRange rows, BlockRange cols)
    : layout_(layout), bo_(block_offset_bits) {
  init_ranges(rows, cols);
  init_space(std::move(constraints), total_bits);
}

void AgenStream::init_ranges(BlockRange rows, BlockRange cols) {
  block_ = Addr{1} << bo_;
  std::uint64_t m_rows = std::uint64_t{1} << layout_.row_bits;
  std::uint64_t row_blocks = layout_.row_pitch >> bo_;

  row_lo_ = rows.full() ? 0 : rows.lo;
  row_hi_ = rows.full() ? m_rows : rows.hi;
  col_lo_ = cols.full() ? 0 : cols.lo;
  col_hi_ = cols.full() ? row_blocks : cols.hi;
  if (row_lo_ >= row_hi_ || row_hi_ > m_rows)
    throw ConfigError("row range [" + std::to_string(row_lo_) + ", " +
                      std::to_string(row_hi_) + ") outside the matrix");
  if (col_lo_ >= col_hi_ || col_hi_ > row_blocks)
    throw ConfigError("column block range [" + std::to_string(col_lo_) + ", " +
                      std::to_string(col_hi_) + ") outside the row");
}

void AgenStream::init_space(std::vector<ParityConstraint> cs, int total_bits) {
  constraints_ = std::move(cs);
  space_ = AffineSpace::solve(constraints_, bo_, total_bits);
  if (!space_) {
    done_ = true;
    return;
  }
  for (const ParityConstraint& c : constraints_) affecting_ |= c.mask;
  start_ = layout_.addr_of(row_lo_, col_lo_ << bo_);
  end_ = layout_.addr_of(row_hi_ - 1, (col_hi_ - 1) << bo_);
  fast_ = space_->disjoint_masks() && col_lo_ == 0 &&
          col_hi_ == layout_.row_pitch >> bo_;
}

std::optional<Addr> AgenStream::seek(Addr from) {
  Addr a = from;
  while (true) {
    std::optional<Addr> cand = space_->min_geq(a);
    if (!cand || *cand > end_) return std::nullopt;
    auto [r, byte] = layout_.index_of(*cand);
    if (r >= row_hi_) return std::nullopt;
    if (r < row_lo_) {
      a = layout_.addr_of(row_lo_, col_lo_ << bo_);
      continue;
    }
    std::uint64_t cb = byte >> bo_;
    if (cb >= col_lo_ && cb < col_hi_) return cand;
    if (cb < col_lo_) {
      a = layout_.addr_of(r, col_lo_ << bo_);
    } else {
      if (r + 1 >= row_hi_) return std::nullopt;
      a = layout_.addr_of(r + 1, col_lo_ << bo_);
    }
  }
}

std::optional<Addr> AgenStream::next() {
  last_iters_ = 0;
  last_naive_ = 0;
  if (done_) return std::nullopt;

  std::optional<Addr> nxt;
  if (!started_) {
    started_ = true;
    nxt = seek(start_);
    if (nxt) {
      last_iters_ = correction_iterations(start_, *nxt, false);
      last_naive_ = (*nxt - start_) >> bo_;
      if (fast_) counter_ = space_->counter_of(*nxt);
    }
  } else if (fast_) {
    Addr nc = counter_ + 1;
    int free_bits = __builtin_popcountll(space_->free_mask());
    if (free_bits >= 64 || nc < (Addr{1} << free_bits)) {
      Addr cand = space_->at_counter(nc);
      if (cand <= end_) {
        nxt = cand;
        counter_ = nc;
      }
    }
    if (nxt) {
      last_iters_ = correction_iterations(cur_, *nxt, true);
      last_naive_ = (*nxt - cur_) >> bo_;
    }
  } else {
    nxt = seek(cur_ + block_);
    if (nxt) {
      last_iters_ = correction_iterations(cur_, *nxt, true);
      last_naive_ = (*nxt - cur_) >> bo_;
    }
  }

  if (!nxt) {
    done_ = true;
    return std::nullopt;
  }
  cur_ = *nxt;
  return nxt;
}

bool AgenStream::locally_fixed(int pos, int settle) const {
  Addr bit = Addr{1} << pos;
  for (const ParityConstraint& c : constraints_) {
    if (!(c.mask & bit)) continue;
    if ((c.mask & up_to(settle)) != bit) return false;
  }
  return true;
}

// Correction rounds for the transition prev -> next, from the footprint the
// carry walk leaves between the entry bit and the settling bit.  A stepping
// increment enters at the block bit even when its net effect there cancels; a
// first-address settle starts at the lowest differing bit.
int AgenStream::correction_iterations(Addr prev, Addr next, bool from_increment) const {
  Addr diff = prev ^ next;
  if (!diff) return 0;
  int settle = top_bit(diff);
  int lo = from_increment ? bo_ : __builtin_ctzll(diff);
  Addr fired = affecting_ & up_to(settle) & ~(up_to(lo) >> 1);
  if (!fired) return 0;

  int rounds = 0;
  int prev_pos = -2;
  bool prev_fixed = false;
  for (int p = lo; p <= settle; ++p) {
    if (!(fired >> p & 1)) continue;
    bool fixed = locally_fixed(p, settle);
    bool merged = false;
    if (p == prev_pos + 1) {
      if (fixed && prev_fixed) {
        merged = true;  // forwarded carry chain over locked bits
      } else {
        Addr both = (Addr{1} << p) | (Addr{1} << prev_pos);
        for (const ParityConstraint& c : constraints_)
          if ((c.mask & both) == both) merged = true;  // settle together
      }
    }
    if (!merged) ++rounds;
    prev_pos = p;
    prev_fixed = fixed;
  }
  if (!(fired >> settle & 1)) ++rounds;  // carry lands on an unconstrained bit
  return rounds;
}

int AgenStream::affecting_bits() const {
  if (!layout_.span_mask) return 0;
  return __builtin_popcountll(affecting_ & up_to(top_bit(layout_.span_mask)));
}

std::vector<Addr> AgenStream::drain(std::size_t limit) {
  std::vector<Addr> out;
  while (out.size() < limit) {
    std::optional<Addr> a = next();
    if (!a) break;
    out.push_back(*a);
  }
  return out;
}

}  // namespace stepstone
