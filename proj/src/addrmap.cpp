#include "stepstone/addrmap.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

namespace stepstone {

namespace {

std::string hex(Addr v) {
  std::ostringstream os;
  os << "0x" << std::hex << v;
  return os.str();
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::string lower(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return s;
}

struct KindPrefix {
  const char* prefix;
  FieldKind kind;
};
constexpr KindPrefix kKindPrefixes[] = {
    {"CH", FieldKind::Channel},  {"RK", FieldKind::Rank},
    {"BG", FieldKind::BankGroup}, {"BA", FieldKind::Bank},
    {"ROW", FieldKind::Row},     {"COL", FieldKind::Column},
};

std::pair<FieldKind, int> parse_field_name(const std::string& name) {
  size_t i = 0;
  while (i < name.size() && std::isalpha(static_cast<unsigned char>(name[i]))) ++i;
  std::string prefix = name.substr(0, i);
  std::string digits = name.substr(i);
  for (const auto& kp : kKindPrefixes) {
    if (prefix != kp.prefix) continue;
    if (digits.empty()) return {kp.kind, 0};
    if (digits.find_first_not_of("0123456789") != std::string::npos || digits.size() > 2)
      throw ConfigError("bad field index in '" + name + "'");
    return {kp.kind, std::stoi(digits)};
  }
  throw ConfigError("unknown field name '" + name +
                    "' (expected CH/RK/BG/BA/ROW/COL plus an index)");
}

std::uint64_t dim_value(const DramCoord& c, FieldKind k) {
  switch (k) {
    case FieldKind::Channel: return c.channel;
    case FieldKind::Rank: return c.rank;
    case FieldKind::BankGroup: return c.bank_group;
    case FieldKind::Bank: return c.bank;
    case FieldKind::Row: return c.row;
    case FieldKind::Column: return c.column;
  }
  return 0;
}

void set_dim_bit(DramCoord& c, FieldKind k, int index, std::uint64_t bit) {
  switch (k) {
    case FieldKind::Channel: c.channel |= bit << index; break;
    case FieldKind::Rank: c.rank |= bit << index; break;
    case FieldKind::BankGroup: c.bank_group |= bit << index; break;
    case FieldKind::Bank: c.bank |= bit << index; break;
    case FieldKind::Row: c.row |= bit << index; break;
    case FieldKind::Column: c.column |= bit << index; break;
  }
}

// Position of a kind in the PIM id bit order (finer kinds first).
int id_rank(FieldKind k) {
  switch (k) {
    case FieldKind::BankGroup: return 0;
    case FieldKind::Rank: return 1;
    case FieldKind::Channel: return 2;
    default: return -1;
  }
}

bool level_includes(PimLevel level, FieldKind k) {
  switch (level) {
    case PimLevel::Channel: return k == FieldKind::Channel;
    case PimLevel::Device: return k == FieldKind::Channel || k == FieldKind::Rank;
    case PimLevel::BankGroup:
      return k == FieldKind::Channel || k == FieldKind::Rank || k == FieldKind::BankGroup;
  }
  return false;
}

}  // namespace

Addr spread_bits(Addr value, Addr mask) {
  Addr out = 0;
  int src = 0;
  for (Addr m = mask; m; m &= m - 1) {
    if (value >> src & 1) out |= m & (~m + 1);
    ++src;
  }
  return out;
}

Addr compact_bits(Addr x, Addr mask) {
  Addr out = 0;
  int dst = 0;
  for (Addr m = mask; m; m &= m - 1) {
    if (x & (m & (~m + 1))) out |= Addr{1} << dst;
    ++dst;
  }
  return out;
}

std::string_view field_kind_name(FieldKind k) {
  switch (k) {
    case FieldKind::Channel: return "channel";
    case FieldKind::Rank: return "rank";
    case FieldKind::BankGroup: return "bankgroup";
    case FieldKind::Bank: return "bank";
    case FieldKind::Row: return "row";
    case FieldKind::Column: return "column";
  }
  return "?";
}

std::string_view pim_level_name(PimLevel level) {
  switch (level) {
    case PimLevel::Channel: return "channel";
    case PimLevel::Device: return "device";
    case PimLevel::BankGroup: return "bankgroup";
  }
  return "?";
}

PimLevel parse_pim_level(std::string_view s) {
  std::string t = lower(std::string(s));
  if (t == "channel" || t == "ch") return PimLevel::Channel;
  if (t == "device" || t == "dv") return PimLevel::Device;
  if (t == "bankgroup" || t == "bank-group" || t == "bank_group" || t == "bg")
    return PimLevel::BankGroup;
  throw ConfigError("unknown PIM level '" + std::string(s) +
                    "' (expected channel, device, or bankgroup)");
}

int gf2_rank(std::vector<Addr> rows, int cols, std::vector<Addr>* inverse) {
  const int m = static_cast<int>(rows.size());
  std::vector<Addr> combo(m);
  for (int i = 0; i < m; ++i) combo[i] = Addr{1} << i;
  int rank = 0;
  for (int col = 0; col < cols && rank < m; ++col) {
    int pivot = -1;
    for (int r = rank; r < m; ++r) {
      if (rows[r] >> col & 1) {
        pivot = r;
        break;
      }
    }
    if (pivot < 0) continue;
    std::swap(rows[pivot], rows[rank]);
    std::swap(combo[pivot], combo[rank]);
    for (int r = 0; r < m; ++r) {
      if (r != rank && (rows[r] >> col & 1)) {
        rows[r] ^= rows[rank];
        combo[r] ^= combo[rank];
      }
    }
    ++rank;
  }
  if (inverse) {
    inverse->assign(cols, 0);
    if (rank == m && rank == cols) {
      for (int r = 0; r < m; ++r) {
        int col = __builtin_ctzll(rows[r]);
        (*inverse)[col] = combo[r];
      }
    }
  }
  return rank;
}

AddressMapping& AddressMapping::operator=(const AddressMapping& other) {
  if (this == &other) return *this;
  block_offset_bits_ = other.block_offset_bits_;
  total_bits_ = other.total_bits_;
  fields_ = other.fields_;
  inverse_ = other.inverse_;
  report_ = other.report_;
  for (int l = 0; l < 3; ++l) {
    level_fields_[l].clear();
    level_fields_[l].reserve(other.level_fields_[l].size());
    for (const DramField* f : other.level_fields_[l])
      level_fields_[l].push_back(fields_.data() + (f - other.fields_.data()));
  }
  return *this;
}

AddressMapping AddressMapping::from_fields(int block_offset_bits, int total_bits,
                                           std::vector<DramField> fields) {
  if (block_offset_bits < 0 || block_offset_bits > 16)
    throw ConfigError("BLOCK_OFFSET_BITS must be in [0, 16], got " +
                      std::to_string(block_offset_bits));
  if (total_bits <= block_offset_bits || total_bits > 58)
    throw ConfigError("TOTAL_BITS must be in (" + std::to_string(block_offset_bits) +
                      ", 58], got " + std::to_string(total_bits));
  AddressMapping m;
  m.block_offset_bits_ = block_offset_bits;
  m.total_bits_ = total_bits;
  m.fields_ = std::move(fields);
  m.build();
  return m;
}

void AddressMapping::build() {
  const int n = total_bits_ - block_offset_bits_;
  const Addr usable = ((Addr{1} << total_bits_) - 1) & ~(block_bytes() - 1);

  for (size_t i = 0; i < fields_.size(); ++i) {
    const DramField& f = fields_[i];
    for (size_t j = 0; j < i; ++j) {
      if (fields_[j].name == f.name)
        throw ConfigError("duplicate field '" + f.name + "'");
      if (fields_[j].kind == f.kind && fields_[j].index == f.index)
        throw ConfigError("fields '" + fields_[j].name + "' and '" + f.name +
                          "' define the same coordinate bit");
    }
    if (f.index < 0 || f.index > 57)
      throw ConfigError("field '" + f.name + "' index out of range");
    if (f.kind == FieldKind::Column && f.index < block_offset_bits_)
      throw ConfigError("field '" + f.name + "' overlaps the block offset bits (column indexes below " +
                        std::to_string(block_offset_bits_) + " pass through)");
    if (f.kind == FieldKind::Column && f.index >= total_bits_)
      throw ConfigError("field '" + f.name + "' indexes past TOTAL_BITS");
    if (f.source_mask == 0)
      throw ConfigError("field '" + f.name + "' has no source bits");
    if (f.source_mask & ~usable)
      throw ConfigError("field '" + f.name + "' sources bits outside [b" +
                        std::to_string(block_offset_bits_) + ", b" +
                        std::to_string(total_bits_ - 1) + "]");
  }

  report_ = ValidationReport{};
  report_.coord_bits = static_cast<int>(fields_.size());
  report_.phys_bits = n;

  Addr covered = 0;
  std::vector<Addr> rows(fields_.size());
  for (size_t i = 0; i < fields_.size(); ++i) {
    rows[i] = fields_[i].source_mask >> block_offset_bits_;
    covered |= fields_[i].source_mask;
  }
  for (int b = block_offset_bits_; b < total_bits_; ++b) {
    if (!(covered >> b & 1)) {
      report_.unused_bits.push_back(b);
      report_.messages.push_back("physical bit b" + std::to_string(b) +
                                 " is not sourced by any field");
    }
  }

  std::vector<Addr> inv;
  report_.rank = gf2_rank(rows, n, &inv);
  if (static_cast<int>(fields_.size()) != n)
    report_.messages.push_back("expected " + std::to_string(n) + " fields for " +
                               std::to_string(total_bits_) + " total bits, got " +
                               std::to_string(fields_.size()));
  if (report_.rank < static_cast<int>(fields_.size()))
    report_.messages.push_back("field equations are linearly dependent (rank " +
                               std::to_string(report_.rank) + " of " +
                               std::to_string(fields_.size()) + ")");
  report_.invertible =
      static_cast<int>(fields_.size()) == n && report_.rank == n;
  if (report_.invertible) {
    inverse_ = std::move(inv);
    report_.messages.push_back("mapping is invertible at " +
                               std::to_string(block_bytes()) + "B granularity");
  } else {
    inverse_.clear();
  }

  for (int lv = 0; lv < 3; ++lv) {
    level_fields_[lv].clear();
    for (const DramField& f : fields_)
      if (level_includes(static_cast<PimLevel>(lv), f.kind))
        level_fields_[lv].push_back(&f);
    std::stable_sort(level_fields_[lv].begin(), level_fields_[lv].end(),
                     [](const DramField* a, const DramField* b) {
                       if (id_rank(a->kind) != id_rank(b->kind))
                         return id_rank(a->kind) < id_rank(b->kind);
                       return a->index < b->index;
                     });
  }
}

const DramField* AddressMapping::find(std::string_view name) const {
  for (const DramField& f : fields_)
    if (f.name == name) return &f;
  return nullptr;
}

const DramField& AddressMapping::field(std::string_view name) const {
  if (const DramField* f = find(name)) return *f;
  throw UnknownField("no field named '" + std::string(name) + "'");
}

void AddressMapping::check_addr(Addr addr) const {
  if (addr >= space_bytes())
    throw AddressOutOfRange("address " + hex(addr) + " exceeds the " +
                            std::to_string(total_bits_) + "-bit address space");
}

DramCoord AddressMapping::decode(Addr addr) const {
  check_addr(addr);
  DramCoord c;
  c.column = addr & (block_bytes() - 1);
  for (const DramField& f : fields_)
    set_dim_bit(c, f.kind, f.index, static_cast<std::uint64_t>(parity64(addr & f.source_mask)));
  return c;
}

Addr AddressMapping::encode(const DramCoord& coord) const {
  if (inverse_.empty())
    throw NonInvertibleMapping("mapping is not invertible, cannot encode coordinates");

  std::uint64_t allowed[6] = {0, 0, 0, 0, 0, 0};
  allowed[static_cast<int>(FieldKind::Column)] = block_bytes() - 1;
  for (const DramField& f : fields_)
    allowed[static_cast<int>(f.kind)] |= std::uint64_t{1} << f.index;
  for (int k = 0; k < 6; ++k) {
    FieldKind kind = static_cast<FieldKind>(k);
    std::uint64_t v = dim_value(coord, kind);
    if (v & ~allowed[k])
      throw AddressOutOfRange(std::string(field_kind_name(kind)) + " value " + hex(v) +
                              " has bits outside the mapping's " +
                              std::string(field_kind_name(kind)) + " fields");
  }

  Addr vec = 0;
  for (size_t i = 0; i < fields_.size(); ++i) {
    const DramField& f = fields_[i];
    if (dim_value(coord, f.kind) >> f.index & 1) vec |= Addr{1} << i;
  }
  Addr addr = coord.column & (block_bytes() - 1);
  for (size_t j = 0; j < inverse_.size(); ++j)
    if (parity64(vec & inverse_[j])) addr |= Addr{1} << (block_offset_bits_ + j);
  return addr;
}

const std::vector<const DramField*>& AddressMapping::id_fields(PimLevel level) const {
  return level_fields_[static_cast<int>(level)];
}

int AddressMapping::pim_bits(PimLevel level) const {
  return static_cast<int>(level_fields_[static_cast<int>(level)].size());
}

PimId AddressMapping::pim_id(Addr addr, PimLevel level) const {
  check_addr(addr);
  PimId id;
  id.level = level;
  const auto& lf = level_fields_[static_cast<int>(level)];
  id.bits = static_cast<int>(lf.size());
  for (size_t i = 0; i < lf.size(); ++i)
    id.value |= static_cast<std::uint64_t>(parity64(addr & lf[i]->source_mask)) << i;
  return id;
}

int AddressMapping::id_bit_pos(PimLevel level, const DramField& f) const {
  const auto& lf = level_fields_[static_cast<int>(level)];
  for (size_t i = 0; i < lf.size(); ++i)
    if (lf[i] == &f) return static_cast<int>(i);
  return -1;
}

std::string AddressMapping::to_text() const {
  std::ostringstream os;
  os << "TOTAL_BITS = " << total_bits_ << "\n";
  os << "BLOCK_OFFSET_BITS = " << block_offset_bits_ << "\n";
  for (const DramField& f : fields_) {
    os << "FIELD " << f.name << " = XOR(";
    bool first = true;
    for (int b = 0; b < 64; ++b) {
      if (f.source_mask >> b & 1) {
        if (!first) os << ", ";
        os << "b" << b;
        first = false;
      }
    }
    os << ")\n";
  }
  return os.str();
}

AddressMapping AddressMapping::parse(std::istream& in, const std::string& origin) {
  int bo = 6, total = -1;
  bool saw_total = false;
  std::vector<DramField> fields;
  std::string line;
  int lineno = 0;
  auto fail = [&](const std::string& msg) {
    return ConfigError(origin + ":" + std::to_string(lineno) + ": " + msg);
  };

  while (std::getline(in, line)) {
    ++lineno;
    if (size_t h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;

    size_t eq = line.find('=');
    if (eq == std::string::npos) throw fail("expected '=' in '" + line + "'");
    std::string lhs = trim(line.substr(0, eq));
    std::string rhs = trim(line.substr(eq + 1));

    if (lhs == "TOTAL_BITS") {
      try {
        total = std::stoi(rhs);
      } catch (const std::exception&) {
        throw fail("TOTAL_BITS wants an integer, got '" + rhs + "'");
      }
      saw_total = true;
    } else if (lhs == "BLOCK_OFFSET_BITS") {
      try {
        bo = std::stoi(rhs);
      } catch (const std::exception&) {
        throw fail("BLOCK_OFFSET_BITS wants an integer, got '" + rhs + "'");
      }
    } else if (lhs.rfind("FIELD", 0) == 0) {
      std::string name = trim(lhs.substr(5));
      if (name.empty()) throw fail("FIELD without a name");
      if (rhs.rfind("XOR(", 0) != 0 || rhs.back() != ')')
        throw fail("field '" + name + "' wants XOR(b<i>, ...), got '" + rhs + "'");
      std::string body = rhs.substr(4, rhs.size() - 5);
      DramField f;
      f.name = name;
      try {
        std::tie(f.kind, f.index) = parse_field_name(name);
      } catch (const ConfigError& e) {
        throw fail(e.what());
      }
      std::stringstream items(body);
      std::string item;
      while (std::getline(items, item, ',')) {
        item = trim(item);
        if (item.size() < 2 || item[0] != 'b' ||
            item.find_first_not_of("0123456789", 1) != std::string::npos)
          throw fail("field '" + name + "': bad source bit '" + item + "'");
        int b = std::stoi(item.substr(1));
        if (b > 57) throw fail("field '" + name + "': source bit b" + std::to_string(b) + " too large");
        f.source_mask |= Addr{1} << b;
      }
      if (f.source_mask == 0) throw fail("field '" + name + "' has no source bits");
      fields.push_back(std::move(f));
    } else {
      throw fail("unrecognized line '" + line + "'");
    }
  }

  if (!saw_total) throw ConfigError(origin + ": missing TOTAL_BITS");
  try {
    return from_fields(bo, total, std::move(fields));
  } catch (const ConfigError& e) {
    throw ConfigError(origin + ": " + e.what());
  }
}

AddressMapping AddressMapping::parse_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open mapping file '" + path + "'");
  return parse(in, path);
}

AddressMapping AddressMapping::parse_string(const std::string& text) {
  std::istringstream in(text);
  return parse(in, "<string>");
}

AddressMapping AddressMapping::toy_r4() {
  return parse_string(
      "TOTAL_BITS = 12\n"
      "BLOCK_OFFSET_BITS = 6\n"
      "FIELD COL6 = XOR(b6)\n"
      "FIELD COL7 = XOR(b7)\n"
      "FIELD ROW0 = XOR(b8)\n"
      "FIELD ROW1 = XOR(b9)\n"
      "FIELD RK0 = XOR(b6, b10)\n"
      "FIELD RK1 = XOR(b7, b11)\n");
}

AddressMapping AddressMapping::toy_r4_large() {
  return parse_string(
      "TOTAL_BITS = 20\n"
      "BLOCK_OFFSET_BITS = 6\n"
      "FIELD COL6 = XOR(b6)\n"
      "FIELD COL7 = XOR(b7)\n"
      "FIELD ROW0 = XOR(b8)\n"
      "FIELD ROW1 = XOR(b9)\n"
      "FIELD RK0 = XOR(b6, b10)\n"
      "FIELD RK1 = XOR(b7, b11)\n"
      "FIELD ROW2 = XOR(b12)\n"
      "FIELD ROW3 = XOR(b13)\n"
      "FIELD ROW4 = XOR(b14)\n"
      "FIELD ROW5 = XOR(b15)\n"
      "FIELD ROW6 = XOR(b16)\n"
      "FIELD ROW7 = XOR(b17)\n"
      "FIELD ROW8 = XOR(b18)\n"
      "FIELD ROW9 = XOR(b19)\n");
}

AddressMapping AddressMapping::skl_ddr4() {
  return parse_string(
      "TOTAL_BITS = 34\n"
      "BLOCK_OFFSET_BITS = 6\n"
      "FIELD COL6 = XOR(b6)\n"
      "FIELD BG0 = XOR(b7, b14)\n"
      "FIELD COL7 = XOR(b8)\n"
      "FIELD COL8 = XOR(b9)\n"
      "FIELD COL9 = XOR(b10)\n"
      "FIELD COL10 = XOR(b11)\n"
      "FIELD COL11 = XOR(b12)\n"
      "FIELD CH = XOR(b8, b9, b12, b13, b18, b19)\n"
      "FIELD COL12 = XOR(b14)\n"
      "FIELD BG1 = XOR(b15, b19)\n"
      "FIELD RK = XOR(b16, b20)\n"
      "FIELD BA0 = XOR(b17)\n"
      "FIELD ROW0 = XOR(b18)\n"
      "FIELD ROW1 = XOR(b19)\n"
      "FIELD ROW2 = XOR(b20)\n"
      "FIELD BA1 = XOR(b21)\n"
      "FIELD ROW3 = XOR(b22)\n"
      "FIELD ROW4 = XOR(b23)\n"
      "FIELD ROW5 = XOR(b24)\n"
      "FIELD ROW6 = XOR(b25)\n"
      "FIELD ROW7 = XOR(b26)\n"
      "FIELD ROW8 = XOR(b27)\n"
      "FIELD ROW9 = XOR(b28)\n"
      "FIELD ROW10 = XOR(b29)\n"
      "FIELD ROW11 = XOR(b30)\n"
      "FIELD ROW12 = XOR(b31)\n"
      "FIELD ROW13 = XOR(b32)\n"
      "FIELD ROW14 = XOR(b33)\n");
}

}  // namespace stepstone
