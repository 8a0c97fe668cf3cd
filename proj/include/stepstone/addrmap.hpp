#pragma once

#include <cstdint>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace stepstone {

using Addr = std::uint64_t;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct AddressOutOfRange : Error { using Error::Error; };
struct NonInvertibleMapping : Error { using Error::Error; };
struct UnknownField : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

// Deposit the low popcount(mask) bits of value into the set positions of mask.
Addr spread_bits(Addr value, Addr mask);
// Inverse of spread_bits: gather the set positions of mask into the low bits.
Addr compact_bits(Addr x, Addr mask);

inline int parity64(Addr x) { return __builtin_parityll(x); }

enum class FieldKind { Channel, Rank, BankGroup, Bank, Row, Column };

std::string_view field_kind_name(FieldKind k);

// One DRAM coordinate bit: its value is the XOR of the physical address bits
// in source_mask.  A multi-bit dimension is a set of fields sharing a kind,
// distinguished by index (bit position within the dimension value).
struct DramField {
  std::string name;
  FieldKind kind = FieldKind::Row;
  int index = 0;
  Addr source_mask = 0;
};

struct DramCoord {
  std::uint64_t channel = 0;
  std::uint64_t rank = 0;
  std::uint64_t bank_group = 0;
  std::uint64_t bank = 0;
  std::uint64_t row = 0;
  std::uint64_t column = 0;  // includes the byte-within-block offset in its low bits
};

enum class PimLevel { Channel, Device, BankGroup };

std::string_view pim_level_name(PimLevel level);
PimLevel parse_pim_level(std::string_view s);

// PIM unit identifier at a level.  Bit order is fixed: bank-group fields are
// the least significant id bits, then rank, then channel, each ascending by
// field index.  Coarser levels are suffix-truncations of finer ones.
struct PimId {
  PimLevel level = PimLevel::Channel;
  std::uint64_t value = 0;
  int bits = 0;
};

struct ValidationReport {
  bool invertible = false;
  int rank = 0;
  int coord_bits = 0;
  int phys_bits = 0;
  std::vector<int> unused_bits;       // physical bits no field sources
  std::vector<std::string> messages;  // human-readable findings
};

// XOR-based CPU physical-to-DRAM address mapping.  Each declared field is one
// coordinate bit computed as the parity of its physical source bits; the
// block-offset bits pass through untouched.  The mapping is a square GF(2)
// matrix over the block-granularity physical bits and must be invertible for
// encode() to exist.
class AddressMapping {
 public:
  AddressMapping() = default;
  // level_fields_ points into fields_, so copies re-base those pointers.
  AddressMapping(const AddressMapping& other) { *this = other; }
  AddressMapping& operator=(const AddressMapping& other);
  AddressMapping(AddressMapping&&) = default;
  AddressMapping& operator=(AddressMapping&&) = default;

  static AddressMapping from_fields(int block_offset_bits, int total_bits,
                                    std::vector<DramField> fields);
  static AddressMapping parse(std::istream& in, const std::string& origin = "<stream>");
  static AddressMapping parse_file(const std::string& path);
  static AddressMapping parse_string(const std::string& text);

  // Shipped defaults (identical to the files under configs/).
  static AddressMapping toy_r4();
  static AddressMapping toy_r4_large();
  static AddressMapping skl_ddr4();

  int block_offset_bits() const { return block_offset_bits_; }
  int total_bits() const { return total_bits_; }
  Addr block_bytes() const { return Addr{1} << block_offset_bits_; }
  Addr space_bytes() const { return Addr{1} << total_bits_; }

  const std::vector<DramField>& fields() const { return fields_; }
  const DramField& field(std::string_view name) const;
  const DramField* find(std::string_view name) const;

  DramCoord decode(Addr addr) const;
  Addr encode(const DramCoord& coord) const;

  // Fields contributing to a level's PIM id, least significant first.
  const std::vector<const DramField*>& id_fields(PimLevel level) const;
  int pim_bits(PimLevel level) const;
  std::uint64_t pim_count(PimLevel level) const { return std::uint64_t{1} << pim_bits(level); }
  PimId pim_id(Addr addr, PimLevel level) const;

  // Index of a field within the level's id-bit order, or -1.
  int id_bit_pos(PimLevel level, const DramField& f) const;

  const ValidationReport& validation() const { return report_; }
  std::string to_text() const;

 private:
  void check_addr(Addr addr) const;
  void build();

  int block_offset_bits_ = 6;
  int total_bits_ = 0;
  std::vector<DramField> fields_;
  // inverse_[j]: coordinate-vector mask whose parity yields physical bit
  // block_offset_bits_+j (coordinate bit i corresponds to fields_[i]).
  std::vector<Addr> inverse_;
  std::vector<const DramField*> level_fields_[3];
  ValidationReport report_;
};

// Gaussian elimination over GF(2); exposed for tests.  rows[i] is a bit mask
// of matrix row i.  Returns the rank; if inverse is non-null and the matrix is
// square and full rank, *inverse receives the inverse matrix rows.
int gf2_rank(std::vector<Addr> rows, int cols, std::vector<Addr>* inverse = nullptr);

}  // namespace stepstone
