#include <algorithm>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "stepstone/addrmap.hpp"
#include "stepstone/agen.hpp"
#include "stepstone/energy.hpp"
#include "stepstone/exec.hpp"
#include "stepstone/grouping.hpp"
#include "stepstone/localize.hpp"
#include "stepstone/planner.hpp"
#include "stepstone/timing.hpp"
#include "stepstone/workload.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace stepstone;

namespace {

// Exit codes: 0 ok, 1 config error, 2 verification failure.
struct VerificationFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, sep)) out.push_back(trim(item));
  if (!s.empty() && s.back() == sep) out.push_back("");
  return out;
}

// Raw key=value pairs in first-appearance order, layered from files and
// command-line overrides; later assignments win, the slot keeps its place.
struct ConfigStore {
  std::map<std::string, std::string> values;
  std::vector<std::string> order;

  void set(const std::string& key, const std::string& value) {
    if (!values.count(key)) order.push_back(key);
    values[key] = value;
  }

  void set_pair(const std::string& pair) {
    std::size_t eq = pair.find('=');
    if (eq == std::string::npos)
      throw ConfigError("expected key=value, got '" + pair + "'");
    std::string key = trim(pair.substr(0, eq));
    if (key.empty()) throw ConfigError("empty key in '" + pair + "'");
    set(key, trim(pair.substr(eq + 1)));
  }

  void load_file(const std::string& path, std::set<std::string>* seen = nullptr) {
    std::set<std::string> local;
    if (!seen) seen = &local;
    std::error_code ec;
    fs::path canon = fs::weakly_canonical(path, ec);
    std::string id = ec ? path : canon.string();
    if (!seen->insert(id).second)
      throw ConfigError("config file '" + path + "' includes itself");
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file '" + path + "'");
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      std::size_t hash = line.find('#');
      if (hash != std::string::npos) line.resize(hash);
      line = trim(line);
      if (line.empty()) continue;
      if (line.rfind("include ", 0) == 0) {
        fs::path inc = trim(line.substr(8));
        if (inc.is_relative()) inc = fs::path(path).parent_path() / inc;
        load_file(inc.string(), seen);
        continue;
      }
      try {
        set_pair(line);
      } catch (const ConfigError& e) {
        throw ConfigError(path + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }
};

void reject_unconsumed(const ConfigStore& store, const std::set<std::string>& touched,
                       const std::set<std::string>& extra_ok = {}) {
  std::vector<std::string> unknown;
  for (const std::string& key : store.order)
    if (!touched.count(key) && !extra_ok.count(key)) unknown.push_back(key);
  if (!unknown.empty()) {
    std::string msg = "unknown config key";
    if (unknown.size() > 1) msg += "s";
    for (const std::string& k : unknown) msg += " '" + k + "'";
    throw ConfigError(msg);
  }
}

// Typed view over a store that records every key it answers, so reports can
// echo the full effective configuration, defaults included, and unconsumed
// keys can be flagged as typos.
class Config {
 public:
  explicit Config(const ConfigStore* store) : store_(store) {}

  std::string get_str(const std::string& key, const std::string& def) {
    auto it = store_->values.find(key);
    std::string v = it == store_->values.end() ? def : it->second;
    note(key, v);
    return v;
  }

  std::uint64_t get_u64(const std::string& key, std::uint64_t def) {
    std::string v = get_str(key, std::to_string(def));
    try {
      std::size_t pos = 0;
      std::uint64_t out = std::stoull(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "' needs an unsigned integer, got '" + v + "'");
    }
  }

  double get_double(const std::string& key, double def) {
    std::ostringstream d;
    d << def;
    std::string v = get_str(key, d.str());
    try {
      std::size_t pos = 0;
      double out = std::stod(v, &pos);
      if (pos != v.size()) throw std::invalid_argument(v);
      return out;
    } catch (const std::exception&) {
      throw ConfigError("key '" + key + "' needs a number, got '" + v + "'");
    }
  }

  bool get_bool(const std::string& key, bool def) {
    std::string v = get_str(key, def ? "1" : "0");
    if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
    if (v == "0" || v == "false" || v == "no" || v == "off") return false;
    throw ConfigError("key '" + key + "' needs a boolean, got '" + v + "'");
  }

  json echo() const {
    json j = json::object();
    for (const auto& [k, v] : consulted_) j[k] = v;
    return j;
  }

  const std::set<std::string>& touched() const { return touched_; }

  void reject_unknown(const std::set<std::string>& extra_ok = {}) const {
    reject_unconsumed(*store_, touched_, extra_ok);
  }

 private:
  void note(const std::string& key, const std::string& value) {
    if (touched_.insert(key).second) consulted_.push_back({key, value});
  }

  const ConfigStore* store_;
  std::vector<std::pair<std::string, std::string>> consulted_;
  std::set<std::string> touched_;
};

GemmMode parse_mode(const std::string& s) {
  if (s == "stp") return GemmMode::Stp;
  if (s == "echo") return GemmMode::Echo;
  if (s == "ncho") return GemmMode::Ncho;
  if (s == "pei") return GemmMode::Pei;
  throw ConfigError("unknown mode '" + s + "' (expected stp, echo, ncho, or pei)");
}

std::string resolve_mapping_path(const std::string& name) {
  if (name.find('/') != std::string::npos || name.find(".map") != std::string::npos)
    return name;
  return std::string(STEPSTONE_CONFIG_DIR) + "/" + name + ".map";
}

AddressMapping mapping_from(Config& cfg) {
  return AddressMapping::parse_file(
      resolve_mapping_path(cfg.get_str("mapping", "skl-ddr4")));
}

TimingParams timing_from(Config& cfg) {
  TimingParams t;
  auto u = [&](const char* key, int& slot) {
    slot = static_cast<int>(cfg.get_u64(key, static_cast<std::uint64_t>(slot)));
  };
  u("timing.tBL", t.tBL);
  u("timing.tCCDS", t.tCCDS);
  u("timing.tCCDL", t.tCCDL);
  u("timing.tRTRS", t.tRTRS);
  u("timing.tCL", t.tCL);
  u("timing.tRCD", t.tRCD);
  u("timing.tRP", t.tRP);
  u("timing.tCWL", t.tCWL);
  u("timing.tRAS", t.tRAS);
  u("timing.tRC", t.tRC);
  u("timing.tRTP", t.tRTP);
  u("timing.tWTRS", t.tWTRS);
  u("timing.tWTRL", t.tWTRL);
  u("timing.tWR", t.tWR);
  u("timing.tRRDS", t.tRRDS);
  u("timing.tRRDL", t.tRRDL);
  u("timing.tFAW", t.tFAW);
  u("timing.mt_per_s", t.mt_per_s);
  u("timing.device_width_bits", t.device_width_bits);
  t.validate();
  return t;
}

EnergyParams energy_from(Config& cfg) {
  EnergyParams e;
  e.in_device_pj_per_bit = cfg.get_double("energy.in_device_pj_per_bit", e.in_device_pj_per_bit);
  e.off_chip_pj_per_bit = cfg.get_double("energy.off_chip_pj_per_bit", e.off_chip_pj_per_bit);
  e.simd_pj_per_op = cfg.get_double("energy.simd_pj_per_op", e.simd_pj_per_op);
  e.scratchpad_ch_nj = cfg.get_double("energy.scratchpad_ch_nj", e.scratchpad_ch_nj);
  e.scratchpad_dv_nj = cfg.get_double("energy.scratchpad_dv_nj", e.scratchpad_dv_nj);
  e.scratchpad_bg_nj = cfg.get_double("energy.scratchpad_bg_nj", e.scratchpad_bg_nj);
  e.validate();
  return e;
}

// Module counts plus per-unit overrides; 0 keeps the level default.
struct TopologyKnobs {
  int channels = 2;
  int ranks_per_channel = 2;
  double clock_ghz = 0.0;
  int pipeline_depth = 0;
  int simd_width = 0;
  std::uint64_t scratchpad_bytes = 0;

  PimTopology at(PimLevel level) const {
    PimTopology t = PimTopology::for_level(level, channels, ranks_per_channel);
    if (clock_ghz > 0.0) t.clock_ghz = clock_ghz;
    if (pipeline_depth > 0) t.pipeline_depth = pipeline_depth;
    if (simd_width > 0) t.simd_width = simd_width;
    if (scratchpad_bytes > 0) t.scratchpad_bytes = scratchpad_bytes;
    t.validate();
    return t;
  }
};

TopologyKnobs topology_from(Config& cfg) {
  TopologyKnobs k;
  k.channels = static_cast<int>(cfg.get_u64("topology.channels", 2));
  k.ranks_per_channel = static_cast<int>(cfg.get_u64("topology.ranks_per_channel", 2));
  k.clock_ghz = cfg.get_double("topology.clock_ghz", 0.0);
  k.pipeline_depth = static_cast<int>(cfg.get_u64("topology.pipeline_depth", 0));
  k.simd_width = static_cast<int>(cfg.get_u64("topology.simd_width", 0));
  k.scratchpad_bytes = cfg.get_u64("topology.scratchpad_bytes", 0);
  return k;
}

ContentionProfile bus_from(Config& cfg) {
  ContentionProfile b;
  b.utilization = cfg.get_double("bus.utilization", 0.0);
  b.packet_slots = static_cast<int>(cfg.get_u64("bus.packet_slots", 4));
  if (b.utilization < 0.0 || b.utilization >= 1.0)
    throw ConfigError("bus.utilization must be in [0, 1)");
  return b;
}

json bits_of(Addr mask) {
  json j = json::array();
  for (int b = 0; b < 64; ++b)
    if (mask >> b & 1) j.push_back(b);
  return j;
}

json pins_json(const std::vector<std::pair<int, int>>& pins) {
  json j = json::array();
  for (auto [bit, value] : pins) j.push_back({{"bit", bit}, {"value", value}});
  return j;
}

json candidate_json(const PlanCandidate& c) {
  json j;
  j["level"] = pim_level_name(c.level);
  j["subset_denominator"] = c.subset_denominator;
  j["active_pims"] = c.active_pims;
  j["feasible"] = c.feasible;
  j["note"] = c.note;
  j["pinned_bits"] = pins_json(c.pinned_bits);
  j["subset_ids"] = c.subset_ids;
  j["cycles"] = {{"localization", c.localization_cycles},
                 {"stream", c.stream_cycles},
                 {"simd", c.simd_cycles},
                 {"reduction", c.reduction_cycles},
                 {"total", c.total_cycles}};
  j["total_ns"] = c.total_ns;
  return j;
}

json sim_json(const SimReport& r) {
  json j;
  j["phase_cycles"] = {{"localization", r.phase_cycles.localization},
                       {"buffer_fill", r.phase_cycles.buffer_fill},
                       {"buffer_drain", r.phase_cycles.buffer_drain},
                       {"streaming", r.phase_cycles.streaming},
                       {"simd", r.phase_cycles.simd},
                       {"reduction", r.phase_cycles.reduction},
                       {"command_bus", r.phase_cycles.command_bus}};
  j["total_cycles"] = r.total_cycles;
  j["total_ns"] = r.total_ns;
  j["traffic_bytes"] = {{"localization", r.traffic.localization},
                        {"a_stream", r.traffic.a_stream},
                        {"buffer_fill", r.traffic.buffer_fill},
                        {"buffer_drain", r.traffic.buffer_drain},
                        {"reduction", r.traffic.reduction}};
  j["bandwidth_utilization"] = r.bandwidth_utilization;
  j["stall_cycles"] = r.stall_cycles;
  j["command_bus_wait"] = r.command_bus_wait;
  j["simd"] = {{"mac_count", r.mac_count},
               {"issues", r.simd_issues},
               {"work_cycles", r.simd_work_cycles}};
  j["act_count"] = r.act_count;
  j["device_count"] = r.device_count;
  j["critical_pim"] = r.critical_pim;
  return j;
}

json energy_json(const EnergyReport& e) {
  return {{"stream_j", e.stream_j},
          {"localization_j", e.localization_j},
          {"reduction_j", e.reduction_j},
          {"buffer_j", e.buffer_j},
          {"scratchpad_j", e.scratchpad_j},
          {"simd_j", e.simd_j},
          {"total_j", e.total_j},
          {"pj_per_flop", e.pj_per_flop},
          {"watts_per_device", e.watts_per_device}};
}

Eigen::MatrixXf random_matrix(std::uint64_t rows, std::uint64_t cols,
                              std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> dist(0.0f, 1.0f);
  Eigen::MatrixXf m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = dist(rng);
  return m;
}

struct GemmJob {
  AddressMapping map;
  MatrixGeometry geom;
  std::uint64_t n = 0;
  bool auto_level = true;
  PimLevel level = PimLevel::Channel;
  GemmMode mode = GemmMode::Stp;
  TimingParams timing;
  EnergyParams energy;
  TopologyKnobs topo;
  ContentionProfile bus;
  SimFlags flags;
  bool quarters = false;
  std::uint64_t seed = 1;
};

GemmJob job_from(Config& cfg) {
  GemmJob job;
  job.map = mapping_from(cfg);
  job.geom.m_rows = cfg.get_u64("m", 1024);
  job.geom.k_cols = cfg.get_u64("k", 4096);
  job.n = cfg.get_u64("n", 4);
  std::string level = cfg.get_str("level", "auto");
  job.auto_level = level == "auto";
  if (!job.auto_level) job.level = parse_pim_level(level);
  job.mode = parse_mode(cfg.get_str("mode", "stp"));
  job.timing = timing_from(cfg);
  job.energy = energy_from(cfg);
  job.topo = topology_from(cfg);
  job.bus = bus_from(cfg);
  job.flags.naive_agen = cfg.get_bool("naive", false);
  job.flags.overlap_fill = cfg.get_bool("overlap_fill", false);
  job.quarters = cfg.get_bool("quarters", false);
  job.seed = cfg.get_u64("seed", 1);
  return job;
}

bool pow2(std::uint64_t x) { return x && (x & (x - 1)) == 0; }

// Plan, trace, simulate and price one GEMM.  When verify is set the trace
// comes from a real execution whose result is checked against a
// double-precision reference.
json execute_gemm(const GemmJob& job, bool verify, bool dump_plan,
                  bool* verify_ok = nullptr) {
  if (!pow2(job.geom.m_rows) || !pow2(job.geom.k_cols))
    throw ConfigError("run needs power-of-two m and k; run-workload decomposes "
                      "arbitrary shapes");

  json out;
  MatrixGeometry geom = job.geom;
  PimLevel level = job.level;
  if (job.auto_level) {
    PlannerOptions popts;
    popts.timing = job.timing;
    popts.quarters = job.quarters;
    LevelChoice choice = choose_level(job.map, geom, job.n,
                                      job.topo.at(PimLevel::Channel), popts);
    level = choice.chosen.level;
    geom.pinned_bits = choice.chosen.pinned_bits;
    out["chosen"] = candidate_json(choice.chosen);
  }

  PimTopology topo = job.topo.at(level);
  GemmPlan plan = make_plan(job.map, geom, job.n, level, job.mode,
                            topo.scratchpad_bytes);
  out["level"] = pim_level_name(level);
  out["mode"] = to_string(job.mode);

  if (dump_plan) {
    json p;
    p["active_pims"] = plan.loc.pims.size();
    p["group_values"] = plan.groups;
    p["rows_per_group"] = plan.spec.rows_per_group;
    json rparts = json::array();
    for (const RowRange& r : plan.row_partitions)
      rparts.push_back({{"lo", r.lo}, {"hi", r.hi}});
    p["row_partitions"] = rparts;
    json cparts = json::array();
    for (const BlockRange& c : plan.col_partitions)
      cparts.push_back({{"lo", c.lo}, {"hi", c.hi}});
    p["col_partitions"] = cparts;
    p["pinned_bits"] = pins_json(geom.pinned_bits);
    p["localization"] = {
        {"replication_bytes", plan.loc.traffic.replication_bytes},
        {"reduction_bytes", plan.loc.traffic.reduction_bytes},
        {"b_source_blocks", plan.loc.traffic.b_source_blocks},
        {"b_copy_blocks", plan.loc.traffic.b_copy_blocks}};
    out["plan"] = p;
  }

  EventTrace trace;
  if (verify) {
    Eigen::MatrixXf a = random_matrix(geom.m_rows, geom.k_cols, job.seed);
    Eigen::MatrixXf b = random_matrix(geom.k_cols, job.n, job.seed + 1);
    GemmResult res = run_gemm(a, b, plan);
    trace = std::move(res.trace);
    Eigen::MatrixXd ref = a.cast<double>() * b.cast<double>();
    double scale = ref.cwiseAbs().maxCoeff();
    double err = (res.c.cast<double>() - ref).cwiseAbs().maxCoeff();
    double rel = scale == 0.0 ? 0.0 : err / scale;
    bool ok = rel <= 1e-4;
    out["verify"] = {{"max_rel_error", rel}, {"ok", ok}};
    if (verify_ok) *verify_ok = ok;
  } else {
    trace = plan_trace(plan);
  }

  SimReport sim = simulate(trace, topo, job.timing, job.bus, job.flags);
  EnergyReport joules = energy(sim, job.energy, level);
  RooflinePoint rp = roofline(topo, job.timing, geom, job.n);

  json s = sim_json(sim);
  for (auto& [key, val] : s.items()) out[key] = val;
  out["roofline"] = {{"x", rp.intensity}, {"y", rp.bound_gflops}};
  out["energy"] = energy_json(joules);
  return out;
}

void write_text(const std::string& path, const std::string& text) {
  if (path.empty() || path == "-") {
    std::cout << text;
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write '" + path + "'");
  out << text;
}

void emit_report(const json& j, const std::string& out_path) {
  write_text(out_path, j.dump(2) + "\n");
}

std::string csv_escape(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) {
    if (c == '"') q += '"';
    q += c;
  }
  return q + "\"";
}

// Flat row for plot emission: the headline figures of one simulated GEMM.
void gemm_csv_row(std::ostream& os, const json& rep) {
  os << rep["total_cycles"] << ',' << rep["total_ns"] << ','
     << rep["phase_cycles"]["localization"] << ','
     << rep["phase_cycles"]["buffer_fill"] << ','
     << rep["phase_cycles"]["buffer_drain"] << ','
     << rep["phase_cycles"]["streaming"] << ',' << rep["phase_cycles"]["simd"]
     << ',' << rep["phase_cycles"]["reduction"] << ','
     << rep["phase_cycles"]["command_bus"] << ',' << rep["stall_cycles"] << ','
     << rep["command_bus_wait"] << ',' << rep["bandwidth_utilization"] << ','
     << rep["energy"]["total_j"] << ',' << rep["energy"]["pj_per_flop"] << ','
     << rep["roofline"]["x"] << ',' << rep["roofline"]["y"];
}

const char* kGemmCsvColumns =
    "total_cycles,total_ns,localization_cycles,buffer_fill_cycles,"
    "buffer_drain_cycles,streaming_cycles,simd_cycles,reduction_cycles,"
    "command_bus_cycles,stall_cycles,command_bus_wait,bandwidth_utilization,"
    "energy_j,pj_per_flop,roofline_x,roofline_y";

int cmd_validate_mapping(Config& cfg, const std::string& out_path) {
  std::string name = cfg.get_str("mapping", "skl-ddr4");
  AddressMapping map = AddressMapping::parse_file(resolve_mapping_path(name));
  const ValidationReport& v = map.validation();
  cfg.reject_unknown();

  json j;
  j["command"] = "validate-mapping";
  j["config"] = cfg.echo();
  json m;
  m["total_bits"] = map.total_bits();
  m["block_offset_bits"] = map.block_offset_bits();
  m["invertible"] = v.invertible;
  m["rank"] = v.rank;
  m["coord_bits"] = v.coord_bits;
  m["phys_bits"] = v.phys_bits;
  m["unused_bits"] = v.unused_bits;
  m["messages"] = v.messages;
  m["pim_counts"] = {{"channel", map.pim_count(PimLevel::Channel)},
                     {"device", map.pim_count(PimLevel::Device)},
                     {"bankgroup", map.pim_count(PimLevel::BankGroup)}};
  json fields = json::array();
  for (const DramField& f : map.fields())
    fields.push_back({{"name", f.name},
                      {"kind", std::string(field_kind_name(f.kind))},
                      {"index", f.index},
                      {"sources", bits_of(f.source_mask)}});
  m["fields"] = fields;
  j["mapping"] = m;
  emit_report(j, out_path);
  if (!v.invertible) throw VerificationFailure("mapping is not invertible");
  return 0;
}

int cmd_plan(Config& cfg, const std::string& out_path) {
  GemmJob job = job_from(cfg);
  cfg.reject_unknown();
  PlannerOptions popts;
  popts.timing = job.timing;
  popts.quarters = job.quarters;
  LevelChoice choice = choose_level(job.map, job.geom, job.n,
                                    job.topo.at(PimLevel::Channel), popts);

  json j;
  j["command"] = "plan";
  j["config"] = cfg.echo();
  j["chosen"] = candidate_json(choice.chosen);
  json table = json::array();
  for (const PlanCandidate& c : choice.table) table.push_back(candidate_json(c));
  j["table"] = table;

  MatrixGeometry pinned = job.geom;
  pinned.pinned_bits = choice.chosen.pinned_bits;
  AllocationCheck alloc = check_allocation(job.map, pinned, choice.chosen.level,
                                           choice.chosen.subset_ids);
  json a;
  a["ok"] = alloc.ok;
  a["min_granularity_bytes"] = alloc.min_granularity_bytes;
  a["checked_blocks"] = alloc.checked_blocks;
  a["violating_blocks"] = alloc.violating_blocks;
  json viols = json::array();
  for (const AllocationViolation& v : alloc.violations)
    viols.push_back({{"address", v.address}, {"pim", v.pim}, {"reason", v.reason}});
  a["violations"] = viols;
  a["warnings"] = alloc.warnings;
  j["allocation"] = a;
  emit_report(j, out_path);
  return 0;
}

int cmd_agen_trace(Config& cfg, const std::string& out_path,
                   const std::string& plot_path) {
  GemmJob job = job_from(cfg);
  if (job.auto_level)
    throw ConfigError("agen-trace needs an explicit level, not auto");
  std::uint64_t pim = cfg.get_u64("agen.pim", 0);
  std::uint64_t group = cfg.get_u64("agen.group", 0);
  std::uint64_t limit = cfg.get_u64("agen.limit", 0);
  cfg.reject_unknown();

  if (pim >= job.map.pim_count(job.level))
    throw ConfigError("pim " + std::to_string(pim) + " is out of range (" +
                      std::to_string(job.map.pim_count(job.level)) + " units)");
  GroupSpec spec = derive_groups(job.map, job.geom, job.level);
  if (!spec.is_active(pim))
    throw ConfigError("pim " + std::to_string(pim) + " owns no block of this matrix");
  if (group >= spec.num_groups())
    throw ConfigError("group " + std::to_string(group) + " is out of range (" +
                      std::to_string(spec.num_groups()) + " groups)");

  std::ostringstream csv;
  csv << "step,address,iterations,naive_steps\n";
  AgenStream st(spec, pim, group);
  std::uint64_t steps = 0;
  std::uint64_t total_iters = 0, max_iters = 0, total_naive = 0;
  while (auto addr = st.next()) {
    csv << steps << ",0x" << std::hex << *addr << std::dec << ','
        << st.last_iterations() << ',' << st.last_naive_steps() << '\n';
    total_iters += static_cast<std::uint64_t>(st.last_iterations());
    max_iters = std::max(max_iters, static_cast<std::uint64_t>(st.last_iterations()));
    total_naive += st.last_naive_steps();
    ++steps;
    if (limit && steps >= limit) break;
  }

  json j;
  j["command"] = "agen-trace";
  j["config"] = cfg.echo();
  j["pim"] = pim;
  j["group"] = group;
  j["steps"] = steps;
  j["iterations"] = {{"total", total_iters},
                     {"max", max_iters},
                     {"mean", steps ? double(total_iters) / double(steps) : 0.0}};
  j["naive_steps"] = {{"total", total_naive},
                      {"mean", steps ? double(total_naive) / double(steps) : 0.0}};
  emit_report(j, out_path);
  if (!plot_path.empty()) write_text(plot_path, csv.str());
  return 0;
}

int cmd_run(Config& cfg, const std::string& out_path, const std::string& plot_path,
            bool verify, bool dump_plan) {
  GemmJob job = job_from(cfg);
  cfg.reject_unknown();
  bool ok = true;
  json rep = execute_gemm(job, verify, dump_plan, &ok);

  json j;
  j["command"] = "run";
  j["config"] = cfg.echo();
  j["m"] = job.geom.m_rows;
  j["k"] = job.geom.k_cols;
  j["n"] = job.n;
  for (auto& [key, val] : rep.items()) j[key] = val;
  emit_report(j, out_path);

  if (!plot_path.empty()) {
    std::ostringstream csv;
    csv << "m,k,n,level,mode," << kGemmCsvColumns << '\n';
    csv << job.geom.m_rows << ',' << job.geom.k_cols << ',' << job.n << ','
        << j["level"].get<std::string>() << ',' << to_string(job.mode) << ',';
    gemm_csv_row(csv, j);
    csv << '\n';
    write_text(plot_path, csv.str());
  }
  if (!ok) throw VerificationFailure("simulated C diverges from the reference");
  return 0;
}

WorkloadSpec workload_from(Config& cfg) {
  std::string name = cfg.get_str("workload", "dlrm-rm3");
  WorkloadSpec spec;
  if (name == "custom") {
    spec.name = name;
    std::string layers = cfg.get_str("workload.layers", "");
    if (layers.empty())
      throw ConfigError("workload=custom needs workload.layers "
                        "(name:m:k[:repeat[:cpu_other_ns]];...)");
    for (const std::string& item : split(layers, ';')) {
      if (item.empty()) continue;
      std::vector<std::string> parts = split(item, ':');
      if (parts.size() < 3 || parts.size() > 5)
        throw ConfigError("layer '" + item + "' wants name:m:k[:repeat[:cpu_other_ns]]");
      WorkloadLayer l;
      l.name = parts[0];
      try {
        l.m = std::stoull(parts[1]);
        l.k = std::stoull(parts[2]);
        if (parts.size() > 3) l.repeat = std::stoull(parts[3]);
        if (parts.size() > 4) l.cpu_other_ns = std::stod(parts[4]);
      } catch (const std::exception&) {
        throw ConfigError("layer '" + item + "' has a malformed number");
      }
      spec.layers.push_back(std::move(l));
    }
  } else {
    spec = WorkloadSpec::builtin(name);
  }
  spec.batch = cfg.get_u64("workload.batch", spec.batch);
  spec.seq_len = cfg.get_u64("workload.seq_len", spec.seq_len);
  spec.reshape_seq = cfg.get_bool("workload.reshape_seq", spec.reshape_seq);
  spec.grow_seq = cfg.get_bool("workload.grow_seq", spec.grow_seq);
  return spec;
}

int cmd_run_workload(Config& cfg, const std::string& out_path,
                     const std::string& plot_path, bool exhaustive) {
  WorkloadSpec spec = workload_from(cfg);
  WorkloadSystem sys;
  sys.map = mapping_from(cfg);
  sys.timing = timing_from(cfg);
  sys.energy = energy_from(cfg);
  TopologyKnobs knobs = topology_from(cfg);
  sys.base = knobs.at(PimLevel::Channel);
  sys.bus = bus_from(cfg);
  sys.mode = parse_mode(cfg.get_str("mode", "stp"));
  sys.exhaustive = exhaustive || cfg.get_bool("exhaustive", false);
  cfg.reject_unknown();

  WorkloadReport rep = run_workload(spec, sys);

  json j;
  j["command"] = "run-workload";
  j["config"] = cfg.echo();
  j["workload"] = rep.workload;
  j["iterations"] = rep.iterations;
  json runs = json::array();
  for (const LayerRun& r : rep.runs) {
    json rj;
    rj["layer"] = r.layer;
    rj["iteration"] = r.iteration;
    rj["m"] = r.m;
    rj["k"] = r.k;
    rj["n"] = r.n;
    rj["repeat"] = r.repeat;
    rj["ns"] = r.ns;
    rj["energy_j"] = r.energy_j;
    json panels = json::array();
    for (const PanelRun& p : r.panels)
      panels.push_back({{"m", p.m},
                        {"k", p.k},
                        {"row0", p.row0},
                        {"col0", p.col0},
                        {"level", pim_level_name(p.level)},
                        {"subset_denominator", p.subset_denominator},
                        {"active_pims", p.active_pims},
                        {"total_cycles", p.total_cycles},
                        {"ns", p.ns},
                        {"energy_j", p.energy_j}});
    rj["panels"] = panels;
    runs.push_back(rj);
  }
  j["runs"] = runs;
  j["totals"] = {{"gemm_ns", rep.gemm_ns},
                 {"cpu_other_ns", rep.cpu_other_ns},
                 {"total_ns", rep.total_ns},
                 {"energy_j", rep.energy_j}};
  emit_report(j, out_path);

  if (!plot_path.empty()) {
    std::ostringstream csv;
    csv << "workload,layer,iteration,panel,m,k,n,level,subset_denominator,"
           "active_pims,repeat,ns,energy_j\n";
    for (const LayerRun& r : rep.runs) {
      for (std::size_t pi = 0; pi < r.panels.size(); ++pi) {
        const PanelRun& p = r.panels[pi];
        csv << csv_escape(rep.workload) << ',' << csv_escape(r.layer) << ','
            << r.iteration << ',' << pi << ',' << p.m << ',' << p.k << ','
            << r.n << ',' << pim_level_name(p.level) << ','
            << p.subset_denominator << ',' << p.active_pims << ',' << r.repeat
            << ',' << p.ns << ',' << p.energy_j << '\n';
      }
    }
    write_text(plot_path, csv.str());
  }
  return 0;
}

int cmd_sweep(const ConfigStore& base, const std::string& out_path,
              const std::string& plot_path) {
  // Swept keys in declaration order; the cartesian product nests the first
  // key outermost, so output order follows the config.
  std::vector<std::pair<std::string, std::vector<std::string>>> axes;
  for (const std::string& key : base.order) {
    if (key.rfind("sweep.", 0) != 0) continue;
    std::vector<std::string> vals = split(base.values.at(key), ',');
    if (vals.empty()) throw ConfigError("sweep key '" + key + "' has no values");
    axes.push_back({key.substr(6), vals});
  }
  if (axes.empty()) throw ConfigError("sweep needs at least one sweep.<key> list");

  std::uint64_t total = 1;
  for (const auto& [key, vals] : axes) total *= vals.size();

  struct JobSlot {
    json overrides;
    json report;
    std::string error;
  };
  std::vector<JobSlot> slots(total);
  std::vector<ConfigStore> stores(total);
  for (std::uint64_t idx = 0; idx < total; ++idx) {
    ConfigStore job = base;
    std::uint64_t rem = idx;
    std::map<std::string, std::string> picked;
    for (std::size_t a = axes.size(); a-- > 0;) {
      const auto& [key, vals] = axes[a];
      std::uint64_t pick = rem % vals.size();
      rem /= vals.size();
      job.set(key, vals[pick]);
      picked[key] = vals[pick];
    }
    json over = json::object();
    for (const auto& [key, vals] : axes) over[key] = picked[key];
    slots[idx].overrides = std::move(over);
    stores[idx] = std::move(job);
  }

  Config probe(&base);
  std::uint64_t jobs = probe.get_u64("jobs", 0);
  if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
  jobs = std::min<std::uint64_t>(jobs, total);

  std::set<std::string> touched_union = probe.touched();
  std::mutex touched_mu;
  std::atomic<std::uint64_t> next{0};
  auto worker = [&] {
    for (;;) {
      std::uint64_t idx = next.fetch_add(1);
      if (idx >= total) return;
      try {
        Config cfg(&stores[idx]);
        GemmJob gem = job_from(cfg);
        json rep = execute_gemm(gem, false, false);
        json out;
        out["config"] = cfg.echo();
        for (auto& [key, val] : rep.items()) out[key] = val;
        slots[idx].report = std::move(out);
        std::lock_guard<std::mutex> lock(touched_mu);
        touched_union.insert(cfg.touched().begin(), cfg.touched().end());
      } catch (const std::exception& e) {
        slots[idx].error = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::uint64_t t = 0; t < jobs; ++t) pool.emplace_back(worker);
  for (std::thread& t : pool) t.join();

  for (std::uint64_t idx = 0; idx < total; ++idx)
    if (!slots[idx].error.empty())
      throw ConfigError("sweep job " + std::to_string(idx) + " failed: " +
                        slots[idx].error);

  std::set<std::string> ok_keys;
  for (const auto& [key, vals] : axes) ok_keys.insert("sweep." + key);
  reject_unconsumed(base, touched_union, ok_keys);

  json j;
  j["command"] = "sweep";
  json axes_j = json::array();
  for (const auto& [key, vals] : axes) axes_j.push_back({{"key", key}, {"values", vals}});
  j["axes"] = axes_j;
  j["job_count"] = total;
  json out_jobs = json::array();
  for (std::uint64_t idx = 0; idx < total; ++idx) {
    json job = {{"index", idx}, {"overrides", slots[idx].overrides}};
    for (auto& [key, val] : slots[idx].report.items()) job[key] = val;
    out_jobs.push_back(std::move(job));
  }
  j["jobs"] = out_jobs;
  emit_report(j, out_path);

  if (!plot_path.empty()) {
    std::ostringstream csv;
    csv << "index";
    for (const auto& [key, vals] : axes) csv << ',' << csv_escape(key);
    csv << ",level,mode," << kGemmCsvColumns << '\n';
    for (std::uint64_t idx = 0; idx < total; ++idx) {
      const json& rep = slots[idx].report;
      csv << idx;
      for (const auto& [key, vals] : axes)
        csv << ',' << csv_escape(slots[idx].overrides[key].get<std::string>());
      csv << ',' << rep["level"].get<std::string>() << ','
          << rep["mode"].get<std::string>() << ',';
      gemm_csv_row(csv, rep);
      csv << '\n';
    }
    write_text(plot_path, csv.str());
  }
  return 0;
}

int cmd_roofline(Config& cfg, const std::string& out_path,
                 const std::string& plot_path) {
  GemmJob job = job_from(cfg);
  std::vector<std::string> batches =
      split(cfg.get_str("roofline.batches", "1,2,4,8,16,32,64,128,256"), ',');
  cfg.reject_unknown();

  json points = json::array();
  std::ostringstream csv;
  csv << "level,n,intensity,bound_gflops,peak_gflops,bandwidth_gbps\n";
  for (PimLevel level :
       {PimLevel::Channel, PimLevel::Device, PimLevel::BankGroup}) {
    for (const std::string& bs : batches) {
      std::uint64_t n = 0;
      try {
        n = std::stoull(bs);
      } catch (const std::exception&) {
        throw ConfigError("roofline.batches entry '" + bs + "' is not a number");
      }
      RooflinePoint p = roofline(job.topo.at(level), job.timing, job.geom, n);
      points.push_back({{"level", pim_level_name(level)},
                        {"n", n},
                        {"intensity", p.intensity},
                        {"bound_gflops", p.bound_gflops},
                        {"peak_gflops", p.peak_gflops},
                        {"bandwidth_gbps", p.bandwidth_gbps}});
      csv << pim_level_name(level) << ',' << n << ',' << p.intensity << ','
          << p.bound_gflops << ',' << p.peak_gflops << ',' << p.bandwidth_gbps
          << '\n';
    }
  }

  json j;
  j["command"] = "roofline";
  j["config"] = cfg.echo();
  j["m"] = job.geom.m_rows;
  j["k"] = job.geom.k_cols;
  j["points"] = points;
  emit_report(j, out_path);
  if (!plot_path.empty()) write_text(plot_path, csv.str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"StepStone PIM GEMM simulator"};
  app.require_subcommand(1);

  std::vector<std::string> config_files;
  std::vector<std::string> sets;
  std::vector<std::string> flag_sets;
  std::string out_path;
  std::string plot_path;
  app.add_option("--config", config_files, "layered key=value config file")
      ->allow_extra_args(false);
  app.add_option("--set", sets, "override: key=value")->allow_extra_args(false);
  app.add_option("--out", out_path, "write the JSON report here instead of stdout");
  app.add_option("--emit-plot-data", plot_path, "write tidy CSV points here");

  auto add_gemm_flags = [&](CLI::App* cmd, bool with_level = true) {
    cmd->add_option_function<std::string>(
        "--mapping",
        [&](const std::string& v) { flag_sets.push_back("mapping=" + v); },
        "mapping name under configs/ or a file path");
    cmd->add_option_function<std::uint64_t>(
        "-m,--m",
        [&](std::uint64_t v) { flag_sets.push_back("m=" + std::to_string(v)); },
        "A rows");
    cmd->add_option_function<std::uint64_t>(
        "-k,--k",
        [&](std::uint64_t v) { flag_sets.push_back("k=" + std::to_string(v)); },
        "A columns");
    cmd->add_option_function<std::uint64_t>(
        "-n,--n",
        [&](std::uint64_t v) { flag_sets.push_back("n=" + std::to_string(v)); },
        "batch: B columns");
    if (with_level)
      cmd->add_option_function<std::string>(
          "--level",
          [&](const std::string& v) { flag_sets.push_back("level=" + v); },
          "auto, channel, device, or bankgroup");
    cmd->add_option_function<std::string>(
        "--mode", [&](const std::string& v) { flag_sets.push_back("mode=" + v); },
        "stp, echo, ncho, or pei");
    cmd->add_option_function<std::uint64_t>(
        "--seed",
        [&](std::uint64_t v) { flag_sets.push_back("seed=" + std::to_string(v)); },
        "RNG seed for generated operands");
  };

  CLI::App* c_validate = app.add_subcommand("validate-mapping",
                                            "parse a mapping and report its structure");
  c_validate->add_option_function<std::string>(
      "--mapping",
      [&](const std::string& v) { flag_sets.push_back("mapping=" + v); },
      "mapping name under configs/ or a file path");

  CLI::App* c_plan = app.add_subcommand("plan", "score placement levels and subsets");
  add_gemm_flags(c_plan, false);
  c_plan->add_flag_function(
      "--quarters", [&](std::int64_t) { flag_sets.push_back("quarters=1"); },
      "also consider quarter subsets");

  CLI::App* c_agen = app.add_subcommand("agen-trace",
                                        "dump one unit's generated address stream");
  add_gemm_flags(c_agen);
  c_agen->add_option_function<std::uint64_t>(
      "--pim",
      [&](std::uint64_t v) { flag_sets.push_back("agen.pim=" + std::to_string(v)); },
      "unit id");
  c_agen->add_option_function<std::uint64_t>(
      "--group",
      [&](std::uint64_t v) { flag_sets.push_back("agen.group=" + std::to_string(v)); },
      "block group");
  c_agen->add_option_function<std::uint64_t>(
      "--limit",
      [&](std::uint64_t v) { flag_sets.push_back("agen.limit=" + std::to_string(v)); },
      "stop after this many steps (0: all)");

  CLI::App* c_run = app.add_subcommand("run", "simulate one GEMM");
  add_gemm_flags(c_run);
  bool verify = false;
  bool dump_plan = false;
  c_run->add_flag("--verify", verify,
                  "execute with generated operands and check the result");
  c_run->add_flag("--dump-plan", dump_plan, "include the execution plan");
  c_run->add_option_function<std::string>(
      "--choose", [&](const std::string& v) { flag_sets.push_back("level=" + v); },
      "force the placement level");
  c_run->add_flag_function(
      "--naive", [&](std::int64_t) { flag_sets.push_back("naive=1"); },
      "pay naive per-block address generation");

  CLI::App* c_workload = app.add_subcommand("run-workload",
                                            "simulate a model's GEMM layers");
  bool exhaustive = false;
  c_workload->add_option_function<std::string>(
      "--workload",
      [&](const std::string& v) { flag_sets.push_back("workload=" + v); },
      "built-in name or custom");
  c_workload->add_option_function<std::string>(
      "--mapping",
      [&](const std::string& v) { flag_sets.push_back("mapping=" + v); },
      "mapping name under configs/ or a file path");
  c_workload->add_flag("--exhaustive", exhaustive,
                       "simulate every feasible candidate, keep the fastest");

  CLI::App* c_sweep = app.add_subcommand("sweep", "fan a run over sweep.<key> lists");
  add_gemm_flags(c_sweep);
  c_sweep->add_option_function<std::uint64_t>(
      "--jobs",
      [&](std::uint64_t v) { flag_sets.push_back("jobs=" + std::to_string(v)); },
      "worker threads (0: all cores)");

  CLI::App* c_roofline = app.add_subcommand("roofline",
                                            "intensity bounds per level and batch");
  add_gemm_flags(c_roofline, false);

  for (CLI::App* sub : app.get_subcommands([](const CLI::App*) { return true; }))
    sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    ConfigStore store;
    for (const std::string& f : config_files) store.load_file(f);
    for (const std::string& s : sets) store.set_pair(s);
    for (const std::string& s : flag_sets) store.set_pair(s);

    if (*c_sweep) return cmd_sweep(store, out_path, plot_path);

    Config cfg(&store);
    if (*c_validate) return cmd_validate_mapping(cfg, out_path);
    if (*c_plan) return cmd_plan(cfg, out_path);
    if (*c_agen) return cmd_agen_trace(cfg, out_path, plot_path);
    if (*c_run) return cmd_run(cfg, out_path, plot_path, verify, dump_plan);
    if (*c_workload) return cmd_run_workload(cfg, out_path, plot_path, exhaustive);
    if (*c_roofline) return cmd_roofline(cfg, out_path, plot_path);
    return 1;
  } catch (const VerificationFailure& e) {
    std::cerr << "verification failure: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
