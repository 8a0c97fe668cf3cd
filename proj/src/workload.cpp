#include "stepstone/workload.hpp"

#include <string>
#include <utility>

namespace stepstone {

namespace {

WorkloadSpec transformer(std::string name, std::uint64_t d_model,
                         std::uint64_t d_ff, std::uint64_t blocks,
                         bool projection) {
  WorkloadSpec s;
  s.name = std::move(name);
  s.layers = {{"mlp-fc1", d_model, d_ff, blocks, 0.0},
              {"mlp-fc2", d_ff, d_model, blocks, 0.0}};
  if (projection) s.layers.push_back({"attn-proj", d_model, d_model, blocks, 0.0});
  s.batch = 4;
  s.seq_len = 8;
  return s;
}

void validate(const WorkloadSpec& spec, const WorkloadSystem& sys) {
  if (spec.layers.empty())
    throw ConfigError("workload '" + spec.name + "' has no layers");
  if (spec.batch == 0) throw ConfigError("workload batch must be at least 1");
  if (spec.seq_len == 0) throw ConfigError("sequence length must be at least 1");
  if (spec.reshape_seq && spec.grow_seq)
    throw ConfigError("reshape_seq and grow_seq are mutually exclusive");
  for (const WorkloadLayer& l : spec.layers) {
    if (l.m == 0 || l.k == 0)
      throw ConfigError("layer '" + l.name + "' has a zero dimension");
    if (l.repeat == 0) throw ConfigError("layer '" + l.name + "' repeats zero times");
    if (l.cpu_other_ns < 0.0)
      throw ConfigError("layer '" + l.name + "' has negative cpu_other_ns");
  }
  if (sys.map.total_bits() == 0)
    throw ConfigError("the system needs an address mapping");
}

PanelRun simulate_candidate(const WorkloadSystem& sys, const PlanCandidate& cand,
                            const Panel& panel, std::uint64_t n) {
  MatrixGeometry g;
  g.m_rows = panel.m;
  g.k_cols = panel.k;
  g.pinned_bits = cand.pinned_bits;
  PimTopology topo = PimTopology::for_level(cand.level, sys.base.channels,
                                            sys.base.ranks_per_channel);
  GemmPlan plan =
      make_plan(sys.map, g, n, cand.level, sys.mode, topo.scratchpad_bytes);
  SimReport sim = simulate(plan_trace(plan), topo, sys.timing, sys.bus);
  EnergyReport joules = energy(sim, sys.energy, cand.level);

  PanelRun out;
  out.m = panel.m;
  out.k = panel.k;
  out.row0 = panel.row0;
  out.col0 = panel.col0;
  out.level = cand.level;
  out.subset_denominator = cand.subset_denominator;
  out.active_pims = cand.active_pims;
  out.total_cycles = sim.total_cycles;
  out.ns = sim.total_ns;
  out.energy_j = joules.total_j;
  return out;
}

}  // namespace

const std::vector<WorkloadSpec>& WorkloadSpec::builtins() {
  static const std::vector<WorkloadSpec> specs = [] {
    std::vector<WorkloadSpec> v;

    WorkloadSpec dlrm;
    dlrm.name = "dlrm-rm3";
    dlrm.layers = {{"bot-fc1", 2560, 512, 1, 0.0},
                   {"bot-fc2", 512, 32, 1, 0.0},
                   {"top-fc1", 512, 128, 1, 0.0},
                   {"top-fc2", 128, 1, 1, 0.0}};
    dlrm.batch = 4;
    v.push_back(std::move(dlrm));

    WorkloadSpec bert = transformer("bert", 1024, 4096, 24, true);
    bert.reshape_seq = true;
    v.push_back(std::move(bert));

    v.push_back(transformer("gpt2", 1600, 6400, 48, true));

    WorkloadSpec xlm = transformer("xlm", 2048, 8192, 12, false);
    xlm.grow_seq = true;
    v.push_back(std::move(xlm));
    return v;
  }();
  return specs;
}

const WorkloadSpec& WorkloadSpec::builtin(std::string_view name) {
  for (const WorkloadSpec& s : builtins())
    if (s.name == name) return s;
  throw ConfigError("no built-in workload named '" + std::string(name) + "'");
}

WorkloadReport run_workload(const WorkloadSpec& spec, const WorkloadSystem& sys) {
  validate(spec, sys);
  const std::uint64_t epb = sys.map.block_bytes() / MatrixGeometry{}.elem_bytes;

  WorkloadReport rep;
  rep.workload = spec.name;
  rep.iterations = spec.grow_seq ? spec.seq_len : 1;

  for (std::uint64_t it = 1; it <= rep.iterations; ++it) {
    std::uint64_t n = spec.batch;
    if (spec.reshape_seq) n = spec.batch * spec.seq_len;
    if (spec.grow_seq) n = spec.batch * it;

    for (const WorkloadLayer& layer : spec.layers) {
      LayerRun lr;
      lr.layer = layer.name;
      lr.iteration = it;
      lr.m = layer.m;
      lr.k = (layer.k + epb - 1) / epb * epb;
      lr.n = n;
      lr.repeat = layer.repeat;

      for (const Panel& panel : decompose_non_pow2(lr.m, lr.k)) {
        MatrixGeometry pg;
        pg.m_rows = panel.m;
        pg.k_cols = panel.k;
        LevelChoice choice =
            choose_level(sys.map, pg, n, sys.base, {sys.timing, false});

        PanelRun best = simulate_candidate(sys, choice.chosen, panel, n);
        if (sys.exhaustive) {
          for (const PlanCandidate& cand : choice.table) {
            if (!cand.feasible) continue;
            if (cand.level == choice.chosen.level &&
                cand.subset_denominator == choice.chosen.subset_denominator)
              continue;
            PanelRun pr = simulate_candidate(sys, cand, panel, n);
            if (pr.ns < best.ns) best = pr;
          }
        }
        lr.ns += best.ns;
        lr.energy_j += best.energy_j;
        lr.panels.push_back(std::move(best));
      }

      rep.gemm_ns += double(layer.repeat) * lr.ns;
      rep.energy_j += double(layer.repeat) * lr.energy_j;
      rep.cpu_other_ns += double(layer.repeat) * layer.cpu_other_ns;
      rep.runs.push_back(std::move(lr));
    }
  }

  rep.total_ns = rep.gemm_ns + rep.cpu_other_ns;
  return rep;
}

}  // namespace stepstone
