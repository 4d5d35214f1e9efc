// Config-driven experiment runner: build toy instances, train twists, sweep
// log Z bounds over K, evaluate KL divergences, dump oracle tables. Commands
// are pure functions of (config, seed): reruns produce byte-identical output.
//
// Exit codes: 0 success, 2 config/contract error, 3 numerical divergence.

#include <cinttypes>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "twistsmc/checkpoint.hpp"
#include "twistsmc/config.hpp"
#include "twistsmc/engine.hpp"
#include "twistsmc/learn.hpp"
#include "twistsmc/oracle.hpp"

using json = nlohmann::json;
using namespace twistsmc;

namespace {

constexpr const char* kBoundsCsvSchema = "bounds-csv-v1";
constexpr const char* kTraceCsvSchema = "trace-csv-v1";
constexpr const char* kKlCsvSchema = "kl-csv-v1";
constexpr const char* kOracleCsvSchema = "oracle-csv-v1";

std::string fmt(double x) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}

struct OutputDir {
  std::filesystem::path path;

  explicit OutputDir(const Config& cfg, const std::string& cli_override) {
    std::string dir = cfg.get("output.dir", "out");
    if (const char* env = std::getenv("TWISTSMC_OUT")) dir = env;
    if (!cli_override.empty()) dir = cli_override;
    path = dir;
    std::filesystem::create_directories(path);
  }

  std::ofstream open(const std::string& name) const {
    std::ofstream out(path / name, std::ios::trunc);
    if (!out) throw BadInput("cannot open output file " + name);
    return out;
  }
};

void write_manifest(const OutputDir& out, const std::string& name,
                    const json& j) {
  auto f = out.open(name);
  f << j.dump(2) << "\n";
}

struct Runtime {
  Instance inst;
  std::unique_ptr<OracleTable> oracle;  // null when the guard is exceeded
  ResampleSchedule schedule;
  int n_threads = 1;

  explicit Runtime(const Config& cfg) : inst(build_instance(cfg)) {
    schedule = build_schedule(cfg);
    n_threads = static_cast<int>(cfg.get_int("engine.n_threads", 1));
    try {
      oracle =
          std::make_unique<OracleTable>(enumerate(inst.spec, inst.enum_guard));
    } catch (const TooLarge&) {
      oracle = nullptr;
    }
  }
};

std::unique_ptr<ExactSampleSource> make_exact_source(const Config& cfg,
                                                     const Runtime& rt) {
  std::string source = cfg.get("engine.exact_sample_source", "oracle");
  int budget =
      static_cast<int>(cfg.get_int("engine.rejection_budget", 1'000'000));
  if (source == "none") return nullptr;
  if (source == "oracle") {
    if (!rt.oracle)
      throw BadConfig("exact_sample_source=oracle: instance exceeds the "
                      "enumeration guard");
    return std::make_unique<OracleExactSource>(*rt.oracle);
  }
  if (source == "rejection")
    return std::make_unique<RejectionExactSource>(rt.inst.spec, budget);
  if (source == "bdmc")
    return std::make_unique<BdmcExactSource>(rt.inst.spec, budget);
  throw BadConfig("unknown engine.exact_sample_source '" + source + "'");
}

// ---------------------------------------------------------------------------
// bounds: one CSV row per (method, K, run, bound_side)
// ---------------------------------------------------------------------------

int cmd_bounds(const Config& cfg, const std::string& out_override) {
  Runtime rt(cfg);
  OutputDir out(cfg, out_override);
  TwistSet tw = build_twists(cfg, rt.inst, rt.oracle.get());
  FinalStepMode final_mode =
      cfg.get("twist.final_step", "exact_phi") == "learned_psi"
          ? FinalStepMode::learned_psi
          : FinalStepMode::exact_phi;

  auto methods = cfg.get_list("engine.methods",
                              "sis_base,sis_twisted,smc_base,smc_twisted");
  for (const auto& m : methods)
    if (m != "sis_base" && m != "sis_twisted" && m != "smc_base" &&
        m != "smc_twisted")
      throw BadConfig("bounds: unknown method '" + m + "'");
  auto k_list = cfg.get_int_list("engine.k_list", "1,4,16,64");
  int n_runs = static_cast<int>(cfg.get_int("engine.n_runs", 20));
  bool want_ub = cfg.get("engine.bounds", "both") == "both";
  bool ub_redraw = cfg.get_bool("engine.ub_redraw", true);
  auto source = make_exact_source(cfg, rt);
  if (want_ub && !source)
    throw BadConfig("bounds: upper bounds requested but "
                    "engine.exact_sample_source = none");

  BaseProposal base;
  TwistInducedProposal twisted(tw, final_mode);
  RngStream root = RngStream::from_seed(rt.inst.seed);

  struct Cell {
    int method_idx = 0;
    int k = 0;
    int run = 0;
    double lb = 0.0, ub = 0.0;
    bool has_ub = false;
  };
  std::vector<Cell> cells;
  for (std::size_t mi = 0; mi < methods.size(); ++mi)
    for (int k : k_list)
      for (int run = 0; run < n_runs; ++run)
        cells.push_back({static_cast<int>(mi), k, run});

  // exact samples drawn serially up front so worker threads stay independent
  std::vector<Sequence> exacts;
  if (want_ub) {
    RngStream draw = root.substream(rngtag::exact_sample);
    exacts.reserve(cells.size());
    Sequence held;
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i == 0 || ub_redraw) held = source->draw(draw);
      exacts.push_back(held);
    }
  }

  detail::for_each_particle(
      static_cast<int>(cells.size()), rt.n_threads, [&](int i) {
        Cell& c = cells[i];
        const std::string& m = methods[c.method_idx];
        bool sis = m.rfind("sis", 0) == 0;
        bool use_twisted = m.find("twisted") != std::string::npos;
        const Proposal& q = use_twisted ? static_cast<const Proposal&>(twisted)
                                        : static_cast<const Proposal&>(base);
        SmcOptions opt;
        opt.schedule = sis ? ResampleSchedule::never() : rt.schedule;
        RngStream cell_base =
            root.substream(0xb0 + c.method_idx,
                           static_cast<std::uint64_t>(c.k), c.run);
        auto lb = run_smc(rt.inst.spec, q, &tw, c.k,
                          cell_base.substream(rngtag::lower_bound), opt);
        c.lb = lb.log_z_hat;
        if (want_ub) {
          auto ub = run_smc_target(rt.inst.spec, q, &tw, c.k,
                                   cell_base.substream(rngtag::upper_bound),
                                   opt, exacts[i]);
          c.ub = ub.log_z_hat;
          c.has_ub = true;
        }
      });

  auto csv = out.open("bounds.csv");
  csv << "method,run_id,K,schedule,bound_side,logZ_sample\n";
  for (const Cell& c : cells) {
    const std::string& m = methods[c.method_idx];
    std::string sched =
        m.rfind("sis", 0) == 0 ? "never" : rt.schedule.name();
    csv << m << ',' << c.run << ',' << c.k << ',' << sched << ",lb,"
        << fmt(c.lb) << "\n";
    if (c.has_ub)
      csv << m << ',' << c.run << ',' << c.k << ',' << sched << ",ub,"
          << fmt(c.ub) << "\n";
  }

  json manifest{
      {"command", "bounds"},
      {"schema", kBoundsCsvSchema},
      {"columns",
       {"method", "run_id", "K", "schedule", "bound_side", "logZ_sample"}},
      {"seed", rt.inst.seed},
      {"k_list", k_list},
      {"n_runs", n_runs},
      {"schedule", rt.schedule.name()},
      {"methods", methods},
      {"potential", to_string(rt.inst.spec.potential.kind())},
      {"proposal_final_step",
       final_mode == FinalStepMode::exact_phi ? "exact_phi" : "learned_psi"},
      {"ub_redraw", ub_redraw},
  };
  if (rt.oracle) manifest["oracle_logz"] = rt.oracle->log_z;
  write_manifest(out, "bounds_manifest.json", manifest);
  return 0;
}

// ---------------------------------------------------------------------------
// train: checkpoint + trace CSV
// ---------------------------------------------------------------------------

int cmd_train(const Config& cfg, const std::string& out_override) {
  Runtime rt(cfg);
  OutputDir out(cfg, out_override);
  TwistSet init = build_twists(cfg, rt.inst, rt.oracle.get());
  learn::LossConfig lc = build_loss_config(cfg, rt.inst);
  auto result =
      learn::train(lc, rt.inst.spec, std::move(init), rt.oracle.get());

  auto csv = out.open("trace.csv");
  csv << "step,loss,grad_norm,kl_q_sigma,kl_sigma_q\n";
  for (std::size_t i = 0; i < result.trace.step.size(); ++i)
    csv << result.trace.step[i] << ',' << fmt(result.trace.loss[i]) << ','
        << fmt(result.trace.grad_norm[i]) << ','
        << fmt(result.trace.kl_q_sigma[i]) << ','
        << fmt(result.trace.kl_sigma_q[i]) << "\n";
  save_checkpoint((out.path / "twists.ckpt").string(), result.twists);

  json manifest{
      {"command", "train"},
      {"schema", kTraceCsvSchema},
      {"columns", {"step", "loss", "grad_norm", "kl_q_sigma", "kl_sigma_q"}},
      {"seed", rt.inst.seed},
      {"loss", learn::to_string(lc.loss)},
      {"steps", lc.steps},
      {"batch", lc.batch},
      {"learning_rate", lc.learning_rate},
      {"diverged", result.diverged},
      {"checkpoint", "twists.ckpt"},
  };
  if (rt.oracle) manifest["oracle_logz"] = rt.oracle->log_z;
  write_manifest(out, "train_manifest.json", manifest);
  if (result.diverged) {
    std::cerr << "train: loss diverged; trace written\n";
    return 3;
  }
  return 0;
}

// ---------------------------------------------------------------------------
// eval-kl: estimate KL(q||sigma) and KL(sigma||q) with an oracle or
// bound-midpoint log Z
// ---------------------------------------------------------------------------

int cmd_eval_kl(const Config& cfg, const std::string& checkpoint,
                const std::string& out_override) {
  Runtime rt(cfg);
  OutputDir out(cfg, out_override);
  TwistSet tw = [&] {
    if (!checkpoint.empty()) {
      TwistSet loaded = load_checkpoint(checkpoint);
      if (loaded.vocab() != rt.inst.spec.vocab() ||
          loaded.horizon() != rt.inst.spec.horizon())
        throw BadConfig("eval-kl: checkpoint does not match the instance");
      return loaded;
    }
    return build_twists(cfg, rt.inst, rt.oracle.get());
  }();

  bool view_q =
      cfg.get("eval.q", cfg.get("loss.kind", "ctl") == "dpg"
                            ? "external"
                            : "twist_induced") == "external";
  TwistInducedProposal induced(tw);
  TwistParamProposal view(tw);
  const Proposal& q_prop = view_q ? static_cast<const Proposal&>(view)
                                  : static_cast<const Proposal&>(induced);
  ProposalSequenceDistribution q(rt.inst.spec, q_prop);

  int n_q = static_cast<int>(cfg.get_int("eval.n_q_samples", 2000));
  int n_sigma = static_cast<int>(cfg.get_int("eval.n_sigma_samples", 2000));
  auto source = make_exact_source(cfg, rt);
  if (!source) throw BadConfig("eval-kl: needs an exact-sample source");
  RngStream root = RngStream::from_seed(rt.inst.seed).substream(rngtag::eval);
  std::vector<Sequence> sigma_samples;
  {
    RngStream rng = root.substream(1);
    for (int i = 0; i < n_sigma; ++i)
      sigma_samples.push_back(source->draw(rng));
  }

  std::string logz_source = cfg.get("eval.logz_source", "both");
  std::vector<std::pair<std::string, double>> logz_values;
  if (logz_source == "oracle" || logz_source == "both") {
    if (!rt.oracle)
      throw BadConfig("eval-kl: oracle log Z requested beyond the guard");
    logz_values.emplace_back("oracle", rt.oracle->log_z);
  }
  double midpoint_gap = 0.0;
  if (logz_source == "midpoint" || logz_source == "both") {
    SmcOptions opt;
    opt.schedule = rt.schedule;
    auto report = bidirectional_bounds(
        rt.inst.spec, q_prop, &tw, static_cast<int>(cfg.get_int("eval.k", 64)),
        static_cast<int>(cfg.get_int("eval.n_runs", 4)), opt, source.get(),
        root.substream(2), cfg.get_bool("engine.ub_redraw", true));
    logz_values.emplace_back("midpoint",
                             0.5 * (report.lb_mean + report.ub_mean));
    midpoint_gap = report.ub_mean - report.lb_mean;
  }
  if (logz_values.empty())
    throw BadConfig("eval-kl: unknown eval.logz_source '" + logz_source + "'");

  auto csv = out.open("kl.csv");
  csv << "direction,estimate,stderr,logZ_source\n";
  for (const auto& [name, logz] : logz_values) {
    auto kl = estimate_kls(rt.inst.spec, q, logz, n_q, sigma_samples,
                           root.substream(3));
    csv << "kl_q_sigma," << fmt(kl.kl_q_sigma) << ',' << fmt(kl.kl_q_sigma_se)
        << ',' << name << "\n";
    csv << "kl_sigma_q," << fmt(kl.kl_sigma_q) << ',' << fmt(kl.kl_sigma_q_se)
        << ',' << name << "\n";
  }

  json manifest{
      {"command", "eval-kl"},
      {"schema", kKlCsvSchema},
      {"columns", {"direction", "estimate", "stderr", "logZ_source"}},
      {"seed", rt.inst.seed},
      {"n_q_samples", n_q},
      {"n_sigma_samples", n_sigma},
      {"q", view_q ? "external" : "twist_induced"},
      {"midpoint_gap", midpoint_gap},
  };
  if (rt.oracle) manifest["oracle_logz"] = rt.oracle->log_z;
  write_manifest(out, "kl_manifest.json", manifest);
  return 0;
}

// ---------------------------------------------------------------------------
// oracle-dump: marginal and optimal-twist tables as CSV
// ---------------------------------------------------------------------------

int cmd_oracle_dump(const Config& cfg, const std::string& out_override) {
  Runtime rt(cfg);
  OutputDir out(cfg, out_override);
  if (!rt.oracle)
    throw BadConfig("oracle-dump: instance exceeds the enumeration guard");
  const OracleTable& table = *rt.oracle;
  auto csv = out.open("oracle.csv");
  csv << "table,t,prefix,log_value\n";
  for (int t = 1; t <= table.horizon; ++t)
    for (std::uint64_t r = 0; r < table.log_marginal[t - 1].size(); ++r) {
      std::string prefix =
          configdetail::tokens_to_string(prefix_from_rank(r, t, table.vocab));
      csv << "marginal," << t << ',' << prefix << ','
          << fmt(table.log_marginal[t - 1][r]) << "\n";
      csv << "psi," << t << ',' << prefix << ','
          << fmt(table.log_psi[t - 1][r]) << "\n";
    }
  json manifest{
      {"command", "oracle-dump"},
      {"schema", kOracleCsvSchema},
      {"columns", {"table", "t", "prefix", "log_value"}},
      {"seed", rt.inst.seed},
      {"oracle_logz", table.log_z},
      {"fingerprint", table.fingerprint},
  };
  write_manifest(out, "oracle_manifest.json", manifest);
  return 0;
}

int cmd_config_reference() {
  std::cout <<
      R"(# twistsmc config reference (INI; '#' comments; all keys optional unless noted)

seed = 42                      # REQUIRED global seed; every command is a pure
                               # function of (config, seed)

[model]
kind = iid                     # iid | markov1 | full_context
V = 2                          # vocabulary size (>= 2)
T = 2                          # horizon (>= 1)
seed = <global seed>           # model table seed
concentration = 1.0            # symmetric Dirichlet concentration
probs = 0.5,0.5                # explicit iid row (hand-built fixtures)
init = ...                     # explicit markov1 initial row
row0 = ...                     # explicit markov1 transition rows, one per token

[target]
potential = unit               # unit | indicator_threshold | exp_reward |
                               # classifier_prob | tabular_terminal |
                               # continuation_likelihood | intermediate_product
eta = 0.0                      # indicator threshold (accept r <= eta)
eps = 1e-16                    # indicator smoothing floor
beta = 1.0                     # exp_reward strength
table_csv = r.csv              # rows: <dotted seq>,<value>
table_default = 0.0            # table fallback value
continuation = 1.0.1           # fixed continuation tokens (continuation kind)
step_table_csv = phi.csv       # rows: <t>,<dotted seq>,<value>
observation = none             # none | continuation | tabular
c = 1                          # continuation observation length
obs_alphabet = 2               # tabular observation alphabet size
obs_default = 0.5,0.5          # tabular observation default row
obs_csv = obs.csv              # rows: <dotted seq>,<obs id>,<prob>
conditioning = 0               # obs id, or dotted tokens for continuation

[twist]
kind = tabular                 # tabular | mlp
head = log                     # log | prob (prob required by the fudge loss)
source = zero                  # zero | random | oracle | checkpoint
checkpoint = twists.ckpt       # checkpoint path for source = checkpoint
init_seed = <seed^0x7715>      # randomize seed for source = random
init_scale = 0.1               # randomize scale
hidden = 32                    # mlp hidden width
window = 0                     # mlp token window (0 means T)
root_value = false             # add the empty-prefix value cell (pcl1)
final_step = exact_phi         # exact_phi | learned_psi proposal at t = T

[loss]
kind = ctl                     # ctl | rl | softq | sixo | fudge | cdq |
                               # cdfudge | pcl1 | dpg
positive_source = approximate_sis  # exact_oracle | exact_rejection |
                               # exact_bdmc | approximate_sis | approximate_smc
negative_proposal = twist_induced  # base | twist_induced
batch = 64
learning_rate = 1e-3           # default 1e-4 for mlp twists
steps = 1000
seed = <global seed>
optimizer = adam               # adam | sgd (adam: beta1 0.9, beta2 0.999)
adam_beta1 = 0.9
adam_beta2 = 0.999
log_every = 100

[engine]
k_list = 1,4,16,64             # particle counts for sweeps
schedule = every_step          # never | every_step | ess[:frac] | at:t1,t2
n_runs = 20                    # runs per (method, K) cell
methods = sis_base,sis_twisted,smc_base,smc_twisted
bounds = both                  # both | lb
exact_sample_source = oracle   # oracle | rejection | bdmc | none
ub_redraw = true               # fresh exact sample per UB run
rejection_budget = 1000000
n_threads = 1                  # parallel (K, run) cells; results are
                               # bitwise identical to sequential mode

[oracle]
guard = 2000000                # max V^T for enumeration

[eval]
n_q_samples = 2000
n_sigma_samples = 2000
logz_source = both             # oracle | midpoint | both
k = 64                         # K for midpoint bounds
n_runs = 4                     # bound runs per side for the midpoint
q = twist_induced              # twist_induced | external (the dpg view)

[output]
dir = out                      # overridden by TWISTSMC_OUT or --out-dir
)";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"twisted sequential Monte Carlo toolkit"};
  app.require_subcommand(1);
  std::string config_path, checkpoint_path, out_dir;

  auto add_config = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "experiment config file")
        ->required();
    cmd->add_option("--out-dir", out_dir, "output directory override");
  };

  CLI::App* bounds = app.add_subcommand("bounds", "sweep log Z bounds over K");
  add_config(bounds);
  CLI::App* train = app.add_subcommand("train", "train twists or a proposal");
  add_config(train);
  CLI::App* evalkl = app.add_subcommand("eval-kl", "estimate both KLs");
  add_config(evalkl);
  evalkl->add_option("--checkpoint", checkpoint_path, "twist checkpoint");
  CLI::App* dump = app.add_subcommand("oracle-dump", "dump oracle tables");
  add_config(dump);
  app.add_subcommand("config-reference", "print the config key reference");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("config-reference")) return cmd_config_reference();
    Config cfg = Config::parse_file(config_path);
    if (app.got_subcommand("bounds")) return cmd_bounds(cfg, out_dir);
    if (app.got_subcommand("train")) return cmd_train(cfg, out_dir);
    if (app.got_subcommand("eval-kl"))
      return cmd_eval_kl(cfg, checkpoint_path, out_dir);
    if (app.got_subcommand("oracle-dump")) return cmd_oracle_dump(cfg, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
